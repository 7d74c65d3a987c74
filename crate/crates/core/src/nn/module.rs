use crate::nn::{BatchNorm, ConvParams};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a model parameter.
    Trainable,
    /// State saved with the model but not trained (BN running statistics).
    Buffer,
}

/// Named traversal over the tensors of a layer tree. Names are dotted
/// paths such as `blocks.3.branch1.weight`.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, kind| {
            if kind == ParamKind::Trainable {
                n += t.len();
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Float> Module<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(
            &join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        );
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &self.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &self.running_var,
            ParamKind::Buffer,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(
            &join(prefix, "gamma"),
            &mut self.gamma,
            ParamKind::Trainable,
        );
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        f(
            &join(prefix, "running_mean"),
            &mut self.running_mean,
            ParamKind::Buffer,
        );
        f(
            &join(prefix, "running_var"),
            &mut self.running_var,
            ParamKind::Buffer,
        );
    }
}
