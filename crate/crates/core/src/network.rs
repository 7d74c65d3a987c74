//! The multi-branch attention block and the full dehazing network.
//!
//! The trunk runs at half resolution:
//!
//! ```text
//! f0 = relu(head(x))                      3 -> 64, full resolution
//! d  = relu(down(f0))                     stride 2
//! d  = blocks(d)                          6 MA blocks at width 64
//! u  = relu(up_conv(bilinear_x2(d)))
//! s  = shrink(u) + skip_shrink(f0)        64 -> 16, long skip from f0
//! y  = x + tail(reflection_pad(s, 3))     16 -> 3, 7x7
//! ```
//!
//! A block exists in one of two bodies. The multi-branch body computes
//! `conv3(x) + conv1(x) + x` followed by batch norm; the fused body replaces
//! all of that with one 3x3 convolution (see [`crate::reparam`]). ReLU,
//! attention and the local residual follow in both forms.

use rand::Rng;

use crate::attention::{
    ChannelAttention, SpatialAttention, DEFAULT_CA_REDUCTION, DEFAULT_SA_HIDDEN,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, BatchStats, ConvParams, Module, PaddingMode, ParamKind};
use crate::tensor::{Float, Tensor};

/// Spatial size multiple the network forward requires.
pub const REQUIRED_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    Training,
    Fused,
}

impl Form {
    pub fn tag(self) -> u8 {
        match self {
            Form::Training => 0,
            Form::Fused => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Form> {
        match tag {
            0 => Some(Form::Training),
            1 => Some(Form::Fused),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionOrder {
    SpatialFirst,
    ChannelFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockFlags {
    pub use_bn: bool,
    pub use_attention: bool,
    pub use_local_residual: bool,
    /// One BN per branch before the sum instead of one after it. Only
    /// meaningful together with `use_bn`; such blocks cannot be fused.
    pub bn_per_branch: bool,
    pub attention_order: AttentionOrder,
}

impl Default for BlockFlags {
    fn default() -> Self {
        BlockFlags {
            use_bn: true,
            use_attention: true,
            use_local_residual: true,
            bn_per_branch: false,
            attention_order: AttentionOrder::SpatialFirst,
        }
    }
}

/// Named structural variants used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain multi-branch blocks: no BN, no attention, no local residual.
    Base,
    BnAttention,
    /// The default network.
    Full,
    /// Full network with a BN on each branch instead of after the sum.
    PerBranchBn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Base,
        Variant::BnAttention,
        Variant::Full,
        Variant::PerBranchBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BnAttention => "bn-am",
            Variant::Full => "full",
            Variant::PerBranchBn => "per-branch-bn",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn flags(self) -> BlockFlags {
        let on = BlockFlags::default();
        match self {
            Variant::Base => BlockFlags {
                use_bn: false,
                use_attention: false,
                use_local_residual: false,
                ..on
            },
            Variant::BnAttention => BlockFlags {
                use_local_residual: false,
                ..on
            },
            Variant::Full => on,
            Variant::PerBranchBn => BlockFlags {
                bn_per_branch: true,
                ..on
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub width: usize,
    pub blocks: usize,
    pub shrink_width: usize,
    pub sa_hidden: usize,
    pub ca_reduction: usize,
    pub flags: BlockFlags,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 64,
            blocks: 6,
            shrink_width: 16,
            sa_hidden: DEFAULT_SA_HIDDEN,
            ca_reduction: DEFAULT_CA_REDUCTION,
            flags: BlockFlags::default(),
        }
    }
}

impl NetConfig {
    pub fn variant(v: Variant) -> Self {
        NetConfig {
            flags: v.flags(),
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.blocks == 0 || self.shrink_width == 0 {
            return Err(Error::config(
                "width, block count and shrink width must be positive",
            ));
        }
        if self.flags.bn_per_branch && !self.flags.use_bn {
            return Err(Error::config("bn_per_branch requires use_bn"));
        }
        if self.flags.use_attention {
            if self.sa_hidden == 0 {
                return Err(Error::config(
                    "spatial attention hidden width must be positive",
                ));
            }
            if self.ca_reduction == 0 || self.width % self.ca_reduction != 0 {
                return Err(Error::config(format!(
                    "width {} not divisible by channel attention reduction {}",
                    self.width, self.ca_reduction
                )));
            }
        }
        Ok(())
    }
}

/// Normalisation layout of a multi-branch body.
#[derive(Clone, Debug)]
pub enum BranchNorm<T: Float = f32> {
    None,
    PostSum(BatchNorm<T>),
    PerBranch {
        bn3: BatchNorm<T>,
        bn1: BatchNorm<T>,
        bn_id: BatchNorm<T>,
    },
}

#[derive(Clone, Debug)]
pub enum BlockBody<T: Float = f32> {
    MultiBranch {
        branch3: ConvParams<T>,
        branch1: ConvParams<T>,
        norm: BranchNorm<T>,
    },
    Fused(ConvParams<T>),
}

#[derive(Clone, Debug)]
pub struct MaBlock<T: Float = f32> {
    pub flags: BlockFlags,
    pub body: BlockBody<T>,
    pub sa: Option<SpatialAttention<T>>,
    pub ca: Option<ChannelAttention<T>>,
}

fn branch_norm<T: Float>(flags: &BlockFlags, c: usize) -> BranchNorm<T> {
    match (flags.use_bn, flags.bn_per_branch) {
        (false, _) => BranchNorm::None,
        (true, false) => BranchNorm::PostSum(BatchNorm::new(c)),
        (true, true) => BranchNorm::PerBranch {
            bn3: BatchNorm::new(c),
            bn1: BatchNorm::new(c),
            bn_id: BatchNorm::new(c),
        },
    }
}

impl<T: Float> MaBlock<T> {
    pub fn init<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Result<Self> {
        let c = config.width;
        let flags = config.flags;
        let branch3 = ConvParams::init(c, c, 3, 1, 1, PaddingMode::Zeros, rng)?;
        let branch1 = ConvParams::init(c, c, 1, 1, 0, PaddingMode::Zeros, rng)?;
        let (sa, ca) = if flags.use_attention {
            (
                Some(SpatialAttention::init(config.sa_hidden, rng)?),
                Some(ChannelAttention::init(c, config.ca_reduction, rng)?),
            )
        } else {
            (None, None)
        };
        Ok(MaBlock {
            flags,
            body: BlockBody::MultiBranch {
                branch3,
                branch1,
                norm: branch_norm(&flags, c),
            },
            sa,
            ca,
        })
    }

    pub fn zeros(config: &NetConfig) -> Result<Self> {
        let c = config.width;
        let flags = config.flags;
        let (sa, ca) = if flags.use_attention {
            (
                Some(SpatialAttention::zeros(config.sa_hidden)?),
                Some(ChannelAttention::zeros(c, config.ca_reduction)?),
            )
        } else {
            (None, None)
        };
        Ok(MaBlock {
            flags,
            body: BlockBody::MultiBranch {
                branch3: ConvParams::zeros(c, c, 3, 1, 1, PaddingMode::Zeros)?,
                branch1: ConvParams::zeros(c, c, 1, 1, 0, PaddingMode::Zeros)?,
                norm: branch_norm(&flags, c),
            },
            sa,
            ca,
        })
    }

    pub fn form(&self) -> Form {
        match self.body {
            BlockBody::MultiBranch { .. } => Form::Training,
            BlockBody::Fused(_) => Form::Fused,
        }
    }

    pub fn channels(&self) -> usize {
        match &self.body {
            BlockBody::MultiBranch { branch3, .. } => branch3.in_channels(),
            BlockBody::Fused(conv) => conv.in_channels(),
        }
    }

    pub fn fused(&self) -> Result<&ConvParams<T>> {
        match &self.body {
            BlockBody::Fused(conv) => Ok(conv),
            BlockBody::MultiBranch { .. } => Err(Error::state("block has no fused weights")),
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match &mut self.body {
            BlockBody::MultiBranch { norm, .. } => match norm {
                BranchNorm::None => Vec::new(),
                BranchNorm::PostSum(bn) => vec![bn],
                BranchNorm::PerBranch { bn3, bn1, bn_id } => vec![bn3, bn1, bn_id],
            },
            BlockBody::Fused(_) => Vec::new(),
        }
    }

    pub fn set_training(&mut self, training: bool) {
        for bn in self.batch_norms_mut() {
            bn.training = training;
        }
    }

    /// Forward pass. Train-mode BN layers report their batch statistics in
    /// visiting order; feed them to [`MaBlock::apply_stats`].
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, Vec<BatchStats>)> {
        if x.shape().channels != self.channels() {
            return Err(Error::Shape {
                op: "ma_block",
                lhs: x.shape(),
                rhs: x.shape().with_channels(self.channels()),
            });
        }
        let mut stats = Vec::new();
        let mut keep = |s: Option<BatchStats>| {
            if let Some(s) = s {
                stats.push(s);
            }
        };
        let body = match &self.body {
            BlockBody::Fused(conv) => conv.forward(tape, x)?,
            BlockBody::MultiBranch {
                branch3,
                branch1,
                norm,
            } => {
                let y3 = branch3.forward(tape, x)?;
                let y1 = branch1.forward(tape, x)?;
                match norm {
                    BranchNorm::None => {
                        let s = tape.add(&y3, &y1)?;
                        tape.add(&s, x)?
                    }
                    BranchNorm::PostSum(bn) => {
                        let s = tape.add(&y3, &y1)?;
                        let s = tape.add(&s, x)?;
                        let (y, st) = bn.forward(tape, &s)?;
                        keep(st);
                        y
                    }
                    BranchNorm::PerBranch { bn3, bn1, bn_id } => {
                        let (a, st) = bn3.forward(tape, &y3)?;
                        keep(st);
                        let (b, st) = bn1.forward(tape, &y1)?;
                        keep(st);
                        let (c, st) = bn_id.forward(tape, x)?;
                        keep(st);
                        let s = tape.add(&a, &b)?;
                        tape.add(&s, &c)?
                    }
                }
            }
        };
        let mut y = tape.relu(&body);
        if let (Some(sa), Some(ca)) = (&self.sa, &self.ca) {
            y = match self.flags.attention_order {
                AttentionOrder::SpatialFirst => {
                    let y = sa.forward(tape, &y)?;
                    ca.forward(tape, &y)?
                }
                AttentionOrder::ChannelFirst => {
                    let y = ca.forward(tape, &y)?;
                    sa.forward(tape, &y)?
                }
            };
        }
        if self.flags.use_local_residual {
            y = tape.add(&y, x)?;
        }
        Ok((y, stats))
    }

    pub fn apply_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut bns = self.batch_norms_mut();
        bns.retain(|bn| bn.training);
        if bns.len() != stats.len() {
            return Err(Error::contract(format!(
                "expected {} batch statistics, got {}",
                bns.len(),
                stats.len()
            )));
        }
        for (bn, s) in bns.into_iter().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }
}

impl<T: Float> Module<T> for MaBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        match &self.body {
            BlockBody::MultiBranch {
                branch3,
                branch1,
                norm,
            } => {
                branch3.visit(&join(prefix, "branch3"), f);
                branch1.visit(&join(prefix, "branch1"), f);
                match norm {
                    BranchNorm::None => {}
                    BranchNorm::PostSum(bn) => bn.visit(&join(prefix, "bn"), f),
                    BranchNorm::PerBranch { bn3, bn1, bn_id } => {
                        bn3.visit(&join(prefix, "bn3"), f);
                        bn1.visit(&join(prefix, "bn1"), f);
                        bn_id.visit(&join(prefix, "bn_id"), f);
                    }
                }
            }
            BlockBody::Fused(conv) => conv.visit(&join(prefix, "fused"), f),
        }
        if let Some(sa) = &self.sa {
            sa.visit(&join(prefix, "sa"), f);
        }
        if let Some(ca) = &self.ca {
            ca.visit(&join(prefix, "ca"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        match &mut self.body {
            BlockBody::MultiBranch {
                branch3,
                branch1,
                norm,
            } => {
                branch3.visit_mut(&join(prefix, "branch3"), f);
                branch1.visit_mut(&join(prefix, "branch1"), f);
                match norm {
                    BranchNorm::None => {}
                    BranchNorm::PostSum(bn) => bn.visit_mut(&join(prefix, "bn"), f),
                    BranchNorm::PerBranch { bn3, bn1, bn_id } => {
                        bn3.visit_mut(&join(prefix, "bn3"), f);
                        bn1.visit_mut(&join(prefix, "bn1"), f);
                        bn_id.visit_mut(&join(prefix, "bn_id"), f);
                    }
                }
            }
            BlockBody::Fused(conv) => conv.visit_mut(&join(prefix, "fused"), f),
        }
        if let Some(sa) = &mut self.sa {
            sa.visit_mut(&join(prefix, "sa"), f);
        }
        if let Some(ca) = &mut self.ca {
            ca.visit_mut(&join(prefix, "ca"), f);
        }
    }
}

/// Batch statistics of one training-mode network forward, per block.
#[derive(Clone, Debug, Default)]
pub struct NetStats {
    pub blocks: Vec<Vec<BatchStats>>,
}

#[derive(Clone, Debug)]
pub struct ErraNet<T: Float = f32> {
    pub config: NetConfig,
    pub head: ConvParams<T>,
    pub down: ConvParams<T>,
    pub blocks: Vec<MaBlock<T>>,
    pub up_conv: ConvParams<T>,
    pub shrink: ConvParams<T>,
    pub skip_shrink: ConvParams<T>,
    pub tail: ConvParams<T>,
}

impl<T: Float> ErraNet<T> {
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let head = ConvParams::init(3, c, 3, 1, 1, PaddingMode::Zeros, rng)?;
        let down = ConvParams::init(c, c, 3, 2, 1, PaddingMode::Zeros, rng)?;
        let blocks = (0..config.blocks)
            .map(|_| MaBlock::init(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let up_conv = ConvParams::init(c, c, 3, 1, 1, PaddingMode::Zeros, rng)?;
        let s = config.shrink_width;
        let shrink = ConvParams::init(c, s, 1, 1, 0, PaddingMode::Zeros, rng)?;
        let skip_shrink = ConvParams::init(c, s, 1, 1, 0, PaddingMode::Zeros, rng)?;
        let tail = ConvParams::init(s, 3, 7, 1, 3, PaddingMode::Reflection, rng)?;
        Ok(ErraNet {
            config,
            head,
            down,
            blocks,
            up_conv,
            shrink,
            skip_shrink,
            tail,
        })
    }

    /// Every convolution zero, BN layers at their initial identity. The
    /// network then restores its input unchanged.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let s = config.shrink_width;
        Ok(ErraNet {
            head: ConvParams::zeros(3, c, 3, 1, 1, PaddingMode::Zeros)?,
            down: ConvParams::zeros(c, c, 3, 2, 1, PaddingMode::Zeros)?,
            blocks: (0..config.blocks)
                .map(|_| MaBlock::zeros(&config))
                .collect::<Result<Vec<_>>>()?,
            up_conv: ConvParams::zeros(c, c, 3, 1, 1, PaddingMode::Zeros)?,
            shrink: ConvParams::zeros(c, s, 1, 1, 0, PaddingMode::Zeros)?,
            skip_shrink: ConvParams::zeros(c, s, 1, 1, 0, PaddingMode::Zeros)?,
            tail: ConvParams::zeros(s, 3, 7, 1, 3, PaddingMode::Reflection)?,
            config,
        })
    }

    pub fn form(&self) -> Form {
        self.blocks.first().map_or(Form::Training, MaBlock::form)
    }

    pub fn count_parameters(&self) -> usize {
        self.num_params()
    }

    pub fn set_training(&mut self, training: bool) {
        for b in &mut self.blocks {
            b.set_training(training);
        }
    }

    /// True if any BN layer is in training mode.
    pub fn is_training(&self) -> bool {
        self.blocks.iter().any(|b| match &b.body {
            BlockBody::MultiBranch { norm, .. } => match norm {
                BranchNorm::None => false,
                BranchNorm::PostSum(bn) => bn.training,
                BranchNorm::PerBranch { bn3, bn1, bn_id } => {
                    bn3.training || bn1.training || bn_id.training
                }
            },
            BlockBody::Fused(_) => false,
        })
    }

    /// Forward pass, discarding any batch statistics.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_stats(tape, x)?.0)
    }

    pub fn forward_with_stats(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, NetStats)> {
        let shape = x.shape();
        if shape.channels != 3 {
            return Err(Error::Shape {
                op: "network input",
                lhs: shape,
                rhs: shape.with_channels(3),
            });
        }
        if shape.height % REQUIRED_MULTIPLE != 0 || shape.width % REQUIRED_MULTIPLE != 0 {
            return Err(Error::contract(format!(
                "input size {}x{} must be a multiple of {REQUIRED_MULTIPLE}; pad the input first",
                shape.height, shape.width
            )));
        }
        let form = self.form();
        if self.blocks.iter().any(|b| b.form() != form) {
            return Err(Error::state("blocks mix fused and multi-branch bodies"));
        }

        let f0 = self.head.forward(tape, x)?;
        let f0 = tape.relu(&f0);
        let d = self.down.forward(tape, &f0)?;
        let mut d = tape.relu(&d);
        let mut stats = NetStats::default();
        for block in &self.blocks {
            let (y, s) = block.forward(tape, &d)?;
            d = y;
            stats.blocks.push(s);
        }
        let u = tape.bilinear_upsample(&d, 2)?;
        let u = self.up_conv.forward(tape, &u)?;
        let u = tape.relu(&u);
        let s = self.shrink.forward(tape, &u)?;
        let skip = self.skip_shrink.forward(tape, &f0)?;
        let s = tape.add(&s, &skip)?;
        let residual = self.tail.forward(tape, &s)?;
        let y = tape.add(x, &residual)?;
        Ok((y, stats))
    }

    pub fn apply_stats(&mut self, stats: &NetStats) -> Result<()> {
        if stats.blocks.len() != self.blocks.len() {
            return Err(Error::contract(
                "batch statistics do not match the block count",
            ));
        }
        for (b, s) in self.blocks.iter_mut().zip(&stats.blocks) {
            b.apply_stats(s)?;
        }
        Ok(())
    }

    /// Forward on a tracked tape that also folds train-mode batch statistics
    /// into the running averages.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let (y, stats) = self.forward_with_stats(tape, x)?;
        self.apply_stats(&stats)?;
        Ok(y)
    }

    /// Inference on a plain tensor without recording a graph.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x);
        Ok(self.forward(&mut tape, &xv)?.into_value())
    }

    /// Upper bound on the distance (in pixels, per axis) over which one
    /// input pixel can influence the output, or `None` when channel
    /// attention makes the dependence global.
    pub fn receptive_radius(&self) -> Option<usize> {
        if self.blocks.iter().any(|b| b.ca.is_some()) {
            return None;
        }
        let half = |k: usize| k / 2;
        let block_k = |b: &MaBlock<T>| match &b.body {
            BlockBody::MultiBranch { branch3, .. } => branch3.kernel_size(),
            BlockBody::Fused(conv) => conv.kernel_size(),
        };
        // Everything between down and the upsample runs at stride 2.
        let low: usize = half(self.down.kernel_size())
            + self
                .blocks
                .iter()
                .map(|b| 2 * half(block_k(b)))
                .sum::<usize>()
            + 2;
        Some(
            half(self.head.kernel_size())
                + low
                + half(self.up_conv.kernel_size())
                + half(self.tail.kernel_size()),
        )
    }
}

impl<T: Float> Module<T> for ErraNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.head.visit(&join(prefix, "head"), f);
        self.down.visit(&join(prefix, "down"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.up_conv.visit(&join(prefix, "up_conv"), f);
        self.shrink.visit(&join(prefix, "shrink"), f);
        self.skip_shrink.visit(&join(prefix, "skip_shrink"), f);
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.up_conv.visit_mut(&join(prefix, "up_conv"), f);
        self.shrink.visit_mut(&join(prefix, "shrink"), f);
        self.skip_shrink.visit_mut(&join(prefix, "skip_shrink"), f);
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_is_identity() {
        let net = ErraNet::<f32>::zeros(NetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(1, 3, 32, 64), 0.0, 1.0, &mut rng);
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn head_and_tail_counts() {
        let net = ErraNet::<f32>::zeros(NetConfig::default()).unwrap();
        assert_eq!(net.head.num_params(), 1792);
        assert_eq!(net.tail.num_params(), 2355);
    }

    #[test]
    fn default_count_matches_breakdown() {
        let net = ErraNet::<f32>::zeros(NetConfig::default()).unwrap();
        let fixed = 1792 + 36_928 + 36_928 + 1040 + 1040 + 2355;
        let block = 36_928 + 4160 + 128 + (3 * 8 + 1) + (129 * 4 + 64);
        assert_eq!(net.count_parameters(), fixed + 6 * block);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let net = ErraNet::<f32>::zeros(NetConfig::default()).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 48, 64));
        match net.infer(&x) {
            Err(Error::Contract(msg)) => assert!(msg.contains("32")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_block_keeps_relu_plus_identity() {
        let cfg = NetConfig {
            width: 8,
            flags: BlockFlags {
                use_attention: false,
                ..BlockFlags::default()
            },
            ..NetConfig::default()
        };
        let mut block = MaBlock::<f64>::zeros(&cfg).unwrap();
        block.set_training(false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(2, 8, 5, 5), &mut rng);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&x);
        let (y, stats) = block.forward(&mut tape, &xv).unwrap();
        assert!(stats.is_empty());
        let want = x.map(|v| v.max(0.0) + v);
        assert!(y.value().max_abs_diff(&want).unwrap() < 1e-4);
    }

    #[test]
    fn variants_build_with_expected_layout() {
        for v in Variant::ALL {
            let net = ErraNet::<f32>::zeros(NetConfig::variant(v)).unwrap();
            let names = net.param_names();
            let has = |n: &str| names.iter().any(|s| s == n);
            assert_eq!(has("blocks.0.sa.conv1.weight"), v != Variant::Base, "{v:?}");
            assert_eq!(
                has("blocks.0.bn.gamma"),
                matches!(v, Variant::BnAttention | Variant::Full)
            );
            assert_eq!(has("blocks.0.bn_id.gamma"), v == Variant::PerBranchBn);
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn training_forward_updates_running_stats() {
        let cfg = NetConfig {
            width: 16,
            blocks: 1,
            ..NetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ErraNet::<f32>::init(cfg, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 32, 32), &mut rng);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(&x);
        net.forward_train(&mut tape, &xv).unwrap();
        let BlockBody::MultiBranch {
            norm: BranchNorm::PostSum(bn),
            ..
        } = &net.blocks[0].body
        else {
            panic!("expected post-sum BN");
        };
        assert!(bn.running_mean.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = NetConfig {
            width: 24,
            ..NetConfig::default()
        };
        assert!(matches!(
            ErraNet::<f32>::zeros(cfg.clone()),
            Err(Error::Config(_))
        ));
        cfg.width = 64;
        cfg.flags.use_bn = false;
        cfg.flags.bn_per_branch = true;
        assert!(matches!(ErraNet::<f32>::zeros(cfg), Err(Error::Config(_))));
    }
}
