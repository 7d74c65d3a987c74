use std::collections::BTreeMap;
use std::fs;

use erra::data::HazeParams;
use erra::network::Variant;
use erra::nn::{Module, ParamKind};
use erra::serialize::{load_model, model_records};
use erra::train::{
    adam_step, cyclical_lr, load_optim_state, state_path, train, AdamConfig, DataSource, Gradients,
    LRSchedule, OptimState, TrainConfig, CSV_HEADER,
};
use erra::{Error, NetConfig, Shape, Tensor};

/// A bare parameter list standing in for a model.
struct Params(BTreeMap<String, Tensor<f64>>);

impl Module<f64> for Params {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Tensor<f64>, ParamKind)) {
        for (k, v) in &self.0 {
            f(k, v, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>, ParamKind)) {
        for (k, v) in &mut self.0 {
            f(k, v, ParamKind::Trainable);
        }
    }
}

fn scalar(name: &str, v: f64) -> Params {
    Params(BTreeMap::from([(name.to_string(), Tensor::scalar(v))]))
}

fn grad(name: &str, g: f64) -> Gradients<f64> {
    Gradients::from([(name.to_string(), Tensor::scalar(g))])
}

#[test]
fn first_adam_step_is_lr_times_sign() {
    for g in [3.0, -0.02, 1e-3] {
        let mut p = scalar("w", 1.0);
        let mut state = OptimState::new(AdamConfig::default());
        let mut gr = grad("w", g);
        adam_step(&mut p, &mut gr, &mut state, 1e-3).unwrap();
        assert!(gr.is_empty(), "gradients are consumed");
        // m_hat = g, v_hat = g^2 after bias correction
        let want = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
        assert!((p.0["w"].item() - want).abs() < 1e-12);
        assert_eq!(state.step, 1);
        assert!((state.first["w"].item() - 0.1 * g).abs() < 1e-15);
        assert!((state.second["w"].item() - 0.001 * g * g).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_leaves_parameters_but_counts_the_step() {
    let mut p = scalar("w", 0.5);
    let mut state = OptimState::new(AdamConfig::default());
    adam_step(&mut p, &mut grad("w", 0.0), &mut state, 1e-3).unwrap();
    assert_eq!(p.0["w"].item(), 0.5);
    assert_eq!(state.step, 1);
}

#[test]
fn missing_or_misshapen_gradients_are_rejected() {
    let mut p = scalar("w", 0.5);
    let mut state = OptimState::new(AdamConfig::default());
    assert!(matches!(
        adam_step(&mut p, &mut grad("other", 1.0), &mut state, 1e-3),
        Err(Error::Contract(_))
    ));
    let mut wrong = Gradients::from([("w".to_string(), Tensor::zeros(Shape::new(1, 2, 1, 1)))]);
    assert!(matches!(
        adam_step(&mut p, &mut wrong, &mut state, 1e-3),
        Err(Error::Shape { .. })
    ));
    assert_eq!(state.step, 0);
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut p = scalar("w", 0.1);
    let mut state = OptimState::new(AdamConfig::default());
    let mut reached = None;
    for step in 1..=500 {
        let w = p.0["w"].item();
        adam_step(&mut p, &mut grad("w", 2.0 * w), &mut state, 6e-4).unwrap();
        if reached.is_none() && p.0["w"].item().abs() < 1e-3 {
            reached = Some(step);
        }
    }
    assert!(
        reached.is_some(),
        "never got within 1e-3, ended at {}",
        p.0["w"].item()
    );
    assert!(p.0["w"].item().abs() < 1e-3, "ended at {}", p.0["w"].item());
}

#[test]
fn lr_trace_follows_the_triangle() {
    let s = LRSchedule::default();
    let trace: Vec<f64> = (0..40).map(|k| cyclical_lr(k, &s)).collect();
    for (k, lr) in trace.iter().enumerate() {
        let phase = k % 20;
        let frac = if phase <= 10 {
            phase as f64 / 10.0
        } else {
            (20 - phase) as f64 / 10.0
        };
        let want = 6e-4 + 6e-4 * frac;
        assert!((lr - want).abs() < 1e-15, "step {k}: {lr} vs {want}");
        assert!((6e-4..=1.2e-3).contains(lr));
    }
    assert_eq!(trace[0], 6e-4);
    assert!((trace[10] - 1.2e-3).abs() < 1e-18);
    assert_eq!(trace[20], 6e-4);
}

fn tiny(steps: usize) -> TrainConfig {
    TrainConfig {
        net: NetConfig {
            width: 16,
            blocks: 2,
            ..NetConfig::default()
        },
        data: DataSource::Synthetic {
            pairs: 16,
            image_size: 48,
            haze: HazeParams::default(),
        },
        steps,
        batch: 2,
        patch: 32,
        seed: 5,
        heldout: 2,
        heldout_size: 32,
        checkpoint_every: 10,
        log_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn short_run_lowers_the_loss() {
    let report = train(&tiny(200)).unwrap();
    assert_eq!(report.log.len(), 200);
    let first = report.log[0].total;
    let last = report.log[199].total;
    assert!(last < first, "{last} !< {first}");
    assert!(report.log.iter().all(|l| l.total.is_finite()));
    assert!(report.heldout.is_some());
}

#[test]
fn fixed_seed_gives_identical_runs_and_resume_continues_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(&TrainConfig {
        out_dir: Some(dir.path().join("full")),
        ..tiny(20)
    })
    .unwrap();
    let again = train(&tiny(20)).unwrap();
    assert_eq!(full.log, again.log);
    assert_eq!(model_records(&full.model), model_records(&again.model));

    let out = dir.path().join("full");
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), 20);
    let ck = out.join("checkpoint_000010.erra");
    assert!(ck.exists() && state_path(&ck).exists());
    assert!(out.join("final.erra").exists());
    assert!(out.join("heldout.txt").exists());
    assert_eq!(full.checkpoints.len(), 2);

    let state = load_optim_state(&state_path(&ck), AdamConfig::default()).unwrap();
    assert_eq!(state.step, 10);
    let resumed = train(&TrainConfig {
        resume: Some(ck.clone()),
        out_dir: Some(out.clone()),
        ..tiny(20)
    })
    .unwrap();
    assert_eq!(resumed.log.len(), 10);
    assert_eq!(resumed.log[..], full.log[10..]);
    assert_eq!(model_records(&resumed.model), model_records(&full.model));
    let loaded = load_model(&out.join("final.erra")).unwrap();
    assert_eq!(model_records(&loaded), model_records(&full.model));
    // resuming appends to the existing log
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 20 + 10);

    let mismatched = TrainConfig {
        resume: Some(ck),
        net: NetConfig {
            width: 32,
            ..tiny(20).net
        },
        ..tiny(20)
    };
    assert!(matches!(train(&mismatched), Err(Error::State(_))));
}

#[test]
fn every_variant_trains() {
    for v in Variant::ALL {
        let cfg = TrainConfig {
            net: NetConfig {
                width: 16,
                blocks: 2,
                ..NetConfig::variant(v)
            },
            heldout: 0,
            ..tiny(5)
        };
        let report = train(&cfg).unwrap();
        assert_eq!(report.log.len(), 5, "{}", v.name());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_patch = TrainConfig {
        patch: 40,
        ..tiny(1)
    };
    assert!(matches!(train(&bad_patch), Err(Error::Config(_))));
    let big_patch = TrainConfig {
        patch: 64,
        ..tiny(1)
    };
    assert!(matches!(train(&big_patch), Err(Error::Config(_))));
    let no_steps = TrainConfig {
        steps: 0,
        ..tiny(1)
    };
    assert!(train(&no_steps).is_err());
    let sched = TrainConfig {
        schedule: LRSchedule {
            base_lr: 2e-3,
            ..LRSchedule::default()
        },
        ..tiny(1)
    };
    assert!(train(&sched).is_err());
}

#[test]
fn directory_data_is_split_into_train_and_heldout() {
    use erra::data::io::save_png;
    use erra::data::synthetic_pairs;
    let dir = tempfile::tempdir().unwrap();
    for sub in ["hazy", "clean"] {
        fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    for (i, p) in synthetic_pairs(4, 40, 40, &HazeParams::default(), 3)
        .unwrap()
        .iter()
        .enumerate()
    {
        save_png(&dir.path().join("hazy").join(format!("{i}.png")), &p.hazy).unwrap();
        save_png(&dir.path().join("clean").join(format!("{i}.png")), &p.clean).unwrap();
    }
    let cfg = TrainConfig {
        data: DataSource::Directory(dir.path().to_path_buf()),
        heldout: 1,
        ..tiny(3)
    };
    let (train_pool, held) = erra::train::build_pools(&cfg).unwrap();
    assert_eq!((train_pool.len(), held.len()), (3, 1));
    assert_eq!(held[0].id, "3.png");
    assert!(train(&cfg).is_ok());
    let too_many = TrainConfig { heldout: 4, ..cfg };
    assert!(train(&too_many).is_err());
}
