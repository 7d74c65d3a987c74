use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::io::load_paired_dir;
use crate::data::{psnr, sample_patches_with, ssim, synthetic_pairs, HazeParams, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights};
use crate::network::{ErraNet, NetConfig, REQUIRED_MULTIPLE};
use crate::nn::{Module, ParamKind};
use crate::pipeline::dehaze;
use crate::serialize::{load_model, read_records, save_model, write_atomic, write_records, Record};
use crate::tensor::{Shape, Tensor};
use crate::train::optim::{adam_step, collect_grads, AdamConfig, OptimState};
use crate::train::schedule::{cyclical_lr, LRSchedule};

/// Form tag used for optimizer state companion files.
pub const STATE_TAG: u8 = 2;
const HELDOUT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural clean images with random haze.
    Synthetic {
        pairs: usize,
        image_size: usize,
        haze: HazeParams,
    },
    /// `<root>/hazy` and `<root>/clean`.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub data: DataSource,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    pub schedule: LRSchedule,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Number of held-out pairs evaluated after training; 0 disables.
    pub heldout: usize,
    /// Side length of synthetic held-out images.
    pub heldout_size: usize,
    pub checkpoint_every: usize,
    /// Where checkpoints and the loss log go; `None` keeps everything in
    /// memory.
    pub out_dir: Option<PathBuf>,
    /// Model checkpoint to continue from; its `.state` companion must exist.
    pub resume: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            data: DataSource::Synthetic {
                pairs: 64,
                image_size: 160,
                haze: HazeParams::default(),
            },
            steps: 600,
            batch: 2,
            patch: 128,
            seed: 0,
            schedule: LRSchedule::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            heldout: 8,
            heldout_size: 128,
            checkpoint_every: 500,
            out_dir: None,
            resume: None,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::config("batch size and step count must be positive"));
        }
        if self.patch == 0 || self.patch % REQUIRED_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "patch size must be a positive multiple of {REQUIRED_MULTIPLE}, got {}",
                self.patch
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint interval must be positive"));
        }
        if let DataSource::Synthetic {
            pairs, image_size, ..
        } = &self.data
        {
            if *pairs == 0 || *image_size < self.patch {
                return Err(Error::config(
                    "synthetic data needs at least one image no smaller than the patch",
                ));
            }
        }
        if self.heldout > 0 && self.heldout_size < 11 {
            return Err(Error::config(
                "held-out images must be at least 11 pixels for SSIM",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l1: f64,
    pub l_ca: f64,
    pub l_laplace: f64,
    pub total: f64,
}

pub const CSV_HEADER: &str = "step,lr,l1,l_ca,l_laplace,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.l1, self.l_ca, self.l_laplace, self.total
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOutScores {
    pub pairs: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the hazy input itself, i.e. of the identity model.
    pub identity_psnr: f64,
    pub identity_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ErraNet<f32>,
    pub optim: OptimState<f32>,
    pub log: Vec<StepLog>,
    pub heldout: Option<HeldOutScores>,
    pub checkpoints: Vec<PathBuf>,
    pub seconds: f64,
}

pub fn state_path(model_path: &Path) -> PathBuf {
    let mut name = model_path.file_name().unwrap_or_default().to_os_string();
    name.push(".state");
    model_path.with_file_name(name)
}

fn step_record(step: u64) -> Result<Record> {
    // Stored as two 16-bit halves so every value is exact in f32.
    if step >= 1 << 32 {
        return Err(Error::contract("step counter too large to store"));
    }
    let v = vec![(step >> 16) as f32, (step & 0xffff) as f32];
    Ok(Record {
        name: "meta.step".into(),
        tensor: Tensor::from_vec(Shape::new(1, 2, 1, 1), v)?,
    })
}

pub fn save_optim_state(state: &OptimState<f32>, path: &Path) -> Result<()> {
    let mut records = vec![step_record(state.step)?];
    let c = state.config;
    records.push(Record {
        name: "meta.adam".into(),
        // beta1, beta2, eps as f32: informational only, the run config wins.
        tensor: Tensor::from_vec(
            Shape::new(1, 3, 1, 1),
            vec![c.beta1 as f32, c.beta2 as f32, c.eps as f32],
        )?,
    });
    for (k, v) in &state.first {
        records.push(Record {
            name: format!("adam.m.{k}"),
            tensor: v.clone(),
        });
    }
    for (k, v) in &state.second {
        records.push(Record {
            name: format!("adam.v.{k}"),
            tensor: v.clone(),
        });
    }
    let mut buf = Vec::new();
    write_records(&mut buf, STATE_TAG, &records)?;
    write_atomic(path, &buf)
}

pub fn load_optim_state(path: &Path, config: AdamConfig) -> Result<OptimState<f32>> {
    let (tag, records) = read_records(&fs::read(path)?[..])?;
    if tag != STATE_TAG {
        return Err(Error::Format(format!(
            "{} is not an optimizer state file",
            path.display()
        )));
    }
    let mut state = OptimState::new(config);
    let mut have_step = false;
    for r in records {
        if r.name == "meta.step" {
            let d = r.tensor.data();
            if d.len() != 2 {
                return Err(Error::Format("malformed meta.step".into()));
            }
            state.step = ((d[0] as u64) << 16) | d[1] as u64;
            have_step = true;
        } else if let Some(k) = r.name.strip_prefix("adam.m.") {
            state.first.insert(k.to_string(), r.tensor);
        } else if let Some(k) = r.name.strip_prefix("adam.v.") {
            state.second.insert(k.to_string(), r.tensor);
        } else if r.name != "meta.adam" {
            return Err(Error::Format(format!(
                "unexpected record {} in state file",
                r.name
            )));
        }
    }
    if !have_step {
        return Err(Error::Format("state file has no step counter".into()));
    }
    Ok(state)
}

fn all_params_finite(model: &ErraNet<f32>) -> Option<String> {
    let mut bad = None;
    model.visit("", &mut |name, t, _| {
        if bad.is_none() && !t.all_finite() {
            bad = Some(name.to_string());
        }
    });
    bad
}

/// Training and held-out pools, deterministic in the seed.
pub fn build_pools(config: &TrainConfig) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    match &config.data {
        DataSource::Synthetic {
            pairs,
            image_size,
            haze,
        } => {
            let train = synthetic_pairs(*pairs, *image_size, *image_size, haze, config.seed)?;
            let held = synthetic_pairs(
                config.heldout,
                config.heldout_size,
                config.heldout_size,
                haze,
                config.seed ^ HELDOUT_SEED_SALT,
            )?;
            Ok((train, held))
        }
        DataSource::Directory(root) => {
            let set = load_paired_dir(root)?;
            for u in &set.unmatched {
                log::warn!("unmatched image {u} skipped");
            }
            let mut pairs = set.pairs;
            if pairs.len() <= config.heldout {
                return Err(Error::contract(format!(
                    "{} has {} usable pairs, need more than the {} held out",
                    root.display(),
                    pairs.len(),
                    config.heldout
                )));
            }
            let held = pairs.split_off(pairs.len() - config.heldout);
            Ok((pairs, held))
        }
    }
}

pub fn evaluate_pairs(model: &ErraNet<f32>, pairs: &[ImagePair]) -> Result<HeldOutScores> {
    let mut eval = model.clone();
    eval.set_training(false);
    let n = pairs.len().max(1) as f64;
    let mut s = HeldOutScores {
        pairs: pairs.len(),
        psnr: 0.0,
        ssim: 0.0,
        identity_psnr: 0.0,
        identity_ssim: 0.0,
    };
    for p in pairs {
        let out = dehaze(&eval, &p.hazy)?;
        s.psnr += psnr(&out, &p.clean)? / n;
        s.ssim += ssim(&out, &p.clean)? / n;
        s.identity_psnr += psnr(&p.hazy, &p.clean)? / n;
        s.identity_ssim += ssim(&p.hazy, &p.clean)? / n;
    }
    Ok(s)
}

fn checkpoint(model: &ErraNet<f32>, optim: &OptimState<f32>, path: &Path) -> Result<()> {
    save_model(model, path)?;
    save_optim_state(optim, &state_path(path))
}

pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();
    let (pool, heldout) = build_pools(config)?;
    if pool.is_empty() {
        return Err(Error::contract("training pool is empty"));
    }

    let (mut model, mut optim) = match &config.resume {
        Some(path) => {
            let model = load_model(path)?;
            if model.config != config.net {
                return Err(Error::state(format!(
                    "checkpoint {} was trained with a different network configuration",
                    path.display()
                )));
            }
            (model, load_optim_state(&state_path(path), config.adam)?)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            (
                ErraNet::init(config.net.clone(), &mut rng)?,
                OptimState::new(config.adam),
            )
        }
    };
    model.set_training(true);
    let first_step = optim.step as usize + 1;

    let mut csv = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("loss.csv");
            let append = config.resume.is_some() && path.exists();
            let f = fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(path)?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "{CSV_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = config.resume.clone();
    for step in first_step..=config.steps {
        let lr = cyclical_lr(step - 1, &config.schedule);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64);
        let batch = sample_patches_with(&pool, config.batch, config.patch, &mut rng)?;
        let (hazy, clean) = batch.stacked()?;

        let mut tape = Tape::new();
        let x = tape.constant(&hazy);
        let y = tape.constant(&clean);
        let pred = model.forward_train(&mut tape, &x)?;
        let terms = total_loss(&mut tape, &pred, &y, &config.weights)?;
        let (l1, l_ca, l_laplace, total) = terms.values();
        if !total.is_finite() {
            return Err(Error::NumericFailure {
                step,
                what: format!("total loss is {total}"),
                last_checkpoint: last_good,
            });
        }
        tape.backward(&terms.total)?;
        let mut grads = collect_grads(&model, &tape);
        drop(tape);
        adam_step(&mut model, &mut grads, &mut optim, lr)?;
        if let Some(name) = all_params_finite(&model) {
            return Err(Error::NumericFailure {
                step,
                what: format!("parameter {name} became non-finite"),
                last_checkpoint: last_good,
            });
        }

        let entry = StepLog {
            step,
            lr,
            l1,
            l_ca,
            l_laplace,
            total,
        };
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", entry.csv_row())?;
        }
        if config.log_every > 0 && (step % config.log_every == 0 || step == first_step) {
            log::info!("step {step:>6}  lr {lr:.2e}  total {total:.5}  l1 {l1:.5}");
        }
        log.push(entry);

        if let Some(dir) = &config.out_dir {
            let path = if step == config.steps {
                Some(dir.join("final.erra"))
            } else if step % config.checkpoint_every == 0 {
                Some(dir.join(format!("checkpoint_{step:06}.erra")))
            } else {
                None
            };
            if let Some(path) = path {
                if let Some(w) = csv.as_mut() {
                    w.flush()?;
                }
                checkpoint(&model, &optim, &path)?;
                last_good = Some(path.clone());
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }

    let heldout_scores = if heldout.is_empty() {
        None
    } else {
        let s = evaluate_pairs(&model, &heldout)?;
        if let Some(dir) = &config.out_dir {
            let mut f = File::create(dir.join("heldout.txt"))?;
            writeln!(f, "pairs={}", s.pairs)?;
            writeln!(f, "psnr={}", s.psnr)?;
            writeln!(f, "ssim={}", s.ssim)?;
            writeln!(f, "identity_psnr={}", s.identity_psnr)?;
            writeln!(f, "identity_ssim={}", s.identity_ssim)?;
        }
        Some(s)
    };

    Ok(TrainReport {
        model,
        optim,
        log,
        heldout: heldout_scores,
        checkpoints,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Names of every trainable tensor, in visiting order.
pub fn trainable_names(model: &ErraNet<f32>) -> Vec<String> {
    let mut v = Vec::new();
    model.visit("", &mut |n, _, k| {
        if k == ParamKind::Trainable {
            v.push(n.to_string());
        }
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                width: 16,
                blocks: 1,
                ..NetConfig::default()
            },
            data: DataSource::Synthetic {
                pairs: 4,
                image_size: 40,
                haze: HazeParams::default(),
            },
            steps,
            patch: 32,
            heldout: 2,
            heldout_size: 32,
            log_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn in_memory_run_logs_every_step() {
        let r = train(&tiny(3)).unwrap();
        assert_eq!(r.log.len(), 3);
        assert_eq!(r.optim.step, 3);
        assert_eq!(r.log[0].lr, 6e-4);
        assert!(r.heldout.is_some());
        assert!(r.checkpoints.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(1);
        c.patch = 48;
        assert!(matches!(train(&c), Err(Error::Config(_))));
        let mut c = tiny(1);
        c.batch = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn state_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = train(&tiny(2)).unwrap();
        let p = dir.path().join("s.state");
        save_optim_state(&r.optim, &p).unwrap();
        let back = load_optim_state(&p, AdamConfig::default()).unwrap();
        assert_eq!(back, r.optim);
        assert_eq!(trainable_names(&r.model).len(), back.first.len());
    }
}
