use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use erra::data::io::{list_pngs, load_paired_dir, load_png, save_png};
use erra::data::{procedural_image, psnr, ssim, synthesize_haze, HazeParams, HazeRecipe};
use erra::losses::LossWeights;
use erra::network::REQUIRED_MULTIPLE;
use erra::pipeline::{dehaze, pad_to_multiple};
use erra::reparam::reparameterize_model;
use erra::serialize::{load_model, save_model};
use erra::train::{train as run_training, DataSource, LRSchedule, TrainConfig};
use erra::{ErraNet, Error, Form, NetConfig, Shape, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{
    BenchmarkArgs, EvaluateArgs, FuseArgs, InferArgs, InitArgs, SynthesizeArgs, TrainArgs,
};

/// 3 for a numeric failure, 4 for a state error, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NumericFailure { .. }) => 3,
        Some(Error::State(_)) => 4,
        _ => 2,
    }
}

/// A bad-input error, reported through the library error so it exits with 2.
fn input_error(msg: String) -> anyhow::Error {
    anyhow::Error::new(Error::Contract(msg))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = match (&a.data, a.synthetic) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(input_error(format!(
                    "dataset directory {} does not exist",
                    dir.display()
                )));
            }
            DataSource::Directory(dir.clone())
        }
        (None, true) => DataSource::Synthetic {
            pairs: a.synthetic_pairs,
            image_size: a.image_size,
            haze: HazeParams::default(),
        },
        (None, false) => {
            return Err(input_error(
                "give a dataset with --data or pass --synthetic".into(),
            ))
        }
    };
    let cfg = TrainConfig {
        net: NetConfig::variant(a.variant),
        data,
        steps: a.steps,
        batch: a.batch,
        patch: a.patch,
        seed: a.seed,
        schedule: LRSchedule {
            base_lr: a.base_lr,
            max_lr: a.max_lr,
            step_size: a.step_size,
        },
        weights: LossWeights {
            alpha1: a.alpha1,
            alpha2: a.alpha2,
            ca_alpha: a.ca_alpha,
            ca_beta: a.ca_beta,
        },
        heldout: a.heldout,
        heldout_size: a.heldout_size,
        checkpoint_every: a.checkpoint_every,
        out_dir: Some(a.out.clone()),
        resume: a.resume.clone(),
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    let report = run_training(&cfg)?;
    if let (Some(first), Some(last)) = (report.log.first(), report.log.last()) {
        println!(
            "trained {} steps in {:.1} s, loss {:.4} -> {:.4}",
            report.log.len(),
            report.seconds,
            first.total,
            last.total
        );
    }
    if let Some(h) = &report.heldout {
        println!(
            "held-out ({} pairs): PSNR {:.3} dB SSIM {:.4}; hazy input PSNR {:.3} dB SSIM {:.4}",
            h.pairs, h.psnr, h.ssim, h.identity_psnr, h.identity_ssim
        );
    }
    println!("model written to {}", a.out.join("final.erra").display());
    Ok(())
}

fn default_report_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".report");
    output.with_file_name(name)
}

pub fn fuse(a: FuseArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if a.probe_size == 0 || a.probe_size % REQUIRED_MULTIPLE != 0 {
        return Err(input_error(format!(
            "probe size must be a positive multiple of {REQUIRED_MULTIPLE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let probe = Tensor::<f32>::randn(Shape::new(1, 3, a.probe_size, a.probe_size), &mut rng);
    let (fused, report) = reparameterize_model(&model, &probe)?;
    save_model(&fused, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| default_report_path(&a.output));
    fs::write(&report_path, report.to_key_values())
        .with_context(|| format!("writing {}", report_path.display()))?;
    print!("{}", report.to_table());
    println!("fused model written to {}", a.output.display());
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let x = load_png(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let started = Instant::now();
    let y = dehaze(&model, &x)?;
    info!("inference took {:.3} s", started.elapsed().as_secs_f64());
    save_png(&a.output, &y).with_context(|| format!("writing {}", a.output.display()))?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let set = load_paired_dir(&a.data)?;
    for u in &set.unmatched {
        warn!("skipping unmatched image {u}");
    }
    if set.pairs.is_empty() {
        return Err(input_error(format!(
            "no usable pairs under {}",
            a.data.display()
        )));
    }
    let mut csv = String::from("image,psnr,ssim,hazy_psnr,hazy_ssim\n");
    let (mut mp, mut ms) = (0.0, 0.0);
    let n = set.pairs.len() as f64;
    for p in &set.pairs {
        let out = dehaze(&model, &p.hazy)?;
        let (ps, ss) = (psnr(&out, &p.clean)?, ssim(&out, &p.clean)?);
        let (hp, hs) = (psnr(&p.hazy, &p.clean)?, ssim(&p.hazy, &p.clean)?);
        println!("{:<32} PSNR {ps:8.3} dB  SSIM {ss:.4}", p.id);
        let _ = writeln!(csv, "{},{ps},{ss},{hp},{hs}", p.id);
        mp += ps / n;
        ms += ss / n;
    }
    let _ = writeln!(csv, "mean,{mp},{ms},,");
    println!(
        "{:<32} PSNR {mp:8.3} dB  SSIM {ms:.4}  ({} images)",
        "mean",
        set.pairs.len()
    );
    fs::write(&a.csv, csv).with_context(|| format!("writing {}", a.csv.display()))?;
    Ok(())
}

#[derive(Debug)]
struct Timing {
    mean: f64,
    median: f64,
    std: f64,
    min: f64,
}

fn summarize(mut t: Vec<f64>) -> Timing {
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let var = if t.len() > 1 {
        t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    t.sort_by(f64::total_cmp);
    let mid = t.len() / 2;
    let median = if t.len() % 2 == 0 {
        (t[mid - 1] + t[mid]) / 2.0
    } else {
        t[mid]
    };
    Timing {
        mean,
        median,
        std: var.sqrt(),
        min: t[0],
    }
}

pub fn benchmark(a: BenchmarkArgs) -> Result<()> {
    if a.repeats == 0 || a.width == 0 || a.height == 0 {
        return Err(input_error(
            "repeats, width and height must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut model = match &a.model {
        Some(p) => load_model(p).with_context(|| format!("loading {}", p.display()))?,
        None => ErraNet::init(NetConfig::default(), &mut rng)?,
    };
    model.set_training(false);
    let mut forms = vec![(model.form(), model.clone())];
    if model.form() == Form::Training && !a.no_fuse {
        if model.config.flags.bn_per_branch {
            warn!("per-branch batch norm cannot be fused; timing the multi-branch form only");
        } else {
            let probe = Tensor::<f32>::randn(Shape::new(1, 3, 32, 32), &mut rng);
            forms.push((Form::Fused, reparameterize_model(&model, &probe)?.0));
        }
    }
    let image = Tensor::<f32>::uniform(Shape::new(1, 3, a.height, a.width), 0.0, 1.0, &mut rng);
    let padded = pad_to_multiple(&image, REQUIRED_MULTIPLE);
    for (_, m) in &forms {
        for _ in 0..a.warmup {
            m.infer(&padded)?;
        }
    }
    // alternate between forms so slow drift affects all of them alike
    let mut times = vec![Vec::with_capacity(a.repeats); forms.len()];
    for _ in 0..a.repeats {
        for (i, (_, m)) in forms.iter().enumerate() {
            let t = Instant::now();
            std::hint::black_box(dehaze(m, &image)?);
            times[i].push(t.elapsed().as_secs_f64());
        }
    }
    println!("{}x{} input, {} repeats", a.width, a.height, a.repeats);
    println!(
        "{:<12} {:>10} {:>12} {:>10} {:>10} {:>12} {:>8}",
        "form", "params", "median ms", "mean ms", "std ms", "min ms", "fps"
    );
    let mut medians = Vec::new();
    for ((form, m), t) in forms.iter().zip(times) {
        let s = summarize(t);
        let name = match form {
            Form::Training => "multi-branch",
            Form::Fused => "fused",
        };
        println!(
            "{:<12} {:>10} {:>12.2} {:>10.2} {:>10.2} {:>12.2} {:>8.3}",
            name,
            m.count_parameters(),
            s.median * 1e3,
            s.mean * 1e3,
            s.std * 1e3,
            s.min * 1e3,
            1.0 / s.median
        );
        medians.push(s.median);
    }
    if let [multi, fused] = medians[..] {
        println!(
            "fused median time reduction: {:.1}%",
            (1.0 - fused / multi) * 100.0
        );
    }
    Ok(())
}

pub fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let params = HazeParams {
        t_min: a.t_min,
        blobs_min: a.blobs_min,
        blobs_max: a.blobs_max,
        density: a.density,
        per_channel_airlight: !a.gray_airlight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut sources: Vec<(String, Tensor<f32>)> = Vec::new();
    if let Some(dir) = &a.clean {
        if !dir.is_dir() {
            return Err(input_error(format!("{} is not a directory", dir.display())));
        }
        for p in list_pngs(dir)? {
            let name = p
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            sources.push((
                name,
                load_png(&p).with_context(|| format!("reading {}", p.display()))?,
            ));
        }
        if sources.is_empty() {
            return Err(input_error(format!("no PNG files in {}", dir.display())));
        }
    } else {
        let n = a.procedural.unwrap_or(0);
        if n == 0 || a.size == 0 {
            return Err(input_error(
                "procedural image count and size must be positive".into(),
            ));
        }
        for i in 0..n {
            sources.push((
                format!("{i:04}.png"),
                procedural_image(a.size, a.size, &mut rng),
            ));
        }
    }
    let (hazy_dir, clean_dir) = (a.out.join("hazy"), a.out.join("clean"));
    for d in [&hazy_dir, &clean_dir] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut csv = String::from("image,seed,airlight_r,airlight_g,airlight_b,t_min,t_mean\n");
    for (name, clean) in &sources {
        let s = clean.shape();
        let seed: u64 = rng.random();
        let recipe = if a.no_haze {
            HazeRecipe::uniform(s.height, s.width, 1.0, [1.0; 3])?
        } else {
            HazeRecipe::random(s.height, s.width, &params, seed)?
        };
        let hazy = synthesize_haze(clean, &recipe)?;
        save_png(&hazy_dir.join(name), &hazy)?;
        save_png(&clean_dir.join(name), clean)?;
        let t_lo = recipe
            .transmission
            .data()
            .iter()
            .copied()
            .fold(f32::INFINITY, f32::min);
        let [r, g, b] = recipe.airlight;
        let _ = writeln!(
            csv,
            "{name},{seed},{r},{g},{b},{t_lo},{}",
            recipe.mean_transmission()
        );
        info!(
            "{name}: airlight ({r:.3}, {g:.3}, {b:.3}), mean t {:.3}",
            recipe.mean_transmission()
        );
    }
    fs::write(a.out.join("recipes.csv"), csv)?;
    println!("{} pairs written to {}", sources.len(), a.out.display());
    Ok(())
}

pub fn init(a: InitArgs) -> Result<()> {
    let cfg = NetConfig::variant(a.variant);
    let model = if a.zero {
        ErraNet::zeros(cfg)?
    } else {
        ErraNet::init(cfg, &mut ChaCha8Rng::seed_from_u64(a.seed))?
    };
    save_model(&model, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "{} model with {} parameters written to {}",
        a.variant.name(),
        model.count_parameters(),
        a.output.display()
    );
    Ok(())
}
