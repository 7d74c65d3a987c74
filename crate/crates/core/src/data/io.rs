//! 8-bit RGB PNG reading and writing, and the paired directory layout
//! `<root>/hazy/*.png` + `<root>/clean/*.png` matched by file name.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::data::patches::ImagePair;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Load a PNG as a `1×3×H×W` tensor in `[0, 1]`. Alpha is dropped and grey
/// images are expanded to three channels.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_vec(
        Shape::new(1, 3, h, w),
        (0..3 * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                raw[p * 3 + c] as f32 / 255.0
            })
            .collect(),
    )
}

/// Quantise to 8 bits with rounding, after clamping to `[0, 1]`.
pub fn to_rgb8(x: &Tensor<f32>) -> Result<RgbImage> {
    let s = x.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::Shape {
            op: "to_rgb8",
            lhs: s,
            rhs: Shape::new(1, 3, s.height, s.width),
        });
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(
        s.width as u32,
        s.height as u32,
        |j, i| {
            let (i, j) = (i as usize, j as usize);
            Rgb([
                q(x.at(0, 0, i, j)),
                q(x.at(0, 1, i, j)),
                q(x.at(0, 2, i, j)),
            ])
        },
    ))
}

pub fn save_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    to_rgb8(x)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Sorted `*.png` files (case-insensitive extension) directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Default)]
pub struct PairedDataset {
    pub pairs: Vec<ImagePair>,
    /// File names present on only one side, or whose sizes differ.
    pub unmatched: Vec<String>,
}

pub fn load_paired_dir(root: &Path) -> Result<PairedDataset> {
    let hazy_dir = root.join("hazy");
    let clean_dir = root.join("clean");
    for d in [&hazy_dir, &clean_dir] {
        if !d.is_dir() {
            return Err(Error::contract(format!(
                "{} is not a directory",
                d.display()
            )));
        }
    }
    let name = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let hazy = list_pngs(&hazy_dir)?;
    let clean: Vec<String> = list_pngs(&clean_dir)?.iter().map(|p| name(p)).collect();
    let mut set = PairedDataset::default();
    for h in &hazy {
        let n = name(h);
        if !clean.contains(&n) {
            set.unmatched.push(n);
            continue;
        }
        let hz = load_png(h)?;
        let cl = load_png(&clean_dir.join(&n))?;
        if hz.shape() != cl.shape() {
            set.unmatched.push(n);
            continue;
        }
        set.pairs.push(ImagePair {
            id: n,
            hazy: hz,
            clean: cl,
        });
    }
    for c in clean {
        if !hazy.iter().any(|h| name(h) == c) {
            set.unmatched.push(c);
        }
    }
    Ok(set)
}
