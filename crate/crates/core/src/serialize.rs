//! Flat binary container for model and optimizer state.
//!
//! ```text
//! "ERRA1"  u8 form tag  u32 record count
//! record:  u32 name length, UTF-8 name, 4 x u32 shape, f32 data
//! ```
//!
//! Every integer and float is little-endian. Model files carry one extra
//! record, `meta.config`, encoding the network configuration so a file can
//! be loaded without out-of-band information.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{AttentionOrder, BlockBody, BlockFlags, ErraNet, Form, NetConfig};
use crate::nn::{ConvParams, Module, PaddingMode};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"ERRA1";
const META: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_records(mut w: impl Write, tag: u8, records: &[Record]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[tag])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        for d in r.tensor.shape().dims() {
            let d =
                u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * r.tensor.len());
        for v in r.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(mut r: impl Read) -> Result<(u8, Vec<Record>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not an ERRA1 file".into()));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|_| Error::Format("missing form tag".into()))?;
    let count = read_u32(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!(
                "record name length {len} is implausible"
            )));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let shape = Shape::from_dims(dims);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 30)
            .ok_or_else(|| Error::Format(format!("record {name} has invalid shape {shape}")))?;
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("truncated data for {name}: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record {
            name,
            tensor: Tensor::from_vec(shape, data)?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok((tag[0], records))
}

/// Write to a sibling temporary file and rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_config(c: &NetConfig) -> Tensor<f32> {
    let f = c.flags;
    let order = match f.attention_order {
        AttentionOrder::SpatialFirst => 0.0,
        AttentionOrder::ChannelFirst => 1.0,
    };
    let v = vec![
        c.width as f32,
        c.blocks as f32,
        c.shrink_width as f32,
        c.sa_hidden as f32,
        c.ca_reduction as f32,
        f.use_bn as u8 as f32,
        f.use_attention as u8 as f32,
        f.use_local_residual as u8 as f32,
        f.bn_per_branch as u8 as f32,
        order,
    ];
    Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v).expect("non-empty")
}

fn decode_config(t: &Tensor<f32>) -> Result<NetConfig> {
    let v = t.data();
    if v.len() != 10 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::Format("malformed meta.config record".into()));
    }
    let u = |i: usize| v[i] as usize;
    let b = |i: usize| match v[i] {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => Err(Error::Format(format!(
            "flag {i} in meta.config is not 0 or 1"
        ))),
    };
    let attention_order = match v[9] {
        0.0 => AttentionOrder::SpatialFirst,
        1.0 => AttentionOrder::ChannelFirst,
        _ => return Err(Error::Format("unknown attention order".into())),
    };
    let config = NetConfig {
        width: u(0),
        blocks: u(1),
        shrink_width: u(2),
        sa_hidden: u(3),
        ca_reduction: u(4),
        flags: BlockFlags {
            use_bn: b(5)?,
            use_attention: b(6)?,
            use_local_residual: b(7)?,
            bn_per_branch: b(8)?,
            attention_order,
        },
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
    Ok(config)
}

pub fn model_records(model: &ErraNet<f32>) -> Vec<Record> {
    let mut out = vec![Record {
        name: META.to_string(),
        tensor: encode_config(&model.config),
    }];
    model.visit("", &mut |name, t, _| {
        out.push(Record {
            name: name.to_string(),
            tensor: t.clone(),
        })
    });
    out
}

pub fn model_to_bytes(model: &ErraNet<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records(&mut buf, model.form().tag(), &model_records(model))?;
    Ok(buf)
}

/// The file does not record BN modes, so loaded models come back in
/// evaluation mode.
pub fn model_from_bytes(bytes: &[u8]) -> Result<ErraNet<f32>> {
    let (tag, records) = read_records(bytes)?;
    let form =
        Form::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown form tag {tag}")))?;
    let mut map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for r in records {
        if map.insert(r.name.clone(), r.tensor).is_some() {
            return Err(Error::Format(format!("duplicate record {}", r.name)));
        }
    }
    let config = decode_config(
        &map.remove(META)
            .ok_or_else(|| Error::Format("missing meta.config record".into()))?,
    )?;
    let mut model = ErraNet::zeros(config)?;
    if form == Form::Fused {
        for b in &mut model.blocks {
            let c = b.channels();
            b.body = BlockBody::Fused(ConvParams::zeros(c, c, 3, 1, 1, PaddingMode::Zeros)?);
        }
    }
    let mut failure = None;
    model.visit_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match map.remove(name) {
            Some(v) if v.shape() == t.shape() => *t = v,
            Some(v) => {
                failure = Some(Error::Format(format!(
                    "record {name} has shape {}, expected {}",
                    v.shape(),
                    t.shape()
                )))
            }
            None => failure = Some(Error::Format(format!("missing record {name}"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!("unexpected record {extra}")));
    }
    model.set_training(false);
    Ok(model)
}

pub fn save_model(model: &ErraNet<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<ErraNet<f32>> {
    model_from_bytes(&fs::read(path)?)
}
