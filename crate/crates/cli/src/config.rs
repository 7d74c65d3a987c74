//! Flat `key = value` config files. Keys are long flag names without the
//! leading dashes; values given on the command line win over the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value, got {raw:?}", n + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn to_flags(pairs: &[(String, String)]) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => out.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Pull `--config <file>` out of `args` and splice the file's flags in
/// right after the subcommand name, ahead of the explicit ones.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            file = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let path = Path::new(&file);
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let flags = to_flags(&parse(&text)?)?;
    // the subcommand is the first argument after the program name that is
    // not a flag
    let Some(pos) = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Ok(rest);
    };
    let at = pos + 2;
    let tail = rest.split_off(at);
    rest.extend(flags);
    rest.extend(tail);
    Ok(rest)
}
