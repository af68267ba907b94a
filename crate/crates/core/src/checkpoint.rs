//! Versioned plain-text checkpoints.
//!
//! ```text
//! auxvi-checkpoint 1
//! config <n>
//! <n lines of experiment config>
//! params <k>
//! <name>\t<value>     (k lines, ParamVector order)
//! end
//! ```
//!
//! Values are written in Rust's shortest round-trip form, so reading a
//! checkpoint reproduces the parameters bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

pub const MAGIC: &str = "auxvi-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParamVector,
}

pub fn to_text(config: &ExperimentConfig, params: &ParamVector) -> Result<String> {
    let cfg = config.to_toml()?;
    let cfg_lines: Vec<&str> = cfg.lines().collect();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "config {}", cfg_lines.len());
    for line in &cfg_lines {
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out, "params {}", params.len());
    for (name, value) in params.names().iter().zip(params.values()) {
        let _ = writeln!(out, "{name}\t{value}");
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn write(path: &Path, config: &ExperimentConfig, params: &ParamVector) -> Result<()> {
    std::fs::write(path, to_text(config, params)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {line}: {msg}"))
}

/// `"<keyword> <count>"` → count.
fn counted(line: Option<(usize, &str)>, keyword: &str) -> Result<(usize, usize)> {
    let (no, text) = line.ok_or_else(|| Error::Checkpoint(format!("missing `{keyword}` line")))?;
    let rest = text
        .strip_prefix(keyword)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(no, format!("expected `{keyword} <count>`, found `{text}`")))?;
    let n = rest
        .parse()
        .map_err(|_| bad(no, format!("bad {keyword} count `{rest}`")))?;
    Ok((no, n))
}

pub fn parse(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (no, header) = lines.next().ok_or_else(|| Error::Checkpoint("empty file".into()))?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(no, "not an auxvi checkpoint"))?;
    if version != VERSION.to_string() {
        return Err(bad(no, format!("unsupported version `{version}` (expected {VERSION})")));
    }

    let (_, n_cfg) = counted(lines.next(), "config")?;
    let mut cfg = String::new();
    for _ in 0..n_cfg {
        let (_, l) = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("config block truncated".into()))?;
        cfg.push_str(l);
        cfg.push('\n');
    }
    let config = ExperimentConfig::from_toml_str(&cfg)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

    let (_, n_params) = counted(lines.next(), "params")?;
    let mut params = ParamVector::new();
    for _ in 0..n_params {
        let (no, l) = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("parameter block truncated".into()))?;
        let (name, value) = l
            .split_once('\t')
            .ok_or_else(|| bad(no, "expected `<name>\\t<value>`"))?;
        let value: f64 = value
            .parse()
            .map_err(|_| bad(no, format!("bad value `{value}` for `{name}`")))?;
        params.push(name, value).map_err(|e| bad(no, e))?;
    }

    match lines.next() {
        Some((_, "end")) => {}
        Some((no, l)) => return Err(bad(no, format!("expected `end`, found `{l}`"))),
        None => return Err(Error::Checkpoint("missing `end` line".into())),
    }
    if let Some((no, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(bad(no, "content after `end`"));
    }
    Ok(Checkpoint { config, params })
}
