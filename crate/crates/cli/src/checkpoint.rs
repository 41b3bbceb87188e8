//! "ULTC" checkpoint format: everything needed to rebuild a model and
//! resume training bit-exactly.
//!
//! Layout, all little-endian: magic `ULTC`, format version u16, the
//! canonical run-config text (u32 byte length + UTF-8), a value blob
//! (u32 count + that many f64) holding the normalization mean and std
//! followed by the model parameters in enumeration order, the optimizer
//! state (lr, beta1, beta2, eps as f64; step count u64; u32 moment length;
//! first moments; second moments), and the completed-epoch counter u32.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;
use ultra_core::{AdamState, NormStats, UltraModel};

pub const ULTC_MAGIC: [u8; 4] = *b"ULTC";
pub const ULTC_VERSION: u16 = 1;

/// A parsed checkpoint. `params` excludes the two normalization values,
/// which live in `norm`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub norm: NormStats,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub epoch: u32,
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<(), CliError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&ULTC_MAGIC);
    buf.extend_from_slice(&ULTC_VERSION.to_le_bytes());

    let config_text = cp.config.to_text();
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let count = cp.params.len() + 2;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&cp.norm.mean().to_le_bytes());
    buf.extend_from_slice(&cp.norm.std().to_le_bytes());
    for p in &cp.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }

    buf.extend_from_slice(&cp.adam.lr().to_le_bytes());
    buf.extend_from_slice(&cp.adam.beta1().to_le_bytes());
    buf.extend_from_slice(&cp.adam.beta2().to_le_bytes());
    buf.extend_from_slice(&cp.adam.eps().to_le_bytes());
    buf.extend_from_slice(&cp.adam.step_count().to_le_bytes());
    let (m, v) = cp.adam.moments();
    buf.extend_from_slice(&(m.len() as u32).to_le_bytes());
    for x in m {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    buf.extend_from_slice(&cp.epoch.to_le_bytes());

    // Write-then-rename so an interrupted save can never clobber the
    // previous good checkpoint with a truncated file.
    let tmp = path.with_extension("ultc.tmp");
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    fs::write(&tmp, &buf).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::Io(format!(
                "parse error at offset {}: truncated while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CliError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let buf =
        fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != ULTC_MAGIC {
        return Err(CliError::Io(format!(
            "{}: not a ULTC checkpoint (bad magic at offset 0)",
            path.display()
        )));
    }
    let version = r.u16("version")?;
    if version != ULTC_VERSION {
        return Err(CliError::VersionMismatch(format!(
            "{}: unsupported checkpoint version {version} (expected {ULTC_VERSION})",
            path.display()
        )));
    }

    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config text")?;
    let config_text = std::str::from_utf8(config_bytes).map_err(|e| {
        CliError::Io(format!(
            "parse error at offset {}: config text is not UTF-8 ({e})",
            r.pos - config_len
        ))
    })?;
    let config = RunConfig::parse(config_text)
        .map_err(|e| CliError::Io(format!("{}: embedded config: {e}", path.display())))?;

    let count = r.u32("value count")? as usize;
    if count < 2 {
        return Err(CliError::Io(format!(
            "parse error at offset {}: value blob must hold at least the two normalization values",
            r.pos - 4
        )));
    }
    let mean = r.f64("normalization mean")?;
    let std = r.f64("normalization std")?;
    let norm = NormStats::new(mean, std)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let params = r.f64_vec(count - 2, "parameters")?;

    let lr = r.f64("optimizer lr")?;
    let beta1 = r.f64("optimizer beta1")?;
    let beta2 = r.f64("optimizer beta2")?;
    let eps = r.f64("optimizer eps")?;
    let t = r.u64("optimizer step count")?;
    let m_len = r.u32("optimizer moment length")? as usize;
    if m_len != params.len() {
        return Err(CliError::Io(format!(
            "{}: optimizer holds {m_len} moments for {} parameters",
            path.display(),
            params.len()
        )));
    }
    let m = r.f64_vec(m_len, "first moments")?;
    let v = r.f64_vec(m_len, "second moments")?;
    let adam = AdamState::from_parts(lr, beta1, beta2, eps, t, m, v)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    let epoch = r.u32("epoch counter")?;
    if r.pos != buf.len() {
        return Err(CliError::Io(format!(
            "parse error at offset {}: {} trailing bytes",
            r.pos,
            buf.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        config,
        norm,
        params,
        adam,
        epoch,
    })
}

/// Rebuild the model a checkpoint describes: architecture from the embedded
/// config, then the saved parameters on top of it.
pub fn rebuild_model(cp: &Checkpoint) -> Result<UltraModel, CliError> {
    let mut model = UltraModel::new(cp.config.ultra(), cp.norm)
        .map_err(|e| CliError::Io(format!("checkpoint config does not build a model: {e}")))?;
    model
        .set_params(&cp.params)
        .map_err(|e| CliError::Io(format!("checkpoint parameters do not fit its config: {e}")))?;
    Ok(model)
}
