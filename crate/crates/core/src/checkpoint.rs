//! Parameter checkpoint file format.
//!
//! Layout: magic "DCKP", version u32, a length-prefixed UTF-8 config block,
//! then per-tensor records until end of file. Each record is name length +
//! name, rank, dims as u32, and a little-endian payload in the declared
//! width. The config block carries `width` and `seed` lines plus the model
//! configuration; anything after a `---` line is free-form provenance and
//! is ignored when loading.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_params, ModelParams};
use crate::scalar::{NumericWidth, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn ferr(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

/// Serializes parameters plus a provenance block (`extra` goes after the
/// `---` separator; pass "" for none).
pub fn write_checkpoint<S: Scalar>(
    path: &Path,
    params: &ModelParams<S>,
    extra: &str,
) -> Result<()> {
    let mut config_block = format!(
        "width = {}\nseed = {}\n{}",
        S::WIDTH.bits(),
        params.seed,
        params.config.to_text()
    );
    if !extra.is_empty() {
        config_block.push_str("---\n");
        config_block.push_str(extra);
        if !extra.ends_with('\n') {
            config_block.push('\n');
        }
    }

    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_block.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_block.as_bytes());
    for (name, tensor) in params.named_all() {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&tensor.value_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ferr(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Loads a checkpoint written in width `S::WIDTH`; a width mismatch is
/// rejected rather than converted. Returns the parameters and the full
/// config block for provenance.
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<(ModelParams<S>, String)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ferr(path, 0, "bad magic, expected DCKP"));
    }
    let version = cur.take_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ferr(path, 4, format!("unsupported version {version}")));
    }
    let config_len = cur.take_u32("config length")? as usize;
    let config_offset = cur.pos as u64;
    let config_block = std::str::from_utf8(cur.take(config_len, "config block")?)
        .map_err(|_| ferr(path, config_offset, "config block is not UTF-8"))?
        .to_string();

    // Model section ends at the optional provenance separator.
    let model_section: &str = config_block
        .split("---")
        .next()
        .unwrap_or(&config_block);
    let mut width_line = None;
    let mut seed_line = None;
    let mut model_lines = String::new();
    for line in model_section.lines() {
        let trimmed = line.trim();
        if let Some(v) = trimmed.strip_prefix("width =") {
            width_line = Some(v.trim().to_string());
        } else if let Some(v) = trimmed.strip_prefix("seed =") {
            seed_line = Some(v.trim().to_string());
        } else {
            model_lines.push_str(line);
            model_lines.push('\n');
        }
    }
    let width: u32 = width_line
        .ok_or_else(|| Error::Config(format!("{}: missing width", path.display())))?
        .parse()
        .map_err(|_| Error::Config(format!("{}: bad width", path.display())))?;
    match NumericWidth::from_bits(width) {
        Some(w) if w == S::WIDTH => {}
        Some(w) => {
            return Err(Error::Config(format!(
                "{}: checkpoint width {} does not match run width {}",
                path.display(),
                w.bits(),
                S::WIDTH.bits()
            )))
        }
        None => return Err(Error::Config(format!("{}: unsupported width {width}", path.display()))),
    }
    let seed: u64 = seed_line
        .ok_or_else(|| Error::Config(format!("{}: missing seed", path.display())))?
        .parse()
        .map_err(|_| Error::Config(format!("{}: bad seed", path.display())))?;
    let config = crate::model::ModelConfig::from_text(&model_lines)?;

    let mut params: ModelParams<S> = init_params(&config, seed)?;
    let mut expected: std::collections::BTreeMap<String, bool> = params
        .named_all()
        .iter()
        .map(|(n, _)| (n.clone(), false))
        .collect();

    let width_bytes = S::WIDTH.bytes();
    while !cur.done() {
        let name_len = cur.take_u32("tensor name length")? as usize;
        let name_offset = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| ferr(path, name_offset, "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.take_u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.take_u32("tensor dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.take(numel * width_bytes, "tensor payload")?;

        match expected.get_mut(&name) {
            None => {
                return Err(Error::TensorMismatch {
                    name,
                    detail: "not part of the configured model".into(),
                })
            }
            Some(seen @ false) => *seen = true,
            Some(true) => {
                return Err(Error::TensorMismatch {
                    name,
                    detail: "appears twice".into(),
                })
            }
        }
        let target = params
            .named_all_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .expect("expected set mirrors named_all");
        if target.shape() != dims.as_slice() {
            return Err(Error::TensorMismatch {
                name,
                detail: format!("shape {:?} in file vs {:?} in config", dims, target.shape()),
            });
        }
        for (i, chunk) in payload.chunks_exact(width_bytes).enumerate() {
            target.values_mut()[i] = S::from_le_slice(chunk);
        }
        if !target.all_finite() {
            return Err(Error::TensorMismatch {
                name,
                detail: "non-finite payload".into(),
            });
        }
    }

    if let Some((missing, _)) = expected.iter().find(|(_, &seen)| !seen) {
        return Err(Error::TensorMismatch {
            name: missing.clone(),
            detail: "missing from checkpoint".into(),
        });
    }
    Ok((params, config_block))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use tempfile::tempdir;

    fn small_params(seed: u64) -> ModelParams<f64> {
        let mut config = ModelConfig::default();
        config.encoder.stages.truncate(2);
        config.encoder.embedding_dim = 32;
        config.projector.hidden_sizes = vec![32, 16];
        config.projector.output_dim = 8;
        config.projector.relu = vec![true, true];
        config.projector.batch_norm = vec![true, false];
        config.classifier.hidden = 16;
        init_params(&config, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.dckp");
        let params = small_params(3);
        write_checkpoint(&path, &params, "run = test\n").unwrap();
        let (loaded, block) = read_checkpoint::<f64>(&path).unwrap();
        assert!(block.contains("run = test"));
        for ((na, ta), (nb, tb)) in params.named_all().iter().zip(loaded.named_all().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.value_bytes(), tb.value_bytes(), "tensor {na}");
        }
        // Re-writing the loaded params reproduces the file byte for byte.
        let path2 = dir.path().join("model2.dckp");
        write_checkpoint(&path2, &loaded, "run = test\n").unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_rejected_at_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.dckp");
        write_checkpoint(&path, &small_params(1), "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[1] = b'?';
        fs::write(&path, &bytes).unwrap();
        match read_checkpoint::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_the_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.dckp");
        write_checkpoint(&path, &small_params(2), "").unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_checkpoint::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w64.dckp");
        write_checkpoint(&path, &small_params(4), "").unwrap();
        match read_checkpoint::<f32>(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("width"), "{msg}"),
            other => panic!("expected width error, got {other:?}"),
        }
    }

    #[test]
    fn f32_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w32.dckp");
        let mut config = ModelConfig::default();
        config.encoder.stages.truncate(1);
        config.encoder.embedding_dim = 16;
        config.projector.hidden_sizes = vec![16];
        config.projector.output_dim = 4;
        config.projector.relu = vec![true];
        config.projector.batch_norm = vec![false];
        let params: ModelParams<f32> = init_params(&config, 9).unwrap();
        write_checkpoint(&path, &params, "").unwrap();
        let (loaded, _) = read_checkpoint::<f32>(&path).unwrap();
        for ((_, ta), (_, tb)) in params.named_all().iter().zip(loaded.named_all().iter()) {
            assert_eq!(ta.value_bytes(), tb.value_bytes());
        }
    }

    #[test]
    fn shape_tamper_names_the_tensor() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tampered.dckp");
        let params = small_params(5);
        write_checkpoint(&path, &params, "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Find the first tensor record and flip one of its dims.
        let needle = b"encoder.stage0.kernel";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let dim_pos = pos + needle.len() + 4; // rank field, then first dim
        bytes[dim_pos] = bytes[dim_pos].wrapping_add(1);
        fs::write(&path, &bytes).unwrap();
        match read_checkpoint::<f64>(&path) {
            Err(Error::TensorMismatch { name, .. }) => {
                assert_eq!(name, "encoder.stage0.kernel")
            }
            // Dim tampering shifts the payload framing, so a format error
            // later in the stream is also a valid rejection.
            Err(Error::Format { .. }) => {}
            other => panic!("expected rejection, got {other:?}"),
        }
    }
}
