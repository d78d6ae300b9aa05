use std::fs;
use std::path::Path;

use super::{init_params, ModelConfig, ModelError, Result, Saferec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFR1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Layout: magic, `u32` config length + `key=value` text (model fields and
/// `n_items`), `u32` parameter count, then per parameter `u32` name length,
/// name, `u32` rank, `u64` dims, little-endian `f64` values.
pub fn write_checkpoint(model: &Saferec) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let text = format!("{}n_items={}\n", model.config().to_text(), model.n_items());
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, model.params().len());
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| ModelError::Checkpoint("text is not utf-8".into()))
    }
}

/// Parses a checkpoint; parameter names and shapes must match what the
/// stored config builds.
pub fn read_checkpoint(buf: &[u8]) -> Result<Saferec> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("wrong magic".into()));
    }
    let text = r.text()?;
    let mut n_items = None;
    let mut model_lines = String::new();
    for line in text.lines() {
        match line.strip_prefix("n_items=") {
            Some(v) => n_items = v.parse::<usize>().ok(),
            None => {
                model_lines.push_str(line);
                model_lines.push('\n');
            }
        }
    }
    let n_items = n_items.ok_or_else(|| ModelError::Checkpoint("missing n_items".into()))?;
    let config = ModelConfig::from_text(&model_lines)?;
    config.validate()?;
    let mut params = init_params(&config, n_items);
    let count = r.u32()?;
    if count != params.len() {
        return Err(ModelError::Checkpoint(format!(
            "{count} parameters stored, config expects {}",
            params.len()
        )));
    }
    for id in 0..count {
        let name = r.text()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let slot = params.by_id_mut(id);
        if slot.name != name || slot.value.shape() != shape {
            return Err(ModelError::Checkpoint(format!(
                "parameter {id}: stored {name} {shape:?}, expected {} {:?}",
                slot.name,
                slot.value.shape()
            )));
        }
        let n = slot.value.numel();
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        slot.value = Tensor::new(shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(Saferec::from_parts(config, n_items, params))
}

pub fn save_checkpoint(path: &Path, model: &Saferec) -> Result<()> {
    fs::write(path, write_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Saferec> {
    let buf = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&buf)
}
