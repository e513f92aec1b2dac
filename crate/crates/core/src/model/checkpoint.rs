//! Checkpoint container: model configuration, named parameter table, and an
//! optimizer-state table with the same layout. Arrays are stored as
//! little-endian f32, so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use super::linalg::Tensor;
use super::vit::ModelParams;
use super::{ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"HBCK";
const VERSION: u8 = 1;

/// Extra named arrays persisted next to the parameters (optimizer moments,
/// step counters); empty when a checkpoint is inference-only.
pub type NamedTensors = Vec<(String, Tensor)>;

pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: NamedTensors,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_table<W: Write>(
    w: &mut W,
    entries: &[(String, Tensor)],
    io: impl Fn(std::io::Error) -> ModelError,
) -> Result<(), ModelError> {
    w.write_all(&(entries.len() as u32).to_le_bytes()).map_err(&io)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(&io)?;
        w.write_all(bytes).map_err(&io)?;
        w.write_all(&(t.rows as u32).to_le_bytes()).map_err(&io)?;
        w.write_all(&(t.cols as u32).to_le_bytes()).map_err(&io)?;
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes()).map_err(&io)?;
        }
    }
    Ok(())
}

fn read_table<R: Read>(
    r: &mut R,
    err: &impl Fn(String) -> ModelError,
) -> Result<Vec<(String, Tensor)>, ModelError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| err(e.to_string()))?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(|e| err(e.to_string()))?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name).map_err(|e| err(e.to_string()))?;
        r.read_exact(&mut b4).map_err(|e| err(e.to_string()))?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|e| err(e.to_string()))?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw).map_err(|e| err(e.to_string()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((
            String::from_utf8(name).map_err(|e| err(e.to_string()))?,
            Tensor::from_vec(rows, cols, data),
        ));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let io = io_err(path);
    w.write_all(MAGIC).map_err(&io)?;
    w.write_all(&[VERSION]).map_err(&io)?;
    w.write_all(&ckpt.config_hash).map_err(&io)?;
    let config_json = serde_json::to_vec(&ckpt.config).map_err(|e| ModelError::Checkpoint {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.write_all(&(config_json.len() as u32).to_le_bytes()).map_err(&io)?;
    w.write_all(&config_json).map_err(&io)?;
    write_table(&mut w, &ckpt.params.entries, &io)?;
    write_table(&mut w, &ckpt.optimizer, &io)?;
    w.flush().map_err(&io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let err = |msg: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| err(e.to_string()))?;
    if &magic != MAGIC {
        return Err(err("bad magic; not a checkpoint".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|e| err(e.to_string()))?;
    if version[0] != VERSION {
        return Err(err(format!("unsupported version {}", version[0])));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash).map_err(|e| err(e.to_string()))?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| err(e.to_string()))?;
    let mut config_json = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut config_json).map_err(|e| err(e.to_string()))?;
    let config: ModelConfig =
        serde_json::from_slice(&config_json).map_err(|e| err(e.to_string()))?;
    let params = ModelParams {
        entries: read_table(&mut r, &err)?,
    };
    let optimizer = read_table(&mut r, &err)?;
    params.validate_against(&config)?;
    Ok(Checkpoint {
        config_hash,
        config,
        params,
        optimizer,
    })
}
