//! Binary checkpoint format: named f64 tensors, a config snapshot and the
//! step count. Loading and re-saving a file reproduces it byte for byte.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{read_exact_at, read_u32_at};
use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::trainer::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGF1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Named tensors in the order they were written.
    pub tensors: Vec<(String, Matrix)>,
    pub config: TrainConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Copy of this checkpoint keeping only tensors whose name satisfies the
    /// predicate.
    pub fn retain_tensors(&self, keep: impl Fn(&str) -> bool) -> Checkpoint {
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| keep(n))
                .cloned()
                .collect(),
            config: self.config.clone(),
            step: self.step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, m) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for &v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let cfg = self.config.to_kv_string();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::fs::File::open(path)?;
        let mut r = BufReader::new(file);
        let mut offset = 0usize;
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, &mut offset)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(
                "offset 0",
                format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            ));
        }
        let count = read_u32_at(&mut r, &mut offset)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            read_exact_at(&mut r, &mut len_buf, &mut offset)?;
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact_at(&mut r, &mut name_buf, &mut offset)?;
            let name = String::from_utf8(name_buf).map_err(|_| {
                Error::parse(format!("offset {offset}"), "tensor name is not UTF-8")
            })?;
            let rows = read_u32_at(&mut r, &mut offset)? as usize;
            let cols = read_u32_at(&mut r, &mut offset)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut buf = [0u8; 8];
                read_exact_at(&mut r, &mut buf, &mut offset)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        let cfg_len = read_u32_at(&mut r, &mut offset)? as usize;
        let mut cfg_buf = vec![0u8; cfg_len];
        read_exact_at(&mut r, &mut cfg_buf, &mut offset)?;
        let cfg_text = String::from_utf8(cfg_buf)
            .map_err(|_| Error::parse(format!("offset {offset}"), "config block is not UTF-8"))?;
        let config = TrainConfig::from_kv_text(&cfg_text)?;
        let mut step_buf = [0u8; 8];
        read_exact_at(&mut r, &mut step_buf, &mut offset)?;
        let step = u64::from_le_bytes(step_buf);
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::parse(
                format!("offset {offset}"),
                "trailing bytes after checkpoint payload",
            ));
        }
        Ok(Checkpoint {
            tensors,
            config,
            step,
        })
    }
}
