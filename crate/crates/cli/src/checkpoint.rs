//! Checkpoint file format.
//!
//! Layout (little-endian):
//!   magic  b"SLAB", version u32
//!   step   u64
//!   count  u32
//!   entry table: per entry
//!     name_len u32, name bytes, rank u32, dims u64 x rank, elements u64
//!   payload: per entry, elements x f64
//!
//! Entries hold the parameters by name followed by the optimizer moments as
//! `optim.v.<name>` / `optim.u.<name>`. Save and load round-trip bit for
//! bit; values are stored as f64 regardless of the run precision (f32 values
//! widen losslessly).

use anyhow::{bail, Context, Result};
use stabilitylab::model::Parameters;
use stabilitylab::optim::OptimizerState;
use stabilitylab::Scalar;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SLAB";
const VERSION: u32 = 1;

pub struct Entry {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: Vec<f64>,
}

pub struct Checkpoint {
    pub step: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_state<T: Scalar>(params: &Parameters<T>, state: &OptimizerState<T>) -> Self {
        let mut entries = Vec::with_capacity(params.len() * 3);
        for p in params.iter() {
            entries.push(Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().iter().map(|&d| d as u64).collect(),
                data: p.tensor.data().iter().map(|v| v.to_f64()).collect(),
            });
        }
        for (idx, p) in params.iter().enumerate() {
            entries.push(Entry {
                name: format!("optim.v.{}", p.name),
                shape: p.tensor.shape().iter().map(|&d| d as u64).collect(),
                data: state.v[idx].iter().map(|v| v.to_f64()).collect(),
            });
            entries.push(Entry {
                name: format!("optim.u.{}", p.name),
                shape: p.tensor.shape().iter().map(|&d| d as u64).collect(),
                data: state.u[idx].iter().map(|v| v.to_f64()).collect(),
            });
        }
        Self { step: state.t, entries }
    }

    /// Copies parameter and optimizer values back into an existing model of
    /// the same architecture (entry names must match exactly).
    pub fn restore<T: Scalar>(&self, params: &mut Parameters<T>, state: &mut OptimizerState<T>) -> Result<()> {
        for (idx, name) in params
            .iter()
            .map(|p| p.name.clone())
            .collect::<Vec<_>>()
            .iter()
            .enumerate()
        {
            let entry = self
                .find(name)
                .with_context(|| format!("checkpoint missing parameter {name}"))?;
            let target = params.get_mut(idx);
            if entry.data.len() != target.tensor.len() {
                bail!(
                    "checkpoint entry {name} has {} elements, model wants {}",
                    entry.data.len(),
                    target.tensor.len()
                );
            }
            for (dst, src) in target.tensor.data_mut().iter_mut().zip(&entry.data) {
                *dst = T::from_f64(*src);
            }
            let v_entry = self
                .find(&format!("optim.v.{name}"))
                .with_context(|| format!("checkpoint missing optimizer moment for {name}"))?;
            let u_entry = self
                .find(&format!("optim.u.{name}"))
                .with_context(|| format!("checkpoint missing optimizer moment for {name}"))?;
            for (dst, src) in state.v[idx].iter_mut().zip(&v_entry.data) {
                *dst = T::from_f64(*src);
            }
            for (dst, src) in state.u[idx].iter_mut().zip(&u_entry.data) {
                *dst = T::from_f64(*src);
            }
        }
        state.t = self.step;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            buf.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        }
        for e in &self.entries {
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .with_context(|| format!("opening {}", path.display()))?
            .read_to_end(&mut bytes)?;
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                bail!("checkpoint truncated at byte {cur}");
            }
            let s = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(s)
        };
        if take(&mut cur, 4)? != MAGIC {
            bail!("not a checkpoint file");
        }
        let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        if version != VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let step = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())?;
            let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
            }
            let elements = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            headers.push((name, shape, elements));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, shape, elements) in headers {
            let raw = take(&mut cur, elements * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if cur != bytes.len() {
            bail!("checkpoint has {} trailing bytes", bytes.len() - cur);
        }
        Ok(Self { step, entries })
    }
}
