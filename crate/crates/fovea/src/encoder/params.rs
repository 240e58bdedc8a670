//! Named parameter tensors and the flat binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"FVEA"
//! version u32 (currently 1)
//! dtype   u8   (1 = f32, 2 = f64)
//! config  low_res_side u32, patch_side u32, embed_dim u32, num_heads u32,
//!         num_layers u32, aux_blocks u32, vocab_size u32, text_layers u32,
//!         per_round_cap u32, seed u64,
//!         n_multipliers u32, then each multiplier as u32
//! count   u32 number of parameters
//! entry   name_len u32, name bytes (utf-8),
//!         ndim u32, each dim as u32,
//!         raw values (numel * dtype size, little-endian)
//! ```
//!
//! Entries appear in parameter-store insertion order, which is fixed by the
//! encoder constructor, so identical parameters produce identical bytes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::EncoderConfig;

const MAGIC: &[u8; 4] = b"FVEA";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entries[self.index_of(name)?].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        Ok(&mut self.entries[i].1)
    }

    pub fn at(&self, idx: usize) -> (&str, &Tensor<T>) {
        let (n, t) = &self.entries[idx];
        (n, t)
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insertion-order iteration; this order defines the checkpoint layout.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            out.insert(n, t.map_convert()).expect("names stay unique");
        }
        out
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated checkpoint at offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.push(T::DTYPE_TAG);
    put_u32(&mut buf, cfg.low_res_side as u32);
    put_u32(&mut buf, cfg.patch_side as u32);
    put_u32(&mut buf, cfg.embed_dim as u32);
    put_u32(&mut buf, cfg.num_heads as u32);
    put_u32(&mut buf, cfg.num_layers as u32);
    put_u32(&mut buf, cfg.aux_blocks as u32);
    put_u32(&mut buf, cfg.vocab_size as u32);
    put_u32(&mut buf, cfg.text_layers as u32);
    put_u32(&mut buf, cfg.per_round_cap as u32);
    put_u64(&mut buf, cfg.seed);
    put_u32(&mut buf, cfg.scale_multipliers.len() as u32);
    for &m in &cfg.scale_multipliers {
        put_u32(&mut buf, m as u32);
    }
    put_u32(&mut buf, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            match T::DTYPE_TAG {
                1 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint, converting stored values into `T` if the stored
/// precision differs.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(EncoderConfig, ParamStore<T>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", r.path)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            r.path
        )));
    }
    let dtype = r.u8()?;
    if dtype != 1 && dtype != 2 {
        return Err(Error::Data(format!("{}: unknown dtype tag {dtype}", r.path)));
    }
    let low_res_side = r.u32()? as usize;
    let patch_side = r.u32()? as usize;
    let embed_dim = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let num_layers = r.u32()? as usize;
    let aux_blocks = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let text_layers = r.u32()? as usize;
    let per_round_cap = r.u32()? as usize;
    let seed = r.u64()?;
    let n_mult = r.u32()? as usize;
    let mut scale_multipliers = Vec::with_capacity(n_mult);
    for _ in 0..n_mult {
        scale_multipliers.push(r.u32()? as usize);
    }
    let cfg = EncoderConfig {
        low_res_side,
        patch_side,
        scale_multipliers,
        embed_dim,
        num_heads,
        num_layers,
        aux_blocks,
        vocab_size,
        text_layers,
        per_round_cap,
        seed,
    };
    let n_params = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("{}: invalid parameter name", r.path)))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = match dtype {
                1 => {
                    let b = r.take(4)?;
                    f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                }
                _ => {
                    let b = r.take(8)?;
                    let mut a = [0u8; 8];
                    a.copy_from_slice(b);
                    f64::from_le_bytes(a)
                }
            };
            data.push(T::from_f64(v));
        }
        params.insert(&name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after last parameter",
            r.path,
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = EncoderConfig::desk(7);
        let mut params: ParamStore<f32> = ParamStore::new();
        let mut rng = Rng::seed_from(61);
        for (name, shape) in [
            ("a.w", vec![3usize, 4]),
            ("a.b", vec![4]),
            ("deep.nested.tensor", vec![2, 2, 2]),
        ] {
            let data: Vec<f32> = (0..shape.iter().product::<usize>())
                .map(|_| rng.range_f64(-1.0, 1.0) as f32)
                .collect();
            params.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        let dir = std::env::temp_dir().join("fovea_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(cfg.low_res_side, cfg2.low_res_side);
        assert_eq!(cfg.scale_multipliers, cfg2.scale_multipliers);
        assert_eq!(cfg.seed, cfg2.seed);
        assert_eq!(params.len(), params2.len());
        for ((n1, t1), (n2, t2)) in params.iter().zip(params2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        // Twice-saved files are byte-identical.
        let path2 = dir.join("rt2.ckpt");
        save_checkpoint(&path2, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_data_error() {
        let cfg = EncoderConfig::desk(7);
        let mut params: ParamStore<f32> = ParamStore::new();
        params
            .insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let dir = std::env::temp_dir().join("fovea_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
