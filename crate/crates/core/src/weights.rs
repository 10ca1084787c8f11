//! Serialized tensor archives for extractor weights, plus seeded synthetic
//! generators used when no pretrained checkpoint is available.
//!
//! # File format (`.tensors`)
//!
//! Little-endian binary:
//!
//! ```text
//! magic   b"TNSR"
//! version u16 (currently 1)
//! count   u32
//! then per tensor:
//!   name_len u16, name (utf-8)
//!   dtype    u8 (0 = f32)
//!   ndim     u8
//!   dims     u32 * ndim
//!   data     f32 * prod(dims)
//! ```
//!
//! Tensor names follow the upstream checkpoint conventions
//! (`features.0.weight`, `blocks.3.attn.qkv.weight`, ...) so the fetch
//! script can dump checkpoints without renaming.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u16 = 1;

/// Named f32 tensors with deterministic (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    map: BTreeMap<String, ArrayD<f32>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::weights(format!("missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// FNV-1a over names, shapes and raw little-endian payloads.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, tensor) in &self.map {
            eat(name.as_bytes());
            for &d in tensor.shape() {
                eat(&(d as u32).to_le_bytes());
            }
            for v in tensor.iter() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.map.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.map {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[0u8, tensor.ndim() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let std_order = tensor.as_standard_layout();
            for v in std_order.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::weights(format!(
                "{}: not a tensor archive",
                path.display()
            )));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::weights(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::weights("tensor name is not utf-8"))?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head)?;
            if head[0] != 0 {
                return Err(Error::weights(format!("unsupported dtype {}", head[0])));
            }
            let ndim = head[1] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::weights(format!("tensor '{name}' has non-finite values")));
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::weights(format!("tensor '{name}': {e}")))?;
            map.insert(name, tensor);
        }
        Ok(TensorMap { map })
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Seeded standard-normal sampler (Box-Muller over ChaCha8).
pub struct NormalSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        NormalSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1: f64 = loop {
            let u: f64 = self.rng.random();
            if u > 1e-12 {
                break u;
            }
        };
        let u2: f64 = self.rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn tensor(&mut self, shape: &[usize], std: f64) -> ArrayD<f32> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| (self.next() * std) as f32).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

/// Conv layers of the 16-layer recognition network's feature stack:
/// (feature index, in channels, out channels).
pub const VGG16_CONVS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (17, 256, 512),
    (19, 512, 512),
    (21, 512, 512),
    (24, 512, 512),
    (26, 512, 512),
    (28, 512, 512),
];

/// Feature indices at which the stack max-pools (2x2, stride 2).
pub const VGG16_POOLS: [usize; 5] = [4, 9, 16, 23, 30];

/// Transformer geometry for the small 8-pixel-patch variant.
pub const VIT_EMBED: usize = 384;
pub const VIT_DEPTH: usize = 12;
pub const VIT_HEADS: usize = 6;
pub const VIT_MLP: usize = 1536;
pub const VIT_PATCH: usize = 8;
/// Token grid side the stored positional embedding corresponds to (224 / 8).
pub const VIT_BASE_GRID: usize = 28;

/// He-initialized stand-in for the pretrained convolutional extractor.
pub fn synthetic_vgg16(seed: u64) -> TensorMap {
    let mut sampler = NormalSampler::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut map = TensorMap::new();
    for (idx, c_in, c_out) in VGG16_CONVS {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        map.insert(
            format!("features.{idx}.weight"),
            sampler.tensor(&[c_out, c_in, 3, 3], std),
        );
        map.insert(format!("features.{idx}.bias"), sampler.tensor(&[c_out], 0.0));
    }
    map
}

/// Stand-in for the pretrained self-supervised transformer.
///
/// The patch projection is built as a separable product of a random spatial
/// pattern and a per-channel mix dominated by the luma direction with a
/// small chroma leak. That reproduces the property the structure extractor
/// is chosen for: token features respond to spatial luminance structure and
/// are nearly invariant to color changes.
pub fn synthetic_vit_s8(seed: u64) -> TensorMap {
    let mut s = NormalSampler::new(seed.wrapping_mul(0x85eb_ca6b).wrapping_add(7));
    let mut map = TensorMap::new();
    let (d, p) = (VIT_EMBED, VIT_PATCH);

    // Patch projection: spatial pattern x (luma + small chroma leak).
    let luma = [0.299f64, 0.587, 0.114];
    let chroma_leak = 0.08;
    let he_std = (2.0 / (3 * p * p) as f64).sqrt();
    let mut w = ArrayD::zeros(IxDyn(&[d, 3, p, p]));
    for od in 0..d {
        let mut pattern = vec![0.0f64; p * p];
        for v in pattern.iter_mut() {
            *v = s.next();
        }
        let mix: Vec<f64> = (0..3).map(|c| luma[c] + chroma_leak * s.next()).collect();
        // Normalize this output dim to the He scale.
        let mut sq = 0.0;
        for c in 0..3 {
            for yx in 0..p * p {
                let v = pattern[yx] * mix[c];
                sq += v * v;
            }
        }
        let scale = he_std / (sq / (3 * p * p) as f64).sqrt().max(1e-12);
        for c in 0..3 {
            for py in 0..p {
                for px in 0..p {
                    w[[od, c, py, px]] = (pattern[py * p + px] * mix[c] * scale) as f32;
                }
            }
        }
    }
    map.insert("patch_embed.proj.weight", w);
    map.insert("patch_embed.proj.bias", s.tensor(&[d], 0.0));
    map.insert("cls_token", s.tensor(&[1, 1, d], 0.02));
    let tokens = VIT_BASE_GRID * VIT_BASE_GRID + 1;
    map.insert("pos_embed", s.tensor(&[1, tokens, d], 0.02));

    for b in 0..VIT_DEPTH {
        let pre = format!("blocks.{b}");
        map.insert(format!("{pre}.norm1.weight"), ones(&[d]));
        map.insert(format!("{pre}.norm1.bias"), s.tensor(&[d], 0.0));
        map.insert(format!("{pre}.attn.qkv.weight"), s.tensor(&[3 * d, d], 0.02));
        map.insert(format!("{pre}.attn.qkv.bias"), s.tensor(&[3 * d], 0.0));
        map.insert(format!("{pre}.attn.proj.weight"), s.tensor(&[d, d], 0.02));
        map.insert(format!("{pre}.attn.proj.bias"), s.tensor(&[d], 0.0));
        map.insert(format!("{pre}.norm2.weight"), ones(&[d]));
        map.insert(format!("{pre}.norm2.bias"), s.tensor(&[d], 0.0));
        map.insert(format!("{pre}.mlp.fc1.weight"), s.tensor(&[VIT_MLP, d], 0.02));
        map.insert(format!("{pre}.mlp.fc1.bias"), s.tensor(&[VIT_MLP], 0.0));
        map.insert(format!("{pre}.mlp.fc2.weight"), s.tensor(&[d, VIT_MLP], 0.02));
        map.insert(format!("{pre}.mlp.fc2.bias"), s.tensor(&[d], 0.0));
    }
    map
}

fn ones(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_archive() {
        let mut map = TensorMap::new();
        map.insert("a.weight", ArrayD::from_elem(IxDyn(&[2, 3]), 1.5f32));
        map.insert(
            "b.bias",
            ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1, -0.2, 0.3, -0.4]).unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tensors");
        map.write(&path).unwrap();
        let back = TensorMap::read(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("a.weight").unwrap(), map.get("a.weight").unwrap());
        assert_eq!(back.get("b.bias").unwrap(), map.get("b.bias").unwrap());
        assert_eq!(back.checksum(), map.checksum());
    }

    #[test]
    fn read_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tensors");
        std::fs::write(&path, b"definitely not tensors").unwrap();
        assert!(TensorMap::read(&path).is_err());
    }

    #[test]
    fn synthetic_generators_are_deterministic() {
        let a = synthetic_vgg16(11);
        let b = synthetic_vgg16(11);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), synthetic_vgg16(12).checksum());

        let v = synthetic_vit_s8(11);
        assert_eq!(v.checksum(), synthetic_vit_s8(11).checksum());
        assert_eq!(v.get("pos_embed").unwrap().shape(), &[1, 785, 384]);
        assert_eq!(
            v.get("patch_embed.proj.weight").unwrap().shape(),
            &[384, 3, 8, 8]
        );
    }

    #[test]
    fn vgg_shapes() {
        let m = synthetic_vgg16(0);
        assert_eq!(m.get("features.0.weight").unwrap().shape(), &[64, 3, 3, 3]);
        assert_eq!(
            m.get("features.28.weight").unwrap().shape(),
            &[512, 512, 3, 3]
        );
        assert_eq!(m.len(), 26);
    }

    #[test]
    fn normal_sampler_moments() {
        let mut s = NormalSampler::new(3);
        let n = 20_000;
        let vals: Vec<f64> = (0..n).map(|_| s.next()).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
