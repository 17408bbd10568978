//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RAVN"  u32 version  u32 count  count × tensor
//! u32 count  count × tensor          (optimizer moments, names end in .m / .v)
//! u64 rng state
//!
//! tensor: u16 name length, UTF-8 name, u8 ndim, ndim × u32 dims, f32 data
//! ```
//!
//! The first section also carries `meta.*` tensors describing the network,
//! the HU window and the training position. Integers and f64 values in
//! those are split into 16-bit limbs so that f32 stores them exactly.

use crate::arch::{NetworkConfig, RaVNet};
use crate::data::{write_atomic, WindowSpec};
use crate::error::{Error, Result};
use crate::nn::{dims_for_shape, ParamStore};
use crate::tensor::{Real, Tensor};
use std::collections::{HashMap, HashSet};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAVN";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_NET: &str = "meta.net";
const META_WINDOW: &str = "meta.window";
const META_EPOCH: &str = "meta.epoch";
const META_STEP: &str = "meta.adam_step";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters, buffers and optimizer state of one training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkConfig,
    pub window: WindowSpec,
    /// Number of completed epochs.
    pub epoch: u64,
    pub adam_step: u64,
    /// Parameters and buffers in store order.
    pub tensors: Vec<NamedTensor>,
    /// `(name.m, name.v)` pairs for every parameter with optimizer state.
    pub moments: Vec<NamedTensor>,
    pub rng_state: u64,
}

fn limbs(x: u64) -> [f32; 4] {
    [48, 32, 16, 0].map(|s| ((x >> s) & 0xffff) as f32)
}

fn from_limbs(v: &[f32]) -> Option<u64> {
    let mut x = 0u64;
    for &l in v {
        if !(0.0..65536.0).contains(&l) || l.fract() != 0.0 {
            return None;
        }
        x = (x << 16) | l as u64;
    }
    Some(x)
}

fn flat<T: Real>(t: &Tensor<T>) -> Vec<f32> {
    t.data().iter().map(|v| v.as_f64() as f32).collect()
}

impl Checkpoint {
    /// Snapshot of `store` (cast to f32) and the training position.
    pub fn capture<T: Real>(
        net: &NetworkConfig,
        window: WindowSpec,
        store: &ParamStore<T>,
        epoch: u64,
        rng_state: u64,
    ) -> Self {
        let mut tensors = Vec::with_capacity(store.len());
        let mut moments = Vec::new();
        for (name, e) in store.iter() {
            tensors.push(NamedTensor {
                name: name.clone(),
                shape: e.shape.clone(),
                data: flat(&e.value),
            });
            if let Some((m, v)) = &e.moments {
                moments.push(NamedTensor {
                    name: format!("{name}.m"),
                    shape: e.shape.clone(),
                    data: flat(m),
                });
                moments.push(NamedTensor {
                    name: format!("{name}.v"),
                    shape: e.shape.clone(),
                    data: flat(v),
                });
            }
        }
        Checkpoint {
            net: net.clone(),
            window,
            epoch,
            adam_step: store.step,
            tensors,
            moments,
            rng_state,
        }
    }

    /// Copies the snapshot into `store`. Every name and shape must match;
    /// on any mismatch `store` is left untouched.
    pub fn apply_to<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let moments: HashMap<&str, &NamedTensor> =
            self.moments.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut next = store.clone();
        for (name, e) in next.iter_mut() {
            let t = by_name.get(name.as_str()).ok_or_else(|| {
                Error::State(format!("tensor {name} is missing from the checkpoint"))
            })?;
            if t.shape != e.shape {
                return Err(Error::State(format!(
                    "tensor {name}: checkpoint shape {:?} does not match network shape {:?}",
                    t.shape, e.shape
                )));
            }
            let dims = e.value.dims();
            let tensor =
                |d: &[f32]| Tensor::from_vec(dims, d.iter().map(|&v| T::of(v as f64)).collect());
            e.value = tensor(&t.data)?;
            e.moments = match (
                moments.get(format!("{name}.m").as_str()),
                moments.get(format!("{name}.v").as_str()),
            ) {
                (Some(m), Some(v)) if e.trainable => Some((tensor(&m.data)?, tensor(&v.data)?)),
                (None, None) => None,
                _ => {
                    return Err(Error::State(format!(
                        "tensor {name}: inconsistent optimizer moments"
                    )))
                }
            };
        }
        if let Some(t) = self.tensors.iter().find(|t| next.get(&t.name).is_none()) {
            return Err(Error::State(format!(
                "tensor {} is not part of the network",
                t.name
            )));
        }
        next.step = self.adam_step;
        *store = next;
        Ok(())
    }

    /// Builds the network described by the checkpoint and loads its state.
    pub fn restore<T: Real>(&self) -> Result<(RaVNet, ParamStore<T>)> {
        let (net, mut store) = RaVNet::init(&self.net, 0)?;
        self.apply_to(&mut store)?;
        Ok((net, store))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let codes: Vec<f32> = self.net.to_codes().into_iter().map(|c| c as f32).collect();
        let window: Vec<f32> = [self.window.wl, self.window.ww]
            .iter()
            .flat_map(|v| limbs(v.to_bits()))
            .collect();
        let meta = [
            NamedTensor {
                name: META_NET.into(),
                shape: vec![codes.len()],
                data: codes,
            },
            NamedTensor {
                name: META_WINDOW.into(),
                shape: vec![8],
                data: window,
            },
            NamedTensor {
                name: META_EPOCH.into(),
                shape: vec![4],
                data: limbs(self.epoch).to_vec(),
            },
            NamedTensor {
                name: META_STEP.into(),
                shape: vec![4],
                data: limbs(self.adam_step).to_vec(),
            },
        ];
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_section(&mut out, meta.iter().chain(&self.tensors))?;
        write_section(&mut out, self.moments.iter())?;
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let mut seen = HashSet::new();
        let mut all = read_section(&mut r, &mut seen)?;
        let moments_at = r.pos as u64;
        let moments = read_section(&mut r, &mut seen)?;
        let rng_state = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                "trailing bytes after checkpoint",
            ));
        }

        let mut take_meta = |name: &str, len: usize| -> Result<Vec<f32>> {
            let i = all
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::format(8, format!("checkpoint has no {name} entry")))?;
            let t = all.remove(i);
            if t.data.len() != len {
                return Err(Error::format(
                    8,
                    format!("{name} has {} values, expected {len}", t.data.len()),
                ));
            }
            Ok(t.data)
        };
        let codes: Vec<u32> = take_meta(META_NET, 7)?.iter().map(|&c| c as u32).collect();
        let net = NetworkConfig::from_codes(&codes).map_err(|e| Error::format(8, e.to_string()))?;
        let w = take_meta(META_WINDOW, 8)?;
        let bad = |what: &str| Error::format(8, format!("malformed {what}"));
        let wl = f64::from_bits(from_limbs(&w[..4]).ok_or_else(|| bad(META_WINDOW))?);
        let ww = f64::from_bits(from_limbs(&w[4..]).ok_or_else(|| bad(META_WINDOW))?);
        let window = WindowSpec::new(wl, ww).map_err(|e| Error::format(8, e.to_string()))?;
        let epoch = from_limbs(&take_meta(META_EPOCH, 4)?).ok_or_else(|| bad(META_EPOCH))?;
        let adam_step = from_limbs(&take_meta(META_STEP, 4)?).ok_or_else(|| bad(META_STEP))?;
        if let Some(t) = all.iter().find(|t| t.name.starts_with("meta.")) {
            return Err(Error::format(
                8,
                format!("unknown metadata entry {}", t.name),
            ));
        }

        let params: HashMap<&str, &NamedTensor> =
            all.iter().map(|t| (t.name.as_str(), t)).collect();
        for m in &moments {
            let base = m
                .name
                .strip_suffix(".m")
                .or_else(|| m.name.strip_suffix(".v"));
            let owner = base.and_then(|b| params.get(b));
            match owner {
                Some(p) if p.shape == m.shape => {}
                _ => {
                    return Err(Error::format(
                        moments_at,
                        format!("moment {} has no matching parameter", m.name),
                    ))
                }
            }
        }
        Ok(Checkpoint {
            net,
            window,
            epoch,
            adam_step,
            tensors: all,
            moments,
            rng_state,
        })
    }
}

fn write_section<'a>(
    out: &mut Vec<u8>,
    tensors: impl Iterator<Item = &'a NamedTensor>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::State(format!("tensor name {} is too long", t.name)))?;
        let ndim = u8::try_from(t.shape.len())
            .map_err(|_| Error::State(format!("tensor {} has too many dims", t.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &t.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::State(format!("tensor {} dim {d} is too large", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_section(r: &mut Reader<'_>, seen: &mut HashSet<String>) -> Result<Vec<NamedTensor>> {
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(at, format!("duplicate tensor {name}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel = if name.starts_with("meta.") {
            shape.iter().product::<usize>()
        } else {
            dims_for_shape(&shape)
                .map_err(|e| Error::format(at, format!("tensor {name}: {e}")))?
                .numel()
        };
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::format(at, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.encode()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
