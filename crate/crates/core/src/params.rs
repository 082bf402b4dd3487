//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "SFAL"  magic
//! u32     format version
//! repeated until EOF:
//!   u32 name length, name bytes (UTF-8)
//!   u32 ndims, u32 × ndims dims
//!   f64 × prod(dims) payload
//! ```
//!
//! Records are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SFAL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a parameter is, decided by its name suffix. Only convolution weights
/// take weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        if name.ends_with(".bias") {
            ParamKind::Bias
        } else if name.ends_with(".gamma") {
            ParamKind::NormScale
        } else if name.ends_with(".beta") {
            ParamKind::NormShift
        } else {
            ParamKind::ConvWeight
        }
    }

    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }
}

/// Parameters keyed by dotted path, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Conv weight with fan-in scaled uniform init in `±sqrt(6 / fan_in)`,
    /// plus an optional zero bias.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let w = Tensor::uniform(Shape::new(c_out, c_in, k, k), -bound, bound, rng);
        self.insert(format!("{prefix}.weight"), w)?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))?;
        }
        Ok(())
    }

    pub fn init_conv_zero(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> Result<()> {
        self.insert(format!("{prefix}.weight"), Tensor::zeros(Shape::new(c_out, c_in, k, k)))?;
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)))?;
        }
        Ok(())
    }

    pub fn init_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let s = Shape::new(1, channels, 1, 1);
        self.insert(format!("{prefix}.gamma"), Tensor::full(s, 1.0))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(s))?;
        Ok(())
    }

    /// Register every parameter as a gradient-carrying leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.leaf(t.clone(), true)?);
        }
        Ok(Bound { vars })
    }

    /// Register every parameter as a constant, for inference without gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.constant(t.clone())?);
        }
        Ok(Bound { vars })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.num_scalars() * 8 + self.params.len() * 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.shape().dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let mut store = ParamStore::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "parameter name is not UTF-8".to_string())?
                .to_string();
            let ndims = r.u32()? as usize;
            if ndims == 0 || ndims > 4 {
                return Err(format!("{name}: unsupported rank {ndims}"));
            }
            let mut dims = [1usize; 4];
            for d in &mut dims[4 - ndims..] {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let payload = r.take(shape.numel() * 8).map_err(|e| format!("{name}: {e}"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            store.insert(name, t).map_err(|e| e.to_string())?;
        }
        Ok(store)
    }

    /// Every name and shape in `self` must also appear in `other` with the same shape.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.params {
            match other.get(name) {
                None => return Err(invalid!("parameter {name} missing")),
                Some(o) if o.shape() != t.shape() => {
                    return Err(shape_err!("parameter {name}: {} vs {}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parameters bound to a tape for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind arbitrary vars under parameter names, e.g. leaves built elsewhere.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after `tape.backward`; parameters not reached get zeros.
    pub fn grads(&self, tape: &Tape) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = tape
                .grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.params.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        p.init_conv("b.conv", 3, 4, 3, true, &mut rng).unwrap();
        p.init_norm("a.norm", 4).unwrap();
        p
    }

    #[test]
    fn checkpoint_round_trip_and_order() {
        let p = sample_store();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"SFAL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        // First record is the lexicographically smallest name.
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + len], b"a.norm.beta");
        assert_eq!(ParamStore::from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let bytes = sample_store().to_bytes();
        for cut in [3, 9, bytes.len() - 1] {
            assert!(ParamStore::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_bytes(&bad).is_err());
    }

    #[test]
    fn init_bounds_and_kinds() {
        let p = sample_store();
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(p.get("b.conv.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(p.get("b.conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("a.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(ParamKind::of("b.conv.weight"), ParamKind::ConvWeight);
        assert!(!ParamKind::of("b.conv.bias").decays());
        assert!(!ParamKind::of("a.norm.gamma").decays());
        assert!(!ParamKind::of("a.norm.beta").decays());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample_store();
        assert!(p.init_norm("a.norm", 4).is_err());
    }
}
