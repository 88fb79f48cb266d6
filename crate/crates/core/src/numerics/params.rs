use std::fs;
use std::path::Path;

use super::tape::{Gradients, Tape, Tensor};
use super::Float;
use crate::error::{Error, Result};

/// Named, ordered learnable parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<Float>>,
}

/// Tape handles of the parameters bound for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, index: usize) -> Tensor {
        self.tensors[index]
    }
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<Float>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "parameter {name}: shape mismatch");
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn values(&self, index: usize) -> &[Float] {
        &self.values[index]
    }

    pub fn values_mut(&mut self, index: usize) -> &mut [Float] {
        &mut self.values[index]
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Puts every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let tensors =
            self.shapes.iter().zip(&self.values).map(|(s, v)| tape.parameter(s, v.clone())).collect();
        Bound { tensors }
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let tensors =
            self.shapes.iter().zip(&self.values).map(|(s, v)| tape.constant(s, v.clone())).collect();
        Bound { tensors }
    }

    /// Gradients per parameter; unreached parameters get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Vec<Float>> {
        bound
            .tensors
            .iter()
            .zip(&self.values)
            .map(|(&t, v)| grads.get(t).map(<[Float]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
            .collect()
    }

    const MAGIC: &'static [u8; 8] = b"RPCLCKPT";
    pub const FORMAT_VERSION: u32 = 1;

    /// Serializes as: magic, format version, float width in bytes, count,
    /// then per parameter its name, shape and raw little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(std::mem::size_of::<Float>() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            let name = self.names[i].as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(self.shapes[i].len() as u32).to_le_bytes());
            for &d in &self.shapes[i] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.values[i] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != Self::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let width = r.u32()? as usize;
        if width != std::mem::size_of::<Float>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {width}-byte floats, this build uses {}",
                std::mem::size_of::<Float>()
            )));
        }
        let count = r.u32()?;
        let mut params = Parameters::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r
                .take(n * width)?
                .chunks_exact(width)
                .map(|c| Float::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.index_of(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            params.add(&name, &shape, values);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::parse(path, e))
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &Parameters) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// SGD with heavy-ball momentum: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: Float,
    pub momentum: Float,
    velocity: Vec<Vec<Float>>,
}

impl Sgd {
    pub fn new(params: &Parameters, lr: Float, momentum: Float) -> Self {
        let velocity = (0..params.len()).map(|i| vec![0.0; params.values(i).len()]).collect();
        Self { lr, momentum, velocity }
    }

    /// Applies one update and zeroes `grads`.
    pub fn step(&mut self, params: &mut Parameters, grads: &mut [Vec<Float>]) {
        assert_eq!(grads.len(), params.len());
        for (i, g) in grads.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            let p = params.values_mut(i);
            for j in 0..p.len() {
                v[j] = self.momentum * v[j] + g[j];
                p[j] -= self.lr * v[j];
                g[j] = 0.0;
            }
        }
    }
}
