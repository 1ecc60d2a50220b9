//! Dense row-major tensors and the FXT1 on-disk format.
//!
//! FXT1 is an ASCII header line `FXT1 <ndim> <d0> <d1> ...` terminated by a
//! newline, followed by `product(shape)` little-endian IEEE-754 32-bit floats
//! in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Tensor(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} holds {expected} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from trusted parts; the caller guarantees the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Tensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Tensor(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element survives a round trip through `f32` unchanged.
    pub fn is_f32_exact(&self) -> bool {
        self.data.iter().all(|&v| (v as f32) as f64 == v)
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = (*v as f32) as f64;
        }
    }

    /// Interprets the tensor as NCHW and returns the four dimensions.
    pub fn dims4(&self) -> Option<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }

    /// Copies sample `index` of the leading (batch) axis out as a batch of one.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the leading axis. All items must agree on
    /// the trailing dimensions.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Tensor("cannot stack an empty list".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::Tensor(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Tensor("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Tensor(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn write_fxt1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = format!("FXT1 {}", self.shape.len());
        for d in &self.shape {
            header.push_str(&format!(" {d}"));
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    }

    /// Reads one FXT1 tensor. `origin` only labels error messages.
    pub fn read_fxt1<R: BufRead>(mut r: R, origin: &Path) -> Result<Tensor> {
        let bad = |reason: String| Error::Format {
            format: "FXT1",
            path: origin.to_path_buf(),
            reason,
        };
        let mut header = Vec::new();
        r.by_ref()
            .take(4096)
            .read_until(b'\n', &mut header)
            .map_err(|e| Error::io(origin, e))?;
        if header.last() != Some(&b'\n') {
            return Err(bad("missing header terminator".into()));
        }
        let header = std::str::from_utf8(&header[..header.len() - 1])
            .map_err(|_| bad("header is not ASCII".into()))?;
        let mut tokens = header.split(' ');
        if tokens.next() != Some("FXT1") {
            return Err(bad("bad magic".into()));
        }
        let ndim: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad rank".into()))?;
        let shape: Vec<usize> = tokens
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| bad(format!("bad dimension {t:?}")))
            })
            .collect::<Result<_>>()?;
        if shape.len() != ndim || ndim == 0 || shape.contains(&0) {
            return Err(bad(format!(
                "rank {ndim} does not match dimensions {shape:?}"
            )));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dimension product overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(origin, e))?;
        if bytes.len() != n * 4 {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                n * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save_fxt1(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_fxt1(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_fxt1(path: &Path) -> Result<Tensor> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_fxt1(BufReader::new(file), path)
    }
}
