//! Dense f64 tensors in row-major layout, plus the `DPBT` binary blob format.
//!
//! Everything numeric in this crate is carried by [`Tensor`]: latent states,
//! images, flat parameter vectors. All storage is 64-bit; the verification
//! suite asserts Gaussian-algebra residuals at the 1e-10 level, which f32
//! cannot represent.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

const DPBT_MAGIC: &[u8; 4] = b"DPBT";
const DPBT_VERSION: u32 = 1;

/// Dense multi-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_len(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = checked_len(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Wrap an existing buffer. Rejects length mismatches and non-finite
    /// entries.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = checked_len(shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite element in tensor buffer".into(),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// I.i.d. standard normal samples, advancing `rng`.
    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        rng.fill_normal(&mut t.data);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    /// Flat index of `(i, j, k)` in a rank-3 tensor.
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx3(i, j, k)]
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * k).collect(),
        }
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Tensor) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    /// Linear combination `sum_i coeff_i * term_i`. Accumulation order is the
    /// argument order, so results are bit-deterministic.
    pub fn lincomb(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("lincomb of zero terms".into()))?;
        let mut out = first.1.scale(first.0);
        for (c, t) in &terms[1..] {
            out.axpy(*c, t)?;
        }
        Ok(out)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        let n = self.data.len() as f64;
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(ss / n)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    // --- DPBT blob format -------------------------------------------------
    //
    // magic "DPBT" | u32 version=1 | u32 ndim | u64 dims[ndim] | f64 data,
    // all little-endian.

    pub fn write_blob<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DPBT_MAGIC)?;
        w.write_all(&DPBT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for d in &self.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor> {
        let fmt = |msg: &str| Error::Format(format!("DPBT: {msg}"));
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != DPBT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = read_u32(r)?;
        if version != DPBT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let ndim = read_u32(r)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(fmt(&format!("implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n = checked_len(&shape).map_err(|_| fmt("zero-sized dimension"))?;
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            read_exact(r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Tensor::from_vec(&shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, |w| self.write_blob(w))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_blob(&mut f)
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::EmptyShape);
    }
    let mut n = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::EmptyShape);
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidArgument("shape overflow".into()))?;
    }
    Ok(n)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("DPBT: truncated ({e})")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
