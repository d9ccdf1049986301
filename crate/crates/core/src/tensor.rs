//! Dense row-major tensors and a seeded, cross-platform reproducible RNG.
//!
//! Every value flowing through the crate (inputs, weights, activations,
//! relevance) is a [`Tensor`]: a flat `Vec<f64>` in row-major order plus an
//! explicit shape. There is no broadcasting and no views; operations validate
//! shapes and return errors on mismatch.

use crate::error::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dense multi-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from an explicit shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if data.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument(
                "from_rows requires non-empty rows of equal length".into(),
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat element access.
    pub fn at(&self, flat: usize) -> f64 {
        self.data[flat]
    }

    /// Multi-index element access; `idx.len()` must equal the rank.
    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    /// Row-major strides of the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Same data under a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                expected: shape.to_vec(),
                found: self.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
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

    /// Sum of all elements, accumulated in flat order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Dot product over flattened data; element counts must agree.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch {
                context: "dot",
                expected: self.shape.clone(),
                found: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose requires a rank-2 tensor, got rank {}",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Standard matrix product of `a` (m x k) and `b` (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "matmul requires rank-2 tensors, got ranks {} and {}",
            a.rank(),
            b.rank()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            expected: vec![k, n],
            found: vec![k2, n],
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Accumulates the outer product `u (x) v` onto `acc` (shape d x d').
pub fn outer_accumulate(u: &Tensor, v: &Tensor, acc: &mut Tensor) -> Result<()> {
    if u.rank() != 1 || v.rank() != 1 {
        return Err(Error::InvalidArgument(
            "outer_accumulate requires rank-1 factors".into(),
        ));
    }
    let (d, dp) = (u.len(), v.len());
    if acc.shape() != [d, dp] {
        return Err(Error::ShapeMismatch {
            context: "outer_accumulate",
            expected: vec![d, dp],
            found: acc.shape().to_vec(),
        });
    }
    for i in 0..d {
        let ui = u.data[i];
        if ui == 0.0 {
            continue;
        }
        let row = &mut acc.data[i * dp..(i + 1) * dp];
        for (j, vj) in v.data.iter().enumerate() {
            row[j] += ui * vj;
        }
    }
    Ok(())
}

/// Seeded pseudo-random generator.
///
/// Backed by the ChaCha8 counter-based generator, keyed from a 64-bit seed
/// via `SeedableRng::seed_from_u64`. The generator identity is part of the
/// benchmark's reproducibility contract: equal seeds produce bitwise-equal
/// streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One draw from the standard normal distribution.
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.standard_normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random_range(0.0..1.0)
    }

    /// Derives an independent child generator.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.inner.random::<u64>())
    }
}

/// Gaussian tensor with entries scaled by `1/sqrt(last extent)`.
///
/// The scaling matches the initialization of a random projection layer whose
/// output dimension is the trailing extent, so that projected feature norms
/// stay comparable to the unprojected ones.
pub fn rng_gaussian(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let h_out = *shape.last().expect("rng_gaussian requires a non-empty shape") as f64;
    let scale = 1.0 / h_out.sqrt();
    let mut t = rng.normal_tensor(shape);
    for v in t.data_mut() {
        *v *= scale;
    }
    t
}
