//! Small reverse-mode tensor library with just the layers the fusion models
//! need, the two losses, reparameterized sampling and Adam.
//!
//! Values are recorded on a [`Graph`] as operations execute; [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every parameter of the
//! [`ParamSet`] the graph was built against. Everything is generic over
//! [`Real`] so the gradient checks can run in `f64` while training uses `f32`.

mod conv;
mod format;
mod graph;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

pub use conv::{conv_out, deconv_out, KERNEL, STRIDE};
pub use format::{load_params, save_params, ModelFile, SSM_MAGIC, SSM_VERSION};
pub use graph::{Grads, Graph, NodeId};
pub use optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape is stale: parameters changed after it was recorded")]
    StaleTape,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("model checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Floating point element type.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the strides must lie inside the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense matrix view: row-major data with optional transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Real> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b + beta * out`, `out` row-major.
pub(crate) fn matmul<T: Real>(a: Mat<T>, b: Mat<T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the shapes were checked against the slice lengths above and the
    // strides describe dense row-major or transposed storage of those shapes.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0].max(1);
        &self.data[i * w..(i + 1) * w]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensors. Every mutation bumps the version so tapes recorded
/// earlier are rejected by [`Graph::backward`].
#[derive(Debug)]
pub struct ParamSet<T> {
    id: u64,
    version: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Real> PartialEq for ParamSet<T> {
    /// Equal names and bit-equal values; identity and version are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Adds a tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(NnError::Shape(format!("duplicate parameter `{name}`")));
        }
        self.version += 1;
        self.names.push(name.to_owned());
        self.values.push(Arc::new(value));
        Ok(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub(crate) fn shared(&self, i: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[i])
    }

    /// Mutable access; invalidates recorded tapes.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        self.version += 1;
        Arc::make_mut(&mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.version)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }
}

/// Layer descriptor used to size parameters and check shape arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    FullyConnected { inputs: usize, outputs: usize },
    /// Kernel 4, stride 2, no padding.
    Conv2d { in_channels: usize, out_channels: usize },
    /// Kernel 4, stride 2; inverts the spatial shape of [`LayerSpec::Conv2d`].
    TransposedConv2d { in_channels: usize, out_channels: usize },
    Relu,
    Concat,
    Split,
}

impl LayerSpec {
    /// Shapes of the weight and bias tensors, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => {
                Some((vec![inputs, outputs], vec![outputs]))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels * KERNEL * KERNEL], vec![out_channels])),
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
            } => Some((vec![in_channels, out_channels * KERNEL * KERNEL], vec![out_channels])),
            _ => None,
        }
    }

    /// Fan-in and fan-out used by Glorot initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        let k2 = KERNEL * KERNEL;
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((in_channels * k2, out_channels * k2)),
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
            } => Some((in_channels * k2, out_channels * k2)),
            _ => None,
        }
    }

    /// Spatial output side for an input of side `side` (convolutions only).
    pub fn spatial_out(&self, side: usize) -> Option<usize> {
        match self {
            LayerSpec::Conv2d { .. } => conv_out(side),
            LayerSpec::TransposedConv2d { .. } => Some(deconv_out(side)),
            _ => None,
        }
    }

    /// Inserts `<prefix>.w` (Glorot uniform) and `<prefix>.b` (zeros).
    pub fn init_params<T: Real, R: Rng>(
        &self,
        prefix: &str,
        params: &mut ParamSet<T>,
        rng: &mut R,
    ) -> Result<()> {
        let (Some((ws, bs)), Some((fan_in, fan_out))) = (self.param_shapes(), self.fans()) else {
            return Ok(());
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = ws.iter().product();
        let w: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        params.insert(&format!("{prefix}.w"), Tensor::new(ws, w)?)?;
        params.insert(&format!("{prefix}.b"), Tensor::zeros(bs))?;
        Ok(())
    }
}

/// `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)` for a single distribution.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(NnError::Shape(format!(
            "mu has {} entries, logvar {}",
            mu.len(),
            logvar.len()
        )));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(NnError::Shape(format!(
            "lengths {}, {}, {} differ",
            mu.len(),
            logvar.len(),
            eps.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Mean squared elementwise difference.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NnError::Shape(format!(
            "mse of {} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

#[cfg(test)]
mod tests;
