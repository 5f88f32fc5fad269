use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ZERO_NORM;

const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectorDims {
    fn default() -> Self {
        Self {
            input: 1024,
            hidden: 2048,
            output: 1024,
        }
    }
}

impl ProjectorDims {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input * self.hidden + self.hidden + self.hidden * self.output + self.output
    }
}

/// Two-layer MLP: `normalize(gelu(x W1 + b1) W2 + b2)`.
///
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// input × hidden
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden × output
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProjectorParams {
    pub fn zeros(dims: ProjectorDims) -> Self {
        Self {
            w1: Array2::zeros((dims.input, dims.hidden)),
            b1: Array1::zeros(dims.hidden),
            w2: Array2::zeros((dims.hidden, dims.output)),
            b2: Array1::zeros(dims.output),
        }
    }

    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn init<R: Rng>(dims: ProjectorDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let s1 = 1.0 / (dims.input as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-s1..s1));
        let s2 = 1.0 / (dims.hidden as f64).sqrt();
        p.w2.mapv_inplace(|_| rng.random_range(-s2..s2));
        p
    }

    pub fn dims(&self) -> ProjectorDims {
        ProjectorDims {
            input: self.w1.nrows(),
            hidden: self.w1.ncols(),
            output: self.w2.ncols(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dims().param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

pub(crate) struct ForwardCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub norms: Array1<f64>,
    pub out: Array2<f64>,
}

pub(crate) fn forward_cached(params: &ProjectorParams, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    let dims = params.dims();
    if x.ncols() != dims.input {
        return Err(Error::DimMismatch {
            expected: dims.input,
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projector input".into()));
    }
    let pre = x.dot(&params.w1) + &params.b1;
    let hidden = pre.mapv(gelu);
    let mut out = hidden.dot(&params.w2) + &params.b2;
    let norms = out.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for (i, &n) in norms.iter().enumerate() {
        if n <= ZERO_NORM || !n.is_finite() {
            return Err(Error::ZeroVector(i));
        }
    }
    Zip::from(out.rows_mut()).and(&norms).for_each(|mut row, &n| row /= n);
    Ok(ForwardCache {
        x: x.to_owned(),
        pre,
        hidden,
        norms,
        out,
    })
}

/// Projects rows of `x` (B × input) to unit rows (B × output).
pub fn projector_forward(params: &ProjectorParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    forward_cached(params, x).map(|c| c.out)
}

/// Back-propagates `d_out` (gradient w.r.t. the normalized output) to the parameters.
pub(crate) fn backward(params: &ProjectorParams, cache: &ForwardCache, d_out: &Array2<f64>) -> ProjectorParams {
    // y = u/|u|  =>  du = (g - y (y·g)) / |u|
    let mut d_raw = d_out.clone();
    Zip::from(d_raw.rows_mut())
        .and(cache.out.rows())
        .and(&cache.norms)
        .for_each(|mut g, y, &n| {
            let proj = g.dot(&y);
            g.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * proj) / n);
        });
    let w2 = cache.hidden.t().dot(&d_raw);
    let b2 = d_raw.sum_axis(Axis(0));
    let mut d_pre = d_raw.dot(&params.w2.t());
    d_pre.zip_mut_with(&cache.pre, |d, &z| *d *= gelu_grad(z));
    let w1 = cache.x.t().dot(&d_pre);
    let b1 = d_pre.sum_axis(Axis(0));
    ProjectorParams { w1, b1, w2, b2 }
}
