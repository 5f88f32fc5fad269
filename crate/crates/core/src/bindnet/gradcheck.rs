//! Central-difference checks of `batch_loss` gradients.
//!
//! Derivatives use the fourth-order central stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, so truncation error stays
//! well below roundoff at `h = 1e-3` even at small temperatures.

use ndarray::{Array, ArrayBase, DataMut, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, ProjectorParams, TemperatureSet, TrainBatch};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub comparisons: usize,
}

impl GradCheck {
    fn record(&mut self, fd: f64, analytic: f64) {
        let denom = fd.abs().max(analytic.abs());
        let err = if denom < 1e-8 {
            (fd - analytic).abs()
        } else {
            (fd - analytic).abs() / denom
        };
        self.max_rel_err = self.max_rel_err.max(err);
        self.comparisons += 1;
    }
}

fn tensor_mut<'a>(p: &'a mut ProjectorParams, which: usize) -> &'a mut [f64] {
    match which {
        0 => p.w1.as_slice_mut(),
        1 => p.b1.as_slice_mut(),
        2 => p.w2.as_slice_mut(),
        _ => p.b2.as_slice_mut(),
    }
    .expect("contiguous")
}

fn tensor(p: &ProjectorParams, which: usize) -> &[f64] {
    match which {
        0 => p.w1.as_slice(),
        1 => p.b1.as_slice(),
        2 => p.w2.as_slice(),
        _ => p.b2.as_slice(),
    }
    .expect("contiguous")
}

fn stencil(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

fn loss(p: &ProjectorParams, t: &TemperatureSet, b: &TrainBatch) -> Result<f64> {
    Ok(batch_loss(p, t, b)?.0)
}

/// Perturbs every parameter coordinate and every involved `ln tau` by `±h`.
pub fn coordinate_check(params: &ProjectorParams, temps: &TemperatureSet, batch: &TrainBatch, h: f64) -> Result<GradCheck> {
    let (_, grads) = batch_loss(params, temps, batch)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        comparisons: 0,
    };
    for which in 0..4 {
        for idx in 0..tensor(params, which).len() {
            let fd = stencil(h, |t| {
                let mut q = params.clone();
                tensor_mut(&mut q, which)[idx] += t;
                loss(&q, temps, batch)
            })?;
            out.record(fd, tensor(&grads.projector, which)[idx]);
        }
    }
    check_taus(params, temps, batch, h, &grads.log_tau, &mut out)?;
    Ok(out)
}

fn check_taus(
    params: &ProjectorParams,
    temps: &TemperatureSet,
    batch: &TrainBatch,
    h: f64,
    analytic: &std::collections::BTreeMap<super::PairKey, f64>,
    out: &mut GradCheck,
) -> Result<()> {
    for (&(p, f), &an) in analytic {
        let lt = temps.log_tau(p, f)?;
        let fd = stencil(h, |t| {
            let mut q = temps.clone();
            q.set_log_tau(p, f, lt + t)?;
            loss(params, &q, batch)
        })?;
        out.record(fd, an);
    }
    Ok(())
}

fn unit_direction<S, D>(a: &mut ArrayBase<S, D>, rng: &mut ChaCha8Rng)
where
    S: DataMut<Elem = f64>,
    D: Dimension,
{
    a.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let n = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.mapv_inplace(|v| v / n);
}

/// Directional derivatives along `directions` random unit vectors inside each
/// of W1, b1, W2, b2, plus every involved `ln tau`, all at step `h`.
pub fn directional_check(
    params: &ProjectorParams,
    temps: &TemperatureSet,
    batch: &TrainBatch,
    h: f64,
    directions: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (_, grads) = batch_loss(params, temps, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        max_rel_err: 0.0,
        comparisons: 0,
    };
    for which in 0..4 {
        for _ in 0..directions {
            let mut dir = Array::zeros(tensor(params, which).len());
            unit_direction(&mut dir, &mut rng);
            let fd = stencil(h, |t| {
                let mut q = params.clone();
                for (u, v) in tensor_mut(&mut q, which).iter_mut().zip(dir.iter()) {
                    *u += t * v;
                }
                loss(&q, temps, batch)
            })?;
            let an: f64 = tensor(&grads.projector, which).iter().zip(dir.iter()).map(|(g, v)| g * v).sum();
            out.record(fd, an);
        }
    }
    check_taus(params, temps, batch, h, &grads.log_tau, &mut out)?;
    Ok(out)
}
