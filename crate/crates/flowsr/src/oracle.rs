//! Independent numerical oracles used by the test suites: finite-difference
//! Jacobians with LU log-determinants, and grid quadrature of the modeled
//! density. These check the flow's reported quantities through a route that
//! shares no code with the log-det accounting itself.

use ndarray::{Array2, ArrayD};

use crate::flow::{ConditionalFlow, ConditioningContext};

/// Central-difference Jacobian of `z = f(y)` for a single sample, flattened
/// row-major. `h` is the probe step.
pub fn fd_jacobian(
    flow: &ConditionalFlow,
    y: &ArrayD<f32>,
    ctx: &ConditioningContext,
    h: f32,
) -> Array2<f64> {
    assert_eq!(y.shape()[0], 1, "fd_jacobian expects a single sample");
    let d = y.len();
    let mut jac = Array2::<f64>::zeros((d, d));
    let flat_idx: Vec<_> = y.indexed_iter().map(|(idx, _)| idx).collect();
    for (col, idx) in flat_idx.iter().enumerate() {
        let mut yp = y.clone();
        yp[idx] += h;
        let mut ym = y.clone();
        ym[idx] -= h;
        let (zp, _) = flow.flow_forward(&yp, ctx).expect("fd probe forward");
        let (zm, _) = flow.flow_forward(&ym, ctx).expect("fd probe forward");
        for (row, (&a, &b)) in zp.iter().zip(zm.iter()).enumerate() {
            jac[[row, col]] = (a as f64 - b as f64) / (2.0 * h as f64);
        }
    }
    jac
}

/// log |det M| via partial-pivot LU in f64.
pub fn lu_logabsdet(mut m: Array2<f64>) -> f64 {
    let n = m.dim().0;
    assert_eq!(m.dim().1, n, "lu_logabsdet expects a square matrix");
    let mut acc = 0.0f64;
    for k in 0..n {
        // pivot
        let mut p = k;
        let mut best = m[[k, k]].abs();
        for r in k + 1..n {
            let v = m[[r, k]].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == 0.0 {
            return f64::NEG_INFINITY;
        }
        if p != k {
            for c in 0..n {
                let t = m[[k, c]];
                m[[k, c]] = m[[p, c]];
                m[[p, c]] = t;
            }
        }
        acc += m[[k, k]].abs().ln();
        for r in k + 1..n {
            let f = m[[r, k]] / m[[k, k]];
            for c in k + 1..n {
                m[[r, c]] -= f * m[[k, c]];
            }
        }
    }
    acc
}

/// Relative disagreement between the flow's reported log-det and the
/// finite-difference Jacobian log-det on one sample.
pub fn logdet_relative_error(
    flow: &ConditionalFlow,
    y: &ArrayD<f32>,
    ctx: &ConditioningContext,
) -> f64 {
    let (_, ld) = flow.flow_forward(y, ctx).expect("forward");
    let jac = fd_jacobian(flow, y, ctx, 3e-4);
    let fd = lu_logabsdet(jac);
    let denom = fd.abs().max(1.0);
    (ld[0] - fd).abs() / denom
}

/// Trapezoid quadrature of `exp(log_prob)` for an unconditional 2-D flow over
/// the box `[-half0, half0] x [-half1, half1]` with `n` points per axis. A
/// correctly normalized density integrates to ~1.
pub fn quadrature_mass_2d(flow: &ConditionalFlow, half: (f64, f64), n: usize) -> f64 {
    assert_eq!(flow.dim(), 2, "quadrature oracle is for 2-D flows");
    let step0 = 2.0 * half.0 / (n - 1) as f64;
    let step1 = 2.0 * half.1 / (n - 1) as f64;
    let ctx = ConditioningContext::none();
    let mut mass = 0.0f64;
    // evaluate row by row to bound memory
    for iy in 0..n {
        let yv = -half.0 + iy as f64 * step0;
        let mut batch = ArrayD::<f32>::zeros(ndarray::IxDyn(&[n, 2]));
        for ix in 0..n {
            let xv = -half.1 + ix as f64 * step1;
            batch[[ix, 0]] = yv as f32;
            batch[[ix, 1]] = xv as f32;
        }
        let lp = flow.log_prob(&batch, &ctx).expect("log_prob");
        let wy = if iy == 0 || iy == n - 1 { 0.5 } else { 1.0 };
        for (ix, l) in lp.iter().enumerate() {
            let wx = if ix == 0 || ix == n - 1 { 0.5 } else { 1.0 };
            mass += wy * wx * l.exp();
        }
    }
    mass * step0 * step1
}

/// Quadrature with per-axis bounds sized from prior samples pushed through
/// the inverse: the box covers 1.6x the largest sampled coordinate.
pub fn quadrature_mass_2d_auto(flow: &ConditionalFlow, seed: u64, n: usize) -> f64 {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m = 512;
    let mut z = ArrayD::<f32>::zeros(ndarray::IxDyn(&[m, 2]));
    for v in z.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let (y, report) = flow.flow_inverse_diag(&z, &ConditioningContext::none());
    assert!(report.is_none(), "prior samples must invert cleanly");
    let mut half = (0.0f64, 0.0f64);
    for row in y.rows() {
        half.0 = half.0.max((row[0] as f64).abs());
        half.1 = half.1.max((row[1] as f64).abs());
    }
    half.0 = (half.0 * 1.6).max(6.0);
    half.1 = (half.1 * 1.6).max(6.0);
    quadrature_mass_2d(flow, half, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_logabsdet_known_matrix() {
        // det [[2,0],[0,3]] = 6
        let m = Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert!((lu_logabsdet(m) - 6.0f64.ln()).abs() < 1e-12);
        // det [[0,1],[1,0]] = -1 -> log|det| = 0
        let m = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(lu_logabsdet(m).abs() < 1e-12);
    }
}
