//! Local maximization of smooth log densities.

use nalgebra::{DMatrix, DVector};

/// A log density and its gradient.
pub(crate) type Objective<'a> = &'a (dyn Fn(&[f64]) -> (f64, Vec<f64>) + Sync);

pub const MAP_GRAD_TOL: f64 = 1e-6;

/// BFGS from `x0`, then Newton polishing.
pub(crate) fn maximize(f: Objective, x0: Vec<f64>) -> Vec<f64> {
    newton_polish(f, bfgs(f, x0))
}

/// Hessian of `-f` by central differences of the gradient, symmetrized.
pub(crate) fn fd_neg_hessian(f: Objective, x0: &[f64]) -> DMatrix<f64> {
    let d = x0.len();
    let mut h = DMatrix::zeros(d, d);
    let mut x = x0.to_vec();
    for i in 0..d {
        let step = 1e-5 * (1.0 + x0[i].abs());
        x[i] = x0[i] + step;
        let (_, gp) = f(&x);
        x[i] = x0[i] - step;
        let (_, gm) = f(&x);
        x[i] = x0[i];
        for j in 0..d {
            h[(i, j)] = -(gp[j] - gm[j]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// BFGS on `-f` with Armijo backtracking. Updates that would break positive
/// definiteness are skipped, and a non-descent direction resets the inverse
/// Hessian.
fn bfgs(f: Objective, x0: Vec<f64>) -> Vec<f64> {
    let d = x0.len();
    let eval = |x: &[f64]| {
        let (lp, g) = f(x);
        (-lp, DVector::from_iterator(d, g.into_iter().map(|v| -v)))
    };
    let mut x = DVector::from_vec(x0);
    let (mut f, mut g) = eval(x.as_slice());
    if !f.is_finite() {
        return x.as_slice().to_vec();
    }
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut stalled = 0;
    for _ in 0..2000 {
        if g.norm() < MAP_GRAD_TOL * 1e-2 {
            break;
        }
        let mut p = -(&hinv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(d, d);
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut t = 1.0;
        let accepted = loop {
            let cand = &x + &p * t;
            let (fc, gc) = eval(cand.as_slice());
            if fc.is_finite() && fc <= f + 1e-4 * t * slope {
                break Some((cand, fc, gc));
            }
            t *= 0.5;
            if t < 1e-14 {
                break None;
            }
        };
        let Some((xn, fnew, gn)) = accepted else { break };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - (&s * y.transpose()) * rho;
            hinv = &a * &hinv * a.transpose() + (&s * s.transpose()) * rho;
        }
        stalled = if f - fnew <= 1e-15 * f.abs().max(1.0) { stalled + 1 } else { 0 };
        x = xn;
        f = fnew;
        g = gn;
        if stalled >= 5 {
            break;
        }
    }
    x.as_slice().to_vec()
}

/// Newton steps on the finite-difference Hessian, damped towards gradient
/// ascent when the Hessian is not positive definite.
fn newton_polish(f: Objective, mut x: Vec<f64>) -> Vec<f64> {
    let d = x.len();
    let (mut lp, mut g) = f(&x);
    for _ in 0..100 {
        let gn = norm(&g);
        if !lp.is_finite() || gn < MAP_GRAD_TOL * 1e-3 {
            break;
        }
        let h = fd_neg_hessian(f, &x);
        let gv = DVector::from_vec(g.clone());
        let mut damping = 0.0;
        let mut improved = false;
        for _ in 0..30 {
            let Some(chol) = (&h + DMatrix::identity(d, d) * damping).cholesky() else {
                damping = if damping == 0.0 { 1e-6 * (1.0 + h.diagonal().amax()) } else { damping * 10.0 };
                continue;
            };
            let step = chol.solve(&gv);
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let (lc, gc) = f(&cand);
            if lc.is_finite() && (lc > lp || (lc >= lp - 1e-12 * lp.abs().max(1.0) && norm(&gc) < gn)) {
                x = cand;
                lp = lc;
                g = gc;
                improved = true;
                break;
            }
            damping = if damping == 0.0 { 1e-6 * (1.0 + h.diagonal().amax()) } else { damping * 10.0 };
        }
        if !improved {
            break;
        }
    }
    x
}

