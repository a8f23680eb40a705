//! Marginal likelihood by importance sampling around the posterior mode.
//!
//! The proposal is a multivariate Student-t centered at the MAP with scale
//! equal to the inverse Hessian of the negative log posterior. Unnormalized
//! weights average to the evidence; normalized weights turn the proposal draws
//! into weighted posterior draws.
//!
//! Pooled models are sampled in centered coordinates, where each node constant
//! is a free parameter instead of a standardized deviate. The posterior there is
//! close to Gaussian, while the non-centered form bends around small scales.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::choice::{map_estimate, ChoiceProblem, MapEstimate};
use crate::error::{Error, Result};
use crate::optim::{fd_neg_hessian, maximize, MAP_GRAD_TOL};
use crate::stats::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceSettings {
    pub n_draws: usize,
    pub df: f64,
    pub min_ess: f64,
    pub starts: usize,
}

impl Default for EvidenceSettings {
    fn default() -> Self {
        EvidenceSettings { n_draws: 2000, df: 5.0, min_ess: 50.0, starts: 3 }
    }
}

impl EvidenceSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 2 {
            return Err(Error::Invalid("evidence needs at least 2 draws".into()));
        }
        if !(self.df > 0.0 && self.df.is_finite()) {
            return Err(Error::Invalid("proposal degrees of freedom must be positive".into()));
        }
        if self.starts == 0 {
            return Err(Error::Invalid("at least one optimizer start is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_evidence: f64,
    pub mc_standard_error: f64,
    pub ess: f64,
    pub names: Vec<String>,
    /// One parameter vector per draw.
    pub draws: Vec<Vec<f64>>,
    /// Normalized importance weights.
    pub weights: Vec<f64>,
    pub map: MapEstimate,
    /// The Hessian needed a ridge to become positive definite.
    pub regularized: bool,
    /// The proposal was widened after a first pass fell below the ESS floor.
    pub inflated: bool,
    pub df: f64,
}

pub fn estimate_evidence(problem: &ChoiceProblem, settings: &EvidenceSettings, seed: u64) -> Result<EvidenceEstimate> {
    settings.validate()?;
    let map = map_estimate(problem, settings.starts, seed)?;
    let coords = Centering::of(problem);
    let target = |phi: &[f64]| coords.value_grad(problem, phi);
    let start = coords.to_centered(&map.theta);
    let center = if coords.pooled.is_some() {
        let phi = maximize(&target, start.clone());
        let (lp, g) = target(&phi);
        if lp.is_finite() && crate::optim::norm(&g) < MAP_GRAD_TOL.max(1e-4) {
            phi
        } else {
            log::warn!("centered mode search did not settle; centering the proposal at the mapped MAP");
            start
        }
    } else {
        start
    };
    let (chol, regularized) = proposal_scale(&fd_neg_hessian(&target, &center))?;
    if regularized {
        log::warn!("Hessian at the mode was not positive definite; added 1e-6 I");
    }
    let log_target = |phi: &[f64]| coords.log_density(problem, phi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let first = importance_pass(&log_target, &center, &chol, 1.0, settings.df, settings.n_draws, &mut rng)?;
    let (pass, inflated, df) = if first.ess >= settings.min_ess {
        (first, false, settings.df)
    } else {
        log::warn!(
            "effective sample size {:.1} below floor {}; retrying with a wider, heavier-tailed proposal",
            first.ess,
            settings.min_ess
        );
        let df = settings.df.min(3.0);
        let second = importance_pass(&log_target, &center, &chol, 1.5, df, settings.n_draws, &mut rng)?;
        if second.ess < settings.min_ess {
            return Err(Error::Estimation(format!(
                "effective sample size {:.1} stays below the floor {} after widening the proposal",
                second.ess, settings.min_ess
            )));
        }
        (second, true, df)
    };
    Ok(EvidenceEstimate {
        log_evidence: pass.log_evidence,
        mc_standard_error: pass.se,
        ess: pass.ess,
        names: problem.names.clone(),
        draws: pass.draws.iter().map(|phi| coords.to_native(phi)).collect(),
        weights: pass.weights,
        map,
        regularized,
        inflated,
        df,
    })
}

/// Map between native parameters `(.., asc, log_sigma, eta)` and centered
/// ones `(.., asc, log_sigma, a)` with `a_i = asc + exp(log_sigma) eta_i`.
struct Centering {
    /// `(asc index, log_sigma index, first eta index, node count)`
    pooled: Option<(usize, usize, usize, usize)>,
}

impl Centering {
    fn of(problem: &ChoiceProblem) -> Self {
        let l = &problem.layout;
        let pooled = match (l.asc_index(), l.log_sigma_index(), l.n_eta) {
            (Some(a), Some(s), Some(k)) if k > 0 => Some((a, s, l.eta_start(), k)),
            _ => None,
        };
        Centering { pooled }
    }

    fn to_centered(&self, theta: &[f64]) -> Vec<f64> {
        let mut phi = theta.to_vec();
        if let Some((a, s, e, k)) = self.pooled {
            let sigma = theta[s].exp();
            for i in e..e + k {
                phi[i] = theta[a] + sigma * theta[i];
            }
        }
        phi
    }

    fn to_native(&self, phi: &[f64]) -> Vec<f64> {
        let mut theta = phi.to_vec();
        if let Some((a, s, e, k)) = self.pooled {
            let sigma = phi[s].exp();
            for i in e..e + k {
                theta[i] = (phi[i] - phi[a]) / sigma;
            }
        }
        theta
    }

    fn log_jacobian(&self, phi: &[f64]) -> f64 {
        self.pooled.map_or(0.0, |(_, s, _, k)| -(k as f64) * phi[s])
    }

    fn log_density(&self, problem: &ChoiceProblem, phi: &[f64]) -> f64 {
        problem.log_posterior(&self.to_native(phi)) + self.log_jacobian(phi)
    }

    fn value_grad(&self, problem: &ChoiceProblem, phi: &[f64]) -> (f64, Vec<f64>) {
        let theta = self.to_native(phi);
        let (lp, g) = problem.value_grad(&theta);
        let Some((a, s, e, k)) = self.pooled else { return (lp, g) };
        let sigma = phi[s].exp();
        let mut out = g.clone();
        let mut sum_a = 0.0;
        let mut sum_s = 0.0;
        for i in e..e + k {
            out[i] = g[i] / sigma;
            sum_a += out[i];
            sum_s += g[i] * theta[i];
        }
        out[a] = g[a] - sum_a;
        out[s] = g[s] - sum_s - k as f64;
        (lp + self.log_jacobian(phi), out)
    }
}

/// Cholesky factor of the inverse of `h`.
fn proposal_scale(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let d = h.nrows();
    let (chol, regularized) = match h.clone().cholesky() {
        Some(c) => (c, false),
        None => match (h + DMatrix::identity(d, d) * 1e-6).cholesky() {
            Some(c) => (c, true),
            None => return Err(Error::Estimation("Hessian at the mode is not positive definite".into())),
        },
    };
    // inverse of H = L L^T has factor L^{-T}
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Estimation("singular Cholesky factor".into()))?;
    let cov = l_inv.transpose() * &l_inv;
    let factor = cov
        .cholesky()
        .ok_or_else(|| Error::Estimation("inverse Hessian is not positive definite".into()))?
        .l();
    Ok((factor, regularized))
}

struct Pass {
    log_evidence: f64,
    se: f64,
    ess: f64,
    draws: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn importance_pass(
    log_target: &(dyn Fn(&[f64]) -> f64 + Sync),
    center: &[f64],
    chol: &DMatrix<f64>,
    inflate: f64,
    df: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Pass> {
    let d = center.len();
    let chi = ChiSquared::new(df).map_err(|e| Error::Invalid(e.to_string()))?;
    let log_det = 2.0 * (0..d).map(|i| (chol[(i, i)] * inflate).ln()).sum::<f64>();
    let log_norm = ln_gamma((df + d as f64) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * d as f64 * (df * std::f64::consts::PI).ln()
        - 0.5 * log_det;
    let mut draws = Vec::with_capacity(n);
    let mut log_q = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut *rng)));
        let u: f64 = chi.sample(&mut *rng);
        let scale = (df / u).sqrt();
        let x = DVector::from_column_slice(center) + (chol * &z) * (inflate * scale);
        let delta = z.norm_squared() * df / u;
        log_q.push(log_norm - 0.5 * (df + d as f64) * (1.0 + delta / df).ln());
        draws.push(x.as_slice().to_vec());
    }
    let log_w: Vec<f64> = draws
        .par_iter()
        .zip(log_q.par_iter())
        .map(|(x, lq)| {
            let lp = log_target(x);
            if lp.is_nan() {
                f64::NEG_INFINITY
            } else {
                lp - lq
            }
        })
        .collect();
    let lse = log_sum_exp(&log_w);
    if !lse.is_finite() {
        return Err(Error::Estimation("every importance weight vanished".into()));
    }
    let weights: Vec<f64> = log_w.iter().map(|&l| (l - lse).exp()).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let nf = n as f64;
    // relative standard error of the weight mean, the delta-method error of its log
    let var = weights.iter().map(|w| (nf * w - 1.0).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(Pass { log_evidence: lse - nf.ln(), se: (var / nf).sqrt(), ess, draws, weights })
}
