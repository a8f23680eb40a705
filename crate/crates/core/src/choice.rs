//! Multinomial logit whose gated alternative has a node-varying constant.
//!
//! The gated constant in node `i` is `asc + exp(log_sigma) * eta_i`, with one
//! `eta` per node where the gated alternative is considered. In nodes where it
//! is winnowed the alternative leaves the choice set. The flat layout (no
//! `log_sigma`, no `eta`) is a plain MNL.
//!
//! Parameter vectors are laid out as `[beta..., asc_gated, log_sigma, eta...]`
//! where `beta` holds the shared coefficients followed by the constants of the
//! non-gated alternatives.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, ChoiceObservation, ColumnRef, FeatureSchema};
use crate::error::{Error, Result};
use crate::optim::{fd_neg_hessian, maximize, norm};
use crate::stats::{ln_normal, log_sum_exp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityTerm {
    pub coefficient: String,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternativeUtility {
    pub alternative: String,
    #[serde(default)]
    pub constant: bool,
    #[serde(default)]
    pub terms: Vec<UtilityTerm>,
}

/// Systematic utilities per alternative. A coefficient name used in several
/// alternatives is one shared parameter. Alternatives left out have utility 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct UtilitySpec {
    pub alternatives: Vec<AlternativeUtility>,
}

impl UtilitySpec {
    /// Copy with extra terms appended to one alternative.
    pub fn with_terms(&self, alternative: &str, terms: &[UtilityTerm]) -> Self {
        let mut out = self.clone();
        match out.alternatives.iter_mut().find(|a| a.alternative == alternative) {
            Some(a) => a.terms.extend_from_slice(terms),
            None => out.alternatives.push(AlternativeUtility {
                alternative: alternative.to_string(),
                constant: false,
                terms: terms.to_vec(),
            }),
        }
        out
    }
}

/// A [`UtilitySpec`] resolved against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityModel {
    pub beta_names: Vec<String>,
    pub alternative_names: Vec<String>,
    terms: Vec<Vec<(usize, ColumnRef)>>,
    constants: Vec<Option<usize>>,
    pub gated: Option<usize>,
    pub gated_constant: bool,
}

impl UtilityModel {
    pub fn compile(spec: &UtilitySpec, schema: &FeatureSchema) -> Result<Self> {
        let n_alt = schema.n_alternatives();
        let gated = schema.gated_id();
        let mut terms = vec![Vec::new(); n_alt];
        let mut has_constant = vec![false; n_alt];
        let mut coef_names: Vec<String> = Vec::new();
        let mut seen_alt = vec![false; n_alt];
        for au in &spec.alternatives {
            let a = schema
                .alternative_id(&au.alternative)
                .ok_or_else(|| Error::Model(format!("unknown alternative {:?}", au.alternative)))?;
            if std::mem::replace(&mut seen_alt[a], true) {
                return Err(Error::Model(format!("alternative {:?} specified twice", au.alternative)));
            }
            has_constant[a] = au.constant;
            for t in &au.terms {
                let col = schema
                    .resolve(&t.column)
                    .ok_or_else(|| Error::Model(format!("column {:?} is not in the schema", t.column)))?;
                if terms[a].iter().any(|&(_, c)| c == col) {
                    return Err(Error::Model(format!(
                        "column {:?} enters the utility of {:?} twice",
                        t.column, au.alternative
                    )));
                }
                let k = match coef_names.iter().position(|c| c == &t.coefficient) {
                    Some(k) => k,
                    None => {
                        coef_names.push(t.coefficient.clone());
                        coef_names.len() - 1
                    }
                };
                terms[a].push((k, col));
            }
        }
        if has_constant.iter().all(|&c| c) {
            return Err(Error::Model("one alternative must be left without a constant".into()));
        }
        let mut beta_names = coef_names;
        let mut constants = vec![None; n_alt];
        for a in 0..n_alt {
            if has_constant[a] && Some(a) != gated {
                let name = format!("asc_{}", schema.alternatives[a].name);
                if beta_names.contains(&name) {
                    return Err(Error::Model(format!("coefficient name {name:?} collides with a constant")));
                }
                beta_names.push(name);
                constants[a] = Some(beta_names.len() - 1);
            }
        }
        Ok(UtilityModel {
            beta_names,
            alternative_names: schema.alternatives.iter().map(|a| a.name.clone()).collect(),
            terms,
            constants,
            gated,
            gated_constant: gated.is_some_and(|g| has_constant[g]),
        })
    }

    pub fn n_beta(&self) -> usize {
        self.beta_names.len()
    }

    pub fn n_alternatives(&self) -> usize {
        self.terms.len()
    }
}

/// Variance of the normal priors on `beta` and `asc_gated`, and the scale of
/// the log-normal prior on the gated-constant spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub variance: f64,
    pub log_sigma_scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { variance: 4.0, log_sigma_scale: 2.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite() && self.log_sigma_scale > 0.0 && self.log_sigma_scale.is_finite()) {
            return Err(Error::Invalid("prior variance and scale must be positive".into()));
        }
        Ok(())
    }
}

/// Node assignment of every observation and the per-node consider flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBinding {
    pub node_of: Vec<usize>,
    pub consider: Vec<bool>,
    /// Node-varying gated constants; otherwise a single constant everywhere.
    pub pooled: bool,
}

impl TreeBinding {
    /// One node, gated alternative always considered, no hierarchy.
    pub fn flat(n_obs: usize) -> Self {
        TreeBinding { node_of: vec![0; n_obs], consider: vec![true], pooled: false }
    }

    pub fn n_eta(&self) -> usize {
        if self.pooled {
            self.consider.iter().filter(|&&c| c).count()
        } else {
            0
        }
    }
}

/// Slot of node `node` among the considered nodes.
fn eta_slot(consider: &[bool], node: usize) -> Option<usize> {
    consider[node].then(|| consider[..node].iter().filter(|&&c| c).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n_beta: usize,
    pub gated_constant: bool,
    /// `Some(n)` for the pooled form with `n` node deviates.
    pub n_eta: Option<usize>,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.n_beta + self.gated_constant as usize + self.n_eta.map_or(0, |n| n + 1)
    }

    pub fn asc_index(&self) -> Option<usize> {
        self.gated_constant.then_some(self.n_beta)
    }

    pub fn log_sigma_index(&self) -> Option<usize> {
        self.n_eta.map(|_| self.n_beta + 1)
    }

    pub fn eta_start(&self) -> usize {
        self.n_beta + 2
    }

    pub fn names(&self, model: &UtilityModel) -> Vec<String> {
        let mut names = model.beta_names.clone();
        let g = model.gated.map_or("gated", |g| model.alternative_names[g].as_str());
        if self.gated_constant {
            names.push(format!("asc_{g}"));
        }
        if let Some(n) = self.n_eta {
            names.push(format!("log_sigma_{g}"));
            names.extend((0..n).map(|i| format!("eta_{i}")));
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceParams {
    pub beta: Vec<f64>,
    pub asc_gated: f64,
    pub log_sigma: f64,
    pub eta: Vec<f64>,
}

impl ChoiceParams {
    pub fn from_vec(layout: &ParamLayout, theta: &[f64]) -> Self {
        assert_eq!(theta.len(), layout.dim(), "parameter vector length");
        ChoiceParams {
            beta: theta[..layout.n_beta].to_vec(),
            asc_gated: layout.asc_index().map_or(0.0, |i| theta[i]),
            log_sigma: layout.log_sigma_index().map_or(0.0, |i| theta[i]),
            eta: if layout.n_eta.is_some() { theta[layout.eta_start()..].to_vec() } else { Vec::new() },
        }
    }

    pub fn to_vec(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut v = self.beta.clone();
        if layout.gated_constant {
            v.push(self.asc_gated);
        }
        if layout.n_eta.is_some() {
            v.push(self.log_sigma);
            v.extend_from_slice(&self.eta);
        }
        v
    }

    /// Gated constant in the node whose deviate sits at `slot`.
    pub fn node_constant(&self, slot: Option<usize>) -> f64 {
        match slot.and_then(|s| self.eta.get(s)) {
            Some(e) => self.asc_gated + self.log_sigma.exp() * e,
            None => self.asc_gated,
        }
    }
}

/// Systematic utilities in `node`; `-inf` for unavailable alternatives and for
/// the gated alternative where the node winnows it.
pub fn utilities(
    model: &UtilityModel,
    params: &ChoiceParams,
    obs: &ChoiceObservation,
    node: usize,
    consider: &[bool],
) -> Result<Vec<f64>> {
    if node >= consider.len() {
        return Err(Error::Model(format!("node {node} out of range for {} nodes", consider.len())));
    }
    let mut v = vec![f64::NEG_INFINITY; model.n_alternatives()];
    for (a, out) in v.iter_mut().enumerate() {
        if !obs.available[a] {
            continue;
        }
        let mut u = 0.0;
        if Some(a) == model.gated {
            if !consider[node] {
                continue;
            }
            if model.gated_constant {
                u += params.node_constant(eta_slot(consider, node));
            }
        } else if let Some(k) = model.constants[a] {
            u += params.beta[k];
        }
        for &(k, col) in &model.terms[a] {
            let x = obs.value(col, a);
            if x.is_nan() {
                return Err(Error::Observation { obs_id: obs.obs_id, message: format!("missing utility attribute for alternative {a}") });
            }
            u += params.beta[k] * x;
        }
        *out = u;
    }
    Ok(v)
}

/// Softmax with max-subtraction; `-inf` utilities get probability 0.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; v.len()];
    }
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn choice_prob(
    model: &UtilityModel,
    params: &ChoiceParams,
    obs: &ChoiceObservation,
    node: usize,
    consider: &[bool],
) -> Result<Vec<f64>> {
    if obs.n_available() == 0 {
        return Err(Error::Observation { obs_id: obs.obs_id, message: "no available alternative".into() });
    }
    Ok(softmax(&utilities(model, params, obs, node, consider)?))
}

pub fn log_likelihood(model: &UtilityModel, params: &ChoiceParams, dataset: &ChoiceDataset, binding: &TreeBinding) -> Result<f64> {
    let layout = ParamLayout { n_beta: model.n_beta(), gated_constant: model.gated_constant, n_eta: binding.pooled.then(|| binding.n_eta()) };
    let problem = ChoiceProblem::new(model, dataset, binding, PriorSpec::default())?;
    Ok(problem.log_likelihood(&params.to_vec(&layout)))
}

pub fn grad_log_posterior(
    model: &UtilityModel,
    params: &ChoiceParams,
    dataset: &ChoiceDataset,
    binding: &TreeBinding,
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    let problem = ChoiceProblem::new(model, dataset, binding, *prior)?;
    let (lp, g) = problem.value_grad(&params.to_vec(&problem.layout));
    if !lp.is_finite() {
        return Err(Error::Estimation("log posterior is not finite at these parameters".into()));
    }
    Ok(g)
}

#[derive(Debug, Clone)]
struct DesignAlt {
    alt: usize,
    terms: Vec<(usize, f64)>,
    constant: Option<usize>,
    gated: bool,
}

#[derive(Debug, Clone)]
struct DesignRow {
    alts: Vec<DesignAlt>,
    /// Position of the chosen alternative in `alts`; `None` when it was
    /// winnowed, which makes the likelihood zero.
    chosen: Option<usize>,
    eta: Option<usize>,
}

const CHUNK: usize = 256;

/// A dataset bound to a utility model and tree, flattened for fast
/// evaluation of the log posterior and its gradient.
#[derive(Debug, Clone)]
pub struct ChoiceProblem {
    pub layout: ParamLayout,
    pub prior: PriorSpec,
    pub names: Vec<String>,
    rows: Vec<DesignRow>,
}

impl ChoiceProblem {
    pub fn new(model: &UtilityModel, dataset: &ChoiceDataset, binding: &TreeBinding, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        if binding.node_of.len() != dataset.len() {
            return Err(Error::Model(format!(
                "binding covers {} observations, dataset has {}",
                binding.node_of.len(),
                dataset.len()
            )));
        }
        if binding.pooled && !model.gated_constant {
            return Err(Error::Model("node-varying constants need a constant on the gated alternative".into()));
        }
        let layout = ParamLayout {
            n_beta: model.n_beta(),
            gated_constant: model.gated_constant,
            n_eta: binding.pooled.then(|| binding.n_eta()),
        };
        let asc = layout.asc_index();
        let mut rows = Vec::with_capacity(dataset.len());
        for (obs, &node) in dataset.observations.iter().zip(&binding.node_of) {
            if node >= binding.consider.len() {
                return Err(Error::Model(format!("observation {} assigned to missing node {node}", obs.obs_id)));
            }
            let mut alts = Vec::new();
            let mut chosen = None;
            for a in 0..model.n_alternatives() {
                if !obs.available[a] {
                    continue;
                }
                let is_gated = Some(a) == model.gated;
                if is_gated && !binding.consider[node] {
                    continue;
                }
                let mut terms = Vec::with_capacity(model.terms[a].len());
                for &(k, col) in &model.terms[a] {
                    let x = obs.value(col, a);
                    if x.is_nan() {
                        return Err(Error::Observation {
                            obs_id: obs.obs_id,
                            message: format!("missing utility attribute for alternative {a}"),
                        });
                    }
                    terms.push((k, x));
                }
                if a == obs.chosen {
                    chosen = Some(alts.len());
                }
                let constant = if is_gated { asc } else { model.constants[a] };
                alts.push(DesignAlt { alt: a, terms, constant, gated: is_gated && binding.pooled });
            }
            let eta = if binding.pooled { eta_slot(&binding.consider, node) } else { None };
            rows.push(DesignRow { alts, chosen, eta });
        }
        Ok(ChoiceProblem { layout, prior, names: layout.names(model), rows })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let v = self.prior.variance;
        let l = &self.layout;
        let n_normal = l.n_beta + l.gated_constant as usize;
        let mut lp: f64 = theta[..n_normal].iter().map(|&x| ln_normal(x, 0.0, v)).sum();
        if let Some(i) = l.log_sigma_index() {
            // log-normal on sigma is normal on log sigma once the Jacobian is in
            lp += ln_normal(theta[i], 0.0, self.prior.log_sigma_scale.powi(2));
            lp += theta[l.eta_start()..].iter().map(|&e| ln_normal(e, 0.0, 1.0)).sum::<f64>();
        }
        lp
    }

    fn grad_log_prior(&self, theta: &[f64], g: &mut [f64]) {
        let v = self.prior.variance;
        let l = &self.layout;
        let n_normal = l.n_beta + l.gated_constant as usize;
        for i in 0..n_normal {
            g[i] -= theta[i] / v;
        }
        if let Some(i) = l.log_sigma_index() {
            g[i] -= theta[i] / self.prior.log_sigma_scale.powi(2);
            for j in l.eta_start()..theta.len() {
                g[j] -= theta[j];
            }
        }
    }

    fn row_utilities(&self, row: &DesignRow, theta: &[f64], sigma: f64, v: &mut Vec<f64>) {
        v.clear();
        for alt in &row.alts {
            let mut u: f64 = alt.terms.iter().map(|&(k, x)| theta[k] * x).sum();
            if let Some(c) = alt.constant {
                u += theta[c];
            }
            if alt.gated {
                if let Some(s) = row.eta {
                    u += sigma * theta[self.layout.eta_start() + s];
                }
            }
            v.push(u);
        }
    }

    fn sigma(&self, theta: &[f64]) -> f64 {
        self.layout.log_sigma_index().map_or(0.0, |i| theta[i].exp())
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.dim());
        let sigma = self.sigma(theta);
        let parts: Vec<f64> = self
            .rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut v = Vec::new();
                let mut ll = 0.0;
                for row in chunk {
                    let Some(c) = row.chosen else { return f64::NEG_INFINITY };
                    self.row_utilities(row, theta, sigma, &mut v);
                    ll += v[c] - log_sum_exp(&v);
                }
                ll
            })
            .collect();
        parts.iter().sum()
    }

    /// Mean choice probability per alternative over all observations.
    pub fn mean_choice_probs(&self, theta: &[f64], n_alternatives: usize) -> Vec<f64> {
        let sigma = self.sigma(theta);
        let parts: Vec<Vec<f64>> = self
            .rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; n_alternatives];
                let mut v = Vec::new();
                for row in chunk {
                    self.row_utilities(row, theta, sigma, &mut v);
                    let lse = log_sum_exp(&v);
                    for (alt, u) in row.alts.iter().zip(&v) {
                        acc[alt.alt] += (u - lse).exp();
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; n_alternatives];
        for p in parts {
            for (a, b) in total.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.rows.len().max(1) as f64;
        total.into_iter().map(|t| t / n).collect()
    }

    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        self.log_likelihood(theta) + self.log_prior(theta)
    }

    /// Log posterior (up to the evidence) and its gradient.
    pub fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(theta.len(), self.dim());
        let d = self.dim();
        let sigma = self.sigma(theta);
        let es = self.layout.eta_start();
        let ls = self.layout.log_sigma_index();
        let parts: Vec<(f64, Vec<f64>)> = self
            .rows
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; d];
                let mut v = Vec::new();
                let mut ll = 0.0;
                for row in chunk {
                    let Some(c) = row.chosen else { return (f64::NEG_INFINITY, g) };
                    self.row_utilities(row, theta, sigma, &mut v);
                    let lse = log_sum_exp(&v);
                    ll += v[c] - lse;
                    for (j, alt) in row.alts.iter().enumerate() {
                        let r = (j == c) as u8 as f64 - (v[j] - lse).exp();
                        for &(k, x) in &alt.terms {
                            g[k] += r * x;
                        }
                        if let Some(k) = alt.constant {
                            g[k] += r;
                        }
                        if alt.gated {
                            if let (Some(s), Some(li)) = (row.eta, ls) {
                                g[li] += r * sigma * theta[es + s];
                                g[es + s] += r * sigma;
                            }
                        }
                    }
                }
                (ll, g)
            })
            .collect();
        let mut ll = 0.0;
        let mut g = vec![0.0; d];
        for (l, gp) in parts {
            ll += l;
            for (a, b) in g.iter_mut().zip(gp) {
                *a += b;
            }
        }
        self.grad_log_prior(theta, &mut g);
        (ll + self.log_prior(theta), g)
    }

    /// Hessian of the negative log posterior by central differences of the
    /// analytic gradient, symmetrized.
    pub fn neg_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        fd_neg_hessian(&|x| self.value_grad(x), theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub theta: Vec<f64>,
    pub log_posterior: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub starts_converged: usize,
}

pub use crate::optim::MAP_GRAD_TOL;

/// Posterior mode from `starts` starting points (the origin, then jittered
/// draws), each refined by BFGS and polished with Newton steps.
pub fn map_estimate(problem: &ChoiceProblem, starts: usize, seed: u64) -> Result<MapEstimate> {
    if starts == 0 {
        return Err(Error::Invalid("at least one start is required".into()));
    }
    if problem.rows.iter().any(|r| r.chosen.is_none()) {
        return Err(Error::Estimation("an observation chose an alternative its node winnows".into()));
    }
    let d = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<MapEstimate> = None;
    let mut n_conv = 0;
    let mut last_norm = f64::NAN;
    for s in 0..starts {
        let x0: Vec<f64> = if s == 0 { vec![0.0; d] } else { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let x = maximize(&|x| problem.value_grad(x), x0);
        let (lp, g) = problem.value_grad(&x);
        let norm = norm(&g);
        last_norm = norm;
        let conv = lp.is_finite() && norm < MAP_GRAD_TOL;
        log::debug!("start {s}: log posterior {lp:.6}, gradient norm {norm:.3e}");
        if !conv {
            continue;
        }
        n_conv += 1;
        if best.as_ref().is_none_or(|b| lp > b.log_posterior) {
            best = Some(MapEstimate { theta: x, log_posterior: lp, grad_norm: norm, converged: true, starts_converged: 0 });
        }
    }
    match best {
        Some(mut b) => {
            b.starts_converged = n_conv;
            Ok(b)
        }
        None => Err(Error::Estimation(format!(
            "none of {starts} starts converged (last gradient norm {last_norm:.3e}, tolerance {MAP_GRAD_TOL:e})"
        ))),
    }
}
