//! Policy sweeps: raise one attribute across the population and track the
//! expected mode shares with equal-tailed 95% credible bounds.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceProblem, PriorSpec, UtilityModel};
use crate::data::{ChoiceDataset, ColumnRef};
use crate::error::{Error, Result};
use crate::mining::CandidateSet;
use crate::stats::weighted_percentile;
use crate::tree::{node_assignments, TreePosterior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: String,
    pub grid: Vec<f64>,
    /// Raised values never exceed this.
    #[serde(default)]
    pub clamp: Option<f64>,
}

impl SweepSpec {
    /// Evenly spaced grid from `start` to `stop` inclusive. Points are formed
    /// as integer multiples of a micro-unit so that decimal steps land exactly
    /// on their literals (`0.11`, not `0.11000000000000001`).
    pub fn even_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
        if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
            return Err(Error::Invalid("grid needs finite start <= stop and a positive step".into()));
        }
        let scale = 1e6;
        let (a, s) = ((start * scale).round(), (step * scale).round());
        if s == 0.0 {
            return Err(Error::Invalid("grid step below 1e-6".into()));
        }
        let n = ((stop * scale).round() - a) / s;
        let n = (n + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| (a + i as f64 * s) / scale).collect())
    }

    pub fn validate(&self, dataset: &ChoiceDataset) -> Result<ColumnRef> {
        let col = dataset
            .schema
            .resolve(&self.variable)
            .ok_or_else(|| Error::Invalid(format!("sweep variable {:?} is not in the schema", self.variable)))?;
        if self.grid.is_empty() || self.grid.iter().any(|g| !g.is_finite()) || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("sweep grid must be finite and strictly increasing".into()));
        }
        Ok(col)
    }
}

/// Copy of `dataset` with the swept variable raised to at least `level`.
pub fn raise(dataset: &ChoiceDataset, col: ColumnRef, level: f64, clamp: Option<f64>) -> ChoiceDataset {
    let target = clamp.map_or(level, |c| level.min(c));
    let mut out = dataset.clone();
    for obs in &mut out.observations {
        match col {
            ColumnRef::Person(j) => obs.person_attributes[j] = obs.person_attributes[j].max(target),
            ColumnRef::Alt(j) => {
                for row in &mut obs.alt_attributes {
                    if !row[j].is_nan() {
                        row[j] = row[j].max(target);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSettings {
    /// Draws kept per tree; larger sets are cut down by systematic resampling.
    pub max_draws: usize,
    pub seed: u64,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings { max_draws: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCurve {
    pub variable: String,
    pub alternatives: Vec<String>,
    pub grid: Vec<f64>,
    /// `[grid point][alternative]`
    pub mean: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// Weight of each (tree, draw) pair, shared by all grid points.
    pub sample_weights: Vec<f64>,
    /// `[grid point][pair][alternative]`
    pub samples: Vec<Vec<Vec<f64>>>,
}

/// Draw indices and weights, systematically resampled down to `max` when
/// there are more draws.
fn thin_draws(weights: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
    if weights.len() <= max {
        return weights.iter().copied().enumerate().collect();
    }
    let step = 1.0 / max as f64;
    let mut u = rng.random::<f64>() * step;
    let mut counts = vec![0usize; weights.len()];
    let mut acc = 0.0;
    let mut j = 0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        while j < max && u < acc {
            counts[i] += 1;
            u += step;
            j += 1;
        }
    }
    // rounding can leave the last positions unassigned
    if j < max {
        let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1);
        counts[last] += max - j;
    }
    counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i, c as f64 * step)).collect()
}

pub fn sweep(
    tp: &TreePosterior,
    model: &UtilityModel,
    cands: &CandidateSet,
    dataset: &ChoiceDataset,
    spec: &SweepSpec,
    settings: &ForecastSettings,
) -> Result<ForecastCurve> {
    let col = spec.validate(dataset)?;
    if settings.max_draws == 0 {
        return Err(Error::Invalid("max_draws must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let plans: Vec<Vec<(usize, f64)>> =
        tp.trees.iter().map(|t| thin_draws(&t.evidence.weights, settings.max_draws, &mut rng)).collect();
    let sample_weights: Vec<f64> = plans
        .iter()
        .zip(&tp.weights)
        .flat_map(|(plan, &pm)| plan.iter().map(move |&(_, w)| pm * w))
        .collect();
    let n_alt = model.n_alternatives();
    let samples: Vec<Vec<Vec<f64>>> = spec
        .grid
        .par_iter()
        .map(|&g| {
            let ds = raise(dataset, col, g, spec.clamp);
            let mut shares = Vec::with_capacity(sample_weights.len());
            for (tree, plan) in tp.trees.iter().zip(&plans) {
                let binding = tree.binding(node_assignments(&tree.rule_list, cands, &ds)?);
                let problem = ChoiceProblem::new(model, &ds, &binding, PriorSpec::default())?;
                for &(i, _) in plan {
                    shares.push(problem.mean_choice_probs(&tree.evidence.draws[i], n_alt));
                }
            }
            Ok(shares)
        })
        .collect::<Result<_>>()?;
    let mut mean = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for point in &samples {
        let mut m = vec![0.0; n_alt];
        for (s, &w) in point.iter().zip(&sample_weights) {
            for (a, v) in m.iter_mut().zip(s) {
                *a += w * v;
            }
        }
        let by_alt = |a: usize| point.iter().map(|s| s[a]).collect::<Vec<_>>();
        lower.push((0..n_alt).map(|a| weighted_percentile(&by_alt(a), &sample_weights, 0.025)).collect());
        upper.push((0..n_alt).map(|a| weighted_percentile(&by_alt(a), &sample_weights, 0.975)).collect());
        mean.push(m);
    }
    Ok(ForecastCurve {
        variable: spec.variable.clone(),
        alternatives: model.alternative_names.clone(),
        grid: spec.grid.clone(),
        mean,
        lower,
        upper,
        sample_weights,
        samples,
    })
}

/// Mean probability per alternative over observations.
pub fn mode_share(probs: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = probs.first() else { return Vec::new() };
    let mut out = vec![0.0; first.len()];
    for p in probs {
        for (a, v) in out.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = probs.len() as f64;
    out.into_iter().map(|v| v / n).collect()
}

/// Upper minus lower bound, `[grid point][alternative]`.
pub fn interval_width_profile(curve: &ForecastCurve) -> Vec<Vec<f64>> {
    curve
        .upper
        .iter()
        .zip(&curve.lower)
        .map(|(u, l)| u.iter().zip(l).map(|(a, b)| a - b).collect())
        .collect()
}

/// One row per (grid point, alternative).
pub fn write_curve<W: Write>(curve: &ForecastCurve, mut w: W, preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "{},alternative,mean_share,lower,upper", curve.variable)?;
    for (p, g) in curve.grid.iter().enumerate() {
        for (a, name) in curve.alternatives.iter().enumerate() {
            writeln!(w, "{g},{name},{},{},{}", curve.mean[p][a], curve.lower[p][a], curve.upper[p][a])?;
        }
    }
    Ok(())
}
