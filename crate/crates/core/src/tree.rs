//! Model trees: rule lists whose nodes carry a choice model.
//!
//! Trees visited by the label-only sampler are narrowed to a small set, each
//! gets a full choice model fitted on all observations, and the set is
//! reweighted by the ratio of choice-data evidence to label evidence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{choice_prob, ChoiceParams, ChoiceProblem, ParamLayout, PriorSpec, TreeBinding, UtilityModel};
use crate::data::{ChoiceDataset, ChoiceObservation};
use crate::error::{Error, Result};
use crate::evidence::{estimate_evidence, EvidenceEstimate, EvidenceSettings};
use crate::mining::CandidateSet;
use crate::rulelist::{RuleList, TreeRecord, TreeSample};
use crate::stats::{log_sum_exp, normalize_log_weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsiderPolicy {
    /// Winnow the gated alternative in nodes where nobody chose it.
    #[default]
    Data,
    /// Consider it everywhere; nodes differ only in their constants.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    pub k: usize,
    /// Trees taken by label log-posterior; defaults to `ceil(0.3 k)`.
    pub by_posterior: Option<usize>,
    /// Further trees taken by label log-marginal; defaults to `ceil(0.3 k)`.
    pub by_marginal: Option<usize>,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings { k: 10, by_posterior: None, by_marginal: None }
    }
}

impl SelectionSettings {
    pub fn quotas(&self) -> (usize, usize) {
        let q = (0.3 * self.k as f64).ceil() as usize;
        (self.by_posterior.unwrap_or(q), self.by_marginal.unwrap_or(q))
    }
}

/// Picks up to `k` distinct lists: the best by log-posterior, then new ones by
/// log-marginal, then lists with length nearest the sample mean. Ties go to
/// the canonically smaller list.
pub fn select_trees(sample: &TreeSample, settings: &SelectionSettings) -> Result<Vec<RuleList>> {
    if settings.k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if sample.records.is_empty() {
        return Err(Error::Invalid("the tree sample is empty".into()));
    }
    let (n_post, n_marg) = settings.quotas();
    let recs: Vec<&TreeRecord> = sample.records.values().collect();
    let mut chosen: Vec<&TreeRecord> = Vec::new();
    let by = |key: fn(&TreeRecord) -> f64| {
        let mut v = recs.clone();
        v.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.rule_list.cmp(&b.rule_list)));
        v
    };
    let k = settings.k;
    take(by(|r| r.log_posterior()), n_post, k, &mut chosen);
    take(by(|r| r.log_marginal), n_marg, k, &mut chosen);
    let mean = sample.mean_length();
    let mut near = recs.clone();
    near.sort_by(|a, b| {
        let da = (a.rule_list.len() as f64 - mean).abs();
        let db = (b.rule_list.len() as f64 - mean).abs();
        da.total_cmp(&db)
            .then_with(|| b.log_posterior().total_cmp(&a.log_posterior()))
            .then_with(|| a.rule_list.cmp(&b.rule_list))
    });
    take(near, k, k, &mut chosen);
    Ok(chosen.into_iter().map(|r| r.rule_list.clone()).collect())
}

fn take<'a>(ranked: Vec<&'a TreeRecord>, quota: usize, k: usize, chosen: &mut Vec<&'a TreeRecord>) {
    let mut taken = 0;
    for r in ranked {
        if taken == quota || chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|c| c.rule_list == r.rule_list) {
            chosen.push(r);
            taken += 1;
        }
    }
}

/// Node of every observation under `rl`.
pub fn node_assignments(rl: &RuleList, cands: &CandidateSet, dataset: &ChoiceDataset) -> Result<Vec<usize>> {
    if rl.is_empty() {
        return Ok(vec![0; dataset.len()]);
    }
    dataset.observations.iter().map(|o| node_of(rl, cands, o)).collect()
}

pub fn node_of(rl: &RuleList, cands: &CandidateSet, obs: &ChoiceObservation) -> Result<usize> {
    if rl.is_empty() {
        return Ok(0);
    }
    let row = cands.binning.bin_observation(obs)?;
    Ok(rl.assign_node(cands, &row))
}

/// Consider flag per node. Under [`ConsiderPolicy::Data`] a node winnows the
/// gated alternative when no observation in it chose the alternative. Counts
/// run over all observations so that no observed choice becomes impossible.
pub fn consider_flags(
    n_nodes: usize,
    node_of: &[usize],
    dataset: &ChoiceDataset,
    policy: ConsiderPolicy,
) -> Result<Vec<bool>> {
    if policy == ConsiderPolicy::All {
        return Ok(vec![true; n_nodes]);
    }
    let gated = dataset
        .schema
        .gated_id()
        .ok_or_else(|| Error::Schema("consider flags need a gated alternative".into()))?;
    let mut flags = vec![false; n_nodes];
    for (obs, &node) in dataset.observations.iter().zip(node_of) {
        if obs.chosen == gated {
            flags[node] = true;
        }
    }
    Ok(flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTree {
    pub rule_list: RuleList,
    /// Human-readable antecedents, checked against the candidate set on load.
    pub rules: Vec<String>,
    pub consider: Vec<bool>,
    pub layout: ParamLayout,
    pub count: usize,
    pub log_prior: f64,
    pub log_marginal: f64,
    pub evidence: EvidenceEstimate,
}

impl ModelTree {
    pub fn binding(&self, node_of: Vec<usize>) -> TreeBinding {
        TreeBinding { node_of, consider: self.consider.clone(), pooled: self.layout.n_eta.is_some() }
    }

    /// Checks that the stored rule list still matches `cands`.
    pub fn check(&self, cands: &CandidateSet) -> Result<()> {
        let ok = self.rule_list.antecedents.iter().all(|&a| a < cands.len())
            && self.rule_list.describe(cands) == self.rules
            && self.consider.len() == self.rule_list.n_nodes();
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("model tree does not match the candidate set".into()))
        }
    }
}

/// Shared inputs for fitting choice models to trees.
pub struct FitContext<'a> {
    pub dataset: &'a ChoiceDataset,
    pub model: &'a UtilityModel,
    pub prior: PriorSpec,
    pub evidence: EvidenceSettings,
    pub policy: ConsiderPolicy,
}

pub fn fit_tree(ctx: &FitContext, cands: &CandidateSet, record: &TreeRecord, seed: u64) -> Result<ModelTree> {
    let rl = &record.rule_list;
    let nodes = node_assignments(rl, cands, ctx.dataset)?;
    let consider = consider_flags(rl.n_nodes(), &nodes, ctx.dataset, ctx.policy)?;
    let binding = TreeBinding { node_of: nodes, consider: consider.clone(), pooled: ctx.model.gated_constant };
    let problem = ChoiceProblem::new(ctx.model, ctx.dataset, &binding, ctx.prior)?;
    let evidence = estimate_evidence(&problem, &ctx.evidence, seed)?;
    log::info!(
        "tree of length {}: log evidence {:.3} (MC se {:.4}, ESS {:.0})",
        rl.len(),
        evidence.log_evidence,
        evidence.mc_standard_error,
        evidence.ess
    );
    Ok(ModelTree {
        rule_list: rl.clone(),
        rules: rl.describe(cands),
        consider,
        layout: problem.layout,
        count: record.count,
        log_prior: record.log_prior,
        log_marginal: record.log_marginal,
        evidence,
    })
}

/// Seed for the `i`-th fit of a run.
pub fn fit_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits every selected list in parallel; results follow the input order.
pub fn fit_trees(ctx: &FitContext, cands: &CandidateSet, sample: &TreeSample, selected: &[RuleList], seed: u64) -> Result<Vec<ModelTree>> {
    selected
        .par_iter()
        .enumerate()
        .map(|(i, rl)| {
            let rec = sample
                .records
                .get(rl)
                .ok_or_else(|| Error::Invalid("selected list is not in the sample".into()))?;
            fit_tree(ctx, cands, rec, fit_seed(seed, i))
        })
        .collect()
}

/// Plain MNL: no rule list, one node, a single gated constant.
pub fn fit_baseline(ctx: &FitContext, seed: u64) -> Result<ModelTree> {
    let binding = TreeBinding::flat(ctx.dataset.len());
    let problem = ChoiceProblem::new(ctx.model, ctx.dataset, &binding, ctx.prior)?;
    let evidence = estimate_evidence(&problem, &ctx.evidence, seed)?;
    log::info!("baseline: log evidence {:.3} (MC se {:.4}, ESS {:.0})", evidence.log_evidence, evidence.mc_standard_error, evidence.ess);
    Ok(ModelTree {
        rule_list: RuleList::empty(),
        rules: Vec::new(),
        consider: vec![true],
        layout: problem.layout,
        count: 1,
        log_prior: 0.0,
        log_marginal: 0.0,
        evidence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePosterior {
    pub trees: Vec<ModelTree>,
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
}

/// Importance weights `log_evidence - log_marginal + ln S_m`, normalized over
/// the given trees as if they were the whole space. The rule-list prior
/// appears in both numerator and denominator and cancels.
pub fn reweight_trees(trees: Vec<ModelTree>) -> Result<TreePosterior> {
    if trees.is_empty() {
        return Err(Error::Invalid("no trees to reweight".into()));
    }
    let log_weights: Vec<f64> = trees
        .iter()
        .map(|t| t.evidence.log_evidence - t.log_marginal + (t.count as f64).ln())
        .collect();
    let weights = normalize_log_weights(&log_weights)
        .ok_or_else(|| Error::Estimation("every tree weight is zero".into()))?;
    Ok(TreePosterior { trees, weights, log_weights })
}

impl TreePosterior {
    pub fn single(tree: ModelTree) -> Self {
        TreePosterior { trees: vec![tree], weights: vec![1.0], log_weights: vec![0.0] }
    }
}

/// Probability per alternative, mixing over trees and their weighted draws.
pub fn predict(tp: &TreePosterior, model: &UtilityModel, cands: &CandidateSet, obs: &ChoiceObservation) -> Result<Vec<f64>> {
    let mut out = vec![0.0; model.n_alternatives()];
    for (tree, &pm) in tp.trees.iter().zip(&tp.weights) {
        let node = node_of(&tree.rule_list, cands, obs)?;
        let mut inner = vec![0.0; out.len()];
        for (draw, &w) in tree.evidence.draws.iter().zip(&tree.evidence.weights) {
            let params = ChoiceParams::from_vec(&tree.layout, draw);
            let p = choice_prob(model, &params, obs, node, &tree.consider)?;
            for (a, b) in inner.iter_mut().zip(p) {
                *a += w * b;
            }
        }
        for (a, b) in out.iter_mut().zip(inner) {
            *a += pm * b;
        }
    }
    Ok(out)
}

/// Posterior probability of model `a` against model `b` given its prior
/// probability.
pub fn posterior_model_prob(log_ev_a: f64, log_ev_b: f64, prior_a: f64) -> f64 {
    let la = prior_a.ln() + log_ev_a;
    let lb = (1.0 - prior_a).ln() + log_ev_b;
    (la - log_sum_exp(&[la, lb])).exp()
}

/// Evidence of the tree mixture, weighting each tree by its share of sampler
/// visits within the set.
pub fn evidence_of_tree_model(trees: &[ModelTree]) -> f64 {
    let total: f64 = trees.iter().map(|t| t.count as f64).sum();
    let terms: Vec<f64> = trees.iter().map(|t| t.evidence.log_evidence + (t.count as f64 / total).ln()).collect();
    log_sum_exp(&terms)
}
