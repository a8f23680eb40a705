//! Ordered rule lists over mined antecedents.
//!
//! A list `[p_1, .., p_D]` sends a row to the first antecedent it satisfies,
//! or to the default node `D` when none match. Labels (gated alternative
//! chosen or not) are modelled per node with a Beta-Bernoulli likelihood.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binning::BinnedMatrix;
use crate::error::{Error, Result};
use crate::mining::CandidateSet;
use crate::stats::{ln_beta, ln_trunc_poisson, ln_trunc_poisson_upto};

/// Antecedent indices into a [`CandidateSet`], in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct RuleList {
    pub antecedents: Vec<usize>,
}

impl RuleList {
    pub fn new(antecedents: Vec<usize>) -> Self {
        RuleList { antecedents }
    }

    pub fn empty() -> Self {
        RuleList::default()
    }

    pub fn len(&self) -> usize {
        self.antecedents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.antecedents.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.antecedents.len() + 1
    }

    /// Node of a binned row (`row` holds the active requirement id of each
    /// feature, ascending).
    pub fn assign_node(&self, cands: &CandidateSet, row: &[usize]) -> usize {
        self.antecedents
            .iter()
            .position(|&a| cands.conjunctions[a].requirements().iter().all(|r| row.binary_search(r).is_ok()))
            .unwrap_or(self.antecedents.len())
    }

    pub fn describe(&self, cands: &CandidateSet) -> Vec<String> {
        self.antecedents
            .iter()
            .map(|&a| cands.conjunctions[a].display(&cands.binning).to_string())
            .collect()
    }

    fn check(&self, cands: &CandidateSet) -> Result<()> {
        for (i, &a) in self.antecedents.iter().enumerate() {
            if a >= cands.len() {
                return Err(Error::RuleList(format!("antecedent {a} is not in the candidate set")));
            }
            if self.antecedents[..i].contains(&a) {
                return Err(Error::RuleList(format!("antecedent {a} appears twice")));
            }
        }
        Ok(())
    }
}

/// Hyperparameters of the rule-list prior and the node label model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleListPrior {
    /// Poisson rate for the number of antecedents.
    pub lambda_len: f64,
    /// Poisson rate for the number of requirements per antecedent.
    pub lambda_card: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    /// Maximum list length; `None` means the candidate count capped at 20.
    pub max_len: Option<usize>,
}

impl Default for RuleListPrior {
    fn default() -> Self {
        RuleListPrior { lambda_len: 5.0, lambda_card: 2.0, beta_a: 1.0, beta_b: 1.0, max_len: None }
    }
}

pub const DEFAULT_MAX_LEN_CAP: usize = 20;

impl RuleListPrior {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_len", self.lambda_len),
            ("lambda_card", self.lambda_card),
            ("beta_a", self.beta_a),
            ("beta_b", self.beta_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn max_len(&self, cands: &CandidateSet) -> usize {
        self.max_len.unwrap_or(cands.len().min(DEFAULT_MAX_LEN_CAP)).min(cands.len())
    }
}

/// Log prior probability of a rule list: truncated Poisson on the length,
/// truncated Poisson on each antecedent's cardinality (over cardinalities that
/// still have unused candidates), and a uniform choice among the unused
/// candidates of that cardinality.
pub fn log_prior(rl: &RuleList, prior: &RuleListPrior, cands: &CandidateSet) -> Result<f64> {
    rl.check(cands)?;
    let max_len = prior.max_len(cands);
    let mut lp = ln_trunc_poisson_upto(rl.len(), prior.lambda_len, max_len);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    let mut remaining = cands.counts_by_cardinality();
    for &a in &rl.antecedents {
        let card = cands.conjunctions[a].cardinality();
        let support: Vec<usize> = remaining.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c).collect();
        lp += ln_trunc_poisson(card, prior.lambda_card, &support);
        let left = remaining.get_mut(&card).expect("cardinality present in candidate set");
        if *left == 0 {
            return Ok(f64::NEG_INFINITY);
        }
        lp -= (*left as f64).ln();
        *left -= 1;
    }
    Ok(lp)
}

/// Per-node (positive, negative) label counts.
pub fn node_counts(rl: &RuleList, bm: &BinnedMatrix, cands: &CandidateSet) -> Vec<(usize, usize)> {
    let mut counts = vec![(0, 0); rl.n_nodes()];
    for i in 0..bm.n_rows() {
        let node = rl.assign_node(cands, bm.row(i));
        if bm.labels()[i] {
            counts[node].0 += 1;
        } else {
            counts[node].1 += 1;
        }
    }
    counts
}

/// `Σ_nodes [ln B(a + n1, b + n0) - ln B(a, b)]`.
pub fn log_marginal_from_counts(counts: &[(usize, usize)], prior: &RuleListPrior) -> f64 {
    let base = ln_beta(prior.beta_a, prior.beta_b);
    counts
        .iter()
        .map(|&(n1, n0)| ln_beta(prior.beta_a + n1 as f64, prior.beta_b + n0 as f64) - base)
        .sum()
}

pub fn log_marginal_labels(rl: &RuleList, bm: &BinnedMatrix, cands: &CandidateSet, prior: &RuleListPrior) -> f64 {
    log_marginal_from_counts(&node_counts(rl, bm, cands), prior)
}

/// Conjugate Beta posterior of each node's label probability.
pub fn node_label_posterior(
    rl: &RuleList,
    bm: &BinnedMatrix,
    cands: &CandidateSet,
    prior: &RuleListPrior,
) -> Vec<(f64, f64)> {
    node_counts(rl, bm, cands)
        .into_iter()
        .map(|(n1, n0)| (prior.beta_a + n1 as f64, prior.beta_b + n0 as f64))
        .collect()
}

/// Row membership of every candidate as packed bitsets, for fast node counts.
pub(crate) struct CoverageIndex {
    words: usize,
    cover: Vec<Vec<u64>>,
    positive: Vec<u64>,
    all: Vec<u64>,
}

impl CoverageIndex {
    pub(crate) fn new(bm: &BinnedMatrix, cands: &CandidateSet) -> Self {
        let n = bm.n_rows();
        let words = n.div_ceil(64);
        let mut cover = vec![vec![0u64; words]; cands.len()];
        for (c, conj) in cands.conjunctions.iter().enumerate() {
            for i in 0..n {
                let row = bm.row(i);
                if conj.requirements().iter().all(|r| row.binary_search(r).is_ok()) {
                    cover[c][i / 64] |= 1 << (i % 64);
                }
            }
        }
        let mut positive = vec![0u64; words];
        let mut all = vec![0u64; words];
        for i in 0..n {
            all[i / 64] |= 1 << (i % 64);
            if bm.labels()[i] {
                positive[i / 64] |= 1 << (i % 64);
            }
        }
        CoverageIndex { words, cover, positive, all }
    }

    pub(crate) fn node_counts(&self, antecedents: &[usize]) -> Vec<(usize, usize)> {
        let mut uncovered = self.all.clone();
        let mut counts = Vec::with_capacity(antecedents.len() + 1);
        for &a in antecedents {
            let mut n1 = 0;
            let mut n = 0;
            for w in 0..self.words {
                let captured = self.cover[a][w] & uncovered[w];
                n += captured.count_ones() as usize;
                n1 += (captured & self.positive[w]).count_ones() as usize;
                uncovered[w] &= !captured;
            }
            counts.push((n1, n - n1));
        }
        let n: usize = uncovered.iter().map(|w| w.count_ones() as usize).sum();
        let n1: usize = uncovered.iter().zip(&self.positive).map(|(u, p)| (u & p).count_ones() as usize).sum();
        counts.push((n1, n - n1));
        counts
    }
}

/// Scores cached per visited list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub rule_list: RuleList,
    pub count: usize,
    pub log_prior: f64,
    pub log_marginal: f64,
}

impl TreeRecord {
    pub fn log_posterior(&self) -> f64 {
        self.log_prior + self.log_marginal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub chains: usize,
    pub iterations: usize,
    pub retained: usize,
    pub accepted: usize,
}

impl ChainDiagnostics {
    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }
}

/// Distinct lists visited after burn-in with their visit counts `S_m`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TreeSample {
    pub records: BTreeMap<RuleList, TreeRecord>,
    pub diagnostics: ChainDiagnostics,
}

impl TreeSample {
    pub fn total_count(&self) -> usize {
        self.records.values().map(|r| r.count).sum()
    }

    pub fn distinct(&self) -> usize {
        self.records.len()
    }

    /// Visit-count-weighted mean list length.
    pub fn mean_length(&self) -> f64 {
        let total = self.total_count();
        if total == 0 {
            return 0.0;
        }
        self.records.values().map(|r| (r.count * r.rule_list.len()) as f64).sum::<f64>() / total as f64
    }

    /// The most visited list; ties go to the canonically smallest list.
    pub fn most_visited(&self) -> Option<&TreeRecord> {
        self.records.values().fold(None, |best: Option<&TreeRecord>, r| match best {
            Some(b) if b.count >= r.count => Some(b),
            _ => Some(r),
        })
    }

    pub fn merge(&mut self, other: TreeSample) {
        for (k, rec) in other.records {
            self.records.entry(k).and_modify(|r| r.count += rec.count).or_insert(rec);
        }
        self.diagnostics.chains += other.diagnostics.chains;
        self.diagnostics.iterations += other.diagnostics.iterations;
        self.diagnostics.retained += other.diagnostics.retained;
        self.diagnostics.accepted += other.diagnostics.accepted;
    }

    /// Writes `count<TAB>log_prior<TAB>log_marginal<TAB>rules`, rules joined
    /// by ` | ` (`-` for the empty list).
    pub fn write<W: std::io::Write>(&self, mut w: W, cands: &CandidateSet, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        let d = &self.diagnostics;
        writeln!(
            w,
            "# chains={} iterations={} retained={} accepted={} distinct={}",
            d.chains,
            d.iterations,
            d.retained,
            d.accepted,
            self.distinct()
        )?;
        writeln!(w, "count\tlog_prior\tlog_marginal\trules")?;
        for rec in self.records.values() {
            let rules = rec.rule_list.describe(cands);
            let rules = if rules.is_empty() { "-".to_string() } else { rules.join(" | ") };
            writeln!(w, "{}\t{}\t{}\t{}", rec.count, rec.log_prior, rec.log_marginal, rules)?;
        }
        Ok(())
    }

    pub fn read<R: std::io::BufRead>(r: R, cands: &CandidateSet) -> Result<Self> {
        let mut sample = TreeSample::default();
        let mut saw_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    let d = &mut sample.diagnostics;
                    let slot = match k {
                        "chains" => &mut d.chains,
                        "iterations" => &mut d.iterations,
                        "retained" => &mut d.retained,
                        "accepted" => &mut d.accepted,
                        _ => continue,
                    };
                    *slot = v.parse().unwrap_or(0);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                saw_header = true;
                continue;
            }
            let bad = |message: String| Error::Parse { line: lineno, message };
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            if fields.len() != 4 {
                return Err(bad("expected four tab-separated fields".into()));
            }
            let count: usize = fields[0].parse().map_err(|_| bad("bad count".into()))?;
            let log_prior: f64 = fields[1].parse().map_err(|_| bad("bad log_prior".into()))?;
            let log_marginal: f64 = fields[2].parse().map_err(|_| bad("bad log_marginal".into()))?;
            let mut antecedents = Vec::new();
            if fields[3] != "-" {
                for text in fields[3].split(" | ") {
                    let ids = text
                        .split(" & ")
                        .map(|req| cands.binning.find(req).ok_or_else(|| bad(format!("unknown requirement {req:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    let conj = crate::mining::Conjunction::new(ids, &cands.binning).map_err(|e| bad(e.to_string()))?;
                    let idx = cands.index_of(&conj).ok_or_else(|| bad(format!("{text:?} is not a candidate")))?;
                    antecedents.push(idx);
                }
            }
            let rule_list = RuleList::new(antecedents);
            sample
                .records
                .insert(rule_list.clone(), TreeRecord { rule_list, count, log_prior, log_marginal });
        }
        Ok(sample)
    }
}
