//! Metropolis-Hastings over ordered rule lists.
//!
//! Three proposal moves: insert an unused candidate at a random position,
//! remove the antecedent at a random position, or move one antecedent to a
//! different position. Move-type probabilities are renormalized over the moves
//! available in the current state, and the acceptance ratio carries the full
//! proposal densities (move type, position, and candidate choice), since the
//! pool of unused candidates changes with the list length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binning::BinnedMatrix;
use crate::error::{Error, Result};
use crate::mining::CandidateSet;
use crate::rulelist::{
    log_marginal_from_counts, log_prior, ChainDiagnostics, CoverageIndex, RuleList, RuleListPrior, TreeRecord,
    TreeSample,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Relative weights of insert, remove and move proposals.
    pub move_weights: [f64; 3],
}

impl ChainSettings {
    /// Burn-in of 20%, no thinning, equal move weights.
    pub fn new(iterations: usize, seed: u64) -> Self {
        ChainSettings { iterations, burn_in: iterations / 5, thin: 1, seed, move_weights: [1.0; 3] }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Invalid(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Invalid("thin must be at least 1".into()));
        }
        if self.move_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.move_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid("move weights must be non-negative with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Insert,
    Remove,
    Relocate,
}

struct Target<'a> {
    cands: &'a CandidateSet,
    prior: &'a RuleListPrior,
    coverage: CoverageIndex,
    max_len: usize,
    weights: [f64; 3],
}

impl Target<'_> {
    fn score(&self, rl: &RuleList) -> (f64, f64) {
        let lp = log_prior(rl, self.prior, self.cands).expect("sampler only builds valid lists");
        let lm = log_marginal_from_counts(&self.coverage.node_counts(&rl.antecedents), self.prior);
        (lp, lm)
    }

    /// Probability of each move type from a list of length `len`.
    fn move_probs(&self, len: usize) -> [f64; 3] {
        let avail = [
            len < self.max_len && len < self.cands.len(),
            len > 0,
            len >= 2,
        ];
        let mut p = [0.0; 3];
        for k in 0..3 {
            if avail[k] {
                p[k] = self.weights[k];
            }
        }
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            for v in &mut p {
                *v /= total;
            }
        }
        p
    }
}

/// One chain started from the empty list.
pub fn sample_rule_lists(
    bm: &BinnedMatrix,
    cands: &CandidateSet,
    prior: &RuleListPrior,
    settings: &ChainSettings,
) -> Result<TreeSample> {
    run_chain(bm, cands, prior, settings, 0)
}

/// Independent chains with per-chain PRNG streams, merged by summing counts.
/// The result does not depend on the number of worker threads.
pub fn sample_chains(
    bm: &BinnedMatrix,
    cands: &CandidateSet,
    prior: &RuleListPrior,
    settings: &ChainSettings,
    chains: usize,
) -> Result<TreeSample> {
    if chains == 0 {
        return Err(Error::Invalid("at least one chain is required".into()));
    }
    let results: Vec<Result<TreeSample>> =
        (0..chains).into_par_iter().map(|c| run_chain(bm, cands, prior, settings, c as u64)).collect();
    let mut merged = TreeSample::default();
    for r in results {
        merged.merge(r?);
    }
    Ok(merged)
}

fn run_chain(
    bm: &BinnedMatrix,
    cands: &CandidateSet,
    prior: &RuleListPrior,
    settings: &ChainSettings,
    stream: u64,
) -> Result<TreeSample> {
    settings.validate()?;
    prior.validate()?;
    if cands.is_empty() {
        return Err(Error::RuleList("the candidate set is empty".into()));
    }
    let target = Target {
        cands,
        prior,
        coverage: CoverageIndex::new(bm, cands),
        max_len: prior.max_len(cands),
        weights: settings.move_weights,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(stream);

    let n_cands = cands.len();
    let mut current = RuleList::empty();
    let mut in_list = vec![false; n_cands];
    let (mut cur_lp, mut cur_lm) = target.score(&current);
    let mut sample = TreeSample {
        diagnostics: ChainDiagnostics { chains: 1, iterations: settings.iterations, ..Default::default() },
        ..Default::default()
    };
    if target.move_probs(0).iter().all(|&p| p == 0.0) {
        log::warn!("no proposal move is available from the empty list; the chain stays put");
    }

    for iter in 0..settings.iterations {
        let m = current.len();
        let probs = target.move_probs(m);
        if let Some(kind) = pick_move(&mut rng, &probs) {
            let mut proposal = current.clone();
            // ln q(current -> proposal) and ln q(proposal -> current)
            let (log_fwd, log_rev, touched) = match kind {
                Move::Insert => {
                    let k = rng.random_range(0..n_cands - m);
                    let cand = (0..n_cands).filter(|&c| !in_list[c]).nth(k).unwrap();
                    let pos = rng.random_range(0..=m);
                    proposal.antecedents.insert(pos, cand);
                    let back = target.move_probs(m + 1)[1];
                    (
                        probs[0].ln() - ((n_cands - m) as f64).ln() - ((m + 1) as f64).ln(),
                        back.ln() - ((m + 1) as f64).ln(),
                        Some((cand, true)),
                    )
                }
                Move::Remove => {
                    let pos = rng.random_range(0..m);
                    let cand = proposal.antecedents.remove(pos);
                    let back = target.move_probs(m - 1)[0];
                    (
                        probs[1].ln() - (m as f64).ln(),
                        back.ln() - ((n_cands - m + 1) as f64).ln() - (m as f64).ln(),
                        Some((cand, false)),
                    )
                }
                Move::Relocate => {
                    let from = rng.random_range(0..m);
                    let mut to = rng.random_range(0..m - 1);
                    if to >= from {
                        to += 1;
                    }
                    let a = proposal.antecedents.remove(from);
                    proposal.antecedents.insert(to, a);
                    // (from, to) pairs reaching the proposal are in bijection
                    // with (to, from) pairs returning, and both states have the
                    // same length, so the position terms cancel exactly.
                    let pair = -((m * (m - 1)) as f64).ln();
                    (probs[2].ln() + pair, target.move_probs(m)[2].ln() + pair, None)
                }
            };
            let (lp, lm) = target.score(&proposal);
            let log_alpha = (lp + lm) - (cur_lp + cur_lm) + log_rev - log_fwd;
            if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
                current = proposal;
                cur_lp = lp;
                cur_lm = lm;
                if let Some((cand, inserted)) = touched {
                    in_list[cand] = inserted;
                }
                sample.diagnostics.accepted += 1;
            }
        }
        if iter >= settings.burn_in && (iter - settings.burn_in) % settings.thin == 0 {
            sample.diagnostics.retained += 1;
            sample
                .records
                .entry(current.clone())
                .and_modify(|r| r.count += 1)
                .or_insert_with(|| TreeRecord { rule_list: current.clone(), count: 1, log_prior: cur_lp, log_marginal: cur_lm });
        }
    }
    log::info!(
        "chain {stream}: acceptance rate {:.3}, {} distinct lists",
        sample.diagnostics.acceptance_rate(),
        sample.distinct()
    );
    Ok(sample)
}

fn pick_move(rng: &mut ChaCha8Rng, probs: &[f64; 3]) -> Option<Move> {
    if probs.iter().all(|&p| p == 0.0) {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, kind) in [Move::Insert, Move::Remove, Move::Relocate].into_iter().enumerate() {
        acc += probs[k];
        if u < acc && probs[k] > 0.0 {
            return Some(kind);
        }
    }
    // rounding left u above the cumulative sum: take the last available move
    [Move::Insert, Move::Remove, Move::Relocate].into_iter().zip(probs).rev().find(|(_, &p)| p > 0.0).map(|(k, _)| k)
}
