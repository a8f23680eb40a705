//! Discretization of tree features into binary requirements.
//!
//! Each tree feature is cut into a partition of intervals (or category sets).
//! A requirement is "feature lies in this cell"; for every row exactly one
//! requirement per feature is active.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{ChoiceDataset, ChoiceObservation, ColumnRef, FeatureSchema};
use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Membership test for one feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    /// `lo < v <= hi` (or `lo <= v` when `lo_closed`). An infinite `hi` is open.
    Range { lo: f64, hi: f64, lo_closed: bool },
    /// `v` equals one of the listed integers.
    Set(Vec<i64>),
}

impl Condition {
    pub fn contains(&self, v: f64) -> bool {
        match self {
            Condition::Range { lo, hi, lo_closed } => {
                let above = if *lo_closed { v >= *lo } else { v > *lo };
                let below = if hi.is_infinite() { v < *hi } else { v <= *hi };
                above && below
            }
            Condition::Set(values) => v.fract() == 0.0 && values.contains(&(v as i64)),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Range { lo, hi, lo_closed } => {
                let open = if *lo_closed && lo.is_finite() { '[' } else { '(' };
                let close = if hi.is_finite() { ']' } else { ')' };
                write!(f, "{open}{},{}{close}", fmt_bound(*lo), fmt_bound(*hi))
            }
            Condition::Set(values) => {
                let parts: Vec<String> = values.iter().map(i64::to_string).collect();
                write!(f, "{{{}}}", parts.join(","))
            }
        }
    }
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// A primitive boolean statement: `feature in condition`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub feature: String,
    pub condition: Condition,
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.feature, self.condition)
    }
}

/// How to cut one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinSpec {
    /// Strictly increasing edges `e0 < e1 < .. < ek` giving `[e0,e1], (e1,e2], .., (e(k-1),ek]`.
    Edges(Vec<f64>),
    /// Disjoint integer category sets.
    Categories(Vec<Vec<i64>>),
}

impl BinSpec {
    pub fn conditions(&self) -> Result<Vec<Condition>> {
        match self {
            BinSpec::Edges(edges) => {
                if edges.len() < 2 {
                    return Err(Error::Bins("need at least two edges".into()));
                }
                if edges.iter().any(|e| e.is_nan()) {
                    return Err(Error::Bins("edges must not be NaN".into()));
                }
                if edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Bins(format!("edges must be strictly increasing: {edges:?}")));
                }
                Ok(edges
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Condition::Range { lo: w[0], hi: w[1], lo_closed: i == 0 })
                    .collect())
            }
            BinSpec::Categories(sets) => {
                if sets.is_empty() || sets.iter().any(Vec::is_empty) {
                    return Err(Error::Bins("category sets must be non-empty".into()));
                }
                let mut all: Vec<i64> = sets.iter().flatten().copied().collect();
                all.sort_unstable();
                if all.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Bins("category sets must be disjoint".into()));
                }
                Ok(sets.iter().map(|s| Condition::Set(s.clone())).collect())
            }
        }
    }
}

/// Bin specification for every tree feature, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BinConfig {
    pub features: Vec<(String, BinSpec)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroup {
    pub feature: String,
    pub column: Option<ColumnRef>,
    /// Requirement ids belonging to this feature.
    pub requirements: Range<usize>,
}

/// The requirement catalog: all requirements, grouped by feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    pub requirements: Vec<Requirement>,
    pub groups: Vec<FeatureGroup>,
}

impl Binning {
    pub fn new(schema: &FeatureSchema, bins: &BinConfig) -> Result<Self> {
        let mut b = Self::unresolved(bins)?;
        for g in &mut b.groups {
            let col = schema
                .column(&g.feature)
                .ok_or_else(|| Error::Bins(format!("feature {:?} is not a schema column", g.feature)))?;
            if !col.role.is_tree() {
                return Err(Error::Bins(format!("column {:?} is not tagged as a tree feature", g.feature)));
            }
            g.column = schema.resolve(&g.feature);
        }
        for c in schema.columns.iter().filter(|c| c.role.is_tree()) {
            if !b.groups.iter().any(|g| g.feature == c.name) {
                return Err(Error::Bins(format!("tree feature {:?} has no bin specification", c.name)));
            }
        }
        Ok(b)
    }

    /// Catalog without column resolution, for matrices built directly.
    pub fn unresolved(bins: &BinConfig) -> Result<Self> {
        let mut requirements = Vec::new();
        let mut groups = Vec::new();
        for (i, (feature, spec)) in bins.features.iter().enumerate() {
            if bins.features[..i].iter().any(|(f, _)| f == feature) {
                return Err(Error::Bins(format!("feature {feature:?} binned twice")));
            }
            let start = requirements.len();
            for condition in spec.conditions()? {
                requirements.push(Requirement { feature: feature.clone(), condition });
            }
            groups.push(FeatureGroup { feature: feature.clone(), column: None, requirements: start..requirements.len() });
        }
        Ok(Binning { requirements, groups })
    }

    pub fn n_requirements(&self) -> usize {
        self.requirements.len()
    }

    pub fn group_of(&self, req: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.requirements.contains(&req))
            .expect("requirement id out of range")
    }

    pub fn find(&self, text: &str) -> Option<usize> {
        self.requirements.iter().position(|r| r.to_string() == text)
    }

    /// Active requirement id per group for one observation.
    pub fn bin_observation(&self, obs: &ChoiceObservation) -> Result<Vec<usize>> {
        self.groups
            .iter()
            .map(|g| {
                let col = g
                    .column
                    .ok_or_else(|| Error::Bins(format!("feature {:?} is not bound to a column", g.feature)))?;
                let v = obs.value(col, 0);
                g.requirements.clone().find(|&r| self.requirements[r].condition.contains(v)).ok_or_else(|| {
                    Error::Observation {
                        obs_id: obs.obs_id,
                        message: format!("{} = {v} falls outside every bin", g.feature),
                    }
                })
            })
            .collect()
    }
}

/// Observation-by-requirement indicator matrix, stored as the active
/// requirement id of each feature group per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMatrix {
    pub binning: Binning,
    active: Vec<usize>,
    labels: Vec<bool>,
    /// Position of each row in the source dataset.
    pub obs_index: Vec<usize>,
}

impl BinnedMatrix {
    pub fn new(binning: Binning, rows: Vec<Vec<usize>>, labels: Vec<bool>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Invalid("row and label counts differ".into()));
        }
        let n_groups = binning.groups.len();
        let mut active = Vec::with_capacity(rows.len() * n_groups);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_groups {
                return Err(Error::Invalid(format!("row {i} has {} entries, expected {n_groups}", row.len())));
            }
            for (g, &r) in row.iter().enumerate() {
                if !binning.groups[g].requirements.contains(&r) {
                    return Err(Error::Invalid(format!("row {i}: requirement {r} is not in group {g}")));
                }
            }
            active.extend_from_slice(row);
        }
        let obs_index = (0..labels.len()).collect();
        Ok(BinnedMatrix { binning, active, labels, obs_index })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_groups(&self) -> usize {
        self.binning.groups.len()
    }

    pub fn n_requirements(&self) -> usize {
        self.binning.n_requirements()
    }

    /// Active requirement ids of a row, ascending (one per group).
    pub fn row(&self, i: usize) -> &[usize] {
        let g = self.n_groups();
        &self.active[i * g..(i + 1) * g]
    }

    pub fn is_set(&self, row: usize, req: usize) -> bool {
        let g = self.binning.group_of(req);
        self.row(row)[g] == req
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_negative(&self) -> usize {
        self.n_rows() - self.n_positive()
    }

    /// Same matrix with rows reordered by `perm` (row `i` of the result is row
    /// `perm[i]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<usize>> = perm.iter().map(|&i| self.row(i).to_vec()).collect();
        let labels = perm.iter().map(|&i| self.labels[i]).collect();
        let mut out = BinnedMatrix::new(self.binning.clone(), rows, labels).expect("permutation of a valid matrix");
        out.obs_index = perm.iter().map(|&i| self.obs_index[i]).collect();
        out
    }
}

/// Discretizes the rule-list estimation subsample. Labels mark rows whose
/// chosen alternative is the gated one.
pub fn discretize(dataset: &ChoiceDataset, bins: &BinConfig) -> Result<BinnedMatrix> {
    let binning = Binning::new(&dataset.schema, bins)?;
    let gated = dataset
        .schema
        .gated_id()
        .ok_or_else(|| Error::Schema("discretize needs a gated alternative for labels".into()))?;
    let mask = dataset.subsample_mask();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut obs_index = Vec::new();
    for (i, obs) in dataset.observations.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        rows.push(binning.bin_observation(obs)?);
        labels.push(obs.chosen == gated);
        obs_index.push(i);
    }
    let mut bm = BinnedMatrix::new(binning, rows, labels)?;
    bm.obs_index = obs_index;
    Ok(bm)
}

/// Quantile-based edges for a numeric person-level feature: `k` bins covering
/// the observed range, opened to `±inf` at the extremes. Tied quantiles
/// collapse, so fewer than `k` bins may come back.
pub fn default_bins(dataset: &ChoiceDataset, feature: &str, k: usize) -> Result<BinSpec> {
    if k == 0 {
        return Err(Error::Bins("k must be at least 1".into()));
    }
    let col = dataset
        .schema
        .resolve(feature)
        .ok_or_else(|| Error::Bins(format!("unknown feature {feature:?}")))?;
    let mut values: Vec<f64> = dataset.observations.iter().map(|o| o.value(col, 0)).collect();
    if values.is_empty() {
        return Err(Error::Bins(format!("no observations to bin {feature:?}")));
    }
    values.sort_by(f64::total_cmp);
    let max = *values.last().unwrap();
    let mut edges = vec![f64::NEG_INFINITY];
    for i in 1..k {
        let q = quantile_sorted(&values, i as f64 / k as f64);
        // an edge at or above the maximum would leave an empty top bin
        if q < max && q > *edges.last().unwrap() {
            edges.push(q);
        }
    }
    edges.push(f64::INFINITY);
    if k > 1 && edges.len() == 2 {
        log::warn!("feature {feature:?} is constant; using a single bin");
    }
    Ok(BinSpec::Edges(edges))
}
