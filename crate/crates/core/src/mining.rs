//! Candidate antecedents for rule lists.
//!
//! Conjunctions of requirements are mined with FP-growth separately on the
//! positive and negative label classes; a conjunction is kept when it reaches
//! the support threshold in either class. [`brute_force_mine`] enumerates the
//! same set exhaustively and serves as a test oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::binning::{BinnedMatrix, Binning};
use crate::error::{Error, Result};

/// Ordered set of requirement ids, at most one per feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Conjunction(Vec<usize>);

impl Conjunction {
    /// Sorts and validates against the catalog: ids exist, one per feature.
    pub fn new(mut requirements: Vec<usize>, binning: &Binning) -> Result<Self> {
        requirements.sort_unstable();
        if requirements.is_empty() {
            return Err(Error::Mining("a conjunction needs at least one requirement".into()));
        }
        let mut groups = BTreeSet::new();
        for &r in &requirements {
            if r >= binning.n_requirements() {
                return Err(Error::Mining(format!("unknown requirement id {r}")));
            }
            if !groups.insert(binning.group_of(r)) {
                return Err(Error::Mining("two requirements on the same feature".into()));
            }
        }
        Ok(Conjunction(requirements))
    }

    pub fn requirements(&self) -> &[usize] {
        &self.0
    }

    pub fn cardinality(&self) -> usize {
        self.0.len()
    }

    pub fn display<'a>(&'a self, binning: &'a Binning) -> ConjunctionDisplay<'a> {
        ConjunctionDisplay { conj: self, binning }
    }
}

pub struct ConjunctionDisplay<'a> {
    conj: &'a Conjunction,
    binning: &'a Binning,
}

impl fmt::Display for ConjunctionDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &r) in self.conj.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            write!(f, "{}", self.binning.requirements[r])?;
        }
        Ok(())
    }
}

/// True iff every requirement of `conj` is active in row `row` of `bm`.
pub fn matches(conj: &Conjunction, bm: &BinnedMatrix, row: usize) -> Result<bool> {
    if let Some(&bad) = conj.0.iter().find(|&&r| r >= bm.n_requirements()) {
        return Err(Error::Mining(format!("unknown requirement id {bad}")));
    }
    Ok(conj.0.iter().all(|&r| bm.is_set(row, r)))
}

/// Mined antecedents in canonical order (cardinality, then requirement ids).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub binning: Binning,
    pub conjunctions: Vec<Conjunction>,
    pub support_pos: Vec<usize>,
    pub support_neg: Vec<usize>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.conjunctions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conjunctions.is_empty()
    }

    /// `L_c`: number of candidates per cardinality.
    pub fn counts_by_cardinality(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for c in &self.conjunctions {
            *out.entry(c.cardinality()).or_insert(0) += 1;
        }
        out
    }

    pub fn index_of(&self, conj: &Conjunction) -> Option<usize> {
        self.conjunctions.binary_search_by(|c| canonical_cmp(c, conj)).ok()
    }

    fn from_counts(
        binning: Binning,
        found: BTreeMap<Conjunction, (usize, usize)>,
        n_pos: usize,
        n_neg: usize,
    ) -> Self {
        let mut entries: Vec<(Conjunction, (usize, usize))> = found.into_iter().collect();
        entries.sort_by(|a, b| canonical_cmp(&a.0, &b.0));
        let mut cs = CandidateSet {
            binning,
            conjunctions: Vec::with_capacity(entries.len()),
            support_pos: Vec::with_capacity(entries.len()),
            support_neg: Vec::with_capacity(entries.len()),
            n_pos,
            n_neg,
        };
        for (c, (p, n)) in entries {
            cs.conjunctions.push(c);
            cs.support_pos.push(p);
            cs.support_neg.push(n);
        }
        cs
    }

    /// Writes one line per conjunction: `support_pos<TAB>support_neg<TAB>conjunction`.
    /// `preamble` lines are emitted as `#` comments first.
    pub fn write<W: Write>(&self, mut w: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "# n_pos={} n_neg={}", self.n_pos, self.n_neg)?;
        writeln!(w, "support_pos\tsupport_neg\tconjunction")?;
        for (i, c) in self.conjunctions.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", self.support_pos[i], self.support_neg[i], c.display(&self.binning))?;
        }
        Ok(())
    }

    /// Parses the format produced by [`CandidateSet::write`], resolving
    /// requirement strings against `binning`.
    pub fn read<R: BufRead>(r: R, binning: &Binning) -> Result<Self> {
        let mut n_pos = None;
        let mut n_neg = None;
        let mut found = BTreeMap::new();
        let mut saw_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    if let Some(v) = kv.strip_prefix("n_pos=") {
                        n_pos = v.parse().ok();
                    } else if let Some(v) = kv.strip_prefix("n_neg=") {
                        n_neg = v.parse().ok();
                    }
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
            let mut parts = line.splitn(3, '\t');
            let (Some(p), Some(n), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected three tab-separated fields".into()));
            };
            let p: usize = p.parse().map_err(|_| bad(format!("bad support {p:?}")))?;
            let n: usize = n.parse().map_err(|_| bad(format!("bad support {n:?}")))?;
            let ids = text
                .split(" & ")
                .map(|req| binning.find(req).ok_or_else(|| bad(format!("unknown requirement {req:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let conj = Conjunction::new(ids, binning).map_err(|e| bad(e.to_string()))?;
            if found.insert(conj, (p, n)).is_some() {
                return Err(bad("duplicate conjunction".into()));
            }
        }
        let (Some(n_pos), Some(n_neg)) = (n_pos, n_neg) else {
            return Err(Error::Parse { line: 0, message: "missing n_pos/n_neg comment".into() });
        };
        Ok(CandidateSet::from_counts(binning.clone(), found, n_pos, n_neg))
    }
}

pub fn canonical_cmp(a: &Conjunction, b: &Conjunction) -> std::cmp::Ordering {
    a.cardinality().cmp(&b.cardinality()).then_with(|| a.0.cmp(&b.0))
}

/// Smallest count meeting a fractional support threshold over `n` rows.
pub fn min_count(threshold: f64, n: usize) -> usize {
    // slack absorbs products like 0.1 * 30 = 3.0000000000000004
    ((threshold * n as f64) - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningParams {
    pub max_cardinality: usize,
    pub min_support_pos: f64,
    pub min_support_neg: f64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams { max_cardinality: 2, min_support_pos: 0.10, min_support_neg: 0.10 }
    }
}

impl MiningParams {
    fn validate(&self, bm: &BinnedMatrix) -> Result<()> {
        if self.max_cardinality == 0 {
            return Err(Error::Mining("max cardinality must be at least 1".into()));
        }
        for t in [self.min_support_pos, self.min_support_neg] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Mining(format!("support thresholds must lie in (0, 1], got {t}")));
            }
        }
        if bm.n_rows() == 0 {
            return Err(Error::Mining("the binned matrix has no rows".into()));
        }
        if bm.n_positive() == 0 || bm.n_negative() == 0 {
            return Err(Error::Mining(format!(
                "both label classes must be non-empty (positive {}, negative {}); adjust the gated \
                 alternative or the estimation subsample",
                bm.n_positive(),
                bm.n_negative()
            )));
        }
        Ok(())
    }
}

/// FP-growth over both label classes, OR-combining the thresholds.
pub fn mine_conjunctions(bm: &BinnedMatrix, params: &MiningParams) -> Result<CandidateSet> {
    params.validate(bm)?;
    let (pos_rows, neg_rows): (Vec<usize>, Vec<usize>) = (0..bm.n_rows()).partition(|&i| bm.labels()[i]);
    let mut found: BTreeMap<Conjunction, (usize, usize)> = BTreeMap::new();

    let pos_min = min_count(params.min_support_pos, pos_rows.len()).max(1);
    let neg_min = min_count(params.min_support_neg, neg_rows.len()).max(1);
    let pos_sets = fp_growth(pos_rows.iter().map(|&i| bm.row(i)), pos_min, params.max_cardinality);
    let neg_sets = fp_growth(neg_rows.iter().map(|&i| bm.row(i)), neg_min, params.max_cardinality);

    for (items, count) in pos_sets {
        let neg = count_rows(bm, &neg_rows, &items);
        found.insert(Conjunction(items), (count, neg));
    }
    for (items, count) in neg_sets {
        let conj = Conjunction(items);
        if !found.contains_key(&conj) {
            let pos = count_rows(bm, &pos_rows, &conj.0);
            found.insert(conj, (pos, count));
        }
    }
    Ok(CandidateSet::from_counts(bm.binning.clone(), found, pos_rows.len(), neg_rows.len()))
}

fn count_rows(bm: &BinnedMatrix, rows: &[usize], items: &[usize]) -> usize {
    rows.iter().filter(|&&i| items.iter().all(|&r| bm.is_set(i, r))).count()
}

pub const BRUTE_FORCE_DEFAULT_CAP: usize = 200_000_000;

/// Exhaustive enumeration of every conjunction with at most one requirement
/// per feature, counting support by scanning. Refuses when
/// `#conjunctions × #rows` exceeds `cap`.
pub fn brute_force_mine(bm: &BinnedMatrix, params: &MiningParams, cap: usize) -> Result<CandidateSet> {
    params.validate(bm)?;
    let group_sizes: Vec<usize> = bm.binning.groups.iter().map(|g| g.requirements.len()).collect();
    let mut n_conj: usize = 0;
    for card in 1..=params.max_cardinality.min(group_sizes.len()) {
        n_conj = n_conj.saturating_add(count_products(&group_sizes, card));
    }
    if n_conj.saturating_mul(bm.n_rows()) > cap {
        return Err(Error::Mining(format!(
            "brute-force enumeration of {n_conj} conjunctions over {} rows exceeds the cap {cap}",
            bm.n_rows()
        )));
    }
    let pos_min = min_count(params.min_support_pos, bm.n_positive()).max(1);
    let neg_min = min_count(params.min_support_neg, bm.n_negative()).max(1);
    let mut found = BTreeMap::new();
    let mut stack: Vec<usize> = Vec::new();
    enumerate(bm, 0, params.max_cardinality, &mut stack, &mut |items| {
        let mut pos = 0;
        let mut neg = 0;
        for i in 0..bm.n_rows() {
            if items.iter().all(|&r| bm.is_set(i, r)) {
                if bm.labels()[i] {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        if pos >= pos_min || neg >= neg_min {
            found.insert(Conjunction(items.to_vec()), (pos, neg));
        }
    });
    Ok(CandidateSet::from_counts(bm.binning.clone(), found, bm.n_positive(), bm.n_negative()))
}

fn enumerate(bm: &BinnedMatrix, first_group: usize, max_card: usize, stack: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if stack.len() == max_card {
        return;
    }
    for g in first_group..bm.n_groups() {
        for r in bm.binning.groups[g].requirements.clone() {
            stack.push(r);
            visit(stack);
            enumerate(bm, g + 1, max_card, stack, visit);
            stack.pop();
        }
    }
}

// Σ over `card`-subsets of groups of the product of their sizes.
fn count_products(sizes: &[usize], card: usize) -> usize {
    // elementary symmetric polynomial e_card(sizes)
    let mut e = vec![0usize; card + 1];
    e[0] = 1;
    for &s in sizes {
        for k in (1..=card).rev() {
            e[k] = e[k].saturating_add(e[k - 1].saturating_mul(s));
        }
    }
    e[card]
}

struct FpNode {
    item: usize,
    count: usize,
    parent: Option<usize>,
    children: Vec<(usize, usize)>,
}

struct FpTree {
    nodes: Vec<FpNode>,
    /// item -> node indices, in insertion order
    header: HashMap<usize, Vec<usize>>,
    /// frequent items, most frequent first
    order: Vec<usize>,
    item_count: HashMap<usize, usize>,
}

impl FpTree {
    fn build<'a, I>(transactions: I, min_count: usize) -> Self
    where
        I: Iterator<Item = (&'a [usize], usize)> + Clone,
    {
        let mut item_count: HashMap<usize, usize> = HashMap::new();
        for (t, w) in transactions.clone() {
            for &item in t {
                *item_count.entry(item).or_insert(0) += w;
            }
        }
        item_count.retain(|_, c| *c >= min_count);
        let mut order: Vec<usize> = item_count.keys().copied().collect();
        order.sort_by(|a, b| item_count[b].cmp(&item_count[a]).then(a.cmp(b)));
        let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(i, &it)| (it, i)).collect();

        let mut tree = FpTree {
            nodes: vec![FpNode { item: usize::MAX, count: 0, parent: None, children: Vec::new() }],
            header: HashMap::new(),
            order,
            item_count,
        };
        let mut path = Vec::new();
        for (t, w) in transactions {
            path.clear();
            path.extend(t.iter().copied().filter(|i| rank.contains_key(i)));
            path.sort_by_key(|i| rank[i]);
            tree.insert(&path, w);
        }
        tree
    }

    fn insert(&mut self, path: &[usize], weight: usize) {
        let mut cur = 0;
        for &item in path {
            let next = match self.nodes[cur].children.iter().find(|(it, _)| *it == item) {
                Some(&(_, idx)) => idx,
                None => {
                    let idx = self.nodes.len();
                    self.nodes.push(FpNode { item, count: 0, parent: Some(cur), children: Vec::new() });
                    self.nodes[cur].children.push((item, idx));
                    self.header.entry(item).or_default().push(idx);
                    idx
                }
            };
            self.nodes[next].count += weight;
            cur = next;
        }
    }

    /// Prefix paths ending just above each occurrence of `item`.
    fn conditional_base(&self, item: usize) -> Vec<(Vec<usize>, usize)> {
        let mut base = Vec::new();
        for &idx in self.header.get(&item).map(Vec::as_slice).unwrap_or(&[]) {
            let mut path = Vec::new();
            let mut p = self.nodes[idx].parent;
            while let Some(pi) = p {
                if pi == 0 {
                    break;
                }
                path.push(self.nodes[pi].item);
                p = self.nodes[pi].parent;
            }
            if !path.is_empty() {
                path.reverse();
                base.push((path, self.nodes[idx].count));
            }
        }
        base
    }
}

fn fp_growth<'a, I>(rows: I, min_count: usize, max_card: usize) -> Vec<(Vec<usize>, usize)>
where
    I: Iterator<Item = &'a [usize]> + Clone,
{
    let tree = FpTree::build(rows.map(|r| (r, 1usize)), min_count);
    // conditional pattern bases of the top-level items are independent
    let mut out: Vec<(Vec<usize>, usize)> = tree
        .order
        .par_iter()
        .flat_map_iter(|&item| {
            let mut found = Vec::new();
            grow(&tree, item, &[], min_count, max_card, &mut found);
            found
        })
        .collect();
    out.sort();
    out
}

fn grow(tree: &FpTree, item: usize, suffix: &[usize], min_count: usize, max_card: usize, out: &mut Vec<(Vec<usize>, usize)>) {
    let mut pattern = suffix.to_vec();
    pattern.push(item);
    pattern.sort_unstable();
    out.push((pattern.clone(), tree.item_count[&item]));
    if pattern.len() >= max_card {
        return;
    }
    let base = tree.conditional_base(item);
    if base.is_empty() {
        return;
    }
    let cond = FpTree::build(base.iter().map(|(p, c)| (p.as_slice(), *c)), min_count);
    for &next in cond.order.iter().rev() {
        grow(&cond, next, &pattern, min_count, max_card, out);
    }
}
