//! Synthetic choice data with a planted rule list and planted logit.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{BinConfig, BinSpec, Binning};
use crate::choice::{softmax, utilities, AlternativeUtility, ChoiceParams, UtilityModel, UtilitySpec, UtilityTerm};
use crate::data::{Alternative, ChoiceDataset, ChoiceObservation, Column, ColumnLevel, ColumnRole, ColumnRef, FeatureSchema};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    Uniform { lo: f64, hi: f64 },
    /// Integers `lo..=hi`, equally likely.
    Integers { lo: i64, hi: i64 },
    /// Picks one of the bins cut by `edges` (capped at `cap`) uniformly, then
    /// a uniform value inside it, so every bin has the same mass.
    Bins { edges: Vec<f64>, cap: f64 },
}

impl Sampler {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Sampler::Uniform { lo, hi } => lo <= hi && lo.is_finite() && hi.is_finite(),
            Sampler::Integers { lo, hi } => lo <= hi,
            Sampler::Bins { edges, cap } => {
                edges.len() >= 2 && edges[0].is_finite() && *cap > edges[0] && cap.is_finite() && edges.windows(2).all(|w| w[0] < w[1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid sampler {self:?}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Sampler::Integers { lo, hi } => rng.random_range(*lo..=*hi) as f64,
            Sampler::Bins { edges, cap } => {
                let cuts: Vec<f64> = edges.iter().copied().filter(|&e| e < *cap).chain(std::iter::once(*cap)).collect();
                let b = rng.random_range(0..cuts.len() - 1);
                let (lo, hi) = (cuts[b], cuts[b + 1]);
                // open at the lower edge so values land inside the bin
                hi - (hi - lo) * rng.random::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub schema: FeatureSchema,
    pub bins: BinConfig,
    pub utility: UtilitySpec,
    /// Antecedents as requirement texts such as `"distance:(3,inf)"`.
    pub planted: Vec<Vec<String>>,
    /// Per node, the last being the default node.
    pub consider: Vec<bool>,
    /// Gated constant per node (ignored where the node winnows).
    pub node_constants: Vec<f64>,
    /// Coefficients by name, covering every name of the compiled utility.
    pub beta: Vec<(String, f64)>,
    pub person_features: Vec<(String, Sampler)>,
    /// Alternative-level columns: one sampler per alternative.
    pub alternative_features: Vec<(String, Vec<Sampler>)>,
    /// Probability that each alternative is available.
    pub availability: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rules: Vec<String>,
    pub nodes: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

const BLOCK: usize = 512;

struct Compiled {
    model: UtilityModel,
    antecedents: Vec<Vec<usize>>,
    binning: Binning,
    params: ChoiceParams,
    person: Vec<(usize, Sampler)>,
    alt: Vec<(usize, Vec<Sampler>)>,
}

impl DgpSpec {
    fn compile(&self) -> Result<Compiled> {
        self.schema.validate()?;
        let binning = Binning::new(&self.schema, &self.bins)?;
        let model = UtilityModel::compile(&self.utility, &self.schema)?;
        let n_nodes = self.planted.len() + 1;
        if self.consider.len() != n_nodes || self.node_constants.len() != n_nodes {
            return Err(Error::Invalid(format!("expected {n_nodes} consider flags and node constants")));
        }
        let antecedents = self
            .planted
            .iter()
            .map(|a| {
                a.iter()
                    .map(|t| binning.find(t).ok_or_else(|| Error::Invalid(format!("planted requirement {t:?} is not a bin"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = model
            .beta_names
            .iter()
            .map(|name| {
                self.beta
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|b| b.1)
                    .ok_or_else(|| Error::Invalid(format!("no true value for coefficient {name:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        // node constants ride on the deviates with unit spread and zero mean
        let eta = self.node_constants.iter().zip(&self.consider).filter(|(_, &c)| c).map(|(v, _)| *v).collect();
        let params = ChoiceParams { beta, asc_gated: 0.0, log_sigma: 0.0, eta };
        if params.beta.iter().chain(&params.eta).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("true parameters must be finite".into()));
        }
        let n_alt = self.schema.n_alternatives();
        if self.availability.len() != n_alt || self.availability.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("one availability probability in [0,1] per alternative".into()));
        }
        let mut person = Vec::new();
        for c in self.schema.person_columns() {
            let (_, s) = self
                .person_features
                .iter()
                .find(|(n, _)| n == &c.name)
                .ok_or_else(|| Error::Invalid(format!("no sampler for column {:?}", c.name)))?;
            s.validate()?;
            let Some(ColumnRef::Person(j)) = self.schema.resolve(&c.name) else { unreachable!() };
            person.push((j, s.clone()));
        }
        let mut alt = Vec::new();
        for c in self.schema.alt_columns() {
            let (_, s) = self
                .alternative_features
                .iter()
                .find(|(n, _)| n == &c.name)
                .ok_or_else(|| Error::Invalid(format!("no sampler for column {:?}", c.name)))?;
            if s.len() != n_alt {
                return Err(Error::Invalid(format!("column {:?} needs one sampler per alternative", c.name)));
            }
            for x in s {
                x.validate()?;
            }
            let Some(ColumnRef::Alt(j)) = self.schema.resolve(&c.name) else { unreachable!() };
            alt.push((j, s.clone()));
        }
        Ok(Compiled { model, antecedents, binning, params, person, alt })
    }
}

pub fn generate(spec: &DgpSpec) -> Result<(ChoiceDataset, GroundTruth)> {
    let c = spec.compile()?;
    let n_alt = spec.schema.n_alternatives();
    let n_person = spec.schema.person_columns().count();
    let n_altcol = spec.schema.alt_columns().count();
    let n_blocks = spec.n.div_ceil(BLOCK);
    let blocks: Vec<Vec<(ChoiceObservation, usize, Vec<f64>)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(b as u64);
            let rows = BLOCK.min(spec.n - b * BLOCK);
            (0..rows)
                .map(|r| {
                    let mut person = vec![0.0; n_person];
                    for (j, s) in &c.person {
                        person[*j] = s.sample(&mut rng);
                    }
                    let mut attrs = vec![vec![0.0; n_altcol]; n_alt];
                    for (j, samplers) in &c.alt {
                        for (a, s) in samplers.iter().enumerate() {
                            attrs[a][*j] = s.sample(&mut rng);
                        }
                    }
                    let mut available: Vec<bool> = spec.availability.iter().map(|&p| rng.random::<f64>() < p).collect();
                    if !available.iter().any(|&a| a) {
                        available[0] = true;
                    }
                    let mut obs = ChoiceObservation {
                        obs_id: (b * BLOCK + r + 1) as i64,
                        chosen: 0,
                        available,
                        alt_attributes: attrs,
                        person_attributes: person,
                    };
                    let row = c.binning.bin_observation(&obs)?;
                    let node = c
                        .antecedents
                        .iter()
                        .position(|a| a.iter().all(|req| row.binary_search(req).is_ok()))
                        .unwrap_or(c.antecedents.len());
                    let p = softmax(&utilities(&c.model, &c.params, &obs, node, &spec.consider)?);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = p.iter().rposition(|&x| x > 0.0).unwrap_or(0);
                    for (a, &pa) in p.iter().enumerate() {
                        acc += pa;
                        if u < acc && pa > 0.0 {
                            chosen = a;
                            break;
                        }
                    }
                    obs.chosen = chosen;
                    for (a, row) in obs.alt_attributes.iter_mut().enumerate() {
                        if !obs.available[a] {
                            row.iter_mut().for_each(|v| *v = f64::NAN);
                        }
                    }
                    Ok((obs, node, p))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut observations = Vec::with_capacity(spec.n);
    let mut nodes = Vec::with_capacity(spec.n);
    let mut probabilities = Vec::with_capacity(spec.n);
    for (o, n, p) in blocks.into_iter().flatten() {
        observations.push(o);
        nodes.push(n);
        probabilities.push(p);
    }
    let rules = spec.planted.iter().map(|a| a.join(" & ")).collect();
    Ok((ChoiceDataset::new(spec.schema.clone(), observations)?, GroundTruth { rules, nodes, probabilities }))
}

impl GroundTruth {
    /// `obs_id,node,p_<alt>...` with the planted rules as comments.
    pub fn write<W: Write>(&self, ds: &ChoiceDataset, mut w: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        for (i, r) in self.rules.iter().enumerate() {
            writeln!(w, "# rule {i}: {r}")?;
        }
        write!(w, "obs_id,node")?;
        for a in &ds.schema.alternatives {
            write!(w, ",p_{}", a.name)?;
        }
        writeln!(w)?;
        for ((o, n), p) in ds.observations.iter().zip(&self.nodes).zip(&self.probabilities) {
            write!(w, "{},{n}", o.obs_id)?;
            for v in p {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn column(name: &str, unit: &str, level: ColumnLevel, role: ColumnRole) -> Column {
    Column { name: name.into(), unit: unit.into(), level, role }
}

fn term(c: &str) -> UtilityTerm {
    UtilityTerm { coefficient: c.into(), column: c.into() }
}

/// Bike consideration gated by a three-rule list:
///
/// 1. `distance:(3,inf)`: bike winnowed
/// 2. `bike_lanes:(0.11,inf) & kids:[0,1]`: bike considered, constant 1.0
/// 3. `slope:(0.03,inf)`: bike winnowed
/// 4. otherwise: bike considered, constant -1.5
///
/// Travel time enters every utility with one shared coefficient. The tree
/// features do not enter the utilities, so the only structure tying them to
/// the bike label is the planted list.
pub fn planted_bike(n: usize, seed: u64) -> DgpSpec {
    let alts = ["drive", "transit", "walk", "bike"];
    let schema = FeatureSchema {
        alternatives: alts.iter().enumerate().map(|(id, a)| Alternative { id, name: a.to_string(), always_available: id == 0 }).collect(),
        gated: Some("bike".into()),
        columns: vec![
            column("time", "min", ColumnLevel::Alternative, ColumnRole::Utility),
            column("distance", "mi", ColumnLevel::Person, ColumnRole::Tree),
            column("kids", "count", ColumnLevel::Person, ColumnRole::Tree),
            column("bike_lanes", "share", ColumnLevel::Person, ColumnRole::Both),
            column("slope", "grade", ColumnLevel::Person, ColumnRole::Tree),
        ],
        subsample: None,
    };
    let inf = f64::INFINITY;
    let bins = BinConfig {
        features: vec![
            ("distance".into(), BinSpec::Edges(vec![0.0, 1.5, 3.0, inf])),
            ("kids".into(), BinSpec::Edges(vec![0.0, 1.0, 2.0, inf])),
            ("bike_lanes".into(), BinSpec::Edges(vec![0.0, 0.11, inf])),
            ("slope".into(), BinSpec::Edges(vec![0.0, 0.03, inf])),
        ],
    };
    let utility = UtilitySpec {
        alternatives: alts
            .iter()
            .enumerate()
            .map(|(i, a)| AlternativeUtility { alternative: a.to_string(), constant: i > 0, terms: vec![term("time")] })
            .collect(),
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    DgpSpec {
        schema,
        bins,
        utility,
        planted: vec![s(&["distance:(3,inf)"]), s(&["kids:[0,1]", "bike_lanes:(0.11,inf)"]), s(&["slope:(0.03,inf)"])],
        consider: vec![false, true, false, true],
        node_constants: vec![0.0, 1.0, 0.0, -1.5],
        beta: vec![("time".into(), -0.04), ("asc_transit".into(), -0.5), ("asc_walk".into(), -0.5)],
        person_features: vec![
            ("distance".into(), Sampler::Bins { edges: vec![0.0, 1.5, 3.0, inf], cap: 6.0 }),
            ("kids".into(), Sampler::Integers { lo: 0, hi: 4 }),
            ("bike_lanes".into(), Sampler::Bins { edges: vec![0.0, 0.11, inf], cap: 0.7 }),
            ("slope".into(), Sampler::Bins { edges: vec![0.0, 0.03, inf], cap: 0.08 }),
        ],
        alternative_features: vec![(
            "time".into(),
            vec![
                Sampler::Uniform { lo: 5.0, hi: 40.0 },
                Sampler::Uniform { lo: 10.0, hi: 60.0 },
                Sampler::Uniform { lo: 10.0, hi: 90.0 },
                Sampler::Uniform { lo: 5.0, hi: 50.0 },
            ],
        )],
        availability: vec![1.0, 0.8, 1.0, 1.0],
        n,
        seed,
    }
}
