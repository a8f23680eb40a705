//! Run configuration. Every field has a default, so an empty file runs the
//! planted bicycle example with the standard priors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bmtree::binning::BinConfig;
use bmtree::choice::{PriorSpec, UtilitySpec, UtilityTerm};
use bmtree::data::FeatureSchema;
use bmtree::evidence::EvidenceSettings;
use bmtree::forecast::SweepSpec;
use bmtree::mining::MiningParams;
use bmtree::rulelist::RuleListPrior;
use bmtree::sampler::ChainSettings;
use bmtree::synth::planted_bike;
use bmtree::tree::{ConsiderPolicy, SelectionSettings};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the config file.
    pub out: PathBuf,
    pub data: DataSection,
    pub synth: SynthSection,
    pub schema: FeatureSchema,
    pub bins: BinConfig,
    pub utility: UtilitySpec,
    pub mining: MiningSection,
    pub rule_prior: RuleListPrior,
    pub chains: ChainSection,
    pub selection: SelectionSettings,
    pub choice_prior: PriorSpec,
    pub evidence: EvidenceSettings,
    pub consider: ConsiderPolicy,
    pub baseline: BaselineSection,
    pub sweep: SweepSection,
    pub predict: PredictSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format observations. Without it the pipeline reads the output of
    /// `synth`.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { n: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub max_cardinality: usize,
    pub min_support_pos: f64,
    pub min_support_neg: f64,
}

impl Default for MiningSection {
    fn default() -> Self {
        let p = MiningParams::default();
        MiningSection { max_cardinality: p.max_cardinality, min_support_pos: p.min_support_pos, min_support_neg: p.min_support_neg }
    }
}

impl MiningSection {
    pub fn params(&self) -> MiningParams {
        MiningParams {
            max_cardinality: self.max_cardinality,
            min_support_pos: self.min_support_pos,
            min_support_neg: self.min_support_neg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub chains: usize,
    pub iterations: usize,
    /// Defaults to a fifth of the iterations.
    pub burn_in: Option<usize>,
    pub thin: usize,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection { chains: 4, iterations: 20_000, burn_in: None, thin: 1 }
    }
}

impl ChainSection {
    pub fn settings(&self, seed: u64) -> ChainSettings {
        let mut s = ChainSettings::new(self.iterations, seed);
        if let Some(b) = self.burn_in {
            s.burn_in = b;
        }
        s.thin = self.thin;
        s
    }
}

/// Terms added to the plain MNL so it can respond to the swept variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub alternative: Option<String>,
    pub terms: Vec<UtilityTerm>,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            alternative: Some("bike".into()),
            terms: vec![UtilityTerm { coefficient: "bike_lanes".into(), column: "bike_lanes".into() }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub variable: String,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub clamp: Option<f64>,
    /// Draws kept per tree when forming credible bounds.
    pub max_draws: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { variable: "bike_lanes".into(), start: 0.0, stop: 0.7, step: 0.01, clamp: None, max_draws: 200 }
    }
}

impl SweepSection {
    pub fn spec(&self) -> Result<SweepSpec, CliError> {
        Ok(SweepSpec {
            variable: self.variable.clone(),
            grid: SweepSpec::even_grid(self.start, self.stop, self.step)?,
            clamp: self.clamp,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Rows to score; defaults to the estimation data.
    pub input: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = planted_bike(0, 0);
        RunConfig {
            seed: 1,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            synth: SynthSection::default(),
            schema: preset.schema,
            bins: preset.bins,
            utility: preset.utility,
            mining: MiningSection::default(),
            rule_prior: RuleListPrior::default(),
            chains: ChainSection::default(),
            selection: SelectionSettings::default(),
            choice_prior: PriorSpec::default(),
            evidence: EvidenceSettings::default(),
            consider: ConsiderPolicy::default(),
            baseline: BaselineSection::default(),
            sweep: SweepSection::default(),
            predict: PredictSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        self.out = join(&self.out);
        self.data.path = self.data.path.as_ref().map(join);
        self.predict.input = self.predict.input.as_ref().map(join);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for p in [&self.data.path, &self.predict.input].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Validation(format!("{} does not exist", p.display())));
            }
        }
        self.schema.validate()?;
        self.rule_prior.validate()?;
        self.choice_prior.validate()?;
        self.evidence.validate()?;
        if self.chains.chains == 0 {
            return Err(CliError::Validation("chains must be at least 1".into()));
        }
        self.sweep.spec()?;
        Ok(())
    }

    /// The utility of the plain MNL baseline.
    pub fn baseline_utility(&self) -> UtilitySpec {
        match &self.baseline.alternative {
            Some(alt) if !self.baseline.terms.is_empty() => self.utility.with_terms(alt, &self.baseline.terms),
            _ => self.utility.clone(),
        }
    }
}
