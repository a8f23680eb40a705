//! Pipeline commands behind the `bmtree` binary.
//!
//! Each command reads the artifacts of the stages before it from the output
//! directory and writes its own. Every artifact records the SHA-256 of the
//! configuration sections it depends on, and a command refuses inputs whose
//! recorded hash differs from the current configuration.

pub mod config;
mod provenance;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use bmtree::binning::{discretize, Binning, BinnedMatrix};
use bmtree::choice::UtilityModel;
use bmtree::data::{read_dataset, write_dataset, ChoiceDataset};
use bmtree::forecast::{sweep, write_curve, ForecastSettings};
use bmtree::mining::{mine_conjunctions, CandidateSet};
use bmtree::rulelist::TreeSample;
use bmtree::sampler::sample_chains;
use bmtree::synth::{generate, planted_bike};
use bmtree::tree::{
    evidence_of_tree_model, fit_baseline, fit_trees, posterior_model_prob, predict, reweight_trees, select_trees,
    FitContext, ModelTree, TreePosterior,
};

pub use config::RunConfig;
use provenance::{Provenance, Stage};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const CANDIDATES_FILE: &str = "candidates.tsv";
pub const TREES_FILE: &str = "trees.tsv";
pub const FITS_DIR: &str = "fits";
pub const BASELINE_FILE: &str = "baseline.json";
pub const POSTERIOR_FILE: &str = "posterior.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FORECAST_TREE_FILE: &str = "forecast_tree.csv";
pub const FORECAST_MNL_FILE: &str = "forecast_mnl.csv";
pub const COMPARE_FILE: &str = "compare.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Stale(String),
    #[error("{0}")]
    Estimation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Stale(_) => 3,
            CliError::Estimation(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<bmtree::Error> for CliError {
    fn from(e: bmtree::Error) -> Self {
        if e.is_estimation() {
            CliError::Estimation(e.to_string())
        } else if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Mine,
    Sample,
    Fit,
    Compose,
    Predict,
    Forecast,
    Compare,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Synth,
        Command::Mine,
        Command::Sample,
        Command::Fit,
        Command::Compose,
        Command::Predict,
        Command::Forecast,
        Command::Compare,
    ];
}

pub fn run(command: Command, config: &RunConfig) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(&config.out).map_err(|e| io_error(&config.out, e))?;
    match command {
        Command::Synth => cmd_synth(config),
        Command::Mine => cmd_mine(config),
        Command::Sample => cmd_sample(config),
        Command::Fit => cmd_fit(config),
        Command::Compose => cmd_compose(config),
        Command::Predict => cmd_predict(config),
        Command::Forecast => cmd_forecast(config),
        Command::Compare => cmd_compare(config),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn open(path: &Path, hint: Command) -> Result<BufReader<fs::File>> {
    match fs::File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::Validation(format!(
            "{} is missing; run `bmtree {}` first",
            path.display(),
            format!("{hint:?}").to_lowercase()
        ))),
        Err(e) => Err(io_error(path, e)),
    }
}

/// A JSON artifact: provenance plus a payload.
#[derive(Debug, Serialize, Deserialize)]
struct Artifact<T> {
    provenance: Provenance,
    content: T,
}

fn write_json<T: Serialize>(path: &Path, provenance: Provenance, content: T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&Artifact { provenance, content }).expect("artifact serializes");
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(config: &RunConfig, path: &Path, stage: Stage) -> Result<T> {
    let reader = open(path, stage.command())?;
    let art: Artifact<T> = serde_json::from_reader(reader)
        .map_err(|e| CliError::Validation(format!("{}: malformed artifact: {e}", path.display())))?;
    provenance::check(config, path, stage, &art.provenance.config_sha256)?;
    Ok(art.content)
}

/// Reads a text artifact after checking the hash in its comment preamble.
fn read_text(config: &RunConfig, path: &Path, stage: Stage) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Validation(format!(
            "{} is missing; run `bmtree {}` first",
            path.display(),
            format!("{:?}", stage.command()).to_lowercase()
        )),
        _ => io_error(path, e),
    })?;
    let recorded = provenance::recorded_hash(&bytes)
        .ok_or_else(|| CliError::Stale(format!("{} carries no config hash", path.display())))?;
    provenance::check(config, path, stage, &recorded)?;
    Ok(bytes)
}

fn out(config: &RunConfig, name: &str) -> PathBuf {
    config.out.join(name)
}

fn load_data(config: &RunConfig) -> Result<ChoiceDataset> {
    match &config.data.path {
        Some(p) => Ok(read_dataset(open(p, Command::Synth)?, &config.schema)?),
        None => {
            let bytes = read_text(config, &out(config, DATA_FILE), Stage::Data)?;
            Ok(read_dataset(bytes.as_slice(), &config.schema)?)
        }
    }
}

fn load_candidates(config: &RunConfig) -> Result<CandidateSet> {
    let bytes = read_text(config, &out(config, CANDIDATES_FILE), Stage::Mine)?;
    let binning = Binning::new(&config.schema, &config.bins)?;
    Ok(CandidateSet::read(bytes.as_slice(), &binning)?)
}

fn load_sample(config: &RunConfig, cands: &CandidateSet) -> Result<TreeSample> {
    let bytes = read_text(config, &out(config, TREES_FILE), Stage::Sample)?;
    Ok(TreeSample::read(bytes.as_slice(), cands)?)
}

fn tree_file(i: usize) -> String {
    format!("tree_{i:03}.json")
}

fn load_fits(config: &RunConfig, cands: &CandidateSet) -> Result<(Vec<ModelTree>, ModelTree)> {
    let dir = out(config, FITS_DIR);
    let baseline: ModelTree = read_json(config, &dir.join(BASELINE_FILE), Stage::Fit)?;
    let mut trees = Vec::new();
    loop {
        let path = dir.join(tree_file(trees.len()));
        if !path.exists() {
            break;
        }
        let tree: ModelTree = read_json(config, &path, Stage::Fit)?;
        tree.check(cands)?;
        trees.push(tree);
    }
    if trees.is_empty() {
        return Err(CliError::Validation(format!("{} holds no tree fits; run `bmtree fit` first", dir.display())));
    }
    Ok((trees, baseline))
}

fn binned(config: &RunConfig, ds: &ChoiceDataset) -> Result<BinnedMatrix> {
    Ok(discretize(ds, &config.bins)?)
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    if config.data.path.is_some() {
        return Err(CliError::Validation("data.path is set; synth only writes the planted example".into()));
    }
    let spec = planted_bike(config.synth.n, config.seed);
    if spec.schema != config.schema {
        return Err(CliError::Validation("synth writes the planted schema; remove the schema override".into()));
    }
    let (ds, truth) = generate(&spec)?;
    let pre = Provenance::new(config, Stage::Data)?.preamble();
    let mut bytes = Vec::new();
    for line in &pre {
        bytes.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    write_dataset(&ds, &mut bytes)?;
    write_file(&out(config, DATA_FILE), &bytes)?;
    let mut bytes = Vec::new();
    truth.write(&ds, &mut bytes, &pre)?;
    write_file(&out(config, TRUTH_FILE), &bytes)?;
    log::info!("wrote {} observations", ds.len());
    Ok(())
}

fn cmd_mine(config: &RunConfig) -> Result<()> {
    let ds = load_data(config)?;
    let bm = binned(config, &ds)?;
    let cands = mine_conjunctions(&bm, &config.mining.params())?;
    if cands.is_empty() {
        return Err(CliError::Validation(format!(
            "no conjunction reaches the support thresholds (positive {}, negative {}); lower min_support_pos or min_support_neg",
            config.mining.min_support_pos, config.mining.min_support_neg
        )));
    }
    log::info!(
        "{} candidate conjunctions from {} positive and {} negative rows; by cardinality {:?}",
        cands.len(),
        bm.n_positive(),
        bm.n_negative(),
        cands.counts_by_cardinality()
    );
    let mut bytes = Vec::new();
    cands.write(&mut bytes, &Provenance::new(config, Stage::Mine)?.preamble())?;
    write_file(&out(config, CANDIDATES_FILE), &bytes)
}

fn cmd_sample(config: &RunConfig) -> Result<()> {
    let ds = load_data(config)?;
    let bm = binned(config, &ds)?;
    let cands = load_candidates(config)?;
    let settings = config.chains.settings(config.seed);
    let sample = sample_chains(&bm, &cands, &config.rule_prior, &settings, config.chains.chains)?;
    log::info!(
        "{} chains: acceptance rate {:.3}, {} distinct lists, mean length {:.2}",
        sample.diagnostics.chains,
        sample.diagnostics.acceptance_rate(),
        sample.distinct(),
        sample.mean_length()
    );
    if let Some(best) = sample.most_visited() {
        log::info!("most visited ({} visits): {:?}", best.count, best.rule_list.describe(&cands));
    }
    let mut bytes = Vec::new();
    sample.write(&mut bytes, &cands, &Provenance::new(config, Stage::Sample)?.preamble())?;
    write_file(&out(config, TREES_FILE), &bytes)
}

fn cmd_fit(config: &RunConfig) -> Result<()> {
    let ds = load_data(config)?;
    let cands = load_candidates(config)?;
    let sample = load_sample(config, &cands)?;
    let model = UtilityModel::compile(&config.utility, &config.schema)?;
    let base_model = UtilityModel::compile(&config.baseline_utility(), &config.schema)?;
    let ctx = FitContext {
        dataset: &ds,
        model: &model,
        prior: config.choice_prior,
        evidence: config.evidence,
        policy: config.consider,
    };
    let selected = select_trees(&sample, &config.selection)?;
    let trees = fit_trees(&ctx, &cands, &sample, &selected, config.seed)?;
    let baseline = fit_baseline(&FitContext { model: &base_model, ..ctx }, config.seed)?;
    let dir = out(config, FITS_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let prov = Provenance::new(config, Stage::Fit)?;
    for (i, tree) in trees.iter().enumerate() {
        write_json(&dir.join(tree_file(i)), prov.clone(), tree)?;
    }
    write_json(&dir.join(BASELINE_FILE), prov, &baseline)
}

fn cmd_compose(config: &RunConfig) -> Result<()> {
    let cands = load_candidates(config)?;
    let (trees, _) = load_fits(config, &cands)?;
    let tp = reweight_trees(trees)?;
    for (t, w) in tp.trees.iter().zip(&tp.weights) {
        log::info!("weight {w:.4}: {:?}", t.rules);
    }
    write_json(&out(config, POSTERIOR_FILE), Provenance::new(config, Stage::Posterior)?, &tp)
}

fn load_posterior(config: &RunConfig, cands: &CandidateSet) -> Result<TreePosterior> {
    let tp: TreePosterior = read_json(config, &out(config, POSTERIOR_FILE), Stage::Posterior)?;
    for t in &tp.trees {
        t.check(cands)?;
    }
    Ok(tp)
}

fn cmd_predict(config: &RunConfig) -> Result<()> {
    let cands = load_candidates(config)?;
    let tp = load_posterior(config, &cands)?;
    let model = UtilityModel::compile(&config.utility, &config.schema)?;
    let rows = match &config.predict.input {
        Some(p) => read_dataset(open(p, Command::Predict)?, &config.schema)?,
        None => load_data(config)?,
    };
    let mut bytes = Vec::new();
    for line in Provenance::new(config, Stage::Predict)?.preamble() {
        bytes.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    let mut header = vec!["obs_id".to_string()];
    header.extend(model.alternative_names.iter().map(|a| format!("p_{a}")));
    bytes.extend_from_slice(header.join(",").as_bytes());
    bytes.push(b'\n');
    for obs in &rows.observations {
        let p = predict(&tp, &model, &cands, obs)?;
        let mut line = obs.obs_id.to_string();
        for v in p {
            line.push_str(&format!(",{v}"));
        }
        line.push('\n');
        bytes.extend_from_slice(line.as_bytes());
    }
    write_file(&out(config, PREDICTIONS_FILE), &bytes)
}

fn cmd_forecast(config: &RunConfig) -> Result<()> {
    let ds = load_data(config)?;
    let cands = load_candidates(config)?;
    let tp = load_posterior(config, &cands)?;
    let (_, baseline) = load_fits(config, &cands)?;
    let spec = config.sweep.spec()?;
    let settings = ForecastSettings { max_draws: config.sweep.max_draws, seed: config.seed };
    let pre = Provenance::new(config, Stage::Forecast)?.preamble();
    let model = UtilityModel::compile(&config.utility, &config.schema)?;
    let curve = sweep(&tp, &model, &cands, &ds, &spec, &settings)?;
    let mut bytes = Vec::new();
    write_curve(&curve, &mut bytes, &pre)?;
    write_file(&out(config, FORECAST_TREE_FILE), &bytes)?;
    let base_model = UtilityModel::compile(&config.baseline_utility(), &config.schema)?;
    let curve = sweep(&TreePosterior::single(baseline), &base_model, &cands, &ds, &spec, &settings)?;
    let mut bytes = Vec::new();
    write_curve(&curve, &mut bytes, &pre)?;
    write_file(&out(config, FORECAST_MNL_FILE), &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub rules: Vec<String>,
    pub count: usize,
    pub log_evidence: f64,
    pub mc_standard_error: f64,
    pub ess: f64,
}

impl FitSummary {
    fn of(t: &ModelTree) -> Self {
        FitSummary {
            rules: t.rules.clone(),
            count: t.count,
            log_evidence: t.evidence.log_evidence,
            mc_standard_error: t.evidence.mc_standard_error,
            ess: t.evidence.ess,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub prior_tree: f64,
    pub log_evidence_tree: f64,
    pub log_evidence_mnl: f64,
    pub prob_tree: f64,
    pub prob_mnl: f64,
    pub trees: Vec<FitSummary>,
    pub baseline: FitSummary,
}

fn cmd_compare(config: &RunConfig) -> Result<()> {
    let cands = load_candidates(config)?;
    let (trees, baseline) = load_fits(config, &cands)?;
    let tree_ev = evidence_of_tree_model(&trees);
    let prob_tree = posterior_model_prob(tree_ev, baseline.evidence.log_evidence, 0.5);
    let report = Comparison {
        prior_tree: 0.5,
        log_evidence_tree: tree_ev,
        log_evidence_mnl: baseline.evidence.log_evidence,
        prob_tree,
        prob_mnl: 1.0 - prob_tree,
        trees: trees.iter().map(FitSummary::of).collect(),
        baseline: FitSummary::of(&baseline),
    };
    println!(
        "log evidence: model tree {:.3}, plain MNL {:.3}; posterior probability of the model tree {:.6}",
        tree_ev, report.log_evidence_mnl, prob_tree
    );
    write_json(&out(config, COMPARE_FILE), Provenance::new(config, Stage::Compare)?, &report)
}

/// Reads the comparison written by `compare`.
pub fn read_comparison(config: &RunConfig) -> Result<Comparison> {
    read_json(config, &out(config, COMPARE_FILE), Stage::Compare)
}
