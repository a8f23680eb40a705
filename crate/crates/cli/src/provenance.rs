//! Configuration hashes recorded in every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Command, RunConfig, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Data,
    Mine,
    Sample,
    Fit,
    Posterior,
    Predict,
    Forecast,
    Compare,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Mine => "mine",
            Stage::Sample => "sample",
            Stage::Fit => "fit",
            Stage::Posterior => "compose",
            Stage::Predict => "predict",
            Stage::Forecast => "forecast",
            Stage::Compare => "compare",
        }
    }

    /// The command that writes this stage's artifacts.
    pub(crate) fn command(self) -> Command {
        match self {
            Stage::Data => Command::Synth,
            Stage::Mine => Command::Mine,
            Stage::Sample => Command::Sample,
            Stage::Fit => Command::Fit,
            Stage::Posterior => Command::Compose,
            Stage::Predict => Command::Predict,
            Stage::Forecast => Command::Forecast,
            Stage::Compare => Command::Compare,
        }
    }

    fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Data => None,
            Stage::Mine => Some(Stage::Data),
            Stage::Sample => Some(Stage::Mine),
            Stage::Fit => Some(Stage::Sample),
            Stage::Posterior | Stage::Compare => Some(Stage::Fit),
            Stage::Predict | Stage::Forecast => Some(Stage::Posterior),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Provenance {
    pub version: String,
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub(crate) fn new(config: &RunConfig, stage: Stage) -> Result<Self, CliError> {
        Ok(Provenance {
            version: format!("bmtree {VERSION}"),
            stage: stage.name().into(),
            config_sha256: stage_hash(config, stage)?,
            seed: config.seed,
        })
    }

    pub(crate) fn preamble(&self) -> Vec<String> {
        vec![
            self.version.clone(),
            format!("stage={} config_sha256={} seed={}", self.stage, self.config_sha256, self.seed),
        ]
    }
}

fn section<T: Serialize>(h: &mut Sha256, name: &str, value: &T) {
    h.update(name.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(value).expect("config section serializes"));
    h.update([0]);
}

fn file(h: &mut Sha256, name: &str, path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    h.update(name.as_bytes());
    h.update([0]);
    h.update(Sha256::digest(&bytes));
    Ok(())
}

/// Feeds the configuration an artifact of `stage` depends on, upstream first.
fn feed(h: &mut Sha256, config: &RunConfig, stage: Stage) -> Result<(), CliError> {
    if let Some(up) = stage.upstream() {
        feed(h, config, up)?;
    }
    match stage {
        Stage::Data => {
            match &config.data.path {
                Some(p) => file(h, "data.file", p)?,
                None => {
                    section(h, "synth", &config.synth);
                    section(h, "seed", &config.seed);
                }
            }
            section(h, "schema", &config.schema);
        }
        Stage::Mine => {
            section(h, "bins", &config.bins);
            section(h, "mining", &config.mining);
        }
        Stage::Sample => {
            section(h, "rule_prior", &config.rule_prior);
            section(h, "chains", &config.chains);
            section(h, "seed", &config.seed);
        }
        Stage::Fit => {
            section(h, "utility", &config.utility);
            section(h, "selection", &config.selection);
            section(h, "choice_prior", &config.choice_prior);
            section(h, "evidence", &config.evidence);
            section(h, "consider", &config.consider);
            section(h, "baseline", &config.baseline);
        }
        Stage::Predict => {
            if let Some(p) = &config.predict.input {
                file(h, "predict.input", p)?;
            }
        }
        Stage::Forecast => section(h, "sweep", &config.sweep),
        Stage::Posterior | Stage::Compare => {}
    }
    Ok(())
}

pub(crate) fn stage_hash(config: &RunConfig, stage: Stage) -> Result<String, CliError> {
    let mut h = Sha256::new();
    feed(&mut h, config, stage)?;
    h.update(stage.name().as_bytes());
    Ok(hex::encode(h.finalize()))
}

/// The hash in the `#` comment preamble of a text artifact.
pub(crate) fn recorded_hash(bytes: &[u8]) -> Option<String> {
    let text = std::str::from_utf8(bytes).ok()?;
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .find_map(|tok| tok.strip_prefix("config_sha256=").map(str::to_string))
}

pub(crate) fn check(config: &RunConfig, path: &Path, stage: Stage, recorded: &str) -> Result<(), CliError> {
    let expected = stage_hash(config, stage)?;
    if recorded == expected {
        Ok(())
    } else {
        Err(CliError::Stale(format!(
            "{} was produced under a different configuration (recorded hash {}, expected {}); rerun `bmtree {}`",
            path.display(),
            recorded,
            expected,
            format!("{:?}", stage.command()).to_lowercase()
        )))
    }
}
