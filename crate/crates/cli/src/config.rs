//! JSON experiment configs.
//!
//! A config names one sweep: a set of positional schemes (explicit `pes`
//! plus a `sigmas` shorthand for learnable tables) crossed with `seeds`.
//! Every field except `seeds` and `output_dir` feeds the config hash, so
//! adding seeds to a finished sweep resumes it instead of invalidating it.

use std::path::{Path, PathBuf};

use pelab::lst::{self, SplitSpec};
use pelab::nmar;
use pelab::pe::PeSpec;
use pelab::training::{OptimizerConfig, TrainOptions};
use pelab::transformer::{Activation, InputMode, MaskMode, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// What a sweep trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Latin-square probe classification.
    Lst { split: SplitSpec },
    /// Masked prediction on a freshly simulated network.
    Nmar {
        #[serde(default)]
        simulation: Simulation,
        #[serde(default = "default_mask_level")]
        mask_level: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default = "default_shuffles")]
        null_shuffles: usize,
    },
    /// Masked prediction on a dataset directory written by `ingest`.
    ExternalTimeseries {
        dataset: PathBuf,
        #[serde(default = "default_mask_level")]
        mask_level: f64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default = "default_shuffles")]
        null_shuffles: usize,
    },
}

fn default_mask_level() -> f64 {
    0.5
}

fn default_train_fraction() -> f64 {
    nmar::TRAIN_FRACTION
}

fn default_shuffles() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulation {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub system_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
}

fn default_steps() -> usize {
    nmar::DEFAULT_STEPS
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            steps: default_steps(),
            system_seed: 0,
            noise_seed: 0,
        }
    }
}

/// Architecture shared by every cell; context, input mode and output
/// width follow from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_mult: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_init_sd")]
    pub init_sd: f64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    /// Overrides the mask implied by the PE kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskMode>,
}

fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    1
}
fn default_ffn() -> usize {
    4
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_init_sd() -> f64 {
    0.02
}
fn default_eps() -> f64 {
    1e-5
}

impl ModelSettings {
    pub fn build(&self, context: usize, input: InputMode, output_dim: usize, pe: PeSpec) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            context,
            input,
            output_dim,
            pe,
            mask: self.mask,
            ffn_mult: self.ffn_mult,
            activation: self.activation,
            init_sd: self.init_sd,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// Epochs for LST, optimizer steps for masked prediction.
    pub budget: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: Experiment,
    pub model: ModelSettings,
    #[serde(default)]
    pub pes: Vec<PeSpec>,
    /// Shorthand: one learnable PE per σ, appended after `pes`.
    #[serde(default)]
    pub sigmas: Vec<f64>,
    pub optimizer: OptimizerConfig,
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Positional schemes in sweep order.
    pub fn cells(&self) -> Vec<PeSpec> {
        let mut out = self.pes.clone();
        out.extend(self.sigmas.iter().map(|&s| PeSpec::learnable(s)));
        out
    }

    /// Hex SHA-256 prefix over the canonical JSON, seeds and output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir = None;
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Context length, input mode and output width for an experiment whose
    /// token count is `tokens` (ignored for LST).
    pub fn model_config(&self, pe: PeSpec, tokens: usize) -> ModelConfig {
        match self.experiment {
            Experiment::Lst { .. } => self.model.build(lst::N_CELLS, InputMode::Tokens { vocab: lst::VOCAB_SIZE }, lst::N_SYMBOLS, pe),
            _ => self.model.build(tokens, InputMode::Scalar, 1, pe),
        }
    }

    pub fn train_options(&self, run_id: &str, seed: u64) -> TrainOptions {
        TrainOptions {
            run_id: run_id.to_string(),
            seed,
            batch_size: self.train.batch_size,
            budget: self.train.budget,
            eval_every: self.train.eval_every,
        }
    }

    /// Checks everything that can be checked without data. `tokens` is
    /// the masked-prediction context when already known.
    pub fn validate(&self, tokens: Option<usize>) -> CliResult<()> {
        let bad = |m: String| Err(CliError::validation(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("config name {:?} must be a non-empty single path component", self.name));
        }
        let cells = self.cells();
        if cells.is_empty() {
            return bad("the sweep has no positional schemes; set pes and/or sigmas".into());
        }
        if self.seeds.is_empty() {
            return bad("the sweep has no seeds".into());
        }
        let mut labels: Vec<String> = cells.iter().map(PeSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("positional scheme {} appears twice", w[0]));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds contain duplicates".into());
        }
        if self.train.batch_size == 0 || self.train.budget == 0 || self.train.eval_every == 0 {
            return bad("batch_size, budget and eval_every must be positive".into());
        }
        self.optimizer.validate()?;
        match &self.experiment {
            Experiment::Lst { split } => {
                if split.n_train == 0 || split.n_test == 0 {
                    return bad("the split needs train and test puzzles".into());
                }
            }
            Experiment::Nmar {
                simulation,
                mask_level,
                train_fraction,
                ..
            } => {
                if simulation.steps < 10 {
                    return bad(format!("simulation needs at least 10 steps, got {}", simulation.steps));
                }
                pelab::training::mask_count(*mask_level, nmar::N_NODES)?;
                check_fraction(*train_fraction)?;
            }
            Experiment::ExternalTimeseries {
                mask_level,
                train_fraction,
                ..
            } => {
                if let Some(t) = tokens {
                    pelab::training::mask_count(*mask_level, t)?;
                }
                check_fraction(*train_fraction)?;
            }
        }
        let tokens = match self.experiment {
            Experiment::Nmar { .. } => Some(nmar::N_NODES),
            _ => tokens,
        };
        if matches!(self.experiment, Experiment::Lst { .. }) || tokens.is_some() {
            for pe in cells {
                let label = pe.label();
                self.model_config(pe, tokens.unwrap_or(0))
                    .validate()
                    .map_err(|e| CliError::from(e).context(format!("scheme {label}")))?;
            }
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> CliResult<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(CliError::validation(format!("train_fraction must be in (0, 1), got {f}")))
    }
}

/// Parses `--seeds`: a count `N` (seeds `0..N`) or a comma list.
pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let s = s.trim();
    let bad = || CliError::validation(format!("--seeds expects a count or a comma-separated list, got {s:?}"));
    if s.contains(',') {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
    } else {
        let n: u64 = s.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((0..n).collect())
    }
}
