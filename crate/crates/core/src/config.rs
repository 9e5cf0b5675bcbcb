//! JSON experiment configuration.
//!
//! Every section is optional; omitted fields take the documented defaults.
//! Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::datagen::{figure_eight_state, NoiseLevel, SplitSpec, SystemSetup};
use crate::dynamics::{BodySpec, SystemState};
use crate::error::{Error, Result};
use crate::experiments::{CaseConfig, DEFAULT_BREAKDOWN_GRID, DEFAULT_SEEDS, DEFAULT_THRESHOLD};
use crate::models::{default_hidden, layer_sizes, ModelKind};
use crate::neural::{Activation, MlpSpec};
use crate::optimizers::{FirstOrder, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelSection,
    /// Defaults to the schedule of the configured model kind.
    #[serde(default)]
    pub training: Option<TrainConfig>,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Search space of the `sweep` command.
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub masses: Vec<f64>,
    #[serde(alias = "G")]
    pub gravitational_constant: f64,
    pub spatial_dim: usize,
    /// Layout `[r1, v1, r2, v2, ...]`; the figure-eight when omitted.
    pub initial_state: Option<Vec<f64>>,
    pub t_span: (f64, f64),
    pub n_points: usize,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            masses: vec![1.0; 3],
            gravitational_constant: 1.0,
            spatial_dim: 3,
            initial_state: None,
            t_span: (0.0, 7.0),
            n_points: 70,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Full sizes including input and output; defaults per kind.
    pub layer_sizes: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Ude,
            layer_sizes: None,
            activation: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub threshold: f64,
    pub n_seeds: usize,
    pub breakdown_grid: Vec<f64>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            threshold: DEFAULT_THRESHOLD,
            n_seeds: DEFAULT_SEEDS,
            breakdown_grid: DEFAULT_BREAKDOWN_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
        }
    }
}

/// Candidate values per hyperparameter. Omitted lists default to the search
/// space of the configured model kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub optimizer: Option<Vec<FirstOrder>>,
    pub activation: Option<Vec<Activation>>,
    pub hidden_layers: Option<Vec<usize>>,
    pub units: Option<Vec<usize>>,
    pub lr: Option<Vec<f64>>,
    pub epochs: Option<Vec<usize>>,
    /// Second-stage iterations; 0 disables the stage.
    pub bfgs_iters: Option<Vec<usize>>,
}

/// A sweep section with every list filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub optimizer: Vec<FirstOrder>,
    pub activation: Vec<Activation>,
    pub hidden_layers: Vec<usize>,
    pub units: Vec<usize>,
    pub lr: Vec<f64>,
    pub epochs: Vec<usize>,
    pub bfgs_iters: Vec<usize>,
}

impl SearchSpace {
    pub fn default_for(kind: ModelKind) -> Self {
        let activation = vec![Activation::Relu, Activation::Tanh, Activation::Swish];
        let lr = vec![1e-4, 1e-3, 1e-2];
        match kind {
            ModelKind::NeuralOde => SearchSpace {
                optimizer: vec![FirstOrder::Adam],
                activation,
                hidden_layers: vec![2, 3, 4],
                units: vec![16, 32, 64, 128],
                lr,
                epochs: vec![100, 200, 500],
                bfgs_iters: vec![100, 200, 500],
            },
            ModelKind::Ude => SearchSpace {
                optimizer: vec![FirstOrder::Adam, FirstOrder::AdamW],
                activation,
                hidden_layers: vec![1, 2, 3],
                units: vec![16, 32, 64],
                lr,
                epochs: vec![500, 700, 1000],
                bfgs_iters: vec![0],
            },
        }
    }

    pub fn combinations(&self) -> usize {
        self.optimizer.len()
            * self.activation.len()
            * self.hidden_layers.len()
            * self.units.len()
            * self.lr.len()
            * self.epochs.len()
            * self.bfgs_iters.len()
    }
}

/// Everything a command needs, with defaults applied and validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub setup: SystemSetup,
    pub case: CaseConfig,
    pub breakdown_grid: Vec<f64>,
    pub output_dir: PathBuf,
    pub search_space: SearchSpace,
    /// The configuration with every default written out.
    pub echo: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies defaults and checks every section.
    pub fn resolve(&self) -> Result<Resolved> {
        let sys = &self.system;
        let bodies = BodySpec::new(sys.masses.clone(), sys.gravitational_constant, sys.spatial_dim)
            .map_err(as_config("system"))?;
        let initial_state = match &sys.initial_state {
            Some(v) => SystemState::new(v.clone(), sys.spatial_dim).map_err(as_config("system.initial_state"))?,
            None if bodies.n_bodies() == 3 => figure_eight_state(sys.spatial_dim),
            None => {
                return Err(Error::Config(format!(
                    "system.initial_state is required for {} bodies (the default is the three-body figure-eight)",
                    bodies.n_bodies()
                )))
            }
        };
        bodies.check_state(&initial_state).map_err(as_config("system.initial_state"))?;
        let setup = SystemSetup {
            bodies,
            initial_state,
            t_span: sys.t_span,
            n_points: sys.n_points,
        };
        setup.validate().map_err(as_config("system"))?;

        let noise = NoiseLevel::new(self.noise.fraction, self.noise.seed).map_err(as_config("noise"))?;
        let split = SplitSpec::new(self.split.train_fraction).map_err(as_config("split"))?;

        let kind = self.model.kind;
        let (hidden, default_act) = default_hidden(kind);
        let sizes = self
            .model
            .layer_sizes
            .clone()
            .unwrap_or_else(|| layer_sizes(kind, &setup.bodies, &hidden));
        let activation = self.model.activation.unwrap_or(default_act);
        let mlp = MlpSpec::new(sizes, activation, self.model.seed).map_err(as_config("model"))?;
        crate::models::Model::new(kind, mlp.clone(), setup.bodies.clone()).map_err(as_config("model"))?;

        let train_config = self.training.clone().unwrap_or_else(|| TrainConfig::default_for(kind));
        let case = CaseConfig {
            model_kind: kind,
            mlp,
            noise,
            split,
            train_config,
            plausibility_threshold: self.evaluation.threshold,
            n_seeds: self.evaluation.n_seeds,
        };
        case.validate()?;

        let search_space = resolve_space(self.sweep.clone().unwrap_or_default(), kind);
        let echo = ExperimentConfig {
            system: SystemSection {
                initial_state: Some(setup.initial_state.to_vec()),
                ..self.system.clone()
            },
            noise: self.noise.clone(),
            split: self.split.clone(),
            model: ModelSection {
                kind,
                layer_sizes: Some(case.mlp.layer_sizes.clone()),
                activation: Some(activation),
                seed: self.model.seed,
            },
            training: Some(case.train_config.clone()),
            evaluation: self.evaluation.clone(),
            output: self.output.clone(),
            sweep: self.sweep.clone(),
        };
        Ok(Resolved {
            setup,
            case,
            breakdown_grid: self.evaluation.breakdown_grid.clone(),
            output_dir: self.output.directory.clone(),
            search_space,
            echo,
        })
    }

    /// Single-line JSON used as the `config_echo` of output files.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn resolve_space(s: SweepSection, kind: ModelKind) -> SearchSpace {
    let d = SearchSpace::default_for(kind);
    SearchSpace {
        optimizer: s.optimizer.unwrap_or(d.optimizer),
        activation: s.activation.unwrap_or(d.activation),
        hidden_layers: s.hidden_layers.unwrap_or(d.hidden_layers),
        units: s.units.unwrap_or(d.units),
        lr: s.lr.unwrap_or(d.lr),
        epochs: s.epochs.unwrap_or(d.epochs),
        bfgs_iters: s.bfgs_iters.unwrap_or(d.bfgs_iters),
    }
}

fn as_config(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("{section}: {other}")),
    }
}
