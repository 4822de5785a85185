//! Experiment configuration: a TOML file with model / training / data
//! sections, plus named presets for the built-in experiments.

use serde::{Deserialize, Serialize};
use stiffnode::models::{AeSpec, ModelConfig, NonlinSpec};
use stiffnode::problems::{ks::KsOptions, ProblemOptions, RobertsonOptions, WeaklyNonlinearOptions};
use stiffnode::training::{IntegratorKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub mu: f64,
    pub nonlin: NonlinSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<AeSpec>,
    pub init_scale: f64,
    pub hurwitz_init_diag: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Dataset file consumed by train/eval and produced by gen-data.
    pub path: String,
    pub n_traj: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// One of: weakly-nonlinear, robertson, ks.
    pub problem: String,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub data: DataSection,
}

impl ExperimentConfig {
    pub fn state_dim(&self) -> Result<usize, String> {
        problem_state_dim(&self.problem)
    }

    pub fn model_config(&self) -> Result<ModelConfig, String> {
        Ok(ModelConfig {
            state_dim: self.state_dim()?,
            latent_dim: self.model.latent_dim,
            mu: self.model.mu,
            nonlin: self.model.nonlin.clone(),
            autoencoder: self.model.autoencoder.clone(),
            init_scale: self.model.init_scale,
            hurwitz_init_diag: self.model.hurwitz_init_diag,
            seed: self.model.seed,
        })
    }

    /// Apply the STIFFNODE_SEED environment override to every seed field.
    pub fn apply_seed_override(&mut self) {
        if let Ok(s) = std::env::var("STIFFNODE_SEED") {
            if let Ok(seed) = s.parse::<u64>() {
                self.model.seed = seed;
                self.training.seed = seed;
                self.data.seed = seed;
            }
        }
    }

}

pub fn problem_state_dim(problem: &str) -> Result<usize, String> {
    match problem {
        "weakly-nonlinear" => Ok(2),
        "robertson" => Ok(3),
        "ks" => Ok(64),
        other => Err(format!("unknown problem: {other} (expected weakly-nonlinear, robertson or ks)")),
    }
}

pub fn default_problem_options(problem: &str, epsilon: Option<f64>) -> Result<ProblemOptions, String> {
    match problem {
        "weakly-nonlinear" => Ok(ProblemOptions::WeaklyNonlinear(WeaklyNonlinearOptions {
            epsilon: epsilon.unwrap_or(1.0),
            ..Default::default()
        })),
        "robertson" => Ok(ProblemOptions::Robertson(RobertsonOptions::default())),
        "ks" => Ok(ProblemOptions::Ks(KsOptions::default())),
        other => Err(format!("unknown problem: {other}")),
    }
}

// ---- presets -------------------------------------------------------------------

pub const PRESET_NAMES: &[&str] = &[
    "weakly-nonlinear-eps0",
    "weakly-nonlinear-eps1",
    "robertson",
    "robertson-ae",
    "ks-20",
    "ks-7",
    "ablation",
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let cfg = match name {
        "weakly-nonlinear-eps0" => weakly_preset(0.0),
        "weakly-nonlinear-eps1" => weakly_preset(1.0),
        "robertson" => robertson_preset(false),
        "robertson-ae" => robertson_preset(true),
        "ks-20" => ks_preset(20),
        "ks-7" => ks_preset(7),
        "ablation" => ablation_preset(),
        _ => return None,
    };
    Some(cfg)
}

fn weakly_preset(epsilon: f64) -> ExperimentConfig {
    let nonlin = if epsilon == 0.0 {
        NonlinSpec::Bilinear { rank: 2 }
    } else {
        NonlinSpec::Lipschitz { lipschitz: 2.0, width: 100, layers: 2 }
    };
    ExperimentConfig {
        problem: "weakly-nonlinear".to_string(),
        model: ModelSection {
            latent_dim: 2,
            mu: 0.0,
            nonlin,
            autoencoder: None,
            init_scale: 0.1,
            hurwitz_init_diag: 0.7,
            seed: 0,
        },
        training: TrainConfig {
            learning_rate: 0.01,
            lr_decay: 1.0,
            decay_every: 1,
            batch_size: 1000,
            iterations: 1000,
            integrator: IntegratorKind::Etd1,
            expmv_tol: 1e-10,
            expmv_s_rule_c: 1.0,
            seed: 0,
            train_indices: Some(if epsilon == 0.0 {
                vec![0, 50]
            } else {
                vec![0, 10, 20, 30, 40, 50]
            }),
            chunk_size: 500,
        },
        data: DataSection {
            path: format!("weakly-nonlinear-eps{epsilon}.ds"),
            n_traj: 1000,
            noise: 0.0,
            seed: 7,
            epsilon: Some(epsilon),
        },
    }
}

fn robertson_preset(autoencoder: bool) -> ExperimentConfig {
    ExperimentConfig {
        problem: "robertson".to_string(),
        model: ModelSection {
            latent_dim: 3,
            mu: 0.0,
            nonlin: NonlinSpec::Lipschitz { lipschitz: 1.0, width: 100, layers: 2 },
            autoencoder: if autoencoder { Some(AeSpec { hidden: 100, layers: 2 }) } else { None },
            init_scale: 0.1,
            hurwitz_init_diag: 0.02,
            seed: 0,
        },
        training: TrainConfig {
            learning_rate: 0.01,
            lr_decay: 0.99,
            decay_every: 1,
            batch_size: 100,
            iterations: 10_000,
            integrator: IntegratorKind::Etd1,
            expmv_tol: 1e-8,
            expmv_s_rule_c: 1.0,
            seed: 0,
            train_indices: None,
            chunk_size: 100,
        },
        data: DataSection {
            path: "robertson.ds".to_string(),
            n_traj: 1000,
            noise: 0.0,
            seed: 7,
            epsilon: None,
        },
    }
}

fn ks_preset(latent: usize) -> ExperimentConfig {
    ExperimentConfig {
        problem: "ks".to_string(),
        model: ModelSection {
            latent_dim: latent,
            mu: 0.3,
            nonlin: NonlinSpec::Lipschitz { lipschitz: 1.0, width: 200, layers: 2 },
            autoencoder: Some(AeSpec { hidden: 200, layers: 2 }),
            init_scale: 0.1,
            hurwitz_init_diag: 0.1,
            seed: 0,
        },
        training: TrainConfig {
            learning_rate: 0.001,
            lr_decay: 0.99,
            decay_every: 1,
            batch_size: 2000,
            iterations: 1500,
            integrator: IntegratorKind::Etd1,
            expmv_tol: 1e-6,
            expmv_s_rule_c: 1.0,
            seed: 0,
            train_indices: None,
            chunk_size: 250,
        },
        data: DataSection {
            path: "ks.ds".to_string(),
            n_traj: 1,
            noise: 0.0,
            seed: 7,
            epsilon: None,
        },
    }
}

fn ablation_preset() -> ExperimentConfig {
    let mut cfg = robertson_preset(true);
    cfg.training.iterations = 20_000;
    cfg.training.lr_decay = 0.9;
    cfg
}

pub fn load_config(path_or_preset: &str) -> Result<ExperimentConfig, String> {
    if let Some(cfg) = preset(path_or_preset) {
        return Ok(cfg);
    }
    let text = std::fs::read_to_string(path_or_preset)
        .map_err(|e| format!("cannot read config {path_or_preset}: {e}"))?;
    toml::from_str(&text).map_err(|e| format!("cannot parse config {path_or_preset}: {e}"))
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String, String> {
    toml::to_string_pretty(cfg).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in PRESET_NAMES {
            assert!(preset(name).is_some(), "missing preset {name}");
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn config_roundtrip_is_fixed_point() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            let toml1 = config_to_toml(&cfg).unwrap();
            let parsed: ExperimentConfig = toml::from_str(&toml1).unwrap();
            assert_eq!(cfg, parsed, "{name} round trip");
            let toml2 = config_to_toml(&parsed).unwrap();
            assert_eq!(toml1, toml2, "{name} serialization fixed point");
        }
    }
}
