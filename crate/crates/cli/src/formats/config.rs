//! Run configuration: strict-schema JSON with per-block defaults.
//!
//! Unknown keys are rejected. Flag values override config fields, which
//! override defaults. A config plus root seed fully determines every
//! output.

use std::path::Path;

use serde::Deserialize;

use ctp_core::causal_id::VoteConfig;
use ctp_core::model::CtpConfig;
use ctp_core::trainer::{LagrangianSchedule, TrainConfig};
use ctp_core::treatment::EnsembleConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub trainer: TrainerBlock,
    pub vote: VoteBlock,
    pub ensemble: EnsembleBlock,
    pub treatment: Option<TreatmentBlock>,
    pub seed: u64,
}

pub fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    serde_json::from_str(text).map_err(|e| CliError::Schema(format!("config: {e}")))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetBlock {
    /// "hao" | "zheng" | "mm"
    pub system: String,
    /// Node count for the mm system (observed features = n_nodes - 5).
    pub n_nodes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub init_noise: f64,
    pub obs_noise: f64,
    pub missing_rate: f64,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        DatasetBlock {
            system: "hao".into(),
            n_nodes: 25,
            n_train: 1024,
            n_val: 128,
            n_test: 128,
            init_noise: ctp_core::dynsim::DEFAULT_INIT_NOISE,
            obs_noise: 0.05,
            missing_rate: 0.05,
        }
    }
}

impl DatasetBlock {
    pub fn total_samples(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub enc_hidden: usize,
    pub deriv_hidden: Vec<usize>,
    pub substeps: usize,
    pub confounder_out: bool,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
    pub kl_weight: f64,
    pub deriv_init_scale: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        let d = CtpConfig::new(1);
        ModelBlock {
            enc_hidden: d.enc_hidden,
            deriv_hidden: d.deriv_hidden,
            substeps: d.substeps,
            confounder_out: d.confounder_out,
            gumbel_temperature: d.gumbel_temperature,
            gumbel_hard: d.gumbel_hard,
            kl_weight: d.kl_weight,
            deriv_init_scale: d.deriv_init_scale,
        }
    }
}

impl ModelBlock {
    /// Instantiate for a dataset's feature set.
    pub fn build(&self, data: &ctp_core::dynsim::Dataset) -> CtpConfig {
        let mut cfg = CtpConfig::new(data.n_features());
        cfg.discrete = data.features.iter().map(|f| f.discrete).collect();
        cfg.enc_hidden = self.enc_hidden;
        cfg.deriv_hidden = self.deriv_hidden.clone();
        cfg.substeps = self.substeps;
        cfg.confounder_out = self.confounder_out;
        cfg.gumbel_temperature = self.gumbel_temperature;
        cfg.gumbel_hard = self.gumbel_hard;
        cfg.kl_weight = self.kl_weight;
        cfg.deriv_init_scale = self.deriv_init_scale;
        cfg.time_scale = data.time_scale;
        cfg
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerBlock {
    pub max_iters: usize,
    pub update_interval: usize,
    pub convergence_delta: f64,
    pub alpha0: f64,
    pub rho0: f64,
    pub eta: f64,
    pub gamma: f64,
    pub h_tol: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final_frac: f64,
}

impl Default for TrainerBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerBlock {
            max_iters: t.schedule.max_iters,
            update_interval: t.schedule.update_interval,
            convergence_delta: t.schedule.convergence_delta,
            alpha0: t.schedule.alpha0,
            rho0: t.schedule.rho0,
            eta: t.schedule.eta,
            gamma: t.schedule.gamma,
            h_tol: t.schedule.h_tol,
            beta: t.beta,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_final_frac: t.lr_final_frac,
        }
    }
}

impl TrainerBlock {
    pub fn build(&self) -> TrainConfig {
        TrainConfig {
            schedule: LagrangianSchedule {
                max_iters: self.max_iters,
                update_interval: self.update_interval,
                convergence_delta: self.convergence_delta,
                alpha0: self.alpha0,
                rho0: self.rho0,
                eta: self.eta,
                gamma: self.gamma,
                cap: 1e16,
                h_tol: self.h_tol,
            },
            beta: self.beta,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_final_frac: self.lr_final_frac,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteBlock {
    pub n_models: usize,
    pub accept_ratio: f64,
    /// Absolute validation-loss bar; when null it is derived as
    /// 1.5 x the median of the pilot run's validation-loss tail.
    pub model_threshold: Option<f64>,
    pub connectivity_threshold: f64,
    pub max_rounds: usize,
    pub retry_factor: usize,
}

impl Default for VoteBlock {
    fn default() -> Self {
        let v = VoteConfig::new(0.0);
        VoteBlock {
            n_models: v.n_models,
            accept_ratio: v.accept_ratio,
            model_threshold: None,
            connectivity_threshold: v.connectivity_threshold,
            max_rounds: v.max_rounds,
            retry_factor: v.retry_factor,
        }
    }
}

impl VoteBlock {
    pub fn build(&self, pilot_tail: &[f64]) -> CliResult<VoteConfig> {
        let threshold = match self.model_threshold {
            Some(t) => t,
            None => {
                if pilot_tail.is_empty() {
                    return Err(CliError::Dependency(
                        "vote threshold is unset and the pilot checkpoint records no \
                         validation-loss tail"
                            .into(),
                    ));
                }
                let mut tail = pilot_tail.to_vec();
                tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
                1.5 * tail[tail.len() / 2]
            }
        };
        Ok(VoteConfig {
            n_models: self.n_models,
            accept_ratio: self.accept_ratio,
            model_threshold: threshold,
            connectivity_threshold: self.connectivity_threshold,
            max_rounds: self.max_rounds,
            retry_factor: self.retry_factor,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleBlock {
    pub size: usize,
    pub lr_p: f64,
    pub lr_t: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub p_norm: f64,
    pub init_jitter: f64,
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        let e = EnsembleConfig::default();
        EnsembleBlock {
            size: e.size,
            lr_p: e.lr_p,
            lr_t: e.lr_t,
            iterations: e.iterations,
            batch_size: e.batch_size,
            p_norm: e.p_norm,
            init_jitter: e.init_jitter,
        }
    }
}

impl EnsembleBlock {
    pub fn build(&self) -> EnsembleConfig {
        EnsembleConfig {
            size: self.size,
            lr_p: self.lr_p,
            lr_t: self.lr_t,
            iterations: self.iterations,
            batch_size: self.batch_size,
            p_norm: self.p_norm,
            init_jitter: self.init_jitter,
        }
    }
}

/// Treatment block: pinned value in raw units, feature by name.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentBlock {
    pub feature: String,
    pub time: f64,
    pub value: f64,
    pub observe_from: f64,
    pub observe_to: f64,
    pub n_points: usize,
}

/// Published treatment settings per simulated system.
pub fn default_treatment(system: &str) -> Option<TreatmentBlock> {
    match system {
        // pin neurodegeneration to zero at t = 52, observe to 60
        "hao" => Some(TreatmentBlock {
            feature: "n".into(),
            time: 52.0,
            value: 0.0,
            observe_from: 52.0,
            observe_to: 60.0,
            n_points: 9,
        }),
        // pin neurodegeneration to zero at progression time 0, observe to 20
        "zheng" => Some(TreatmentBlock {
            feature: "n".into(),
            time: 0.0,
            value: 0.0,
            observe_from: 0.0,
            observe_to: 20.0,
            n_points: 11,
        }),
        // pin node 10 to one at t = 1, observe to 10
        "mm" => Some(TreatmentBlock {
            feature: "x10".into(),
            time: 1.0,
            value: 1.0,
            observe_from: 1.0,
            observe_to: 10.0,
            n_points: 10,
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_object() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.dataset.system, "hao");
        assert_eq!(cfg.dataset.n_train, 1024);
        assert_eq!(cfg.vote.n_models, 8);
        assert_eq!(cfg.ensemble.size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("{\"dataset\":{\"sysetm\":\"hao\"}}").unwrap_err();
        assert!(matches!(err, CliError::Schema(_)), "{err}");
        let err = parse_config("{\"bogus\":1}").unwrap_err();
        assert!(matches!(err, CliError::Schema(_)));
    }

    #[test]
    fn vote_threshold_falls_back_to_pilot_median() {
        let block = VoteBlock::default();
        let vc = block.build(&[2.0, 1.0, 3.0]).unwrap();
        assert!((vc.model_threshold - 3.0).abs() < 1e-12); // 1.5 * median(2.0)
        assert!(block.build(&[]).is_err());
    }
}
