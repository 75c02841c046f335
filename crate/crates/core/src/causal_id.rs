//! Causal identification by multi-model voting.
//!
//! Single runs are fragile: connectivity entries rarely reach exact zero
//! and wrong edge directions are common. Stability comes from training `N`
//! independent models per round (only runs whose validation loss clears a
//! quality threshold count), thresholding their connectivity matrices, and
//! declaring an edge decided once a large enough majority agrees. Undecided
//! entries go into the next round; leftovers after the round budget fall
//! back to a simple majority.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::dynsim::Dataset;
use crate::error::CtpError;
use crate::exec::{Job, ParallelMap};
use crate::model::{CausalMask, CtpConfig, CtpModel};
use crate::rng::Rng;
use crate::trainer::{train, TrainConfig, TrainOutcome};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct VoteConfig {
    /// Models per round `N`.
    pub n_models: usize,
    /// Majority needed to decide an entry; must exceed one half or both
    /// vote rules could fire at once.
    pub accept_ratio: f64,
    /// Validation-loss bar a run must clear to vote.
    pub model_threshold: f64,
    /// Connectivity entries below this count as absent.
    pub connectivity_threshold: f64,
    pub max_rounds: usize,
    /// Total training attempts allowed per round, as a multiple of `N`.
    pub retry_factor: usize,
}

impl VoteConfig {
    pub fn new(model_threshold: f64) -> Self {
        VoteConfig {
            n_models: 8,
            accept_ratio: 0.8,
            model_threshold,
            connectivity_threshold: 1e-4,
            max_rounds: 5,
            retry_factor: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 || self.max_rounds == 0 {
            return Err(CtpError::Config(String::from(
                "vote config needs models and rounds",
            )));
        }
        if !(self.accept_ratio > 0.5 && self.accept_ratio <= 1.0) {
            return Err(CtpError::Config(String::from(
                "accept ratio must lie in (0.5, 1]",
            )));
        }
        Ok(())
    }
}

/// Vote bookkeeping for one round.
#[derive(Debug, Clone)]
pub struct RoundAudit {
    pub round: usize,
    pub attempts: usize,
    /// Validation losses of the models that passed the quality bar.
    pub model_losses: Vec<f64>,
    /// Connectivity matrices of the passing models (row-major, dim*dim).
    pub connectivity: Vec<Vec<f64>>,
    /// Decisions taken this round: (cause, effect, present).
    pub decisions: Vec<(usize, usize, bool)>,
}

#[derive(Debug, Clone, Default)]
pub struct VoteAudit {
    pub rounds: Vec<RoundAudit>,
    /// Entries resolved by the majority fallback after the round budget.
    pub fallback: Vec<(usize, usize, bool)>,
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub mask: CausalMask,
    pub audit: VoteAudit,
}

fn train_candidate(
    model_cfg: &CtpConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    mask: &CausalMask,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = Rng::substream(seed, "identify.model", 0);
    let model = CtpModel::init(model_cfg.clone(), &mut rng)?;
    let out = train(model, train_data, val_data, mask, train_cfg, &mut rng)?;
    let d = out.model.connectivity(mask);
    Ok((out.val_loss, d.values))
}

/// Multi-round vote over independently trained models; returns a fully
/// decided causal mask plus the audit trail.
pub fn identify<P: ParallelMap>(
    train_data: &Dataset,
    val_data: &Dataset,
    model_cfg: &CtpConfig,
    train_cfg: &TrainConfig,
    vote: &VoteConfig,
    seed: u64,
    pool: &P,
) -> Result<IdentifyOutcome> {
    vote.validate()?;
    let dim = model_cfg.dim();
    let mut mask = CausalMask::init(dim, model_cfg.confounder_out);
    let mut audit = VoteAudit::default();
    let mut last_votes: Vec<usize> = Vec::new();
    let n = vote.n_models;

    for round in 0..vote.max_rounds {
        if mask.fully_decided() {
            break;
        }
        let mut losses: Vec<f64> = Vec::new();
        let mut mats: Vec<Vec<f64>> = Vec::new();
        let mut attempts = 0usize;
        let mut failures: Vec<String> = Vec::new();
        while mats.len() < n {
            if attempts >= vote.retry_factor * n {
                return Err(CtpError::IdentificationFailure(format!(
                    "round {round}: only {} of {n} models converged after {attempts} attempts \
                     (threshold {}); failures: [{}]",
                    mats.len(),
                    vote.model_threshold,
                    failures.join("; ")
                )));
            }
            let wave = (n - mats.len()).min(vote.retry_factor * n - attempts);
            let jobs: Vec<Job<'_, Result<(f64, Vec<f64>)>>> = (0..wave)
                .map(|slot| {
                    let job_seed = Rng::substream(
                        seed,
                        "identify.attempt",
                        (round * 10_000 + attempts + slot) as u64,
                    )
                    .next_u64();
                    let mask = mask.clone();
                    Box::new(move || {
                        train_candidate(model_cfg, train_data, val_data, &mask, train_cfg, job_seed)
                    }) as Job<'_, _>
                })
                .collect();
            attempts += wave;
            for res in pool.run(jobs) {
                match res {
                    Ok((loss, mat)) if loss < vote.model_threshold => {
                        losses.push(loss);
                        mats.push(mat);
                    }
                    Ok((loss, _)) => {
                        failures.push(format!("validation loss {loss:.4} over threshold"))
                    }
                    Err(e) => failures.push(format!("{e}")),
                }
            }
        }

        last_votes = count_invalid_votes(&mats, dim, vote.connectivity_threshold);
        let mut decisions = Vec::new();
        for i in 0..dim {
            for j in 0..dim {
                if mask.undecided[i * dim + j] != 1 {
                    continue;
                }
                let frac = last_votes[i * dim + j] as f64 / n as f64;
                if frac > vote.accept_ratio {
                    mask.set_decided(i, j, false);
                    decisions.push((i, j, false));
                } else if frac < 1.0 - vote.accept_ratio {
                    mask.set_decided(i, j, true);
                    decisions.push((i, j, true));
                }
            }
        }
        audit.rounds.push(RoundAudit {
            round,
            attempts,
            model_losses: losses,
            connectivity: mats,
            decisions,
        });
    }

    if !mask.fully_decided() {
        // Majority fallback over the last round's votes; ties keep the edge.
        for i in 0..dim {
            for j in 0..dim {
                if mask.undecided[i * dim + j] == 1 {
                    let absent = 2 * last_votes[i * dim + j] > n;
                    mask.set_decided(i, j, !absent);
                    audit.fallback.push((i, j, !absent));
                }
            }
        }
    }
    Ok(IdentifyOutcome { mask, audit })
}

/// Per entry, how many of the matrices fall under the threshold.
pub fn count_invalid_votes(mats: &[Vec<f64>], dim: usize, threshold: f64) -> Vec<usize> {
    let mut votes = alloc::vec![0usize; dim * dim];
    for mat in mats {
        for (e, v) in votes.iter_mut().zip(mat) {
            if *v < threshold {
                *e += 1;
            }
        }
    }
    votes
}

/// Train the reference model under a fully decided mask.
pub fn mask_retrain(
    train_data: &Dataset,
    val_data: &Dataset,
    mask: &CausalMask,
    model_cfg: &CtpConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if !mask.fully_decided() {
        return Err(CtpError::Input(String::from(
            "mask_retrain requires a fully decided mask",
        )));
    }
    let mut rng = Rng::substream(seed, "retrain", 0);
    let model = CtpModel::init(model_cfg.clone(), &mut rng)?;
    train(model, train_data, val_data, mask, train_cfg, &mut rng)
}
