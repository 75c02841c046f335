//! Augmented Lagrangian training loop with scheduled multiplier updates.
//!
//! Minibatch gradient steps minimize `L + beta*g + (rho/2)*h^2 + alpha*h`;
//! every `update_interval` steps the validation objective and constraint
//! are recorded, and once progress per step falls under the convergence
//! threshold the multipliers grow: `rho <- alpha*h + rho`, and additionally
//! `alpha <- eta*alpha` while the constraint is not shrinking by at least
//! the factor `gamma`.

use alloc::format;
use alloc::vec::Vec;

use crate::dynsim::Dataset;
use crate::error::CtpError;
use crate::model::{
    dag_penalty, sparse_penalty, BatchData, CausalMask, CtpModel, ForwardPass, InitMode,
};
use crate::optim::OptimizerState;
use crate::rng::Rng;
use crate::Result;

/// Multiplier schedule hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianSchedule {
    /// Total gradient steps `n`.
    pub max_iters: usize,
    /// Validation/update cadence `m`.
    pub update_interval: usize,
    /// Convergence threshold on per-step validation improvement.
    pub convergence_delta: f64,
    /// Initial linear multiplier. Zero would freeze the geometric growth
    /// rule, so the default starts slightly above it.
    pub alpha0: f64,
    /// Initial quadratic penalty weight.
    pub rho0: f64,
    /// Geometric growth factor for alpha.
    pub eta: f64,
    /// Constraint-progress ratio gating the alpha update.
    pub gamma: f64,
    /// Overflow guard on both multipliers.
    pub cap: f64,
    /// Constraint tolerance: once the recorded penalty sits below this,
    /// the multipliers stop growing (the subproblem sequence has done its
    /// job; further growth only grinds away true structure).
    pub h_tol: f64,
}

impl Default for LagrangianSchedule {
    fn default() -> Self {
        LagrangianSchedule {
            max_iters: 30_000,
            update_interval: 200,
            convergence_delta: 1e-3,
            alpha0: 1e-3,
            rho0: 1.0,
            eta: 10.0,
            gamma: 0.25,
            cap: 1e16,
            h_tol: 1e-8,
        }
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: LagrangianSchedule,
    /// Sparse penalty weight.
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate fraction at the final step (linear decay; 1 = constant).
    pub lr_final_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LagrangianSchedule::default(),
            beta: 0.1,
            batch_size: 64,
            lr: 1e-3,
            lr_final_frac: 1.0,
        }
    }
}

/// One audit record, written every `update_interval` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l_final: f64,
    pub l_data: f64,
    pub sparse: f64,
    pub dag: f64,
    pub alpha: f64,
    pub rho: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CtpModel,
    /// Plain validation data loss at the end of the run.
    pub val_loss: f64,
    /// Final constraint value on the masked connectivity.
    pub final_dag: f64,
    pub log: Vec<TrainLogRecord>,
    /// Seed of the frozen validation noise stream; evaluation replays it.
    pub val_seed: u64,
}

/// Baseline ablations: same architecture, no causal machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Affine derivative maps, no sparsity or acyclicity penalties.
    LinearOde,
    /// Full networks, no sparsity or acyclicity penalties.
    NeuralOde,
}

impl Baseline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Baseline::LinearOde => "linear-ode",
            Baseline::NeuralOde => "neural-ode",
        }
    }
}

struct Sampler {
    groups: Vec<Vec<usize>>,
    weights: Vec<usize>,
    total: usize,
}

impl Sampler {
    fn new(data: &Dataset) -> Self {
        let groups = data.shape_groups();
        let weights: Vec<usize> = groups.iter().map(Vec::len).collect();
        let total = weights.iter().sum();
        Sampler {
            groups,
            weights,
            total,
        }
    }

    /// Draw a batch of distinct indices from one shape group.
    fn draw(&self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let gi = if self.groups.len() == 1 {
            0
        } else {
            let mut pick = rng.below(self.total);
            let mut gi = self.groups.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                if pick < *w {
                    gi = i;
                    break;
                }
                pick -= w;
            }
            gi
        };
        let mut pool = self.groups[gi].clone();
        let take = size.min(pool.len());
        for i in 0..take {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(take);
        pool
    }
}

/// Plain validation data loss (reconstruction + prediction, no penalties)
/// under a frozen noise stream. Rebuilding the stream from `val_seed` makes
/// successive evaluations comparable and lets tooling reproduce the value.
pub fn validation_data_loss(
    model: &CtpModel,
    val: &Dataset,
    mask: &CausalMask,
    val_seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut rng = Rng::substream(val_seed, "trainer.val", 0);
    for group in val.shape_groups() {
        let batch = BatchData::new(&model.cfg, val, &group)?;
        let mut fp = ForwardPass::new(model);
        let (mu, sigma) = fp.encode(&batch)?;
        let v0 = fp.initial_state(mu, sigma, InitMode::Sample, &mut rng);
        let states = fp.solve(v0, batch.t0(), &batch.times, mask, &mut rng, None)?;
        let loss = fp.data_loss(&states, &batch);
        total += fp.tape.scalar_value(loss);
    }
    Ok(total)
}

/// Scheduled augmented Lagrangian training.
pub fn train(
    model: CtpModel,
    train_data: &Dataset,
    val_data: &Dataset,
    mask: &CausalMask,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let mut model = model;
    let sched = &cfg.schedule;
    let mut alpha = sched.alpha0;
    let mut rho = sched.rho0;
    let mut a1: Vec<f64> = Vec::new();
    let mut a2: Vec<f64> = Vec::new();
    let mut log = Vec::new();
    let mut opt = OptimizerState::new(&model.params, cfg.lr);
    let sampler = Sampler::new(train_data);
    let val_seed = rng.next_u64();
    let penalized = cfg.beta != 0.0 || alpha != 0.0 || rho != 0.0;

    for step in 1..=sched.max_iters {
        if step % sched.update_interval == 0 {
            let l_val = validation_data_loss(&model, val_data, mask, val_seed)?;
            let d = model.connectivity(mask);
            let g = sparse_penalty(&d);
            let h = dag_penalty(&d)?;
            let l_final = l_val + cfg.beta * g + 0.5 * rho * h * h + alpha * h;
            a1.push(l_final);
            a2.push(h);
            log.push(TrainLogRecord {
                step,
                l_final,
                l_data: l_val,
                sparse: g,
                dag: h,
                alpha,
                rho,
            });
            if penalized && step > 2 * sched.update_interval && h >= sched.h_tol {
                let n = a1.len();
                if a1[n - 1] < a1[n - 2] {
                    let delta = (a1[n - 2] - a1[n - 1]) / sched.update_interval as f64;
                    if delta < sched.convergence_delta {
                        let hc = a2[n - 1];
                        rho = (alpha * hc + rho).min(sched.cap);
                        if a2[n - 1] > a2[n - 2] * sched.gamma {
                            alpha = (sched.eta * alpha).min(sched.cap);
                        }
                    }
                }
            }
        }

        let idxs = sampler.draw(cfg.batch_size, rng);
        let batch = BatchData::new(&model.cfg, train_data, &idxs)?;
        let mut fp = ForwardPass::new(&model);
        let (loss, parts) = fp.total_loss(&batch, mask, cfg.beta, alpha, rho, InitMode::Sample, rng)?;
        if !parts.total.is_finite() {
            return Err(CtpError::NumericFailure(format!(
                "non-finite training loss at step {step}"
            )));
        }
        let grads = fp.tape.grad(loss, &model.params)?;
        drop(fp);
        if cfg.lr_final_frac < 1.0 {
            let frac = step as f64 / sched.max_iters as f64;
            opt.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * frac);
        }
        opt.step(&mut model.params, &grads)?;
    }

    let val_loss = validation_data_loss(&model, val_data, mask, val_seed)?;
    let final_dag = dag_penalty(&model.connectivity(mask))?;
    Ok(TrainOutcome {
        model,
        val_loss,
        final_dag,
        log,
        val_seed,
    })
}

/// Baseline ablations share the loop with every penalty weight zeroed.
pub fn train_baseline(
    variant: Baseline,
    mut model_cfg: crate::model::CtpConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    if matches!(variant, Baseline::LinearOde) {
        model_cfg.linear_derivatives = true;
    }
    let mask = CausalMask::init(model_cfg.dim(), model_cfg.confounder_out);
    let mut cfg = cfg.clone();
    cfg.beta = 0.0;
    cfg.schedule.alpha0 = 0.0;
    cfg.schedule.rho0 = 0.0;
    let model = CtpModel::init(model_cfg, rng)?;
    train(model, train_data, val_data, &mask, &cfg, rng)
}
