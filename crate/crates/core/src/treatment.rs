//! Treatment-effect bounds from a min-max-trained model ensemble.
//!
//! A do-intervention pins one observed feature to a value from an onset
//! time on; the causal mask guarantees every non-descendant trajectory is
//! untouched. Because the hidden confounder leaves the data-consistent
//! parameter set unidentifiable, an ensemble of models is trained to stay
//! accurate on observed data while maximizing pairwise disagreement at
//! post-treatment time points; the per-time min/max over members is the
//! reported bound and the mean the point estimate.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynsim::{Dataset, NormStats};
use crate::error::CtpError;
use crate::exec::{Job, ParallelMap};
use crate::math;
use crate::model::{
    BatchData, CausalMask, CtpModel, ForwardPass, InitMode, LatentTrajectory, StateClamp,
};
use crate::optim::OptimizerState;
use crate::params::GradStore;
use crate::rng::Rng;
use crate::tape::Buf;
use crate::Result;

/// A do-intervention plus its observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSpec {
    /// Observed feature index to pin.
    pub feature: usize,
    /// Onset time.
    pub t_start: f64,
    /// Pinned value in normalized units.
    pub value: f64,
    pub observe_from: f64,
    pub observe_to: f64,
    pub n_points: usize,
}

impl TreatmentSpec {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.feature >= data.n_features() {
            return Err(CtpError::Input(format!(
                "treated feature {} out of range ({} observed)",
                self.feature,
                data.n_features()
            )));
        }
        let t0 = data
            .samples
            .first()
            .map(|s| s.visits[0].t)
            .unwrap_or(f64::NEG_INFINITY);
        if self.t_start <= t0 {
            return Err(CtpError::Input(format!(
                "treatment onset {} must come after the initial time {t0}",
                self.t_start
            )));
        }
        if self.observe_from < self.t_start || self.observe_to < self.observe_from {
            return Err(CtpError::Input(String::from(
                "observation window must start at or after the onset",
            )));
        }
        if self.n_points < 1 {
            return Err(CtpError::Input(String::from("need at least one observation point")));
        }
        Ok(())
    }

    pub fn observation_times(&self) -> Vec<f64> {
        if self.n_points == 1 {
            return vec![self.observe_from];
        }
        let step = (self.observe_to - self.observe_from) / (self.n_points - 1) as f64;
        (0..self.n_points)
            .map(|i| self.observe_from + i as f64 * step)
            .collect()
    }

    pub fn clamp(&self) -> StateClamp {
        StateClamp {
            feature: self.feature,
            value: self.value,
            t_start: self.t_start,
        }
    }

    /// Convert a raw-unit pin value into normalized units.
    pub fn from_raw_value(
        feature: usize,
        raw_value: f64,
        stats: &NormStats,
        t_start: f64,
        observe_from: f64,
        observe_to: f64,
        n_points: usize,
    ) -> Self {
        TreatmentSpec {
            feature,
            t_start,
            value: (raw_value - stats.mean[feature]) / stats.std[feature],
            observe_from,
            observe_to,
            n_points,
        }
    }
}

/// Min-max ensemble training knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    /// Ensemble size; bounds need at least two members.
    pub size: usize,
    /// Prediction-loss learning rate.
    pub lr_p: f64,
    /// Treatment-spread learning rate.
    pub lr_t: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Pairwise distance order.
    pub p_norm: f64,
    /// Relative scale of the symmetry-breaking jitter applied to each
    /// member copy; identical members have zero spread gradient.
    pub init_jitter: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            size: 32,
            lr_p: 1e-3,
            lr_t: 1e-4,
            iterations: 5000,
            batch_size: 32,
            p_norm: 2.0,
            init_jitter: 0.02,
        }
    }
}

/// Integrate a sample under a do-intervention. The onset is inserted into
/// the evaluation grid, so treated and untreated solves share one
/// discretization and non-descendant states match bit for bit.
pub fn solve_with_do(
    model: &CtpModel,
    data: &Dataset,
    sample_idx: usize,
    mask: &CausalMask,
    treatment: &TreatmentSpec,
    eval_times: &[f64],
    mode: InitMode,
    rng: &mut Rng,
) -> Result<LatentTrajectory> {
    if !mask.fully_decided() {
        return Err(CtpError::Input(String::from(
            "solve_with_do requires a fully decided mask",
        )));
    }
    let times = grid_with_onset(eval_times, treatment.t_start);
    model.trajectory(
        data,
        sample_idx,
        &times,
        mask,
        mode,
        rng,
        Some(&treatment.clamp()),
    )
}

/// Insert the onset into a sorted grid (when it lies inside the span).
pub fn grid_with_onset(eval_times: &[f64], t_start: f64) -> Vec<f64> {
    let mut times = eval_times.to_vec();
    if !times.iter().any(|&t| t == t_start)
        && times.first().map(|&t| t_start > t).unwrap_or(false)
        && times.last().map(|&t| t_start < t).unwrap_or(false)
    {
        times.push(t_start);
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    times
}

/// Per-time min/mean/max over ensemble members, observed features only.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub times: Vec<f64>,
    /// `times.len() x K`, row-major.
    pub lo: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
}

impl Envelope {
    /// Convert normalized values to raw units.
    pub fn denormalized(&self, stats: &NormStats) -> Envelope {
        let conv = |rows: &Vec<Vec<f64>>| {
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(f, v)| v * stats.std[f] + stats.mean[f])
                        .collect()
                })
                .collect()
        };
        Envelope {
            times: self.times.clone(),
            lo: conv(&self.lo),
            mean: conv(&self.mean),
            hi: conv(&self.hi),
        }
    }
}

/// Treated trajectories of every member at the observation times, reduced
/// to the pointwise envelope and mean (normalized units).
pub fn bounds(
    members: &[CtpModel],
    mask: &CausalMask,
    data: &Dataset,
    sample_idx: usize,
    treatment: &TreatmentSpec,
) -> Result<Envelope> {
    if members.is_empty() {
        return Err(CtpError::Input(String::from("empty ensemble")));
    }
    let obs_times = treatment.observation_times();
    let k = data.n_features();
    let mut lo = vec![vec![f64::INFINITY; k]; obs_times.len()];
    let mut hi = vec![vec![f64::NEG_INFINITY; k]; obs_times.len()];
    let mut mean = vec![vec![0.0; k]; obs_times.len()];
    for m in members {
        // Deterministic evaluation: mean initial state, fixed noise stream.
        let mut rng = Rng::substream(0, "bounds.eval", 0);
        let traj = solve_with_do(
            m,
            data,
            sample_idx,
            mask,
            treatment,
            &obs_times,
            InitMode::Mean,
            &mut rng,
        )?;
        for (ti, &t) in obs_times.iter().enumerate() {
            let si = traj
                .times
                .iter()
                .position(|&x| x == t)
                .expect("observation time recorded");
            for f in 0..k {
                let v = traj.mapped[si][f];
                lo[ti][f] = lo[ti][f].min(v);
                hi[ti][f] = hi[ti][f].max(v);
                mean[ti][f] += v / members.len() as f64;
            }
        }
    }
    Ok(Envelope {
        times: obs_times,
        lo,
        mean,
        hi,
    })
}

/// Pairwise p-norm spread of recorded member states, batch averaged, plus
/// the per-member gradient with respect to its recorded states.
///
/// `records[l]` is member l's `(batch, dim)` state block at the probe time.
pub fn pairwise_spread(records: &[Buf], p: f64) -> (f64, Vec<Buf>) {
    let l = records.len();
    assert!(l >= 1);
    let (b, dim) = (records[0].rows, records[0].cols);
    let mut total = 0.0;
    let mut grads: Vec<Buf> = records.iter().map(|r| Buf::zeros(r.rows, r.cols)).collect();
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        for x in 0..l {
            for y in (x + 1)..l {
                let mut norm_p = 0.0;
                for f in 0..dim {
                    let d = records[x].at(i, f) - records[y].at(i, f);
                    norm_p += math::powf(d.abs(), p);
                }
                let dist = math::powf(norm_p, 1.0 / p);
                total += inv_b * dist;
                if dist > 0.0 {
                    for f in 0..dim {
                        let d = records[x].at(i, f) - records[y].at(i, f);
                        let g = inv_b
                            * math::powf(d.abs(), p - 1.0)
                            * (if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
                            / math::powf(dist, p - 1.0);
                        grads[x].data[i * dim + f] += g;
                        grads[y].data[i * dim + f] -= g;
                    }
                }
            }
        }
    }
    (total, grads)
}

/// Treatment sampling ranges used during ensemble training.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSampler {
    pub feature: usize,
    t0: f64,
    t_last: f64,
    horizon: f64,
    value_lo: f64,
    value_hi: f64,
}

impl TreatmentSampler {
    /// Onsets cover the middle 80% of the visit span; probe times reach one
    /// prediction horizon past the onset; values span the treated feature's
    /// empirical 5th-95th percentile.
    pub fn from_dataset(data: &Dataset, feature: usize) -> Result<Self> {
        if feature >= data.n_features() {
            return Err(CtpError::Input(String::from("sampler feature out of range")));
        }
        let s0 = data
            .samples
            .first()
            .ok_or_else(|| CtpError::Input(String::from("empty dataset")))?;
        let t0 = s0.visits[0].t;
        let t_last = s0.visits.last().unwrap().t;
        let t_split = s0.visits[s0.n_input - 1].t;
        let mut vals: Vec<f64> = data
            .samples
            .iter()
            .flat_map(|s| &s.visits)
            .filter(|v| v.missing[feature] == 0)
            .map(|v| v.values[feature])
            .collect();
        if vals.len() < 2 {
            return Err(CtpError::Input(String::from(
                "not enough observations of the treated feature",
            )));
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |frac: f64| vals[((vals.len() - 1) as f64 * frac) as usize];
        Ok(TreatmentSampler {
            feature,
            t0,
            t_last,
            horizon: (t_last - t_split).max(f64::MIN_POSITIVE),
            value_lo: q(0.05),
            value_hi: q(0.95),
        })
    }

    /// One (onset, probe time, value) draw.
    pub fn draw(&self, rng: &mut Rng) -> (f64, f64, f64) {
        let span = self.t_last - self.t0;
        let t_a = self.t0 + (0.1 + 0.8 * rng.uniform()) * span;
        let t_o = t_a + (1.0 - rng.uniform()) * self.horizon;
        let a = rng.uniform_in(self.value_lo, self.value_hi);
        (t_a, t_o, a)
    }
}

struct MemberState {
    model: CtpModel,
    opt_p: OptimizerState,
    opt_t: OptimizerState,
    retried: bool,
}

fn jittered(base: &CtpModel, scale: f64, rng: &mut Rng) -> CtpModel {
    let mut m = base.clone();
    if scale > 0.0 {
        for i in 0..m.params.len() {
            let buf = m.params.buf_mut(i);
            for v in buf.data.iter_mut() {
                *v += rng.normal() * scale * v.abs().max(0.01);
            }
        }
    }
    m
}

type MemberForward = Result<(crate::tape::Tape, crate::tape::NodeId, crate::tape::NodeId, f64)>;

/// Alternating min-max ensemble training.
///
/// Each iteration evaluates, at the current parameters, (i) the summed
/// prediction loss of all members on a shared minibatch and (ii) the
/// pairwise spread of their treated states at a sampled probe time, then
/// applies the descent step for (i) and the ascent step for (ii) with two
/// separate optimizers.
pub fn train_ensemble<P: ParallelMap>(
    train_data: &Dataset,
    m_star: &CtpModel,
    mask: &CausalMask,
    cfg: &EnsembleConfig,
    sampler: &TreatmentSampler,
    seed: u64,
    pool: &P,
) -> Result<Vec<CtpModel>> {
    if cfg.size < 2 {
        return Err(CtpError::Input(String::from(
            "ensemble needs at least two members for bounds",
        )));
    }
    if !mask.fully_decided() {
        return Err(CtpError::Input(String::from(
            "ensemble training requires a fully decided mask",
        )));
    }
    let mut members: Vec<MemberState> = (0..cfg.size)
        .map(|l| {
            let mut rng = Rng::substream(seed, "ensemble.init", l as u64);
            let model = jittered(m_star, cfg.init_jitter, &mut rng);
            MemberState {
                opt_p: OptimizerState::new(&model.params, cfg.lr_p),
                opt_t: OptimizerState::new(&model.params, cfg.lr_t),
                model,
                retried: false,
            }
        })
        .collect();

    let mut batch_rng = Rng::substream(seed, "ensemble.batch", 0);
    let groups = train_data.shape_groups();

    for iter in 0..cfg.iterations {
        // Shared minibatch and shared treatment draw.
        let group = &groups[if groups.len() == 1 {
            0
        } else {
            batch_rng.below(groups.len())
        }];
        let mut pool_idx = group.clone();
        let take = cfg.batch_size.min(pool_idx.len());
        for i in 0..take {
            let j = i + batch_rng.below(pool_idx.len() - i);
            pool_idx.swap(i, j);
        }
        pool_idx.truncate(take);
        let (t_a, t_o, a) = sampler.draw(&mut batch_rng);
        let clamp = StateClamp {
            feature: sampler.feature,
            value: a,
            t_start: t_a,
        };

        let batch = BatchData::new(&m_star.cfg, train_data, &pool_idx)?;
        let probe_times = [t_a, t_o];

        // Phase A: forward passes, one per member, gradients deferred.
        let jobs: Vec<Job<'_, MemberForward>> = members
            .iter()
            .enumerate()
            .map(|(l, ms)| {
                let model = &ms.model;
                let batch = &batch;
                let iter_seed = Rng::substream(seed, "ensemble.iter", iter as u64).next_u64();
                Box::new(move || -> MemberForward {
                    let mut rng = Rng::substream(iter_seed, "member", l as u64);
                    let mut fp = ForwardPass::new(model);
                    let (mu, sigma) = fp.encode(batch)?;
                    let v0 = fp.initial_state(mu, sigma, InitMode::Sample, &mut rng);
                    let states = fp.solve(v0, batch.t0(), &batch.times, mask, &mut rng, None)?;
                    let loss = fp.data_loss(&states, batch);
                    let treated =
                        fp.solve(v0, batch.t0(), &probe_times, mask, &mut rng, Some(&clamp))?;
                    let record = *treated.last().unwrap();
                    let lv = fp.tape.scalar_value(loss);
                    Ok((fp.tape, loss, record, lv))
                }) as Job<'_, _>
            })
            .collect();
        let results = pool.run(jobs);

        let mut tapes = Vec::with_capacity(cfg.size);
        let mut failed: Option<usize> = None;
        for (l, r) in results.into_iter().enumerate() {
            match r {
                Ok(t) => tapes.push(t),
                Err(_) if failed.is_none() => failed = Some(l),
                Err(_) => {}
            }
        }
        if let Some(l) = failed {
            reinit_member(&mut members, l, m_star, cfg, seed, iter)?;
            continue;
        }

        let records: Vec<Buf> = tapes
            .iter()
            .map(|(tape, _, record, _)| tape.value(*record).clone())
            .collect();
        let (_spread, spread_grads) = pairwise_spread(&records, cfg.p_norm);

        // Phase B: both backward passes per member.
        let grad_jobs: Vec<Job<'_, Result<(GradStore, GradStore)>>> = tapes
            .iter()
            .zip(&members)
            .zip(&spread_grads)
            .map(|(((tape, loss, record, _), ms), gseed)| {
                let params = &ms.model.params;
                Box::new(move || {
                    let gp = tape.grad(*loss, params)?;
                    let adj = tape.backward_seeded(&[(*record, gseed.clone())])?;
                    let gt = adj.into_grad_store(tape, params);
                    Ok((gp, gt))
                }) as Job<'_, _>
            })
            .collect();
        let grad_results = pool.run(grad_jobs);
        drop(tapes);

        let mut failed: Option<usize> = None;
        let mut grads = Vec::with_capacity(cfg.size);
        for (l, r) in grad_results.into_iter().enumerate() {
            match r {
                Ok(g) => grads.push(g),
                Err(_) if failed.is_none() => failed = Some(l),
                Err(_) => {}
            }
        }
        if let Some(l) = failed {
            reinit_member(&mut members, l, m_star, cfg, seed, iter)?;
            continue;
        }

        for (ms, (gp, gt)) in members.iter_mut().zip(grads) {
            ms.opt_p.step(&mut ms.model.params, &gp)?;
            ms.opt_t.step_signed(&mut ms.model.params, &gt, -1.0)?;
        }
    }
    Ok(members.into_iter().map(|m| m.model).collect())
}

fn reinit_member(
    members: &mut [MemberState],
    l: usize,
    m_star: &CtpModel,
    cfg: &EnsembleConfig,
    seed: u64,
    iter: usize,
) -> Result<()> {
    if members[l].retried {
        return Err(CtpError::NumericFailure(format!(
            "ensemble member {l} diverged twice (second failure at iteration {iter})"
        )));
    }
    let mut rng = Rng::substream(seed, "ensemble.reinit", (l * 1_000_000 + iter) as u64);
    let model = jittered(m_star, cfg.init_jitter, &mut rng);
    members[l] = MemberState {
        opt_p: OptimizerState::new(&model.params, cfg.lr_p),
        opt_t: OptimizerState::new(&model.params, cfg.lr_t),
        model,
        retried: true,
    };
    Ok(())
}
