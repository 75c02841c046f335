//! Tape-building forward passes: encode, integrate, and score a batch.
//!
//! One [`ForwardPass`] owns one tape. Gradients flow through every solver
//! substep (discretize-then-optimize), so a backward pass differentiates
//! the whole pipeline: encoder, reparameterized initial state, masked
//! derivative networks, RK4 unroll, losses and penalties.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynsim::Dataset;
use crate::error::CtpError;
use crate::nn::gumbel_sigmoid_tape;
use crate::rng::Rng;
use crate::tape::{Buf, NodeId, Tape};
use crate::Result;

use super::{CausalMask, CtpConfig, CtpModel, LatentTrajectory};

/// How the initial latent state is formed from the encoder posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Deterministic: `v0 = mu`.
    Mean,
    /// Reparameterized draw: `v0 = mu + sigma * eps`.
    Sample,
}

/// A do-intervention at solver level: from `t_start` on, latent slot
/// `feature` is pinned to `value` (normalized units) and its derivative
/// discarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateClamp {
    pub feature: usize,
    pub value: f64,
    pub t_start: f64,
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub sparse: f64,
    pub dag: f64,
    pub kl: f64,
}

/// A batch of samples sharing one visit-time grid and split point, packed
/// into constant buffers.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub times: Vec<f64>,
    pub n_input: usize,
    pub batch: usize,
    /// Per input visit: `(batch, 2K+1)` encoder rows.
    enc_rows: Vec<Buf>,
    /// Per visit: `(batch, K+1)` targets, confounder column zero.
    targets: Vec<Buf>,
    /// Per visit: `(batch, K+1)` indicator of scored continuous entries.
    present_cont: Vec<Buf>,
    /// Per visit: `(batch, K+1)` indicator of scored discrete entries.
    present_disc: Vec<Buf>,
    has_disc: bool,
}

impl BatchData {
    pub fn new(cfg: &CtpConfig, data: &Dataset, idxs: &[usize]) -> Result<Self> {
        if idxs.is_empty() {
            return Err(CtpError::Input(String::from("empty batch")));
        }
        let k = cfg.n_observed;
        if data.n_features() != k {
            return Err(CtpError::Config(format!(
                "dataset has {} features, model expects {}",
                data.n_features(),
                k
            )));
        }
        let dim = cfg.dim();
        let first = &data.samples[idxs[0]];
        let times = first.times();
        let n_input = first.n_input;
        for &i in idxs {
            let s = &data.samples[i];
            if s.times() != times || s.n_input != n_input {
                return Err(CtpError::Input(String::from(
                    "batch mixes samples with different visit grids",
                )));
            }
        }
        if n_input == 0 {
            return Err(CtpError::Input(String::from("samples have no input visits")));
        }
        let b = idxs.len();
        let mut enc_rows = Vec::with_capacity(n_input);
        for j in 0..n_input {
            let mut row = vec![0.0; b * (2 * k + 1)];
            for (bi, &si) in idxs.iter().enumerate() {
                let v = &data.samples[si].visits[j];
                let off = bi * (2 * k + 1);
                for f in 0..k {
                    // Missing values are imputed as zero; the mask channel
                    // carries the missingness.
                    row[off + f] = if v.missing[f] == 1 { 0.0 } else { v.values[f] };
                    row[off + k + f] = v.missing[f] as f64;
                }
                row[off + 2 * k] = (v.t - times[0]) / cfg.time_scale;
            }
            enc_rows.push(Buf::from_vec(b, 2 * k + 1, row));
        }
        let n_visits = times.len();
        let mut targets = Vec::with_capacity(n_visits);
        let mut present_cont = Vec::with_capacity(n_visits);
        let mut present_disc = Vec::with_capacity(n_visits);
        for j in 0..n_visits {
            let mut t = vec![0.0; b * dim];
            let mut pc = vec![0.0; b * dim];
            let mut pd = vec![0.0; b * dim];
            for (bi, &si) in idxs.iter().enumerate() {
                let v = &data.samples[si].visits[j];
                for f in 0..k {
                    if v.missing[f] == 0 {
                        t[bi * dim + f] = v.values[f];
                        if cfg.discrete[f] {
                            pd[bi * dim + f] = 1.0;
                        } else {
                            pc[bi * dim + f] = 1.0;
                        }
                    }
                }
            }
            targets.push(Buf::from_vec(b, dim, t));
            present_cont.push(Buf::from_vec(b, dim, pc));
            present_disc.push(Buf::from_vec(b, dim, pd));
        }
        Ok(BatchData {
            times,
            n_input,
            batch: b,
            enc_rows,
            targets,
            present_cont,
            present_disc,
            has_disc: cfg.has_discrete(),
        })
    }

    pub fn single(cfg: &CtpConfig, data: &Dataset, idx: usize) -> Result<Self> {
        Self::new(cfg, data, &[idx])
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }
}

/// One tape plus the bound parameter nodes of one model.
pub struct ForwardPass<'m> {
    pub model: &'m CtpModel,
    pub tape: Tape,
    bound: Vec<NodeId>,
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m CtpModel) -> Self {
        let mut tape = Tape::new();
        let bound = tape.bind_params(&model.params);
        ForwardPass { model, tape, bound }
    }

    /// Encoder posterior over the initial latent state.
    pub fn encode(&mut self, batch: &BatchData) -> Result<(NodeId, NodeId)> {
        let xs: Vec<NodeId> = batch
            .enc_rows
            .iter()
            .map(|b| self.tape.constant(b.clone()))
            .collect();
        self.model.cfg.encoder_spec().encode_tape(
            &mut self.tape,
            &self.model.params,
            &self.bound,
            &xs,
        )
    }

    /// Reparameterized initial state.
    pub fn initial_state(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        mode: InitMode,
        rng: &mut Rng,
    ) -> NodeId {
        match mode {
            InitMode::Mean => mu,
            InitMode::Sample => {
                let v = self.tape.value(mu);
                let (r, c) = (v.rows, v.cols);
                let eps: Vec<f64> = (0..r * c).map(|_| rng.normal()).collect();
                let e = self.tape.constant(Buf::from_vec(r, c, eps));
                let se = self.tape.mul(sigma, e);
                self.tape.add(mu, se)
            }
        }
    }

    /// Masked derivative field at one batched state.
    fn derivative(
        &mut self,
        state: NodeId,
        mask_rows: &[NodeId],
        rng: &mut Rng,
    ) -> NodeId {
        let cfg = &self.model.cfg;
        let dim = cfg.dim();
        let mapped = if cfg.has_discrete() {
            let v = self.tape.value(state);
            let (r, c) = (v.rows, v.cols);
            let mut noise = vec![0.0; r * c];
            for i in 0..r {
                for f in 0..cfg.n_observed {
                    if cfg.discrete[f] {
                        noise[i * c + f] = rng.logistic();
                    }
                }
            }
            let soft = gumbel_sigmoid_tape(
                &mut self.tape,
                state,
                &Buf::from_vec(r, c, noise),
                cfg.gumbel_temperature,
                cfg.gumbel_hard,
            );
            let mut cont_row = vec![1.0; dim];
            let mut disc_row = vec![0.0; dim];
            for f in 0..cfg.n_observed {
                if cfg.discrete[f] {
                    cont_row[f] = 0.0;
                    disc_row[f] = 1.0;
                }
            }
            let cr = self.tape.constant(Buf::row_vec(cont_row));
            let dr = self.tape.constant(Buf::row_vec(disc_row));
            let keep = self.tape.mul_row(state, cr);
            let disc = self.tape.mul_row(soft, dr);
            self.tape.add(keep, disc)
        } else {
            state
        };
        let mut outs = Vec::with_capacity(dim);
        for k in 0..dim {
            let masked = self.tape.mul_row(mapped, mask_rows[k]);
            let spec = cfg.deriv_spec(k);
            outs.push(spec.forward_tape(&mut self.tape, &self.model.params, &self.bound, masked));
        }
        self.tape.concat_cols(&outs)
    }

    /// Fixed-step RK4 integration recording the state at every eval time.
    ///
    /// When a clamp is given, its onset must coincide with `t0` or one of
    /// the eval times so treated and untreated solves share one grid.
    pub fn solve(
        &mut self,
        v0: NodeId,
        t0: f64,
        eval_times: &[f64],
        mask: &CausalMask,
        rng: &mut Rng,
        clamp: Option<&StateClamp>,
    ) -> Result<Vec<NodeId>> {
        let cfg = &self.model.cfg;
        let dim = cfg.dim();
        if eval_times.windows(2).any(|w| w[1] <= w[0])
            || eval_times.first().map(|&t| t < t0).unwrap_or(false)
        {
            return Err(CtpError::Input(String::from(
                "eval times must be sorted, distinct, and >= t0",
            )));
        }
        if let Some(c) = clamp {
            if c.feature >= cfg.n_observed {
                return Err(CtpError::Input(String::from(
                    "clamped feature must be observed",
                )));
            }
            let on_grid = c.t_start <= t0
                || eval_times.iter().any(|&t| t == c.t_start)
                || c.t_start > *eval_times.last().unwrap_or(&t0);
            if !on_grid {
                return Err(CtpError::Input(String::from(
                    "clamp onset must lie on the evaluation grid",
                )));
            }
        }
        let mask_rows: Vec<NodeId> = (0..dim)
            .map(|k| {
                let row = mask.column_row(k);
                self.tape.constant(row)
            })
            .collect();
        let clamp_nodes = clamp.map(|c| {
            let mut keep = vec![1.0; dim];
            keep[c.feature] = 0.0;
            let mut put = vec![0.0; dim];
            put[c.feature] = c.value;
            let keep_n = self.tape.constant(Buf::row_vec(keep));
            let put_n = self.tape.constant(Buf::row_vec(put));
            (keep_n, put_n, c.t_start)
        });

        let mut state = v0;
        let mut t = t0;
        let mut active = false;
        let mut out = Vec::with_capacity(eval_times.len());

        let activate = |fp: &mut Self, state: NodeId, nodes: &(NodeId, NodeId, f64)| {
            let kept = fp.tape.mul_row(state, nodes.0);
            fp.tape.add_row(kept, nodes.1)
        };
        if let Some(nodes) = &clamp_nodes {
            if t >= nodes.2 {
                state = activate(self, state, nodes);
                active = true;
            }
        }

        for &target in eval_times {
            let span = target - t;
            if span > 0.0 {
                let h = span / cfg.substeps as f64;
                for _ in 0..cfg.substeps {
                    state = self.rk4_step(state, h, &mask_rows, rng, active.then(|| clamp_nodes.as_ref().unwrap().0));
                }
                t = target;
            }
            if let Some(nodes) = &clamp_nodes {
                if !active && t >= nodes.2 {
                    state = activate(self, state, nodes);
                    active = true;
                }
            }
            let v = self.tape.value(state);
            if !v.all_finite() {
                return Err(CtpError::Divergence { time: t });
            }
            out.push(state);
        }
        Ok(out)
    }

    fn rk4_step(
        &mut self,
        state: NodeId,
        h: f64,
        mask_rows: &[NodeId],
        rng: &mut Rng,
        zero_row: Option<NodeId>,
    ) -> NodeId {
        let deriv = |fp: &mut Self, s: NodeId, rng: &mut Rng| {
            let d = fp.derivative(s, mask_rows, rng);
            match zero_row {
                Some(zr) => fp.tape.mul_row(d, zr),
                None => d,
            }
        };
        let k1 = deriv(self, state, rng);
        let k1h = self.tape.scale(k1, h * 0.5);
        let s2 = self.tape.add(state, k1h);
        let k2 = deriv(self, s2, rng);
        let k2h = self.tape.scale(k2, h * 0.5);
        let s3 = self.tape.add(state, k2h);
        let k3 = deriv(self, s3, rng);
        let k3h = self.tape.scale(k3, h);
        let s4 = self.tape.add(state, k3h);
        let k4 = deriv(self, s4, rng);
        let k22 = self.tape.scale(k2, 2.0);
        let k32 = self.tape.scale(k3, 2.0);
        let a = self.tape.add(k1, k22);
        let b = self.tape.add(a, k32);
        let c = self.tape.add(b, k4);
        let inc = self.tape.scale(c, h / 6.0);
        self.tape.add(state, inc)
    }

    /// Data loss over all visits: squared error on continuous entries,
    /// clamped cross-entropy on discrete ones, zero where missing.
    pub fn data_loss(&mut self, states: &[NodeId], batch: &BatchData) -> NodeId {
        assert_eq!(states.len(), batch.times.len());
        let mut total: Option<NodeId> = None;
        for (j, &s) in states.iter().enumerate() {
            let tgt = self.tape.constant(batch.targets[j].clone());
            let pc = self.tape.constant(batch.present_cont[j].clone());
            let d = self.tape.sub(s, tgt);
            let sq = self.tape.mul(d, d);
            let m = self.tape.mul(sq, pc);
            let mut part = self.tape.sum(m);
            if batch.has_disc {
                let pd = self.tape.constant(batch.present_disc[j].clone());
                let p = self.tape.sigmoid(s);
                let pcl = self.tape.clamp(p, 1e-6, 1.0 - 1e-6);
                let lnp = self.tape.ln(pcl);
                let ones = {
                    let v = self.tape.value(pcl);
                    let b = Buf::from_vec(v.rows, v.cols, vec![1.0; v.len()]);
                    self.tape.constant(b)
                };
                let q = self.tape.sub(ones, pcl);
                let lnq = self.tape.ln(q);
                let tq = self.tape.sub(ones, tgt);
                let a = self.tape.mul(tgt, lnp);
                let b = self.tape.mul(tq, lnq);
                let ce = self.tape.add(a, b);
                let ce_masked = self.tape.mul(ce, pd);
                let ce_sum = self.tape.sum(ce_masked);
                let neg = self.tape.scale(ce_sum, -1.0);
                part = self.tape.add(part, neg);
            }
            total = Some(match total {
                Some(acc) => self.tape.add(acc, part),
                None => part,
            });
        }
        total.expect("at least one visit")
    }

    /// Connectivity matrix on the tape, masked by the causal mask.
    pub fn connectivity(&mut self, mask: &CausalMask) -> NodeId {
        let cfg = &self.model.cfg;
        let dim = cfg.dim();
        let cols: Vec<NodeId> = (0..dim)
            .map(|k| {
                let spec = cfg.deriv_spec(k);
                spec.connectivity_tape(&mut self.tape, &self.model.params, &self.bound)
            })
            .collect();
        let dmat = self.tape.concat_cols(&cols);
        let mf: Vec<f64> = mask.m.iter().map(|&v| v as f64).collect();
        let mn = self.tape.constant(Buf::from_vec(dim, dim, mf));
        self.tape.mul(dmat, mn)
    }

    /// Sparse and acyclicity penalties from a connectivity node.
    pub fn penalties(&mut self, dmat: NodeId) -> Result<(NodeId, NodeId)> {
        let dim = self.tape.value(dmat).rows;
        let g = self.tape.sum(dmat);
        let mut offdiag = vec![1.0; dim * dim];
        for i in 0..dim {
            offdiag[i * dim + i] = 0.0;
        }
        let od = self.tape.constant(Buf::from_vec(dim, dim, offdiag));
        let b = self.tape.mul(dmat, od);
        let e = self.expm(b)?;
        let tr = self.tape.trace(e);
        let dim_node = self.tape.constant(Buf::scalar(dim as f64));
        let h = self.tape.sub(tr, dim_node);
        Ok((g, h))
    }

    /// Matrix exponential via scaling-and-squaring with an on-tape Taylor
    /// series run to machine precision.
    fn expm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.tape.value(a);
        let n = v.rows;
        assert_eq!(v.rows, v.cols);
        let norm1 = (0..n)
            .map(|j| (0..n).map(|i| v.at(i, j).abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        if !norm1.is_finite() {
            return Err(CtpError::NumericFailure(String::from(
                "non-finite connectivity in dag penalty",
            )));
        }
        let squarings = if norm1 > 0.5 {
            libm::ceil(libm::log2(norm1 / 0.5)) as u32
        } else {
            0
        };
        if squarings > 60 {
            return Err(CtpError::NumericFailure(String::from(
                "dag penalty overflow: connectivity norm too large",
            )));
        }
        let scaled = self.tape.scale(a, libm::pow(2.0, -(squarings as f64)));
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let mut acc = self.tape.constant(Buf::from_vec(n, n, eye));
        let mut term = acc;
        for k in 1..80u32 {
            let m = self.tape.matmul(term, scaled);
            term = self.tape.scale(m, 1.0 / k as f64);
            acc = self.tape.add(acc, term);
            let maxabs = self
                .tape
                .value(term)
                .data
                .iter()
                .fold(0.0f64, |mx, v| mx.max(v.abs()));
            if maxabs < 1e-18 {
                break;
            }
        }
        for _ in 0..squarings {
            acc = self.tape.matmul(acc, acc);
        }
        Ok(acc)
    }

    /// Optional standard-normal KL of the encoder posterior.
    fn kl_term(&mut self, mu: NodeId, sigma: NodeId) -> NodeId {
        let musq = self.tape.mul(mu, mu);
        let sigsq = self.tape.mul(sigma, sigma);
        let lns = self.tape.ln(sigma);
        let twoln = self.tape.scale(lns, 2.0);
        let v = self.tape.value(mu);
        let ones = {
            let b = Buf::from_vec(v.rows, v.cols, vec![1.0; v.len()]);
            self.tape.constant(b)
        };
        let a = self.tape.add(ones, twoln);
        let b = self.tape.sub(a, musq);
        let c = self.tape.sub(b, sigsq);
        let s = self.tape.sum(c);
        self.tape.scale(s, -0.5)
    }

    /// Full objective: data loss + beta*g + (rho/2)*h^2 + alpha*h.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &mut self,
        batch: &BatchData,
        mask: &CausalMask,
        beta: f64,
        alpha: f64,
        rho: f64,
        mode: InitMode,
        rng: &mut Rng,
    ) -> Result<(NodeId, LossParts)> {
        let (mu, sigma) = self.encode(batch)?;
        let v0 = self.initial_state(mu, sigma, mode, rng);
        let states = self.solve(v0, batch.t0(), &batch.times, mask, rng, None)?;
        let data = self.data_loss(&states, batch);
        let dmat = self.connectivity(mask);
        let (g, h) = self.penalties(dmat)?;

        let mut total = data;
        let mut kl_val = 0.0;
        if self.model.cfg.kl_weight > 0.0 {
            let kl = self.kl_term(mu, sigma);
            let klw = self.tape.scale(kl, self.model.cfg.kl_weight);
            kl_val = self.tape.scalar_value(kl);
            total = self.tape.add(total, klw);
        }
        if beta != 0.0 {
            let gs = self.tape.scale(g, beta);
            total = self.tape.add(total, gs);
        }
        if rho != 0.0 {
            let h2 = self.tape.mul(h, h);
            let h2s = self.tape.scale(h2, 0.5 * rho);
            total = self.tape.add(total, h2s);
        }
        if alpha != 0.0 {
            let ha = self.tape.scale(h, alpha);
            total = self.tape.add(total, ha);
        }
        let parts = LossParts {
            total: self.tape.scalar_value(total),
            data: self.tape.scalar_value(data),
            sparse: self.tape.scalar_value(g),
            dag: self.tape.scalar_value(h),
            kl: kl_val,
        };
        Ok((total, parts))
    }
}

impl CtpModel {
    /// Encode one sample and draw (or take) the initial latent state.
    pub fn encode_initial(
        &self,
        data: &Dataset,
        sample_idx: usize,
        mode: InitMode,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let batch = BatchData::single(&self.cfg, data, sample_idx)?;
        let mut fp = ForwardPass::new(self);
        let (mu, sigma) = fp.encode(&batch)?;
        let v0 = fp.initial_state(mu, sigma, mode, rng);
        Ok((
            fp.tape.value(mu).data.clone(),
            fp.tape.value(sigma).data.clone(),
            fp.tape.value(v0).data.clone(),
        ))
    }

    /// Encode a sample and integrate its latent trajectory at `eval_times`,
    /// optionally under a do-intervention.
    #[allow(clippy::too_many_arguments)]
    pub fn trajectory(
        &self,
        data: &Dataset,
        sample_idx: usize,
        eval_times: &[f64],
        mask: &CausalMask,
        mode: InitMode,
        rng: &mut Rng,
        clamp: Option<&StateClamp>,
    ) -> Result<LatentTrajectory> {
        let batch = BatchData::single(&self.cfg, data, sample_idx)?;
        let mut fp = ForwardPass::new(self);
        let (mu, sigma) = fp.encode(&batch)?;
        let v0 = fp.initial_state(mu, sigma, mode, rng);
        let states = fp.solve(v0, batch.t0(), eval_times, mask, rng, clamp)?;
        let states: Vec<Vec<f64>> = states
            .iter()
            .map(|&s| fp.tape.value(s).data.clone())
            .collect();
        let mapped = states.iter().map(|s| self.map_state(s)).collect();
        Ok(LatentTrajectory {
            times: eval_times.to_vec(),
            states,
            mapped,
        })
    }
}
