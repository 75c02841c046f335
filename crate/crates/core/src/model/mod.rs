//! The causal trajectory prediction model.
//!
//! A model is an LSTM encoder producing a Gaussian over the latent initial
//! state (observed features plus one hidden-confounder slot) and `K+1`
//! bias-free derivative networks, one per latent dimension, whose inputs are
//! hard-multiplied by a causal mask. The absolute-weight product of each
//! network yields a nonnegative connectivity matrix; a sparse penalty and an
//! acyclicity penalty on that matrix steer training toward a DAG.

mod forward;

pub use forward::{BatchData, ForwardPass, InitMode, LossParts, StateClamp};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::math;
use crate::nn::{LstmEncoderSpec, MlpSpec};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{matmul_into, Buf};
use crate::Result;

/// Architecture and behaviour knobs; everything a checkpoint needs to
/// rebuild the exact model.
#[derive(Debug, Clone, PartialEq)]
pub struct CtpConfig {
    /// Number of observed features `K`.
    pub n_observed: usize,
    /// Per-feature discreteness flags (length `K`).
    pub discrete: Vec<bool>,
    /// Encoder recurrent width.
    pub enc_hidden: usize,
    /// Hidden widths of every derivative network.
    pub deriv_hidden: Vec<usize>,
    /// RK4 substeps per inter-visit interval during model integration.
    pub substeps: usize,
    /// Whether the confounder slot may feed the observed networks.
    pub confounder_out: bool,
    pub gumbel_temperature: f64,
    pub gumbel_hard: bool,
    /// Weight of the optional standard-normal KL term (0 disables it).
    pub kl_weight: f64,
    /// Scale dividing the time channel fed to the encoder.
    pub time_scale: f64,
    /// Replace each derivative network with a single affine map (the
    /// linear-dynamics baseline).
    pub linear_derivatives: bool,
    /// Shrink factor applied to the derivative networks' initial weights.
    /// Keeps the initial connectivity (and with it the acyclicity
    /// constraint) small enough for the multiplier schedule to engage.
    pub deriv_init_scale: f64,
}

impl CtpConfig {
    pub fn new(n_observed: usize) -> Self {
        CtpConfig {
            n_observed,
            discrete: vec![false; n_observed],
            enc_hidden: 64,
            deriv_hidden: vec![64, 64],
            substeps: 4,
            confounder_out: true,
            gumbel_temperature: 1.0,
            gumbel_hard: false,
            kl_weight: 0.0,
            time_scale: 1.0,
            linear_derivatives: false,
            deriv_init_scale: 0.3,
        }
    }

    /// Latent dimension `K+1`.
    pub fn dim(&self) -> usize {
        self.n_observed + 1
    }

    pub fn has_discrete(&self) -> bool {
        self.discrete.iter().any(|d| *d)
    }

    /// Encoder consumes `[values, missing-mask, scaled time]` per visit.
    pub fn enc_input_dim(&self) -> usize {
        2 * self.n_observed + 1
    }

    pub fn encoder_spec(&self) -> LstmEncoderSpec {
        LstmEncoderSpec::new("enc", self.enc_input_dim(), self.enc_hidden, self.dim())
    }

    pub fn deriv_spec(&self, k: usize) -> MlpSpec {
        let mut dims = vec![self.dim()];
        if !self.linear_derivatives {
            dims.extend_from_slice(&self.deriv_hidden);
        }
        dims.push(1);
        // Bias-free: the connectivity product certifies input reachability,
        // and the linear baseline keeps an intercept instead.
        MlpSpec::new(&format!("f{k}"), &dims, self.linear_derivatives)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_observed == 0 {
            return Err(CtpError::Config(String::from("need at least one feature")));
        }
        if self.discrete.len() != self.n_observed {
            return Err(CtpError::Config(String::from(
                "discrete flags length != feature count",
            )));
        }
        if self.substeps == 0 {
            return Err(CtpError::Config(String::from("substeps must be >= 1")));
        }
        if self.gumbel_temperature <= 0.0 {
            return Err(CtpError::Config(String::from(
                "gumbel temperature must be positive",
            )));
        }
        Ok(())
    }
}

/// Binary edge matrix `m` plus undecided flags (`1` = still open).
///
/// Entry `(i, j)` says feature `i` may drive the derivative of feature `j`;
/// column `j` multiplies the input of derivative network `j`. The structural
/// zeros keep observed features from causing the hidden confounder.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMask {
    pub dim: usize,
    pub m: Vec<u8>,
    pub undecided: Vec<u8>,
}

impl CausalMask {
    /// Everything-allowed initialization with the confounder column pinned:
    /// observed features never cause the confounder, only its own slot may.
    pub fn init(dim: usize, confounder_out: bool) -> Self {
        let k = dim - 1;
        let mut m = vec![1u8; dim * dim];
        let mut und = vec![1u8; dim * dim];
        for i in 0..k {
            m[i * dim + k] = 0;
            und[i * dim + k] = 0;
        }
        if !confounder_out {
            for j in 0..k {
                m[k * dim + j] = 0;
                und[k * dim + j] = 0;
            }
        }
        CausalMask { dim, m, undecided: und }
    }

    pub fn all_ones(dim: usize) -> Self {
        CausalMask {
            dim,
            m: vec![1; dim * dim],
            undecided: vec![0; dim * dim],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.m[i * self.dim + j]
    }

    pub fn set_decided(&mut self, i: usize, j: usize, present: bool) {
        self.m[i * self.dim + j] = present as u8;
        self.undecided[i * self.dim + j] = 0;
    }

    pub fn n_undecided(&self) -> usize {
        self.undecided.iter().filter(|u| **u == 1).count()
    }

    pub fn fully_decided(&self) -> bool {
        self.n_undecided() == 0
    }

    /// Input mask for derivative network `j` as an `(1, dim)` row.
    pub fn column_row(&self, j: usize) -> Buf {
        let data = (0..self.dim)
            .map(|i| self.m[i * self.dim + j] as f64)
            .collect();
        Buf::row_vec(data)
    }

    /// Entries of the unmeasured-confounder column that are structurally
    /// zero and therefore excluded from voting and scoring.
    pub fn structural_zero(&self, i: usize, j: usize) -> bool {
        j == self.dim - 1 && i < self.dim - 1
    }

    /// Mark every entry decided at its current value.
    pub fn freeze(&self) -> CausalMask {
        CausalMask {
            dim: self.dim,
            m: self.m.clone(),
            undecided: alloc::vec![0; self.dim * self.dim],
        }
    }

    /// Descendants of `src` under the decided edge set, excluding self-loops.
    pub fn descendants(&self, src: usize) -> Vec<usize> {
        let mut seen = vec![false; self.dim];
        let mut stack = vec![src];
        while let Some(v) = stack.pop() {
            for w in 0..self.dim {
                if w != v && self.get(v, w) == 1 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen[src] = false;
        (0..self.dim).filter(|&w| seen[w]).collect()
    }
}

/// Nonnegative `(K+1) x (K+1)` matrix; entry `(j, k)` measures how much
/// input `j` can influence derivative network `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ConnectivityMatrix {
    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.dim + k]
    }
}

/// Sum of all connectivity entries (the sparsity penalty).
pub fn sparse_penalty(d: &ConnectivityMatrix) -> f64 {
    d.values.iter().sum()
}

/// Acyclicity penalty `Tr(exp((1 - I) o D)) - dim`.
///
/// Self-loops are free: the diagonal is masked out before the matrix
/// exponential, so the penalty is zero exactly when the off-diagonal
/// support is acyclic. The subtracted constant is the matrix dimension
/// `K+1`, which the zero-at-DAG property forces.
pub fn dag_penalty(d: &ConnectivityMatrix) -> Result<f64> {
    let n = d.dim;
    let mut b = d.values.clone();
    for i in 0..n {
        b[i * n + i] = 0.0;
    }
    let e = matrix_exp(&b, n)?;
    let trace: f64 = (0..n).map(|i| e[i * n + i]).sum();
    if !trace.is_finite() {
        return Err(CtpError::NumericFailure(String::from(
            "matrix exponential overflow in dag penalty",
        )));
    }
    Ok(trace - n as f64)
}

/// Dense matrix exponential by scaling-and-squaring with a Taylor series
/// run to machine precision.
pub fn matrix_exp(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if !norm1.is_finite() {
        return Err(CtpError::NumericFailure(String::from(
            "non-finite entries in matrix exponential",
        )));
    }
    let squarings = if norm1 > 0.5 {
        libm::ceil(libm::log2(norm1 / 0.5)) as u32
    } else {
        0
    };
    let scale = libm::pow(2.0, -(squarings as f64));
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut acc = vec![0.0; n * n];
    for i in 0..n {
        acc[i * n + i] = 1.0;
    }
    let mut term = acc.clone();
    for k in 1..200 {
        let mut next = vec![0.0; n * n];
        matmul_into(&term, &scaled, &mut next, n, n, n);
        next.iter_mut().for_each(|v| *v /= k as f64);
        term = next;
        let maxabs = term.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        acc.iter_mut().zip(&term).for_each(|(x, t)| *x += t);
        if maxabs < 1e-300 {
            break;
        }
        if !maxabs.is_finite() {
            return Err(CtpError::NumericFailure(String::from(
                "matrix exponential series diverged",
            )));
        }
        if maxabs < f64::EPSILON * 1e-2 {
            break;
        }
    }
    for _ in 0..squarings {
        let mut sq = vec![0.0; n * n];
        matmul_into(&acc, &acc, &mut sq, n, n, n);
        acc = sq;
    }
    Ok(acc)
}

/// Latent trajectory: states at the requested times, plus the mapped
/// values (identity for continuous slots, sigmoid probability for
/// discrete ones) used for read-out.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    /// One `(dim)` state per time.
    pub states: Vec<Vec<f64>>,
    pub mapped: Vec<Vec<f64>>,
}

/// Model = config + weights. Plain value type; clone to copy a model.
#[derive(Debug, Clone)]
pub struct CtpModel {
    pub cfg: CtpConfig,
    pub params: ParamStore,
}

impl CtpModel {
    /// Fresh model with Xavier-initialized weights; derivative networks
    /// are additionally shrunk by `deriv_init_scale`.
    pub fn init(cfg: CtpConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        cfg.encoder_spec().init(&mut params, rng);
        for k in 0..cfg.dim() {
            cfg.deriv_spec(k).init(&mut params, rng);
        }
        if cfg.deriv_init_scale != 1.0 {
            for i in 0..params.len() {
                if params.name(i).starts_with('f') {
                    let s = cfg.deriv_init_scale;
                    params.buf_mut(i).data.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        Ok(CtpModel { cfg, params })
    }

    pub fn from_parts(cfg: CtpConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        // Shape check: every expected array must exist with matching dims.
        let mut expected = ParamStore::new();
        let mut rng = Rng::new(0);
        cfg.encoder_spec().init(&mut expected, &mut rng);
        for k in 0..cfg.dim() {
            cfg.deriv_spec(k).init(&mut expected, &mut rng);
        }
        if expected.len() != params.len() {
            return Err(CtpError::Config(format!(
                "parameter store has {} arrays, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for i in 0..expected.len() {
            let (en, eb, _) = (expected.name(i), expected.buf(i), ());
            let pi = params.index_of(en).ok_or_else(|| {
                CtpError::Config(format!("missing parameter array {en}"))
            })?;
            let pb = params.buf(pi);
            if (pb.rows, pb.cols) != (eb.rows, eb.cols) {
                return Err(CtpError::Config(format!(
                    "parameter {en}: shape ({}, {}) != expected ({}, {})",
                    pb.rows, pb.cols, eb.rows, eb.cols
                )));
            }
        }
        if !params.all_finite() {
            return Err(CtpError::NumericFailure(String::from(
                "non-finite weights in parameter store",
            )));
        }
        Ok(CtpModel { cfg, params })
    }

    /// Connectivity matrix: per network the absolute-weight product, then
    /// zeroed wherever the causal mask removes the input.
    pub fn connectivity(&self, mask: &CausalMask) -> ConnectivityMatrix {
        let dim = self.cfg.dim();
        let mut values = vec![0.0; dim * dim];
        for k in 0..dim {
            let col = self.cfg.deriv_spec(k).connectivity(&self.params);
            debug_assert_eq!(col.len(), dim);
            for j in 0..dim {
                values[j * dim + k] = if mask.get(j, k) == 1 { col[j] } else { 0.0 };
            }
        }
        ConnectivityMatrix { dim, values }
    }

    /// Single-state derivative field evaluation (mainly for tests; training
    /// uses the batched tape path).
    pub fn derivative_point(
        &self,
        state: &[f64],
        mask: &CausalMask,
        rng: Option<&mut Rng>,
    ) -> Result<Vec<f64>> {
        let dim = self.cfg.dim();
        if state.len() != dim {
            return Err(CtpError::Config(String::from("state length != K+1")));
        }
        let mut mapped = state.to_vec();
        if self.cfg.has_discrete() {
            let rng = rng.expect("rng required when discrete features present");
            for (f, &d) in self.cfg.discrete.iter().enumerate() {
                if d {
                    mapped[f] = crate::nn::gumbel_sigmoid(
                        state[f],
                        self.cfg.gumbel_temperature,
                        self.cfg.gumbel_hard,
                        rng,
                    );
                }
            }
        }
        let mut out = vec![0.0; dim];
        let mut masked = vec![0.0; dim];
        for k in 0..dim {
            for j in 0..dim {
                masked[j] = mapped[j] * mask.get(j, k) as f64;
            }
            out[k] = self.cfg.deriv_spec(k).forward(&self.params, &masked)?[0];
        }
        Ok(out)
    }

    /// Map a raw latent state to read-out space.
    pub fn map_state(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                if f < self.cfg.n_observed && self.cfg.discrete[f] {
                    math::sigmoid(v)
                } else {
                    v
                }
            })
            .collect()
    }
}
