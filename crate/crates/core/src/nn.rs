//! Neural building blocks: bias-optional feed-forward nets, a recurrent
//! (LSTM) sequence encoder, and the Gumbel-sigmoid relaxation.
//!
//! Networks are described by small spec structs; their weights live in a
//! [`ParamStore`] under a name prefix, and forward passes are recorded on a
//! [`Tape`]. Plain (tape-free) forward helpers exist for evaluation paths
//! that never need gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::math;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{matmul_into, Buf, NodeId, Tape};
use crate::Result;

/// Feed-forward network: affine maps with tanh between them, linear output.
///
/// Weights are stored `(fan_in, fan_out)` so a batched forward is a plain
/// `X @ W` per layer. With `bias` false the map is purely linear, which is
/// what makes the absolute-weight connectivity product meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub prefix: String,
    /// Layer widths, input first, output last. `[in, h1, ..., out]`.
    pub dims: Vec<usize>,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(prefix: &str, dims: &[usize], bias: bool) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        MlpSpec {
            prefix: String::from(prefix),
            dims: dims.to_vec(),
            bias,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn w_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    fn b_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    /// Register Xavier-uniform initialized weights.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in 0..self.n_layers() {
            let (fi, fo) = (self.dims[l], self.dims[l + 1]);
            let s = math::sqrt(6.0 / (fi + fo) as f64);
            let data = (0..fi * fo).map(|_| rng.uniform_in(-s, s)).collect();
            store.add(&self.w_name(l), Buf::from_vec(fi, fo, data), true);
            if self.bias {
                store.add(&self.b_name(l), Buf::zeros(1, fo), true);
            }
        }
    }

    fn weight_index(&self, store: &ParamStore, layer: usize) -> usize {
        store
            .index_of(&self.w_name(layer))
            .expect("mlp weights not registered")
    }

    /// Forward on the tape. `x` is `(batch, input_dim)`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &[NodeId],
        x: NodeId,
    ) -> NodeId {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = bound[self.weight_index(store, l)];
            h = tape.matmul(h, w);
            if self.bias {
                let b = bound[store.index_of(&self.b_name(l)).unwrap()];
                h = tape.add_row(h, b);
            }
            if l + 1 < self.n_layers() {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Plain forward for a single input vector.
    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(CtpError::Config(format!(
                "mlp {}: input length {} != {}",
                self.prefix,
                input.len(),
                self.input_dim()
            )));
        }
        let mut h = input.to_vec();
        for l in 0..self.n_layers() {
            let w = store.buf(self.weight_index(store, l));
            let mut out = vec![0.0; self.dims[l + 1]];
            matmul_into(&h, &w.data, &mut out, 1, self.dims[l], self.dims[l + 1]);
            if self.bias {
                let b = store.buf(store.index_of(&self.b_name(l)).unwrap());
                out.iter_mut().zip(&b.data).for_each(|(o, bv)| *o += bv);
            }
            if l + 1 < self.n_layers() {
                out.iter_mut().for_each(|v| *v = math::tanh(*v));
            }
            h = out;
        }
        Ok(h)
    }

    /// Absolute-weight product `|W_N| ... |W_1|`, one connectivity value per
    /// input: entry `j` is zero exactly when input `j` cannot reach the
    /// output through the weight layers.
    pub fn connectivity(&self, store: &ParamStore) -> Vec<f64> {
        // Stored as (fan_in, fan_out), so the product runs in layer order.
        let w0 = store.buf(self.weight_index(store, 0));
        let mut acc: Vec<f64> = w0.data.iter().map(|v| v.abs()).collect();
        let mut acc_cols = w0.cols;
        for l in 1..self.n_layers() {
            let w = store.buf(self.weight_index(store, l));
            let mut next = vec![0.0; self.dims[0] * w.cols];
            let abs_w: Vec<f64> = w.data.iter().map(|v| v.abs()).collect();
            matmul_into(&acc, &abs_w, &mut next, self.dims[0], acc_cols, w.cols);
            acc = next;
            acc_cols = w.cols;
        }
        debug_assert_eq!(acc_cols, self.output_dim());
        acc
    }

    /// Tape version of [`Self::connectivity`] for penalty gradients.
    /// Output shape `(input_dim, output_dim)`.
    pub fn connectivity_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &[NodeId],
    ) -> NodeId {
        let mut acc = {
            let w = bound[self.weight_index(store, 0)];
            tape.abs(w)
        };
        for l in 1..self.n_layers() {
            let w = bound[self.weight_index(store, l)];
            let wa = tape.abs(w);
            acc = tape.matmul(acc, wa);
        }
        acc
    }
}

/// LSTM sequence encoder producing a Gaussian over the initial latent state.
///
/// Visits are consumed in order as `[values, missing-mask, time]` rows; the
/// final hidden state feeds two affine heads. The scale head passes through
/// `exp`, keeping sigma strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmEncoderSpec {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

impl LstmEncoderSpec {
    pub fn new(prefix: &str, input_dim: usize, hidden: usize, out_dim: usize) -> Self {
        LstmEncoderSpec {
            prefix: String::from(prefix),
            input_dim,
            hidden,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let sx = math::sqrt(6.0 / (self.input_dim + self.hidden) as f64);
        let sh = math::sqrt(6.0 / (2 * self.hidden) as f64);
        for gate in GATES {
            let wx = (0..self.input_dim * self.hidden)
                .map(|_| rng.uniform_in(-sx, sx))
                .collect();
            let wh = (0..self.hidden * self.hidden)
                .map(|_| rng.uniform_in(-sh, sh))
                .collect();
            store.add(
                &format!("{}.wx_{gate}", self.prefix),
                Buf::from_vec(self.input_dim, self.hidden, wx),
                true,
            );
            store.add(
                &format!("{}.wh_{gate}", self.prefix),
                Buf::from_vec(self.hidden, self.hidden, wh),
                true,
            );
            store.add(&format!("{}.b_{gate}", self.prefix), Buf::zeros(1, self.hidden), true);
        }
        let so = math::sqrt(6.0 / (self.hidden + self.out_dim) as f64);
        for head in ["mu", "sig"] {
            let w = (0..self.hidden * self.out_dim)
                .map(|_| rng.uniform_in(-so, so))
                .collect();
            store.add(
                &format!("{}.w_{head}", self.prefix),
                Buf::from_vec(self.hidden, self.out_dim, w),
                true,
            );
            store.add(&format!("{}.b_{head}", self.prefix), Buf::zeros(1, self.out_dim), true);
        }
    }

    fn node(&self, store: &ParamStore, bound: &[NodeId], name: &str) -> NodeId {
        bound[store
            .index_of(&format!("{}.{name}", self.prefix))
            .expect("encoder weights not registered")]
    }

    /// Encode a batch of visit sequences already packed as constant rows.
    ///
    /// `xs[t]` is the `(batch, input_dim)` input at visit `t`. Returns
    /// `(mu, sigma)` nodes of shape `(batch, out_dim)`.
    pub fn encode_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bound: &[NodeId],
        xs: &[NodeId],
    ) -> Result<(NodeId, NodeId)> {
        if xs.is_empty() {
            return Err(CtpError::Input(String::from(
                "encoder: empty visit sequence",
            )));
        }
        let batch = tape.value(xs[0]).rows;
        let mut h = tape.constant(Buf::zeros(batch, self.hidden));
        let mut c = tape.constant(Buf::zeros(batch, self.hidden));
        for &x in xs {
            let mut pre = [None::<NodeId>; 4];
            for (gi, gate) in GATES.iter().enumerate() {
                let wx = self.node(store, bound, &format!("wx_{gate}"));
                let wh = self.node(store, bound, &format!("wh_{gate}"));
                let b = self.node(store, bound, &format!("b_{gate}"));
                let xa = tape.matmul(x, wx);
                let ha = tape.matmul(h, wh);
                let s = tape.add(xa, ha);
                pre[gi] = Some(tape.add_row(s, b));
            }
            let gi = tape.sigmoid(pre[0].unwrap());
            let gf = tape.sigmoid(pre[1].unwrap());
            let gg = tape.tanh(pre[2].unwrap());
            let go = tape.sigmoid(pre[3].unwrap());
            let fc = tape.mul(gf, c);
            let ig = tape.mul(gi, gg);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(go, tc);
        }
        let w_mu = self.node(store, bound, "w_mu");
        let b_mu = self.node(store, bound, "b_mu");
        let w_sig = self.node(store, bound, "w_sig");
        let b_sig = self.node(store, bound, "b_sig");
        let mu_a = tape.matmul(h, w_mu);
        let mu = tape.add_row(mu_a, b_mu);
        let sig_a = tape.matmul(h, w_sig);
        let raw = tape.add_row(sig_a, b_sig);
        let sigma = tape.exp(raw);
        Ok((mu, sigma))
    }

    /// Plain single-sequence encode; returns `(mu, sigma)`.
    pub fn encode(&self, store: &ParamStore, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = tape.bind_params(store);
        let xnodes: Vec<NodeId> = xs
            .iter()
            .map(|x| tape.constant(Buf::from_vec(1, x.len(), x.clone())))
            .collect();
        let (mu, sigma) = self.encode_tape(&mut tape, store, &bound, &xnodes)?;
        Ok((tape.value(mu).data.clone(), tape.value(sigma).data.clone()))
    }
}

/// One Gumbel-sigmoid draw.
///
/// Soft mode returns `sigmoid((logit + g) / temperature)` with logistic
/// noise `g`; hard mode thresholds that value at one half. Gradients for the
/// hard variant follow the soft value (straight-through), which only matters
/// for the tape version below.
pub fn gumbel_sigmoid(logit: f64, temperature: f64, hard: bool, rng: &mut Rng) -> f64 {
    assert!(temperature > 0.0, "temperature must be positive");
    let g = rng.logistic();
    let soft = math::sigmoid((logit + g) / temperature);
    if hard {
        if soft > 0.5 {
            1.0
        } else {
            0.0
        }
    } else {
        soft
    }
}

/// Tape Gumbel-sigmoid over a `(batch, cols)` logit node.
///
/// `noise` must hold one logistic draw per entry. In hard mode the forward
/// value is thresholded while gradients flow through the soft sigmoid.
pub fn gumbel_sigmoid_tape(
    tape: &mut Tape,
    logits: NodeId,
    noise: &Buf,
    temperature: f64,
    hard: bool,
) -> NodeId {
    let g = tape.constant(noise.clone());
    let shifted = tape.add(logits, g);
    let scaled = tape.scale(shifted, 1.0 / temperature);
    let soft = tape.sigmoid(scaled);
    if !hard {
        return soft;
    }
    let sv = tape.value(soft);
    let delta: Vec<f64> = sv
        .data
        .iter()
        .map(|&s| if s > 0.5 { 1.0 - s } else { -s })
        .collect();
    let d = tape.constant(Buf::from_vec(sv.rows, sv.cols, delta));
    tape.add(soft, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_mlp_outputs_zero() {
        let spec = MlpSpec::new("net", &[3, 4, 1], false);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        spec.init(&mut store, &mut rng);
        for i in 0..store.len() {
            store.buf_mut(i).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = spec.forward(&store, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let spec = MlpSpec::new("net", &[3, 3], false);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        spec.init(&mut store, &mut rng);
        let w = store.buf_mut(store.index_of("net.w0").unwrap());
        w.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let out = spec.forward(&store, &[0.5, -1.5, 2.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn input_length_mismatch_is_config_error() {
        let spec = MlpSpec::new("net", &[3, 1], false);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        spec.init(&mut store, &mut rng);
        assert!(matches!(
            spec.forward(&store, &[1.0]),
            Err(CtpError::Config(_))
        ));
    }

    #[test]
    fn fixed_net_matches_straight_line_reimplementation() {
        // Independent oracle: evaluate the same affine/tanh chain with raw
        // loops over the weight buffers.
        let spec = MlpSpec::new("net", &[2, 3, 1], false);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(42);
        spec.init(&mut store, &mut rng);
        let x = [0.7, -1.2];

        let w0 = store.buf(store.index_of("net.w0").unwrap());
        let w1 = store.buf(store.index_of("net.w1").unwrap());
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut s = 0.0;
            for (i, xv) in x.iter().enumerate() {
                s += xv * w0.at(i, j);
            }
            h[j] = math::tanh(s);
        }
        let mut expect = 0.0;
        for (j, hv) in h.iter().enumerate() {
            expect += hv * w1.at(j, 0);
        }

        let got = spec.forward(&store, &x).unwrap();
        assert!((got[0] - expect).abs() < 1e-12, "{} vs {expect}", got[0]);
    }

    #[test]
    fn bias_free_final_layer_is_positively_homogeneous() {
        let spec = MlpSpec::new("net", &[2, 4, 1], false);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        spec.init(&mut store, &mut rng);
        let x = [0.3, 0.9];
        let base = spec.forward(&store, &x).unwrap()[0];
        let c = 3.5;
        let wn = store.index_of("net.w1").unwrap();
        store.buf_mut(wn).data.iter_mut().for_each(|v| *v *= c);
        let scaled = spec.forward(&store, &x).unwrap()[0];
        assert!((scaled - c * base).abs() < 1e-12);
    }

    #[test]
    fn zeroed_lstm_returns_head_biases() {
        let spec = LstmEncoderSpec::new("enc", 5, 6, 2);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        spec.init(&mut store, &mut rng);
        for i in 0..store.len() {
            store.buf_mut(i).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let bm = store.index_of("enc.b_mu").unwrap();
        store.buf_mut(bm).data.copy_from_slice(&[0.4, -0.7]);
        let bs = store.index_of("enc.b_sig").unwrap();
        store.buf_mut(bs).data.copy_from_slice(&[0.0, 1.0]);

        let xs = vec![vec![1.0; 5], vec![-3.0; 5]];
        let (mu, sigma) = spec.encode(&store, &xs).unwrap();
        assert!((mu[0] - 0.4).abs() < 1e-12 && (mu[1] + 0.7).abs() < 1e-12);
        assert!((sigma[0] - 1.0).abs() < 1e-12);
        assert!((sigma[1] - math::exp(1.0)).abs() < 1e-12);

        // Independent of the sequence content.
        let ys = vec![vec![9.0; 5]];
        let (mu2, _) = spec.encode(&store, &ys).unwrap();
        assert_eq!(mu, mu2);
    }

    #[test]
    fn lstm_is_order_sensitive() {
        let spec = LstmEncoderSpec::new("enc", 3, 8, 2);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        spec.init(&mut store, &mut rng);
        let a = vec![vec![1.0, 0.0, 0.5], vec![-1.0, 1.0, 0.2], vec![0.3, 0.3, 0.9]];
        let mut b = a.clone();
        b.swap(0, 2);
        let (mu_a, _) = spec.encode(&store, &a).unwrap();
        let (mu_b, _) = spec.encode(&store, &b).unwrap();
        let diff: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "permuting visits should change the encoding");
    }

    #[test]
    fn empty_sequence_is_input_error() {
        let spec = LstmEncoderSpec::new("enc", 3, 4, 2);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        spec.init(&mut store, &mut rng);
        assert!(matches!(
            spec.encode(&store, &[]),
            Err(CtpError::Input(_))
        ));
    }

    #[test]
    fn sigma_is_always_positive() {
        let spec = LstmEncoderSpec::new("enc", 4, 6, 3);
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let mut store = ParamStore::new();
            spec.init(&mut store, &mut rng);
            let xs = vec![(0..4).map(|_| rng.normal() * 3.0).collect::<Vec<_>>()];
            let (_, sigma) = spec.encode(&store, &xs).unwrap();
            assert!(sigma.iter().all(|s| *s > 0.0));
        }
    }

    #[test]
    fn gumbel_saturates_for_huge_logits() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            assert_eq!(gumbel_sigmoid(1e9, 0.3, false, &mut rng), 1.0);
            assert_eq!(gumbel_sigmoid(1e9, 4.0, true, &mut rng), 1.0);
        }
    }

    #[test]
    fn gumbel_zero_logit_mean_is_half() {
        // At temperature 1 the soft draw is sigmoid(logistic) = U(0,1).
        let mut rng = Rng::new(9);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| gumbel_sigmoid(0.0, 1.0, false, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gumbel_hard_is_binary_and_soft_is_interior() {
        let mut rng = Rng::new(13);
        for _ in 0..2000 {
            let logit = rng.normal() * 5.0;
            let h = gumbel_sigmoid(logit, 0.7, true, &mut rng);
            assert!(h == 0.0 || h == 1.0);
            let s = gumbel_sigmoid(logit, 0.7, false, &mut rng);
            assert!(s > 0.0 && s < 1.0);
        }
    }
}
