//! Governing ODE systems for the simulated dataset families, plus the
//! fixed-step ground-truth integrator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::rng::Rng;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemId {
    Hao,
    Zheng,
    Mm,
}

impl SystemId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemId::Hao => "hao",
            SystemId::Zheng => "zheng",
            SystemId::Mm => "mm",
        }
    }
}

/// Full description of a simulated dynamical system: every generated
/// feature (including ones later hidden), its parameters, the oracle causal
/// graph, and nominal initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSystemSpec {
    pub id: SystemId,
    pub feature_names: Vec<String>,
    pub params: Vec<(String, f64)>,
    /// `n x n` row-major feature-to-feature edges, diagonal zero.
    pub adjacency: Vec<u8>,
    pub init: Vec<f64>,
    pub t0: f64,
    /// Indices of generated features dropped from the observed dataset.
    pub hidden: Vec<usize>,
}

impl OdeSystemSpec {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("missing system parameter {name}"))
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n_features())
            .filter(|i| !self.hidden.contains(i))
            .collect()
    }

    /// Oracle adjacency restricted to observed features plus one
    /// hidden-confounder slot in the last row. When several generated
    /// features are hidden their outgoing edges are folded into that row;
    /// the confounder column stays zero (nothing observed causes it).
    pub fn restricted_adjacency(&self) -> Vec<u8> {
        let obs = self.observed_indices();
        let k = obs.len();
        let d = k + 1;
        let n = self.n_features();
        let mut out = vec![0u8; d * d];
        for (ri, &fi) in obs.iter().enumerate() {
            for (rj, &fj) in obs.iter().enumerate() {
                out[ri * d + rj] = self.adjacency[fi * n + fj];
            }
        }
        for &h in &self.hidden {
            for (rj, &fj) in obs.iter().enumerate() {
                if self.adjacency[h * n + fj] != 0 {
                    out[k * d + rj] = 1;
                }
            }
        }
        out
    }

    /// Check the feature-to-feature graph for cycles (depth-first).
    pub fn adjacency_is_acyclic(&self) -> bool {
        is_acyclic(&self.adjacency, self.n_features())
    }

    pub fn derivative(&self, y: &[f64], out: &mut [f64]) {
        match self.id {
            SystemId::Hao => hao_rhs(self, y, out),
            SystemId::Zheng => zheng_rhs(self, y, out),
            SystemId::Mm => mm_rhs(self, y, out),
        }
    }
}

/// DFS cycle check over an `n x n` 0/1 adjacency, ignoring self-loops.
pub fn is_acyclic(adj: &[u8], n: usize) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    fn visit(v: usize, adj: &[u8], n: usize, state: &mut [u8]) -> bool {
        state[v] = 1;
        for w in 0..n {
            if w == v || adj[v * n + w] == 0 {
                continue;
            }
            match state[w] {
                1 => return false,
                0 => {
                    if !visit(w, adj, n, state) {
                        return false;
                    }
                }
                _ => {}
            }
        }
        state[v] = 2;
        true
    }
    for v in 0..n {
        if state[v] == 0 && !visit(v, adj, n, &mut state) {
            return false;
        }
    }
    true
}

fn hao_rhs(spec: &OdeSystemSpec, y: &[f64], out: &mut [f64]) {
    // y = [a_beta, tau_p, tau_o, n, c]
    let (ab, tp, to, nn, c) = (y[0], y[1], y[2], y[3], y[4]);
    let l_ab = spec.param("lambda_abeta");
    let k_ab = spec.param("k_abeta");
    let l_t = spec.param("lambda_tau");
    let k_tp = spec.param("k_taup");
    let l_to = spec.param("lambda_tauo");
    let l_nto = spec.param("lambda_n_tauo");
    let l_ntp = spec.param("lambda_n_taup");
    let k_n = spec.param("k_n");
    let l_cn = spec.param("lambda_cn");
    let l_ct = spec.param("lambda_ctau");
    let k_c = spec.param("k_c");
    out[0] = l_ab * ab * (1.0 - ab / k_ab);
    out[1] = l_t * ab * (1.0 - tp / k_tp);
    out[2] = l_to;
    out[3] = (l_nto * to + l_ntp * tp) * (1.0 - nn / k_n);
    out[4] = (l_cn * nn + l_ct * (tp + to)) * (1.0 - c / k_c);
}

fn zheng_rhs(spec: &OdeSystemSpec, y: &[f64], out: &mut [f64]) {
    // y = [a_beta, tau, n, c]
    let (a, t, nn, c) = (y[0], y[1], y[2], y[3]);
    out[0] = spec.param("w_a1") * a + spec.param("w_a2") * a * a;
    out[1] = spec.param("w_t1") * t
        + spec.param("w_t2") * t * t
        + spec.param("w_t3") * a
        + spec.param("w_t4") * a * a
        + spec.param("w_t5") * a * t;
    out[2] = spec.param("w_n1") * nn
        + spec.param("w_n2") * nn * nn
        + spec.param("w_n3") * t
        + spec.param("w_n4") * t * t
        + spec.param("w_n5") * t * nn;
    out[3] = spec.param("w_c1") * c
        + spec.param("w_c2") * c * c
        + spec.param("w_c3") * nn
        + spec.param("w_c4") * nn * nn
        + spec.param("w_c5") * nn * c;
}

fn mm_rhs(spec: &OdeSystemSpec, y: &[f64], out: &mut [f64]) {
    // dX_i/dt = -X_i + mean over parents of X_j / (1 + X_j).
    // Root nodes have no saturating input, leaving pure decay.
    let n = spec.n_features();
    for i in 0..n {
        let mut acc = 0.0;
        let mut deg = 0usize;
        for j in 0..n {
            if spec.adjacency[j * n + i] != 0 {
                acc += y[j] / (1.0 + y[j]);
                deg += 1;
            }
        }
        out[i] = -y[i] + if deg > 0 { acc / deg as f64 } else { 0.0 };
    }
}

/// Amyloid-beta pathway model, LMCI parameter group. Five features with
/// `tau_o` generated as a hidden confounder of `n` and `c`.
pub fn hao_system() -> OdeSystemSpec {
    let names = ["a_beta", "tau_p", "tau_o", "n", "c"];
    let n = names.len();
    let mut adj = vec![0u8; n * n];
    let mut edge = |i: usize, j: usize| adj[i * n + j] = 1;
    edge(0, 1); // a_beta -> tau_p
    edge(1, 3); // tau_p -> n
    edge(2, 3); // tau_o -> n
    edge(3, 4); // n -> c
    edge(1, 4); // tau_p -> c
    edge(2, 4); // tau_o -> c
    OdeSystemSpec {
        id: SystemId::Hao,
        feature_names: names.iter().map(|s| String::from(*s)).collect(),
        params: [
            ("lambda_abeta", 0.1612),
            ("k_abeta", 264.99),
            ("lambda_tau", 0.08),
            ("k_taup", 131.66),
            ("lambda_tauo", 1.74),
            ("lambda_n_tauo", 0.000424),
            ("lambda_n_taup", 0.00737),
            ("k_n", 1.02),
            ("lambda_cn", 1.26),
            ("lambda_ctau", 1.93),
            ("k_c", 129.4),
        ]
        .iter()
        .map(|(n, v)| (String::from(*n), *v))
        .collect(),
        adjacency: adj,
        init: vec![41.57, 4.21, 28.66, 0.48, 6.03],
        t0: 50.0,
        hidden: vec![2],
    }
}

/// Four-feature amyloid/tau/neurodegeneration/cognition model in disease
/// progression score time; no hidden features.
pub fn zheng_system() -> OdeSystemSpec {
    let names = ["a_beta", "tau", "n", "c"];
    let n = names.len();
    let mut adj = vec![0u8; n * n];
    let mut edge = |i: usize, j: usize| adj[i * n + j] = 1;
    edge(0, 1); // a_beta -> tau
    edge(1, 2); // tau -> n
    edge(2, 3); // n -> c
    OdeSystemSpec {
        id: SystemId::Zheng,
        feature_names: names.iter().map(|s| String::from(*s)).collect(),
        params: [
            ("w_a1", 0.745),
            ("w_a2", -0.749),
            ("w_t1", 0.689),
            ("w_t2", -0.679),
            ("w_t3", 0.0),
            ("w_t4", 0.185),
            ("w_t5", -0.101),
            ("w_n1", 0.899),
            ("w_n2", -0.927),
            ("w_n3", 0.554),
            ("w_n4", 1.792),
            ("w_n5", -2.127),
            ("w_c1", 0.134),
            ("w_c2", -0.067),
            ("w_c3", 0.004),
            ("w_c4", 0.007),
            ("w_c5", -0.008),
        ]
        .iter()
        .map(|(n, v)| (String::from(*n), *v))
        .collect(),
        adjacency: adj,
        init: vec![0.000141, 0.0, 0.0, 0.0],
        t0: -10.0,
        hidden: Vec::new(),
    }
}

/// Michaelis-Menten kinetics over a random DAG in topological order
/// (edge probability 0.15); the first five nodes are later hidden.
pub fn mm_system(n_nodes: usize, seed: u64) -> Result<OdeSystemSpec> {
    if n_nodes < 6 {
        return Err(CtpError::Input(format!(
            "mm system needs at least 6 nodes, got {n_nodes}"
        )));
    }
    let mut rng = Rng::substream(seed, "dynsim.mm.dag", 0);
    let mut adj = vec![0u8; n_nodes * n_nodes];
    for i in 0..n_nodes {
        for j in (i + 1)..n_nodes {
            if rng.uniform() < 0.15 {
                adj[i * n_nodes + j] = 1;
            }
        }
    }
    Ok(OdeSystemSpec {
        id: SystemId::Mm,
        feature_names: (0..n_nodes).map(|i| format!("x{}", i + 1)).collect(),
        params: Vec::new(),
        adjacency: adj,
        // Nominal midpoint of the U(0.8, 1.2) initial distribution.
        init: vec![1.0; n_nodes],
        t0: 0.0,
        hidden: (0..5).collect(),
    })
}

/// Classical RK4 with a fixed number of substeps per output interval.
///
/// Returns the state at `t0` followed by the state at every requested time.
/// `times` must be strictly increasing and start at or after `t0`.
pub fn rk4_integrate(
    spec: &OdeSystemSpec,
    y0: &[f64],
    t0: f64,
    times: &[f64],
    substeps: usize,
    mut clamp: Option<DoClamp>,
) -> Result<Vec<Vec<f64>>> {
    let n = y0.len();
    let mut y = y0.to_vec();
    if let Some(c) = &clamp {
        if c.t_start <= t0 {
            y[c.feature] = c.value;
        }
    }
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for &target in times {
        if target < t {
            return Err(CtpError::Input(String::from(
                "integration times must be nondecreasing and >= t0",
            )));
        }
        // Split the hop at the clamp onset so it lands exactly on the grid.
        let mut hops: Vec<f64> = Vec::with_capacity(2);
        if let Some(c) = &clamp {
            if c.t_start > t && c.t_start < target {
                hops.push(c.t_start);
            }
        }
        hops.push(target);
        for hop in hops {
            let span = hop - t;
            if span > 0.0 {
                let h = span / substeps as f64;
                for _ in 0..substeps {
                    let active = clamp.as_ref().filter(|c| t >= c.t_start).copied();
                    if let Some(c) = &active {
                        y[c.feature] = c.value;
                    }
                    let eval = |state: &[f64], d: &mut [f64], spec: &OdeSystemSpec| {
                        spec.derivative(state, d);
                        if let Some(c) = &active {
                            d[c.feature] = 0.0;
                        }
                    };
                    eval(&y, &mut k1, spec);
                    for i in 0..n {
                        tmp[i] = y[i] + 0.5 * h * k1[i];
                    }
                    eval(&tmp, &mut k2, spec);
                    for i in 0..n {
                        tmp[i] = y[i] + 0.5 * h * k2[i];
                    }
                    eval(&tmp, &mut k3, spec);
                    for i in 0..n {
                        tmp[i] = y[i] + h * k3[i];
                    }
                    eval(&tmp, &mut k4, spec);
                    for i in 0..n {
                        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    t += h;
                }
                t = hop; // absorb accumulated rounding
            } else {
                t = hop;
            }
            if let Some(c) = &clamp {
                if t >= c.t_start {
                    y[c.feature] = c.value;
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CtpError::Divergence { time: t });
        }
        out.push(y.clone());
    }
    let _ = &mut clamp;
    Ok(out)
}

/// A do-intervention on the ground-truth system: from `t_start` on, feature
/// `feature` (full-system index) is pinned to `value`.
#[derive(Debug, Clone, Copy)]
pub struct DoClamp {
    pub feature: usize,
    pub value: f64,
    pub t_start: f64,
}
