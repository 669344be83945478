//! Gated message-passing network over the complete interference graph.
//!
//! Node `k` is transceiver pair `k` with features `[Re h_kk | Im h_kk | w_k | σ²]`;
//! the edge `j → k` carries `[Re h_jk | Im h_jk]`. Each layer updates
//!
//! ```text
//! x_k ← MLP_u([x_k, max_{j≠k} MLP_m([x_j, α_jk])])
//! ```
//!
//! with the max taken per column. The inner and outer branches share this
//! structure and have separate weights; the output is
//! `√P · g(x_inner ⊙ x_outer)` with `g(x) = x / max(‖x‖, 1)` per row.

use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelRealization;
use crate::error::{Error, Result};
use crate::math::{BoundParams, Graph, LayoutBuilder, ParamVector, Tensor, Var};
use crate::model::{init::fan_in_uniform, Gate};

/// Widths of one branch (inner or outer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub layers: usize,
    /// Hidden widths of the message MLP; every layer is followed by ReLU.
    pub message_hidden: Vec<usize>,
    /// Hidden widths of the update MLP; its output layer is linear.
    pub update_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnArchitecture {
    pub nt: usize,
    pub inner: BranchSpec,
    pub outer: BranchSpec,
}

impl GnnArchitecture {
    /// Two inner and three outer layers, message widths `[64, 64]`, update widths `[32]`.
    pub fn new(nt: usize) -> Self {
        let branch = |layers| BranchSpec {
            layers,
            message_hidden: vec![64, 64],
            update_hidden: vec![32],
        };
        Self {
            nt,
            inner: branch(2),
            outer: branch(3),
        }
    }

    /// Node state width after every layer; also the gate width.
    pub fn state_width(&self) -> usize {
        2 * self.nt
    }

    pub fn node_feature_width(&self) -> usize {
        2 * self.nt + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.nt == 0 {
            return Err(Error::config("GNN needs N_t >= 1"));
        }
        for (name, b) in [("inner", &self.inner), ("outer", &self.outer)] {
            if b.layers == 0 {
                return Err(Error::config(format!("{name} GNN branch needs at least one layer")));
            }
            if b.message_hidden.is_empty() || b.message_hidden.contains(&0) || b.update_hidden.contains(&0) {
                return Err(Error::config(format!(
                    "{name} GNN branch needs a non-empty message MLP and positive widths"
                )));
            }
        }
        Ok(())
    }

    pub fn check_channel(&self, ch: &ChannelRealization) -> Result<()> {
        if ch.nt != self.nt {
            return Err(Error::contract(format!(
                "GNN built for N_t={}, channel has N_t={}",
                self.nt, ch.nt
            )));
        }
        Ok(())
    }

    fn layout(&self, branch: &BranchSpec, prefix: &str) -> (ParamVector, Vec<usize>) {
        let mut b = LayoutBuilder::new();
        let mut fan_ins = Vec::new();
        let edge = 2 * self.nt;
        let mut d = self.node_feature_width();
        for l in 0..branch.layers {
            let mut push_mlp = |name: &str, input: usize, widths: &[usize]| {
                let mut prev = input;
                for (i, &w) in widths.iter().enumerate() {
                    b.push(format!("{prefix}.l{l}.{name}.w{i}"), &[prev, w]);
                    b.push(format!("{prefix}.l{l}.{name}.b{i}"), &[w]);
                    fan_ins.extend([prev, prev]);
                    prev = w;
                }
                prev
            };
            let m = push_mlp("msg", d + edge, &branch.message_hidden);
            let mut widths = branch.update_hidden.clone();
            widths.push(self.state_width());
            d = push_mlp("upd", d + m, &widths);
        }
        (b.zeros(), fan_ins)
    }
}

/// Node features and edge weights of the interference graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub k: usize,
    pub nt: usize,
    /// `[K, 2N_t + 2]`, rows `[Re h_kk | Im h_kk | w_k | σ²]`.
    pub node_features: Tensor,
    /// `K × K × N_t`; entry `(j, k)` is `h_jk` off the diagonal and zero on it.
    pub alpha: Vec<Complex64>,
}

impl GraphSample {
    pub fn alpha(&self, j: usize, k: usize) -> &[Complex64] {
        let base = (j * self.k + k) * self.nt;
        &self.alpha[base..base + self.nt]
    }

    /// Directed edges `(source, target)` with `j ≠ k`, grouped by target.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.k)
            .flat_map(|t| (0..self.k).filter(move |&s| s != t).map(move |s| (s, t)))
            .collect()
    }

    /// `[E, 2N_t]` edge features in [`GraphSample::edges`] order.
    fn edge_features(&self) -> Tensor {
        let edges = self.edges();
        let mut data = Vec::with_capacity(edges.len() * 2 * self.nt);
        for &(s, t) in &edges {
            let a = self.alpha(s, t);
            data.extend(a.iter().map(|z| z.re));
            data.extend(a.iter().map(|z| z.im));
        }
        Tensor::new(vec![edges.len(), 2 * self.nt], data).expect("edge feature shape")
    }
}

pub fn graph_from_channel(ch: &ChannelRealization) -> GraphSample {
    let (k, nt) = (ch.k, ch.nt);
    let mut z = Vec::with_capacity(k * (2 * nt + 2));
    for i in 0..k {
        let h = ch.direct(i);
        z.extend(h.iter().map(|c| c.re));
        z.extend(h.iter().map(|c| c.im));
        z.push(ch.weights[i]);
        z.push(ch.noise_power);
    }
    let mut alpha = ch.h.clone();
    for i in 0..k {
        let base = (i * k + i) * nt;
        alpha[base..base + nt].fill(Complex64::new(0.0, 0.0));
    }
    GraphSample {
        k,
        nt,
        node_features: Tensor::new(vec![k, 2 * nt + 2], z).expect("node feature shape"),
        alpha,
    }
}

/// Seeded `(θ, φ)` for the inner and outer branches.
pub fn init_params(arch: &GnnArchitecture, seed: u64) -> (ParamVector, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |branch: &BranchSpec, prefix: &str| {
        let (mut p, fan_ins) = arch.layout(branch, prefix);
        let segs = p.segments().to_vec();
        for (seg, fan_in) in segs.iter().zip(fan_ins) {
            fan_in_uniform(&mut rng, fan_in, &mut p.values_mut()[seg.range()]);
        }
        p
    };
    let theta = make(&arch.inner, "inner");
    let phi = make(&arch.outer, "outer");
    (theta, phi)
}

fn mlp(g: &mut Graph, p: BoundParams<'_>, prefix: &str, mut x: Var, n: usize, relu_last: bool) -> Var {
    for i in 0..n {
        let w = p.get(g, &format!("{prefix}.w{i}"));
        let b = p.get(g, &format!("{prefix}.b{i}"));
        x = g.matmul(x, w);
        x = g.add_bias(x, b);
        if i + 1 < n || relu_last {
            x = g.relu(x);
        }
    }
    x
}

fn branch(
    g: &mut Graph,
    spec: &BranchSpec,
    prefix: &str,
    p: BoundParams<'_>,
    sample: &GraphSample,
    nodes: Var,
    edges: Var,
) -> Var {
    let edge_list = sample.edges();
    let src: Arc<[usize]> = edge_list.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = edge_list.iter().map(|e| e.1).collect();
    let mut x = nodes;
    for l in 0..spec.layers {
        let xs = g.gather_rows(x, src.clone());
        let m_in = g.concat_cols(xs, edges);
        let m = mlp(g, p, &format!("{prefix}.l{l}.msg"), m_in, spec.message_hidden.len(), true);
        let agg = g.segment_max(m, &dst, sample.k);
        let u_in = g.concat_cols(x, agg);
        x = mlp(g, p, &format!("{prefix}.l{l}.upd"), u_in, spec.update_hidden.len() + 1, false);
    }
    x
}

/// Adds the `[K, 2N_t]` beamformer node.
pub(crate) fn output_node(
    g: &mut Graph,
    arch: &GnnArchitecture,
    ch: &ChannelRealization,
    theta: BoundParams<'_>,
    phi: Option<BoundParams<'_>>,
    gate: Gate,
    p_max: f64,
) -> Var {
    let sample = graph_from_channel(ch);
    let nodes = g.constant(sample.node_features.clone());
    let edges = g.constant(sample.edge_features());
    let x_in = branch(g, &arch.inner, "inner", theta, &sample, nodes, edges);
    let width = [sample.k, arch.state_width()];
    let gated = match (gate, phi) {
        (Gate::Learned, Some(phi)) => {
            let x_out = branch(g, &arch.outer, "outer", phi, &sample, nodes, edges);
            g.mul(x_in, x_out)
        }
        (Gate::Zeros, _) => {
            let z = g.constant(Tensor::zeros(&width));
            g.mul(x_in, z)
        }
        _ => x_in,
    };
    let norm = g.row_norm(gated);
    let den = g.clamp_min(norm, 1.0);
    let y = g.div_rows(gated, den);
    g.scale(y, p_max.sqrt())
}

/// Beamformers for `ch` with a learned gate.
pub fn gnn_forward(
    ch: &ChannelRealization,
    theta: &ParamVector,
    phi: &ParamVector,
    arch: &GnnArchitecture,
    p_max: f64,
) -> Result<crate::sumrate::Beamformer> {
    crate::model::Model {
        arch: crate::model::Architecture::Gnn(arch.clone()),
        p_max,
        gate: Gate::Learned,
    }
    .forward(ch, theta, phi)
}

/// Negative weighted sum rate of [`gnn_forward`].
pub fn loss_gnn(
    ch: &ChannelRealization,
    theta: &ParamVector,
    phi: &ParamVector,
    arch: &GnnArchitecture,
    p_max: f64,
) -> Result<f64> {
    crate::model::Model {
        arch: crate::model::Architecture::Gnn(arch.clone()),
        p_max,
        gate: Gate::Learned,
    }
    .loss(ch, theta, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gen_channel, ChannelModelConfig, Family};
    use crate::model::{Architecture, Model, Wrt};
    use crate::sumrate::evaluate_rate;

    fn channel(k: usize, nt: usize, seed: u64) -> ChannelRealization {
        let mut c = ChannelModelConfig::new(Family::Rayleigh, k, nt);
        c.weights = Some((0..k).map(|i| 1.0 + 0.1 * i as f64).collect());
        gen_channel(&c, seed).unwrap()
    }

    fn model(nt: usize, gate: Gate) -> Model {
        Model::new(Architecture::Gnn(GnnArchitecture::new(nt)), 1.0)
            .unwrap()
            .with_gate(gate)
    }

    #[test]
    fn graph_structure() {
        let ch = channel(10, 2, 0);
        let s = graph_from_channel(&ch);
        assert_eq!(s.edges().len(), 90);
        for k in 0..10 {
            assert!(s.alpha(k, k).iter().all(|z| z.norm() == 0.0));
            let row = &s.node_features.data()[k * 6..(k + 1) * 6];
            assert_eq!(row[4], ch.weights[k]);
            assert_eq!(row[5], ch.noise_power);
            assert_eq!(row[0], ch.direct(k)[0].re);
            assert_eq!(row[3], ch.direct(k)[1].im);
        }
        assert_eq!(s.alpha(0, 1), ch.link(0, 1));
    }

    #[test]
    fn ones_gate_is_inner_alone() {
        let ch = channel(4, 2, 1);
        let m = model(2, Gate::Learned);
        let (t, mut p) = m.init(5);
        let ones = m.clone().with_gate(Gate::Ones).forward(&ch, &t, &p).unwrap();
        // Zero all outer weights and set the last update bias to 1: the outer
        // branch then emits exactly ones.
        p.values_mut().fill(0.0);
        let last = format!("outer.l2.upd.b{}", 1);
        p.segment_values_mut(&last).unwrap().fill(1.0);
        let learned = m.forward(&ch, &t, &p).unwrap();
        for (a, b) in ones.v.iter().zip(&learned.v) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn zeros_gate_gives_zero_loss() {
        let ch = channel(4, 2, 2);
        let m = model(2, Gate::Zeros);
        let (t, p) = m.init(1);
        assert_eq!(m.forward(&ch, &t, &p).unwrap().max_power(), 0.0);
        assert_eq!(m.loss(&ch, &t, &p).unwrap(), 0.0);
    }

    #[test]
    fn zero_final_weights_give_zero_loss() {
        let ch = channel(3, 2, 3);
        let m = model(2, Gate::Learned);
        let (mut t, p) = m.init(1);
        t.segment_values_mut("inner.l1.upd.w1").unwrap().fill(0.0);
        t.segment_values_mut("inner.l1.upd.b1").unwrap().fill(0.0);
        assert_eq!(m.loss(&ch, &t, &p).unwrap(), 0.0);
    }

    #[test]
    fn permutation_equivariance() {
        let m = model(2, Gate::Learned);
        let (t, p) = m.init(11);
        for s in 0..10 {
            let ch = channel(5, 2, s);
            let perm = [3, 0, 4, 1, 2];
            let a = m.forward(&ch, &t, &p).unwrap();
            let b = m.forward(&ch.permuted(&perm), &t, &p).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                for (x, y) in b.row(i).iter().zip(a.row(pi)) {
                    assert!((x - y).norm() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_is_negative_rate_and_feasible() {
        let m = model(2, Gate::Learned);
        for s in 0..10 {
            let (mut t, p) = m.init(s);
            // Large weights push rows past the unit-norm projection.
            t.values_mut().iter_mut().for_each(|x| *x *= 8.0);
            let ch = channel(3, 2, s);
            let v = m.forward(&ch, &t, &p).unwrap();
            assert!(v.is_feasible(1.0));
            let r = evaluate_rate(&ch, &v).unwrap();
            assert!((m.loss(&ch, &t, &p).unwrap() + r.weighted_sum_rate).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_has_no_messages() {
        let m = model(2, Gate::Learned);
        let (t, p) = m.init(0);
        let ch = channel(1, 2, 0);
        let lg = m.loss_grad(&ch, &t, &p, Wrt::Both).unwrap();
        assert!(lg.loss.is_finite());
    }

    #[test]
    fn wrong_antenna_count_rejected() {
        let m = model(2, Gate::Learned);
        let (t, p) = m.init(0);
        assert!(matches!(m.forward(&channel(3, 1, 0), &t, &p), Err(Error::Contract(_))));
    }
}
