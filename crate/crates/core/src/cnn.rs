//! Gated convolutional power control for single-antenna links.
//!
//! The input is the `K × K` grid of link magnitudes (`grid[j][k] = |h_jk|`).
//! Each branch applies `conv → ReLU` per stage, one max-pool, and a linear
//! layer to `K` outputs. Powers are `p = P · sigmoid(u ⊙ û)`, and the
//! beamformer is the real scalar `√p_k`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelRealization;
use crate::error::{Error, Result};
use crate::math::graph::conv_out;
use crate::math::{BoundParams, Conv2dSpec, Graph, LayoutBuilder, ParamVector, Tensor, Var};
use crate::model::{init::fan_in_uniform, Gate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CnnInput {
    /// One channel of `|h_jk|`.
    #[default]
    Magnitude,
    /// Two channels, `Re h_jk` and `Im h_jk`.
    ReIm,
}

impl CnnInput {
    fn channels(self) -> usize {
        match self {
            CnnInput::Magnitude => 1,
            CnnInput::ReIm => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub k: usize,
    /// Output channels of each inner conv stage.
    pub inner_channels: Vec<usize>,
    pub outer_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
    #[serde(default)]
    pub input: CnnInput,
}

impl CnnArchitecture {
    /// Inner stages `1→4→8`, outer `1→6→8`, 3×3 kernels, stride 1, no padding, 2×2 pooling.
    pub fn new(k: usize) -> Self {
        Self {
            k,
            inner_channels: vec![4, 8],
            outer_channels: vec![6, 8],
            kernel: 3,
            stride: 1,
            padding: 0,
            pool: 2,
            input: CnnInput::Magnitude,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    fn spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// `(channels, h, w)` after every conv stage, then after pooling.
    pub fn stage_shapes(&self, channels: &[usize]) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::new();
        let (mut h, mut w) = (self.k, self.k);
        for &c in channels {
            if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
                return Err(Error::config(format!(
                    "CNN with K={} and padding {} runs out of spatial extent",
                    self.k, self.padding
                )));
            }
            (h, w) = conv_out(h, w, self.kernel, self.kernel, self.spec());
            shapes.push([c, h, w]);
        }
        let c = *channels.last().unwrap_or(&self.input.channels());
        let (ph, pw) = (h / self.pool, w / self.pool);
        if ph == 0 || pw == 0 {
            return Err(Error::config(format!(
                "CNN with K={}: {h}x{w} feature map is smaller than the {}x{} pool",
                self.k, self.pool, self.pool
            )));
        }
        shapes.push([c, ph, pw]);
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.kernel == 0 || self.stride == 0 || self.pool == 0 {
            return Err(Error::config("CNN sizes must be positive"));
        }
        if self.inner_channels.is_empty() || self.outer_channels.is_empty() {
            return Err(Error::config("CNN branches need at least one conv stage"));
        }
        if self.inner_channels.contains(&0) || self.outer_channels.contains(&0) {
            return Err(Error::config("CNN channel counts must be positive"));
        }
        self.stage_shapes(&self.inner_channels)?;
        self.stage_shapes(&self.outer_channels)?;
        Ok(())
    }

    pub fn check_channel(&self, ch: &ChannelRealization) -> Result<()> {
        if ch.nt != 1 {
            return Err(Error::config(format!(
                "CNN power control needs N_t = 1, channel has N_t = {}",
                ch.nt
            )));
        }
        if ch.k != self.k {
            return Err(Error::contract(format!(
                "CNN built for K={}, channel has K={}",
                self.k, ch.k
            )));
        }
        Ok(())
    }

    fn layout(&self, channels: &[usize], prefix: &str) -> (ParamVector, Vec<usize>) {
        let mut b = LayoutBuilder::new();
        let mut fan_ins = Vec::new();
        let mut c_in = self.input.channels();
        for (i, &c) in channels.iter().enumerate() {
            let fan = c_in * self.kernel * self.kernel;
            b.push(format!("{prefix}.conv{i}.w"), &[c, c_in, self.kernel, self.kernel]);
            b.push(format!("{prefix}.conv{i}.b"), &[c]);
            fan_ins.extend([fan, fan]);
            c_in = c;
        }
        let pooled = *self.stage_shapes(channels).expect("validated").last().unwrap();
        let flat = pooled.iter().product::<usize>();
        b.push(format!("{prefix}.fc.w"), &[flat, self.k]);
        b.push(format!("{prefix}.fc.b"), &[self.k]);
        fan_ins.extend([flat, flat]);
        (b.zeros(), fan_ins)
    }
}

/// `[C, K, K]` input image of `ch`.
pub fn pixel_grid(ch: &ChannelRealization, input: CnnInput) -> Tensor {
    let k = ch.k;
    let mut data = Vec::with_capacity(input.channels() * k * k);
    match input {
        CnnInput::Magnitude => data.extend((0..k * k).map(|p| ch.link(p / k, p % k)[0].norm())),
        CnnInput::ReIm => {
            data.extend((0..k * k).map(|p| ch.link(p / k, p % k)[0].re));
            data.extend((0..k * k).map(|p| ch.link(p / k, p % k)[0].im));
        }
    }
    Tensor::new(vec![input.channels(), k, k], data).expect("grid shape")
}

pub fn init_params(arch: &CnnArchitecture, seed: u64) -> (ParamVector, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |channels: &[usize], prefix: &str| {
        let (mut p, fan_ins) = arch.layout(channels, prefix);
        let segs = p.segments().to_vec();
        for (seg, fan_in) in segs.iter().zip(fan_ins) {
            fan_in_uniform(&mut rng, fan_in, &mut p.values_mut()[seg.range()]);
        }
        p
    };
    let theta = make(&arch.inner_channels, "inner");
    let phi = make(&arch.outer_channels, "outer");
    (theta, phi)
}

/// `[1, K]` pre-activation output of one branch.
fn branch(g: &mut Graph, arch: &CnnArchitecture, channels: &[usize], prefix: &str, p: BoundParams<'_>, grid: Var) -> Var {
    let mut x = grid;
    for i in 0..channels.len() {
        let w = p.get(g, &format!("{prefix}.conv{i}.w"));
        let b = p.get(g, &format!("{prefix}.conv{i}.b"));
        x = g.conv2d(x, w, b, arch.spec());
        x = g.relu(x);
    }
    x = g.max_pool2d(x, arch.pool);
    let flat = g.value(x).len();
    x = g.reshape(x, &[1, flat]);
    let w = p.get(g, &format!("{prefix}.fc.w"));
    let b = p.get(g, &format!("{prefix}.fc.b"));
    let x = g.matmul(x, w);
    g.add_bias(x, b)
}

/// `[1, K]` powers `P · sigmoid(u ⊙ û)`.
fn power_node(
    g: &mut Graph,
    arch: &CnnArchitecture,
    ch: &ChannelRealization,
    theta: BoundParams<'_>,
    phi: Option<BoundParams<'_>>,
    gate: Gate,
    p_max: f64,
) -> Var {
    let grid = g.constant(pixel_grid(ch, arch.input));
    let u = branch(g, arch, &arch.inner_channels, "inner", theta, grid);
    let gated = match (gate, phi) {
        (Gate::Learned, Some(phi)) => {
            let uo = branch(g, arch, &arch.outer_channels, "outer", phi, grid);
            g.mul(u, uo)
        }
        (Gate::Zeros, _) => {
            let z = g.constant(Tensor::zeros(&[1, arch.k]));
            g.mul(u, z)
        }
        _ => u,
    };
    let y = g.sigmoid(gated);
    g.scale(y, p_max)
}

pub(crate) fn output_node(
    g: &mut Graph,
    arch: &CnnArchitecture,
    ch: &ChannelRealization,
    theta: BoundParams<'_>,
    phi: Option<BoundParams<'_>>,
    gate: Gate,
    p_max: f64,
) -> Var {
    let p = power_node(g, arch, ch, theta, phi, gate, p_max);
    let amp = g.sqrt(p);
    let amp = g.reshape(amp, &[arch.k, 1]);
    let zeros = g.constant(Tensor::zeros(&[arch.k, 1]));
    g.concat_cols(amp, zeros)
}

/// Per-pair transmit powers for `ch` with a learned gate.
pub fn cnn_powers(
    ch: &ChannelRealization,
    theta: &ParamVector,
    phi: &ParamVector,
    arch: &CnnArchitecture,
    p_max: f64,
) -> Result<Vec<f64>> {
    arch.check_channel(ch)?;
    let mut g = Graph::new();
    let t = BoundParams::constant(&mut g, theta);
    let f = BoundParams::constant(&mut g, phi);
    let p = power_node(&mut g, arch, ch, t, Some(f), Gate::Learned, p_max);
    g.check()?;
    Ok(g.value(p).data().to_vec())
}

pub fn cnn_forward(
    ch: &ChannelRealization,
    theta: &ParamVector,
    phi: &ParamVector,
    arch: &CnnArchitecture,
    p_max: f64,
) -> Result<crate::sumrate::Beamformer> {
    crate::model::Model {
        arch: crate::model::Architecture::Cnn(arch.clone()),
        p_max,
        gate: Gate::Learned,
    }
    .forward(ch, theta, phi)
}

pub fn loss_cnn(
    ch: &ChannelRealization,
    theta: &ParamVector,
    phi: &ParamVector,
    arch: &CnnArchitecture,
    p_max: f64,
) -> Result<f64> {
    crate::model::Model {
        arch: crate::model::Architecture::Cnn(arch.clone()),
        p_max,
        gate: Gate::Learned,
    }
    .loss(ch, theta, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{gen_channel, ChannelModelConfig, Family};
    use crate::model::{Architecture, Model};
    use crate::sumrate::evaluate_rate;

    fn channel(k: usize, seed: u64) -> ChannelRealization {
        let c = ChannelModelConfig::new(Family::Rayleigh, k, 1);
        gen_channel(&c, seed).unwrap()
    }

    fn model(arch: CnnArchitecture, gate: Gate) -> Model {
        Model::new(Architecture::Cnn(arch), 1.0).unwrap().with_gate(gate)
    }

    #[test]
    fn spatial_sizes_for_ten_pairs() {
        let a = CnnArchitecture::new(10);
        let s = a.stage_shapes(&a.inner_channels).unwrap();
        assert_eq!(s, vec![[4, 8, 8], [8, 6, 6], [8, 3, 3]]);
    }

    #[test]
    fn small_grid_needs_padding() {
        assert!(matches!(CnnArchitecture::new(4).validate(), Err(Error::Config(_))));
        assert!(CnnArchitecture::new(4).with_padding(1).validate().is_ok());
    }

    #[test]
    fn powers_strictly_inside_budget() {
        let arch = CnnArchitecture::new(10);
        for s in 0..10 {
            let (mut t, p) = init_params(&arch, s);
            t.values_mut().iter_mut().for_each(|x| *x *= 3.0);
            let powers = cnn_powers(&channel(10, s), &t, &p, &arch, 1.0).unwrap();
            assert!(powers.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn ones_gate_is_sigmoid_of_inner() {
        let arch = CnnArchitecture::new(6);
        let ch = channel(6, 1);
        let m = model(arch.clone(), Gate::Learned);
        let (t, mut p) = m.init(2);
        let ones = m.clone().with_gate(Gate::Ones).forward(&ch, &t, &p).unwrap();
        p.values_mut().fill(0.0);
        p.segment_values_mut("outer.fc.b").unwrap().fill(1.0);
        let learned = m.forward(&ch, &t, &p).unwrap();
        for (a, b) in ones.v.iter().zip(&learned.v) {
            assert!((a - b).norm() <= 1e-12);
        }
    }

    #[test]
    fn zeros_gate_gives_half_power() {
        let arch = CnnArchitecture::new(6);
        let m = model(arch, Gate::Zeros);
        let (t, p) = m.init(0);
        let v = m.forward(&channel(6, 0), &t, &p).unwrap();
        assert!(v.powers().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_channel_gives_zero_loss() {
        let arch = CnnArchitecture::new(4).with_padding(1);
        let mut ch = channel(4, 0);
        ch.h.iter_mut().for_each(|z| *z = num_complex::Complex64::new(0.0, 0.0));
        let (t, p) = init_params(&arch, 0);
        assert_eq!(loss_cnn(&ch, &t, &p, &arch, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_is_negative_rate() {
        let arch = CnnArchitecture::new(5).with_padding(1);
        for s in 0..5 {
            let ch = channel(5, s);
            let (t, p) = init_params(&arch, s);
            let v = cnn_forward(&ch, &t, &p, &arch, 2.0).unwrap();
            assert!(v.is_feasible(2.0));
            let r = evaluate_rate(&ch, &v).unwrap();
            assert!((loss_cnn(&ch, &t, &p, &arch, 2.0).unwrap() + r.weighted_sum_rate).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_is_monotone_for_positive_inner() {
        let arch = CnnArchitecture::new(6);
        let ch = channel(6, 3);
        let (t, mut p) = init_params(&arch, 3);
        p.values_mut().fill(0.0);
        // With zero outer conv weights, û = outer.fc.b.
        let probe = |p: &ParamVector| cnn_powers(&ch, &t, p, &arch, 1.0).unwrap();
        let mut ones = p.clone();
        ones.segment_values_mut("outer.fc.b").unwrap().fill(1.0);
        let base = probe(&ones);
        let mut bumped = ones.clone();
        bumped.segment_values_mut("outer.fc.b").unwrap()[2] = 2.0;
        let after = probe(&bumped);
        // y = sigmoid(u · û): increasing û_2 moves y_2 with the sign of u_2.
        let u2_positive = base[2] > 0.5;
        assert_eq!(after[2] >= base[2], u2_positive || base[2] == 0.5);
    }

    #[test]
    fn multi_antenna_is_config_error() {
        let arch = CnnArchitecture::new(4).with_padding(1);
        let ch = gen_channel(&ChannelModelConfig::new(Family::Rayleigh, 4, 2), 0).unwrap();
        let (t, p) = init_params(&arch, 0);
        assert!(matches!(loss_cnn(&ch, &t, &p, &arch, 1.0), Err(Error::Config(_))));
    }
}
