//! Model handle shared by the GNN and CNN families: parameter init,
//! forward, loss, and per-set gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelRealization;
use crate::cnn::{self, CnnArchitecture};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnArchitecture};
use crate::math::{BoundParams, Graph, ParamVector, Var};
use crate::sumrate::{neg_wsr_node, Beamformer};

/// What multiplies the inner network's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// The outer network's output.
    #[default]
    Learned,
    /// All-ones vector; the outer network is never evaluated.
    Ones,
    /// All-zeros vector.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    Gnn(GnnArchitecture),
    Cnn(CnnArchitecture),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Gnn(a) => a.validate(),
            Architecture::Cnn(a) => a.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Gnn(_) => "gnn",
            Architecture::Cnn(_) => "cnn",
        }
    }
}

/// Which parameter sets to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Theta,
    Phi,
    Both,
}

impl Wrt {
    fn theta(self) -> bool {
        matches!(self, Wrt::Theta | Wrt::Both)
    }

    fn phi(self) -> bool {
        matches!(self, Wrt::Phi | Wrt::Both)
    }
}

/// Loss value and the requested gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub theta: Option<ParamVector>,
    pub phi: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub p_max: f64,
    #[serde(default)]
    pub gate: Gate,
}

impl Model {
    pub fn new(arch: Architecture, p_max: f64) -> Result<Self> {
        arch.validate()?;
        if !(p_max > 0.0) {
            return Err(Error::config("P_max must be positive"));
        }
        Ok(Self {
            arch,
            p_max,
            gate: Gate::Learned,
        })
    }

    pub fn with_gate(mut self, gate: Gate) -> Self {
        self.gate = gate;
        self
    }

    /// Seeded `(θ, φ)`.
    pub fn init(&self, seed: u64) -> (ParamVector, ParamVector) {
        match &self.arch {
            Architecture::Gnn(a) => gnn::init_params(a, seed),
            Architecture::Cnn(a) => cnn::init_params(a, seed),
        }
    }

    pub fn check_channel(&self, ch: &ChannelRealization) -> Result<()> {
        match &self.arch {
            Architecture::Gnn(a) => a.check_channel(ch),
            Architecture::Cnn(a) => a.check_channel(ch),
        }
    }

    /// Adds the `[K, 2N_t]` beamformer node.
    pub fn output_node(
        &self,
        g: &mut Graph,
        ch: &ChannelRealization,
        theta: BoundParams<'_>,
        phi: Option<BoundParams<'_>>,
    ) -> Result<Var> {
        self.check_channel(ch)?;
        let phi = match self.gate {
            Gate::Learned => Some(phi.ok_or_else(|| Error::contract("learned gate needs φ"))?),
            _ => None,
        };
        Ok(match &self.arch {
            Architecture::Gnn(a) => gnn::output_node(g, a, ch, theta, phi, self.gate, self.p_max),
            Architecture::Cnn(a) => cnn::output_node(g, a, ch, theta, phi, self.gate, self.p_max),
        })
    }

    pub fn forward(
        &self,
        ch: &ChannelRealization,
        theta: &ParamVector,
        phi: &ParamVector,
    ) -> Result<Beamformer> {
        let mut g = Graph::new();
        let t = BoundParams::constant(&mut g, theta);
        let p = BoundParams::constant(&mut g, phi);
        let out = self.output_node(&mut g, ch, t, Some(p))?;
        g.check()?;
        Beamformer::from_real_rows(ch.k, ch.nt, g.value(out).data())
    }

    /// Negative weighted sum rate on one sample.
    pub fn loss(&self, ch: &ChannelRealization, theta: &ParamVector, phi: &ParamVector) -> Result<f64> {
        let mut g = Graph::new();
        let t = BoundParams::constant(&mut g, theta);
        let p = BoundParams::constant(&mut g, phi);
        let out = self.output_node(&mut g, ch, t, Some(p))?;
        let l = neg_wsr_node(&mut g, ch, out);
        g.check()?;
        Ok(g.value(l).item())
    }

    pub fn loss_grad(
        &self,
        ch: &ChannelRealization,
        theta: &ParamVector,
        phi: &ParamVector,
        wrt: Wrt,
    ) -> Result<LossGrad> {
        let mut g = Graph::new();
        let bind = |g: &mut Graph, p, on: bool| {
            if on {
                BoundParams::param(g, p)
            } else {
                BoundParams::constant(g, p)
            }
        };
        let t = bind(&mut g, theta, wrt.theta());
        let p = bind(&mut g, phi, wrt.phi());
        let out = self.output_node(&mut g, ch, t, Some(p))?;
        let l = neg_wsr_node(&mut g, ch, out);
        let mut grads = g.backward(l)?;
        let take = |grads: &mut crate::math::Gradients, b: BoundParams<'_>| {
            ParamVector::from_parts(b.params.segments().to_vec(), grads.take(b.var).into_data())
                .expect("gradient matches parameter layout")
        };
        Ok(LossGrad {
            loss: g.value(l).item(),
            theta: wrt.theta().then(|| take(&mut grads, t)),
            phi: wrt.phi().then(|| take(&mut grads, p)),
        })
    }

    /// Mean loss over `samples`.
    pub fn set_loss(
        &self,
        samples: &[ChannelRealization],
        theta: &ParamVector,
        phi: &ParamVector,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::contract("loss over an empty sample set"));
        }
        let losses = samples
            .par_iter()
            .map(|ch| self.loss(ch, theta, phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / samples.len() as f64)
    }

    /// Mean loss and mean gradients over `samples`. Per-sample results are
    /// reduced in sample order, so the output does not depend on thread count.
    pub fn set_loss_grad(
        &self,
        samples: &[ChannelRealization],
        theta: &ParamVector,
        phi: &ParamVector,
        wrt: Wrt,
    ) -> Result<LossGrad> {
        if samples.is_empty() {
            return Err(Error::contract("gradient over an empty sample set"));
        }
        let parts = samples
            .par_iter()
            .map(|ch| self.loss_grad(ch, theta, phi, wrt))
            .collect::<Result<Vec<_>>>()?;
        let n = samples.len() as f64;
        let mut acc = LossGrad {
            loss: 0.0,
            theta: wrt.theta().then(|| theta.zeros_like()),
            phi: wrt.phi().then(|| phi.zeros_like()),
        };
        for p in &parts {
            acc.loss += p.loss / n;
            if let (Some(a), Some(b)) = (acc.theta.as_mut(), p.theta.as_ref()) {
                a.axpy(1.0 / n, b);
            }
            if let (Some(a), Some(b)) = (acc.phi.as_mut(), p.phi.as_ref()) {
                a.axpy(1.0 / n, b);
            }
        }
        Ok(acc)
    }
}

/// Fan-in uniform initialization helpers shared by both families.
pub(crate) mod init {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Fills `out` from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, out: &mut [f64]) {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        out.iter_mut().for_each(|x| *x = rng.random_range(-b..b));
    }
}
