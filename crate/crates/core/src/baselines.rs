//! Comparison methods sharing the model, loss, and evaluation plumbing.
//!
//! `joint` and `mismatch` train `(θ, φ)` as one network on pooled samples and
//! are evaluated without adaptation. `tl` pretrains the same way on one
//! channel, then fine-tunes all parameters on each episode. `ewc` adds
//! `(w_p/2) Σ_i F_i (ψ − ψ_i)²` over one anchor per completed episode.
//! `wogate` is the meta-learning pipeline with the gate fixed to ones.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{derive_seed, ChannelRealization, Task};
use crate::error::{Error, Result};
use crate::math::{adam_step_in_place, AdamState, ParamVector};
use crate::model::{Gate, Model, Wrt};
use crate::training::{meta_train, online_test, run_stream, EvalRecord, Optimizer, TestConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Joint,
    Mismatch,
    Tl,
    Ewc,
    Wogate,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Joint,
        BaselineKind::Mismatch,
        BaselineKind::Tl,
        BaselineKind::Ewc,
        BaselineKind::Wogate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Joint => "joint",
            BaselineKind::Mismatch => "mismatch",
            BaselineKind::Tl => "tl",
            BaselineKind::Ewc => "ewc",
            BaselineKind::Wogate => "wogate",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Training channel for `mismatch`.
    #[serde(default = "default_mismatch")]
    pub mismatch_channel: String,
    /// Pretraining channel for `tl` and `ewc`.
    #[serde(default = "default_pretrain")]
    pub pretrain_channel: String,
    /// `w_p`.
    #[serde(default)]
    pub ewc_weight: f64,
    /// Support samples per episode used for the Fisher estimate; 0 uses all.
    #[serde(default)]
    pub fisher_samples: usize,
}

fn default_mismatch() -> String {
    "channel3".into()
}

fn default_pretrain() -> String {
    "channel1".into()
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            mismatch_channel: default_mismatch(),
            pretrain_channel: default_pretrain(),
            ewc_weight: if kind == BaselineKind::Ewc { 1e4 } else { 0.0 },
            fisher_samples: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ewc_weight >= 0.0) {
            return Err(Error::config("EWC weight w_p must be >= 0"));
        }
        Ok(())
    }
}

/// Diagonal empirical Fisher for θ and φ.
#[derive(Debug, Clone, PartialEq)]
pub struct Fisher {
    pub theta: ParamVector,
    pub phi: ParamVector,
}

/// Mean over `samples` of elementwise squared per-sample loss gradients.
pub fn fisher_diag(model: &Model, theta: &ParamVector, phi: &ParamVector, samples: &[ChannelRealization]) -> Result<Fisher> {
    if samples.is_empty() {
        return Err(Error::contract("Fisher estimate needs at least one sample"));
    }
    let n = samples.len() as f64;
    let mut f = Fisher {
        theta: theta.zeros_like(),
        phi: phi.zeros_like(),
    };
    for ch in samples {
        let g = model.loss_grad(ch, theta, phi, Wrt::Both)?;
        let add = |acc: &mut ParamVector, g: &ParamVector| {
            acc.values_mut().iter_mut().zip(g.values()).for_each(|(a, x)| *a += x * x / n);
        };
        add(&mut f.theta, g.theta.as_ref().unwrap());
        add(&mut f.phi, g.phi.as_ref().unwrap());
    }
    Ok(f)
}

/// One EWC anchor: parameters at the end of an episode and their Fisher.
#[derive(Debug, Clone)]
pub struct Anchor {
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub fisher: Fisher,
}

fn weighted_sq(f: &ParamVector, a: &ParamVector, b: &ParamVector) -> f64 {
    f.values()
        .iter()
        .zip(a.values().iter().zip(b.values()))
        .map(|(fi, (x, y))| fi * (x - y).powi(2))
        .sum()
}

/// `Σ_i Σ F_i (ψ − ψ_i)²`; the EWC penalty is `w_p / 2` times this.
pub fn fisher_displacement(anchors: &[Anchor], theta: &ParamVector, phi: &ParamVector) -> f64 {
    anchors
        .iter()
        .map(|a| weighted_sq(&a.fisher.theta, theta, &a.theta) + weighted_sq(&a.fisher.phi, phi, &a.phi))
        .sum()
}

/// Adds `w_p Σ_i F_i (ψ − ψ_i)` to the gradients.
fn add_penalty_grad(anchors: &[Anchor], w_p: f64, theta: &ParamVector, phi: &ParamVector, g_theta: &mut ParamVector, g_phi: &mut ParamVector) {
    for a in anchors {
        let apply = |g: &mut ParamVector, f: &ParamVector, x: &ParamVector, x0: &ParamVector| {
            for (((gi, fi), xi), x0i) in g.values_mut().iter_mut().zip(f.values()).zip(x.values()).zip(x0.values()) {
                *gi += w_p * fi * (xi - x0i);
            }
        };
        apply(g_theta, &a.fisher.theta, theta, &a.theta);
        apply(g_phi, &a.fisher.phi, phi, &a.phi);
    }
}

/// Fine-tunes `(θ, φ)` jointly for `steps` steps on `samples` with the test
/// optimizer, plus the EWC penalty when `anchors` is non-empty.
pub fn fine_tune(
    model: &Model,
    theta: &mut ParamVector,
    phi: &mut ParamVector,
    samples: &[ChannelRealization],
    cfg: &TestConfig,
    anchors: &[Anchor],
    w_p: f64,
) -> Result<()> {
    let mut st_t = AdamState::for_params(theta, cfg.adam);
    let mut st_p = AdamState::for_params(phi, cfg.adam);
    for _ in 0..cfg.steps {
        let g = model.set_loss_grad(samples, theta, phi, Wrt::Both)?;
        let (mut gt, mut gp) = (g.theta.unwrap(), g.phi.unwrap());
        if w_p > 0.0 {
            add_penalty_grad(anchors, w_p, theta, phi, &mut gt, &mut gp);
        }
        match cfg.optimizer {
            Optimizer::Adam => {
                adam_step_in_place(theta, &gt, &mut st_t, cfg.lr)?;
                adam_step_in_place(phi, &gp, &mut st_p, cfg.lr)?;
            }
            Optimizer::Sgd => {
                theta.axpy(-cfg.lr, &gt);
                phi.axpy(-cfg.lr, &gp);
            }
        }
    }
    Ok(())
}

/// Single-loop training of `(θ, φ)` on a sample pool. Each epoch draws
/// `batch` samples; the update uses the outer learning rate.
pub fn train_pooled(
    model: &Model,
    pool: &[ChannelRealization],
    theta: ParamVector,
    phi: ParamVector,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<(ParamVector, ParamVector, Vec<f64>)> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::data("training pool is empty"));
    }
    let (mut theta, mut phi) = (theta, phi);
    let mut st_t = AdamState::for_params(&theta, cfg.adam);
    let mut st_p = AdamState::for_params(&phi, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xB001));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let idx: Vec<usize> = if batch <= pool.len() {
            sample_indices(&mut rng, pool.len(), batch).into_vec()
        } else {
            (0..batch).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let samples: Vec<ChannelRealization> = idx.iter().map(|&i| pool[i].clone()).collect();
        let g = model.set_loss_grad(&samples, &theta, &phi, Wrt::Both)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                snapshot: format!("pooled loss {}", g.loss),
            });
        }
        adam_step_in_place(&mut theta, g.theta.as_ref().unwrap(), &mut st_t, cfg.outer_lr)?;
        adam_step_in_place(&mut phi, g.phi.as_ref().unwrap(), &mut st_p, cfg.outer_lr)?;
        losses.push(g.loss);
    }
    Ok((theta, phi, losses))
}

/// All support and query samples of `tasks`, optionally restricted to one channel id.
pub fn pool_samples(tasks: &[Task], channel: Option<&str>) -> Vec<ChannelRealization> {
    tasks
        .iter()
        .flat_map(|t| t.support.iter().chain(&t.query))
        .filter(|c| channel.is_none_or(|id| c.channel_id == id))
        .cloned()
        .collect()
}

/// Inputs shared by every baseline run.
pub struct BaselineData<'a> {
    /// Meta-training tasks; the pooled methods flatten them.
    pub train_tasks: &'a [Task],
    pub stream: &'a [Task],
    /// Reference rates per stream episode.
    pub refs: &'a [Vec<f64>],
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub records: Vec<EvalRecord>,
    /// Fisher-weighted squared distance to the anchors after each episode
    /// (EWC only; zero when no anchor exists yet).
    pub displacements: Vec<f64>,
}

/// Trains and evaluates one baseline from the initialization `(theta, phi)`.
pub fn run_baseline(
    spec: &BaselineSpec,
    data: &BaselineData<'_>,
    model: &Model,
    init: (ParamVector, ParamVector),
    train: &TrainConfig,
    test: &TestConfig,
) -> Result<BaselineOutcome> {
    spec.validate()?;
    let method = spec.kind.name();
    let samples_per_epoch = train.batch_size
        * data
            .train_tasks
            .first()
            .map_or(1, |t| t.support.len() + t.query.len());
    let (theta0, phi0) = init;
    match spec.kind {
        BaselineKind::Joint | BaselineKind::Mismatch => {
            let channel = (spec.kind == BaselineKind::Mismatch).then_some(spec.mismatch_channel.as_str());
            let pool = pool_samples(data.train_tasks, channel);
            if pool.is_empty() {
                return Err(Error::data(format!("no training samples for channel `{}`", channel.unwrap_or("*"))));
            }
            let (mut theta, mut phi, _) = train_pooled(model, &pool, theta0, phi0, train, samples_per_epoch)?;
            let no_adapt = TestConfig { steps: 0, ..test.clone() };
            let records = run_stream(model, &mut theta, &mut phi, data.stream, data.refs, &no_adapt, method, |_, _, _, _| Ok(()))?;
            let n = data.stream.len();
            Ok(BaselineOutcome {
                theta,
                phi,
                records,
                displacements: vec![0.0; n],
            })
        }
        BaselineKind::Tl | BaselineKind::Ewc => {
            let pool = pool_samples(data.train_tasks, Some(&spec.pretrain_channel));
            if pool.is_empty() {
                return Err(Error::data(format!("no pretraining samples for channel `{}`", spec.pretrain_channel)));
            }
            let (mut theta, mut phi, _) = train_pooled(model, &pool, theta0, phi0, train, samples_per_epoch)?;
            let w_p = if spec.kind == BaselineKind::Ewc { spec.ewc_weight } else { 0.0 };
            let mut anchors: Vec<Anchor> = Vec::new();
            let mut displacements = Vec::new();
            let records = run_stream(model, &mut theta, &mut phi, data.stream, data.refs, test, method, |ep, th, ph, sel| {
                fine_tune(model, th, ph, sel, test, &anchors, w_p)?;
                displacements.push(fisher_displacement(&anchors, th, ph));
                if spec.kind == BaselineKind::Ewc {
                    let support = &data.stream[ep].support;
                    let n = if spec.fisher_samples == 0 { support.len() } else { spec.fisher_samples.min(support.len()) };
                    anchors.push(Anchor {
                        theta: th.clone(),
                        phi: ph.clone(),
                        fisher: fisher_diag(model, th, ph, &support[..n])?,
                    });
                }
                Ok(())
            })?;
            Ok(BaselineOutcome {
                theta,
                phi,
                records,
                displacements,
            })
        }
        BaselineKind::Wogate => {
            let ungated = model.clone().with_gate(Gate::Ones);
            let trained = meta_train(&ungated, data.train_tasks, theta0, phi0, train)?;
            let (theta, records) = online_test(&ungated, &trained.theta, &trained.phi, data.stream, data.refs, test, method)?;
            let n = data.stream.len();
            Ok(BaselineOutcome {
                theta,
                phi: trained.phi,
                records,
                displacements: vec![0.0; n],
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{build_tasks, build_test_stream, gen_channel, ChannelModelConfig, Family};
    use crate::gnn::GnnArchitecture;
    use crate::model::Architecture;
    use crate::training::reference_rates;

    fn model() -> Model {
        Model::new(Architecture::Gnn(GnnArchitecture::new(2)), 1.0).unwrap()
    }

    fn samples(n: usize) -> Vec<ChannelRealization> {
        let c = ChannelModelConfig::new(Family::Rayleigh, 3, 2);
        (0..n as u64).map(|s| gen_channel(&c, s).unwrap()).collect()
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("lwf".parse::<BaselineKind>(), Err(Error::Config(_))));
        assert_eq!("ewc".parse::<BaselineKind>().unwrap(), BaselineKind::Ewc);
    }

    #[test]
    fn fisher_definitions() {
        let m = model();
        let (t, p) = m.init(0);
        let s = samples(3);
        let one = fisher_diag(&m, &t, &p, &s[..1]).unwrap();
        let g = m.loss_grad(&s[0], &t, &p, Wrt::Both).unwrap();
        for (f, x) in one.theta.values().iter().zip(g.theta.unwrap().values()) {
            assert_eq!(*f, x * x);
        }
        let mut doubled = s.clone();
        doubled.extend(s.iter().cloned());
        let a = fisher_diag(&m, &t, &p, &s).unwrap();
        let b = fisher_diag(&m, &t, &p, &doubled).unwrap();
        assert!(a.theta.sub(&b.theta).norm() <= 1e-12 * a.theta.norm());
        assert!(a.theta.values().iter().all(|&x| x >= 0.0));

        // Zero gradients everywhere: a zeros gate silences the output.
        let silent = m.clone().with_gate(Gate::Zeros);
        let z = fisher_diag(&silent, &t, &p, &s).unwrap();
        assert_eq!(z.theta.norm() + z.phi.norm(), 0.0);
    }

    #[test]
    fn penalty_is_zero_at_anchor_and_convex() {
        let m = model();
        let (t, p) = m.init(1);
        let fisher = fisher_diag(&m, &t, &p, &samples(2)).unwrap();
        let anchors = vec![Anchor {
            theta: t.clone(),
            phi: p.clone(),
            fisher,
        }];
        assert_eq!(fisher_displacement(&anchors, &t, &p), 0.0);
        let mut d = t.zeros_like();
        d.values_mut().iter_mut().enumerate().for_each(|(i, x)| *x = ((i % 7) as f64 - 3.0) * 1e-2);
        let at = |s: f64| {
            let mut q = t.clone();
            q.axpy(s, &d);
            fisher_displacement(&anchors, &q, &p)
        };
        // Strict midpoint convexity along a direction with F > 0 support.
        assert!(at(0.5) < 0.5 * (at(0.0) + at(1.0)));
    }

    fn small_setup() -> (Vec<Task>, Vec<Task>, Vec<Vec<f64>>) {
        let fams = [Family::Channel1, Family::Channel2, Family::Channel3];
        let cfgs: Vec<_> = fams.iter().map(|&f| ChannelModelConfig::new(f, 3, 2)).collect();
        let tasks = build_tasks(&cfgs, 8, 2, 3, 1).unwrap();
        let stream = build_test_stream(&cfgs, 10, 0.2, 2).unwrap();
        let refs = reference_rates(&stream, 1.0, 10, 0, Some(3)).unwrap();
        (tasks, stream, refs)
    }

    #[test]
    fn ewc_without_penalty_matches_tl() {
        let m = model();
        let (tasks, stream, refs) = small_setup();
        let data = BaselineData {
            train_tasks: &tasks,
            stream: &stream,
            refs: &refs,
        };
        let train = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let test = TestConfig {
            steps: 3,
            ..TestConfig::default()
        };
        let tl = run_baseline(&BaselineSpec::new(BaselineKind::Tl), &data, &m, m.init(2), &train, &test).unwrap();
        let mut ewc_spec = BaselineSpec::new(BaselineKind::Ewc);
        ewc_spec.ewc_weight = 0.0;
        let ewc = run_baseline(&ewc_spec, &data, &m, m.init(2), &train, &test).unwrap();
        assert_eq!(tl.theta, ewc.theta);
        assert_eq!(tl.phi, ewc.phi);
        assert_eq!(
            tl.records.iter().map(|r| r.normalized_rate).collect::<Vec<_>>(),
            ewc.records.iter().map(|r| r.normalized_rate).collect::<Vec<_>>()
        );
    }

    #[test]
    fn every_kind_runs_and_stays_feasible() {
        let m = model();
        let (tasks, stream, refs) = small_setup();
        let data = BaselineData {
            train_tasks: &tasks,
            stream: &stream,
            refs: &refs,
        };
        let train = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let test = TestConfig {
            steps: 2,
            ..TestConfig::default()
        };
        for kind in BaselineKind::ALL {
            let out = run_baseline(&BaselineSpec::new(kind), &data, &m, m.init(3), &train, &test).unwrap();
            assert_eq!(out.records.len(), 6, "{kind:?}");
            let gated = if kind == BaselineKind::Wogate { m.clone().with_gate(Gate::Ones) } else { m.clone() };
            for t in &stream {
                let v = gated.forward(&t.query[0], &out.theta, &out.phi).unwrap();
                assert!(v.is_feasible(1.0));
            }
        }
    }

    #[test]
    fn wogate_forward_ignores_phi() {
        let m = model().with_gate(Gate::Ones);
        let (t, p) = m.init(4);
        let ch = &samples(1)[0];
        let a = m.forward(ch, &t, &p).unwrap();
        let b = m.forward(ch, &t, &p.scaled(-3.0)).unwrap();
        assert_eq!(a, b);
    }
}
