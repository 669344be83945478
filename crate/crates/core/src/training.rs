//! Dual-loop meta-training and sequential online testing.
//!
//! Meta-training samples `B` tasks per epoch, adapts θ on each support set
//! with φ frozen, and updates `(θ, φ)` from the query losses at the adapted
//! parameters. Online testing walks an ordered stream of episodes, adapting
//! θ on a few support samples per episode while φ stays fixed, and after
//! each episode evaluates on every episode seen so far.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{derive_seed, ChannelRealization, Task};
use crate::error::{Error, Result};
use crate::math::{adam_step_in_place, sgd_step_in_place, AdamConfig, AdamState, ParamVector};
use crate::model::{Model, Wrt};
use crate::sumrate::wmmse_solve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradient {
    /// Adapted parameters are treated as constants of `(θ, φ)`.
    #[default]
    FirstOrder,
    /// Differentiates through the inner SGD trajectory.
    Unrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: MetaGradient,
    pub inner_optimizer: Optimizer,
    pub adam: AdamConfig,
    /// Epoch interval for progress logging; 0 disables it.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_lr: 1e-4,
            inner_lr: 1e-3,
            batch_size: 5,
            inner_steps: 2,
            epochs: 1000,
            seed: 0,
            mode: MetaGradient::FirstOrder,
            inner_optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.inner_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.mode == MetaGradient::Unrolled && self.inner_optimizer != Optimizer::Sgd {
            return Err(Error::config(
                "unrolled meta-gradients differentiate plain SGD inner steps; set inner_optimizer = \"sgd\"",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Adaptation samples drawn from each episode's support set.
    pub n_adapt: usize,
    /// Adaptation steps per episode.
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            n_adapt: 2,
            steps: 10,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_adapt == 0 {
            return Err(Error::config("N_a must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("adaptation learning rate must be positive"));
        }
        Ok(())
    }
}

/// Normalized sum rate of one method on one channel at one point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    /// Episode after whose adaptation the evaluation ran.
    pub episode: usize,
    pub channel_id: String,
    /// Adaptation steps taken in that episode.
    pub step: usize,
    pub raw_rate: f64,
    pub wmmse_rate: f64,
    pub normalized_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub meta_loss: f64,
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MetaTrainResult {
    pub theta: ParamVector,
    pub phi: ParamVector,
    pub history: Vec<EpochRecord>,
}

/// One optimizer run over a fixed sample set.
struct Stepper {
    optimizer: Optimizer,
    lr: f64,
    adam: Option<AdamState>,
}

impl Stepper {
    fn new(optimizer: Optimizer, lr: f64, cfg: AdamConfig, params: &ParamVector) -> Self {
        Self {
            optimizer,
            lr,
            adam: (optimizer == Optimizer::Adam).then(|| AdamState::for_params(params, cfg)),
        }
    }

    fn step(&mut self, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
        match (self.optimizer, self.adam.as_mut()) {
            (Optimizer::Adam, Some(state)) => adam_step_in_place(params, grads, state, self.lr),
            _ => sgd_step_in_place(params, grads, self.lr),
        }
    }
}

/// `J` steps on θ against the mean support loss with φ frozen. Adam state
/// starts fresh on every call.
pub fn inner_adapt(
    model: &Model,
    theta: &ParamVector,
    phi: &ParamVector,
    support: &[ChannelRealization],
    steps: usize,
    lr: f64,
    optimizer: Optimizer,
    adam: AdamConfig,
) -> Result<ParamVector> {
    if support.is_empty() {
        return Err(Error::contract("inner adaptation needs a non-empty support set"));
    }
    let mut theta = theta.clone();
    let mut stepper = Stepper::new(optimizer, lr, adam, &theta);
    for _ in 0..steps {
        let g = model.set_loss_grad(support, &theta, phi, Wrt::Theta)?;
        stepper.step(&mut theta, g.theta.as_ref().expect("θ gradient"))?;
    }
    Ok(theta)
}

/// Query loss at the adapted parameters and its gradients with respect to
/// the initial `(θ, φ)`.
#[derive(Debug, Clone)]
pub struct MetaGrad {
    pub loss: f64,
    pub theta: ParamVector,
    pub phi: ParamVector,
}

pub fn meta_gradient(model: &Model, theta: &ParamVector, phi: &ParamVector, task: &Task, cfg: &TrainConfig) -> Result<MetaGrad> {
    match cfg.mode {
        MetaGradient::FirstOrder => {
            let adapted = inner_adapt(
                model,
                theta,
                phi,
                &task.support,
                cfg.inner_steps,
                cfg.inner_lr,
                cfg.inner_optimizer,
                cfg.adam,
            )?;
            let q = model.set_loss_grad(&task.query, &adapted, phi, Wrt::Both)?;
            Ok(MetaGrad {
                loss: q.loss,
                theta: q.theta.expect("θ gradient"),
                phi: q.phi.expect("φ gradient"),
            })
        }
        MetaGradient::Unrolled => unrolled_gradient(model, theta, phi, task, cfg),
    }
}

/// Backpropagates through `θ_{j+1} = θ_j − β ∇_θ L_S(θ_j, φ)`. Hessian-vector
/// products are central differences of exact gradients.
fn unrolled_gradient(model: &Model, theta: &ParamVector, phi: &ParamVector, task: &Task, cfg: &TrainConfig) -> Result<MetaGrad> {
    let beta = cfg.inner_lr;
    let mut trajectory = vec![theta.clone()];
    for _ in 0..cfg.inner_steps {
        let cur = trajectory.last().unwrap();
        let g = model.set_loss_grad(&task.support, cur, phi, Wrt::Theta)?;
        let mut next = cur.clone();
        next.axpy(-beta, g.theta.as_ref().unwrap());
        trajectory.push(next);
    }
    let q = model.set_loss_grad(&task.query, trajectory.last().unwrap(), phi, Wrt::Both)?;
    let mut a = q.theta.unwrap();
    let mut g_phi = q.phi.unwrap();
    for th in trajectory[..cfg.inner_steps].iter().rev() {
        let an = a.norm();
        if an == 0.0 {
            break;
        }
        let eps = 1e-5 * th.norm().max(1.0) / an;
        let plus = model.set_loss_grad(&task.support, &th_shift(th, &a, eps), phi, Wrt::Both)?;
        let minus = model.set_loss_grad(&task.support, &th_shift(th, &a, -eps), phi, Wrt::Both)?;
        let hvp = |p: &Option<ParamVector>, m: &Option<ParamVector>| p.as_ref().unwrap().sub(m.as_ref().unwrap()).scaled(1.0 / (2.0 * eps));
        let h_tt = hvp(&plus.theta, &minus.theta);
        let h_pt = hvp(&plus.phi, &minus.phi);
        g_phi.axpy(-beta, &h_pt);
        a.axpy(-beta, &h_tt);
    }
    Ok(MetaGrad {
        loss: q.loss,
        theta: a,
        phi: g_phi,
    })
}

fn th_shift(p: &ParamVector, d: &ParamVector, eps: f64) -> ParamVector {
    let mut q = p.clone();
    q.axpy(eps, d);
    q
}

fn snapshot(theta: &ParamVector, phi: &ParamVector, loss: f64) -> String {
    format!(
        "loss={loss}, |θ|={:.6e}, |φ|={:.6e}, θ finite={}, φ finite={}",
        theta.norm(),
        phi.norm(),
        theta.all_finite(),
        phi.all_finite()
    )
}

/// Dual-loop meta-training from `(theta, phi)`.
pub fn meta_train(
    model: &Model,
    tasks: &[Task],
    theta: ParamVector,
    phi: ParamVector,
    cfg: &TrainConfig,
) -> Result<MetaTrainResult> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("meta-training needs at least one task"));
    }
    let (mut theta, mut phi) = (theta, phi);
    let mut st_theta = AdamState::for_params(&theta, cfg.adam);
    let mut st_phi = AdamState::for_params(&phi, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7A5C));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let picked: Vec<usize> = if cfg.batch_size <= tasks.len() {
            sample_indices(&mut rng, tasks.len(), cfg.batch_size).into_vec()
        } else {
            (0..cfg.batch_size).map(|_| rng.random_range(0..tasks.len())).collect()
        };
        let grads: Vec<MetaGrad> = picked
            .par_iter()
            .map(|&i| meta_gradient(model, &theta, &phi, &tasks[i], cfg))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric { op, detail } => Error::Diverged {
                    epoch,
                    snapshot: format!("{op}: {detail}; {}", snapshot(&theta, &phi, f64::NAN)),
                },
                other => other,
            })?;
        let b = grads.len() as f64;
        let mut g_theta = theta.zeros_like();
        let mut g_phi = phi.zeros_like();
        let mut loss = 0.0;
        for g in &grads {
            loss += g.loss / b;
            g_theta.axpy(1.0 / b, &g.theta);
            g_phi.axpy(1.0 / b, &g.phi);
        }
        if !loss.is_finite() || !g_theta.all_finite() || !g_phi.all_finite() {
            return Err(Error::Diverged {
                epoch,
                snapshot: snapshot(&theta, &phi, loss),
            });
        }
        adam_step_in_place(&mut theta, &g_theta, &mut st_theta, cfg.outer_lr)?;
        adam_step_in_place(&mut phi, &g_phi, &mut st_phi, cfg.outer_lr)?;
        if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
            log::info!("epoch {}: meta loss {loss:.6}", epoch + 1);
        }
        history.push(EpochRecord {
            epoch,
            meta_loss: loss,
            tasks: picked,
        });
    }
    Ok(MetaTrainResult { theta, phi, history })
}

/// 100-iteration WMMSE weighted sum rate for the first `limit` query samples
/// of every episode.
pub fn reference_rates(stream: &[Task], p_max: f64, iters: usize, seed: u64, limit: Option<usize>) -> Result<Vec<Vec<f64>>> {
    stream
        .iter()
        .enumerate()
        .map(|(ep, task)| {
            let n = limit.map_or(task.query.len(), |l| l.min(task.query.len()));
            task.query[..n]
                .par_iter()
                .enumerate()
                .map(|(i, ch)| {
                    let s = derive_seed(derive_seed(seed, ep as u64), i as u64);
                    Ok(wmmse_solve(ch, p_max, iters, s)?.1.weighted_sum_rate)
                })
                .collect()
        })
        .collect()
}

/// Mean raw rate, mean reference rate, and mean per-sample normalized rate.
pub fn evaluate_set(model: &Model, theta: &ParamVector, phi: &ParamVector, samples: &[ChannelRealization], refs: &[f64]) -> Result<(f64, f64, f64)> {
    if refs.is_empty() || refs.len() > samples.len() {
        return Err(Error::contract("reference rates must cover a non-empty prefix of the samples"));
    }
    let rates = samples[..refs.len()]
        .par_iter()
        .map(|ch| model.loss(ch, theta, phi).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    let n = refs.len() as f64;
    let raw = rates.iter().sum::<f64>() / n;
    let reference = refs.iter().sum::<f64>() / n;
    let normalized = rates
        .iter()
        .zip(refs)
        .map(|(r, w)| if *w > 0.0 { r / w } else { 1.0 })
        .sum::<f64>()
        / n;
    Ok((raw, reference, normalized))
}

/// Picks the episode's adaptation samples (once per episode).
pub fn select_adaptation(task: &Task, n_adapt: usize, seed: u64, episode: usize) -> Result<Vec<ChannelRealization>> {
    if n_adapt > task.support.len() {
        return Err(Error::contract(format!(
            "N_a = {n_adapt} exceeds the support set size {}",
            task.support.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, episode as u64));
    Ok(sample_indices(&mut rng, task.support.len(), n_adapt)
        .into_iter()
        .map(|i| task.support[i].clone())
        .collect())
}

/// Walks `stream`, calling `adapt` once per episode, and evaluates on all
/// episodes seen so far after each adaptation.
#[allow(clippy::too_many_arguments)]
pub fn run_stream<F>(
    model: &Model,
    theta: &mut ParamVector,
    phi: &mut ParamVector,
    stream: &[Task],
    refs: &[Vec<f64>],
    cfg: &TestConfig,
    method: &str,
    mut adapt: F,
) -> Result<Vec<EvalRecord>>
where
    F: FnMut(usize, &mut ParamVector, &mut ParamVector, &[ChannelRealization]) -> Result<()>,
{
    cfg.validate()?;
    if refs.len() != stream.len() {
        return Err(Error::contract("one reference-rate list per episode is required"));
    }
    let mut records = Vec::new();
    for (ep, task) in stream.iter().enumerate() {
        let selected = select_adaptation(task, cfg.n_adapt, cfg.seed, ep)?;
        adapt(ep, theta, phi, &selected)?;
        for (seen, past) in stream[..=ep].iter().enumerate() {
            let (raw, wmmse, normalized) = evaluate_set(model, theta, phi, &past.query, &refs[seen])?;
            records.push(EvalRecord {
                method: method.to_string(),
                episode: ep,
                channel_id: past.channel_id().to_string(),
                step: cfg.steps,
                raw_rate: raw,
                wmmse_rate: wmmse,
                normalized_rate: normalized,
                seed: cfg.seed,
            });
        }
    }
    Ok(records)
}

/// Sequential test: θ carries across episodes, φ stays at `phi`.
pub fn online_test(
    model: &Model,
    theta: &ParamVector,
    phi: &ParamVector,
    stream: &[Task],
    refs: &[Vec<f64>],
    cfg: &TestConfig,
    method: &str,
) -> Result<(ParamVector, Vec<EvalRecord>)> {
    let mut theta = theta.clone();
    let mut phi_fixed = phi.clone();
    let records = run_stream(model, &mut theta, &mut phi_fixed, stream, refs, cfg, method, |_, th, ph, sel| {
        *th = inner_adapt(model, th, ph, sel, cfg.steps, cfg.lr, cfg.optimizer, cfg.adam)?;
        Ok(())
    })?;
    Ok((theta, records))
}

/// Held-out normalized rate on `task` after each step count in `steps`,
/// adapting θ from `theta` on `n_adapt` support samples.
#[allow(clippy::too_many_arguments)]
pub fn jq_sweep(
    model: &Model,
    theta: &ParamVector,
    phi: &ParamVector,
    task: &Task,
    refs: &[f64],
    steps: &[usize],
    cfg: &TestConfig,
    episode: usize,
) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    let selected = select_adaptation(task, cfg.n_adapt, cfg.seed, episode)?;
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut th = theta.clone();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, cfg.adam, &th);
    let mut done = 0;
    let mut out = Vec::with_capacity(sorted.len());
    for &target in &sorted {
        while done < target {
            let g = model.set_loss_grad(&selected, &th, phi, Wrt::Theta)?;
            stepper.step(&mut th, g.theta.as_ref().unwrap())?;
            done += 1;
        }
        out.push((target, evaluate_set(model, &th, phi, &task.query, refs)?.2));
    }
    Ok(out)
}
