use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ChannelModelConfig;
use super::generate::{derive_seed, gen_channel};
use super::ChannelRealization;
use crate::error::{Error, Result};

/// Adaptation data (`support`) and evaluation data (`query`) for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub support: Vec<ChannelRealization>,
    pub query: Vec<ChannelRealization>,
}

impl Task {
    pub fn new(support: Vec<ChannelRealization>, query: Vec<ChannelRealization>) -> Result<Self> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::contract("task needs non-empty support and query sets"));
        }
        Ok(Self { support, query })
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Channel id of the first support sample.
    pub fn channel_id(&self) -> &str {
        &self.support[0].channel_id
    }
}

/// Draws `n` realizations; sample `i` uses `configs[pick(i)]` and a seed
/// derived from `(seed, offset + i)`, so any slice can be regenerated alone.
fn draw_mixed(
    configs: &[ChannelModelConfig],
    n: usize,
    seed: u64,
    offset: u64,
) -> Result<Vec<ChannelRealization>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, offset + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let cfg = &configs[rng.random_range(0..configs.len())];
            gen_channel(cfg, rng.random())
        })
        .collect()
}

/// `n_tasks` tasks whose samples each come from a uniformly chosen family.
pub fn build_tasks(
    configs: &[ChannelModelConfig],
    n_tasks: usize,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Vec<Task>> {
    if configs.is_empty() {
        return Err(Error::config("build_tasks needs at least one channel config"));
    }
    if n_tasks == 0 || support_size == 0 || query_size == 0 {
        return Err(Error::config(
            "task count, support size and query size must be positive",
        ));
    }
    for c in configs {
        c.validate()?;
    }
    let per_task = support_size + query_size;
    let mut samples = draw_mixed(configs, n_tasks * per_task, seed, 0)?.into_iter();
    (0..n_tasks)
        .map(|_| {
            let support: Vec<_> = samples.by_ref().take(support_size).collect();
            let query: Vec<_> = samples.by_ref().take(query_size).collect();
            Task::new(support, query)
        })
        .collect()
}

/// One task per config, in order. Each holds `samples_per_channel` draws, the
/// first `round(samples_per_channel * support_frac)` of which form the support set.
pub fn build_test_stream(
    configs: &[ChannelModelConfig],
    samples_per_channel: usize,
    support_frac: f64,
    seed: u64,
) -> Result<Vec<Task>> {
    if !(support_frac > 0.0 && support_frac < 1.0) {
        return Err(Error::config(format!(
            "support fraction must lie in (0, 1), got {support_frac}"
        )));
    }
    let n_support = (samples_per_channel as f64 * support_frac).round() as usize;
    if n_support == 0 || n_support >= samples_per_channel {
        return Err(Error::config(format!(
            "support fraction {support_frac} of {samples_per_channel} samples leaves an empty support or query set"
        )));
    }
    configs
        .iter()
        .enumerate()
        .map(|(ep, cfg)| {
            let ep_seed = derive_seed(seed, ep as u64);
            let mut draws = draw_mixed(std::slice::from_ref(cfg), samples_per_channel, ep_seed, 0)?;
            let query = draws.split_off(n_support);
            Task::new(draws, query)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::Family;

    fn cfgs() -> Vec<ChannelModelConfig> {
        [Family::Channel1, Family::Channel2, Family::Channel3]
            .into_iter()
            .map(|f| ChannelModelConfig::new(f, 3, 2))
            .collect()
    }

    #[test]
    fn full_size_task_count() {
        let tasks = build_tasks(&cfgs(), 600, 2, 15, 1).unwrap();
        assert_eq!(tasks.len(), 600);
        assert_eq!(tasks.iter().map(Task::len).sum::<usize>(), 10_200);
        assert!(tasks.iter().all(|t| t.support.len() == 2 && t.query.len() == 15));
    }

    #[test]
    fn single_task_has_two_distinct_samples() {
        let tasks = build_tasks(&cfgs(), 1, 1, 1, 9).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_ne!(tasks[0].support[0], tasks[0].query[0]);
    }

    #[test]
    fn families_are_mixed_and_reproducible() {
        let a = build_tasks(&cfgs(), 30, 2, 3, 5).unwrap();
        assert_eq!(a, build_tasks(&cfgs(), 30, 2, 3, 5).unwrap());
        let ids: std::collections::BTreeSet<_> = a
            .iter()
            .flat_map(|t| t.support.iter().chain(&t.query))
            .map(|c| c.channel_id.clone())
            .collect();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn empty_configs_rejected() {
        assert!(matches!(build_tasks(&[], 1, 1, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stream_split_and_order() {
        let stream = build_test_stream(&cfgs(), 500, 0.2, 3).unwrap();
        assert_eq!(stream.len(), 3);
        for (t, id) in stream.iter().zip(["channel1", "channel2", "channel3"]) {
            assert_eq!((t.support.len(), t.query.len()), (100, 400));
            assert!(t.support.iter().chain(&t.query).all(|c| c.channel_id == id));
        }
    }

    #[test]
    fn degenerate_split_rejected() {
        assert!(matches!(
            build_test_stream(&cfgs(), 4, 0.1, 0),
            Err(Error::Config(_))
        ));
        assert!(build_test_stream(&cfgs(), 4, 1.0, 0).is_err());
    }
}
