//! Stage runners. Each reads its inputs from and writes its artifacts to
//! one output directory:
//!
//! ```text
//! data/train.{mgds,manifest.json}   generate-data
//! data/test.{mgds,manifest.json}
//! checkpoint.json, training_curve.csv   train
//! records/<method>.csv              evaluate, baseline
//! report.json, report_summary.csv, continuity.csv   report
//! sweep_<axis>.csv                  sweep-*
//! nakagami_gen.csv                  nakagami-gen
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{read_json, read_records, write_csv, write_json, write_records, Checkpoint, Provenance};
use super::config::{default_cnn, ExperimentConfig, Scenario};
use crate::baselines::{run_baseline, BaselineData, BaselineKind, BaselineOutcome, BaselineSpec};
use crate::channels::{build_tasks, build_test_stream, dataset, derive_seed, Task};
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::metrics::{cds, continuity_matrix, current_channel_records, variance_report, Sentinel, Trajectory};
use crate::model::{Architecture, Model};
use crate::training::{inner_adapt, jq_sweep, meta_train, online_test, reference_rates, select_adaptation, EvalRecord, MetaTrainResult};

pub const PROPOSED: &str = "proposed";
const STREAM_SEED: u64 = 0x57_2EA1;

/// Generated data and the model it is fed to.
pub struct Bundle {
    pub model: Model,
    pub tasks: Vec<Task>,
    pub stream: Vec<Task>,
}

impl Bundle {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.data;
        let tasks = build_tasks(&cfg.train_configs(), d.tasks, d.support, d.query, cfg.seed)?;
        let stream = build_test_stream(
            &cfg.stream_configs(),
            d.test_samples_per_channel,
            d.test_support_frac,
            derive_seed(cfg.seed, STREAM_SEED),
        )?;
        Ok(Self {
            model: cfg.model()?,
            tasks,
            stream,
        })
    }

    /// WMMSE reference rates for the stream's query sets.
    pub fn references(&self, cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
        let limit = (cfg.data.eval_limit > 0).then_some(cfg.data.eval_limit);
        reference_rates(&self.stream, cfg.system.p_max, cfg.data.wmmse_iters, cfg.seed, limit)
    }

    fn baseline_data<'a>(&'a self, refs: &'a [Vec<f64>]) -> BaselineData<'a> {
        BaselineData {
            train_tasks: &self.tasks,
            stream: &self.stream,
            refs,
        }
    }
}

pub fn train_proposed(cfg: &ExperimentConfig, b: &Bundle) -> Result<MetaTrainResult> {
    let (theta, phi) = b.model.init(cfg.seed);
    meta_train(&b.model, &b.tasks, theta, phi, &cfg.train)
}

pub fn evaluate_proposed(
    cfg: &ExperimentConfig,
    b: &Bundle,
    refs: &[Vec<f64>],
    theta: &ParamVector,
    phi: &ParamVector,
) -> Result<Vec<EvalRecord>> {
    Ok(online_test(&b.model, theta, phi, &b.stream, refs, &cfg.test, PROPOSED)?.1)
}

/// Runs one baseline from the same initialization the proposed method uses.
pub fn train_baseline(cfg: &ExperimentConfig, b: &Bundle, refs: &[Vec<f64>], spec: &BaselineSpec) -> Result<BaselineOutcome> {
    run_baseline(spec, &b.baseline_data(refs), &b.model, b.model.init(cfg.seed), &cfg.train, &cfg.test)
}

/// The configured baselines, or every kind with defaults when none are listed.
pub fn baseline_specs(cfg: &ExperimentConfig) -> Vec<BaselineSpec> {
    if cfg.baselines.is_empty() {
        BaselineKind::ALL.into_iter().map(BaselineSpec::new).collect()
    } else {
        cfg.baselines.clone()
    }
}

/// Per-method figures of a finished stream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub channels: Vec<String>,
    /// Normalized rate on each channel right after adapting to it.
    pub current_rates: Vec<f64>,
    /// Normalized rate on each channel after the last episode.
    pub final_rates: Vec<f64>,
    /// Population variance of `current_rates`; absent with one channel.
    pub variance: Option<f64>,
    /// Square grid with the sentinel above the diagonal.
    pub continuity: Vec<Vec<f64>>,
}

pub fn summarize(method: &str, records: &[EvalRecord], sentinel: Sentinel) -> Result<MethodSummary> {
    let m = continuity_matrix(records)?;
    let current = current_channel_records(records)?;
    let ids: Vec<&str> = m.channels.iter().map(String::as_str).collect();
    let variance = if ids.len() >= 2 {
        Some(variance_report(&current, &ids)?)
    } else {
        None
    };
    let n = m.len();
    Ok(MethodSummary {
        method: method.to_string(),
        channels: m.channels.clone(),
        current_rates: (0..n).map(|i| m.cells[i][i]).collect(),
        final_rates: m.cells[n - 1].clone(),
        variance,
        continuity: m.export(sentinel),
    })
}

fn sentinel(cfg: &ExperimentConfig) -> Sentinel {
    match cfg.scenario {
        Scenario::GnnBeamforming => Sentinel::Gnn,
        Scenario::CnnPower => Sentinel::Cnn,
    }
}

/// Pairwise adaptation-direction similarity from `theta`, one trajectory
/// per stream channel, each `steps` test-time steps long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdsTable {
    pub channels: Vec<String>,
    pub steps: usize,
    pub values: Vec<Vec<f64>>,
}

pub fn cds_table(cfg: &ExperimentConfig, model: &Model, theta: &ParamVector, phi: &ParamVector, stream: &[Task]) -> Result<CdsTable> {
    let t = &cfg.test;
    let trajectories = stream
        .iter()
        .enumerate()
        .map(|(ep, task)| {
            let sel = select_adaptation(task, t.n_adapt, t.seed, ep)?;
            let end = inner_adapt(model, theta, phi, &sel, t.steps, t.lr, t.optimizer, t.adam)?;
            Trajectory::new(theta.clone(), end, t.steps)
        })
        .collect::<Result<Vec<_>>>()?;
    let values = trajectories
        .iter()
        .map(|a| trajectories.iter().map(|b| cds(a, b)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(CdsTable {
        channels: stream.iter().map(|s| s.channel_id().to_string()).collect(),
        steps: t.steps,
        values,
    })
}

/// A resolved config bound to an output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    /// Allows mixing artifacts from different configs.
    pub force: bool,
}

impl Run {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            hash: cfg.hash(),
            cfg,
            out: out.into(),
            force,
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(&self.hash, self.cfg.seed)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn records_dir(&self) -> PathBuf {
        self.out.join("records")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }

    fn check_hash(&self, what: &Path, hash: &str) -> Result<()> {
        if hash != self.hash && !self.force {
            return Err(Error::data(format!(
                "{} was produced by config {hash}, current config is {}; pass --force to use it anyway",
                what.display(),
                self.hash
            )));
        }
        Ok(())
    }

    fn load_bundle(&self) -> Result<Bundle> {
        let dir = self.data_dir();
        let (mt, tasks) = dataset::read(&dir, "train")
            .map_err(|e| Error::data(format!("{e}; run generate-data first")))?;
        let (ms, stream) = dataset::read(&dir, "test")
            .map_err(|e| Error::data(format!("{e}; run generate-data first")))?;
        self.check_hash(&dataset::manifest_path(&dir, "train"), &mt.config_hash)?;
        self.check_hash(&dataset::manifest_path(&dir, "test"), &ms.config_hash)?;
        Ok(Bundle {
            model: self.cfg.model()?,
            tasks,
            stream,
        })
    }

    pub fn load_checkpoint(&self) -> Result<Checkpoint> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::data(format!("missing checkpoint {}; run train first", path.display())));
        }
        let doc = read_json::<Checkpoint>(&path)?;
        self.check_hash(&path, &doc.provenance.config_hash)?;
        Ok(doc.body)
    }

    pub fn generate_data(&self) -> Result<(dataset::Manifest, dataset::Manifest)> {
        let b = Bundle::generate(&self.cfg)?;
        let dir = self.data_dir();
        let train = dataset::write(&dir, "train", &b.tasks, self.cfg.seed, &self.hash)?;
        let test = dataset::write(&dir, "test", &b.stream, self.cfg.seed, &self.hash)?;
        Ok((train, test))
    }

    pub fn train(&self) -> Result<MetaTrainResult> {
        let b = self.load_bundle()?;
        let r = train_proposed(&self.cfg, &b)?;
        let ckpt = Checkpoint {
            architecture: b.model.arch.clone(),
            p_max: b.model.p_max,
            gate: b.model.gate,
            epochs: self.cfg.train.epochs,
            theta: r.theta.clone(),
            phi: r.phi.clone(),
        };
        write_json(&self.checkpoint_path(), &self.provenance(), &ckpt)?;
        let curve: Vec<CurveRow> = r
            .history
            .iter()
            .map(|h| CurveRow {
                epoch: h.epoch,
                meta_loss: h.meta_loss,
            })
            .collect();
        write_csv(&self.out.join("training_curve.csv"), &self.provenance(), &curve)?;
        Ok(r)
    }

    pub fn evaluate(&self) -> Result<Vec<EvalRecord>> {
        let ckpt = self.load_checkpoint()?;
        let b = self.load_bundle()?;
        let refs = b.references(&self.cfg)?;
        let records = evaluate_proposed(&self.cfg, &b, &refs, &ckpt.theta, &ckpt.phi)?;
        write_records(&self.records_dir().join(format!("{PROPOSED}.csv")), &self.provenance(), &records)?;
        Ok(records)
    }

    /// Runs the configured baselines, or only `kinds` when non-empty.
    pub fn baselines(&self, kinds: &[BaselineKind]) -> Result<Vec<(String, Vec<EvalRecord>)>> {
        let mut specs = baseline_specs(&self.cfg);
        if !kinds.is_empty() {
            for k in kinds {
                if !specs.iter().any(|s| s.kind == *k) {
                    specs.push(BaselineSpec::new(*k));
                }
            }
            specs.retain(|s| kinds.contains(&s.kind));
        }
        let b = self.load_bundle()?;
        let refs = b.references(&self.cfg)?;
        let mut out = Vec::new();
        for spec in &specs {
            log::info!("baseline {}", spec.kind.name());
            let o = train_baseline(&self.cfg, &b, &refs, spec)?;
            let name = spec.kind.name().to_string();
            write_records(&self.records_dir().join(format!("{name}.csv")), &self.provenance(), &o.records)?;
            out.push((name, o.records));
        }
        Ok(out)
    }

    pub fn report(&self) -> Result<Report> {
        let dir = self.records_dir();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::data(format!("no record files in {}", dir.display())));
        }
        let mut hashes = BTreeSet::new();
        let mut by_method: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
        for f in &files {
            let (prov, recs) = read_records(f)?;
            hashes.insert(prov.config_hash);
            for r in recs {
                by_method.entry(r.method.clone()).or_default().push(r);
            }
        }
        if hashes.len() > 1 && !self.force {
            return Err(Error::data(format!(
                "records in {} come from {} different configs; pass --force to mix them",
                dir.display(),
                hashes.len()
            )));
        }
        let s = sentinel(&self.cfg);
        let methods = by_method
            .iter()
            .map(|(m, recs)| summarize(m, recs, s))
            .collect::<Result<Vec<_>>>()?;
        let cds = match (self.cfg.test.steps, self.checkpoint_path().exists()) {
            (steps, true) if steps > 0 => {
                let ckpt = self.load_checkpoint()?;
                let b = self.load_bundle()?;
                let model = checkpoint_model(&ckpt)?;
                Some(cds_table(&self.cfg, &model, &ckpt.theta, &ckpt.phi, &b.stream)?)
            }
            _ => None,
        };
        let report = Report {
            config_hashes: hashes.into_iter().collect(),
            methods,
            cds,
        };
        let prov = self.provenance();
        write_json(&self.out.join("report.json"), &prov, &report)?;
        let mut summary = Vec::new();
        let mut grid = Vec::new();
        for m in &report.methods {
            for (j, ch) in m.channels.iter().enumerate() {
                summary.push(SummaryRow {
                    method: m.method.clone(),
                    channel_id: ch.clone(),
                    current_rate: m.current_rates[j],
                    final_rate: m.final_rates[j],
                });
            }
            for (i, row) in m.continuity.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    grid.push(ContinuityRow {
                        method: m.method.clone(),
                        episode: i,
                        channel_id: m.channels[j].clone(),
                        normalized_rate: *v,
                        filled: j > i,
                    });
                }
            }
        }
        write_csv(&self.out.join("report_summary.csv"), &prov, &summary)?;
        write_csv(&self.out.join("continuity.csv"), &prov, &grid)?;
        Ok(report)
    }

    pub fn sweep_jq(&self) -> Result<Vec<JqRow>> {
        let ckpt = self.load_checkpoint()?;
        let b = self.load_bundle()?;
        let refs = b.references(&self.cfg)?;
        let mut rows = Vec::new();
        for (ep, task) in b.stream.iter().enumerate() {
            let curve = jq_sweep(&b.model, &ckpt.theta, &ckpt.phi, task, &refs[ep], &self.cfg.sweeps.jq, &self.cfg.test, ep)?;
            rows.extend(curve.into_iter().map(|(jq, rate)| JqRow {
                episode: ep,
                channel_id: task.channel_id().to_string(),
                jq,
                normalized_rate: rate,
            }));
        }
        write_csv(&self.out.join("sweep_jq.csv"), &self.provenance(), &rows)?;
        Ok(rows)
    }

    pub fn sweep_pmax(&self) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &p in &self.cfg.sweeps.p_max {
            let mut c = self.cfg.clone();
            c.system.p_max = p;
            rows.extend(compare_methods(&c, p)?);
        }
        write_csv(&self.out.join("sweep_pmax.csv"), &self.provenance(), &rows)?;
        Ok(rows)
    }

    pub fn sweep_k(&self) -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for &k in &self.cfg.sweeps.k {
            let c = with_users(&self.cfg, k)?;
            rows.extend(compare_methods(&c, k as f64)?);
        }
        write_csv(&self.out.join("sweep_k.csv"), &self.provenance(), &rows)?;
        Ok(rows)
    }

    pub fn sweep_wp(&self) -> Result<Vec<WpRow>> {
        let rows = ewc_sweep(&self.cfg)?;
        write_csv(&self.out.join("sweep_wp.csv"), &self.provenance(), &rows)?;
        Ok(rows)
    }

    pub fn nakagami_gen(&self) -> Result<Vec<GenRow>> {
        let rows = generalization(&self.cfg)?;
        write_csv(&self.out.join("nakagami_gen.csv"), &self.provenance(), &rows)?;
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hashes: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub cds: Option<CdsTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub meta_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub channel_id: String,
    pub current_rate: f64,
    pub final_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub method: String,
    pub episode: usize,
    pub channel_id: String,
    pub normalized_rate: f64,
    /// True for sentinel cells above the diagonal.
    pub filled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JqRow {
    pub episode: usize,
    pub channel_id: String,
    pub jq: usize,
    pub normalized_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept value (P_max in watts or the pair count K).
    pub value: f64,
    pub method: String,
    pub variance: f64,
    pub mean_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WpRow {
    pub w_p: f64,
    /// Fisher-weighted squared distance to the anchors, summed over episodes.
    pub displacement: f64,
    /// Mean normalized rate on each channel right after adapting to it.
    pub current_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub method: String,
    pub channel_id: String,
    pub seen: bool,
    pub normalized_rate: f64,
}

/// Copy of `cfg` with `k` pairs and a matching default CNN when needed.
pub fn with_users(cfg: &ExperimentConfig, k: usize) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    if c.system.weights.is_some() {
        return Err(Error::config("sweep-k needs the default unit weights"));
    }
    c.system.k = k;
    if let Some(Architecture::Cnn(_)) | None = &c.architecture {
        if c.scenario == Scenario::CnnPower {
            c.architecture = Some(Architecture::Cnn(default_cnn(k)));
        }
    }
    c.validate()?;
    Ok(c)
}

/// Proposed method and every `sweeps.compare` method on fresh data from `cfg`.
fn compare_methods(cfg: &ExperimentConfig, value: f64) -> Result<Vec<SweepRow>> {
    let b = Bundle::generate(cfg)?;
    let refs = b.references(cfg)?;
    let r = train_proposed(cfg, &b)?;
    let mut runs = vec![(PROPOSED.to_string(), evaluate_proposed(cfg, &b, &refs, &r.theta, &r.phi)?)];
    for kind in &cfg.sweeps.compare {
        let spec = cfg
            .baselines
            .iter()
            .find(|s| s.kind == *kind)
            .cloned()
            .unwrap_or_else(|| BaselineSpec::new(*kind));
        runs.push((kind.name().to_string(), train_baseline(cfg, &b, &refs, &spec)?.records));
    }
    runs.into_iter()
        .map(|(method, recs)| {
            let s = summarize(&method, &recs, sentinel(cfg))?;
            Ok(SweepRow {
                value,
                method,
                variance: s.variance.unwrap_or(0.0),
                mean_rate: s.current_rates.iter().sum::<f64>() / s.current_rates.len() as f64,
            })
        })
        .collect()
}

/// EWC at every `sweeps.w_p` on the same data and initialization.
pub fn ewc_sweep(cfg: &ExperimentConfig) -> Result<Vec<WpRow>> {
    let b = Bundle::generate(cfg)?;
    let refs = b.references(cfg)?;
    let base = cfg
        .baselines
        .iter()
        .find(|s| s.kind == BaselineKind::Ewc)
        .cloned()
        .unwrap_or_else(|| BaselineSpec::new(BaselineKind::Ewc));
    cfg.sweeps
        .w_p
        .iter()
        .map(|&w| {
            let spec = BaselineSpec { ewc_weight: w, ..base.clone() };
            let o = train_baseline(cfg, &b, &refs, &spec)?;
            let s = summarize("ewc", &o.records, sentinel(cfg))?;
            Ok(WpRow {
                w_p: w,
                displacement: o.displacements.iter().sum(),
                current_rate: s.current_rates.iter().sum::<f64>() / s.current_rates.len() as f64,
            })
        })
        .collect()
}

/// Proposed method against joint training on the test stream; channels
/// absent from the training list are marked unseen.
pub fn generalization(cfg: &ExperimentConfig) -> Result<Vec<GenRow>> {
    let b = Bundle::generate(cfg)?;
    let refs = b.references(cfg)?;
    let seen: BTreeSet<String> = cfg.channels.iter().map(|c| c.channel_id()).collect();
    let r = train_proposed(cfg, &b)?;
    let proposed = evaluate_proposed(cfg, &b, &refs, &r.theta, &r.phi)?;
    let joint = train_baseline(cfg, &b, &refs, &BaselineSpec::new(BaselineKind::Joint))?.records;
    let mut rows = Vec::new();
    for (method, recs) in [(PROPOSED, proposed), ("joint", joint)] {
        let s = summarize(method, &recs, sentinel(cfg))?;
        for (ch, rate) in s.channels.iter().zip(&s.current_rates) {
            rows.push(GenRow {
                method: method.to_string(),
                channel_id: ch.clone(),
                seen: seen.contains(ch),
                normalized_rate: *rate,
            });
        }
    }
    Ok(rows)
}

/// Model rebuilt from a checkpoint, including its gate mode.
pub fn checkpoint_model(ckpt: &Checkpoint) -> Result<Model> {
    Ok(Model::new(ckpt.architecture.clone(), ckpt.p_max)?.with_gate(ckpt.gate))
}

