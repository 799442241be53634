//! Experiment orchestration: setup, trials, ablation, loss gap and resource reports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::checkpoint::{save_model, FORMAT_VERSION};
use crate::config::{DataSource, ExperimentConfig, ExperimentMode};
use crate::data::{generate_synthetic, load_csv, make_splits, Evaluation, LabeledDataset, PartitionPlan};
use crate::error::{KoalaError, Result};
use crate::federation::{compute_loss_gap, train_supervised, FederationState, Mode, RoundMetrics, SmallModels};
use crate::models::{count_flops, count_params, init_model, Model, ModelSpec};
use crate::seeds::{derive_seed, stream};

/// Everything needed to run one trial.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub state: FederationState<f64>,
    pub plan: PartitionPlan,
}

pub fn load_dataset(config: &ExperimentConfig, seed: u64) -> Result<LabeledDataset<f64>> {
    match config.data.source {
        DataSource::Synthetic => {
            let mut spec = config.synthetic_spec();
            spec.seed = seed;
            generate_synthetic(&spec)
        }
        DataSource::Csv => {
            let path = config.data.path.as_deref().ok_or_else(|| KoalaError::Config {
                key: "data.path".into(),
                message: "required when data.source = \"csv\"".into(),
            })?;
            load_csv(path)
        }
    }
}

/// Supervised warm-up of a fresh large model on `data`, then backbone freeze
/// and a fresh adapter.
pub fn warm_up_large(
    spec: &ModelSpec,
    data: &LabeledDataset<f64>,
    epochs: usize,
    optimizer: AdamConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Model<f64>> {
    let mut large = init_model(spec, derive_seed(seed, "large-init", 0))?;
    let mut opt = AdamState::new(optimizer);
    let mut rng = stream(seed, "pretrain", 0);
    train_supervised(&mut large, &mut opt, data, epochs, batch_size, &mut rng, usize::MAX)?;
    large.freeze_backbone();
    large.reinit_adapter(derive_seed(seed, "adapter-init", 0));
    Ok(large)
}

/// Builds data splits, partitions and models for one trial seed.
pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    config.validate()?;
    let dataset = load_dataset(config, seed)?;
    let mut plan = make_splits(dataset.len(), &config.split_fractions(), seed)?;
    plan.partition_clients(
        dataset.labels(),
        dataset.classes(),
        config.clients,
        config.data.dirichlet_alpha,
        seed,
    )?;
    plan.validate(dataset.len())?;

    let (dim, classes) = (dataset.feature_dim(), dataset.classes());
    let tr = &config.training;
    let large_spec = ModelSpec::mlp(dim, &config.models.large_hidden, classes)?;
    let large = warm_up_large(
        &large_spec,
        &dataset.subset(&plan.pretrain)?,
        tr.pretrain_epochs,
        AdamConfig::new(tr.pretrain_lr, tr.local_weight_decay),
        tr.batch_size,
        seed,
    )?;

    let small = match config.mode.federation_mode() {
        Mode::Homo => {
            let spec = ModelSpec::mlp(dim, &config.models.homo_hidden, classes)?;
            SmallModels::Homo(init_model(&spec, derive_seed(seed, "small-init", 0))?)
        }
        Mode::Hete => {
            let widths = &config.models.hete_widths;
            let models = (0..config.clients)
                .map(|i| {
                    let spec = ModelSpec::mlp(dim, &[widths[i % widths.len()]], classes)?;
                    init_model(&spec, derive_seed(seed, "small-init", i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            SmallModels::Hete(models)
        }
        Mode::Baseline => SmallModels::Baseline,
    };

    let shards = plan
        .client_shards
        .iter()
        .map(|s| dataset.subset(s))
        .collect::<Result<Vec<_>>>()?;
    let mut state = FederationState::new(
        config.federation(seed),
        large,
        small,
        shards,
        dataset.unlabeled(&plan.proxy)?,
        dataset.subset(&plan.test)?,
        config.rounds,
    )?;
    state.record_elapsed = config.record_elapsed;
    Ok(Prepared { state, plan })
}

/// Outcome of one seeded trial as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub metrics: PathBuf,
    pub partition: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub rounds_completed: usize,
    pub round0_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub final_test_loss_sum: Option<f64>,
    /// Loss gap against the paired baseline trial, when one was run.
    pub loss_gap: Option<f64>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Reproduction record of a run: the resolved config plus where everything went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub best_accuracy: Option<Summary>,
    pub final_accuracy: Option<Summary>,
    pub loss_gap: Option<Summary>,
    pub error: Option<String>,
}

impl RunManifest {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: FORMAT_VERSION,
            config: config.clone(),
            trials: Vec::new(),
            best_accuracy: None,
            final_accuracy: None,
            loss_gap: None,
            error: None,
        }
    }

    fn summarize(&mut self) {
        let pick = |f: fn(&TrialRecord) -> Option<f64>| {
            Summary::of(&self.trials.iter().filter_map(f).collect::<Vec<_>>())
        };
        self.best_accuracy = pick(|t| t.best_accuracy);
        self.final_accuracy = pick(|t| t.final_accuracy);
        self.loss_gap = pick(|t| t.loss_gap);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Appends one JSON object per line, flushed after every record.
struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    fn append(&mut self, metrics: &RoundMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, metrics)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

struct TrialRun {
    record: TrialRecord,
    evaluations: Vec<Evaluation>,
    error: Option<KoalaError>,
}

fn run_trial(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    baseline: Option<&[Evaluation]>,
) -> Result<TrialRun> {
    fs::create_dir_all(dir)?;
    let mut record = TrialRecord {
        seed,
        metrics: dir.join(METRICS_FILE),
        partition: dir.join("partition.json"),
        checkpoints: Vec::new(),
        rounds_completed: 0,
        round0_accuracy: None,
        final_accuracy: None,
        best_accuracy: None,
        final_test_loss_sum: None,
        loss_gap: None,
        error: None,
    };
    let mut writer = MetricsWriter::create(&record.metrics)?;
    let mut evaluations = Vec::new();

    let result = (|| -> Result<()> {
        let Prepared { mut state, plan } = prepare(config, seed)?;
        fs::write(&record.partition, plan.to_json()?)?;
        let (examples, fingerprint) = (state.test_set().len(), state.test_set().fingerprint());
        let mut record_round = |mut m: RoundMetrics, record: &mut TrialRecord| -> Result<()> {
            let eval = Evaluation {
                loss_sum: m.test_loss_sum,
                accuracy: m.test_accuracy,
                examples,
                fingerprint,
            };
            if let Some(b) = baseline.and_then(|b| b.get(m.round)) {
                m.loss_gap = Some(compute_loss_gap(&eval, b)?);
                record.loss_gap = m.loss_gap;
            }
            writer.append(&m)?;
            if m.round == 0 {
                record.round0_accuracy = Some(m.test_accuracy);
            }
            record.rounds_completed = m.round;
            record.final_accuracy = Some(m.test_accuracy);
            record.final_test_loss_sum = Some(m.test_loss_sum);
            record.best_accuracy = Some(record.best_accuracy.map_or(m.test_accuracy, |b: f64| b.max(m.test_accuracy)));
            evaluations.push(eval);
            Ok(())
        };
        record_round(state.snapshot_metrics()?, &mut record)?;
        while state.round < state.total_rounds {
            let m = state.run_round().inspect_err(|e| {
                log::error!("seed {seed}, round {}: {e}", state.round + 1);
            })?;
            log::info!(
                "seed {seed} round {}: accuracy {:.4}, test loss {:.4}",
                m.round,
                m.test_accuracy,
                m.test_loss_sum / examples as f64
            );
            record_round(m, &mut record)?;
        }

        let large = dir.join("large.koal");
        save_model(&state.large, &large)?;
        record.checkpoints.push(large);
        if let Some(global) = &state.global_small {
            let path = dir.join("small-global.koal");
            save_model(global, &path)?;
            record.checkpoints.push(path);
        }
        if state.config.mode == Mode::Hete {
            for client in &state.clients {
                if let Some(m) = &client.model {
                    let path = dir.join(format!("small-{}.koal", client.id));
                    save_model(m, &path)?;
                    record.checkpoints.push(path);
                }
            }
        }
        Ok(())
    })();

    let error = result.err();
    record.error = error.as_ref().map(ToString::to_string);
    Ok(TrialRun {
        record,
        evaluations,
        error,
    })
}

fn run_trials(
    config: &ExperimentConfig,
    dir: &Path,
    baselines: Option<&[Vec<Evaluation>]>,
) -> (RunManifest, Vec<Vec<Evaluation>>, Option<KoalaError>) {
    let mut manifest = RunManifest::new(config);
    let mut all_evals = Vec::new();
    let mut failure = None;
    for k in 0..config.trials {
        let seed = config.seed.wrapping_add(k as u64);
        let baseline = baselines.and_then(|b| b.get(k)).map(Vec::as_slice);
        match run_trial(config, seed, &dir.join(format!("trial-{k}")), baseline) {
            Ok(run) => {
                manifest.trials.push(run.record);
                all_evals.push(run.evaluations);
                if let Some(e) = run.error {
                    failure = Some(e);
                    break;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    manifest.summarize();
    manifest.error = failure.as_ref().map(ToString::to_string);
    (manifest, all_evals, failure)
}

fn finish(manifest: RunManifest, dir: &Path, failure: Option<KoalaError>) -> Result<RunManifest> {
    manifest.write(&dir.join(MANIFEST_FILE))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Round-0 evaluation then `rounds` rounds for every trial seed, writing
/// metrics, checkpoints and `manifest.json` under the output directory.
///
/// On failure the manifest (with the error) and partial metrics are still written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let dir = config.output_dir.clone();
    let (manifest, _, failure) = run_trials(config, &dir, None);
    finish(manifest, &dir, failure)
}

/// Paired with/without-forward-distillation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_forward: RunManifest,
    pub without_forward: RunManifest,
    /// Per trial: final accuracy with and without forward distillation.
    pub final_accuracy: Vec<(f64, f64)>,
    /// Trials where the with-forward run ends at least as accurate.
    pub with_at_least_without: usize,
}

pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    if config.mode != ExperimentMode::Homo {
        return Err(KoalaError::Config {
            key: "mode".into(),
            message: "the ablation runs in homo mode".into(),
        });
    }
    let root = config.output_dir.clone();
    let mut with = config.clone();
    with.training.forward_distillation = true;
    with.output_dir = root.join("with-forward");
    let mut without = config.clone();
    without.training.forward_distillation = false;
    without.output_dir = root.join("without-forward");

    let with_forward = run_experiment(&with)?;
    let without_forward = run_experiment(&without)?;
    let final_accuracy: Vec<(f64, f64)> = with_forward
        .trials
        .iter()
        .zip(&without_forward.trials)
        .filter_map(|(a, b)| Some((a.final_accuracy?, b.final_accuracy?)))
        .collect();
    let report = AblationReport {
        with_at_least_without: final_accuracy.iter().filter(|(a, b)| a >= b).count(),
        final_accuracy,
        with_forward,
        without_forward,
    };
    fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// A KOALA run and the FedAvg baseline on the same data and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGapReport {
    pub baseline: RunManifest,
    pub koala: RunManifest,
    /// Final loss gap per trial.
    pub gaps: Vec<f64>,
}

/// Runs the baseline first, then the configured mode with per-round loss gaps.
pub fn run_with_baseline(config: &ExperimentConfig) -> Result<LossGapReport> {
    config.validate()?;
    if !matches!(config.mode, ExperimentMode::Homo | ExperimentMode::Hete) {
        return Err(KoalaError::Config {
            key: "mode".into(),
            message: "loss gap compares a homo or hete run against the baseline".into(),
        });
    }
    let root = config.output_dir.clone();
    let mut base_cfg = config.clone();
    base_cfg.mode = ExperimentMode::Baseline;
    base_cfg.output_dir = root.join("baseline");
    let (base_manifest, base_evals, failure) = run_trials(&base_cfg, &base_cfg.output_dir, None);
    let baseline = finish(base_manifest, &base_cfg.output_dir, failure)?;

    let mut koala_cfg = config.clone();
    koala_cfg.output_dir = root.join(match config.mode {
        ExperimentMode::Hete => "hete",
        _ => "homo",
    });
    let (manifest, _, failure) = run_trials(&koala_cfg, &koala_cfg.output_dir, Some(&base_evals));
    let koala = finish(manifest, &koala_cfg.output_dir, failure)?;
    let report = LossGapReport {
        gaps: koala.trials.iter().filter_map(|t| t.loss_gap).collect(),
        baseline,
        koala,
    };
    fs::write(root.join("loss-gap.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Size and cost of one shipped model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub model: String,
    pub total_params: u64,
    pub trainable_params: u64,
    pub flops: u64,
    /// float32 storage: 4 bytes per parameter.
    pub storage_bytes: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub storage_reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub rows: Vec<ResourceRow>,
}

/// `100 * (1 - small / large)`.
pub fn reduction_pct(small: u64, large: u64) -> f64 {
    100.0 * (1.0 - small as f64 / large as f64)
}

/// Params, FLOPs and float32 storage of the large model and every small model spec.
pub fn report_resources(config: &ExperimentConfig) -> Result<ResourceReport> {
    config.validate()?;
    let (dim, classes) = match config.data.source {
        DataSource::Synthetic => (config.data.feature_dim, config.data.classes),
        DataSource::Csv => {
            let d = load_dataset(config, config.seed)?;
            (d.feature_dim(), d.classes())
        }
    };
    let m = &config.models;
    let mut named = vec![
        ("large".to_string(), ModelSpec::mlp(dim, &m.large_hidden, classes)?),
        ("small-homo".to_string(), ModelSpec::mlp(dim, &m.homo_hidden, classes)?),
    ];
    for &w in &m.hete_widths {
        named.push((format!("small-hete-{w}"), ModelSpec::mlp(dim, &[w], classes)?));
    }

    let mut measured = Vec::with_capacity(named.len());
    for (i, (name, spec)) in named.into_iter().enumerate() {
        let mut model: Model<f64> = init_model(&spec, 0)?;
        if i == 0 {
            model.freeze_backbone();
        }
        let params = count_params(&model);
        let flops = count_flops(&model, dim)?;
        measured.push((name, params, flops));
    }
    let (large_params, large_flops) = (measured[0].1.total, measured[0].2);
    let rows = measured
        .into_iter()
        .map(|(model, params, flops)| ResourceRow {
            model,
            total_params: params.total,
            trainable_params: params.trainable,
            flops,
            storage_bytes: 4 * params.total,
            params_reduction_pct: reduction_pct(params.total, large_params),
            flops_reduction_pct: reduction_pct(flops, large_flops),
            storage_reduction_pct: reduction_pct(4 * params.total, 4 * large_params),
        })
        .collect();
    Ok(ResourceReport { rows })
}

impl ResourceReport {
    const HEADERS: [&'static str; 8] = [
        "model",
        "params",
        "trainable",
        "flops",
        "storage_bytes",
        "params_red_%",
        "flops_red_%",
        "storage_red_%",
    ];

    fn cells(row: &ResourceRow) -> [String; 8] {
        [
            row.model.clone(),
            row.total_params.to_string(),
            row.trainable_params.to_string(),
            row.flops.to_string(),
            row.storage_bytes.to_string(),
            format!("{:.2}", row.params_reduction_pct),
            format!("{:.2}", row.flops_reduction_pct),
            format!("{:.2}", row.storage_reduction_pct),
        ]
    }

    /// Fixed-width text table; the first column is left-aligned, numbers right-aligned.
    pub fn to_table(&self) -> String {
        let body: Vec<[String; 8]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = Self::HEADERS.map(str::len);
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (j, (c, w)) in cells.iter().zip(widths).enumerate() {
                if j == 0 {
                    s.push_str(&format!("{c:<w$}"));
                } else {
                    s.push_str(&format!("  {c:>w$}"));
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&Self::HEADERS.map(String::from));
        out.push_str(&line(&widths.map(|w| "-".repeat(w))));
        for cells in &body {
            out.push_str(&line(cells));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> KoalaError {
    KoalaError::Csv {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Summary::of(&[5.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn default_resources() {
        let report = report_resources(&ExperimentConfig::with_defaults(ExperimentMode::Homo)).unwrap();
        let large = &report.rows[0];
        // 64·256+256 + 256·256+256 + 256·128+128 + 128·4+4
        assert_eq!(large.total_params, 16_640 + 65_792 + 32_896 + 516);
        assert_eq!(large.trainable_params, 516);
        let homo = &report.rows[1];
        assert_eq!(homo.total_params, 64 * 32 + 32 + 32 * 4 + 4);
        let expected = 100.0 * (1.0 - 2212.0 / 115_844.0);
        assert!((homo.params_reduction_pct - expected).abs() < 1e-12);
        for row in &report.rows {
            assert_eq!(row.storage_bytes, 4 * row.total_params);
            assert!(row.total_params <= large.total_params);
        }
        assert_eq!(report.rows.len(), 7);
        let table = report.to_table();
        let lens: Vec<usize> = table.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]), "{table}");
    }
}
