//! The `train`, `compare`, `gradcheck` and `eval` commands.
//!
//! Each command returns `Ok` on success; [`Error::exit_code`] maps failures
//! to the process exit status (1 for configuration errors, 2 otherwise).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{flexible_loss_with_teachers, DistillConfig, Strategy};
use crate::models::{EarlyExitConfig, FlexibleModel, ModelConfig, Net, SlimmableConfig, SubModelIndex};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::gradcheck::{grad_check_with_step, GradCheckReport, GRAD_CHECK_STEP};
use crate::nn::{Mode, ParamStore};
use crate::report::{fmt_g, write_metrics_csv, Comparison, MetricsRecord};
use crate::rng::RngState;
use crate::trainer::{evaluate, train, TrainOutcome, EVAL_CHUNK};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
/// Environment variable capping the number of concurrently trained cells.
pub const THREADS_ENV: &str = "FLEXDISTILL_THREADS";
/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Finite-difference steps tried in order. A perturbation of `1e-5` can
/// carry a pre-activation across a ReLU kink (common with quantised image
/// inputs); a genuine gradient error fails at every step.
pub const GRADCHECK_STEPS: [f64; 3] = [GRAD_CHECK_STEP, 1e-6, 1e-7];

/// Builds the configured model with parameters initialised from `seed`.
pub fn build_model(cfg: &ModelConfig, input_shape: &[usize], classes: usize, seed: u64) -> Result<(Net, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let net = Net::build(cfg, input_shape, classes, &mut store, &mut RngState::new(seed))?;
    Ok((net, store))
}

pub fn run_id(strategy: Strategy, seed: u64) -> String {
    format!("{strategy}-s{seed}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
    pub param_counts: Vec<usize>,
}

/// Trains one configuration and writes `metrics.csv`, `best.ckpt` and
/// `config.resolved.json` into `out_dir`.
pub fn run_training(cfg: &RunConfig, out_dir: &Path, mut progress: impl FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let (train_set, val_set) = cfg.data.load::<f64>()?;
    let (net, mut store) = build_model(&cfg.model, train_set.sample_shape(), train_set.classes(), cfg.train.seed)?;
    let strategy = cfg.distill.strategy;
    let seed = cfg.train.seed;
    let id = run_id(strategy, seed);
    let kind = FlexibleModel::<f64>::kind(&net);
    create_dir(out_dir)?;
    let mut resolved = cfg.resolved();
    resolved.output_dir = out_dir.to_path_buf();
    write_file(&out_dir.join(RESOLVED_CONFIG_FILE), &resolved.to_json()?)?;

    let outcome = train(&net, &mut store, &train_set, &val_set, &cfg.train, &cfg.distill, |m| {
        let acc: Vec<String> = m.accuracies.iter().map(|&a| fmt_g(a)).collect();
        progress(&format!(
            "[{id}] epoch {:>3} lr {} loss {} acc [{}] avg {}",
            m.epoch,
            fmt_g(m.lr),
            fmt_g(m.loss),
            acc.join(", "),
            fmt_g(m.avg_accuracy)
        ));
    })?;

    let rows: Vec<MetricsRecord> = outcome
        .history
        .iter()
        .map(|m| MetricsRecord::from_epoch(&id, strategy, seed, m))
        .collect();
    write_metrics_csv(&out_dir.join(METRICS_FILE), kind, &rows)?;
    outcome.best.params.save(&out_dir.join(CHECKPOINT_FILE))?;
    let param_counts = (1..=FlexibleModel::<f64>::num_submodels(&net))
        .map(|i| Ok(net.param_count(&store, FlexibleModel::<f64>::index(&net, i)?)))
        .collect::<Result<_>>()?;
    Ok(RunSummary {
        run_id: id,
        out_dir: out_dir.to_path_buf(),
        outcome,
        param_counts,
    })
}

fn best_epoch_lines(summary: &RunSummary, kind_labels: &[String]) -> String {
    let best = &summary.outcome.best;
    let mut s = format!(
        "best epoch {} (avg accuracy {})\n",
        best.epoch,
        fmt_g(best.avg_accuracy)
    );
    for ((label, acc), params) in kind_labels.iter().zip(&best.accuracies).zip(&summary.param_counts) {
        s.push_str(&format!("  {label}: accuracy {} params {params}\n", fmt_g(*acc)));
    }
    s
}

fn labels_for(cfg: &ModelConfig) -> Vec<String> {
    let n = cfg.num_submodels();
    let kind = match cfg {
        ModelConfig::EarlyExit(_) => crate::models::SubModelKind::Exit,
        ModelConfig::Slimmable(_) => crate::models::SubModelKind::Switch,
    };
    (1..=n).map(|i| kind.label(i)).collect()
}

/// `train`: one run, with optional seed and output overrides.
pub fn cmd_train(config_path: &Path, seed: Option<u64>, out: Option<&Path>, out_stream: &mut impl Write) -> Result<RunSummary> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let summary = run_training(&cfg, &out_dir, |line| {
        let _ = writeln!(out_stream, "{line}");
    })?;
    let _ = write!(out_stream, "{}", best_epoch_lines(&summary, &labels_for(&cfg.model)));
    Ok(summary)
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n >= 1)
}

/// `compare`: trains every (strategy, seed) cell into
/// `<out>/<strategy>-s<seed>/` and writes `<out>/comparison.csv`.
pub fn cmd_compare(
    config_path: &Path,
    strategies: &[Strategy],
    seeds: &[u64],
    out: Option<&Path>,
    out_stream: &mut impl Write,
) -> Result<Comparison> {
    let cfg = RunConfig::load(config_path)?;
    if strategies.is_empty() {
        return Err(Error::config("--strategies", "needs at least one strategy"));
    }
    if seeds.is_empty() {
        return Err(Error::config("--seeds", "needs at least one seed"));
    }
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out_dir)?;

    let mut cells = Vec::new();
    for &s in strategies {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.distill.strategy = s;
            c.train.seed = seed;
            c.validate()?;
            cells.push(c);
        }
    }

    let run = |c: &RunConfig| -> Result<RunSummary> {
        let dir = out_dir.join(run_id(c.distill.strategy, c.train.seed));
        run_training(c, &dir, |_| {})
    };
    let threads = thread_cap().unwrap_or_else(rayon::current_num_threads).min(cells.len());
    let results: Vec<Result<RunSummary>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };

    let mut runs = vec![Vec::new(); strategies.len()];
    for (k, r) in results.into_iter().enumerate() {
        let summary = r?;
        let _ = writeln!(
            out_stream,
            "{}: best epoch {} avg accuracy {}",
            summary.run_id,
            summary.outcome.best.epoch,
            fmt_g(summary.outcome.best.avg_accuracy)
        );
        runs[k / seeds.len()].push(summary.outcome.best.accuracies);
    }
    let kind = match cfg.model {
        ModelConfig::EarlyExit(_) => crate::models::SubModelKind::Exit,
        ModelConfig::Slimmable(_) => crate::models::SubModelKind::Switch,
    };
    let table = Comparison::new(kind, strategies.to_vec(), runs)?;
    table.write_csv(&out_dir.join(COMPARISON_FILE))?;
    let _ = write!(out_stream, "\nvalidation accuracy (%), mean±std over {} seed(s)\n{}", seeds.len(), table.render());
    if let Some(v) = table.verdict() {
        let _ = writeln!(out_stream, "{v}");
    }
    Ok(table)
}

/// Shrinks a model config to a few channels per layer, keeping the number
/// of sub-models.
pub fn tiny_model(cfg: &ModelConfig) -> ModelConfig {
    match cfg {
        ModelConfig::EarlyExit(c) => ModelConfig::EarlyExit(EarlyExitConfig {
            widths: (0..c.widths.len()).map(|b| 2 + b).collect(),
            ..c.clone()
        }),
        ModelConfig::Slimmable(c) => {
            let full = 4.max(c.multipliers.len());
            ModelConfig::Slimmable(SlimmableConfig {
                widths: vec![full; c.widths.len().min(2)],
                ..c.clone()
            })
        }
    }
}

/// Deliberate gradient corruption, for testing the checker itself.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultInjection {
    /// Multiplies the first trainable parameter's gradient by this factor
    /// after every backward pass.
    pub scale_first_grad: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckLine {
    pub strategy: Strategy,
    pub max_relative_error: f64,
    /// Finite-difference step of the reported check.
    pub step: f64,
    pub entries: usize,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
}

impl GradcheckLine {
    fn from_report(strategy: Strategy, r: &GradCheckReport, step: f64) -> Self {
        Self {
            strategy,
            max_relative_error: r.max_relative_error,
            step,
            entries: r.entries_checked,
            worst_param: r.worst.as_ref().map(|w| w.name.clone()),
            worst_index: r.worst.as_ref().map(|w| w.index),
            analytic: r.worst.as_ref().map(|w| w.analytic),
            numeric: r.worst.as_ref().map(|w| w.numeric),
        }
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

/// Samples fed to the tiny gradcheck model.
const GRADCHECK_BATCH: usize = 4;

/// Finite-difference check of one strategy's joint loss through a model.
///
/// Tries each of [`GRADCHECK_STEPS`] until one passes; returns the passing
/// report, or the one with the smallest error, with its step.
pub fn gradcheck_strategy(
    net: &Net,
    store: &mut ParamStore<f64>,
    data: &Dataset<f64>,
    distill: &DistillConfig,
    fault: FaultInjection,
) -> Result<(GradCheckReport, f64)> {
    let idx: Vec<usize> = (0..GRADCHECK_BATCH.min(data.len())).collect();
    let (x, y, _) = data.batch(&idx)?;
    // Teachers are constants under detachment, so the checked objective
    // reads them from a frozen copy taken at the unperturbed parameters.
    let frozen = net.forward_all(store, &x, Mode::Train)?.0;
    let first = store.trainable_ids().first().copied();
    let mut best: Option<(GradCheckReport, f64)> = None;
    for step in GRADCHECK_STEPS {
        let report = grad_check_with_step(
            store,
            |st| {
                let (logits, pass) = net.forward_all(st, &x, Mode::Train)?;
                let teachers = if distill.detach_teacher { &frozen } else { &logits };
                let loss = flexible_loss_with_teachers(&logits, teachers, &y, distill)?;
                net.backward_all(st, &pass, &loss.grads)?;
                if let (Some(f), Some(id)) = (fault.scale_first_grad, first) {
                    for g in st.grad_mut(id).data_mut() {
                        *g *= f;
                    }
                }
                Ok(loss.total)
            },
            step,
        )?;
        let passed = report.max_relative_error < GRADCHECK_TOLERANCE;
        if best.as_ref().is_none_or(|(b, _)| report.max_relative_error < b.max_relative_error) {
            best = Some((report, step));
        }
        if passed {
            break;
        }
    }
    Ok(best.expect("at least one step"))
}

/// `gradcheck`: checks all four strategies on a tiny instance of the
/// configured model. Fails with a numeric error when any strategy reaches
/// [`GRADCHECK_TOLERANCE`].
pub fn cmd_gradcheck(config_path: &Path, fault: FaultInjection, out_stream: &mut impl Write) -> Result<Vec<GradcheckLine>> {
    let cfg = RunConfig::load(config_path)?;
    let (train_set, _) = cfg.data.load::<f64>()?;
    let model = tiny_model(&cfg.model);
    let mut lines = Vec::new();
    for strategy in Strategy::ALL {
        if strategy != Strategy::None && model.num_submodels() < 2 {
            continue;
        }
        let (net, mut store) = build_model(&model, train_set.sample_shape(), train_set.classes(), cfg.train.seed)?;
        let distill = cfg.distill.clone().with_strategy(strategy);
        let (report, step) = gradcheck_strategy(&net, &mut store, &train_set, &distill, fault)?;
        let line = GradcheckLine::from_report(strategy, &report, step);
        let _ = writeln!(
            out_stream,
            "{:<5} max relative error {} over {} entries (step {}) {}",
            strategy.as_str(),
            fmt_g(line.max_relative_error),
            line.entries,
            fmt_g(line.step),
            if line.passed() { "ok" } else { "FAILED" }
        );
        lines.push(line);
    }
    let failed: Vec<&GradcheckLine> = lines.iter().filter(|l| !l.passed()).collect();
    if failed.is_empty() {
        return Ok(lines);
    }
    let detail: Vec<String> = failed
        .iter()
        .map(|l| {
            format!(
                "{}: parameter `{}`[{}] analytic {} numeric {}",
                l.strategy,
                l.worst_param.as_deref().unwrap_or("?"),
                l.worst_index.unwrap_or(0),
                l.analytic.unwrap_or(f64::NAN),
                l.numeric.unwrap_or(f64::NAN)
            )
        })
        .collect();
    Err(Error::Numeric(format!(
        "gradient check failed (tolerance {GRADCHECK_TOLERANCE}): {}",
        detail.join("; ")
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalEntry {
    pub sub_model: String,
    pub accuracy: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    /// Backbone blocks executed per evaluated sample batch sequence (early
    /// exit models only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_executed: Option<usize>,
}

/// `eval`: loads a checkpoint into the architecture of `config_path` and
/// reports accuracy and parameter count per sub-model.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    sub_model: Option<usize>,
    split: EvalSplit,
    json: bool,
    out_stream: &mut impl Write,
) -> Result<EvalReport> {
    let cfg = RunConfig::load(config_path)?;
    let (train_set, val_set) = cfg.data.load::<f64>()?;
    let data = match split {
        EvalSplit::Train => &train_set,
        EvalSplit::Val => &val_set,
    };
    let (net, mut store) = build_model(&cfg.model, data.sample_shape(), data.classes(), cfg.train.seed)?;
    Checkpoint::load(checkpoint)?.apply_to(&mut store)?;
    let n = FlexibleModel::<f64>::num_submodels(&net);
    let which = sub_model.map(|i| SubModelIndex::new(i, n)).transpose()?;
    if let Some(ee) = net.as_early_exit() {
        ee.reset_block_calls();
    }
    let acc = evaluate(&net, &store, data, which)?;
    let kind = FlexibleModel::<f64>::kind(&net);
    let indices: Vec<SubModelIndex> = match which {
        Some(i) => vec![i],
        None => (1..=n).map(|i| SubModelIndex::new(i, n)).collect::<Result<_>>()?,
    };
    let entries: Vec<EvalEntry> = indices
        .iter()
        .zip(&acc)
        .map(|(&i, &a)| EvalEntry {
            sub_model: kind.label(i.get()),
            accuracy: a,
            param_count: net.param_count(&store, i),
        })
        .collect();
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let report = EvalReport {
        entries,
        blocks_executed: net.as_early_exit().map(|ee| ee.block_calls() / chunks),
    };
    if json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            context: "eval report".into(),
            source: e,
        })?;
        let _ = writeln!(out_stream, "{text}");
    } else {
        for e in &report.entries {
            let _ = writeln!(
                out_stream,
                "{}: accuracy {} params {}",
                e.sub_model,
                fmt_g(e.accuracy),
                e.param_count
            );
        }
        if let Some(b) = report.blocks_executed {
            let _ = writeln!(out_stream, "backbone blocks executed per batch: {b}");
        }
    }
    Ok(report)
}
