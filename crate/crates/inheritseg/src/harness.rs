//! Experiment orchestration: data, Stage 1, Stage 2, benchmarks, ablation
//! matrix, unseen-class sweeps and report emission.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use inheritseg_core::datagen::{build_bundle, partition_classes, DatasetBundle, LabeledSample};
use inheritseg_core::metrics::{evaluate, EvalOptions, MetricReport};
use inheritseg_core::nets::{Architecture, SegmentationParams};
use inheritseg_core::training::{
    configure_ablation, train_prior, train_supervised, train_zeroshot, AblationSetting, StepRecord, TrainState,
};
use inheritseg_core::{derive_seed, Error as CoreError};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::history::write_history;
use crate::plots::{plot_dice_bars, plot_losses};
use crate::report::{collective_unseen, write_report_csv, write_table};
use crate::{HarnessError, Result};

const STREAM_PRIOR: u64 = 1;
const STREAM_ORACLE: u64 = 2;
const STREAM_STAGE2: u64 = 3;

/// Marker left in a run directory until every artifact has been written.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Dataset, architecture and trained prior shared by every run of one base
/// configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub arch: Architecture,
    pub bundle: DatasetBundle,
    pub prior: SegmentationParams,
    pub prior_history: Vec<f64>,
}

impl Prepared {
    pub fn train_samples(&self) -> Vec<&LabeledSample> {
        self.bundle.mirror_train()
    }

    pub fn test_samples(&self) -> Vec<&LabeledSample> {
        self.bundle.mirror_test()
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        self.config.eval_options()
    }
}

/// Builds the bundle and trains the prior model on the fully labeled modality.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    prepare_from(config, None, None)
}

/// [`prepare`] that reuses a bundle read from disk and/or a stored prior.
pub fn prepare_from(config: &ExperimentConfig, bundle: Option<DatasetBundle>, prior: Option<SegmentationParams>) -> Result<Prepared> {
    config.validate()?;
    let bundle = match bundle {
        Some(b) => b,
        None => build_bundle(&config.bundle_config()?)?,
    };
    let arch = Architecture::new(config.network_config()?)?;
    if bundle.classes() != arch.config().classes {
        return Err(HarnessError::Config(format!(
            "dataset has {} classes but the network expects {}",
            bundle.classes(),
            arch.config().classes
        )));
    }
    let (prior, prior_history) = match prior {
        Some(p) => (p, Vec::new()),
        None => {
            let prior_data: Vec<&LabeledSample> = bundle.prior.iter().collect();
            let seed = derive_seed(config.seed, STREAM_PRIOR);
            let out = train_prior(&arch, &prior_data, &config.prior_optimizer()?, seed)?;
            (out.params, out.history)
        }
    };
    Ok(Prepared {
        config: config.clone(),
        arch,
        bundle,
        prior,
        prior_history,
    })
}

/// The prior evaluated on the second modality without any Stage-2 step.
pub fn lower_bound(prep: &Prepared) -> Result<MetricReport> {
    Ok(evaluate(&prep.arch, &prep.prior, None, &prep.test_samples(), &[], "lower bound", &prep.eval_options()?)?)
}

/// A model trained with full labels of the second modality.
pub fn oracle(prep: &Prepared) -> Result<(SegmentationParams, MetricReport)> {
    let seed = derive_seed(prep.config.seed, STREAM_ORACLE);
    let init = prep.arch.init_segmentation(seed);
    let out = train_supervised(&prep.arch, &prep.train_samples(), init, &prep.config.prior_optimizer()?, seed)?;
    let report = evaluate(&prep.arch, &out.params, None, &prep.test_samples(), &[], "oracle", &prep.eval_options()?)?;
    Ok((out.params, report))
}

/// Everything one Stage-2 run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub history: Vec<StepRecord>,
    pub state: TrainState,
}

pub fn run_tag(setting: AblationSetting, unseen: &[usize]) -> String {
    let list: Vec<String> = unseen.iter().map(|u| u.to_string()).collect();
    format!("{setting}_u{}", list.join("-"))
}

/// One Stage-2 run for `setting` with `unseen` held out; `on_checkpoint`
/// receives the state every `checkpoint_every` epochs.
pub fn run_cell_with(
    prep: &Prepared,
    setting: AblationSetting,
    unseen: &[usize],
    mut on_checkpoint: impl FnMut(&TrainState, &[StepRecord]) -> Result<()>,
) -> Result<RunOutcome> {
    let (seen, unseen) = partition_classes(prep.bundle.classes(), unseen)?;
    let ablation = configure_ablation(setting, &prep.config.loss_weights()?);
    let mut pending: Option<HarnessError> = None;
    let trained = train_zeroshot(
        &prep.arch,
        &prep.train_samples(),
        &seen,
        prep.prior.clone(),
        &ablation,
        &prep.config.stage2_optimizer()?,
        derive_seed(prep.config.seed, STREAM_STAGE2),
        |state, history| {
            on_checkpoint(state, history).map_err(|e| {
                let msg = e.to_string();
                pending = Some(e);
                CoreError::Invalid(msg)
            })
        },
    );
    let out = match (trained, pending) {
        (Err(_), Some(e)) => return Err(e),
        (r, _) => r?,
    };
    let guide = ablation.switches.ia.then_some(&out.state.prior);
    let report = evaluate(
        &prep.arch,
        &out.state.model,
        guide,
        &prep.test_samples(),
        &unseen,
        &run_tag(setting, &unseen),
        &prep.eval_options()?,
    )?;
    Ok(RunOutcome {
        report,
        history: out.history,
        state: out.state,
    })
}

pub fn run_cell(prep: &Prepared, setting: AblationSetting, unseen: &[usize]) -> Result<RunOutcome> {
    run_cell_with(prep, setting, unseen, |_, _| Ok(()))
}

fn write_checkpoint(path: &Path, state: &TrainState, config: &ExperimentConfig) -> Result<()> {
    let mut metadata = BTreeMap::new();
    metadata.insert("step".to_string(), state.step.to_string());
    metadata.insert("epoch".to_string(), state.epoch.to_string());
    metadata.insert("config".to_string(), config.to_toml());
    save_checkpoint(
        path,
        &Checkpoint {
            model: state.model.clone(),
            discriminator: Some(state.discriminator.clone()),
            metadata,
        },
    )
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub dir: PathBuf,
    pub report: MetricReport,
    pub history: Vec<StepRecord>,
}

/// Prepares data and prior, then runs the configured setting and writes
/// config, checkpoints, loss history, report and plots under
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentArtifacts> {
    let prep = prepare(config)?;
    run_prepared_experiment(&prep, &config.output_dir)
}

/// [`run_experiment`] on an existing preparation.
pub fn run_prepared_experiment(prep: &Prepared, dir: &Path) -> Result<ExperimentArtifacts> {
    let config = &prep.config;
    let setting = config.ablation_setting()?;
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| HarnessError::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"run started\n").map_err(|e| HarnessError::io(&marker, e))?;
    config.save(&dir.join("config.toml"))?;
    let ckpt_dir = dir.join("checkpoints");
    let out = run_cell_with(prep, setting, &config.unseen, |state, _| {
        let path = ckpt_dir.join(format!("epoch_{:04}.safetensors", state.epoch + 1));
        write_checkpoint(&path, state, config)
    })?;
    write_checkpoint(&ckpt_dir.join("final.safetensors"), &out.state, config)?;
    write_history(&dir.join("loss_history.csv"), &out.history)?;
    write_report_csv(&dir.join("report.csv"), &[&out.report])?;
    write_table(&dir.join("report.txt"), &out.report.tag, &[&out.report])?;
    plot_losses(&dir.join("loss_curves.svg"), &out.history)?;
    plot_dice_bars(&dir.join("dice_bars.svg"), &[&out.report])?;
    fs::remove_file(&marker).map_err(|e| HarnessError::io(&marker, e))?;
    Ok(ExperimentArtifacts {
        dir: dir.to_path_buf(),
        report: out.report,
        history: out.history,
    })
}

/// One cell of a matrix or sweep. Failures are kept as text so the rest of
/// the batch still completes.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub setting: AblationSetting,
    pub unseen: Vec<usize>,
    pub outcome: std::result::Result<MetricReport, String>,
}

impl CellResult {
    pub fn report(&self) -> Option<&MetricReport> {
        self.outcome.as_ref().ok()
    }
}

/// Runs `jobs` on `workers` threads. Each job is isolated: a panic or error
/// becomes a failed cell. Output order follows `jobs`.
fn run_cells(prep: &Prepared, jobs: &[(AblationSetting, Vec<usize>)], workers: usize, out_dir: Option<&Path>) -> Vec<CellResult> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; jobs.len()]);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((setting, unseen)) = jobs.get(i) else { break };
        let attempt = catch_unwind(AssertUnwindSafe(|| -> Result<MetricReport> {
            match out_dir {
                Some(root) => {
                    let mut cfg = prep.config.clone();
                    cfg.setting = setting.letter().to_string();
                    cfg.unseen = unseen.clone();
                    let dir = root.join(run_tag(*setting, unseen));
                    cfg.output_dir = dir.clone();
                    let p = Prepared { config: cfg, ..prep.clone() };
                    Ok(run_prepared_experiment(&p, &dir)?.report)
                }
                None => Ok(run_cell(prep, *setting, unseen)?.report),
            }
        }));
        let outcome = match attempt {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => Err(e.to_string()),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "cell panicked".to_string())),
        };
        slots.lock().expect("result slots")[i] = Some(CellResult {
            setting: *setting,
            unseen: unseen.clone(),
            outcome,
        });
    };
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect()
}

/// Lower bound, Oracle and baseline (setting a) on the shared test split.
#[derive(Debug, Clone)]
pub struct BenchmarkSuite {
    pub lower_bound: MetricReport,
    pub oracle: MetricReport,
    pub baseline: MetricReport,
}

pub fn run_benchmarks(prep: &Prepared) -> Result<BenchmarkSuite> {
    let lower_bound = lower_bound(prep)?;
    let (_, oracle) = oracle(prep)?;
    let mut baseline = run_cell(prep, AblationSetting::A, &prep.config.unseen)?.report;
    baseline.tag = "baseline".into();
    Ok(BenchmarkSuite {
        lower_bound,
        oracle,
        baseline,
    })
}

/// Ablation matrix: every setting with every structure as the single
/// unseen class.
#[derive(Debug, Clone)]
pub struct AblationMatrix {
    pub lower_bound: MetricReport,
    pub oracle: MetricReport,
    pub cells: Vec<CellResult>,
    /// One collective-unseen row per setting whose four cells succeeded.
    pub collective: Vec<MetricReport>,
}

impl AblationMatrix {
    pub fn cell(&self, setting: AblationSetting, unseen: usize) -> Option<&MetricReport> {
        self.cells
            .iter()
            .find(|c| c.setting == setting && c.unseen == [unseen])
            .and_then(CellResult::report)
    }

    pub fn row(&self, setting: AblationSetting) -> Vec<&MetricReport> {
        self.cells.iter().filter(|c| c.setting == setting).filter_map(CellResult::report).collect()
    }

    pub fn collective(&self, setting: AblationSetting) -> Option<&MetricReport> {
        self.collective.iter().find(|r| r.tag == setting.letter().to_string())
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.outcome.is_err()).collect()
    }
}

pub fn run_ablation_matrix(prep: &Prepared, settings: &[AblationSetting], out_dir: Option<&Path>) -> Result<AblationMatrix> {
    let structures: Vec<usize> = (1..prep.bundle.classes()).collect();
    let jobs: Vec<(AblationSetting, Vec<usize>)> = settings
        .iter()
        .flat_map(|&s| structures.iter().map(move |&u| (s, vec![u])))
        .collect();
    let lower_bound = lower_bound(prep)?;
    let (_, oracle) = oracle(prep)?;
    let cells = run_cells(prep, &jobs, prep.config.workers, out_dir);
    let collective = settings
        .iter()
        .filter_map(|&s| {
            let row: Vec<&MetricReport> = cells.iter().filter(|c| c.setting == s).filter_map(CellResult::report).collect();
            (row.len() == structures.len()).then(|| collective_unseen(s.letter().to_string().as_str(), &row)).flatten()
        })
        .collect();
    Ok(AblationMatrix {
        lower_bound,
        oracle,
        cells,
        collective,
    })
}

/// Every combination of `k` distinct structures out of `1..classes`, in
/// lexicographic order.
pub fn combinations(classes: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, end: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..end {
            cur.push(i);
            go(i + 1, end, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(1, classes, k, &mut Vec::new(), &mut out);
    out
}

/// Runs of one setting over all unseen combinations of size 1..=max_unseen.
#[derive(Debug, Clone)]
pub struct UnseenSweep {
    pub lower_bound: MetricReport,
    pub cells: Vec<CellResult>,
}

impl UnseenSweep {
    /// Mean unseen Dice over the successful runs with `k` unseen classes.
    pub fn mean_unseen_dice(&self, k: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.unseen.len() == k)
            .filter_map(|c| c.report()?.unseen_dice())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `(k, mean unseen Dice)` for each count present.
    pub fn trend(&self) -> Vec<(usize, f64)> {
        let max = self.cells.iter().map(|c| c.unseen.len()).max().unwrap_or(0);
        (1..=max).filter_map(|k| self.mean_unseen_dice(k).map(|d| (k, d))).collect()
    }
}

pub fn run_unseen_sweep(
    prep: &Prepared,
    setting: AblationSetting,
    max_unseen: usize,
    out_dir: Option<&Path>,
) -> Result<UnseenSweep> {
    let structures = prep.bundle.classes() - 1;
    if max_unseen == 0 || max_unseen >= structures {
        return Err(HarnessError::Config(format!(
            "max_unseen must lie in 1..{structures} so at least one structure stays seen"
        )));
    }
    let jobs: Vec<(AblationSetting, Vec<usize>)> = (1..=max_unseen)
        .flat_map(|k| combinations(prep.bundle.classes(), k))
        .map(|u| (setting, u))
        .collect();
    Ok(UnseenSweep {
        lower_bound: lower_bound(prep)?,
        cells: run_cells(prep, &jobs, prep.config.workers, out_dir),
    })
}

/// Writes `report.csv`, `report.txt` and the Dice bar plot for a set of
/// reports; loss curves are added for each named history.
pub fn emit_report(dir: &Path, title: &str, reports: &[&MetricReport], histories: &[(&str, &[StepRecord])]) -> Result<()> {
    if reports.is_empty() {
        return Err(HarnessError::Config("no reports to emit".into()));
    }
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_report_csv(&dir.join("report.csv"), reports)?;
    write_table(&dir.join("report.txt"), title, reports)?;
    plot_dice_bars(&dir.join("dice_bars.svg"), reports)?;
    for (name, history) in histories {
        plot_losses(&dir.join(format!("loss_curves_{name}.svg")), history)?;
    }
    Ok(())
}

/// Summary of failed cells, one line each.
pub fn failure_lines(cells: &[CellResult]) -> Vec<String> {
    cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().err().map(|e| format!("{}: {e}", run_tag(c.setting, &c.unseen))))
        .collect()
}
