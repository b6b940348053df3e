use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use inheritseg::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use inheritseg::config::{parse_class_list, Direction, ExperimentConfig};
use inheritseg::dataset_io::{read_bundle, write_bundle};
use inheritseg::harness::{
    emit_report, failure_lines, prepare_from, run_ablation_matrix, run_benchmarks, run_prepared_experiment,
    run_unseen_sweep, Prepared,
};
use inheritseg::report::{format_table, read_report_csv};
use inheritseg_core::datagen::{build_bundle, DatasetBundle};
use inheritseg_core::metrics::{evaluate, MetricReport};
use inheritseg_core::training::AblationSetting;

/// Cross-modal zero-shot segmentation experiments on synthetic two-modality
/// phantoms.
#[derive(Debug, Parser)]
#[command(name = "inheritseg", version)]
struct Cli {
    /// Experiment config (flat `key = value` file); defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Ablation setting, a to g.
    #[arg(long, global = true)]
    setting: Option<String>,
    /// Unseen structure indices, comma separated (empty for none).
    #[arg(long, global = true)]
    unseen: Option<String>,
    /// a-to-b or b-to-a.
    #[arg(long, global = true)]
    direction: Option<Direction>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the two-modality dataset and write it to `<output>/data`.
    GenData,
    /// Train the prior model and store it as `<output>/prior.safetensors`.
    TrainPrior {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Stage 2 for the configured setting and unseen set.
    TrainZeroshot {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reuse a stored prior instead of training one.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the target modality.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prior checkpoint used as attention guide (models trained with IA).
        #[arg(long)]
        guide: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Every setting with every structure as the single unseen class.
    Ablate {
        /// Settings to run, e.g. `cfg`.
        #[arg(long, default_value = "abcdefg")]
        settings: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// All combinations of 1..=max-unseen unseen structures for one setting.
    Sweep {
        #[arg(long, default_value_t = 3)]
        max_unseen: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Lower bound, Oracle and baseline on the shared test split.
    Benchmarks {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Merge the `report.csv` files of finished runs into one table and plot.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.output {
        c.output_dir = o.clone();
    }
    if let Some(s) = &cli.setting {
        c.setting = s.clone();
    }
    if let Some(u) = &cli.unseen {
        c.unseen = parse_class_list(u)?;
    }
    if let Some(d) = cli.direction {
        c.direction = d;
    }
    c.validate()?;
    Ok(c)
}

fn load_data(data: Option<&Path>) -> anyhow::Result<Option<DatasetBundle>> {
    data.map(|d| read_bundle(d).map(|(_, b)| b).with_context(|| format!("reading dataset {}", d.display())))
        .transpose()
}

fn prepared(config: &ExperimentConfig, data: Option<&Path>, prior: Option<&Path>) -> anyhow::Result<Prepared> {
    let bundle = load_data(data)?;
    let prior = match prior {
        Some(p) => {
            let arch = inheritseg_core::nets::Architecture::new(config.network_config()?)?;
            Some(load_checkpoint(p, &arch)?.model)
        }
        None => None,
    };
    Ok(prepare_from(config, bundle, prior)?)
}

fn print_table(title: &str, reports: &[&MetricReport]) {
    print!("{}", format_table(title, reports));
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::GenData => {
            let bc = config.bundle_config()?;
            let bundle = build_bundle(&bc)?;
            let dir = out.join("data");
            write_bundle(&dir, &bundle, config.data_seed, &config.direction.to_string(), &bc.profile_prior, &bc.profile_target)?;
            println!("wrote {} prior and {} target samples to {}", bundle.prior.len(), bundle.mirror.len(), dir.display());
        }
        Command::TrainPrior { data } => {
            let prep = prepared(&config, data.as_deref(), None)?;
            let mut metadata = BTreeMap::new();
            metadata.insert("config".to_string(), config.to_toml());
            metadata.insert("role".to_string(), "prior".to_string());
            let path = out.join("prior.safetensors");
            save_checkpoint(&path, &Checkpoint { model: prep.prior.clone(), discriminator: None, metadata })?;
            let loss_path = out.join("prior_loss.csv");
            let mut w = csv::Writer::from_path(&loss_path)?;
            w.write_record(["step", "L_Stage1"])?;
            for (i, l) in prep.prior_history.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            println!("prior stored in {}", path.display());
        }
        Command::TrainZeroshot { data, prior } => {
            let prep = prepared(&config, data.as_deref(), prior.as_deref())?;
            let art = run_prepared_experiment(&prep, &out)?;
            print_table(&art.report.tag, &[&art.report]);
        }
        Command::Evaluate { checkpoint, guide, data } => {
            let arch = inheritseg_core::nets::Architecture::new(config.network_config()?)?;
            let model = load_checkpoint(checkpoint, &arch)?.model;
            let guide = guide.as_deref().map(|g| load_checkpoint(g, &arch)).transpose()?.map(|c| c.model);
            let bundle = match load_data(data.as_deref())? {
                Some(b) => b,
                None => build_bundle(&config.bundle_config()?)?,
            };
            let test = bundle.mirror_test();
            let tag = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = evaluate(&arch, &model, guide.as_ref(), &test, &config.unseen, &tag, &config.eval_options()?)?;
            emit_report(&out, &tag, &[&report], &[])?;
            print_table(&tag, &[&report]);
        }
        Command::Ablate { settings, data, prior } => {
            let settings: Vec<AblationSetting> = settings
                .chars()
                .map(|c| AblationSetting::parse(&c.to_string()))
                .collect::<Result<_, _>>()?;
            let prep = prepared(&config, data.as_deref(), prior.as_deref())?;
            let m = run_ablation_matrix(&prep, &settings, Some(&out.join("cells")))?;
            let mut reports: Vec<&MetricReport> = vec![&m.lower_bound, &m.oracle];
            reports.extend(m.cells.iter().filter_map(|c| c.report()));
            reports.extend(m.collective.iter());
            emit_report(&out, "ablation matrix", &reports, &[])?;
            print_table("ablation matrix", &reports);
            finish(&out, failure_lines(&m.cells))?;
        }
        Command::Sweep { max_unseen, data, prior } => {
            let prep = prepared(&config, data.as_deref(), prior.as_deref())?;
            let s = run_unseen_sweep(&prep, config.ablation_setting()?, *max_unseen, Some(&out.join("cells")))?;
            let mut reports: Vec<&MetricReport> = vec![&s.lower_bound];
            reports.extend(s.cells.iter().filter_map(|c| c.report()));
            emit_report(&out, "unseen-class sweep", &reports, &[])?;
            print_table("unseen-class sweep", &reports);
            let mut trend = String::from("unseen_count,mean_unseen_dice\n");
            for (k, d) in s.trend() {
                trend.push_str(&format!("{k},{d}\n"));
                println!("{k} unseen: mean unseen Dice {:.2}%", 100.0 * d);
            }
            std::fs::write(out.join("trend.csv"), trend)?;
            finish(&out, failure_lines(&s.cells))?;
        }
        Command::Benchmarks { data, prior } => {
            let prep = prepared(&config, data.as_deref(), prior.as_deref())?;
            let b = run_benchmarks(&prep)?;
            let reports = [&b.lower_bound, &b.oracle, &b.baseline];
            emit_report(&out, "benchmarks", &reports, &[])?;
            print_table("benchmarks", &reports);
        }
        Command::Report { runs } => {
            let mut reports = Vec::new();
            for dir in runs {
                let path = if dir.is_dir() { dir.join("report.csv") } else { dir.clone() };
                reports.extend(read_report_csv(&path)?);
            }
            let refs: Vec<&MetricReport> = reports.iter().collect();
            emit_report(&out, "merged report", &refs, &[])?;
            print_table("merged report", &refs);
        }
    }
    Ok(())
}

/// Records failed cells next to the merged report and turns them into a
/// nonzero exit.
fn finish(out: &Path, failures: Vec<String>) -> anyhow::Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    std::fs::write(out.join("failures.txt"), failures.join("\n") + "\n")?;
    bail!("{} cell(s) failed:\n{}", failures.len(), failures.join("\n"))
}
