//! Command-line front-end: generate synthetic cohorts, fuse raw samples,
//! train with grouped cross-validation, and summarize results.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 3 for
//! runtime failures (I/O, data, numerics).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::Digest;

use dwdgat_core::config::{Profile, TrainConfig};
use dwdgat_core::datagen::{generate_cohort, read_dataset, write_dataset, CohortSpec};
use dwdgat_core::error::Error;
use dwdgat_core::fusion::{fuse_sample, BrainTemplate, RoiNetwork, RoiStatPair, VoxelVolume};
use dwdgat_core::trainer::{estimate_cost, run_experiment, ExperimentReport, GraphMode, WeightingMode};

#[derive(Parser)]
#[command(name = "dwdgat", version, about = "Dual graph attention training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it as a dataset file.
    Generate {
        /// JSON cohort spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 231)]
        seed: u64,
        /// Output dataset path. Defaults to <DWDGAT_OUT or .>/cohort.dws
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse one raw sample (JSON) into a per-ROI feature matrix (CSV).
    Fuse {
        /// JSON file with the raw stat pair, networks, volumes, and template.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path. Defaults to <DWDGAT_OUT or .>/fused.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with grouped k-fold cross-validation and write artifacts.
    Train {
        /// Dataset file produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; overrides the profile when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named size preset: mini, desk, or paper.
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "phenotype")]
        graph_mode: GraphMode,
        /// uniform disables the weight generator.
        #[arg(long, default_value = "dynamic")]
        weighting: String,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run folds on separate threads.
        #[arg(long)]
        parallel_folds: bool,
        /// Print the analytic cost estimate and exit without training.
        #[arg(long)]
        cost: bool,
        /// Output directory. Defaults to DWDGAT_OUT or the current directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print a human-readable summary of a metrics.json file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn out_base(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let dir = std::env::var("DWDGAT_OUT").unwrap_or_else(|_| ".".into());
        Path::new(&dir).join(default_name)
    })
}

/// Raw per-sample inputs accepted by `fuse`.
#[derive(serde::Deserialize)]
struct RawSample {
    surface: Vec<f64>,
    voxel: Vec<f64>,
    /// Each network is a flattened R x R symmetric matrix.
    networks: Vec<Vec<f64>>,
    /// Each volume is a flattened X*Y*Z weight grid.
    volumes: Vec<Vec<f64>>,
    template_dims: (usize, usize, usize),
    /// Per-voxel ROI labels, 0 for background, 1..=roi_count otherwise.
    template_labels: Vec<u32>,
    roi_count: usize,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", sha2::Sha256::digest(&bytes)))
}

#[derive(serde::Serialize)]
struct RunManifest {
    created_utc: String,
    seed: u64,
    dataset_path: String,
    dataset_sha256: String,
    graph_mode: GraphMode,
    weighting: WeightingMode,
    parallel_folds: bool,
    config: TrainConfig,
    outputs: Vec<String>,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { spec, seed, out } => {
            let spec: CohortSpec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => CohortSpec::default(),
            };
            let out = out_base(out, "cohort.dws");
            let ds = generate_cohort(&spec, seed)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} samples ({} subjects x {} timepoints) to {}",
                ds.samples.len(),
                spec.subjects,
                spec.timepoints,
                out.display()
            );
            Ok(())
        }
        Command::Fuse { input, out } => {
            let raw: RawSample = serde_json::from_str(&std::fs::read_to_string(input)?)?;
            let tpl = BrainTemplate::new(raw.template_dims, raw.template_labels, raw.roi_count)?;
            let stats = RoiStatPair {
                surface: raw.surface,
                voxel: raw.voxel,
            };
            let networks = raw
                .networks
                .into_iter()
                .map(|m| RoiNetwork::new(raw.roi_count, m))
                .collect::<Result<Vec<_>, _>>()?;
            let volumes = raw
                .volumes
                .into_iter()
                .map(|w| VoxelVolume::new(raw.template_dims, w))
                .collect::<Result<Vec<_>, _>>()?;
            let fused = fuse_sample(&stats, &networks, &volumes, &tpl)?;
            let out = out_base(out, "fused.csv");
            let mut csv = fused.column_names.join(",");
            csv.push('\n');
            for r in 0..fused.rows {
                let row: Vec<String> = fused.row(r).iter().map(|v| v.to_string()).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            std::fs::write(&out, csv)?;
            println!("wrote {}x{} fused matrix to {}", fused.rows, fused.cols, out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            profile,
            seed,
            graph_mode,
            weighting,
            folds,
            epochs,
            parallel_folds,
            cost,
            out_dir,
        } => {
            let ds = read_dataset(&data)?;
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => TrainConfig::for_profile(profile),
            };
            // align the model with the dataset shape
            cfg.roi_count = ds.spec.roi_count;
            cfg.feature_dim = ds.spec.feature_dim();
            cfg.classes = ds.spec.classes;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = folds {
                cfg.folds = f;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let weighting = match weighting.as_str() {
                "dynamic" => WeightingMode::Dynamic,
                "uniform" => WeightingMode::Uniform,
                other => return Err(Error::Config(format!("unknown weighting '{other}'"))),
            };
            if cost {
                let est = estimate_cost(&cfg, cfg.batch_size);
                println!("{}", serde_json::to_string_pretty(&est)?);
                return Ok(());
            }
            let dir = out_base(out_dir, "run");
            let report =
                run_experiment(&ds, &cfg, graph_mode, weighting, parallel_folds, Some(&dir))?;
            let outputs = [
                "metrics.json",
                "loss_history.csv",
                "roc_points.csv",
                "adjacency_heatmap.csv",
                "cost_estimate.json",
            ]
            .iter()
            .map(|n| dir.join(n).display().to_string())
            .collect();
            let manifest = RunManifest {
                created_utc: chrono::Utc::now().to_rfc3339(),
                seed: cfg.seed,
                dataset_path: data.display().to_string(),
                dataset_sha256: sha256_file(&data)?,
                graph_mode,
                weighting,
                parallel_folds,
                config: cfg,
                outputs,
            };
            std::fs::write(
                dir.join("run_manifest.json"),
                serde_json::to_string_pretty(&manifest)?,
            )?;
            println!(
                "cv accuracy {:.2}% +/- {:.2} | balanced accuracy {:.2}% | f1 {:.2}% | specificity {:.2}%",
                report.mean_accuracy,
                report.std_accuracy,
                report.mean_balanced_accuracy,
                report.mean_f1_weighted,
                report.mean_specificity
            );
            println!("artifacts in {}", dir.display());
            Ok(())
        }
        Command::Report { metrics } => {
            let report: ExperimentReport =
                serde_json::from_str(&std::fs::read_to_string(metrics)?)?;
            println!(
                "graph mode: {:?} | weighting: {:?} | folds: {}",
                report.graph_mode,
                report.weighting,
                report.folds.len()
            );
            println!("fold  best_epoch  acc      ba       f1       spe");
            for f in &report.folds {
                println!(
                    "{:<5} {:<11} {:<8.2} {:<8.2} {:<8.2} {:<8.2}",
                    f.fold,
                    f.best_epoch,
                    f.best_metrics.accuracy,
                    f.best_metrics.balanced_accuracy,
                    f.best_metrics.f1_weighted,
                    f.best_metrics.specificity_macro
                );
            }
            println!(
                "mean  -           {:<8.2} {:<8.2} {:<8.2} {:<8.2}",
                report.mean_accuracy,
                report.mean_balanced_accuracy,
                report.mean_f1_weighted,
                report.mean_specificity
            );
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
