//! `sdseg` command line: benchmark generation, training, cross-domain
//! evaluation, the ablation suite, plot emission, and a built-in selftest.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use sdseg::config::RunConfigFile;
use sdseg::error::{Result, SdsegError};
use sdseg::evalbench::{cross_domain_report, run_ablation_suite, AblationVariant, MetricsReport};
use sdseg::game::{load_checkpoint, run_training};
use sdseg::geometry::{apply_transform, compose, invert, TransformSpec};
use sdseg::plots::{write_dice_bar_chart, write_triptych};
use sdseg::synthdata::{load_domain_samples, load_manifest, make_benchmark};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sdseg",
    version,
    about = "Single-domain generalization for segmentation via an anatomy/domain encoder game"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    GenerateData {
        /// Run config (TOML); the [data] section drives generation.
        #[arg(long)]
        config: PathBuf,
        /// Benchmark output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the data seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the two-encoder game on the source domain.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Benchmark root (falls back to SDSEG_DATA_ROOT).
        #[arg(long, env = "SDSEG_DATA_ROOT")]
        data: PathBuf,
        /// Run directory; must not be in use by another run.
        #[arg(long)]
        out: PathBuf,
        /// Drop one ingredient for an ablation run.
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
    },
    /// Evaluate a checkpoint on source-test and every target domain.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "SDSEG_DATA_ROOT")]
        data: PathBuf,
        /// Report base path: writes `<out>.csv` and `<out>.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation variant over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "SDSEG_DATA_ROOT")]
        data: PathBuf,
        /// Suite directory; one run subdirectory per variant and seed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the Dice bar chart and per-domain triptychs for a report.
    ReportPlots {
        /// Report CSV produced by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "SDSEG_DATA_ROOT")]
        data: PathBuf,
        /// Plot output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in metric-oracle and transform-group checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    DomainEncoder,
    SpaceConstraint,
    Rotation,
    Flip,
}

impl AblateArg {
    fn variant(self) -> AblationVariant {
        match self {
            AblateArg::DomainEncoder => AblationVariant::WithoutDomainEncoder,
            AblateArg::SpaceConstraint => AblationVariant::WithoutSpaceConstraint,
            AblateArg::Rotation => AblationVariant::WithoutRotation,
            AblateArg::Flip => AblationVariant::WithoutFlip,
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { config, out, seed } => cmd_generate_data(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            ablate,
        } => cmd_train(&config, &data, &out, ablate),
        Command::Evaluate { ckpt, data, out } => cmd_evaluate(&ckpt, &data, &out),
        Command::Ablate { config, data, out } => cmd_ablate(&config, &data, &out),
        Command::ReportPlots {
            report,
            ckpt,
            data,
            out,
        } => cmd_report_plots(&report, &ckpt, &data, &out),
        Command::Selftest => cmd_selftest(),
    }
}

/// Marks a run directory as owned by this process. The marker is removed on
/// drop; a pre-existing marker means another run owns the directory.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| SdsegError::io(run_dir.display().to_string(), e))?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(SdsegError::RunDirLocked(run_dir.display().to_string()))
            }
            Err(e) => Err(SdsegError::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_config(path: &Path) -> Result<RunConfigFile> {
    let cfg = RunConfigFile::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Effective post-default config, written next to the run outputs.
fn snapshot_config(cfg: &RunConfigFile, run_dir: &Path) -> Result<()> {
    let path = run_dir.join("run_config.snapshot");
    std::fs::write(&path, cfg.snapshot_toml()?)
        .map_err(|e| SdsegError::io(path.display().to_string(), e))
}

fn cmd_generate_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut bench = cfg.data.benchmark_config()?;
    if let Some(seed) = seed {
        bench.seed = seed;
    }
    let manifest = make_benchmark(&bench, out)?;
    println!(
        "benchmark written to {}: source `{}` ({} train / {} val / {} test), {} target domain(s)",
        out.display(),
        manifest.source.style.domain_id,
        manifest.source.train.len(),
        manifest.source.val.len(),
        manifest.source.test.len(),
        manifest.targets.len()
    );
    for t in &manifest.targets {
        println!("  target `{}`: {} test volumes", t.style.domain_id, t.test.len());
    }
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, ablate: Option<AblateArg>) -> Result<()> {
    let cfg = load_config(config)?;
    let _lock = RunLock::acquire(out)?;
    snapshot_config(&cfg, out)?;
    let train_cfg = match ablate {
        Some(arg) => arg.variant().apply(&cfg.training),
        None => cfg.training.clone(),
    };
    let summary = run_training(&cfg.model, &train_cfg, data, out)?;
    println!(
        "training finished: best epoch {} (val Dice {:.2}), run dir {}",
        summary.best_epoch,
        100.0 * summary.best_val_dice,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (net_cfg, _, state) = load_checkpoint(ckpt)?;
    let (report, table) = cross_domain_report(data, &net_cfg, &state.d_x, &state.p_y)?;
    let csv_path = out.with_extension("csv");
    let txt_path = out.with_extension("txt");
    std::fs::write(&csv_path, report.to_csv()?)
        .map_err(|e| SdsegError::io(csv_path.display().to_string(), e))?;
    std::fs::write(&txt_path, &table)
        .map_err(|e| SdsegError::io(txt_path.display().to_string(), e))?;
    print!("{table}");
    println!("report written to {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

fn cmd_ablate(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let _lock = RunLock::acquire(out)?;
    snapshot_config(&cfg, out)?;
    let table = run_ablation_suite(
        &cfg.model,
        &cfg.training,
        data,
        out,
        &cfg.evaluation.ablation_seeds,
    )?;
    let rendered = table.render();
    let txt_path = out.join("ablation.txt");
    std::fs::write(&txt_path, &rendered)
        .map_err(|e| SdsegError::io(txt_path.display().to_string(), e))?;
    let mut csv = String::from(
        "variant,target_dice,target_jaccard,drop_dice,drop_jaccard,\
         drop_vs_benchmark_dice,drop_vs_benchmark_jaccard\n",
    );
    for row in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.variant.dir_name(),
            row.target_dice,
            row.target_jaccard,
            row.drop_dice,
            row.drop_jaccard,
            row.drop_vs_benchmark_dice,
            row.drop_vs_benchmark_jaccard
        ));
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| SdsegError::io(csv_path.display().to_string(), e))?;
    print!("{rendered}");
    println!("ablation table written to {} and {}", txt_path.display(), csv_path.display());
    Ok(())
}

fn cmd_report_plots(report: &Path, ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(report)
        .map_err(|e| SdsegError::io(report.display().to_string(), e))?;
    let report = MetricsReport::from_csv(&text)?;
    report.validate()?;
    std::fs::create_dir_all(out).map_err(|e| SdsegError::io(out.display().to_string(), e))?;

    let chart_path = out.join("dice_by_domain.svg");
    write_dice_bar_chart(&report, &chart_path)?;
    println!("wrote {}", chart_path.display());

    let (net_cfg, _, state) = load_checkpoint(ckpt)?;
    let manifest = load_manifest(data)?;
    let mut panels: Vec<(String, Vec<String>)> = Vec::new();
    panels.push((
        manifest.source.style.domain_id.clone(),
        manifest.source.test.clone(),
    ));
    for t in &manifest.targets {
        panels.push((t.style.domain_id.clone(), t.test.clone()));
    }
    for (domain_id, ids) in panels {
        let Some(first) = ids.first() else { continue };
        let samples = load_domain_samples(data, &domain_id, std::slice::from_ref(first))?;
        let (volume, labels, _) = &samples[0];
        let pred = sdseg::game::predict_volume(&net_cfg, &state.d_x, &state.p_y, volume)?;
        let path = out.join(format!("triptych_{domain_id}.png"));
        write_triptych(volume, labels, &pred, volume.dim().0 / 2, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Hand-checkable oracles; failures indicate a broken build, not bad data.
fn cmd_selftest() -> Result<()> {
    let mut failures = 0usize;
    let mut run_suite = |suite: &str, checks: Vec<(&str, std::result::Result<(), String>)>| {
        let total = checks.len();
        let mut passed = 0usize;
        for (name, outcome) in checks {
            match outcome {
                Ok(()) => passed += 1,
                Err(msg) => {
                    failures += 1;
                    println!("  FAIL {name}: {msg}");
                }
            }
        }
        println!("{suite}: {passed}/{total} passed");
    };

    run_suite("metric oracle", metric_checks());
    run_suite("group law", group_checks());

    if failures == 0 {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(SdsegError::Data(format!("selftest: {failures} check(s) failed")))
    }
}

fn expect_close(name: &str, got: f64, want: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= 1e-12 {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

fn metric_checks() -> Vec<(&'static str, std::result::Result<(), String>)> {
    use sdseg::objectives::{dice_score, jaccard_score, psnr};
    let a = Array2::from_shape_vec((2, 2), vec![1u8, 1, 0, 0]).unwrap();
    let b = Array2::from_shape_vec((2, 2), vec![1u8, 0, 1, 0]).unwrap();
    let empty = Array2::<u8>::zeros((2, 2));
    vec![
        (
            "dice identical masks",
            expect_close("dice", dice_score(&a, &a, 1), 1.0),
        ),
        (
            "dice half overlap",
            expect_close("dice", dice_score(&a, &b, 1), 0.5),
        ),
        (
            "dice disjoint",
            expect_close("dice", dice_score(&a, &empty, 1), 0.0),
        ),
        (
            "jaccard from dice",
            expect_close("jaccard", jaccard_score(&a, &b, 1), 0.5 / (2.0 - 0.5)),
        ),
        ("psnr quarter-range error", {
            let r = ArrayD::zeros(IxDyn(&[4]));
            let e = ArrayD::from_elem(IxDyn(&[4]), 0.5);
            psnr(&r, &e, 1.0)
                .map_err(|e| e.to_string())
                .and_then(|v| expect_close("psnr", v, 10.0 * (1.0f64 / 0.25).log10()))
        }),
        ("pull loss zero for equivariant maps", {
            let x = ArrayD::from_shape_vec(
                IxDyn(&[1, 2, 2]),
                vec![0.1, 0.2, 0.3, 0.4],
            )
            .unwrap();
            let t = TransformSpec::rot90();
            let moved = apply_transform(&t, &x).unwrap();
            sdseg::objectives::pull_loss_x(&x, &[moved], &[t])
                .map_err(|e| e.to_string())
                .and_then(|v| expect_close("pull_x", v, 0.0))
        }),
        ("repel loss zero for orthogonal pairs", {
            let x = ArrayD::from_shape_vec(IxDyn(&[2, 1, 1]), vec![1.0, 0.0]).unwrap();
            let d = Array1::from_vec(vec![0.0, 1.0]);
            sdseg::objectives::repel_loss(&[x], &[d])
                .map_err(|e| e.to_string())
                .and_then(|v| expect_close("repel", v, 0.0))
        }),
    ]
}

fn group_checks() -> Vec<(&'static str, std::result::Result<(), String>)> {
    let all = TransformSpec::all_canonical();
    let sample = ArrayD::from_shape_vec(
        IxDyn(&[4, 4]),
        (0..16).map(|v| v as f64).collect(),
    )
    .unwrap();

    let closure = all
        .iter()
        .flat_map(|a| all.iter().map(move |b| compose(a, b)))
        .all(|c| all.contains(&c.canonicalize()));
    let inverses = all
        .iter()
        .all(|t| compose(&invert(t), t).canonicalize() == TransformSpec::identity());
    let round_trip = all.iter().all(|t| {
        apply_transform(&invert(t), &apply_transform(t, &sample).unwrap()).unwrap() == sample
    });
    let rot_oracle = {
        let input = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let want = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![2.0, 4.0, 1.0, 3.0]).unwrap();
        apply_transform(&TransformSpec::rot90(), &input).unwrap() == want
    };

    let check = |ok: bool, msg: &str| -> std::result::Result<(), String> {
        if ok {
            Ok(())
        } else {
            Err(msg.to_string())
        }
    };
    vec![
        (
            "composition stays in the group",
            check(closure, "compose left the 8-element group"),
        ),
        (
            "inverses compose to identity",
            check(inverses, "invert(t) . t != identity"),
        ),
        (
            "transforms round-trip arrays",
            check(round_trip, "inverse transport failed"),
        ),
        (
            "rot90 matches the hand oracle",
            check(rot_oracle, "counterclockwise quarter turn wrong"),
        ),
    ]
}
