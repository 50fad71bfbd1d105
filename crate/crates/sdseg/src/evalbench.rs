//! Cross-domain evaluation: per-domain metric reports, checkpoint selection,
//! the single-encoder control baseline, and the ablation suite runner.

use crate::error::{Result, SdsegError};
use crate::game::{self, EpochRecord, TrainConfig, TrainingSummary};
use crate::nets::{NetConfig, ParamSet};
use crate::objectives::{volume_fg_mean_dice, volume_fg_mean_jaccard};
use crate::synthdata::{load_domain_samples, load_manifest, BenchmarkManifest};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dice/Jaccard are reported in points (1e-2 scale).
pub const METRIC_SCALE: f64 = 100.0;

/// Maps a rendered volume to a label volume.
pub type Predictor<'a> = dyn Fn(&Array3<f64>) -> Result<Array3<u8>> + 'a;

/// Metrics for one evaluated volume, in points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub dice: f64,
    pub jaccard: f64,
}

/// Per-domain aggregate over test volumes. Standard deviations are
/// population standard deviations over the per-sample values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain_id: String,
    pub n_samples: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub jaccard_mean: f64,
    pub jaccard_std: f64,
    pub is_source: bool,
}

/// Source plus target rows; derived target averages and drops are computed
/// from the rows so they can never disagree with them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub domains: Vec<DomainMetrics>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let sources = self.domains.iter().filter(|d| d.is_source).count();
        if sources != 1 {
            return Err(SdsegError::Data(format!(
                "metrics report needs exactly one source domain, found {sources}"
            )));
        }
        if self.domains.len() < 2 {
            return Err(SdsegError::Data(
                "metrics report needs at least one target domain".into(),
            ));
        }
        for d in &self.domains {
            for (label, v) in [
                ("dice_mean", d.dice_mean),
                ("dice_std", d.dice_std),
                ("jaccard_mean", d.jaccard_mean),
                ("jaccard_std", d.jaccard_std),
            ] {
                if !v.is_finite() {
                    return Err(SdsegError::Data(format!(
                        "domain `{}`: {label} is not finite",
                        d.domain_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn source(&self) -> &DomainMetrics {
        self.domains
            .iter()
            .find(|d| d.is_source)
            .expect("validated report has a source row")
    }

    fn target_mean(&self, pick: impl Fn(&DomainMetrics) -> f64) -> f64 {
        let targets: Vec<f64> = self
            .domains
            .iter()
            .filter(|d| !d.is_source)
            .map(&pick)
            .collect();
        targets.iter().sum::<f64>() / targets.len() as f64
    }

    pub fn target_average_dice(&self) -> f64 {
        self.target_mean(|d| d.dice_mean)
    }

    pub fn target_average_jaccard(&self) -> f64 {
        self.target_mean(|d| d.jaccard_mean)
    }

    pub fn drop_dice(&self) -> f64 {
        self.source().dice_mean - self.target_average_dice()
    }

    pub fn drop_jaccard(&self) -> f64 {
        self.source().jaccard_mean - self.target_average_jaccard()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for d in &self.domains {
            w.serialize(d)
                .map_err(|e| SdsegError::Data(format!("csv write: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| SdsegError::Data(format!("csv write: {e}")))?;
        String::from_utf8(bytes).map_err(|e| SdsegError::Data(format!("csv utf8: {e}")))
    }

    pub fn from_csv(text: &str) -> Result<MetricsReport> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let domains = r
            .deserialize()
            .collect::<std::result::Result<Vec<DomainMetrics>, _>>()
            .map_err(|e| SdsegError::Data(format!("csv parse: {e}")))?;
        let report = MetricsReport { domains };
        report.validate()?;
        Ok(report)
    }

    /// Aligned plain-text table with target-average and drop annotation.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .domains
            .iter()
            .map(|d| d.domain_id.len() + 2)
            .chain(["target average".len()].into_iter())
            .max()
            .unwrap_or(8);
        out.push_str(&format!(
            "{:<width$} {:>3}  {:>14}  {:>14}\n",
            "domain", "n", "dice", "jaccard"
        ));
        for d in &self.domains {
            let name = if d.is_source {
                format!("{}*", d.domain_id)
            } else {
                d.domain_id.clone()
            };
            out.push_str(&format!(
                "{:<width$} {:>3}  {:>6.2} ± {:>5.2}  {:>6.2} ± {:>5.2}\n",
                name, d.n_samples, d.dice_mean, d.dice_std, d.jaccard_mean, d.jaccard_std
            ));
        }
        out.push_str(&format!(
            "{:<width$} {:>3}  {:>6.2}  {:>14.2}\n",
            "target average",
            "",
            self.target_average_dice(),
            self.target_average_jaccard()
        ));
        out.push_str(&format!(
            "{:<width$} {:>3}  {:>6.2}  {:>14.2}\n",
            "drop (source - target avg)",
            "",
            self.drop_dice(),
            self.drop_jaccard()
        ));
        out
    }
}

/// Evaluates one domain split with an arbitrary predictor.
pub fn evaluate_domain(
    data_root: &Path,
    domain_id: &str,
    ids: &[String],
    num_classes: usize,
    predict: &Predictor,
) -> Result<Vec<SampleMetrics>> {
    if ids.is_empty() {
        return Err(SdsegError::Data(format!(
            "domain `{domain_id}`: empty evaluation split"
        )));
    }
    load_domain_samples(data_root, domain_id, ids)?
        .into_iter()
        .map(|(volume, labels, sample_id)| {
            let pred = predict(&volume)?;
            if pred.dim() != labels.dim() {
                return Err(SdsegError::shape(
                    labels.shape().to_vec(),
                    pred.shape().to_vec(),
                    format!("prediction for sample `{sample_id}`"),
                ));
            }
            Ok(SampleMetrics {
                sample_id,
                dice: METRIC_SCALE * volume_fg_mean_dice(&pred, &labels, num_classes),
                jaccard: METRIC_SCALE * volume_fg_mean_jaccard(&pred, &labels, num_classes),
            })
        })
        .collect()
}

fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_domain(
    domain_id: &str,
    samples: &[SampleMetrics],
    is_source: bool,
) -> DomainMetrics {
    let (dice_mean, dice_std) =
        population_stats(&samples.iter().map(|s| s.dice).collect::<Vec<_>>());
    let (jaccard_mean, jaccard_std) =
        population_stats(&samples.iter().map(|s| s.jaccard).collect::<Vec<_>>());
    DomainMetrics {
        domain_id: domain_id.to_string(),
        n_samples: samples.len(),
        dice_mean,
        dice_std,
        jaccard_mean,
        jaccard_std,
        is_source,
    }
}

/// Segmentation predictor backed by trained anatomy-encoder and
/// segmentation-decoder parameters.
pub fn model_predictor<'a>(
    net_cfg: &'a NetConfig,
    d_x: &'a ParamSet,
    p_y: &'a ParamSet,
) -> impl Fn(&Array3<f64>) -> Result<Array3<u8>> + 'a {
    move |volume| game::predict_volume(net_cfg, d_x, p_y, volume)
}

/// Source-test plus every target domain, with an injected predictor.
pub fn cross_domain_report_with(
    data_root: &Path,
    manifest: &BenchmarkManifest,
    predict: &Predictor,
) -> Result<MetricsReport> {
    let k = manifest.num_classes;
    let mut domains = Vec::new();
    let src = &manifest.source;
    let samples = evaluate_domain(data_root, &src.style.domain_id, &src.test, k, predict)?;
    domains.push(aggregate_domain(&src.style.domain_id, &samples, true));
    for t in &manifest.targets {
        let samples = evaluate_domain(data_root, &t.style.domain_id, &t.test, k, predict)?;
        domains.push(aggregate_domain(&t.style.domain_id, &samples, false));
    }
    let report = MetricsReport { domains };
    report.validate()?;
    Ok(report)
}

/// Evaluates a trained checkpoint across all benchmark domains and renders
/// the table.
pub fn cross_domain_report(
    data_root: &Path,
    net_cfg: &NetConfig,
    d_x: &ParamSet,
    p_y: &ParamSet,
) -> Result<(MetricsReport, String)> {
    let manifest = load_manifest(data_root)?;
    if manifest.num_classes != net_cfg.num_classes {
        return Err(SdsegError::Config(format!(
            "manifest has {} classes but net config expects {}",
            manifest.num_classes, net_cfg.num_classes
        )));
    }
    let predict = model_predictor(net_cfg, d_x, p_y);
    let report = cross_domain_report_with(data_root, &manifest, &predict)?;
    let table = report.render_table();
    Ok((report, table))
}

/// Epoch (1-indexed) with the highest validation Dice; ties resolve to the
/// earliest epoch. The epoch-0 initialization record never wins.
pub fn select_best_checkpoint(records: &[EpochRecord]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in records.iter().filter(|r| r.epoch >= 1) {
        match best {
            Some((_, dice)) if r.val.dice <= dice => {}
            _ => best = Some((r.epoch, r.val.dice)),
        }
    }
    best.map(|(epoch, _)| epoch).ok_or_else(|| {
        SdsegError::Data("no trained epochs in history; cannot select a checkpoint".into())
    })
}

/// The control: a plain segmentation network. Same pipeline with the domain
/// encoder, reconstruction, and lasso disabled and identity transforms only,
/// regardless of the flags in `cfg`.
pub fn train_baseline_single_encoder(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    data_root: &Path,
    run_dir: &Path,
) -> Result<TrainingSummary> {
    let baseline = TrainConfig {
        disable_domain_encoder: true,
        disable_space_constraint: true,
        disable_reconstruction: true,
        n_transforms: 1,
        enable_rotation: false,
        enable_flip: false,
        ..cfg.clone()
    };
    game::run_training(net_cfg, &baseline, data_root, run_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Benchmark,
    WithoutDomainEncoder,
    WithoutSpaceConstraint,
    WithoutRotation,
    WithoutFlip,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Benchmark,
        AblationVariant::WithoutDomainEncoder,
        AblationVariant::WithoutSpaceConstraint,
        AblationVariant::WithoutRotation,
        AblationVariant::WithoutFlip,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Benchmark => "benchmark",
            AblationVariant::WithoutDomainEncoder => "w/o domain encoder",
            AblationVariant::WithoutSpaceConstraint => "w/o space constraint",
            AblationVariant::WithoutRotation => "w/o rotation",
            AblationVariant::WithoutFlip => "w/o flip",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            AblationVariant::Benchmark => "benchmark",
            AblationVariant::WithoutDomainEncoder => "wo_domain_encoder",
            AblationVariant::WithoutSpaceConstraint => "wo_space_constraint",
            AblationVariant::WithoutRotation => "wo_rotation",
            AblationVariant::WithoutFlip => "wo_flip",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            AblationVariant::Benchmark => {}
            AblationVariant::WithoutDomainEncoder => out.disable_domain_encoder = true,
            AblationVariant::WithoutSpaceConstraint => out.disable_space_constraint = true,
            AblationVariant::WithoutRotation => out.enable_rotation = false,
            AblationVariant::WithoutFlip => out.enable_flip = false,
        }
        out
    }
}

/// Median over seeds of the per-seed target averages and drops, one row per
/// variant, plus drop-vs-benchmark columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub target_dice: f64,
    pub target_jaccard: f64,
    pub drop_dice: f64,
    pub drop_jaccard: f64,
    pub drop_vs_benchmark_dice: f64,
    pub drop_vs_benchmark_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .expect("all variants present")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "variant", "tgt dice", "tgt jacc", "drop d", "drop j", "vs bench d", "vs bench j"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>10.2} {:>10.2}\n",
                r.variant.label(),
                r.target_dice,
                r.target_jaccard,
                r.drop_dice,
                r.drop_jaccard,
                r.drop_vs_benchmark_dice,
                r.drop_vs_benchmark_jaccard
            ));
        }
        out
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains (or reuses) benchmark + four ablations on the same seed set and
/// tabulates median target-average metrics with drop-vs-benchmark columns.
/// Run directories live under `out_root/<variant>/seed_<s>`; a variant/seed
/// combination with an existing `ckpt/best` is evaluated without retraining.
pub fn run_ablation_suite(
    net_cfg: &NetConfig,
    base_cfg: &TrainConfig,
    data_root: &Path,
    out_root: &Path,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(SdsegError::InvalidArgument(
            "ablation suite needs at least one seed".into(),
        ));
    }
    let manifest = load_manifest(data_root)?;
    let mut rows = Vec::new();
    let mut benchmark_drops: Option<(f64, f64)> = None;
    for variant in AblationVariant::ALL {
        let mut tgt_d = Vec::new();
        let mut tgt_j = Vec::new();
        let mut drop_d = Vec::new();
        let mut drop_j = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..variant.apply(base_cfg)
            };
            let run_dir = out_root
                .join(variant.dir_name())
                .join(format!("seed_{seed}"));
            let best = game::checkpoint_dir(&run_dir).join("best");
            if !best.exists() {
                game::run_training(net_cfg, &cfg, data_root, &run_dir)?;
            }
            let (_, _, state) = game::load_checkpoint(&best)?;
            let predict = model_predictor(net_cfg, &state.d_x, &state.p_y);
            let report = cross_domain_report_with(data_root, &manifest, &predict)?;
            tgt_d.push(report.target_average_dice());
            tgt_j.push(report.target_average_jaccard());
            drop_d.push(report.drop_dice());
            drop_j.push(report.drop_jaccard());
        }
        let row_drop_d = median(&mut drop_d);
        let row_drop_j = median(&mut drop_j);
        if variant == AblationVariant::Benchmark {
            benchmark_drops = Some((row_drop_d, row_drop_j));
        }
        let (bench_d, bench_j) = benchmark_drops.expect("benchmark row is first");
        rows.push(AblationRow {
            variant,
            target_dice: median(&mut tgt_d),
            target_jaccard: median(&mut tgt_j),
            drop_dice: row_drop_d,
            drop_jaccard: row_drop_j,
            drop_vs_benchmark_dice: row_drop_d - bench_d,
            drop_vs_benchmark_jaccard: row_drop_j - bench_j,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
