//! Protocol suites: exchange vs fusion, random exchange, single-decoder
//! inference and misregistration robustness.
//!
//! Each cell is an independent training obtained through a [`Runner`], so
//! cells shared between suites are trained once.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{BitemporalSample, SHIFT_GRID};
use crate::error::{Error, Result};
use crate::exchange::{Axis, ExchangeSpec};
use crate::harness::results::{aggregate, experiment_id, CellSummary, ResultRow, ResultsWriter};
use crate::harness::runner::{RunRecord, Runner};
use crate::harness::{evaluate, ExperimentConfig};
use crate::model::{account, ArchConfig, InferMode, Model};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const EXCHANGE_AXES: [Axis; 3] = [Axis::Layer, Axis::Channel, Axis::SpatialCol];
pub const FUSIONS: [&str; 3] = ["concat", "add", "subtract"];

/// Deterministic step-2 exchange on `axis`, everything else from `base`.
pub fn exchange_cell(base: &ExperimentConfig, axis: Axis) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.arch = ArchConfig {
        backbone: base.arch.backbone.clone(),
        ..ArchConfig::seed(ExchangeSpec::deterministic(axis, 2, 0))
    };
    cfg.name = cfg.arch.label();
    cfg.eval_modes = vec![InferMode::Siamese];
    cfg.with_seed(base.seed)
}

/// Bernoulli(`p`) exchange on `axis`; evaluation falls back to the step-2 rule.
pub fn random_cell(base: &ExperimentConfig, axis: Axis, p: f64) -> ExperimentConfig {
    let mut cfg = exchange_cell(base, axis);
    cfg.arch.exchange = Some(ExchangeSpec::bernoulli(axis, p, base.seed));
    cfg.name = cfg.arch.label();
    cfg.with_seed(base.seed)
}

pub fn fusion_cell(base: &ExperimentConfig, fusion: &str) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.arch = ArchConfig {
        backbone: base.arch.backbone.clone(),
        ..ArchConfig::fusion(fusion)
    };
    cfg.name = cfg.arch.label();
    cfg.eval_modes = vec![InferMode::Siamese];
    cfg
}

pub fn shift_cell(base: &ExperimentConfig, n: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.shift_px = n;
    cfg
}

fn seeded(cells: &[ExperimentConfig], seeds: &[u64]) -> Vec<ExperimentConfig> {
    seeds
        .iter()
        .flat_map(|&s| cells.iter().map(move |c| c.clone().with_seed(s)))
        .collect()
}

/// Trains every config, in parallel when the pool has more than one thread.
pub fn run_all(runner: &Runner, cfgs: &[ExperimentConfig]) -> Result<Vec<std::sync::Arc<RunRecord>>> {
    for c in cfgs {
        runner.dataset(c)?;
    }
    cfgs.par_iter().map(|c| runner.run(c)).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Test rows for `runs`, their config hashes, and the seed-averaged summary.
fn tabulate(
    runner: &Runner,
    suite: &str,
    runs: &[std::sync::Arc<RunRecord>],
    writer: &ResultsWriter,
) -> Result<(Vec<ResultRow>, Vec<CellSummary>)> {
    let mut rows = Vec::new();
    let mut hashes = BTreeMap::new();
    for r in runs {
        let id = experiment_id(suite, &r.config.arch.label(), r.config.seed);
        let data = runner.dataset(&r.config)?;
        rows.push(r.test_row(&id, &data, InferMode::Siamese)?);
        hashes.insert(id, r.hash.clone());
    }
    writer.push(&rows)?;
    let summary = aggregate(&rows, &hashes)?;
    Ok((rows, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub family: &'static str,
    pub params: u64,
    pub macs: u64,
    pub mean_iou: f64,
    pub iou: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<ResultRow>,
    pub cells: Vec<AblationCell>,
    pub best_exchange: (String, f64),
    pub best_fusion: (String, f64),
    /// Row params equal the static account for every row.
    pub params_match_account: bool,
}

fn best(cells: &[AblationCell], family: &str) -> (String, f64) {
    cells
        .iter()
        .filter(|c| c.family == family)
        .max_by(|a, b| a.mean_iou.total_cmp(&b.mean_iou))
        .map(|c| (c.variant.clone(), c.mean_iou))
        .unwrap_or_default()
}

/// LE/CE/SE against concat/add/subtract fusion, one training per variant and seed.
pub fn exchange_vs_fusion(
    runner: &Runner,
    base: &ExperimentConfig,
    seeds: &[u64],
    writer: &ResultsWriter,
) -> Result<AblationReport> {
    let mut variants: Vec<ExperimentConfig> = EXCHANGE_AXES.iter().map(|&a| exchange_cell(base, a)).collect();
    variants.extend(FUSIONS.iter().map(|f| fusion_cell(base, f)));
    let runs = run_all(runner, &seeded(&variants, seeds))?;
    let (rows, summary) = tabulate(runner, "ablation", &runs, writer)?;
    let mut params_match_account = true;
    for r in &runs {
        let acc = account(&r.config.arch)?;
        params_match_account &= rows
            .iter()
            .filter(|row| row.config_hash == r.hash)
            .all(|row| row.params == acc.params && row.macs == acc.forward_macs);
    }
    let cells: Vec<AblationCell> = variants
        .iter()
        .map(|v| {
            let label = v.arch.label();
            let s = summary
                .iter()
                .find(|s| s.cell == format!("ablation/{label}"))
                .expect("every variant summarized");
            AblationCell {
                family: if v.arch.is_siamese() { "exchange" } else { "fusion" },
                variant: label,
                params: s.params,
                macs: s.macs,
                mean_iou: s.mean.iou,
                iou: s.iou.clone(),
            }
        })
        .collect();
    Ok(AblationReport {
        best_exchange: best(&cells, "exchange"),
        best_fusion: best(&cells, "fusion"),
        rows,
        cells,
        params_match_account,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomAxis {
    pub axis: &'static str,
    pub random_mean_iou: f64,
    pub deterministic_mean_iou: f64,
    pub random_iou: Vec<f64>,
    pub deterministic_iou: Vec<f64>,
    /// `random - deterministic`.
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RandomReport {
    pub rows: Vec<ResultRow>,
    pub axes: Vec<RandomAxis>,
    /// Repeated evaluation of every random-trained model gave identical counts.
    pub eval_deterministic: bool,
}

/// RLE/RCE/RSE training with deterministic evaluation, against the
/// deterministically trained counterparts.
pub fn random_exchange(
    runner: &Runner,
    base: &ExperimentConfig,
    seeds: &[u64],
    p: f64,
    writer: &ResultsWriter,
) -> Result<RandomReport> {
    let random: Vec<_> = EXCHANGE_AXES.iter().map(|&a| random_cell(base, a, p)).collect();
    let det: Vec<_> = EXCHANGE_AXES.iter().map(|&a| exchange_cell(base, a)).collect();
    let random_runs = run_all(runner, &seeded(&random, seeds))?;
    let det_runs = run_all(runner, &seeded(&det, seeds))?;
    let (rows, _) = tabulate(runner, "random", &random_runs, writer)?;
    let mut eval_deterministic = true;
    for r in &random_runs {
        let data = runner.dataset(&r.config)?;
        let first = evaluate(&r.model, &data.test, InferMode::Siamese)?;
        let again = evaluate(&r.model, &data.test, InferMode::Siamese)?;
        eval_deterministic &= first.confusion == again.confusion;
    }
    let mut axes = Vec::new();
    for axis in EXCHANGE_AXES {
        let iou_of = |runs: &[std::sync::Arc<RunRecord>]| -> Result<Vec<f64>> {
            runs.iter()
                .filter(|r| r.config.arch.exchange.as_ref().map(|s| s.axis) == Some(axis))
                .map(|r| {
                    let data = runner.dataset(&r.config)?;
                    Ok(evaluate(&r.model, &data.test, InferMode::Siamese)?.scores.iou)
                })
                .collect()
        };
        let random_iou = iou_of(&random_runs)?;
        let deterministic_iou = iou_of(&det_runs)?;
        let (rm, dm) = (mean(random_iou.iter().copied()), mean(deterministic_iou.iter().copied()));
        axes.push(RandomAxis {
            axis: axis.tag(),
            random_mean_iou: rm,
            deterministic_mean_iou: dm,
            random_iou,
            deterministic_iou,
            diff: rm - dm,
        });
    }
    Ok(RandomReport {
        rows,
        axes,
        eval_deterministic,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SingleDecoderReport {
    pub rows: Vec<ResultRow>,
    pub iou_siamese: f64,
    pub iou_a: f64,
    pub iou_b: f64,
    /// `mean(iou_a, iou_b) - iou_siamese`.
    pub delta: f64,
    pub macs_siamese: u64,
    pub macs_branch: u64,
}

/// Scores one SEED model in all three inference modes.
pub fn single_decoder(
    model: &Model,
    samples: &[BitemporalSample],
    experiment: &str,
    config_hash: &str,
    epoch: usize,
) -> Result<SingleDecoderReport> {
    if !model.config().is_siamese() {
        return Err(Error::Usage(format!(
            "single-decoder evaluation needs a SEED checkpoint, got {}",
            model.config().label()
        )));
    }
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for mode in InferMode::ALL {
        let ev = evaluate(model, samples, mode)?;
        let mut row = ResultRow {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            split: "test".into(),
            mode: mode.name().into(),
            epoch,
            oa: 0.0,
            iou: 0.0,
            f1: 0.0,
            prec: 0.0,
            rec: 0.0,
            params: model.param_count(),
            macs: ev.macs,
            wall_s: 0.0,
        };
        row.set_scores(ev.scores);
        rows.push(row);
        evals.push(ev);
    }
    let (s, a, b) = (evals[0], evals[1], evals[2]);
    Ok(SingleDecoderReport {
        rows,
        iou_siamese: s.scores.iou,
        iou_a: a.scores.iou,
        iou_b: b.scores.iou,
        delta: (a.scores.iou + b.scores.iou) / 2.0 - s.scores.iou,
        macs_siamese: s.macs,
        macs_branch: a.macs.max(b.macs),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SingleDecoderAxis {
    pub axis: &'static str,
    pub per_seed: Vec<SingleDecoderReport>,
    pub mean_delta: f64,
    pub mean_iou_siamese: f64,
    pub mean_iou_a: f64,
    pub mean_iou_b: f64,
}

/// Single-decoder evaluation of the deterministic LE/CE/SE models.
pub fn single_decoder_suite(
    runner: &Runner,
    base: &ExperimentConfig,
    seeds: &[u64],
    writer: &ResultsWriter,
) -> Result<Vec<SingleDecoderAxis>> {
    let det: Vec<_> = EXCHANGE_AXES.iter().map(|&a| exchange_cell(base, a)).collect();
    run_all(runner, &seeded(&det, seeds))?;
    let mut out = Vec::new();
    for axis in EXCHANGE_AXES {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cfg = exchange_cell(base, axis).with_seed(seed);
            let r = runner.run(&cfg)?;
            let data = runner.dataset(&cfg)?;
            let id = experiment_id("single_decoder", &cfg.arch.label(), seed);
            let mut rep = single_decoder(&r.model, &data.test, &id, &r.hash, r.best_epoch)?;
            rep.rows.iter_mut().for_each(|row| row.wall_s = r.wall_s);
            writer.push(&rep.rows)?;
            per_seed.push(rep);
        }
        out.push(SingleDecoderAxis {
            axis: axis.tag(),
            mean_delta: mean(per_seed.iter().map(|r| r.delta)),
            mean_iou_siamese: mean(per_seed.iter().map(|r| r.iou_siamese)),
            mean_iou_a: mean(per_seed.iter().map(|r| r.iou_a)),
            mean_iou_b: mean(per_seed.iter().map(|r| r.iou_b)),
            per_seed,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftPoint {
    pub shift_px: usize,
    pub iou: f64,
    /// IoU relative to the unshifted run.
    pub retention: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub rows: Vec<ResultRow>,
    pub points: Vec<ShiftPoint>,
    /// Whether IoU never increases with the shift.
    pub monotone_non_increasing: bool,
    pub summary: String,
}

/// Independent trainings with image B shifted right by each `grid` entry.
pub fn shift_robustness(
    runner: &Runner,
    base: &ExperimentConfig,
    grid: &[usize],
    writer: &ResultsWriter,
) -> Result<ShiftReport> {
    if grid.first() != Some(&0) {
        return Err(Error::Config("shift grid must start at 0 for retention".into()));
    }
    let cfgs: Vec<_> = grid.iter().map(|&n| shift_cell(base, n)).collect();
    let runs = run_all(runner, &cfgs)?;
    let mut rows = Vec::new();
    let mut hashes = BTreeMap::new();
    for r in &runs {
        let id = experiment_id(&format!("shift/N{}", r.config.shift_px), &r.config.arch.label(), r.config.seed);
        let data = runner.dataset(&r.config)?;
        rows.push(r.test_row(&id, &data, InferMode::Siamese)?);
        hashes.insert(id, r.hash.clone());
    }
    writer.push(&rows)?;
    aggregate(&rows, &hashes)?;
    let iou0 = rows[0].iou;
    let points: Vec<ShiftPoint> = grid
        .iter()
        .zip(&rows)
        .map(|(&n, r)| ShiftPoint {
            shift_px: n,
            iou: r.iou,
            retention: if iou0 > 0.0 { r.iou / iou0 } else { 0.0 },
        })
        .collect();
    let rises: Vec<usize> = points
        .windows(2)
        .filter(|w| w[1].iou > w[0].iou)
        .map(|w| w[1].shift_px)
        .collect();
    let monotone_non_increasing = rises.is_empty();
    let last = points.last().expect("non-empty grid");
    let summary = if monotone_non_increasing {
        format!(
            "IoU non-increasing in N; retention {:.1}% at N={}",
            100.0 * last.retention,
            last.shift_px
        )
    } else {
        format!(
            "IoU not monotone in N (rises at N={rises:?}); retention {:.1}% at N={}",
            100.0 * last.retention,
            last.shift_px
        )
    };
    Ok(ShiftReport {
        rows,
        points,
        monotone_non_increasing,
        summary,
    })
}

/// The shift grid used when none is given.
pub fn default_shift_grid() -> Vec<usize> {
    SHIFT_GRID.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::model::Backbone;

    fn tiny_base() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.data = DatasetConfig {
            n_train: 4,
            n_val: 2,
            n_test: 2,
            height: 16,
            width: 16,
            ..DatasetConfig::default()
        };
        cfg.arch.backbone = Backbone {
            height: 16,
            width: 16,
            channels: vec![4, 4, 4],
            neck_channels: 4,
            ..Backbone::default()
        };
        cfg
    }

    #[test]
    fn cells_share_the_backbone_and_differ_in_head() {
        let base = tiny_base();
        let le = exchange_cell(&base, Axis::Layer);
        let rle = random_cell(&base, Axis::Layer, 0.5);
        let cat = fusion_cell(&base, "concat");
        assert_eq!(le.arch.backbone, base.arch.backbone);
        assert_eq!(cat.arch.backbone, base.arch.backbone);
        assert_ne!(le.hash(), rle.hash());
        assert_eq!(le.arch.label(), "SEED(LE)");
        assert_eq!(rle.arch.label(), "SEED(RLE)");
        assert_eq!(cat.arch.label(), "fusion(concat)");
        assert_eq!(exchange_cell(&base, Axis::Layer).hash(), ExperimentConfig { name: "x".into(), ..le }.hash());
    }

    #[test]
    fn default_config_is_the_layer_exchange_cell() {
        let base = ExperimentConfig::default();
        assert_eq!(exchange_cell(&base, Axis::Layer).hash(), base.hash());
        assert_eq!(shift_cell(&base, 0).hash(), base.hash());
    }

    #[test]
    fn stored_runs_are_reloaded_instead_of_retrained() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = exchange_cell(&tiny_base(), Axis::Channel);
        let first = Runner::new().with_store(dir.path());
        let a = first.run(&cfg).unwrap();
        assert_eq!(first.trainings(), 1);
        let second = Runner::new().with_store(dir.path());
        let b = second.run(&cfg).unwrap();
        assert_eq!(second.trainings(), 0);
        assert!(a.model.params().bit_eq(b.model.params()));
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.log.len(), b.log.len());
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn ablation_emits_six_rows_per_seed_and_reuses_runs() {
        let runner = Runner::new();
        let writer = ResultsWriter::new(None);
        let rep = exchange_vs_fusion(&runner, &tiny_base(), &[0, 1], &writer).unwrap();
        assert_eq!(rep.rows.len(), 12);
        assert!(rep.params_match_account);
        assert_eq!(runner.trainings(), 12);
        let sd = single_decoder_suite(&runner, &tiny_base(), &[0, 1], &writer).unwrap();
        assert_eq!(runner.trainings(), 12);
        assert_eq!(sd.len(), 3);
        for axis in &sd {
            for r in &axis.per_seed {
                assert!(r.macs_branch < r.macs_siamese);
                assert_eq!(r.rows.len(), 3);
            }
        }
        assert_eq!(writer.rows().len(), 12 + 18);
    }

    #[test]
    fn random_suite_shape() {
        let runner = Runner::new();
        let writer = ResultsWriter::new(None);
        let rep = random_exchange(&runner, &tiny_base(), &DEFAULT_SEEDS, 0.5, &writer).unwrap();
        assert_eq!(rep.rows.len(), 9);
        assert_eq!(rep.axes.len(), 3);
        assert!(rep.eval_deterministic);
        assert!(rep.rows.iter().all(|r| r.experiment.starts_with("random/SEED(R")));
    }

    #[test]
    fn single_decoder_rejects_fusion_models() {
        let base = tiny_base();
        let model = Model::new(fusion_cell(&base, "add").arch, 0).unwrap();
        assert!(matches!(single_decoder(&model, &[], "x", "h", 0), Err(Error::Usage(_))));
    }

    #[test]
    fn shift_suite_reports_retention() {
        let runner = Runner::new();
        let writer = ResultsWriter::new(None);
        let rep = shift_robustness(&runner, &tiny_base(), &default_shift_grid(), &writer).unwrap();
        assert_eq!(rep.rows.len(), 5);
        assert_eq!(rep.points[0].retention, if rep.points[0].iou > 0.0 { 1.0 } else { 0.0 });
        assert!(shift_robustness(&runner, &tiny_base(), &[2, 4], &writer).is_err());
    }
}
