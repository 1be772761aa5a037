//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed. Trainings are shared through one
//! in-memory [`Runner`], so a config used by several criteria trains once.
//! Expect roughly 30 to 45 minutes on a single core.

mod common;

use std::time::Instant;

use rand::Rng;
use seedcd_core::data::SHIFT_GRID;
use seedcd_core::exchange::{Axis, ExchangeSpec};
use seedcd_core::harness::suites::{
    exchange_cell, exchange_vs_fusion, random_exchange, shift_robustness, single_decoder_suite, DEFAULT_SEEDS,
};
use seedcd_core::harness::{verify, ExperimentConfig, ResultsWriter, Runner};
use seedcd_core::info::{self, JointDistribution};
use seedcd_core::metrics::{Confusion, ErrorMap};
use seedcd_core::model::{account, seg2cd, ArchConfig, Backbone, InferMode, Model, SegModel};
use seedcd_core::rng::keyed_rng;
use seedcd_core::tensor::Tensor;

struct Ledger {
    lines: Vec<(usize, bool, String)>,
}

impl Ledger {
    fn record(&mut self, id: usize, title: &str, ok: bool, started: Instant, detail: String) {
        let line = format!(
            "[{}] {id:>2} {title} ({:.1}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((id, ok, line));
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn crit_orthogonality(l: &mut Ledger) {
    let t = Instant::now();
    let ex = verify::orthogonality_exhaustive(10);
    let rnd = verify::orthogonality_random(2024, 10_000, 64);
    let ok = ex.passed() && rnd.passed() && ex.cases == (1..=10).map(|m| 1u64 << m).sum::<u64>() && t.elapsed().as_secs_f64() < 30.0;
    l.record(
        1,
        "orthogonality witness",
        ok,
        t,
        format!("{} exhaustive masks ({}), {} random masks ({})", ex.cases, ex.detail, rnd.cases, rnd.detail),
    );
}

fn crit_involution(l: &mut Ledger) {
    let t = Instant::now();
    let inv = verify::involution(2024, 1000);
    let eq = verify::matrix_equivalence(2024, 1000);
    let ok = inv.passed() && eq.passed() && t.elapsed().as_secs_f64() < 10.0;
    l.record(
        2,
        "involution and matrix equivalence",
        ok,
        t,
        format!("involution {}, matrix vs elementwise {}", inv.detail, eq.detail),
    );
}

fn crit_information(l: &mut Ledger) {
    let t = Instant::now();
    let a = info::audit(2024, 500);
    let copy = JointDistribution::copy_first_coordinate(1, 2).unwrap();
    // exact values of the copy example, independent of the audit's own check
    let exact = info::mutual_information(&copy) == 1.0
        && info::bayes_risk(&copy) == 0.0
        && a.example.len() == 3
        && a.example[..2].iter().all(|r| r.mi_after == 0.5 && r.risk_after == 0.25)
        && a.example.iter().all(|r| r.mi_after < r.mi_before);
    let ok = a.passed
        && exact
        && a.max_mi_permutation_delta <= 1e-12
        && a.max_risk_permutation_delta <= 1e-12
        && a.dpi_violations == 0
        && t.elapsed().as_secs_f64() < 60.0;
    let ex: Vec<String> = a
        .example
        .iter()
        .map(|r| format!("{} MI {}->{} R* {}->{}", r.fusion, r.mi_before, r.mi_after, r.risk_before, r.risk_after))
        .collect();
    l.record(
        3,
        "information invariance and DPI",
        ok,
        t,
        format!(
            "{} joints, max |dMI| {:e}, max |dR*| {:e}, DPI {}/{} violations; {}",
            a.joints,
            a.max_mi_permutation_delta,
            a.max_risk_permutation_delta,
            a.dpi_violations,
            a.dpi_checks,
            ex.join("; ")
        ),
    );
}

fn crit_gradients(l: &mut Ledger) {
    let t = Instant::now();
    let mut worst_op = (String::new(), 0.0f64);
    for op in common::OPS {
        for trial in 0..100u64 {
            let e = common::op_trial(op, trial);
            if e > worst_op.1 {
                worst_op = (op.to_string(), e);
            }
        }
    }
    let mut worst_model = (String::new(), 0.0f64);
    for (label, cfg) in common::model_variants() {
        for trial in 0..3u64 {
            let e = common::model_trial(cfg.clone(), trial, 3);
            if e > worst_model.1 {
                worst_model = (label.clone(), e);
            }
        }
    }
    let ok = worst_op.1 < 1e-4 && worst_model.1 < 1e-3 && t.elapsed().as_secs_f64() < 300.0;
    l.record(
        4,
        "finite-difference gradients",
        ok,
        t,
        format!(
            "{} ops x 100 trials, worst {:e} ({}); {} model graphs, worst {:e} ({})",
            common::OPS.len(),
            worst_op.1,
            worst_op.0,
            common::model_variants().len(),
            worst_model.1,
            worst_model.0
        ),
    );
}

fn crit_accounting(l: &mut Ledger) {
    let t = Instant::now();
    let seed = |axis| account(&ArchConfig::seed(ExchangeSpec::deterministic(axis, 2, 0))).unwrap();
    let (le, ce, se) = (seed(Axis::Layer), seed(Axis::Channel), seed(Axis::SpatialCol));
    let [concat, add, sub] = ["concat", "add", "subtract"].map(|f| account(&ArchConfig::fusion(f)).unwrap());
    let single = le.single_decoder_macs.unwrap();
    let mut ok = le.params == ce.params
        && ce.params == se.params
        && le.params == add.params
        && le.params == sub.params
        && concat.params > le.params;
    ok &= single < le.forward_macs && le.encoder_macs == add.encoder_macs;
    ok &= [le, ce, se].iter().all(|a| a.exchange.parameters_touched == 0 && a.exchange.multiply_accumulates == 0);
    // the static count must agree with what a forward pass executes
    let model = Model::new(ArchConfig::default(), 0).unwrap();
    let x = Tensor::zeros(&[3, 32, 32]);
    let (_, dual_run) = model.infer(&x, &x, InferMode::Siamese, 0.5).unwrap();
    let (_, single_run) = model.infer(&x, &x, InferMode::BranchA, 0.5).unwrap();
    ok &= dual_run == le.forward_macs && single_run == single;
    ok &= model.param_count() == le.params;
    ok &= t.elapsed().as_secs_f64() < 1.0;
    l.record(
        5,
        "parameter and MAC accounting",
        ok,
        t,
        format!(
            "params LE/CE/SE/add/subtract {}/{}/{}/{}/{}, concat {}; MACs dual {} single {} (executed {} / {}); exchange 0 params 0 MACs",
            le.params, ce.params, se.params, add.params, sub.params, concat.params, le.forward_macs, single, dual_run, single_run
        ),
    );
}

fn crit_toy_training(l: &mut Ledger, runner: &Runner) {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let run = runner.run(&cfg).unwrap();
    let data = runner.dataset(&cfg).unwrap();
    let row = run.test_row("acceptance/toy", &data, InferMode::Siamese).unwrap();
    let losses: Vec<f64> = run.log.iter().take(5).map(|e| e.train_loss).collect();
    // least-squares slope of the first five epoch losses
    let xm = (losses.len() as f64 - 1.0) / 2.0;
    let ym = mean(&losses);
    let slope = losses.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum::<f64>()
        / losses.iter().enumerate().map(|(i, _)| (i as f64 - xm).powi(2)).sum::<f64>();
    let ok = row.iou >= 0.80 && run.log.len() <= 30 && run.wall_s < 600.0 && slope < 0.0 && losses[4] < losses[0];
    l.record(
        6,
        "toy training",
        ok,
        t,
        format!(
            "test IoU {:.4} after {} epochs (best epoch {}), training {:.0}s; early losses {:?}, slope {:.4}",
            row.iou,
            run.log.len(),
            run.best_epoch,
            run.wall_s,
            losses.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            slope
        ),
    );
}

fn crit_ablation(l: &mut Ledger, runner: &Runner, writer: &ResultsWriter) {
    let t = Instant::now();
    let rep = exchange_vs_fusion(runner, &ExperimentConfig::default(), &DEFAULT_SEEDS, writer).unwrap();
    let cells: Vec<String> = rep.cells.iter().map(|c| format!("{} {:.4}", c.variant, c.mean_iou)).collect();
    let ok = rep.best_exchange.1 >= rep.best_fusion.1 - 0.02;
    l.record(
        7,
        "exchange vs fusion ablation",
        ok,
        t,
        format!(
            "best exchange {} {:.4} vs best fusion {} {:.4}; {}",
            rep.best_exchange.0,
            rep.best_exchange.1,
            rep.best_fusion.0,
            rep.best_fusion.1,
            cells.join(", ")
        ),
    );
}

fn crit_single_decoder(l: &mut Ledger, runner: &Runner, writer: &ResultsWriter) {
    let t = Instant::now();
    let axes = single_decoder_suite(runner, &ExperimentConfig::default(), &DEFAULT_SEEDS, writer).unwrap();
    let ok = axes.iter().all(|a| a.mean_delta.abs() <= 0.02);
    let macs_ok = axes.iter().flat_map(|a| &a.per_seed).all(|r| r.macs_branch < r.macs_siamese);
    let parts: Vec<String> = axes
        .iter()
        .map(|a| {
            format!(
                "{} siamese {:.4} A {:.4} B {:.4} delta {:+.4}{}",
                a.axis,
                a.mean_iou_siamese,
                a.mean_iou_a,
                a.mean_iou_b,
                a.mean_delta,
                if a.mean_delta.abs() <= 0.02 { "" } else { " (over 0.02)" }
            )
        })
        .collect();
    l.record(
        8,
        "single-decoder inference",
        ok,
        t,
        format!("{}; branch MACs below dual: {macs_ok}", parts.join("; ")),
    );
}

fn crit_random(l: &mut Ledger, runner: &Runner, writer: &ResultsWriter) {
    let t = Instant::now();
    let rep = random_exchange(runner, &ExperimentConfig::default(), &DEFAULT_SEEDS, 0.5, writer).unwrap();
    let ok = rep.eval_deterministic && rep.axes.iter().all(|a| a.diff.abs() <= 0.02);
    let parts: Vec<String> = rep
        .axes
        .iter()
        .map(|a| {
            format!(
                "{} random {:.4} deterministic {:.4} diff {:+.4}",
                a.axis, a.random_mean_iou, a.deterministic_mean_iou, a.diff
            )
        })
        .collect();
    l.record(
        9,
        "random exchange",
        ok,
        t,
        format!("{}; evaluation masks deterministic: {}", parts.join("; "), rep.eval_deterministic),
    );
}

fn crit_shift(l: &mut Ledger, runner: &Runner, writer: &ResultsWriter) {
    let t = Instant::now();
    let rep = shift_robustness(runner, &ExperimentConfig::default(), &SHIFT_GRID, writer).unwrap();
    let at2 = rep.points.iter().find(|p| p.shift_px == 2).expect("N=2 on the grid");
    let ok = at2.retention >= 0.9;
    let pts: Vec<String> = rep
        .points
        .iter()
        .map(|p| format!("N={} IoU {:.4} ({:.1}%)", p.shift_px, p.iou, 100.0 * p.retention))
        .collect();
    l.record(10, "shift robustness", ok, t, format!("{}; {}", pts.join(", "), rep.summary));
}

fn crit_metrics(l: &mut Ledger) {
    let t = Instant::now();
    let s = Confusion::new(50, 30, 10, 10).scores();
    let hand = [(s.oa, 0.8), (s.prec, 50.0 / 60.0), (s.rec, 50.0 / 60.0), (s.f1, 50.0 / 60.0), (s.iou, 50.0 / 70.0)];
    let mut ok = hand.iter().all(|(got, want)| (got - want).abs() <= 1e-4);
    let mut rng = keyed_rng(&[2024, 11]);
    let dir = tempfile::tempdir().unwrap();
    let trials = 200;
    for i in 0..trials {
        let (h, w) = (rng.random_range(1..=40usize), rng.random_range(1..=40usize));
        let rate = rng.random::<f64>();
        let pred = Tensor::from_fn(&[1, h, w], |_| f64::from(u8::from(rng.random_bool(rate))));
        let target = Tensor::from_fn(&[1, h, w], |_| f64::from(u8::from(rng.random_bool(0.3))));
        let mut counted = Confusion::default();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            counted.record(p == 1.0, t == 1.0);
        }
        let map = ErrorMap::render(&pred, &target).unwrap();
        ok &= map.histogram().unwrap() == counted;
        if i % 20 == 0 {
            let path = dir.path().join(format!("{i}.ppm"));
            map.write_ppm(&path).unwrap();
            ok &= ErrorMap::read_ppm(&path).unwrap().histogram().unwrap() == counted;
        }
    }
    l.record(
        11,
        "metrics and error maps",
        ok,
        t,
        format!(
            "oa {:.4} prec {:.4} rec {:.4} f1 {:.4} iou {:.4}; {trials} random maps reconciled",
            s.oa, s.prec, s.rec, s.f1, s.iou
        ),
    );
}

/// The converted segmentation model trains like any SEED(LE) model, and
/// dropping its exchange leaves branches that cannot compare the two times.
fn seg2cd_training(l: &mut Ledger, runner: &Runner) {
    let t = Instant::now();
    let bb = Backbone::default();
    let seg = SegModel::new(bb.clone(), 0).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.name = "seg2cd".into();
    cfg.arch = seg2cd(&bb);
    let mut plain = cfg.clone();
    plain.name = "seg2cd_no_exchange".into();
    plain.arch.exchange = None;
    let with = runner.run(&cfg).unwrap();
    let without = runner.run(&plain).unwrap();
    let data = runner.dataset(&cfg).unwrap();
    let a = with.test_row("seg2cd", &data, InferMode::Siamese).unwrap().iou;
    let b = without.test_row("seg2cd", &data, InferMode::Siamese).unwrap().iou;
    let converted = account(&cfg.arch).unwrap().params;
    let ok = converted == seg.param_count() && a >= 0.75 && a - b >= 0.05;
    l.record(
        12,
        "segmentation-to-change conversion",
        ok,
        t,
        format!(
            "params {} -> {converted}; converted IoU {a:.4}, without exchange {b:.4} (drop {:.4})",
            seg.param_count(),
            a - b
        ),
    );
}

#[test]
fn acceptance() {
    println!();
    let mut l = Ledger { lines: Vec::new() };
    crit_orthogonality(&mut l);
    crit_involution(&mut l);
    crit_information(&mut l);
    crit_gradients(&mut l);
    crit_accounting(&mut l);
    crit_metrics(&mut l);

    let runner = Runner::new().verbose(std::env::var_os("ACCEPTANCE_VERBOSE").is_some());
    let writer = ResultsWriter::new(None);
    assert_eq!(exchange_cell(&ExperimentConfig::default(), Axis::Layer).hash(), ExperimentConfig::default().hash());
    crit_toy_training(&mut l, &runner);
    crit_ablation(&mut l, &runner, &writer);
    crit_single_decoder(&mut l, &runner, &writer);
    crit_random(&mut l, &runner, &writer);
    crit_shift(&mut l, &runner, &writer);
    seg2cd_training(&mut l, &runner);
    println!("[INFO]    {} trainings, {} result rows", runner.trainings(), writer.rows().len());

    l.lines.sort_by_key(|x| x.0);
    println!("---- summary ----");
    for (_, _, line) in &l.lines {
        println!("{line}");
    }
    let failed: Vec<usize> = l.lines.iter().filter(|x| !x.1).map(|x| x.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
