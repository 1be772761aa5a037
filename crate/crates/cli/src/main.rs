use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::json;

use seedcd_core::data::{load_split, save_split, Dataset, Split};
use seedcd_core::error::Error;
use seedcd_core::harness::results::{append_csv, experiment_id, ResultRow};
use seedcd_core::harness::suites::{self, DEFAULT_SEEDS};
use seedcd_core::harness::{evaluate, train_with, verify, ExperimentConfig, ResultsWriter, RunRecord, Runner};
use seedcd_core::metrics::ErrorMap;
use seedcd_core::model::{account, load_checkpoint, seg2cd, Account, InferMode, Model, SegModel};

#[derive(Parser)]
#[command(name = "seedcd", version, about = "Siamese encoder-exchange-decoder change detection")]
struct Cli {
    /// Experiment config (`key = value` lines under `[section]` headers).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed (the dataset seed for gen-data).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for data generation and suite cells.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as .bt tensors plus JSON sidecars.
    GenData,
    /// Train one config; keeps the best-validation checkpoint.
    Train {
        /// Read splits from this directory instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// siamese, branch_a, branch_b or all.
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Run the exchange and information-theory invariant audit.
    Verify,
    /// Exchange variants against fusion heads over several seeds.
    SuiteAblation {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Bernoulli-trained exchange evaluated with deterministic masks.
    SuiteRandom {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
    },
    /// Branch-only against averaged inference.
    SuiteSingleDecoder {
        /// Evaluate this checkpoint only, instead of training LE/CE/SE cells.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Independent trainings with image B shifted right by N pixels.
    SuiteShift {
        #[arg(long, value_delimiter = ',', default_values_t = suites::default_shift_grid())]
        grid: Vec<usize>,
    },
    /// Parameter and MAC counts, without running data.
    Account,
    /// Convert the configured backbone into a SEED change detector.
    Seg2cd {
        /// Also train the converted model and its no-exchange ablation.
        #[arg(long)]
        train: bool,
    },
    /// Write TP/TN/FP/FN color maps for test predictions.
    RenderErrors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "siamese")]
        mode: InferMode,
    },
}

/// Failure of a checked property, as opposed to an operational error.
struct InvariantFailure(String);

enum Failure {
    Core(Error),
    Invariant(InvariantFailure),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_help());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(InvariantFailure(msg))) => {
            eprintln!("FAILED: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e @ (Error::Usage(_) | Error::Config(_)))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    match &cli.config {
        Some(p) if !p.is_file() => Err(Error::Usage(format!("no config file at {}", p.display()))),
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let cfg = load_config(cli)?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(p: &Path) -> Result<(), Error> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    Ok(Dataset {
        train: load_split(dir, Split::Train)?,
        val: load_split(dir, Split::Val)?,
        test: load_split(dir, Split::Test)?,
    })
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Usage(format!("unknown split {other:?}"))),
    }
}

fn parse_modes(s: &str) -> Result<Vec<InferMode>, Error> {
    if s == "all" {
        Ok(InferMode::ALL.to_vec())
    } else {
        s.split(',').map(|m| m.trim().parse()).collect()
    }
}

/// A run directory written by `train` or the suites, or a bare checkpoint.
fn load_model(dir: &Path) -> Result<(Model, Option<RunRecord>), Error> {
    if dir.join("config.cfg").exists() {
        let r = RunRecord::load(dir)?;
        Ok((r.model.clone(), Some(r)))
    } else {
        Ok((load_checkpoint(dir)?.model, None))
    }
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{:<40} {:<6} {:<9} iou {:.4} f1 {:.4} oa {:.4} params {} macs {}",
            r.experiment, r.split, r.mode, r.iou, r.f1, r.oa, r.params, r.macs
        );
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenData => gen_data(cli),
        Command::Train { data } => train_cmd(cli, data.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            mode,
        } => eval_cmd(cli, checkpoint, data.as_deref(), split, mode),
        Command::Verify => verify_cmd(cli),
        Command::SuiteAblation { seeds } => suite_ablation(cli, seeds),
        Command::SuiteRandom { seeds, p } => suite_random(cli, seeds, *p),
        Command::SuiteSingleDecoder { checkpoint, seeds } => {
            suite_single_decoder(cli, checkpoint.as_deref(), seeds)
        }
        Command::SuiteShift { grid } => suite_shift(cli, grid),
        Command::Account => account_cmd(cli),
        Command::Seg2cd { train } => seg2cd_cmd(cli, *train),
        Command::RenderErrors {
            checkpoint,
            count,
            mode,
        } => render_errors(cli, checkpoint, *count, *mode),
    }
}

fn gen_data(cli: &Cli) -> Outcome {
    let mut cfg = load_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
    }
    cfg.data.validate()?;
    let data = Dataset::generate(&cfg.data, cfg.shift_px)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        save_split(&cli.out, split, data.split(split))?;
    }
    println!(
        "wrote {}/{}/{} samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cli.out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, data_dir: Option<&Path>) -> Outcome {
    let cfg = base_config(cli)?;
    cfg.validate()?;
    let data = match data_dir {
        Some(d) => load_dataset(d)?,
        None => Dataset::generate(&cfg.data, cfg.shift_px)?,
    };
    let out = train_with(&cfg, &data, |e| {
        eprintln!(
            "epoch {:>2} loss {:.4} val iou {:.4} f1 {:.4} ({:.1}s)",
            e.epoch, e.train_loss, e.val.iou, e.val.f1, e.wall_s
        );
    })?;
    let record = RunRecord {
        hash: cfg.hash(),
        config: cfg.clone(),
        model: out.model,
        best_epoch: out.best_epoch,
        best_val_iou: out.best_val_iou,
        log: out.log,
        steps: out.steps,
        wall_s: out.wall_s,
    };
    create_dir(&cli.out)?;
    record.save(&cli.out.join("checkpoint"))?;
    let id = experiment_id("train", &cfg.name, cfg.seed);
    let mut rows = record.val_rows(&id)?;
    for &mode in &cfg.eval_modes {
        rows.push(record.test_row(&id, &data, mode)?);
    }
    append_csv(&cli.out.join("results.csv"), &rows)?;
    print_rows(&rows[rows.len() - cfg.eval_modes.len()..]);
    println!(
        "best epoch {} (val iou {:.4}), config hash {}, {:.1}s",
        record.best_epoch, record.best_val_iou, record.hash, record.wall_s
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, ckpt: &Path, data_dir: Option<&Path>, split: &str, modes: &str) -> Outcome {
    let split = parse_split(split)?;
    let modes = parse_modes(modes)?;
    let (model, record) = load_model(ckpt)?;
    let cfg = match (&record, &cli.config) {
        (_, Some(_)) | (None, None) => base_config(cli)?,
        (Some(r), None) => r.config.clone(),
    };
    let data = match data_dir {
        Some(d) => load_dataset(d)?,
        None => Dataset::generate(&cfg.data, cfg.shift_px)?,
    };
    let hash = record.as_ref().map_or_else(|| cfg.hash(), |r| r.hash.clone());
    let epoch = record.as_ref().map_or(0, |r| r.best_epoch);
    let id = experiment_id("eval", &model.config().label(), cfg.seed);
    let mut rows = Vec::new();
    for mode in modes {
        let ev = evaluate(&model, data.split(split), mode)?;
        let mut row = ResultRow {
            experiment: id.clone(),
            config_hash: hash.clone(),
            split: split.name().into(),
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
    }
    create_dir(&cli.out)?;
    append_csv(&cli.out.join("eval.csv"), &rows)?;
    print_rows(&rows);
    Ok(())
}

fn verify_cmd(cli: &Cli) -> Outcome {
    let report = verify::verify(cli.seed.unwrap_or(0));
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    create_dir(&cli.out)?;
    write_json(&cli.out.join("verify.json"), &report)?;
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Invariant(InvariantFailure(format!("verify: {}", failed.join(", ")))))
    }
}

/// Runner caching trained cells under `<out>/runs`, and a CSV writer for `file`.
fn suite_io(cli: &Cli, file: &str) -> Result<(Runner, ResultsWriter), Error> {
    create_dir(&cli.out)?;
    let csv = cli.out.join(file);
    if csv.exists() {
        fs::remove_file(&csv).map_err(|e| Error::Io { path: csv.clone(), source: e })?;
    }
    Ok((
        Runner::new().with_store(cli.out.join("runs")).verbose(true),
        ResultsWriter::new(Some(&csv)),
    ))
}

fn suite_ablation(cli: &Cli, seeds: &[u64]) -> Outcome {
    let base = base_config(cli)?;
    let (runner, writer) = suite_io(cli, "ablation.csv")?;
    let rep = suites::exchange_vs_fusion(&runner, &base, seeds, &writer)?;
    write_json(&cli.out.join("ablation.json"), &rep)?;
    println!("{:<20} {:>8} {:>10} {:>12}  per-seed IoU", "variant", "mean IoU", "params", "MACs");
    for c in &rep.cells {
        let per: Vec<String> = c.iou.iter().map(|v| format!("{v:.4}")).collect();
        println!("{:<20} {:>8.4} {:>10} {:>12}  {}", c.variant, c.mean_iou, c.params, c.macs, per.join(" "));
    }
    println!(
        "best exchange {} {:.4}, best fusion {} {:.4}",
        rep.best_exchange.0, rep.best_exchange.1, rep.best_fusion.0, rep.best_fusion.1
    );
    if !rep.params_match_account {
        return Err(Failure::Invariant(InvariantFailure("row params differ from account()".into())));
    }
    Ok(())
}

fn suite_random(cli: &Cli, seeds: &[u64], p: f64) -> Outcome {
    let base = base_config(cli)?;
    let (runner, writer) = suite_io(cli, "random.csv")?;
    let rep = suites::random_exchange(&runner, &base, seeds, p, &writer)?;
    write_json(&cli.out.join("random.json"), &rep)?;
    for a in &rep.axes {
        println!(
            "{:<3} random {:.4}  deterministic {:.4}  diff {:+.4}",
            a.axis, a.random_mean_iou, a.deterministic_mean_iou, a.diff
        );
    }
    if !rep.eval_deterministic {
        return Err(Failure::Invariant(InvariantFailure("evaluation masks were not deterministic".into())));
    }
    Ok(())
}

fn suite_single_decoder(cli: &Cli, ckpt: Option<&Path>, seeds: &[u64]) -> Outcome {
    let Some(dir) = ckpt else {
        let base = base_config(cli)?;
        let (runner, writer) = suite_io(cli, "single_decoder.csv")?;
        let axes = suites::single_decoder_suite(&runner, &base, seeds, &writer)?;
        write_json(&cli.out.join("single_decoder.json"), &axes)?;
        for a in &axes {
            println!(
                "{:<3} A {:.4}  B {:.4}  siamese {:.4}  delta {:+.4}",
                a.axis, a.mean_iou_a, a.mean_iou_b, a.mean_iou_siamese, a.mean_delta
            );
        }
        return Ok(());
    };
    let (model, record) = load_model(dir)?;
    let cfg = record.as_ref().map_or_else(|| base_config(cli), |r| Ok(r.config.clone()))?;
    let data = Dataset::generate(&cfg.data, cfg.shift_px)?;
    let hash = record.as_ref().map_or_else(|| cfg.hash(), |r| r.hash.clone());
    let epoch = record.as_ref().map_or(0, |r| r.best_epoch);
    let id = experiment_id("single_decoder", &model.config().label(), cfg.seed);
    let rep = suites::single_decoder(&model, &data.test, &id, &hash, epoch)?;
    create_dir(&cli.out)?;
    append_csv(&cli.out.join("single_decoder.csv"), &rep.rows)?;
    print_rows(&rep.rows);
    println!("delta {:+.4}", rep.delta);
    Ok(())
}

fn suite_shift(cli: &Cli, grid: &[usize]) -> Outcome {
    let base = base_config(cli)?;
    let (runner, writer) = suite_io(cli, "shift.csv")?;
    let rep = suites::shift_robustness(&runner, &base, grid, &writer)?;
    write_json(&cli.out.join("shift.json"), &rep)?;
    println!("{:>3} {:>8} {:>10}", "N", "IoU", "retention");
    for p in &rep.points {
        println!("{:>3} {:>8.4} {:>9.1}%", p.shift_px, p.iou, 100.0 * p.retention);
    }
    println!("{}", rep.summary);
    Ok(())
}

fn account_line(label: &str, a: &Account) {
    println!(
        "{:<24} params {:>8}  encoder {:>9}  neck {:>9}  decoder {:>9}  forward {:>9}  single-decoder {}",
        label,
        a.params,
        a.encoder_macs,
        a.neck_macs,
        a.decoder_macs,
        a.forward_macs,
        a.single_decoder_macs.map_or("-".to_string(), |m| m.to_string())
    );
}

fn account_cmd(cli: &Cli) -> Outcome {
    let cfg = base_config(cli)?;
    let a = account(&cfg.arch)?;
    account_line(&cfg.arch.label(), &a);
    if let Some(single) = a.single_decoder_macs {
        println!("dual decoder:   params {} MACs {}", a.params, a.forward_macs);
        println!("single decoder: params {} MACs {}", a.params, single);
    }
    println!(
        "exchange: params {} MACs {}",
        a.exchange.parameters_touched, a.exchange.multiply_accumulates
    );
    Ok(())
}

fn seg2cd_cmd(cli: &Cli, train: bool) -> Outcome {
    let base = base_config(cli)?;
    let seg = SegModel::new(base.arch.backbone.clone(), base.seed)?;
    let arch = seg2cd(&base.arch.backbone);
    let converted = account(&arch)?;
    println!("segmentation model params {}", seg.param_count());
    println!("{} params {}", arch.label(), converted.params);
    let mut cfg = base.clone();
    cfg.arch = arch;
    cfg.name = "seg2cd".into();
    create_dir(&cli.out)?;
    let path = cli.out.join("seg2cd.cfg");
    fs::write(&path, cfg.canonical()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!("wrote {}", path.display());
    if seg.param_count() != converted.params {
        return Err(Failure::Invariant(InvariantFailure("conversion changed the parameter count".into())));
    }
    if train {
        let runner = Runner::new().with_store(cli.out.join("runs")).verbose(true);
        let mut plain = cfg.clone();
        plain.arch.exchange = None;
        let with = runner.run(&cfg)?;
        let without = runner.run(&plain)?;
        let data = runner.dataset(&cfg)?;
        let iou = |r: &RunRecord| evaluate(&r.model, &data.test, InferMode::Siamese).map(|e| e.scores.iou);
        let (a, b) = (iou(&with)?, iou(&without)?);
        println!("{} test IoU {a:.4}", with.config.arch.label());
        println!("{} test IoU {b:.4}", without.config.arch.label());
        write_json(&cli.out.join("seg2cd.json"), &json!({ "exchange_iou": a, "no_exchange_iou": b }))?;
    }
    Ok(())
}

fn render_errors(cli: &Cli, ckpt: &Path, count: usize, mode: InferMode) -> Outcome {
    let (model, record) = load_model(ckpt)?;
    let cfg = record.as_ref().map_or_else(|| base_config(cli), |r| Ok(r.config.clone()))?;
    let data = Dataset::generate(&cfg.data, cfg.shift_px)?;
    let dir = cli.out.join("errors");
    create_dir(&dir)?;
    let mut mismatches = 0;
    for (i, s) in data.test.iter().take(count).enumerate() {
        let (pred, _) = model.infer(&s.image_a, &s.image_b, mode, 0.5)?;
        let map = ErrorMap::render(&pred, &s.mask)?;
        map.write_ppm(&dir.join(format!("{i:05}.ppm")))?;
        let counts = seedcd_core::metrics::Confusion::from_maps(&pred, &s.mask)?;
        let hist = map.histogram()?;
        if hist != counts {
            mismatches += 1;
        }
        println!(
            "{i:05} tp {} tn {} fp {} fn {}",
            hist.tp, hist.tn, hist.fp, hist.fn_
        );
    }
    println!("wrote {} maps to {}", count.min(data.test.len()), dir.display());
    if mismatches > 0 {
        return Err(Failure::Invariant(InvariantFailure(format!(
            "{mismatches} maps disagree with their confusion counts"
        ))));
    }
    Ok(())
}
