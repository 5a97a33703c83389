//! `lsv`: gradient checks, invariant suite, synthetic experiments, mask
//! metrics and benchmarks for the `lovasz` crate.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use lovasz::harness::{
    self, bias_sweep, generate_circles, train_linear, LossKind, OptimizerKind, SweepLoss, SyntheticConfig,
    TrainConfig,
};
use lovasz::io::{write_atomic, FloatField, PgmImage, Table};
use lovasz::metrics::{self, ConfusionAccumulator};
use lovasz::optim::toy_trajectories;
use lovasz::verify::{self, GradLoss};

/// Invalid flag values that clap cannot catch on its own; exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "lsv", version, about = "Lovász-extension Jaccard surrogates: checks, experiments and metrics")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for output files (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of a loss layer's gradient.
    Gradcheck(GradcheckArgs),
    /// Synthetic circle experiment: bias sweep or linear training.
    Toy(ToyArgs),
    /// Per-class IoU, Dice, image- and dataset-mIoU of PGM mask directories.
    Metrics(MetricsArgs),
    /// Runtime of the Jaccard extension gradient over powers of two.
    Bench(BenchArgs),
    /// Gradient descent, momentum and prox trajectories on max(0, ν x₁, x₂).
    ProxDemo(ProxDemoArgs),
    /// Runs the invariant suite.
    Props,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum GradLossArg {
    LovaszHinge,
    LovaszSoftmax,
    CrossEntropy,
    Hinge,
    RahmanWang,
}

impl From<GradLossArg> for GradLoss {
    fn from(l: GradLossArg) -> Self {
        match l {
            GradLossArg::LovaszHinge => GradLoss::LovaszHinge,
            GradLossArg::LovaszSoftmax => GradLoss::LovaszSoftmax,
            GradLossArg::CrossEntropy => GradLoss::CrossEntropy,
            GradLossArg::Hinge => GradLoss::Hinge,
            GradLossArg::RahmanWang => GradLoss::RahmanWang,
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    loss: GradLossArg,
    /// Pixels per test point.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    p: u32,
    /// Classes for the multiclass layers.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(2..))]
    classes: u32,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    trials: u32,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum LossArg {
    CrossEntropy,
    Hinge,
    LovaszHinge,
    LovaszSoftmaxAll,
    LovaszSoftmaxPresent,
    RahmanWang,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::CrossEntropy => LossKind::CrossEntropy,
            LossArg::Hinge => LossKind::Hinge,
            LossArg::LovaszHinge => LossKind::LovaszHinge,
            LossArg::LovaszSoftmaxAll => LossKind::LovaszSoftmaxAll,
            LossArg::LovaszSoftmaxPresent => LossKind::LovaszSoftmaxPresent,
            LossArg::RahmanWang => LossKind::RahmanWang,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    Sgd,
    Momentum,
    Prox,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Momentum => OptimizerKind::Momentum,
            OptimizerArg::Prox => OptimizerKind::Prox,
        }
    }
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("mode").required(true).args(["bias_sweep", "train"])))]
struct ToyArgs {
    /// Exhaustive bias search of the thresholding classifier.
    #[arg(long)]
    bias_sweep: bool,
    /// Train the linear pixel classifier.
    #[arg(long)]
    train: bool,
    /// Exit 1 unless the Lovász hinge minimum lies within one grid step of
    /// the Jaccard minimum (bias sweep only).
    #[arg(long = "assert", conflicts_with = "train")]
    check: bool,
    /// Also write the generated masks (PGM) and features (LSV1).
    #[arg(long)]
    dump_data: bool,

    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    n_images: u32,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    height: u32,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    width: u32,
    /// Foreground/background feature mean ±gap.
    #[arg(long, default_value_t = 0.5)]
    gap: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    bias_min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    bias_max: f64,
    #[arg(long, default_value_t = 0.01)]
    bias_step: f64,

    #[arg(long, value_enum, default_value_t = LossArg::LovaszHinge)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Momentum)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: u32,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 10.0)]
    prox_lambda: f64,
    #[arg(long)]
    equibatch: bool,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    eval_every: u32,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    pred_dir: PathBuf,
    /// Number of classes; labels must lie in 0..classes.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=256))]
    classes: u32,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1 << 10)]
    p_min: usize,
    #[arg(long, default_value_t = 1 << 20)]
    p_max: usize,
    /// Timing rounds; each size reports its median round.
    #[arg(long, default_value_t = verify::BENCH_ROUNDS as u32, value_parser = clap::value_parser!(u32).range(1..))]
    rounds: u32,
    /// Exit 1 unless the log-log slope lies in [1.0, 1.15].
    #[arg(long = "assert")]
    check: bool,
}

#[derive(Args, Debug)]
struct ProxDemoArgs {
    #[arg(long, default_value_t = 1.3)]
    nu: f64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    x1: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    x2: f64,
    /// Exit 1 unless prox is monotone and momentum increases the objective at
    /// least once.
    #[arg(long = "assert")]
    check: bool,
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("LSV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("LSV_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn save(table: &Table, path: &Path) -> anyhow::Result<()> {
    table
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn positive(name: &str, v: f64) -> anyhow::Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be a positive number, got {v}")))
    }
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> anyhow::Result<bool> {
    positive("tol", a.tol)?;
    let loss = GradLoss::from(a.loss);
    let errs = verify::gradcheck(loss, a.p as usize, a.classes as usize, a.trials as usize, cli.seed)?;
    let mut table = Table::new(&["trial", "max_abs_err"]);
    for (k, e) in errs.iter().enumerate() {
        table.push([k.to_string(), e.to_string()]);
    }
    save(&table, &cli.out_dir.join(format!("gradcheck_{loss}.csv")))?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let failing = errs.iter().filter(|&&e| !(e < a.tol)).count();
    println!(
        "gradcheck {loss}: {} trials, max error {worst:.3e}, {failing} at or above tol {:e}",
        errs.len(),
        a.tol
    );
    Ok(failing == 0)
}

fn cmd_toy(cli: &Cli, a: &ToyArgs) -> anyhow::Result<bool> {
    positive("noise", a.noise)?;
    positive("bias-step", a.bias_step)?;
    if !(a.bias_min <= a.bias_max) {
        return Err(usage("--bias-min must not exceed --bias-max"));
    }
    let cfg = SyntheticConfig {
        n_images: a.n_images as usize,
        height: a.height as usize,
        width: a.width as usize,
        feature_mean_gap: a.gap,
        noise_std: a.noise,
        seed: cli.seed,
        bias_grid: harness::bias_grid(a.bias_min, a.bias_max, a.bias_step),
    };
    let data = generate_circles(&cfg)?;

    if a.dump_data {
        let dir = cli.out_dir.join("data");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (k, img) in data.images.iter().enumerate() {
            let mask = dir.join(format!("image_{k:03}.pgm"));
            PgmImage::from_labels(img.width, img.height, &img.labels)?
                .save(&mask)
                .with_context(|| format!("writing {}", mask.display()))?;
            let feats = dir.join(format!("image_{k:03}.lsv"));
            FloatField::new(img.height as u32, img.width as u32, 1, img.features.iter().copied().collect())?
                .save(&feats)
                .with_context(|| format!("writing {}", feats.display()))?;
        }
    }

    if a.bias_sweep {
        let table = bias_sweep(&data, &SweepLoss::ALL, &cfg.bias_grid)?;
        let path = cli.out_dir.join("bias_sweep.csv");
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_atomic(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
        let jac = table.argmin(SweepLoss::Jaccard).expect("grid is nonempty");
        for loss in SweepLoss::ALL {
            let b = table.argmin(loss).expect("grid is nonempty");
            println!(
                "{:>14}: argmin bias {b:+.2} ({:+} steps from jaccard)",
                loss.name(),
                ((b - jac) / a.bias_step).round() as i64
            );
        }
        if a.check {
            let lh = table.argmin(SweepLoss::LovaszHinge).expect("grid is nonempty");
            let ok = (lh - jac).abs() <= a.bias_step * (1.0 + 1e-9);
            println!("assert lovasz_hinge within one step of jaccard: {}", if ok { "PASS" } else { "FAIL" });
            return Ok(ok);
        }
        return Ok(true);
    }

    let train = TrainConfig {
        loss: a.loss.into(),
        optimizer: a.optimizer.into(),
        batch_size: a.batch_size as usize,
        epochs: a.epochs as usize,
        lr_base: a.lr,
        momentum: a.momentum,
        prox_lambda: a.prox_lambda,
        equibatch: a.equibatch,
        eval_every: a.eval_every as usize,
        seed: cli.seed,
        ..TrainConfig::default()
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    let result = train_linear(&data, &train)?;
    let name = train.loss.name();
    let path = cli.out_dir.join(format!("train_{name}.csv"));
    let mut buf = Vec::new();
    result.write_csv(&mut buf)?;
    write_atomic(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
    let report = cli.out_dir.join(format!("train_{name}_report.csv"));
    write_atomic(&report, result.final_report.to_csv_string().as_bytes())
        .with_context(|| format!("writing {}", report.display()))?;
    let last = result.last();
    println!(
        "{name}: step {} loss {:.4} image-mIoU {:.4} dataset-mIoU {:.4}",
        last.step, last.loss, last.image_miou, last.dataset_miou
    );
    Ok(true)
}

fn pgm_names(dir: &Path) -> anyhow::Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

fn load_mask(path: &Path, classes: usize) -> anyhow::Result<PgmImage> {
    let img = PgmImage::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(&bad) = img.data.iter().find(|&&v| v as usize >= classes) {
        bail!("{}: label {bad} outside 0..{classes}", path.display());
    }
    Ok(img)
}

fn cmd_metrics(cli: &Cli, a: &MetricsArgs) -> anyhow::Result<bool> {
    for dir in [&a.gt_dir, &a.pred_dir] {
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
    }
    let gt_names = pgm_names(&a.gt_dir)?;
    let pred_names = pgm_names(&a.pred_dir)?;
    let only_gt: Vec<&String> = gt_names.difference(&pred_names).collect();
    let only_pred: Vec<&String> = pred_names.difference(&gt_names).collect();
    if !only_gt.is_empty() || !only_pred.is_empty() {
        bail!(
            "mask filenames differ: only in {}: {only_gt:?}; only in {}: {only_pred:?}",
            a.gt_dir.display(),
            a.pred_dir.display()
        );
    }
    if gt_names.is_empty() {
        bail!("no .pgm masks in {} and {}", a.gt_dir.display(), a.pred_dir.display());
    }

    let classes = a.classes as usize;
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for name in &gt_names {
        let g = load_mask(&a.gt_dir.join(name), classes)?;
        let p = load_mask(&a.pred_dir.join(name), classes)?;
        if (g.width, g.height) != (p.width, p.height) {
            bail!(
                "{name}: ground truth is {}x{} but prediction is {}x{}",
                g.width,
                g.height,
                p.width,
                p.height
            );
        }
        gts.push(g.labels());
        preds.push(p.labels());
    }

    let mut acc = ConfusionAccumulator::new(classes);
    for (g, p) in gts.iter().zip(&preds) {
        acc.accumulate(g, p)?;
    }
    let report = metrics::dataset_miou(&acc);
    let all: Vec<usize> = (0..classes).collect();
    let image_iou = metrics::image_class_iou(&gts, &preds, &all)?;
    let image_miou = metrics::image_miou(&gts, &preds, &all)?;

    let path = cli.out_dir.join("metrics.csv");
    write_atomic(&path, report.to_csv_string().as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    let mut per_class = Table::new(&["class", "dice", "image_iou"]);
    for (row, img) in report.per_class.iter().zip(&image_iou) {
        per_class.push([
            row.class.to_string(),
            format!("{:.6}", metrics::dice_from_jaccard(row.iou)),
            format!("{img:.6}"),
        ]);
    }
    save(&per_class, &cli.out_dir.join("metrics_per_class.csv"))?;

    println!("{} mask pairs, {} classes", gts.len(), classes);
    println!("class,iou,dice,image_iou");
    for (row, img) in report.per_class.iter().zip(&image_iou) {
        println!(
            "{},{:.6},{:.6},{img:.6}",
            row.class,
            row.iou,
            metrics::dice_from_jaccard(row.iou)
        );
    }
    println!("image_miou,{image_miou:.6}");
    println!("dataset_miou,{:.6}", report.mean_iou);
    Ok(true)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> anyhow::Result<bool> {
    if !a.p_min.is_power_of_two() || !a.p_max.is_power_of_two() || a.p_min > a.p_max {
        return Err(usage(format!(
            "--p-min and --p-max must be powers of two with p-min ≤ p-max, got {} and {}",
            a.p_min, a.p_max
        )));
    }
    let ps: Vec<usize> = std::iter::successors(Some(a.p_min), |&p| p.checked_mul(2))
        .take_while(|&p| p <= a.p_max)
        .collect();
    let rows = verify::time_jaccard_grad(&ps, a.rounds as usize, cli.seed)?;
    let mut table = Table::new(&["p", "median_ns"]);
    for (p, t) in &rows {
        table.push([p.to_string(), t.to_string()]);
    }
    save(&table, &cli.out_dir.join("bench.csv"))?;
    for (p, t) in &rows {
        println!("p={p:>8}  median {t:>14.0} ns");
    }
    match verify::loglog_slope(&rows) {
        Some(slope) => {
            println!("log-log slope {slope:.4}");
            if a.check {
                let ok = (1.0..=1.15).contains(&slope);
                println!("assert slope in [1.0, 1.15]: {}", if ok { "PASS" } else { "FAIL" });
                return Ok(ok);
            }
        }
        None => {
            println!("log-log slope n/a (one size)");
            if a.check {
                return Err(usage("--assert needs at least two sizes"));
            }
        }
    }
    Ok(true)
}

fn cmd_prox_demo(cli: &Cli, a: &ProxDemoArgs) -> anyhow::Result<bool> {
    positive("nu", a.nu)?;
    positive("eta", a.eta)?;
    if !(0.0..1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha must lie in [0, 1), got {}", a.alpha)));
    }
    let runs = toy_trajectories(a.nu, a.eta, a.alpha, a.steps, [a.x1, a.x2])?;
    let mut table = Table::new(&["method", "step", "x1", "x2", "objective"]);
    for run in &runs {
        for pt in run.points.iter().filter(|pt| pt.step >= 1) {
            table.push([
                run.method.name().to_string(),
                pt.step.to_string(),
                pt.x[0].to_string(),
                pt.x[1].to_string(),
                pt.objective.to_string(),
            ]);
        }
    }
    save(&table, &cli.out_dir.join("prox_demo.csv"))?;
    for run in &runs {
        let last = run.points.last().expect("start point is always present");
        println!(
            "{:>16}: final objective {:.6}, increases {}, monotone {}",
            run.method.name(),
            last.objective,
            run.increases(),
            run.is_monotone()
        );
    }
    if a.check {
        let find = |name: &str| runs.iter().find(|r| r.method.name() == name).expect("all methods run");
        let ok = find("prox").is_monotone() && find("momentum").increases() >= 1;
        println!(
            "assert prox monotone and momentum increases at least once: {}",
            if ok { "PASS" } else { "FAIL" }
        );
        return Ok(ok);
    }
    Ok(true)
}

fn cmd_props(cli: &Cli) -> anyhow::Result<bool> {
    let checks = verify::run_suite(cli.seed)?;
    let mut table = Table::new(&["check", "passed", "detail"]);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        table.push([c.name.to_string(), c.passed.to_string(), c.detail.clone()]);
    }
    save(&table, &cli.out_dir.join("props.csv"))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    configure_threads()?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    if !cli.out_dir.is_dir() {
        return Err(anyhow!("{} is not a directory", cli.out_dir.display()));
    }
    match &cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Toy(a) => cmd_toy(cli, a),
        Command::Metrics(a) => cmd_metrics(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::ProxDemo(a) => cmd_prox_demo(cli, a),
        Command::Props => cmd_props(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
