use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riscore::bnrl::check::run_loss_check;
use riscore::bnrl::{alpha_grid, monotonicity_sweep, verify_monotonicity, BnrlParams, MonotonicityReport};
use riscore::cocoio::{
    aggregate_missing, aggregates_to_csv, missing_annotation_stats, parse_annotations, sample_kshot, AnnotationSet,
    ClassSplit,
};
use riscore::embedding::{load_embeddings, SimilarityParams, DEFAULT_TAU};
use riscore::eval::{coco_map, compare_reports, ApReport, EvalParams};
use riscore::fmt::g17;
use riscore::pipeline::{sweep_c, sweep_to_csv, unit_grid};
use riscore::plot::LineChart;
use riscore::rescore::{ClassMap, FusionParams, PreparedRescore, DEFAULT_FUSION_WEIGHT};
use riscore::results::{apply_rescore, detections, read_results, write_results};
use riscore::types::ClassId;

use crate::config::{List, Settings};
use crate::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "riscore",
    version,
    about = "Detection re-scoring, loss checks and few-shot COCO tooling"
)]
pub struct Cli {
    /// TOML file with default option values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse detector scores with image-text similarity.
    Rescore(RescoreArgs),
    /// AP@[.5:.95], AP50 and AP75 against COCO ground truth.
    Eval(EvalArgs),
    /// Evaluate re-scoring over a grid of fusion weights.
    SweepC(SweepArgs),
    /// Check that the mirror sum grows with the noise scale.
    Monotonicity(MonotonicityArgs),
    /// Sample k-shot subsets.
    Kshot(KshotArgs),
    /// Count annotations dropped by k-shot subsets.
    Missing(MissingArgs),
    /// Check loss reductions and the analytic gradient.
    LossCheck(LossCheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Rescore(_) => "rescore",
            Command::Eval(_) => "eval",
            Command::SweepC(_) => "sweep-c",
            Command::Monotonicity(_) => "monotonicity",
            Command::Kshot(_) => "kshot",
            Command::Missing(_) => "missing",
            Command::LossCheck(_) => "loss-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    InvariantFailed,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// COCO annotation file; its categories map class ids to names.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// COCO results file.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Detection embeddings keyed by det_id.
    #[arg(long)]
    det_embs: Option<PathBuf>,
    /// Class text embeddings keyed by class name.
    #[arg(long)]
    text_embs: Option<PathBuf>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Leave base-class scores untouched.
    #[arg(long)]
    skip_base: bool,
    /// Base class ids for --skip-base; defaults to categories marked "base".
    #[arg(long, value_name = "IDS")]
    base_classes: Option<List<ClassId>>,
}

#[derive(Debug, Args)]
pub struct RescoreArgs {
    #[command(flatten)]
    inputs: EmbeddingArgs,
    /// Weight of the detector score.
    #[arg(long)]
    c: Option<f64>,
    /// Output results file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    results: Option<PathBuf>,
    /// Second results file; writes its report and the per-class differences.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Keep at most this many detections per image and class.
    #[arg(long)]
    max_dets: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    inputs: EmbeddingArgs,
    /// Comma-separated weights; overrides --points.
    #[arg(long, value_name = "CS")]
    grid: Option<List<f64>>,
    /// Evenly spaced weights from 0 to 1.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    max_dets: Option<usize>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional SVG line chart.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonotonicityArgs {
    /// Zero-sum noise vector; without it a randomized sweep runs.
    #[arg(long, value_name = "XS", allow_hyphen_values = true)]
    noise: Option<List<f64>>,
    /// Explicit alpha grid for --noise.
    #[arg(long, value_name = "ALPHAS")]
    alphas: Option<List<f64>>,
    /// Grid points per vector.
    #[arg(long)]
    points: Option<usize>,
    /// Fraction of the valid alpha range the grid spans.
    #[arg(long)]
    fraction: Option<f64>,
    /// Random noise vectors.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    min_classes: Option<usize>,
    #[arg(long)]
    max_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KshotArgs {
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Class ids to sample; defaults to novel categories, or all of them.
    #[arg(long, value_name = "IDS")]
    classes: Option<List<ClassId>>,
    /// One subset per seed.
    #[arg(long, value_name = "SEEDS")]
    seeds: Option<List<u64>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MissingArgs {
    /// The full annotation file.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Subset files, e.g. written by `kshot`.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    subsets: Vec<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Optional SVG of per-class means and intervals.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    omega_bg: Option<f64>,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let cfg = Settings::load(cli.config.as_deref(), cli.command.name())?;
    match cli.command {
        Command::Rescore(a) => rescore(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::SweepC(a) => sweep(&cfg, a),
        Command::Monotonicity(a) => monotonicity(&cfg, a),
        Command::Kshot(a) => kshot(&cfg, a),
        Command::Missing(a) => missing(&cfg, a),
        Command::LossCheck(a) => loss_check(&cfg, a),
    }
}

fn make_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    make_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn class_map(gt: &AnnotationSet) -> Result<ClassMap> {
    Ok(ClassMap::new(
        gt.categories.iter().map(|c| (c.id, c.name.clone())).collect(),
    )?)
}

struct Loaded {
    gt: AnnotationSet,
    records: Vec<riscore::results::ResultRecord>,
    prepared: PreparedRescore,
    base: Vec<ClassId>,
    skip_base: bool,
}

fn load_inputs(cfg: &Settings, a: EmbeddingArgs) -> Result<Loaded> {
    let gt = parse_annotations(cfg.require(a.annotations, "annotations")?)?;
    let records = read_results(cfg.require(a.results, "results")?)?;
    let det_embs = load_embeddings(cfg.require(a.det_embs, "det-embs")?)?;
    let text_embs = load_embeddings(cfg.require(a.text_embs, "text-embs")?)?;
    let sim = SimilarityParams::new(cfg.pick_or(a.tau, "tau", DEFAULT_TAU)?)?;
    let skip_base = cfg.switch(a.skip_base, "skip-base")?;
    let base = match cfg.pick(a.base_classes, "base-classes")? {
        Some(List(ids)) => ids,
        None => gt
            .categories
            .iter()
            .filter(|c| c.split == Some(ClassSplit::Base))
            .map(|c| c.id)
            .collect(),
    };
    if skip_base && base.is_empty() {
        return Err(UsageError("--skip-base needs --base-classes or categories marked \"base\"".into()).into());
    }
    let prepared = PreparedRescore::new(&detections(&records), &det_embs, &text_embs, &class_map(&gt)?, &sim)?;
    Ok(Loaded {
        gt,
        records,
        prepared,
        base,
        skip_base,
    })
}

fn fusion(l: &Loaded, c: f64) -> Result<FusionParams> {
    Ok(if l.skip_base {
        FusionParams::skipping_base(c, l.base.iter().copied())?
    } else {
        FusionParams::new(c)?
    })
}

fn rescore(cfg: &Settings, a: RescoreArgs) -> Result<Outcome> {
    let c = cfg.pick_or(a.c, "c", DEFAULT_FUSION_WEIGHT)?;
    let out_path: PathBuf = cfg.require(a.out, "out")?;
    let loaded = load_inputs(cfg, a.inputs)?;
    let out = loaded.prepared.apply(&fusion(&loaded, c)?)?;
    make_parent(&out_path)?;
    write_results(&apply_rescore(&loaded.records, &out)?, &out_path)?;
    println!(
        "rescored {} detections, passed through {}",
        out.rescored, out.passed_through
    );
    Ok(Outcome::Ok)
}

fn summary_line(label: &str, r: &ApReport) {
    println!(
        "{label} AP {} AP50 {} AP75 {}",
        g17(r.overall.ap),
        g17(r.overall.ap50),
        g17(r.overall.ap75)
    );
    for (name, s) in [("base", &r.base), ("novel", &r.novel)] {
        if let Some(s) = s {
            println!("{label} {name} AP {} AP50 {}", g17(s.ap), g17(s.ap50));
        }
    }
}

fn eval(cfg: &Settings, a: EvalArgs) -> Result<Outcome> {
    let gt = parse_annotations(cfg.require(a.annotations, "annotations")?)?;
    let results: PathBuf = cfg.require(a.results, "results")?;
    let compare: Option<PathBuf> = cfg.pick(a.compare, "compare")?;
    let out_dir: PathBuf = cfg.require(a.out_dir, "out-dir")?;
    let params = EvalParams {
        max_dets: cfg.pick(a.max_dets, "max-dets")?,
    };
    let partition = gt.partition();
    let report = coco_map(&detections(&read_results(results)?), &gt, partition.as_ref(), &params)?;
    write(&out_dir.join("ap_report.json"), &(report.to_json() + "\n"))?;
    write(&out_dir.join("ap_report.csv"), &report.to_csv())?;
    summary_line("a", &report);
    if let Some(other) = compare {
        let b = coco_map(&detections(&read_results(other)?), &gt, partition.as_ref(), &params)?;
        write(&out_dir.join("ap_report_compare.json"), &(b.to_json() + "\n"))?;
        write(&out_dir.join("ap_report_compare.csv"), &b.to_csv())?;
        write(&out_dir.join("ap_delta.csv"), &compare_reports(&report, &b)?.to_csv())?;
        summary_line("b", &b);
    }
    Ok(Outcome::Ok)
}

fn sweep(cfg: &Settings, a: SweepArgs) -> Result<Outcome> {
    let grid = match cfg.pick(a.grid, "grid")? {
        Some(List(g)) => g,
        None => unit_grid(cfg.pick_or(a.points, "points", 11)?)?,
    };
    let out: PathBuf = cfg.require(a.out, "out")?;
    let plot: Option<PathBuf> = cfg.pick(a.plot, "plot")?;
    let params = EvalParams {
        max_dets: cfg.pick(a.max_dets, "max-dets")?,
    };
    let loaded = load_inputs(cfg, a.inputs)?;
    let base = fusion(&loaded, DEFAULT_FUSION_WEIGHT)?;
    let partition = loaded.gt.partition();
    let rows = sweep_c(&loaded.prepared, &base, &loaded.gt, partition.as_ref(), &grid, &params)?;
    write(&out, &sweep_to_csv(&rows))?;
    if let Some(p) = plot {
        let chart = LineChart::new("fusion weight sweep", "c", "AP")
            .with_series("nAP", rows.iter().map(|r| (r.c, r.nap)).collect())
            .with_series("nAP50", rows.iter().map(|r| (r.c, r.nap50)).collect());
        write(&p, &chart.to_svg())?;
    }
    for r in &rows {
        println!("c {} nAP {} nAP50 {}", g17(r.c), g17(r.nap), g17(r.nap50));
    }
    Ok(Outcome::Ok)
}

fn monotonicity(cfg: &Settings, a: MonotonicityArgs) -> Result<Outcome> {
    let points = cfg.pick_or(a.points, "points", 50)?;
    let out: Option<PathBuf> = cfg.pick(a.out, "out")?;
    let plot: Option<PathBuf> = cfg.pick(a.plot, "plot")?;

    if let Some(List(noise)) = cfg.pick(a.noise, "noise")? {
        let n = noise.len();
        let grid = match cfg.pick(a.alphas, "alphas")? {
            Some(List(g)) => g,
            None => alpha_grid(n, &noise, points, cfg.pick_or(a.fraction, "fraction", 0.99)?)?,
        };
        let report = verify_monotonicity(n, &noise, &grid)?;
        if let Some(p) = &out {
            write(p, &report.to_csv())?;
        }
        if let Some(p) = plot {
            write(&p, &mono_chart(&[(n, &report)]).to_svg())?;
        }
        println!(
            "points {} worst drop {} {}",
            report.points.len(),
            g17(report.worst_drop),
            verdict(report.passed)
        );
        return Ok(if report.passed {
            Outcome::Ok
        } else {
            Outcome::InvariantFailed
        });
    }

    let trials = cfg.pick_or(a.trials, "trials", 1000)?;
    let lo = cfg.pick_or(a.min_classes, "min-classes", 2)?;
    let hi = cfg.pick_or(a.max_classes, "max-classes", 20)?;
    if lo > hi {
        return Err(UsageError(format!("--min-classes {lo} exceeds --max-classes {hi}")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pick_or(a.seed, "seed", 0)?);
    let summary = monotonicity_sweep(&mut rng, trials, lo..=hi, points)?;
    if let Some(p) = &out {
        let mut csv = String::from("trial,n,worst_drop,passed\n");
        for (i, (n, r)) in summary.reports.iter().enumerate() {
            csv.push_str(&format!("{i},{n},{},{}\n", g17(r.worst_drop), r.passed));
        }
        write(p, &csv)?;
    }
    if let Some(p) = plot {
        let first: Vec<(usize, &MonotonicityReport)> = summary.reports.iter().take(6).map(|(n, r)| (*n, r)).collect();
        write(&p, &mono_chart(&first).to_svg())?;
    }
    println!(
        "trials {} failures {} {}",
        summary.trials,
        summary.failures,
        verdict(summary.passed())
    );
    Ok(if summary.passed() {
        Outcome::Ok
    } else {
        Outcome::InvariantFailed
    })
}

fn mono_chart(reports: &[(usize, &MonotonicityReport)]) -> LineChart {
    reports.iter().enumerate().fold(
        LineChart::new("mirror sum against alpha", "alpha", "mirror sum"),
        |chart, (i, (n, r))| chart.with_series(&format!("#{i} N={n}"), r.points.clone()),
    )
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn kshot(cfg: &Settings, a: KshotArgs) -> Result<Outcome> {
    let full = parse_annotations(cfg.require(a.annotations, "annotations")?)?;
    let k: usize = cfg.require(a.k, "k")?;
    let out_dir: PathBuf = cfg.require(a.out_dir, "out-dir")?;
    let seeds = cfg.pick(a.seeds, "seeds")?.map_or_else(|| vec![0], |l| l.0);
    let classes = match cfg.pick(a.classes, "classes")? {
        Some(List(c)) => c,
        None => {
            let novel: Vec<ClassId> = full
                .categories
                .iter()
                .filter(|c| c.split == Some(ClassSplit::Novel))
                .map(|c| c.id)
                .collect();
            if novel.is_empty() {
                full.categories.iter().map(|c| c.id).collect()
            } else {
                novel
            }
        }
    };
    for seed in seeds {
        let s = sample_kshot(&full, k, &classes, seed)?;
        let path = out_dir.join(format!("{k}shot_seed{seed}.json"));
        write(&path, &(s.to_json() + "\n"))?;
        let counts: Vec<String> = s.counts().iter().map(|(c, n)| format!("{c}:{n}")).collect();
        println!(
            "{} images {} annotations {} [{}]",
            path.display(),
            s.subset.images.len(),
            s.subset.annotations.len(),
            counts.join(" ")
        );
    }
    Ok(Outcome::Ok)
}

fn missing(cfg: &Settings, a: MissingArgs) -> Result<Outcome> {
    let full = parse_annotations(cfg.require(a.annotations, "annotations")?)?;
    let subsets = if a.subsets.is_empty() {
        cfg.get::<List<PathBuf>>("subsets")?.map(|l| l.0).unwrap_or_default()
    } else {
        a.subsets
    };
    if subsets.is_empty() {
        return Err(UsageError("missing required option --subsets".into()).into());
    }
    let out_dir: PathBuf = cfg.require(a.out_dir, "out-dir")?;
    let plot: Option<PathBuf> = cfg.pick(a.plot, "plot")?;

    let mut stats = Vec::with_capacity(subsets.len());
    for (i, path) in subsets.iter().enumerate() {
        let s = missing_annotation_stats(&full, &parse_annotations(path)?)?;
        write(&out_dir.join(format!("missing_seed{i}.csv")), &s.to_csv())?;
        println!("seed {i} ({}) missing {}", path.display(), s.total());
        stats.push(s);
    }
    if stats.len() >= 2 {
        let rows = aggregate_missing(&stats)?;
        write(&out_dir.join("missing_aggregate.csv"), &aggregates_to_csv(&rows))?;
        if let Some(p) = plot {
            let series = |f: fn(&riscore::cocoio::ConfidenceInterval) -> f64| {
                rows.iter().map(|r| (r.class_id as f64, f(&r.ci))).collect()
            };
            let chart = LineChart::new("missing annotations per class", "class id", "missing")
                .with_series("mean", series(|c| c.mean))
                .with_series("95% low", series(|c| c.ci_low))
                .with_series("95% high", series(|c| c.ci_high));
            write(&p, &chart.to_svg())?;
        }
    } else if plot.is_some() {
        return Err(UsageError("--plot needs at least two subsets".into()).into());
    }
    Ok(Outcome::Ok)
}

fn loss_check(cfg: &Settings, a: LossCheckArgs) -> Result<Outcome> {
    let defaults = BnrlParams::with_background(0);
    let params = BnrlParams {
        beta: cfg.pick_or(a.beta, "beta", defaults.beta)?,
        gamma: cfg.pick_or(a.gamma, "gamma", defaults.gamma)?,
        epsilon: cfg.pick_or(a.epsilon, "epsilon", defaults.epsilon)?,
        omega_bg: cfg.pick_or(a.omega_bg, "omega-bg", defaults.omega_bg)?,
        bg_class: 0,
    };
    params.validate()?;
    let trials = cfg.pick_or(a.trials, "trials", 1000)?;
    let max_classes = cfg.pick_or(a.max_classes, "max-classes", 20)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pick_or(a.seed, "seed", 0)?);
    let r = run_loss_check(&mut rng, trials, max_classes, &params);
    println!("trials {}", r.trials);
    println!(
        "focal reduction max diff {} {}",
        g17(r.max_focal_diff),
        verdict(r.max_focal_diff < riscore::bnrl::check::REDUCTION_TOLERANCE)
    );
    println!(
        "cross-entropy reduction max diff {} {}",
        g17(r.max_ce_diff),
        verdict(r.max_ce_diff < riscore::bnrl::check::REDUCTION_TOLERANCE)
    );
    println!(
        "gradient max relative error {} {}",
        g17(r.max_grad_rel_err),
        verdict(r.gradient_pass())
    );
    println!("minimum loss {} {}", g17(r.min_loss), verdict(r.min_loss >= 0.0));
    Ok(if r.passed() {
        Outcome::Ok
    } else {
        Outcome::InvariantFailed
    })
}
