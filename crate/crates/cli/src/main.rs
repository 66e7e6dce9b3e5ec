//! `rws` command-line tool: train, evaluate, sample from, and analyze
//! reweighted wake-sleep models.

mod config;
mod pgm;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use rws::analysis::{
    bootstrap_gradient_study, bootstrap_ll_study, ll_curve_csv, ll_vs_k_curve, BootstrapConfig,
    Resampling,
};
use rws::data::{
    load_amat, load_checkpoint, make_bars_dataset, save_checkpoint, write_amat, BinaryDataset,
    MetricsRow, Split, METRICS_HEADER,
};
use rws::estimators::Proposal;
use rws::oracle::{EnumerationBudget, ExactPosteriorProposal};
use rws::training::{dataset_estimates, Trainer};
use rws::{GenerativeModel, QUpdateMode, RngStream};

use config::RunConfig;

/// Stream ids under the run seed. Training itself uses stream 1 (see the
/// library); everything the CLI adds lives above it.
const INIT_STREAM: u64 = 0;
const VALID_STREAM_BASE: u64 = 1 << 32;
const EVAL_STREAM: u64 = 2;
const BOOTSTRAP_STREAM: u64 = 3;
const SAMPLE_STREAM: u64 = 4;
const ANALYZE_STREAM: u64 = 5;

#[derive(Parser)]
#[command(
    name = "rws",
    version,
    about = "Reweighted wake-sleep for deep binary latent-variable models"
)]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend
    /// on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model pair; writes metrics.csv and checkpoints under --out.
    Train(TrainArgs),
    /// Estimate the mean log-likelihood of a dataset under a checkpoint.
    Eval(EvalArgs),
    /// Write a PGM grid of visible-unit probabilities from ancestral samples.
    Sample(SampleArgs),
    /// Bootstrap bias/variance studies and likelihood-vs-K curves.
    Analyze(AnalyzeArgs),
    /// Write a synthetic bars dataset in amat format.
    MakeBars(MakeBarsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Samples per datapoint during training.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    q_update: Option<QMode>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint directory instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QMode {
    Sleep,
    Wake,
    Both,
}

impl From<QMode> for QUpdateMode {
    fn from(m: QMode) -> Self {
        match m {
            QMode::Sleep => QUpdateMode::Sleep,
            QMode::Wake => QUpdateMode::Wake,
            QMode::Both => QUpdateMode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum ProposalKind {
    /// The checkpoint's inference model.
    Model,
    /// The exact posterior of the generative model, by enumeration (tiny
    /// models only).
    Exact,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// amat file to evaluate.
    #[arg(long)]
    data: PathBuf,
    /// Samples per datapoint.
    #[arg(long, default_value_t = 100_000)]
    k: usize,
    /// Samples held in memory at once per datapoint.
    #[arg(long, default_value_t = 1000)]
    chunk: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Datapoint resamples for the confidence interval.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, value_enum, default_value_t = ProposalKind::Model)]
    proposal: ProposalKind,
    /// Also write the report and per-datapoint estimates into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    /// Tile size as HxW when the visible width is not a perfect square.
    #[arg(long)]
    dims: Option<String>,
    /// Tiles per grid row (default: ceil(sqrt(n))).
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum AnalyzeMode {
    GradBias,
    LlBias,
    LlVsK,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Use the first N datapoints of --data.
    #[arg(long, default_value_t = 25)]
    datapoints: usize,
    #[arg(long, default_value_t = 5000)]
    reference_k: usize,
    /// Comma-separated subset sizes (bootstrap modes) or K values (ll-vs-k).
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 5, 10, 25, 100, 500, 1000, 5000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    /// Take the first s reference samples instead of resampling.
    #[arg(long)]
    identity: bool,
    #[arg(long, value_enum, default_value_t = ProposalKind::Model)]
    proposal: ProposalKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MakeBarsArgs {
    #[arg(long, default_value_t = 3)]
    side: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::MakeBars(a) => cmd_make_bars(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    let t = &mut cfg.train;
    if let Some(k) = a.k {
        t.k_train = k;
    }
    if let Some(lr) = a.lr {
        t.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(m) = a.q_update {
        t.q_update_mode = m.into();
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .context("no output directory: set `out` in the config or pass --out")?;
    let spec = cfg.model_spec()?;
    let (train, valid) = cfg.load_data()?;

    let mut trainer = match &a.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            if ckpt.p.visible_width() != train.width() {
                bail!(
                    "checkpoint models {} visible units but the training data has {}",
                    ckpt.p.visible_width(),
                    train.width()
                );
            }
            let mut tr = Trainer::from_checkpoint(ckpt)?;
            tr.config = cfg.train.clone();
            tr
        }
        None => {
            let marg = train.marginals();
            let (p, q) = spec.build(
                train.width(),
                Some(&marg),
                &mut RngStream::new(cfg.train.seed, INIT_STREAM),
            )?;
            Trainer::new(p, q, cfg.train.clone())?
        }
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_root = out.join("checkpoints");
    let metrics_path = out.join("metrics.csv");
    let score_split = if valid.is_some() {
        Split::Valid
    } else {
        Split::Train
    };
    let (mut metrics, mut best) = if a.resume.is_some() && metrics_path.exists() {
        resume_metrics(
            &fs::read_to_string(&metrics_path)?,
            trainer.epoch(),
            score_split,
        )
    } else {
        (format!("{METRICS_HEADER}\n"), f64::NEG_INFINITY)
    };
    write_text(&metrics_path, &metrics)?;
    save_checkpoint(
        ckpt_root.join(format!("epoch-{:04}", trainer.epoch())),
        &trainer.checkpoint(),
    )?;

    let start = Instant::now();
    while trainer.epoch() < cfg.train.epochs {
        let t0 = Instant::now();
        let m = trainer.run_epoch(&train)?;
        let epoch = trainer.epoch();
        let secs = if cfg.record_wall_time {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        metrics.push_str(
            &MetricsRow {
                epoch,
                split: Split::Train,
                ll_estimate: m.mean_ll,
                ess_mean: m.mean_ess,
                lr: m.lr,
                seconds: secs,
            }
            .to_csv(),
        );
        metrics.push('\n');
        let mut score = m.mean_ll;
        let mut line = format!(
            "epoch {epoch:4}  train ll {:.4}  ess {:.3}",
            m.mean_ll, m.mean_ess
        );
        if let Some(v) = &valid {
            let t1 = Instant::now();
            let mut rng = RngStream::new(cfg.train.seed, VALID_STREAM_BASE + epoch as u64);
            let est =
                dataset_estimates(&trainer.p, &trainer.q, v, cfg.valid_k, cfg.chunk, &mut rng)?;
            let n = est.len() as f64;
            let ll = est.iter().map(|e| e.log_marginal).sum::<f64>() / n;
            let ess = est.iter().map(|e| e.ess).sum::<f64>() / n;
            metrics.push_str(
                &MetricsRow {
                    epoch,
                    split: Split::Valid,
                    ll_estimate: ll,
                    ess_mean: ess,
                    lr: m.lr,
                    seconds: if cfg.record_wall_time {
                        t1.elapsed().as_secs_f64()
                    } else {
                        0.0
                    },
                }
                .to_csv(),
            );
            metrics.push('\n');
            line.push_str(&format!("  valid ll {ll:.4}"));
            score = ll;
        }
        write_text(&metrics_path, &metrics)?;
        let ckpt = trainer.checkpoint();
        save_checkpoint(ckpt_root.join(format!("epoch-{epoch:04}")), &ckpt)?;
        if score > best {
            best = score;
            save_checkpoint(ckpt_root.join("best"), &ckpt)?;
        }
        eprintln!("{line}  ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Keep the metrics rows up to `epoch` and recover the best score so far.
fn resume_metrics(text: &str, epoch: usize, score_split: Split) -> (String, f64) {
    let mut kept = format!("{METRICS_HEADER}\n");
    let mut best = f64::NEG_INFINITY;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let Some(e) = cols.first().and_then(|c| c.parse::<usize>().ok()) else {
            continue;
        };
        if e > epoch {
            continue;
        }
        if cols.get(1) == Some(&score_split.as_str()) {
            if let Some(ll) = cols.get(2).and_then(|c| c.parse::<f64>().ok()) {
                best = best.max(ll);
            }
        }
        kept.push_str(line);
        kept.push('\n');
    }
    (kept, best)
}

fn load_data_for(p: &GenerativeModel, path: &Path) -> Result<BinaryDataset> {
    let ds = load_amat(path, Split::Test).with_context(|| format!("loading {}", path.display()))?;
    if ds.width() != p.visible_width() {
        bail!(
            "{} has {} columns but the model has {} visible units",
            path.display(),
            ds.width(),
            p.visible_width()
        );
    }
    Ok(ds)
}

fn exact_proposal(p: &GenerativeModel, ds: &BinaryDataset) -> Result<ExactPosteriorProposal> {
    ExactPosteriorProposal::new(p, ds.rows(), &EnumerationBudget::default())
        .context("the exact-posterior proposal needs a model small enough to enumerate")
}

/// Percentile bootstrap over datapoints of the mean.
fn bootstrap_ci(values: &[f64], resamples: usize, rng: &mut RngStream) -> (f64, f64) {
    if resamples == 0 || values.len() < 2 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        return (m, m);
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let ds = load_data_for(&ckpt.p, &a.data)?;
    let mut rng = RngStream::new(a.seed, EVAL_STREAM);
    let est = match a.proposal {
        ProposalKind::Model => dataset_estimates(&ckpt.p, &ckpt.q, &ds, a.k, a.chunk, &mut rng)?,
        ProposalKind::Exact => {
            let prop = exact_proposal(&ckpt.p, &ds)?;
            dataset_estimates(&ckpt.p, &prop as &dyn Proposal, &ds, a.k, a.chunk, &mut rng)?
        }
    };
    let lls: Vec<f64> = est.iter().map(|e| e.log_marginal).collect();
    let mean = lls.iter().sum::<f64>() / lls.len() as f64;
    let ess = est.iter().map(|e| e.ess).sum::<f64>() / est.len() as f64;
    let (lo, hi) = bootstrap_ci(
        &lls,
        a.bootstrap,
        &mut RngStream::new(a.seed, BOOTSTRAP_STREAM),
    );
    let report = format!(
        "n={} k={} mean_ll={} ci95=[{}, {}] ess_mean={}\n",
        lls.len(),
        a.k,
        mean,
        lo,
        hi,
        ess
    );
    print!("{report}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_text(&dir.join("eval.txt"), &report)?;
        let mut per = String::from("index,ll_estimate,ess\n");
        for (i, e) in est.iter().enumerate() {
            per.push_str(&format!("{i},{},{}\n", e.log_marginal, e.ess));
        }
        write_text(&dir.join("per_datapoint.csv"), &per)?;
    }
    Ok(())
}

fn tile_dims(width: usize, dims: Option<&str>) -> Result<(usize, usize)> {
    if let Some(d) = dims {
        let (h, w) = d
            .split_once(['x', 'X'])
            .context("--dims should look like 28x28")?;
        let (h, w): (usize, usize) = (h.trim().parse()?, w.trim().parse()?);
        if h * w != width {
            bail!("--dims {h}x{w} does not cover the {width} visible units");
        }
        return Ok((h, w));
    }
    let side = (width as f64).sqrt().round() as usize;
    if side * side != width {
        bail!("visible width {width} is not a perfect square; pass --dims HxW");
    }
    Ok((side, side))
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (h, w) = tile_dims(ckpt.p.visible_width(), a.dims.as_deref())?;
    if a.n == 0 {
        bail!("--n must be at least 1");
    }
    let key = RngStream::new(a.seed, SAMPLE_STREAM).child_key();
    let tiles: Vec<Vec<f64>> = (0..a.n)
        .map(|i| {
            ckpt.p
                .ancestral_sample_with_probs(&mut RngStream::new(key, i as u64))
                .3
        })
        .collect();
    let cols = a
        .cols
        .unwrap_or_else(|| (a.n as f64).sqrt().ceil() as usize)
        .max(1);
    let img = pgm::tile_grid(&tiles, h, w, cols);
    let mut f =
        fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    f.write_all(&img.to_pgm())?;
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let full = load_data_for(&ckpt.p, &a.data)?;
    let ds = if a.datapoints > 0 && a.datapoints < full.len() {
        full.split_at(a.datapoints, Split::Test, Split::Test)?.0
    } else {
        full
    };
    let exact;
    let proposal: &dyn Proposal = match a.proposal {
        ProposalKind::Model => &ckpt.q,
        ProposalKind::Exact => {
            exact = exact_proposal(&ckpt.p, &ds)?;
            &exact
        }
    };
    let mut rng = RngStream::new(a.seed, ANALYZE_STREAM);
    let csv = match a.mode {
        AnalyzeMode::GradBias | AnalyzeMode::LlBias => {
            let cfg = BootstrapConfig {
                reference_k: a.reference_k,
                subset_sizes: a.sizes.clone(),
                n_resamples: a.resamples,
                resampling: if a.identity {
                    Resampling::Prefix
                } else {
                    Resampling::WithReplacement
                },
            };
            let report = if a.mode == AnalyzeMode::GradBias {
                bootstrap_gradient_study(&ckpt.p, proposal, &ds, &cfg, &mut rng)?
            } else {
                bootstrap_ll_study(&ckpt.p, proposal, &ds, &cfg, &mut rng)?
            };
            report.to_csv()
        }
        AnalyzeMode::LlVsK => {
            ll_curve_csv(&ll_vs_k_curve(&ckpt.p, proposal, &ds, &a.sizes, &mut rng)?)
        }
    };
    write_text(&a.out, &csv)
}

fn cmd_make_bars(a: MakeBarsArgs) -> Result<()> {
    let ds = make_bars_dataset(a.side, a.n, &mut RngStream::new(a.seed, 0))?;
    write_amat(&a.out, &ds)?;
    Ok(())
}
