//! Command-line pipeline: synthetic data, quadruplet generation, training
//! under fixed or adaptive margins, ranking evaluation, margin statistics,
//! and the three-way fixed/adaptive/regression comparison.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 validation error. All randomness
//! flows from explicit `--seed` flags; reruns with identical inputs produce
//! byte-identical outputs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::Deserialize;

use tripletlearn::data_io::{self, ModelFile, SyntheticSpec};
use tripletlearn::embed_net::{Activation, EmbeddingNet};
use tripletlearn::error::{Error, Result};
use tripletlearn::evaluation::{self, RankResult};
use tripletlearn::losses::{LossWeights, MarginMode, RegressionKind};
use tripletlearn::sampling::{self, FeatureDataset};
use tripletlearn::training::{self, RegressionHead, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tripletlearn",
    version,
    about = "Triplet metric learning on rating data with fixed or adaptive margins"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-score dataset from a JSON spec.
    GenData(GenDataArgs),
    /// Generate quadruplets {A, P, N, m} from a dataset.
    GenTriplets(GenTripletsArgs),
    /// Train an embedding net (and optional regression head).
    Train(TrainArgs),
    /// Evaluate a trained model by one of the three ranking procedures.
    Eval(EvalArgs),
    /// Margin histogram of a quadruplet file.
    Stats(StatsArgs),
    /// Run fixed-margin, adaptive-margin, and regression-only training
    /// over several seeds and report median SROCC plus collapse counts.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON spec file; may contain a "pairwise" section.
    #[arg(long)]
    spec: PathBuf,
    /// Output items CSV.
    #[arg(long)]
    out: PathBuf,
    /// Output pairs CSV (required when the spec has a "pairwise" section).
    #[arg(long)]
    out_pairs: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DatasetMode {
    Single,
    Pairwise,
}

#[derive(Args)]
struct GenTripletsArgs {
    /// Items CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Pairs CSV (pairwise mode only).
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: DatasetMode,
    /// Random partner pairs drawn per anchor (single mode only).
    #[arg(long, default_value_t = 150)]
    pairs_per_anchor: usize,
    /// Rating scale upper bound n (ratings span [1, n]).
    #[arg(long, default_value_t = 5)]
    scale_n: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output quadruplet CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NetArgs {
    /// Embedding dimensionality.
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Hidden layer widths, comma separated. Empty means a single linear layer.
    #[arg(long, value_delimiter = ',', default_values_t = vec![32])]
    hidden: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Items CSV supplying features and MOS values.
    #[arg(long)]
    dataset: PathBuf,
    /// Quadruplet CSV.
    #[arg(long)]
    quads: PathBuf,
    /// TrainConfig JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 5)]
    scale_n: u32,
    /// Override the config's margin mode.
    #[arg(long, value_enum)]
    mode: Option<MarginModeArg>,
    /// Fixed margin value (fixed mode only).
    #[arg(long)]
    margin: Option<f64>,
    #[command(flatten)]
    net: NetArgs,
    /// Seed for parameter initialization (defaults to the config seed).
    #[arg(long)]
    net_seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MarginModeArg {
    Fixed,
    Adaptive,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EvalMethod {
    Pairwise,
    Reference,
    Regression,
}

#[derive(Args)]
struct EvalArgs {
    /// Model JSON written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Items CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Pairs CSV (pairwise method only).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// File with one id per line: item ids for reference/regression,
    /// reference ids for pairwise. Defaults to the whole dataset.
    #[arg(long)]
    test_split: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: EvalMethod,
    #[arg(long, default_value_t = 5)]
    scale_n: u32,
    /// Output result JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    quads: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Output histogram CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Items CSV of a single-image rating dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// TrainConfig JSON for the fixed-margin column.
    #[arg(long)]
    config_fixed: PathBuf,
    /// TrainConfig JSON for the adaptive-margin column (also the base for
    /// the regression-only column).
    #[arg(long)]
    config_adaptive: PathBuf,
    /// Number of seed replicates.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Base seed; replicate r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    scale_n: u32,
    /// Train/test split fraction held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 5)]
    pairs_per_anchor: usize,
    #[command(flatten)]
    net: NetArgs,
    /// Output table CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::NumericFailure { .. } => 1,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::GenTriplets(args) => gen_triplets(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Stats(args) => stats(args),
        Command::Compare(args) => compare(args),
    }
}

/// gen-data spec file: a SyntheticSpec, optionally with a pairwise section.
#[derive(Deserialize)]
struct GenSpec {
    #[serde(flatten)]
    synthetic: SyntheticSpec,
    #[serde(default)]
    pairwise: Option<PairwiseSection>,
}

#[derive(Deserialize)]
struct PairwiseSection {
    refs: usize,
    evals_per_ref: usize,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)?;
    let spec: GenSpec = serde_json::from_str(&text)?;
    spec.synthetic.validate()?;
    match spec.pairwise {
        None => {
            let ds = data_io::generate_synthetic(&spec.synthetic)?;
            data_io::save_feature_dataset(&ds, &args.out)?;
            println!("wrote {} items to {}", ds.items.len(), args.out.display());
        }
        Some(pw) => {
            let Some(out_pairs) = args.out_pairs else {
                return Err(Error::InvalidConfig(
                    "--out-pairs is required for a spec with a pairwise section".into(),
                ));
            };
            let ds = data_io::generate_synthetic_pairwise(
                &spec.synthetic,
                pw.refs,
                pw.evals_per_ref,
            )?;
            let items = FeatureDataset::new(ds.items.clone(), ds.scale_n)?;
            data_io::save_feature_dataset(&items, &args.out)?;
            data_io::save_pairs(&ds.pairs, &out_pairs)?;
            println!(
                "wrote {} items to {} and {} pairs to {}",
                ds.items.len(),
                args.out.display(),
                ds.pairs.len(),
                out_pairs.display()
            );
        }
    }
    Ok(())
}

fn gen_triplets(args: GenTripletsArgs) -> Result<()> {
    let quads = match args.mode {
        DatasetMode::Single => {
            if args.pairs.is_some() {
                return Err(Error::InvalidConfig(
                    "--pairs applies to pairwise mode only".into(),
                ));
            }
            let ds = data_io::load_feature_dataset(&args.dataset, args.scale_n)?;
            sampling::generate_quadruplets_single(&ds, args.pairs_per_anchor, args.seed)?
        }
        DatasetMode::Pairwise => {
            let Some(pairs_path) = &args.pairs else {
                return Err(Error::InvalidConfig(
                    "--pairs is required in pairwise mode".into(),
                ));
            };
            let ds = data_io::load_pair_dataset(&args.dataset, pairs_path, args.scale_n)?;
            let report = sampling::generate_quadruplets_pairwise(&ds, args.seed)?;
            if report.ties_skipped > 0 || report.refs_skipped > 0 {
                eprintln!(
                    "warning: skipped {} tied pairs and {} references with < 2 pairs",
                    report.ties_skipped, report.refs_skipped
                );
            }
            report.quadruplets
        }
    };
    data_io::save_quadruplets(&quads, &args.out)?;
    println!("wrote {} quadruplets to {}", quads.len(), args.out.display());
    Ok(())
}

fn apply_margin_override(
    cfg: &mut TrainConfig,
    mode: Option<MarginModeArg>,
    margin: Option<f64>,
) -> Result<()> {
    match mode {
        Some(MarginModeArg::Fixed) => {
            cfg.margin_mode = MarginMode::Fixed {
                margin: margin.unwrap_or(0.5),
            };
        }
        Some(MarginModeArg::Adaptive) => {
            if margin.is_some() {
                return Err(Error::InvalidConfig(
                    "--margin applies to fixed mode only".into(),
                ));
            }
            cfg.margin_mode = MarginMode::Adaptive;
        }
        None => {
            if margin.is_some() {
                return Err(Error::InvalidConfig(
                    "--margin requires --mode fixed".into(),
                ));
            }
        }
    }
    cfg.validate()
}

fn build_net(net_args: &NetArgs, in_dim: usize, seed: u64) -> Result<EmbeddingNet> {
    let mut dims = vec![in_dim];
    dims.extend_from_slice(&net_args.hidden);
    dims.push(net_args.embed_dim);
    EmbeddingNet::seeded(&dims, Activation::Relu, seed)
}

fn train(args: TrainArgs) -> Result<()> {
    let ds = data_io::load_feature_dataset(&args.dataset, args.scale_n)?;
    if ds.items.is_empty() {
        return Err(Error::InvalidInput("dataset has no items".into()));
    }
    let quads = data_io::load_quadruplets(&args.quads)?;
    let mut cfg = data_io::load_train_config(&args.config)?;
    apply_margin_override(&mut cfg, args.mode, args.margin)?;

    let net_seed = args.net_seed.unwrap_or(cfg.seed);
    let net = build_net(&args.net, ds.feature_dim(), net_seed)?;
    let head = (cfg.loss_weights.beta > 0.0)
        .then(|| RegressionHead::seeded(args.net.embed_dim, net_seed.wrapping_add(1)));

    let (net, head, report) =
        training::train(&net, head.as_ref(), &ds.items, ds.scale_n, &quads, &cfg)?;
    data_io::save_model(
        &ModelFile {
            net,
            regression_head: head,
        },
        &args.out_model,
    )?;
    data_io::save_train_report(&report, &args.out_report)?;
    let last_loss = report.mean_triplet_loss.last().copied().unwrap_or(0.0);
    println!(
        "trained {} epochs (final mean triplet loss {last_loss:.6}, collapsed: {}), model at {}",
        report.mean_triplet_loss.len(),
        report.collapsed,
        args.out_model.display()
    );
    Ok(())
}

fn load_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn print_rank_table(result: &RankResult) {
    println!("{:<20} {:>10} {:>8}", "method", "srocc", "n");
    println!(
        "{:<20} {:>10.4} {:>8}",
        format!("{:?}", result.method),
        result.srocc,
        result.n
    );
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = data_io::load_model(&args.model)?;
    let result = match args.method {
        EvalMethod::Pairwise => {
            let Some(pairs_path) = &args.pairs else {
                return Err(Error::InvalidConfig(
                    "--pairs is required for the pairwise method".into(),
                ));
            };
            let ds = data_io::load_pair_dataset(&args.dataset, pairs_path, args.scale_n)?;
            let test_pairs = match &args.test_split {
                None => ds.pairs.clone(),
                Some(split) => {
                    let refs: HashSet<String> = load_id_list(split)?.into_iter().collect();
                    ds.pairs
                        .iter()
                        .filter(|p| refs.contains(&p.ref_id))
                        .cloned()
                        .collect()
                }
            };
            evaluation::eval_pairwise(&model.net, &ds, &test_pairs)?
        }
        EvalMethod::Reference | EvalMethod::Regression => {
            if args.pairs.is_some() {
                return Err(Error::InvalidConfig(
                    "--pairs applies to the pairwise method only".into(),
                ));
            }
            let ds = data_io::load_feature_dataset(&args.dataset, args.scale_n)?;
            let test_ids = match &args.test_split {
                None => ds.items.iter().map(|it| it.id.clone()).collect(),
                Some(split) => load_id_list(split)?,
            };
            if args.method == EvalMethod::Reference {
                evaluation::eval_reference(&model.net, &ds, &test_ids)?
            } else {
                let Some(head) = &model.regression_head else {
                    return Err(Error::InvalidConfig(
                        "model has no regression head; train with beta > 0".into(),
                    ));
                };
                evaluation::eval_regression(&model.net, head, &ds, &test_ids)?
            }
        }
    };
    data_io::save_json(&result, &args.out)?;
    print_rank_table(&result);
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let quads = data_io::load_quadruplets(&args.quads)?;
    let hist = sampling::margin_histogram(&quads, args.bins)?;
    data_io::save_histogram(&hist, &args.out)?;
    println!(
        "{} quadruplets across {} bins, histogram at {}",
        quads.len(),
        args.bins,
        args.out.display()
    );
    Ok(())
}

struct MethodOutcome {
    name: &'static str,
    sroccs: Vec<f64>,
    collapses: u64,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}

fn compare(args: CompareArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be at least 1".into()));
    }
    if !(0.0 < args.test_fraction && args.test_fraction < 1.0) {
        return Err(Error::InvalidConfig(
            "--test-fraction must lie strictly between 0 and 1".into(),
        ));
    }
    let ds = data_io::load_feature_dataset(&args.dataset, args.scale_n)?;
    if ds.items.len() < 10 {
        return Err(Error::InvalidInput(
            "compare needs at least 10 items".into(),
        ));
    }
    let cfg_fixed = data_io::load_train_config(&args.config_fixed)?;
    let cfg_adaptive = data_io::load_train_config(&args.config_adaptive)?;
    // Regression-only column: the adaptive config with the triplet term off.
    let mut cfg_regression = cfg_adaptive.clone();
    cfg_regression.loss_weights = LossWeights {
        alpha: 0.0,
        beta: 1.0,
    };
    if cfg_regression.regression.is_none() {
        cfg_regression.regression = Some(RegressionKind::Mae);
    }
    cfg_regression.validate()?;

    let mut outcomes = [
        MethodOutcome {
            name: "regression",
            sroccs: Vec::new(),
            collapses: 0,
        },
        MethodOutcome {
            name: "fixed",
            sroccs: Vec::new(),
            collapses: 0,
        },
        MethodOutcome {
            name: "adaptive",
            sroccs: Vec::new(),
            collapses: 0,
        },
    ];

    for replicate in 0..args.seeds {
        let seed = args.seed + replicate;
        // Deterministic 80/20-style split per replicate seed.
        let mut order: Vec<usize> = (0..ds.items.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_test = ((ds.items.len() as f64 * args.test_fraction) as usize)
            .clamp(2, ds.items.len() - 3);
        let (test_idx, train_idx) = order.split_at(n_test);
        let train_items: Vec<_> = train_idx.iter().map(|&i| ds.items[i].clone()).collect();
        let test_ids: Vec<String> = test_idx.iter().map(|&i| ds.items[i].id.clone()).collect();
        let train_ds = FeatureDataset::new(train_items, ds.scale_n)?;
        let quads = sampling::generate_quadruplets_single(&train_ds, args.pairs_per_anchor, seed)?;
        let net = build_net(&args.net, ds.feature_dim(), seed)?;

        for (outcome, base_cfg) in
            outcomes
                .iter_mut()
                .zip([&cfg_regression, &cfg_fixed, &cfg_adaptive])
        {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            let head = (cfg.loss_weights.beta > 0.0)
                .then(|| RegressionHead::seeded(args.net.embed_dim, seed.wrapping_add(1)));
            let (trained, head, report) = training::train(
                &net,
                head.as_ref(),
                &train_ds.items,
                train_ds.scale_n,
                &quads,
                &cfg,
            )?;
            if report.collapsed {
                outcome.collapses += 1;
            }
            let result = if outcome.name == "regression" {
                let head = head.expect("regression config always trains a head");
                evaluation::eval_regression(&trained, &head, &ds, &test_ids)?
            } else {
                evaluation::eval_reference(&trained, &ds, &test_ids)?
            };
            outcome.sroccs.push(result.srocc);
        }
    }

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["method", "median_srocc", "collapses", "seeds"])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        for outcome in &outcomes {
            w.write_record([
                outcome.name.to_string(),
                data_io::fmt_f64(median(&outcome.sroccs)),
                outcome.collapses.to_string(),
                args.seeds.to_string(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        w.flush()?;
    }
    data_io::atomic_write(&args.out, &buf)?;

    println!("{:<12} {:>14} {:>10}", "method", "median_srocc", "collapses");
    for outcome in &outcomes {
        println!(
            "{:<12} {:>14.4} {:>10}",
            outcome.name,
            median(&outcome.sroccs),
            outcome.collapses
        );
    }
    Ok(())
}
