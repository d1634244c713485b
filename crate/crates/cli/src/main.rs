//! `neurank` command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 partial failure of
//! a `compare` run. Errors are printed to stderr as
//! `{"error": <kind>, "message": <text>}`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurank::concept::build_concept_dataset;
use neurank::evaluator::{accuracy_sweep, synth_generate, SynthConfig};
use neurank::experiment::{
    concept_seed, method_seed, rank_method, run_experiment, AutoTag, ConceptSelection, ExperimentConfig, RankOptions,
};
use neurank::rankers::Method;
use neurank::store::{load_dataset, save_dataset, validate_dataset};
use neurank::voting::BordaOrder;
use serde_json::json;

#[derive(Parser)]
#[command(name = "neurank", version, about = "Rank neurons by concept relevance and compare ranking methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted concept neurons.
    Synth(SynthArgs),
    /// Check a dataset directory and print its metadata.
    Validate {
        dir: PathBuf,
    },
    /// Rank the neurons of one layer for one concept with one method.
    Rank(RankArgs),
    /// Run every configured method on every layer and concept and score agreement.
    Compare(CompareArgs),
    /// Test accuracy of classifiers retrained on each method's top neurons.
    EvalAcc(EvalAccArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    neurons: usize,
    #[arg(long, default_value_t = 5000)]
    tokens: usize,
    #[arg(long, default_value_t = 10)]
    planted: usize,
    #[arg(long, default_value_t = 2.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.2)]
    concept_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    shared_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer index for a single-layer dataset written directly to `--out`.
    #[arg(long, default_value_t = 0, conflicts_with = "layers")]
    layer: u32,
    /// Write one dataset per layer to `<out>/layer<L>`; all layers share tokens.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<u32>>,
}

/// Method knobs shared by `rank`, `compare` and `eval-acc`.
#[derive(Args, Default)]
struct MethodArgs {
    #[arg(long)]
    iou_percentile: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stop the Gaussian greedy search after this many neurons.
    #[arg(long)]
    gaussian_max_selected: Option<usize>,
}

impl MethodArgs {
    fn apply(&self, opts: &mut RankOptions) {
        if let Some(v) = self.iou_percentile {
            opts.iou_percentile = v;
        }
        if let Some(v) = self.lambda1 {
            opts.train.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            opts.train.lambda2 = v;
        }
        if let Some(v) = self.learning_rate {
            opts.train.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            opts.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            opts.train.batch_size = v;
        }
        if self.gaussian_max_selected.is_some() {
            opts.gaussian_max_selected = self.gaussian_max_selected;
        }
    }
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    concept: String,
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the top `s` neurons in the output.
    #[arg(long)]
    top: Option<usize>,
    #[command(flatten)]
    knobs: MethodArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON config file; flags given on the command line override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory, one per layer (repeatable).
    #[arg(long = "dataset")]
    datasets: Vec<PathBuf>,
    /// `auto` or a comma-separated list of labels.
    #[arg(long)]
    concepts: Option<String>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    s_values: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_borda_order)]
    borda_order: Option<BordaOrder>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads; does not change any output byte.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    knobs: MethodArgs,
}

#[derive(Args)]
struct EvalAccArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    concept: String,
    #[arg(long, value_delimiter = ',', default_value = "probeless,iou,lasso,ridge,lca,gaussian,meanselect,random")]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "10,30,50")]
    s_values: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: MethodArgs,
}

fn parse_borda_order(s: &str) -> Result<BordaOrder, String> {
    match s {
        "descending" => Ok(BordaOrder::Descending),
        "ascending" => Ok(BordaOrder::Ascending),
        _ => Err(format!("expected `descending` or `ascending`, got `{s}`")),
    }
}

struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl From<neurank::Error> for Failure {
    fn from(e: neurank::Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
            code: 1,
        }
    }
}

fn failure(kind: &str, message: impl Into<String>) -> Failure {
    Failure {
        kind: kind.to_string(),
        message: message.into(),
        code: 1,
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    failure("IoFailure", format!("{}: {e}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| failure("SerializeFailure", e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let base = SynthConfig {
        neurons: args.neurons,
        tokens: args.tokens,
        planted: args.planted,
        delta: args.delta,
        concept_fraction: args.concept_fraction,
        noise_std: args.noise_std,
        shared_factor: args.shared_factor,
        layer: args.layer,
        seed: args.seed,
    };
    let targets: Vec<(u32, PathBuf)> = match &args.layers {
        Some(layers) => layers.iter().map(|&l| (l, args.out.join(format!("layer{l}")))).collect(),
        None => vec![(args.layer, args.out.clone())],
    };
    let mut written = Vec::new();
    for (layer, dir) in targets {
        let cfg = SynthConfig { layer, ..base.clone() };
        let (matrix, table) = synth_generate(&cfg).map_err(neurank::Error::from)?;
        save_dataset(&matrix, &table, &dir).map_err(neurank::Error::from)?;
        written.push(dir);
    }
    print_json(&json!({ "datasets": written, "planted": base.planted_ids() }))
}

fn rank(args: RankArgs) -> Result<(), Failure> {
    let (matrix, table) = load_dataset(&args.dataset).map_err(neurank::Error::from)?;
    let mut opts = RankOptions::default();
    args.knobs.apply(&mut opts);
    let ds = build_concept_dataset(&table, &args.concept, concept_seed(args.seed, &args.concept))
        .map_err(neurank::Error::from)?;
    let seed = method_seed(args.seed, &args.concept, matrix.layer(), args.method);
    let mut ranking = rank_method(args.method, &matrix, &ds, &opts, seed)?;
    if let Some(s) = args.top {
        if s == 0 || s > ranking.ordered.len() {
            return Err(failure(
                "SOutOfRange",
                format!("top {s} outside 1..={}", ranking.ordered.len()),
            ));
        }
        ranking.ordered.truncate(s);
        ranking.s = Some(s);
    }
    print_json(&ranking)
}

fn compare_config(args: &CompareArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| failure("InvalidConfig", format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if !args.datasets.is_empty() {
        cfg.datasets = args.datasets.clone();
    }
    if let Some(c) = &args.concepts {
        cfg.concepts = if c == "auto" {
            ConceptSelection::Auto(AutoTag::Auto)
        } else {
            ConceptSelection::List(c.split(',').map(str::to_string).collect())
        };
    }
    if let Some(m) = &args.methods {
        cfg.methods = m.clone();
    }
    if let Some(s) = &args.s_values {
        cfg.s_values = s.clone();
    }
    if let Some(o) = args.borda_order {
        cfg.borda_order = o;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.output {
        cfg.output = out.clone();
    }
    args.knobs.apply(&mut cfg.ranking);
    Ok(cfg)
}

fn compare(args: CompareArgs) -> Result<(), Failure> {
    let cfg = compare_config(&args)?;
    let summary = run_experiment(&cfg, args.workers)?;
    print_json(&json!({
        "output": summary.output,
        "succeeded": summary.succeeded,
        "failed": summary.failed,
        "reports": summary.reports,
    }))?;
    if summary.partial_failure() {
        return Err(Failure {
            kind: "PartialFailure".to_string(),
            message: format!(
                "{} of {} cells failed; see {}",
                summary.failed,
                summary.failed + summary.succeeded,
                summary.output.join("manifest.json").display()
            ),
            code: 2,
        });
    }
    Ok(())
}

fn eval_acc(args: EvalAccArgs) -> Result<(), Failure> {
    let (matrix, table) = load_dataset(&args.dataset).map_err(neurank::Error::from)?;
    let mut opts = RankOptions::default();
    args.knobs.apply(&mut opts);
    let ds = build_concept_dataset(&table, &args.concept, concept_seed(args.seed, &args.concept))
        .map_err(neurank::Error::from)?;
    let rankings = args
        .methods
        .iter()
        .map(|&m| rank_method(m, &matrix, &ds, &opts, method_seed(args.seed, &args.concept, matrix.layer(), m)))
        .collect::<Result<Vec<_>, _>>()?;
    let table = accuracy_sweep(&matrix, &ds, &rankings, &args.s_values).map_err(neurank::Error::from)?;
    let csv = table.to_csv();
    match &args.out {
        Some(path) => fs::write(path, csv).map_err(|e| io_failure(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Validate { dir } => {
            let meta = validate_dataset(&dir).map_err(neurank::Error::from)?;
            print_json(&meta)
        }
        Command::Rank(a) => rank(a),
        Command::Compare(a) => compare(a),
        Command::EvalAcc(a) => eval_acc(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = failure("UsageError", e.to_string().trim_end());
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            return ExitCode::from(f.code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
