//! `tinyptq` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 malformed input file, 3 runtime failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use tinyptq_core::io::{self, Dataset};
use tinyptq_core::metrics::{emit_report, evaluate, model_stats, CostReport, RunRecord};
use tinyptq_core::models::{build_model, ParamSet};
use tinyptq_core::pipeline::{run_pipeline, InitMethod, PipelineConfig, Strategy, UnitGranularity};
use tinyptq_core::{Error, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed of the random weights used when no weight file is given.
const RANDOM_WEIGHT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "tinyptq", version, about = "Post-training quantization for tinyML CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print MACs, parameters, peak activation, BOP and peak memory of a model.
    Stats(StatsArgs),
    /// Run the quantization pipeline and save the quantized model plus run log.
    Quantize(QuantizeArgs),
    /// Top-1 accuracy of a float or quantized model on a labelled dataset.
    Eval(EvalArgs),
    /// Seed x bitwidth x strategy sweep driven by a JSON config.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 8)]
    bits_w: u32,
    #[arg(long, default_value_t = 8)]
    bits_a: u32,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Minmax,
    Mse,
}

impl From<InitArg> for InitMethod {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::Minmax => InitMethod::Minmax,
            InitArg::Mse => InitMethod::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptArg {
    Qparam,
    Weights,
    Bits,
    Round,
}

impl From<OptArg> for Strategy {
    fn from(v: OptArg) -> Self {
        match v {
            OptArg::Qparam => Strategy::Qparam,
            OptArg::Weights => Strategy::Weights,
            OptArg::Bits => Strategy::Bits,
            OptArg::Round => Strategy::Round,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Layer,
    Block,
}

impl From<GranularityArg> for UnitGranularity {
    fn from(v: GranularityArg) -> Self {
        match v {
            GranularityArg::Layer => UnitGranularity::Layer,
            GranularityArg::Block => UnitGranularity::Block,
        }
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: String,
    /// Float weight container; seeded random weights when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Dataset container whose `inputs` serve as calibration data.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 8)]
    bits_w: u32,
    #[arg(long, default_value_t = 8)]
    bits_a: u32,
    /// Initialization for both weights and activations.
    #[arg(long, value_enum, default_value_t = InitArg::Mse)]
    init: InitArg,
    /// Overrides `--init` for weights.
    #[arg(long, value_enum)]
    init_w: Option<InitArg>,
    /// Overrides `--init` for activations.
    #[arg(long, value_enum)]
    init_a: Option<InitArg>,
    #[arg(long)]
    cle: bool,
    #[arg(long, value_enum, default_value_t = OptArg::Round)]
    opt: OptArg,
    #[arg(long, value_enum, default_value_t = GranularityArg::Layer)]
    granularity: GranularityArg,
    #[arg(long)]
    bias_tune: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    /// Strategy learning rate; strategy default when omitted.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1024)]
    calib_size: usize,
    /// Output container; the run log goes to `<out>.log.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: String,
    /// Float weights or a quantized model container.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Entry point shared by the binary and the tests.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Stats(a) => stats(&a),
        Command::Quantize(a) => quantize(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownModel(_) => EXIT_USAGE,
        Error::Format { .. } | Error::Json(_) => EXIT_FORMAT,
        _ => EXIT_RUNTIME,
    }
}

fn stats(a: &StatsArgs) -> Result<(), Error> {
    let cfg = PipelineConfig {
        bits_w: a.bits_w,
        bits_a: a.bits_a,
        ..Default::default()
    };
    cfg.validate()?;
    let graph = build_model(&a.model, None, RANDOM_WEIGHT_SEED)?;
    let report = CostReport::new(&model_stats(&graph)?, a.bits_w, a.bits_a);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", format_cost(&report));
    }
    Ok(())
}

fn format_cost(r: &CostReport) -> String {
    let mut s = format!("model {} ({}W{}A)\n", r.model, r.bits_w, r.bits_a);
    let width = r.layers.iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
    for l in &r.layers {
        s += &format!("  {:<width$}  {:>12}\n", l.name, l.macs);
    }
    let rows = [
        ("MACs (conv/dense)", r.macs),
        ("aux ops (bias/pool)", r.aux_ops),
        ("total ops", r.total_ops),
        ("params (BN folded)", r.params),
        ("params (with BN)", r.params_prefold),
        ("peak activation", r.peak_activation),
        ("BOP", r.bop),
        ("peak memory bytes", r.peak_memory_bytes),
    ];
    for (k, v) in rows {
        s += &format!("{k:<20} {v:>14}\n");
    }
    s
}

fn load_float_model(model: &str, weights: Option<&Path>) -> Result<tinyptq_core::engine::Graph, Error> {
    let params: Option<ParamSet> = weights.map(io::load_weights).transpose()?;
    if params.is_none() {
        eprintln!("note: no weight file given, using random weights (seed {RANDOM_WEIGHT_SEED})");
    }
    build_model(model, params.as_ref(), RANDOM_WEIGHT_SEED)
}

fn quantize(a: &QuantizeArgs) -> Result<(), Error> {
    let config = PipelineConfig {
        bits_w: a.bits_w,
        bits_a: a.bits_a,
        init_w: a.init_w.unwrap_or(a.init).into(),
        init_a: a.init_a.unwrap_or(a.init).into(),
        cle: a.cle,
        strategy: a.opt.into(),
        granularity: a.granularity.into(),
        bias_tune: a.bias_tune,
        calib_size: a.calib_size,
        iters: a.iters,
        lr: a.lr,
        batch_size: a.batch_size.min(a.calib_size),
        seed: a.seed,
        ..Default::default()
    };
    config.validate()?;
    let graph = load_float_model(&a.model, a.weights.as_deref())?;
    let calib = io::load_dataset(&a.calib, None)?;
    let (q, log) = run_pipeline(&graph, &calib.inputs, &config)?;
    io::save_quantized(&q, &a.out)?;
    let log_path = log_path(&a.out);
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)? + "\n")?;
    for u in &log.units {
        println!(
            "{:<12} mse {:.6e} -> {:.6e} (best at {})",
            u.unit, u.initial_mse, u.final_mse, u.best_iteration
        );
    }
    if let Some((before, after)) = log.bias {
        println!("bias tuning  mse {before:.6e} -> {after:.6e}");
    }
    println!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

/// Run log location for a quantized model file.
pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

fn labels(ds: &Dataset, path: &Path) -> Result<Vec<i64>, Error> {
    ds.labels
        .clone()
        .ok_or_else(|| Error::Config(format!("{} has no labels", path.display())))
}

fn eval(a: &EvalArgs) -> Result<(), Error> {
    let ds = io::load_dataset(&a.dataset, a.limit)?;
    let labels = labels(&ds, &a.dataset)?;
    let container = a.weights.as_deref().map(io::Container::load).transpose()?;
    let acc = match &container {
        Some(c) if io::is_quantized(c) => {
            let q = io::quantized_from_container(&a.model, c)?;
            evaluate(&q, &ds.inputs, &labels)?
        }
        Some(c) => {
            let graph = build_model(&a.model, Some(&io::params_from_container(c)?), RANDOM_WEIGHT_SEED)?;
            evaluate(&graph, &ds.inputs, &labels)?
        }
        None => evaluate(&load_float_model(&a.model, None)?, &ds.inputs, &labels)?,
    };
    let correct = (acc * labels.len() as f64).round() as usize;
    println!("accuracy {acc:.4} ({correct}/{})", labels.len());
    Ok(())
}

/// A single value or a list of values in the ablation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Ablation sweep definition. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub model: String,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    pub calib: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_calib_size")]
    pub calib_size: usize,
    #[serde(default)]
    pub eval_limit: Option<usize>,
    pub seeds: Vec<u64>,
    /// `[bits_w, bits_a]` pairs.
    pub bitwidths: Vec<[u32; 2]>,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_init")]
    pub init_w: OneOrMany<InitMethod>,
    #[serde(default = "default_init")]
    pub init_a: OneOrMany<InitMethod>,
    #[serde(default = "default_false")]
    pub cle: OneOrMany<bool>,
    #[serde(default = "default_granularity")]
    pub granularity: OneOrMany<UnitGranularity>,
    #[serde(default = "default_true")]
    pub bias_tune: OneOrMany<bool>,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub out_csv: PathBuf,
    pub out_json: PathBuf,
}

fn default_calib_size() -> usize {
    1024
}
fn default_init() -> OneOrMany<InitMethod> {
    OneOrMany::One(InitMethod::Mse)
}
fn default_false() -> OneOrMany<bool> {
    OneOrMany::One(false)
}
fn default_true() -> OneOrMany<bool> {
    OneOrMany::One(true)
}
fn default_granularity() -> OneOrMany<UnitGranularity> {
    OneOrMany::One(UnitGranularity::Layer)
}
fn default_iters() -> usize {
    2000
}
fn default_batch() -> usize {
    32
}

impl AblateConfig {
    /// Every pipeline configuration of the sweep, seeds innermost.
    pub fn pipeline_configs(&self) -> Vec<PipelineConfig> {
        let mut out = Vec::new();
        for &[bits_w, bits_a] in &self.bitwidths {
            for &strategy in &self.strategies {
                for granularity in self.granularity.values() {
                    for init_w in self.init_w.values() {
                        for init_a in self.init_a.values() {
                            for cle in self.cle.values() {
                                for bias_tune in self.bias_tune.values() {
                                    for &seed in &self.seeds {
                                        out.push(PipelineConfig {
                                            bits_w,
                                            bits_a,
                                            init_w,
                                            init_a,
                                            cle,
                                            strategy,
                                            granularity,
                                            bias_tune,
                                            calib_size: self.calib_size,
                                            iters: self.iters,
                                            lr: self.lr,
                                            batch_size: self.batch_size.min(self.calib_size),
                                            seed,
                                            ..Default::default()
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn strategy_label(c: &PipelineConfig) -> String {
    match c.granularity {
        UnitGranularity::Layer => c.strategy.name().to_string(),
        UnitGranularity::Block => format!("{}-block", c.strategy.name()),
    }
}

fn init_label(c: &PipelineConfig) -> String {
    if c.init_w == c.init_a {
        c.init_w.name().to_string()
    } else {
        format!("{}/{}", c.init_w.name(), c.init_a.name())
    }
}

fn ablate(a: &AblateArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg: AblateConfig = serde_json::from_str(&text)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let configs = cfg.pipeline_configs();
    if configs.is_empty() {
        return Err(Error::Config("the sweep is empty".into()));
    }
    for c in &configs {
        c.validate()?;
    }

    let graph = load_float_model(&cfg.model, cfg.weights.as_deref().map(resolve).as_deref())?;
    let calib: Tensor = io::load_dataset(resolve(&cfg.calib), None)?.inputs;
    let test_path = resolve(&cfg.dataset);
    let test = io::load_dataset(&test_path, cfg.eval_limit)?;
    let labels = labels(&test, &test_path)?;
    let stats = model_stats(&graph)?;

    let mut fp_accuracy = BTreeMap::new();
    fp_accuracy.insert(cfg.model.clone(), evaluate(&graph, &test.inputs, &labels)?);

    let mut runs = Vec::with_capacity(configs.len());
    for c in &configs {
        let (q, _) = run_pipeline(&graph, &calib, c)?;
        let accuracy = evaluate(&q, &test.inputs, &labels)?;
        let cost = CostReport::new(&stats, c.bits_w, c.bits_a);
        let record = RunRecord {
            model: cfg.model.clone(),
            b_w: c.bits_w,
            b_a: c.bits_a,
            strategy: strategy_label(c),
            init: init_label(c),
            cle: c.cle,
            bias_tune: c.bias_tune,
            seed: c.seed,
            accuracy,
            macs: cost.macs,
            params: cost.params,
            peak_activation: cost.peak_activation,
            bop: cost.bop,
            peak_memory_bytes: cost.peak_memory_bytes,
        };
        eprintln!(
            "{}W{}A {} init={} cle={} bias={} seed={}: accuracy {:.4}",
            record.b_w, record.b_a, record.strategy, record.init, record.cle, record.bias_tune, record.seed, accuracy
        );
        runs.push(record);
    }

    let report = emit_report(&runs, &fp_accuracy);
    std::fs::write(resolve(&cfg.out_csv), report.runs_csv()?)?;
    std::fs::write(resolve(&cfg.out_json), report.to_json()? + "\n")?;
    print!("{}", report.summary_csv()?);
    Ok(())
}
