//! Command-line front end: `--train`, `--eval`, `--predict`, `--inspect`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, ArgGroup, CommandFactory, Parser, ValueEnum};
use dictnet_core::deep_net::Metrics;
use dictnet_core::{
    evaluate, predict, train_ddnn, ActivationKind, Coder, DictionarySolver, InversionGuard,
    NetworkSpec, RngSeed, TestCoder, TrainedNetwork, Variant,
};

use crate::data_io::{self, DataError, Dataset, Normalization, NormalizationMode};
use crate::model_store::{self, ModelError, FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Help or version text requested by the user; not a failure.
    #[error("{0}")]
    Info(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Core(#[from] dictnet_core::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data has {data} features but the model expects {model}")]
    FeatureMismatch { data: usize, model: usize },
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Mod,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CoderArg {
    RidgeLs,
    Omp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestCoderArg {
    Mirror,
    RidgeLs,
    Omp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Table,
    Csv,
}

/// Flags of every command. A `--config` file holds `flag = value` lines with
/// the same names; flags given on the command line win.
#[derive(Debug, Clone, Parser)]
#[command(name = "dictnet", version, about = "Train and run greedy deep dictionary networks", args_override_self = true)]
#[command(group(ArgGroup::new("command").required(true).args(["train", "eval", "predict", "inspect"])))]
pub struct RunConfig {
    /// Train a network on --data and save it to --model.
    #[arg(long)]
    pub train: bool,
    /// Report metrics of --model on labeled --data.
    #[arg(long)]
    pub eval: bool,
    /// Write one predicted label per line for --data.
    #[arg(long)]
    pub predict: bool,
    /// Describe a saved model.
    #[arg(long)]
    pub inspect: bool,

    /// Flat `key = value` file with defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV file (header row) or IDX image file, optionally gzip-compressed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX label file paired with IDX --data.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Header name of the label column in CSV data.
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output file for predictions or metrics (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV file receiving the class scores of --predict, one sample per line.
    #[arg(long)]
    pub scores: Option<PathBuf>,

    #[arg(long, default_value = "ddnn1", value_parser = parse_from_str::<Variant>)]
    pub variant: Variant,
    /// Atoms per layer, comma separated; defaults to d, d/2, d/4.
    #[arg(long, value_delimiter = ',')]
    pub atoms: Vec<usize>,
    #[arg(long, default_value = "tanh", value_parser = parse_from_str::<ActivationKind>)]
    pub activation: ActivationKind,
    /// Weight of the label terms in the final layer.
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Incoherence weight of class-specific layers.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Inversion noise standard deviation during training.
    #[arg(long, default_value_t = 1e-4)]
    pub sigma: f64,
    /// Inversion clamp margin.
    #[arg(long, default_value_t = 1e-6)]
    pub delta: f64,
    /// Nonzeros per code with --coder omp (default min(atoms, 5)).
    #[arg(long)]
    pub sparsity: Option<usize>,
    #[arg(long, value_enum, default_value_t = SolverArg::Mod)]
    pub solver: SolverArg,
    #[arg(long, value_enum, default_value_t = CoderArg::RidgeLs)]
    pub coder: CoderArg,
    /// Coder used at inference time.
    #[arg(long, value_enum, default_value_t = TestCoderArg::Mirror)]
    pub test_coder: TestCoderArg,
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
    /// Maximum alternations per layer.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "unit_scale", value_parser = parse_from_str::<NormalizationMode>)]
    pub normalize: NormalizationMode,
    #[arg(long, value_enum, default_value_t = FormatArg::Table)]
    pub format: FormatArg,
}

fn parse_from_str<T>(s: &str) -> std::result::Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

const COMMANDS: [&str; 4] = ["train", "eval", "predict", "inspect"];

/// Turns `key = value` lines into flags. Blank lines and `#` comments are skipped.
fn config_args(path: &Path, cli_has_command: bool) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read --config {}: {e}", path.display())))?;
    let cmd = RunConfig::command();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        let key = key.trim().trim_start_matches("--");
        let value = value.trim();
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| CliError::Usage(format!("{}:{}: unknown key '{key}'", path.display(), i + 1)))?;
        if key == "config" {
            return Err(CliError::Usage(format!("{}:{}: config files cannot nest", path.display(), i + 1)));
        }
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            let on = value
                .parse::<bool>()
                .map_err(|_| CliError::Usage(format!("{}:{}: '{key}' takes true or false", path.display(), i + 1)))?;
            if on && !(cli_has_command && COMMANDS.contains(&key)) {
                out.push(OsString::from(format!("--{key}")));
            }
        } else {
            out.push(OsString::from(format!("--{key}")));
            out.push(OsString::from(value));
        }
    }
    Ok(out)
}

/// Parses arguments, merging a `--config` file underneath the explicit flags.
pub fn parse_args<I, T>(args: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let first = RunConfig::command()
        .ignore_errors(true)
        .try_get_matches_from(&args)
        .ok()
        .and_then(|m| m.get_one::<PathBuf>("config").cloned());
    let mut merged = args.clone();
    if let Some(path) = first {
        let cli_has_command = args.iter().any(|a| COMMANDS.iter().any(|c| a == &OsString::from(format!("--{c}"))));
        let extra = config_args(&path, cli_has_command)?;
        let program = merged.first().cloned().unwrap_or_else(|| "dictnet".into());
        merged = std::iter::once(program).chain(extra).chain(args.into_iter().skip(1)).collect();
    }
    RunConfig::try_parse_from(merged).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Info(e.to_string())
        }
        _ => {
            let rendered = e.to_string();
            let detail: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .take_while(|l| !l.is_empty())
                .collect();
            CliError::Usage(detail.join(" ").trim_start_matches("error: ").to_string())
        }
    })
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{flag} for --{command}")))
}

fn is_csv(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".csv") || name.ends_with(".csv.gz")
}

fn load_labeled(cfg: &RunConfig, command: &str) -> Result<Dataset> {
    let data = require(&cfg.data, "data", command)?;
    if is_csv(data) {
        Ok(data_io::read_csv_dataset(data, Some(&cfg.label_column))?)
    } else {
        let labels = require(&cfg.labels, "labels", command)?;
        Ok(data_io::read_idx(data, labels)?)
    }
}

fn load_unlabeled(cfg: &RunConfig) -> Result<Dataset> {
    let data = require(&cfg.data, "data", "predict")?;
    if is_csv(data) {
        match data_io::read_csv_dataset(data, Some(&cfg.label_column)) {
            Err(DataError::MissingColumn(_)) => Ok(data_io::read_csv_dataset(data, None)?),
            other => Ok(other?),
        }
    } else {
        Ok(data_io::read_idx_images(data)?)
    }
}

/// Network spec described by the flags for data of dimension `d`.
pub fn network_spec(cfg: &RunConfig, d: usize) -> NetworkSpec {
    let atoms = if cfg.atoms.is_empty() {
        vec![d.max(1), (d / 2).max(1), (d / 4).max(1)]
    } else {
        cfg.atoms.clone()
    };
    let mut spec = NetworkSpec::new(cfg.variant, &atoms, RngSeed(cfg.seed));
    for layer in &mut spec.layers {
        layer.solver = match cfg.solver {
            SolverArg::Mod => DictionarySolver::Mod,
            SolverArg::Multiplicative => DictionarySolver::Multiplicative,
        };
        layer.coder = match cfg.coder {
            CoderArg::RidgeLs => Coder::RidgeLs,
            CoderArg::Omp => Coder::Omp,
        };
        if let Some(s) = cfg.sparsity {
            layer.sparsity = s;
        }
        layer.ridge = cfg.ridge;
        layer.max_iters = cfg.iters;
        layer.tol = cfg.tol;
    }
    spec.activation = cfg.activation;
    spec.guard = InversionGuard {
        clamp_margin: cfg.delta,
        noise_sigma: cfg.sigma,
        seed: spec.guard.seed,
    };
    spec.final_mu = cfg.mu;
    spec.eta = cfg.eta;
    spec.test_coder = match cfg.test_coder {
        TestCoderArg::Mirror => TestCoder::Mirror,
        TestCoderArg::RidgeLs => TestCoder::RidgeLs { ridge: cfg.ridge },
        TestCoderArg::Omp => TestCoder::Omp {
            sparsity: cfg.sparsity.unwrap_or(5),
        },
    };
    spec
}

fn emit(cfg: &RunConfig, stdout: &mut dyn Write, text: &str) -> Result<()> {
    match &cfg.out {
        Some(path) => fs::write(path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        }),
        None => stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn say(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

pub fn run_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let model_path = require(&cfg.model, "model", "train")?;
    let raw = load_labeled(cfg, "train")?;
    let (ds, normalization) = data_io::normalize(&raw, cfg.normalize, cfg.activation, cfg.delta)?;
    let spec = network_spec(cfg, ds.dim());
    let start = Instant::now();
    let fit = train_ddnn(&ds.x, &ds.original_labels(), &spec)?;
    let elapsed = start.elapsed();
    model_store::save_model(&fit.network, &normalization, model_path)?;

    let net = &fit.network;
    let mut text = String::new();
    let traces = net
        .layers
        .iter()
        .map(|l| (&l.dictionary, &l.loss_trace))
        .chain(std::iter::once((&net.final_layer.dictionary, &net.final_loss_trace)));
    for (k, (d, trace)) in traces.enumerate() {
        let first = trace.first().copied().unwrap_or(0.0);
        let last = trace.last().copied().unwrap_or(0.0);
        let _ = writeln!(
            text,
            "layer {k}: {}x{} objective {first:.6e} -> {last:.6e} after {} sweeps",
            d.rows(),
            d.cols(),
            trace.len().saturating_sub(1)
        );
    }
    let _ = writeln!(text, "samples {} classes {}", ds.len(), net.classes());
    let _ = writeln!(text, "wall time {:.3} s", elapsed.as_secs_f64());
    let _ = writeln!(text, "model written to {}", model_path.display());
    say(stdout, &text)
}

fn prepare(cfg: &RunConfig, net: &TrainedNetwork, normalization: &Normalization, ds: &Dataset) -> Result<dictnet_core::Matrix> {
    if ds.dim() != net.input_dim() {
        return Err(CliError::FeatureMismatch {
            data: ds.dim(),
            model: net.input_dim(),
        });
    }
    let _ = cfg;
    Ok(normalization.apply(&ds.x)?)
}

fn fmt4(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.4}")
    }
}

/// `metric,value` lines: accuracy, error_rate, per_class_<label>, confusion_<true>_<predicted>.
pub fn format_metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "accuracy,{}", fmt4(m.accuracy));
    let _ = writeln!(s, "error_rate,{}", fmt4(m.error_rate));
    for (label, acc) in m.class_labels.iter().zip(&m.per_class) {
        let _ = writeln!(s, "per_class_{label},{}", fmt4(*acc));
    }
    for (i, row) in m.confusion.iter().enumerate() {
        for (j, count) in row.iter().enumerate() {
            let _ = writeln!(s, "confusion_{}_{},{count}", m.class_labels[i], m.class_labels[j]);
        }
    }
    s
}

pub fn format_metrics_table(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "accuracy    {}", fmt4(m.accuracy));
    let _ = writeln!(s, "error rate  {}", fmt4(m.error_rate));
    let _ = writeln!(s, "per-class accuracy:");
    for (label, acc) in m.class_labels.iter().zip(&m.per_class) {
        let _ = writeln!(s, "  {label:>6}  {}", fmt4(*acc));
    }
    let _ = writeln!(s, "confusion (rows: true, columns: predicted):");
    let _ = write!(s, "  {:>6}", "");
    for label in &m.class_labels {
        let _ = write!(s, " {label:>6}");
    }
    s.push('\n');
    for (label, row) in m.class_labels.iter().zip(&m.confusion) {
        let _ = write!(s, "  {label:>6}");
        for count in row {
            let _ = write!(s, " {count:>6}");
        }
        s.push('\n');
    }
    s
}

pub fn run_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let model_path = require(&cfg.model, "model", "eval")?;
    let (net, normalization) = model_store::load_model(model_path)?;
    let ds = load_labeled(cfg, "eval")?;
    let x = prepare(cfg, &net, &normalization, &ds)?;
    let metrics = evaluate(&net, &x, &ds.original_labels())?;
    let text = match cfg.format {
        FormatArg::Csv => format_metrics_csv(&metrics),
        FormatArg::Table => format_metrics_table(&metrics),
    };
    emit(cfg, stdout, &text)
}

pub fn run_predict(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let model_path = require(&cfg.model, "model", "predict")?;
    let (net, normalization) = model_store::load_model(model_path)?;
    let ds = load_unlabeled(cfg)?;
    let (labels, scores) = if ds.is_empty() {
        (Vec::new(), None)
    } else {
        let x = prepare(cfg, &net, &normalization, &ds)?;
        let p = predict(&net, &x)?;
        (p.labels, Some(p.scores))
    };
    let mut text = String::new();
    for l in &labels {
        let _ = writeln!(text, "{l}");
    }
    emit(cfg, stdout, &text)?;
    if let Some(path) = &cfg.scores {
        let mut s = String::new();
        if let Some(scores) = scores {
            for c in 0..scores.cols() {
                let row: Vec<String> = scores.column(c).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "{}", row.join(","));
            }
        }
        fs::write(path, s).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

pub fn run_inspect(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let model_path = require(&cfg.model, "model", "inspect")?;
    let header = model_store::read_header(model_path)?;
    let (net, _) = model_store::load_model(model_path)?;
    let mut s = String::new();
    let _ = writeln!(s, "format version {FORMAT_VERSION}");
    let _ = writeln!(s, "variant {}", match header.variant {
        Variant::Ddnn1 => "ddnn1",
        Variant::Ddnn2 => "ddnn2",
    });
    let shapes = header.dictionary_shapes();
    let (last, hidden) = shapes.split_last().expect("a model has a final layer");
    for (k, (rows, cols)) in hidden.iter().enumerate() {
        let _ = writeln!(s, "layer {k}: {rows} x {cols}");
    }
    let _ = writeln!(s, "final layer: {} x {} (mu {})", last.0, last.1, header.final_mu);
    let _ = writeln!(s, "activation {}", header.activation.name());
    let _ = writeln!(
        s,
        "guard clamp {} noise {} seed {}",
        header.guard.clamp_margin, header.guard.noise_sigma, header.guard.seed.0
    );
    let mapping: Vec<String> = header
        .class_labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}={l}"))
        .collect();
    let _ = writeln!(s, "classes {}", mapping.join(" "));
    let _ = writeln!(s, "normalization {:?}", header.normalization.mode());
    let _ = writeln!(s, "rng {}", header.rng_algorithm);
    let _ = writeln!(s, "greedy objective {:.6e}", net.greedy_objective());
    say(stdout, &s)
}

pub fn run(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    if cfg.train {
        run_train(cfg, stdout)
    } else if cfg.eval {
        run_eval(cfg, stdout)
    } else if cfg.predict {
        run_predict(cfg, stdout)
    } else {
        run_inspect(cfg, stdout)
    }
}

/// Parses `args` and runs the selected command.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cfg = parse_args(args)?;
    run(&cfg, stdout)
}
