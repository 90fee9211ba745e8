//! Command-line surface: argument parsing, CSV input/output and the fit document.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{PlzipError, Result};
use crate::fit::{em_fit, FitConfig, FitResult, Predictor, ScoreBlocks};
use crate::leverage::Decay;
use crate::loss::{LossFamily, LossSpec};
use crate::mc::{self, BandwidthPolicy, Scheme, SchemeConfig, StudyConfig};
use crate::model::{posterior_w, Dataset, RowMatrix, ThetaEstimate};
use crate::numeric::logistic;
use crate::smoothing::{cv_bandwidth, default_grid, log_spaced, CvOutcome, KernelConfig, KernelKind};

/// Version of the fit document layout.
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status for a fit that stopped before converging.
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_INPUT_ERROR: u8 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "plzip",
    about = "Robust partially linear zero-inflated Poisson regression",
    version = long_version(),
)]
pub struct Cli {
    /// Worker threads for parallel work (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

const fn long_version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), " (fit document schema 1)")
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model to a CSV file and write a JSON fit document.
    Fit(FitCmd),
    /// Evaluate a stored fit at the rows of a CSV file.
    Predict(PredictCmd),
    /// Draw one sample from a simulation scheme.
    Simulate(SimulateCmd),
    /// Monte Carlo study over schemes and losses, or the held-out
    /// prediction-error protocol when `--data` is given.
    Study(StudyCmd),
    /// Cross-validated bandwidth selection.
    Cv(CvCmd),
    /// Conditional Fisher-consistency residuals of a loss over a grid of u.
    Check(CheckCmd),
}

#[derive(Debug, Clone, Args)]
pub struct ColumnArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Poisson-part columns, comma separated (default: every `x<k>` column).
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    /// Logistic-part columns, comma separated (default: every `z<k>` column).
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    #[arg(long, default_value = "t")]
    pub t: String,
    /// Do not prepend an intercept to the logistic part.
    #[arg(long)]
    pub no_z_intercept: bool,
}

#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    #[arg(long, default_value = "mt")]
    pub loss: LossFamily,
    /// Tuning constant (defaults: 0.5 for ch, 2.9 for mt).
    #[arg(long)]
    pub c: Option<f64>,
}

impl LossArgs {
    fn spec(&self) -> Result<LossSpec> {
        LossSpec::new(self.loss, self.c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitTuning {
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol_param: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol_score: f64,
    /// Random restarts per local problem at initialization.
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Seed of the random restarts.
    #[arg(long, default_value_t = 0)]
    pub fit_seed: u64,
    /// Down-weight high-leverage x in the logistic step (default: on for robust losses).
    #[arg(long, action = clap::ArgAction::Set)]
    pub guard_false_zeros: Option<bool>,
    /// Use leverage weights (default: on for robust losses).
    #[arg(long, action = clap::ArgAction::Set)]
    pub leverage: Option<bool>,
    /// Leverage weight past the cutoff: smooth or hard.
    #[arg(long, default_value = "smooth", value_parser = parse_decay)]
    pub decay: Decay,
}

impl FitTuning {
    fn config(&self) -> Result<FitConfig> {
        let cfg = FitConfig {
            max_em_iters: self.max_iter,
            tol_param: self.tol_param,
            tol_score: self.tol_score,
            restarts: self.restarts,
            seed: self.fit_seed,
            guard_false_zeros: self.guard_false_zeros,
            leverage: self.leverage,
            decay: self.decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_decay(s: &str) -> std::result::Result<Decay, String> {
    match s {
        "smooth" => Ok(Decay::Smooth),
        "hard" => Ok(Decay::Hard),
        _ => Err(format!("unknown decay '{s}' (expected smooth or hard)")),
    }
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, conflicts_with = "cv")]
    pub bandwidth: Option<f64>,
    /// Select the bandwidth by k-fold cross-validation with this many folds.
    #[arg(long)]
    pub cv: Option<usize>,
    /// Candidate bandwidths for `--cv`: `default`, `a,b,c` or `log:lo:hi:count`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tuning: FitTuning,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictCmd {
    #[arg(long)]
    pub fit: PathBuf,
    /// CSV holding the columns named in the fit document (the response is optional).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    #[arg(long)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generator stream; a study uses the replication index.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyCmd {
    #[arg(long, value_delimiter = ',', default_value = "c0,c1,c2,c3")]
    pub schemes: Vec<Scheme>,
    #[arg(long, value_delimiter = ',', default_value = "ml,ch,mt")]
    pub losses: Vec<LossFamily>,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// One bandwidth for every loss.
    #[arg(long, conflicts_with_all = ["bandwidths", "cv_each"])]
    pub bandwidth: Option<f64>,
    /// Bandwidth per loss, e.g. `ml=0.126,mt=0.135,ch=0.159`.
    #[arg(long, value_delimiter = ',', conflicts_with = "cv_each")]
    pub bandwidths: Vec<String>,
    /// Replications cross-validated before the bandwidth is frozen.
    #[arg(long, default_value_t = 10)]
    pub cv_pilot: usize,
    /// Cross-validate every replication instead of freezing a pilot average.
    #[arg(long)]
    pub cv_each: bool,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Candidate bandwidths: `default`, `a,b,c` or `log:lo:hi:count`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Add an intercept to the simulated logistic part.
    #[arg(long)]
    pub z_intercept: bool,
    #[command(flatten)]
    pub tuning: FitTuning,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub summary: Option<PathBuf>,

    /// Held-out prediction-error mode on this CSV instead of simulation.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub y: String,
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub z: Vec<String>,
    #[arg(long, default_value = "t")]
    pub t: String,
    #[arg(long)]
    pub no_z_intercept: bool,
    /// Fraction trimmed from each tail of the per-fold squared errors.
    #[arg(long, default_value_t = 0.2)]
    pub trim: f64,
}

#[derive(Debug, Args)]
pub struct CvCmd {
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Candidate bandwidths: `default`, `a,b,c` or `log:lo:hi:count`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Seed of the fold assignment.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tuning: FitTuning,
    /// Criterion per candidate as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckCmd {
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub u_min: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    pub u_max: f64,
    #[arg(long, default_value_t = 0.25)]
    pub u_step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

// ---- fit document ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnBindings {
    pub y: String,
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub t: String,
    /// A column of ones leads the stored logistic design.
    pub z_intercept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRecord {
    pub folds: usize,
    pub seed: u64,
    /// `(h, criterion)`; `null` where a fold failed.
    pub curve: Vec<(f64, Option<f64>)>,
}

/// Training sample and posterior weights, so a document can be used on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub y: Vec<u64>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema_version: u32,
    pub tool_version: String,
    pub loss: LossFamily,
    pub c: Option<f64>,
    pub kernel: KernelKind,
    pub bandwidth: f64,
    pub cv: Option<CvRecord>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `(t, m̂(t))` per training row.
    pub m: Vec<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: Option<f64>,
    pub scores: Option<ScoreBlocks>,
    pub warnings: Vec<String>,
    pub columns: ColumnBindings,
    pub config: FitConfig,
    pub training: TrainingData,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl FitDocument {
    pub fn new(fit: &FitResult, data: &Dataset, columns: ColumnBindings, cv: Option<CvRecord>) -> Self {
        let s = fit.scores;
        let scores_finite = [s.local, s.refit, s.beta, s.gamma].iter().all(|v| v.is_finite());
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            loss: fit.theta.loss,
            c: fit.theta.c,
            kernel: KernelKind::Gaussian,
            bandwidth: fit.theta.h,
            cv,
            beta: fit.theta.beta.clone(),
            gamma: fit.theta.gamma.clone(),
            m: fit.theta.m_values.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            score_norm: finite(fit.score_norm),
            scores: scores_finite.then_some(s),
            warnings: fit.warnings.clone(),
            columns,
            config: fit.config.clone(),
            training: TrainingData {
                y: data.y.clone(),
                x: (0..data.len()).map(|i| data.x.row(i).to_vec()).collect(),
                z: (0..data.len()).map(|i| data.z.row(i).to_vec()).collect(),
                t: data.t.clone(),
                w: fit.w.clone(),
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(PlzipError::InvalidData(format!(
                "unsupported fit document schema {}",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    pub fn spec(&self) -> Result<LossSpec> {
        LossSpec::new(self.loss, self.c)
    }

    pub fn theta(&self) -> ThetaEstimate {
        ThetaEstimate {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            m_values: self.m.clone(),
            h: self.bandwidth,
            loss: self.loss,
            c: self.c,
        }
    }

    pub fn training_data(&self) -> Result<Dataset> {
        let tr = &self.training;
        Dataset::new(
            tr.y.clone(),
            RowMatrix::from_rows(&tr.x, self.beta.len()),
            RowMatrix::from_rows(&tr.z, self.gamma.len()),
            tr.t.clone(),
        )
    }

    pub fn predictor(&self) -> Result<Predictor> {
        let data = self.training_data()?;
        Predictor::from_parts(&data, &self.spec()?, &self.theta(), &self.training.w, &self.config)
    }
}

// ---- CSV input ----

/// A CSV file read into memory, keeping the line of every record.
pub struct Table {
    pub headers: Vec<String>,
    records: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| PlzipError::Argument(format!("cannot open {}: {e}", path.display())))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = rdr.headers()?.iter().map(str::to_string).collect();
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                PlzipError::Input {
                    line,
                    message: e.to_string(),
                }
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            records.push((line, rec));
        }
        if records.is_empty() {
            return Err(PlzipError::Input {
                line: 1,
                message: "no data rows".into(),
            });
        }
        Ok(Self { headers, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| PlzipError::Input {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    }

    /// Columns named `<prefix><digits>`, in file order.
    pub fn numbered(&self, prefix: &str) -> Vec<String> {
        self.headers
            .iter()
            .filter(|h| {
                h.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
            })
            .cloned()
            .collect()
    }

    pub fn reals(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.index(name)?;
        self.records
            .iter()
            .map(|(line, rec)| {
                let cell = rec.get(j).unwrap_or("");
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(PlzipError::Input {
                        line: *line,
                        message: format!("column '{name}': '{cell}' is not a finite number"),
                    }),
                }
            })
            .collect()
    }

    pub fn counts(&self, name: &str) -> Result<Vec<u64>> {
        let j = self.index(name)?;
        self.records
            .iter()
            .map(|(line, rec)| {
                let cell = rec.get(j).unwrap_or("");
                if let Ok(v) = cell.parse::<u64>() {
                    return Ok(v);
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 => Ok(v as u64),
                    _ => Err(PlzipError::Input {
                        line: *line,
                        message: format!("column '{name}': '{cell}' is not a nonnegative integer count"),
                    }),
                }
            })
            .collect()
    }

    fn matrix(&self, names: &[String], intercept: bool) -> Result<RowMatrix> {
        let cols = names.iter().map(|c| self.reals(c)).collect::<Result<Vec<_>>>()?;
        let width = names.len() + usize::from(intercept);
        let mut data = Vec::with_capacity(self.len() * width);
        for i in 0..self.len() {
            if intercept {
                data.push(1.0);
            }
            data.extend(cols.iter().map(|c| c[i]));
        }
        Ok(RowMatrix::new(self.len(), width, data))
    }
}

/// Resolves default column lists and reads the dataset.
pub fn load_dataset(cols: &ColumnArgs) -> Result<(Dataset, ColumnBindings)> {
    let table = Table::read(&cols.data)?;
    let x = if cols.x.is_empty() { table.numbered("x") } else { cols.x.clone() };
    let z = if cols.z.is_empty() { table.numbered("z") } else { cols.z.clone() };
    if x.is_empty() {
        return Err(PlzipError::Argument("no Poisson-part columns (use --x)".into()));
    }
    let bindings = ColumnBindings {
        y: cols.y.clone(),
        x,
        z,
        t: cols.t.clone(),
        z_intercept: !cols.no_z_intercept,
    };
    if bindings.z.is_empty() && !bindings.z_intercept {
        return Err(PlzipError::Argument("the logistic part has no columns".into()));
    }
    let data = Dataset::new(
        table.counts(&bindings.y)?,
        table.matrix(&bindings.x, false)?,
        table.matrix(&bindings.z, bindings.z_intercept)?,
        table.reals(&bindings.t)?,
    )?;
    Ok((data, bindings))
}

/// `default`, a comma list, or `log:lo:hi:count`.
pub fn parse_grid(spec: &str, t: &[f64]) -> Result<Vec<f64>> {
    let bad = || PlzipError::Argument(format!("bad bandwidth grid '{spec}'"));
    let grid = if spec == "default" {
        default_grid(t)
    } else if let Some(rest) = spec.strip_prefix("log:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].parse().map_err(|_| bad())?;
        let count: usize = parts[2].parse().map_err(|_| bad())?;
        if count == 0 || !(lo > 0.0 && hi >= lo) {
            return Err(bad());
        }
        log_spaced(lo, hi, count)
    } else {
        spec.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(bad());
    }
    Ok(grid)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

// ---- commands ----

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PlzipError::Argument("--threads must be at least 1".into()));
        }
        // a second initialization in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Fit(c) => cmd_fit(&c),
        Command::Predict(c) => cmd_predict(&c).map(|_| 0),
        Command::Simulate(c) => cmd_simulate(&c).map(|_| 0),
        Command::Study(c) => cmd_study(&c).map(|_| 0),
        Command::Cv(c) => cmd_cv(&c).map(|_| 0),
        Command::Check(c) => cmd_check(&c).map(|_| 0),
    }
}

pub fn cmd_fit(cmd: &FitCmd) -> Result<u8> {
    let cfg = cmd.tuning.config()?;
    let spec = cmd.loss.spec()?;
    let (data, bindings) = load_dataset(&cmd.columns)?;
    let (h, cv) = match (cmd.bandwidth, cmd.cv) {
        (Some(h), None) => (h, None),
        (None, Some(folds)) => {
            let grid = parse_grid(&cmd.grid, &data.t)?;
            let out = cv_bandwidth(&data, &spec, folds, &grid, cmd.seed, &cfg)?;
            let record = CvRecord {
                folds,
                seed: cmd.seed,
                curve: out.curve,
            };
            (out.h, Some(record))
        }
        _ => {
            return Err(PlzipError::Argument(
                "give exactly one of --bandwidth or --cv".into(),
            ))
        }
    };
    let fit = em_fit(&data, &spec, &KernelConfig::gaussian(h)?, &cfg)?;
    let doc = FitDocument::new(&fit, &data, bindings, cv);
    let mut out = create(&cmd.out)?;
    out.write_all(doc.to_json()?.as_bytes())?;
    out.flush()?;
    eprintln!(
        "loss={} h={} iterations={} converged={} score_norm={:.3e}",
        doc.loss, h, fit.iterations, fit.converged, fit.score_norm
    );
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if fit.converged { 0 } else { EXIT_NOT_CONVERGED })
}

pub fn cmd_predict(cmd: &PredictCmd) -> Result<()> {
    let text = std::fs::read_to_string(&cmd.fit)?;
    let doc = FitDocument::from_json(&text)?;
    let predictor = doc.predictor()?;
    let table = Table::read(&cmd.data)?;
    let cols = &doc.columns;
    let x = table.matrix(&cols.x, false)?;
    let z = table.matrix(&cols.z, cols.z_intercept)?;
    let t = table.reals(&cols.t)?;
    let y = if table.has(&cols.y) { Some(table.counts(&cols.y)?) } else { None };
    let mut out = csv_writer(&cmd.out)?;
    let mut header = vec!["row", "t", "m", "pi", "lambda", "mean"];
    if y.is_some() {
        header.extend(["y", "w"]);
    }
    out.write_record(&header)?;
    for i in 0..table.len() {
        let m = predictor.predict_m(t[i])?;
        let (zg, log_mean) = predictor.predictors(x.row(i), z.row(i), m);
        let pi = logistic(zg);
        let lambda = log_mean.exp();
        let mut rec = vec![
            i.to_string(),
            t[i].to_string(),
            m.to_string(),
            pi.to_string(),
            lambda.to_string(),
            ((1.0 - pi) * lambda).to_string(),
        ];
        if let Some(y) = &y {
            rec.push(y[i].to_string());
            rec.push(posterior_w(y[i], zg, log_mean).to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub const SIMULATE_HEADER: [&str; 9] = ["y", "x1", "x2", "z1", "z2", "t", "truth_w", "truth_m", "truth_contaminated"];

pub fn cmd_simulate(cmd: &SimulateCmd) -> Result<()> {
    let cfg = SchemeConfig {
        stream: cmd.stream,
        ..SchemeConfig::new(cmd.scheme, cmd.n, cmd.seed)
    };
    let (data, truth) = mc::gen_scheme(&cfg)?;
    let mut out = csv_writer(&cmd.out)?;
    out.write_record(SIMULATE_HEADER)?;
    for i in 0..data.len() {
        let x = data.x.row(i);
        let z = data.z.row(i);
        out.write_record([
            data.y[i].to_string(),
            x[0].to_string(),
            x[1].to_string(),
            z[0].to_string(),
            z[1].to_string(),
            data.t[i].to_string(),
            u8::from(truth.w[i]).to_string(),
            truth.m[i].to_string(),
            u8::from(truth.contaminated[i]).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn parse_bandwidths(items: &[String]) -> Result<Vec<(LossFamily, f64)>> {
    items
        .iter()
        .map(|item| {
            let (loss, h) = item
                .split_once('=')
                .ok_or_else(|| PlzipError::Argument(format!("expected loss=h, got '{item}'")))?;
            let loss: LossFamily = loss.trim().parse()?;
            let h: f64 = h
                .trim()
                .parse()
                .map_err(|_| PlzipError::Argument(format!("bad bandwidth in '{item}'")))?;
            Ok((loss, h))
        })
        .collect()
}

pub fn cmd_study(cmd: &StudyCmd) -> Result<()> {
    let cfg = cmd.tuning.config()?;
    if let Some(path) = &cmd.data {
        return prediction_error_study(cmd, path, &cfg);
    }
    // the simulated t is uniform on [−2, 2]
    let grid = parse_grid(&cmd.grid, &[-2.0, 2.0])?;
    let bandwidth = if let Some(h) = cmd.bandwidth {
        BandwidthPolicy::Fixed(h)
    } else if !cmd.bandwidths.is_empty() {
        BandwidthPolicy::PerLoss(parse_bandwidths(&cmd.bandwidths)?)
    } else if cmd.cv_each {
        BandwidthPolicy::PerReplication { folds: cmd.folds, grid }
    } else {
        BandwidthPolicy::Frozen {
            folds: cmd.folds,
            grid,
            pilot: cmd.cv_pilot,
        }
    };
    let study = StudyConfig {
        schemes: cmd.schemes.clone(),
        losses: cmd.losses.clone(),
        reps: cmd.reps,
        n: cmd.n,
        seed: cmd.seed,
        bandwidth,
        fit: cfg,
        z_intercept: cmd.z_intercept,
        fixed_point_check: false,
    };
    let output = mc::run_study(&study)?;
    for (loss, h) in &output.bandwidths {
        eprintln!("bandwidth {loss}: {h}");
    }
    mc::write_rows(create(&cmd.out)?, &output.rows)?;
    if let Some(path) = &cmd.summary {
        mc::write_summary(create(path)?, &mc::summarize(&output.rows))?;
    }
    let failed = output.rows.iter().filter(|r| r.error.is_some()).count();
    let unconverged = output.rows.iter().filter(|r| r.error.is_none() && !r.converged).count();
    eprintln!("{} rows, {failed} failed, {unconverged} not converged", output.rows.len());
    Ok(())
}

fn prediction_error_study(cmd: &StudyCmd, path: &Path, cfg: &FitConfig) -> Result<()> {
    let columns = ColumnArgs {
        data: path.to_path_buf(),
        y: cmd.y.clone(),
        x: cmd.x.clone(),
        z: cmd.z.clone(),
        t: cmd.t.clone(),
        no_z_intercept: cmd.no_z_intercept,
    };
    let (data, _) = load_dataset(&columns)?;
    let per_loss = parse_bandwidths(&cmd.bandwidths)?;
    let mut out = csv_writer(&cmd.out)?;
    out.write_record(["loss", "h", "fold", "trimmed_squared_error"])?;
    for &loss in &cmd.losses {
        let spec = LossSpec::new(loss, None)?;
        let h = match (cmd.bandwidth, per_loss.iter().find(|(l, _)| *l == loss)) {
            (Some(h), _) => h,
            (None, Some(&(_, h))) => h,
            (None, None) => {
                let grid = parse_grid(&cmd.grid, &data.t)?;
                cv_bandwidth(&data, &spec, cmd.folds, &grid, cmd.seed, cfg)?.h
            }
        };
        let errors = mc::prediction_error(&data, &spec, h, cmd.folds, cmd.seed, cmd.trim, cfg)?;
        for (f, e) in errors.iter().enumerate() {
            out.write_record([loss.to_string(), h.to_string(), f.to_string(), e.to_string()])?;
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        eprintln!("{loss}: h={h} mean trimmed squared error {mean}");
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_cv(cmd: &CvCmd) -> Result<CvOutcome> {
    let cfg = cmd.tuning.config()?;
    let spec = cmd.loss.spec()?;
    let (data, _) = load_dataset(&cmd.columns)?;
    let grid = parse_grid(&cmd.grid, &data.t)?;
    let outcome = cv_bandwidth(&data, &spec, cmd.folds, &grid, cmd.seed, &cfg)?;
    if let Some(path) = &cmd.out {
        let mut out = csv_writer(path)?;
        out.write_record(["h", "criterion"])?;
        for (h, v) in &outcome.curve {
            out.write_record([h.to_string(), v.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        out.flush()?;
    }
    println!("{}", outcome.h);
    Ok(outcome)
}

pub fn cmd_check(cmd: &CheckCmd) -> Result<()> {
    if !(cmd.u_step > 0.0 && cmd.u_max >= cmd.u_min) {
        return Err(PlzipError::Argument("need u_step > 0 and u_max ≥ u_min".into()));
    }
    let spec = cmd.loss.spec()?;
    let count = ((cmd.u_max - cmd.u_min) / cmd.u_step + 1e-9).floor() as usize + 1;
    let mut out = csv_writer(&cmd.out)?;
    out.write_record(["u", "residual"])?;
    let mut worst: f64 = 0.0;
    for k in 0..count {
        let u = cmd.u_min + k as f64 * cmd.u_step;
        let r = spec.fisher_consistency_check(u);
        worst = worst.max(r.abs());
        out.write_record([u.to_string(), r.to_string()])?;
    }
    out.flush()?;
    println!("{worst}");
    Ok(())
}
