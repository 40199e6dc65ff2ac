//! Command-line interface. Machine-readable output goes to standard output
//! as one JSON object (or JSON lines); progress goes to standard error.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration or usage,
//! 3 data or I/O, 4 incompatible checkpoint.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, load_for_config};
use crate::ctc::{ctc_bruteforce, ctc_loss, FrameProbs, LabelSequence};
use crate::data::{
    generate_lines, load_lines, load_mnist_idx, mnist_paths, parse_idx_images, read_file, split,
    subset, write_file, LabeledImage, LineSpec, IDX_IMAGES_MAGIC,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SuiteSize};
use crate::model::{Model, ModelConfig, Task};
use crate::rng::stream_rng;
use crate::trainer::{evaluate, MetricLog, TrainConfig, Trainer};

/// Default data root when neither the config nor the command line names one.
pub const DATA_ENV: &str = "INTENSIVENET_DATA";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Largest brute-force grid the CTC oracle will enumerate.
pub const ORACLE_LIMIT: u128 = 10_000_000;
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn default_split() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// The IDX files in `dir` (default: `<data root>/mnist`).
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    /// Lines composed from MNIST training glyphs, split into train and test.
    Lines {
        #[serde(default)]
        dir: Option<PathBuf>,
        count: usize,
        #[serde(default = "default_split")]
        split: f64,
        #[serde(default)]
        split_seed: u64,
        /// Draw glyphs from this many MNIST training images only.
        #[serde(default)]
        glyph_pool: Option<usize>,
        #[serde(default)]
        line: LineSpec,
    },
    /// Previously persisted line sets.
    LineFiles { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Mnist,
    Digitlines,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Mnist => RunConfig {
                model: ModelConfig::mnist(),
                train: TrainConfig {
                    batch_size: 128,
                    max_epochs: 5,
                    lr_schedule: crate::trainer::LrSchedule::Mnist,
                    weight_decay: 1e-4,
                    momentum: 0.0,
                    early_stop: true,
                    patience: 2,
                    min_delta: 1e-4,
                    seed: 0,
                    eval_batch_size: Some(500),
                    wall_clock: false,
                },
                data: DataConfig::Mnist {
                    dir: None,
                    train_subset: Some(5000),
                    test_subset: None,
                    subset_seed: 0,
                },
            },
            Preset::Digitlines => {
                let line = LineSpec::default();
                RunConfig {
                    model: ModelConfig::digitlines(line.width),
                    train: TrainConfig {
                        batch_size: 32,
                        max_epochs: 10,
                        lr_schedule: crate::trainer::LrSchedule::Text,
                        weight_decay: 1e-4,
                        momentum: 0.0,
                        early_stop: true,
                        patience: 2,
                        min_delta: 1e-4,
                        seed: 0,
                        eval_batch_size: Some(100),
                        wall_clock: false,
                    },
                    data: DataConfig::Lines {
                        dir: None,
                        count: 2000,
                        split: 0.9,
                        split_seed: 0,
                        glyph_pool: Some(10_000),
                        line,
                    },
                }
            }
        }
    }
}

/// Parses a run configuration, reporting the offending field path.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    if let DataConfig::Lines { split, count, .. } = &cfg.data {
        if !(*split > 0.0 && *split < 1.0) || *count == 0 {
            return Err(Error::Config(format!(
                "data: split {split} must lie in (0, 1) and count must be positive"
            )));
        }
    }
    Ok(cfg)
}

fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the train and test sets a run configuration describes.
pub fn load_datasets(
    cfg: &DataConfig,
    root: Option<&Path>,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mnist_dir =
        |dir: &Option<PathBuf>| dir.clone().unwrap_or_else(|| data_root(root).join("mnist"));
    match cfg {
        DataConfig::Mnist {
            dir,
            train_subset,
            test_subset,
            subset_seed,
        } => {
            let dir = mnist_dir(dir);
            let (ti, tl) = mnist_paths(&dir, true);
            let (vi, vl) = mnist_paths(&dir, false);
            let mut train = load_mnist_idx(&ti, &tl)?;
            let mut test = load_mnist_idx(&vi, &vl)?;
            if let Some(n) = train_subset {
                train = subset(train, *n, *subset_seed);
            }
            if let Some(n) = test_subset {
                test = subset(test, *n, subset_seed.wrapping_add(1));
            }
            Ok((train, test))
        }
        DataConfig::Lines {
            dir,
            count,
            split: ratio,
            split_seed,
            glyph_pool,
            line,
        } => {
            let dir = mnist_dir(dir);
            let (ti, tl) = mnist_paths(&dir, true);
            let mut glyphs = load_mnist_idx(&ti, &tl)?;
            if let Some(n) = glyph_pool {
                glyphs.truncate(*n);
            }
            let lines = generate_lines(line, &glyphs, *count)?;
            split(lines, *ratio, *split_seed)
        }
        DataConfig::LineFiles { train, test } => Ok((load_lines(train)?, load_lines(test)?)),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "intensivenet",
    version,
    about = "Train and run IntensiveNet text and digit recognizers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
#[group(required = true, multiple = false)]
pub struct ConfigSource {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.jsonl and per-epoch checkpoints.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
        /// Data root (default: $INTENSIVENET_DATA, then ./data).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Stop after this many epochs regardless of the configuration.
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the configuration's test set.
    Eval {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Print predictions for an IDX image file or a saved line set.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare taped gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "small")]
        size: String,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Compare the CTC recursion with brute-force path enumeration.
    CtcOracle {
        #[arg(long)]
        tmax: usize,
        #[arg(long)]
        alphabet: usize,
    },
    /// Print a built-in run configuration.
    Preset {
        #[arg(value_enum)]
        name: Preset,
    },
    /// Render loss and accuracy curves from metrics.jsonl as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

/// Default exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Size(_) | Error::Json(_) => EXIT_USAGE,
        Error::Idx(_) | Error::Io { .. } | Error::Generation(_) | Error::Infeasible { .. } => {
            EXIT_DATA
        }
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_CHECK_FAILED,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::new(exit_code(&e), e.to_string())
    }
}

fn with_code(code: i32) -> impl Fn(Error) -> Failure {
    move |e| Failure::new(code, e.to_string())
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> std::result::Result<(), Failure> {
    let line = serde_json::to_string(value).map_err(Error::from)?;
    writeln!(out, "{line}")
        .map_err(|e| Failure::new(EXIT_DATA, format!("cannot write output: {e}")))
}

fn resolve_config(source: &ConfigSource) -> std::result::Result<RunConfig, Failure> {
    match (&source.config, source.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::new(
                    EXIT_USAGE,
                    format!("cannot read config {}: {e}", path.display()),
                )
            })?;
            parse_run_config(&text).map_err(with_code(EXIT_USAGE))
        }
        (None, Some(p)) => Ok(p.config()),
        (None, None) => Err(Failure::new(
            EXIT_USAGE,
            "one of --config or --preset is required",
        )),
    }
}

fn execute(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Train {
            source,
            out: dir,
            data_dir,
            max_epochs,
            quiet,
        } => {
            let mut cfg = resolve_config(&source)?;
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            let (train, test) =
                load_datasets(&cfg.data, data_dir.as_deref()).map_err(with_code(EXIT_DATA))?;
            let mut model = Model::new(cfg.model.clone())?;
            if !quiet {
                eprintln!(
                    "training on {} samples, testing on {}, {} parameters",
                    train.len(),
                    test.len(),
                    model.count_parameters()
                );
            }
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let resolved = serde_json::to_vec_pretty(&cfg).map_err(Error::from)?;
            write_file(&dir.join("config.json"), &resolved)?;
            let mut trainer = Trainer::new(cfg.train.clone())?;
            trainer.verbose = !quiet;
            let outcome = trainer.run(&mut model, &train, &test, Some(&dir))?;
            let last = outcome.log.epochs.last();
            emit(
                out,
                &serde_json::json!({
                    "epochs": outcome.log.epochs.len(),
                    "stopped_early": outcome.stopped_early,
                    "best_epoch": outcome.log.best_epoch(),
                    "final_test_loss": last.map(|m| m.test_loss),
                    "final_test_acc": last.map(|m| m.test_acc),
                }),
            )?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            source,
            checkpoint,
            data_dir,
        } => {
            let cfg = resolve_config(&source)?;
            let (model, _) = load_for_config(&checkpoint, &cfg.model).map_err(|e| match e {
                Error::Io { .. } | Error::Checkpoint(_) => {
                    Failure::new(EXIT_CHECKPOINT, e.to_string())
                }
                other => Failure::from(other),
            })?;
            let (_, test) =
                load_datasets(&cfg.data, data_dir.as_deref()).map_err(with_code(EXIT_DATA))?;
            let batch = cfg.train.eval_batch_size.unwrap_or(cfg.train.batch_size);
            let eval = evaluate(&model, &test, batch).map_err(|e| match e {
                Error::Contract(_) | Error::Infeasible { .. } => {
                    Failure::new(EXIT_DATA, e.to_string())
                }
                other => Failure::from(other),
            })?;
            emit(out, &eval)?;
            Ok(EXIT_OK)
        }
        Command::Predict { checkpoint, input } => {
            let (model, _) = load_checkpoint(&checkpoint).map_err(|e| match e {
                Error::Io { .. } | Error::Checkpoint(_) => {
                    Failure::new(EXIT_CHECKPOINT, e.to_string())
                }
                other => Failure::from(other),
            })?;
            let images = read_predict_input(&input).map_err(with_code(EXIT_DATA))?;
            predict(&model, &images, out)
        }
        Command::Gradcheck {
            size,
            corrupt_backward,
        } => {
            let size: SuiteSize = size.parse()?;
            let results = run_suite(size, corrupt_backward)?;
            let mut all = true;
            for r in &results {
                all &= r.pass;
                emit(out, r)?;
            }
            Ok(if all { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::CtcOracle { tmax, alphabet } => {
            let report = ctc_oracle(tmax, alphabet)?;
            let pass = report.pass;
            emit(out, &report)?;
            Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Preset { name } => {
            let text = serde_json::to_string_pretty(&name.config()).map_err(Error::from)?;
            writeln!(out, "{text}").map_err(|e| Failure::new(EXIT_DATA, e.to_string()))?;
            Ok(EXIT_OK)
        }
        Command::Plot { metrics, out: path } => {
            let text = read_file(&metrics).map_err(with_code(EXIT_DATA))?;
            let log = MetricLog::parse_jsonl(&String::from_utf8_lossy(&text))
                .map_err(with_code(EXIT_DATA))?;
            if log.epochs.is_empty() {
                return Err(Failure::new(EXIT_DATA, "metric log has no epochs"));
            }
            write_file(&path, render_svg(&log).as_bytes())?;
            Ok(EXIT_OK)
        }
    }
}

/// IDX image files are recognized by their magic number; anything else
/// is read as a saved line index.
fn read_predict_input(path: &Path) -> Result<Vec<crate::tensor::Tensor>> {
    let bytes = read_file(path)?;
    if bytes.len() >= 4
        && u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == IDX_IMAGES_MAGIC
    {
        let images = parse_idx_images(&bytes)?;
        Ok((0..images.count()).map(|i| images.image(i)).collect())
    } else {
        Ok(load_lines(path)?.into_iter().map(|l| l.image).collect())
    }
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    prediction: String,
}

fn predict(model: &Model, images: &[crate::tensor::Tensor], out: &mut dyn Write) -> CmdResult {
    let want = model.config.input;
    for (index, image) in images.iter().enumerate() {
        let s = image.shape();
        if (s.h, s.w, s.c) != (want.height, want.width, want.channels) {
            return Err(Failure::new(
                EXIT_USAGE,
                format!(
                    "input {index} is {}x{}x{} but the {:?} model expects {}x{}x{}",
                    s.h, s.w, s.c, model.config.task, want.height, want.width, want.channels
                ),
            ));
        }
        let prediction = match model.config.task {
            Task::Classify { .. } => model.predict_classify(image)?[0].to_string(),
            Task::Sequence { .. } => model.predict_sequence(image)?[0].to_digit_string(),
        };
        emit(out, &Prediction { index, prediction })?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub tmax: usize,
    pub alphabet: usize,
    pub cases: usize,
    pub worst_log_deviation: f64,
    pub pass: bool,
}

/// Every target of length ≤ 3 (including empty) over every alphabet size
/// up to `alphabet` and every frame count up to `tmax`, on seeded random
/// frame distributions.
pub fn ctc_oracle(tmax: usize, alphabet: usize) -> Result<OracleReport> {
    if tmax == 0 || alphabet == 0 {
        return Err(Error::Config("tmax and alphabet must be positive".into()));
    }
    let paths = (alphabet as u128 + 1).checked_pow(tmax as u32);
    if paths.is_none_or(|p| p > ORACLE_LIMIT) {
        return Err(Error::Size(format!(
            "{}^{tmax} alignment paths exceed the oracle limit of {ORACLE_LIMIT}",
            alphabet + 1
        )));
    }
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for a in 1..=alphabet {
        let targets = all_targets(a, 3);
        for t in 1..=tmax {
            let mut rng = stream_rng(t as u64, "oracle", a as u64);
            let probs = random_frames(t, a + 1, &mut rng)?;
            for target in &targets {
                if target.required_frames() > t {
                    continue;
                }
                let recursion = ctc_loss(&probs, target)?.loss;
                let brute = ctc_bruteforce(&probs, target)?;
                worst = worst.max((recursion - brute).abs());
                cases += 1;
            }
        }
    }
    Ok(OracleReport {
        tmax,
        alphabet,
        cases,
        worst_log_deviation: worst,
        pass: worst < ORACLE_TOLERANCE,
    })
}

/// All label sequences over `1..=alphabet` of length at most `max_len`.
pub fn all_targets(alphabet: usize, max_len: usize) -> Vec<LabelSequence> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for label in 1..=alphabet {
                let mut seq: Vec<usize> = prefix.clone();
                seq.push(label);
                next.push(seq);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.into_iter()
        .map(|labels| LabelSequence::new(labels).expect("labels are non-blank"))
        .collect()
}

/// Rows drawn from a softmax of uniform logits in `[-2, 2]`.
pub fn random_frames(
    frames: usize,
    classes: usize,
    rng: &mut impl rand::Rng,
) -> Result<FrameProbs> {
    let logits: Vec<f64> = (0..frames * classes)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    FrameProbs::from_logits(frames, classes, &logits)
}

/// Two panels: mean losses and accuracies per epoch.
pub fn render_svg(log: &MetricLog) -> String {
    const W: f64 = 640.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let n = log.epochs.len();
    let x_at = |i: usize| {
        PAD + (W - 2.0 * PAD)
            * if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            }
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif" font-size="12">"#,
        2.0 * H
    );
    type Series = (
        &'static str,
        &'static str,
        fn(&crate::trainer::EpochMetrics) -> f64,
    );
    let panels: [(&str, f64, [Series; 2]); 2] = [
        (
            "cross-entropy loss",
            0.0,
            [
                ("train", "#1f77b4", |m| m.train_loss),
                ("test", "#d62728", |m| m.test_loss),
            ],
        ),
        (
            "accuracy",
            H,
            [
                ("train", "#1f77b4", |m| m.train_acc),
                ("test", "#d62728", |m| m.test_acc),
            ],
        ),
    ];
    for (title, top, series) in panels {
        let values: Vec<f64> = series
            .iter()
            .flat_map(|(_, _, f)| log.epochs.iter().map(f))
            .filter(|v| v.is_finite())
            .collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let y_at = |v: f64| top + H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
        let _ = writeln!(
            svg,
            r#"<text x="{PAD}" y="{}">{title}</text>"#,
            top + PAD - 12.0
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{PAD}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            top + PAD,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(svg, r#"<text x="4" y="{}">{hi:.4}</text>"#, top + PAD + 4.0);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{lo:.4}</text>"#, top + H - PAD);
        for (k, (name, color, f)) in series.iter().enumerate() {
            let points: Vec<String> = log
                .epochs
                .iter()
                .enumerate()
                .map(|(i, m)| format!("{:.2},{:.2}", x_at(i), y_at(f(m))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                points.join(" ")
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                W - PAD - 40.0,
                top + PAD + 16.0 * (k + 1) as f64
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">epoch</text>"#,
        W / 2.0,
        2.0 * H - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}
