//! The `dlam` command line.
//!
//! Exit status is 0 on success, 1 when the toolkit reports an error (its
//! variant name is printed to stderr) and 2 for usage errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{self, HostSource, Sizing, SplitTag, SynthConfig};
use crate::digest::{self, Algo};
use crate::error::{Error, Result};
use crate::eval::{self, BaselineConfig, Method, RepetitionConfig, ReportFormat};
use crate::featurize::{self, tokenize};
use crate::nn::{self, ModelConfig, ModelKind, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dlam", version, about = "Fuzzy-hash anomaly detection toolkit")]
struct Cli {
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AlgoArg {
    Ssdeep,
    Tlsh,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Algo {
        match a {
            AlgoArg::Ssdeep => Algo::Ssdeep,
            AlgoArg::Tlsh => Algo::Tlsh,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum KindArg {
    Transformer,
    FeedForward,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SizingArg {
    Host,
    Payload,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the digest of a file.
    Hash {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        file: PathBuf,
    },
    /// Print the ssdeep score or TLSH distance of two files.
    Compare {
        #[arg(long, value_enum)]
        algo: AlgoArg,
        /// Treat both arguments as digest strings instead of file paths.
        #[arg(long)]
        digests: bool,
        a: String,
        b: String,
    },
    /// Write a synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Hash and tokenize a corpus into a JSON-lines dataset.
    Featurize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a featurized dataset.
    Train(TrainArgs),
    /// Classify files (or digests) with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inputs are digest strings rather than file paths.
        #[arg(long)]
        digests: bool,
        /// Write the predictions here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<String>,
    },
    /// Score a corpus with the similarity-threshold baseline.
    EvalBaseline {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        algo: AlgoArg,
        #[arg(long, default_value_t = eval::DEFAULT_TLSH_THRESHOLD)]
        tlsh_threshold: u32,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Score a corpus with a trained checkpoint.
    EvalModel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Accuracy of each method on payloads repeated 1..32 times.
    ExpRepetition(RepetitionArgs),
    /// False negatives by anomaly fraction, from a per-sample CSV report.
    ExpBreakoff {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_CUTOFF)]
        cutoff: f64,
        #[arg(long, default_value_t = eval::DEFAULT_BAND_WIDTH)]
        band_width: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the extension of --out, else csv.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 5000)]
    host_size: usize,
    #[arg(long, default_value_t = corpus::MIN_FRACTION)]
    min_fraction: f64,
    #[arg(long, default_value_t = corpus::MAX_FRACTION)]
    max_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    #[arg(long, default_value_t = corpus::DEFAULT_POOL_LENGTH)]
    pool_length: usize,
    /// Draw hosts from the files in this directory instead of random bytes.
    #[arg(long)]
    host_dir: Option<PathBuf>,
    /// `payload` keeps the final file at --host-size bytes.
    #[arg(long, value_enum, default_value_t = SizingArg::Host)]
    sizing: SizingArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Transformer)]
    kind: KindArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// Comma-separated hidden widths of the feed-forward model.
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    pre_norm: bool,
    #[arg(long)]
    sinusoidal_positions: bool,
}

#[derive(Args, Debug)]
struct RepetitionArgs {
    /// Comma-separated, e.g. ssdeep-baseline,tlsh-TF.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "ssdeep-baseline,tlsh-baseline"
    )]
    methods: Vec<String>,
    /// METHOD=PATH, repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_FACTORS)]
    factors: Vec<usize>,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 5000)]
    file_size: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    pool_seed: u64,
    #[arg(long, default_value_t = corpus::DEFAULT_POOL_LENGTH)]
    pool_length: usize,
    #[arg(long, default_value_t = eval::DEFAULT_TLSH_THRESHOLD)]
    tlsh_threshold: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

fn report_format(arg: Option<FormatArg>, out: &Path) -> ReportFormat {
    match arg {
        Some(FormatArg::Csv) => ReportFormat::Csv,
        Some(FormatArg::Json) => ReportFormat::Json,
        None if out.extension().is_some_and(|e| e == "json") => ReportFormat::Json,
        None => ReportFormat::Csv,
    }
}

fn summary(out: &mut dyn Write, r: &eval::EvalReport) -> std::io::Result<()> {
    writeln!(
        out,
        "accuracy {} fpr {} fnr {} (tp {} fp {} tn {} fn {})",
        eval::sig6(r.accuracy),
        eval::sig6(r.fpr),
        eval::sig6(r.fnr),
        r.tp,
        r.fp,
        r.tn,
        r.fn_
    )
}

fn stdout_failure(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn train_configs(a: &TrainArgs, algo: Algo, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
    let (mut m, kind) = match a.kind {
        KindArg::Transformer => (ModelConfig::transformer(algo, seed), ModelKind::Transformer),
        KindArg::FeedForward => (
            ModelConfig::feed_forward(algo, seed),
            ModelKind::FeedForward,
        ),
    };
    let mut t = TrainConfig::for_kind(kind, seed);
    macro_rules! set {
        ($src:expr, $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(a.embed_dim, m.embed_dim);
    set!(a.layers, m.num_layers);
    set!(a.heads, m.num_heads);
    set!(a.ffn_dim, m.ffn_dim);
    set!(a.hidden_dims, m.hidden_dims);
    set!(a.dropout, m.dropout_rate);
    m.pre_norm = a.pre_norm;
    m.sinusoidal_positions = a.sinusoidal_positions;
    set!(a.learning_rate, t.learning_rate);
    set!(a.batch_size, t.batch_size);
    set!(a.max_epochs, t.max_epochs);
    set!(a.patience, t.patience);
    set!(a.validation_fraction, t.validation_fraction);
    m.validate()?;
    Ok((m, t))
}

fn synth_config(a: &SynthArgs, seed: u64) -> SynthConfig {
    SynthConfig {
        count: a.count,
        host_size: a.host_size,
        fraction_range: (a.min_fraction, a.max_fraction),
        pool_seed: a.pool_seed,
        pool_length: a.pool_length,
        seed,
        host_source: match &a.host_dir {
            Some(d) => HostSource::Directory(d.clone()),
            None => HostSource::Random,
        },
        sizing: match a.sizing {
            SizingArg::Host => Sizing::Host,
            SizingArg::Payload => Sizing::Payload,
        },
        split: match a.split {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Eval => SplitTag::Eval,
        },
    }
}

fn repetition(a: &RepetitionArgs, seed: u64) -> Result<eval::RepetitionTable> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    let mut checkpoints = HashMap::new();
    for spec in &a.checkpoints {
        let (m, path) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("--checkpoint wants METHOD=PATH, got {spec:?}"))
        })?;
        checkpoints.insert(m.parse::<Method>()?, nn::load_checkpoint(Path::new(path))?);
    }
    let cfg = RepetitionConfig {
        count: a.count,
        file_size: a.file_size,
        pool_seed: a.pool_seed,
        pool_length: a.pool_length,
        seed,
        factors: a.factors.clone(),
        runs: a.runs,
        tlsh_distance_threshold: a.tlsh_threshold,
        ..RepetitionConfig::default()
    };
    eval::repetition_experiment(&cfg, &methods, &checkpoints)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Hash { algo, file } => {
            let data = crate::fsutil::read(file)?;
            let d = digest::hash((*algo).into(), &data)?;
            writeln!(out, "{d}").map_err(stdout_failure)?;
        }
        Command::Compare {
            algo,
            digests,
            a,
            b,
        } => {
            let algo = Algo::from(*algo);
            let load = |s: &str| {
                if *digests {
                    digest::parse(algo, s)
                } else {
                    digest::hash(algo, &crate::fsutil::read(Path::new(s))?)
                }
            };
            let score = digest::compare(&load(a)?, &load(b)?)?;
            writeln!(out, "{score}").map_err(stdout_failure)?;
        }
        Command::Synth(a) => {
            let m = corpus::synth_corpus(&synth_config(a, seed), &a.out)?;
            writeln!(
                out,
                "wrote {} entries ({} anomalous) to {}",
                m.entries.len(),
                m.anomalous_count,
                a.out.display()
            )
            .map_err(stdout_failure)?;
        }
        Command::Featurize {
            corpus: dir,
            algo,
            out: path,
        } => {
            let (manifest, payloads) = corpus::load_corpus(dir)?;
            let (records, skipped) =
                featurize::featurize_corpus(&manifest.entries, &payloads, (*algo).into())?;
            featurize::write_jsonl(&records, path)?;
            for id in &skipped {
                log::warn!("{id}: payload cannot be hashed, skipped");
            }
            writeln!(
                out,
                "wrote {} records, skipped {}",
                records.len(),
                skipped.len()
            )
            .map_err(stdout_failure)?;
        }
        Command::Train(a) => {
            let data = featurize::read_jsonl(&a.data)?;
            let algo = data.first().map(|r| r.seq.algo).ok_or(Error::EmptyData)?;
            let (mcfg, tcfg) = train_configs(a, algo, seed)?;
            let ckpt = nn::train(&mcfg, &data, &tcfg)?;
            nn::save_checkpoint(&ckpt, &a.out)?;
            let best = ckpt.best_epoch.map(|e| &ckpt.history[e]);
            writeln!(
                out,
                "trained {} epochs, best epoch {} (validation loss {})",
                ckpt.history.len(),
                ckpt.best_epoch.unwrap_or(0),
                best.map_or_else(String::new, |r| eval::sig6(r.val_loss))
            )
            .map_err(stdout_failure)?;
        }
        Command::Predict {
            checkpoint,
            digests,
            out: path,
            inputs,
        } => {
            let ckpt = nn::load_checkpoint(checkpoint)?;
            let algo = ckpt.config.algo.ok_or_else(|| {
                Error::InvalidConfig("checkpoint is not tied to a digest algorithm".into())
            })?;
            let seqs = inputs
                .iter()
                .map(|s| {
                    let d = if *digests {
                        digest::parse(algo, s)?
                    } else {
                        digest::hash(algo, &crate::fsutil::read(Path::new(s))?)?
                    };
                    Ok(tokenize(&d))
                })
                .collect::<Result<Vec<_>>>()?;
            let preds = nn::predict(&ckpt, &seqs)?;
            let mut text = String::new();
            for (input, p) in inputs.iter().zip(&preds) {
                text.push_str(&format!(
                    "{input}\t{}\t{}\n",
                    eval::sig6(f64::from(p.probability)),
                    p.label
                ));
            }
            match path {
                Some(p) => crate::fsutil::write_atomic(p, text.as_bytes())?,
                None => out.write_all(text.as_bytes()).map_err(stdout_failure)?,
            }
        }
        Command::EvalBaseline {
            corpus: dir,
            algo,
            tlsh_threshold,
            report,
        } => {
            let manifest = corpus::load_manifest(&dir.join(corpus::MANIFEST_FILE))?;
            let cfg = BaselineConfig {
                algorithm: (*algo).into(),
                tlsh_distance_threshold: *tlsh_threshold,
            };
            let r = eval::baseline_classify(&manifest, dir, &cfg)?;
            eval::emit_report(&r, &report.out, report_format(report.format, &report.out))?;
            summary(out, &r).map_err(stdout_failure)?;
        }
        Command::EvalModel {
            corpus: dir,
            checkpoint,
            report,
        } => {
            let ckpt = nn::load_checkpoint(checkpoint)?;
            let manifest = corpus::load_manifest(&dir.join(corpus::MANIFEST_FILE))?;
            let r = eval::model_classify(&manifest, dir, &ckpt)?;
            eval::emit_report(&r, &report.out, report_format(report.format, &report.out))?;
            summary(out, &r).map_err(stdout_failure)?;
        }
        Command::ExpRepetition(a) => {
            let table = repetition(a, seed)?;
            eval::emit_table(&table, &a.out, report_format(a.format, &a.out))?;
            for row in &table.rows {
                writeln!(
                    out,
                    "x{:<3} {:<16} {}",
                    row.factor,
                    row.method,
                    eval::sig6(row.mean_accuracy)
                )
                .map_err(stdout_failure)?;
            }
        }
        Command::ExpBreakoff {
            report,
            cutoff,
            band_width,
            out: path,
            format,
        } => {
            let r = eval::read_report_csv(report)?;
            let b = eval::breakoff_analysis(&r, *cutoff, *band_width)?;
            eval::emit_breakoff(&b, path, report_format(*format, path))?;
            writeln!(
                out,
                "{} of false negatives below anomaly fraction {}",
                eval::sig6(b.fn_below_cutoff_share),
                eval::sig6(b.cutoff)
            )
            .map_err(stdout_failure)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            1
        }
    }
}
