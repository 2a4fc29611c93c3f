//! Baselines, metrics, break-off analysis, the repetition experiment and
//! report files.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    concat_repeat, synth_samples, CorpusEntry, CorpusManifest, Sample, Sizing, SplitTag,
    SynthConfig,
};
use crate::digest::{self, Algo, Digest};
use crate::error::{Error, Result};
use crate::featurize::tokenize;
use crate::fsutil;
use crate::nn::{predict, Checkpoint, ModelKind};
use crate::rng::derive_seed;

pub const DEFAULT_TLSH_THRESHOLD: u32 = 1000;
pub const DEFAULT_CUTOFF: f64 = 0.13;
pub const DEFAULT_BAND_WIDTH: f64 = 0.05;
pub const DEFAULT_FACTORS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub label: u8,
    pub prediction: u8,
    /// Similarity score for baselines, probability for models.
    pub score: f64,
    /// Anomaly length relative to the final payload; 0 for benign entries.
    pub anomaly_fraction: f64,
    /// The payload could not be hashed and was counted as a negative.
    #[serde(default)]
    pub unhashable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_sample: Vec<SampleOutcome>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_samples(per_sample: Vec<SampleOutcome>) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for s in &per_sample {
            match (s.label != 0, s.prediction != 0) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
                (true, false) => fn_ += 1,
            }
        }
        EvalReport {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            fpr: ratio(fp, fp + tn),
            fnr: ratio(fn_, fn_ + tp),
            tp,
            fp,
            tn,
            fn_,
            per_sample,
        }
    }

    /// The report restricted to samples accepted by `keep`.
    pub fn subset(&self, keep: impl Fn(&SampleOutcome) -> bool) -> EvalReport {
        EvalReport::from_samples(
            self.per_sample
                .iter()
                .filter(|s| keep(s))
                .cloned()
                .collect(),
        )
    }
}

fn unhashable(entry: &CorpusEntry, reason: &Error) -> SampleOutcome {
    let e = Error::UnhashablePayload {
        id: entry.id.clone(),
        reason: reason.to_string(),
    };
    log::warn!("{e}; counted as negative");
    outcome(entry, 0, 0.0, true)
}

fn outcome(entry: &CorpusEntry, prediction: u8, score: f64, unhashable: bool) -> SampleOutcome {
    SampleOutcome {
        id: entry.id.clone(),
        label: entry.label.as_bit(),
        prediction,
        score,
        anomaly_fraction: entry.payload_fraction,
        unhashable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: Algo,
    pub tlsh_distance_threshold: u32,
}

impl BaselineConfig {
    pub fn new(algorithm: Algo) -> Self {
        BaselineConfig {
            algorithm,
            tlsh_distance_threshold: DEFAULT_TLSH_THRESHOLD,
        }
    }

    /// ssdeep score, or `max(0, threshold - distance)` for TLSH.
    pub fn similarity(&self, a: &Digest, b: &Digest) -> Result<u32> {
        let raw = digest::compare(a, b)?;
        Ok(match self.algorithm {
            Algo::Ssdeep => raw,
            Algo::Tlsh => self.tlsh_distance_threshold.saturating_sub(raw),
        })
    }
}

/// Classifies payloads by comparing each digest with the pool's digest;
/// positive iff the similarity is above zero.
pub fn baseline_classify_payloads(
    entries: &[CorpusEntry],
    payloads: &[Vec<u8>],
    pool: &[u8],
    cfg: &BaselineConfig,
) -> Result<EvalReport> {
    if entries.len() != payloads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} entries for {} payloads",
            entries.len(),
            payloads.len()
        )));
    }
    let reference = digest::hash(cfg.algorithm, pool)?;
    let per_sample = entries
        .par_iter()
        .zip(payloads.par_iter())
        .map(|(e, p)| match digest::hash(cfg.algorithm, p) {
            Ok(d) => {
                let s = cfg.similarity(&d, &reference)?;
                Ok(outcome(e, u8::from(s > 0), f64::from(s), false))
            }
            Err(reason) => Ok(unhashable(e, &reason)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(per_sample))
}

pub fn baseline_classify(
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    cfg: &BaselineConfig,
) -> Result<EvalReport> {
    let pool = manifest.pool()?;
    let payloads = load_payloads(manifest, corpus_dir)?;
    baseline_classify_payloads(&manifest.entries, &payloads, pool.bytes(), cfg)
}

fn load_payloads(manifest: &CorpusManifest, corpus_dir: &Path) -> Result<Vec<Vec<u8>>> {
    manifest
        .entries
        .par_iter()
        .map(|e| crate::corpus::load_payload(corpus_dir, e))
        .collect()
}

fn checkpoint_algo(checkpoint: &Checkpoint) -> Result<Algo> {
    checkpoint
        .config
        .algo
        .ok_or_else(|| Error::InvalidConfig("checkpoint is not tied to a digest algorithm".into()))
}

/// Hashes, tokenizes and classifies every payload; unhashable payloads
/// count as negatives.
pub fn model_classify_payloads(
    entries: &[CorpusEntry],
    payloads: &[Vec<u8>],
    checkpoint: &Checkpoint,
) -> Result<EvalReport> {
    let algo = checkpoint_algo(checkpoint)?;
    let digests: Vec<Option<Digest>> = payloads
        .par_iter()
        .map(|p| digest::hash(algo, p).ok())
        .collect();
    model_classify_digests(entries, &digests, checkpoint)
}

fn model_classify_digests(
    entries: &[CorpusEntry],
    digests: &[Option<Digest>],
    checkpoint: &Checkpoint,
) -> Result<EvalReport> {
    let hashed: Vec<usize> = (0..digests.len())
        .filter(|&i| digests[i].is_some())
        .collect();
    let seqs: Vec<_> = hashed
        .iter()
        .map(|&i| tokenize(digests[i].as_ref().expect("hashed")))
        .collect();
    let preds = predict(checkpoint, &seqs)?;
    let mut per_sample: Vec<SampleOutcome> =
        entries.iter().map(|e| outcome(e, 0, 0.0, true)).collect();
    for (&i, p) in hashed.iter().zip(preds) {
        per_sample[i] = outcome(&entries[i], p.label, f64::from(p.probability), false);
    }
    Ok(EvalReport::from_samples(per_sample))
}

pub fn model_classify(
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    checkpoint: &Checkpoint,
) -> Result<EvalReport> {
    let payloads = load_payloads(manifest, corpus_dir)?;
    model_classify_payloads(&manifest.entries, &payloads, checkpoint)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPrediction {
    pub id: String,
    pub prediction: u8,
}

/// Scores externally produced predictions against the manifest labels.
pub fn evaluate(predictions: &[IdPrediction], manifest: &CorpusManifest) -> Result<EvalReport> {
    let by_id: HashMap<&str, &CorpusEntry> = manifest
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e))
        .collect();
    let mut seen = HashSet::new();
    for p in predictions {
        if !by_id.contains_key(p.id.as_str()) {
            return Err(Error::UnknownId(p.id.clone()));
        }
        if !seen.insert(p.id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate prediction for {}",
                p.id
            )));
        }
    }
    let given: HashMap<&str, u8> = predictions
        .iter()
        .map(|p| (p.id.as_str(), p.prediction))
        .collect();
    let per_sample = manifest
        .entries
        .iter()
        .map(|e| {
            let p = *given
                .get(e.id.as_str())
                .ok_or_else(|| Error::MissingPrediction(e.id.clone()))?;
            Ok(outcome(e, u8::from(p != 0), f64::from(p), false))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(per_sample))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub fn_count: usize,
    pub tp_count: usize,
}

impl Band {
    /// Share of the band's anomalous samples that were missed.
    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_count, self.fn_count + self.tp_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakoff {
    pub cutoff: f64,
    pub fn_below_cutoff_share: f64,
    /// Bands holding at least one anomalous sample, in increasing order.
    pub bands: Vec<Band>,
}

/// Where the false negatives fall along the anomaly fraction.
pub fn breakoff_analysis(report: &EvalReport, cutoff: f64, band_width: f64) -> Result<Breakoff> {
    if !(band_width > 0.0 && band_width <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "band width {band_width} outside (0, 1]"
        )));
    }
    let anomalous: Vec<&SampleOutcome> =
        report.per_sample.iter().filter(|s| s.label != 0).collect();
    let fns: Vec<&&SampleOutcome> = anomalous.iter().filter(|s| s.prediction == 0).collect();
    let below = fns.iter().filter(|s| s.anomaly_fraction < cutoff).count();
    let n_bands = (1.0 / band_width).ceil() as usize;
    let mut bands: Vec<Band> = (0..n_bands)
        .map(|i| Band {
            lo: i as f64 * band_width,
            hi: ((i + 1) as f64 * band_width).min(1.0),
            fn_count: 0,
            tp_count: 0,
        })
        .collect();
    for s in &anomalous {
        let i = ((s.anomaly_fraction / band_width) as usize).min(n_bands - 1);
        if s.prediction == 0 {
            bands[i].fn_count += 1;
        } else {
            bands[i].tp_count += 1;
        }
    }
    bands.retain(|b| b.fn_count + b.tp_count > 0);
    Ok(Breakoff {
        cutoff,
        fn_below_cutoff_share: ratio(below, fns.len()),
        bands,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ssdeep-baseline")]
    SsdeepBaseline,
    #[serde(rename = "tlsh-baseline")]
    TlshBaseline,
    #[serde(rename = "ssdeep-TF")]
    SsdeepTf,
    #[serde(rename = "tlsh-TF")]
    TlshTf,
    #[serde(rename = "ssdeep-FF")]
    SsdeepFf,
    #[serde(rename = "tlsh-FF")]
    TlshFf,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SsdeepBaseline,
        Method::TlshBaseline,
        Method::SsdeepTf,
        Method::TlshTf,
        Method::SsdeepFf,
        Method::TlshFf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SsdeepBaseline => "ssdeep-baseline",
            Method::TlshBaseline => "tlsh-baseline",
            Method::SsdeepTf => "ssdeep-TF",
            Method::TlshTf => "tlsh-TF",
            Method::SsdeepFf => "ssdeep-FF",
            Method::TlshFf => "tlsh-FF",
        }
    }

    pub fn algo(self) -> Algo {
        match self {
            Method::SsdeepBaseline | Method::SsdeepTf | Method::SsdeepFf => Algo::Ssdeep,
            Method::TlshBaseline | Method::TlshTf | Method::TlshFf => Algo::Tlsh,
        }
    }

    /// The model kind a learned method needs; `None` for baselines.
    pub fn model_kind(self) -> Option<ModelKind> {
        match self {
            Method::SsdeepBaseline | Method::TlshBaseline => None,
            Method::SsdeepTf | Method::TlshTf => Some(ModelKind::Transformer),
            Method::SsdeepFf | Method::TlshFf => Some(ModelKind::FeedForward),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionConfig {
    /// Files per factor and run.
    pub count: usize,
    /// Payload size before repetition.
    pub file_size: usize,
    pub fraction_range: (f64, f64),
    pub pool_seed: u64,
    pub pool_length: usize,
    pub seed: u64,
    pub factors: Vec<usize>,
    pub runs: usize,
    pub tlsh_distance_threshold: u32,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        RepetitionConfig {
            count: 5000,
            file_size: 5000,
            fraction_range: (crate::corpus::MIN_FRACTION, crate::corpus::MAX_FRACTION),
            pool_seed: 0,
            pool_length: crate::corpus::DEFAULT_POOL_LENGTH,
            seed: 0,
            factors: DEFAULT_FACTORS.to_vec(),
            runs: 10,
            tlsh_distance_threshold: DEFAULT_TLSH_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub factor: usize,
    pub method: Method,
    pub mean_accuracy: f64,
    pub run_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionTable {
    pub rows: Vec<RepetitionRow>,
}

impl RepetitionTable {
    pub fn accuracy(&self, factor: usize, method: Method) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.factor == factor && r.method == method)
            .map(|r| r.mean_accuracy)
    }
}

const TAG_REPETITION: u64 = 0x7265_7065_6174;

/// For each run, synthesizes fixed-size files, repeats every payload by each
/// factor and classifies the result with every method. Run `r` draws its
/// corpus from the seed derived from `(seed, r)`.
pub fn repetition_experiment(
    cfg: &RepetitionConfig,
    methods: &[Method],
    checkpoints: &HashMap<Method, Checkpoint>,
) -> Result<RepetitionTable> {
    if cfg.runs == 0 || cfg.factors.is_empty() || cfg.factors.contains(&0) {
        return Err(Error::InvalidConfig(
            "need at least one run and positive factors".into(),
        ));
    }
    for &m in methods {
        if let Some(kind) = m.model_kind() {
            let c = checkpoints
                .get(&m)
                .ok_or_else(|| Error::MissingCheckpoint(m.name().into()))?;
            if c.config.kind != kind || c.config.algo != Some(m.algo()) {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint does not fit method {m}"
                )));
            }
        }
    }

    let mut acc: HashMap<(usize, Method), Vec<f64>> = HashMap::new();
    for run in 0..cfg.runs {
        let synth = SynthConfig {
            count: cfg.count,
            host_size: cfg.file_size,
            fraction_range: cfg.fraction_range,
            pool_seed: cfg.pool_seed,
            pool_length: cfg.pool_length,
            seed: derive_seed(cfg.seed, TAG_REPETITION, run as u64),
            host_source: crate::corpus::HostSource::Random,
            sizing: Sizing::Payload,
            split: SplitTag::Eval,
        };
        let (pool, samples) = synth_samples(&synth)?;
        let entries: Vec<CorpusEntry> = samples.iter().map(|s| s.entry.clone()).collect();
        for &factor in &cfg.factors {
            let mut digests: HashMap<Algo, Vec<Option<Digest>>> = HashMap::new();
            for algo in methods.iter().map(|m| m.algo()) {
                digests
                    .entry(algo)
                    .or_insert_with(|| hash_repeated(&samples, factor, algo));
            }
            for &m in methods {
                let d = &digests[&m.algo()];
                let report = match m.model_kind() {
                    None => {
                        let bcfg = BaselineConfig {
                            algorithm: m.algo(),
                            tlsh_distance_threshold: cfg.tlsh_distance_threshold,
                        };
                        baseline_from_digests(&entries, d, pool.bytes(), &bcfg)?
                    }
                    Some(_) => model_classify_digests(&entries, d, &checkpoints[&m])?,
                };
                log::info!(
                    "run {run} factor {factor} {m}: accuracy {:.4}",
                    report.accuracy
                );
                acc.entry((factor, m)).or_default().push(report.accuracy);
            }
        }
    }

    let mut rows = Vec::new();
    for &factor in &cfg.factors {
        for &m in methods {
            let runs = acc.remove(&(factor, m)).unwrap_or_default();
            let mean = runs.iter().sum::<f64>() / runs.len() as f64;
            rows.push(RepetitionRow {
                factor,
                method: m,
                mean_accuracy: mean,
                run_accuracies: runs,
            });
        }
    }
    Ok(RepetitionTable { rows })
}

fn hash_repeated(samples: &[Sample], factor: usize, algo: Algo) -> Vec<Option<Digest>> {
    samples
        .par_iter()
        .map(|s| digest::hash(algo, &concat_repeat(&s.payload, factor)).ok())
        .collect()
}

fn baseline_from_digests(
    entries: &[CorpusEntry],
    digests: &[Option<Digest>],
    pool: &[u8],
    cfg: &BaselineConfig,
) -> Result<EvalReport> {
    let reference = digest::hash(cfg.algorithm, pool)?;
    let per_sample = entries
        .iter()
        .zip(digests)
        .map(|(e, d)| match d {
            Some(d) => {
                let s = cfg.similarity(d, &reference)?;
                Ok(outcome(e, u8::from(s > 0), f64::from(s), false))
            }
            None => Ok(outcome(e, 0, 0.0, true)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(per_sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

/// `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn round6(x: f64) -> f64 {
    sig6(x).parse().unwrap_or(x)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn csv_failure(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub const REPORT_COLUMNS: [&str; 6] = [
    "id",
    "label",
    "prediction",
    "score",
    "anomaly_fraction",
    "unhashable",
];

/// Per-sample CSV (see [`REPORT_COLUMNS`]) or the full report as JSON.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut r = report.clone();
            r.accuracy = round6(r.accuracy);
            r.fpr = round6(r.fpr);
            r.fnr = round6(r.fnr);
            for s in &mut r.per_sample {
                s.score = round6(s.score);
                s.anomaly_fraction = round6(s.anomaly_fraction);
            }
            json_bytes(&r)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)
                .map_err(|e| csv_failure(path, e))?;
            for s in &report.per_sample {
                w.write_record([
                    s.id.clone(),
                    s.label.to_string(),
                    s.prediction.to_string(),
                    sig6(s.score),
                    sig6(s.anomaly_fraction),
                    u8::from(s.unhashable).to_string(),
                ])
                .map_err(|e| csv_failure(path, e))?;
            }
            w.into_inner()
                .map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    fsutil::write_atomic(path, &bytes)
}

/// Factor-by-method grid: `factor,method,mean_accuracy,run_0,…` or JSON.
pub fn emit_table(table: &RepetitionTable, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut t = table.clone();
            for r in &mut t.rows {
                r.mean_accuracy = round6(r.mean_accuracy);
                r.run_accuracies.iter_mut().for_each(|a| *a = round6(*a));
            }
            json_bytes(&t)
        }
        ReportFormat::Csv => {
            let runs = table
                .rows
                .iter()
                .map(|r| r.run_accuracies.len())
                .max()
                .unwrap_or(0);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec![
                "factor".to_string(),
                "method".into(),
                "mean_accuracy".into(),
            ];
            header.extend((0..runs).map(|i| format!("run_{i}")));
            w.write_record(&header).map_err(|e| csv_failure(path, e))?;
            for r in &table.rows {
                let mut rec = vec![
                    r.factor.to_string(),
                    r.method.to_string(),
                    sig6(r.mean_accuracy),
                ];
                rec.extend(r.run_accuracies.iter().map(|&a| sig6(a)));
                rec.resize(header.len(), String::new());
                w.write_record(&rec).map_err(|e| csv_failure(path, e))?;
            }
            w.into_inner()
                .map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    fsutil::write_atomic(path, &bytes)
}

pub fn emit_breakoff(b: &Breakoff, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => {
            let mut b = b.clone();
            b.fn_below_cutoff_share = round6(b.fn_below_cutoff_share);
            for band in &mut b.bands {
                band.lo = round6(band.lo);
                band.hi = round6(band.hi);
            }
            json_bytes(&b)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["band_lo", "band_hi", "fn_count", "tp_count"])
                .map_err(|e| csv_failure(path, e))?;
            for band in &b.bands {
                w.write_record([
                    sig6(band.lo),
                    sig6(band.hi),
                    band.fn_count.to_string(),
                    band.tp_count.to_string(),
                ])
                .map_err(|e| csv_failure(path, e))?;
            }
            w.into_inner()
                .map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    fsutil::write_atomic(path, &bytes)
}

/// Reads back a per-sample CSV written by [`emit_report`].
pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_failure(path, e))?;
    let headers = r.headers().map_err(|e| csv_failure(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != REPORT_COLUMNS {
        return Err(Error::SchemaMismatch("unexpected report columns".into()));
    }
    let bad = |m: &str| Error::SchemaMismatch(m.to_string());
    let mut per_sample = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_failure(path, e))?;
        per_sample.push(SampleOutcome {
            id: rec[0].to_string(),
            label: rec[1].parse().map_err(|_| bad("label"))?,
            prediction: rec[2].parse().map_err(|_| bad("prediction"))?,
            score: rec[3].parse().map_err(|_| bad("score"))?,
            anomaly_fraction: rec[4].parse().map_err(|_| bad("anomaly_fraction"))?,
            unhashable: &rec[5] == "1",
        });
    }
    Ok(EvalReport::from_samples(per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_pool, CorpusManifest};
    use proptest::prelude::*;

    fn sample(label: u8, prediction: u8, fraction: f64) -> SampleOutcome {
        SampleOutcome {
            id: String::new(),
            label,
            prediction,
            score: 0.0,
            anomaly_fraction: fraction,
            unhashable: false,
        }
    }

    fn balanced_manifest(n: usize) -> CorpusManifest {
        let cfg = SynthConfig {
            count: n,
            host_size: 200,
            ..SynthConfig::default()
        };
        let (pool, samples) = synth_samples(&cfg).unwrap();
        CorpusManifest::new(
            &pool,
            SplitTag::Eval,
            samples.into_iter().map(|s| s.entry).collect(),
        )
    }

    #[test]
    fn constant_predictions() {
        let m = balanced_manifest(10);
        let all = |p: u8| -> Vec<IdPrediction> {
            m.entries
                .iter()
                .map(|e| IdPrediction {
                    id: e.id.clone(),
                    prediction: p,
                })
                .collect()
        };
        let pos = evaluate(&all(1), &m).unwrap();
        assert_eq!((pos.accuracy, pos.fpr, pos.fnr), (0.5, 1.0, 0.0));
        let neg = evaluate(&all(0), &m).unwrap();
        assert_eq!((neg.accuracy, neg.fpr, neg.fnr), (0.5, 0.0, 1.0));
        let truth: Vec<IdPrediction> = m
            .entries
            .iter()
            .map(|e| IdPrediction {
                id: e.id.clone(),
                prediction: e.label.as_bit(),
            })
            .collect();
        let ok = evaluate(&truth, &m).unwrap();
        assert_eq!((ok.accuracy, ok.fpr, ok.fnr), (1.0, 0.0, 0.0));

        let mut missing = truth.clone();
        missing.pop();
        assert!(matches!(
            evaluate(&missing, &m),
            Err(Error::MissingPrediction(_))
        ));
        let mut unknown = truth.clone();
        unknown[0].id = "nope".into();
        assert!(matches!(evaluate(&unknown, &m), Err(Error::UnknownId(_))));

        let mut shuffled = truth;
        shuffled.reverse();
        assert_eq!(evaluate(&shuffled, &m).unwrap().accuracy, 1.0);
    }

    #[test]
    fn breakoff_share() {
        let r = EvalReport::from_samples(vec![
            sample(1, 0, 0.05),
            sample(1, 0, 0.10),
            sample(1, 0, 0.50),
            sample(1, 1, 0.52),
            sample(0, 0, 0.0),
        ]);
        let b = breakoff_analysis(&r, 0.13, 0.05).unwrap();
        assert!((b.fn_below_cutoff_share - 2.0 / 3.0).abs() < 1e-15);
        let top = b.bands.last().unwrap();
        assert_eq!((top.fn_count, top.tp_count), (1, 1));
        let none = breakoff_analysis(
            &EvalReport::from_samples(vec![sample(1, 1, 0.3)]),
            0.13,
            0.05,
        )
        .unwrap();
        assert_eq!(none.fn_below_cutoff_share, 0.0);
        assert!(none.bands.iter().all(|b| b.fn_count == 0));
    }

    #[test]
    fn pool_matches_itself() {
        let pool = generate_pool(1, 65536).unwrap();
        let m = balanced_manifest(2);
        let report = baseline_classify_payloads(
            &m.entries[..1],
            &[pool.bytes().to_vec()],
            pool.bytes(),
            &BaselineConfig::new(Algo::Ssdeep),
        )
        .unwrap();
        assert_eq!(report.per_sample[0].score, 100.0);
        assert_eq!(report.per_sample[0].prediction, 1);
    }

    #[test]
    fn tlsh_similarity_threshold() {
        let a = digest::hash(Algo::Tlsh, &crate::rng::Stream::new(1).bytes(4000)).unwrap();
        let b = digest::hash(Algo::Tlsh, &crate::rng::Stream::new(2).bytes(4000)).unwrap();
        let d = digest::compare(&a, &b).unwrap();
        let mut cfg = BaselineConfig::new(Algo::Tlsh);
        assert_eq!(cfg.similarity(&a, &b).unwrap(), 1000u32.saturating_sub(d));
        cfg.tlsh_distance_threshold = d;
        assert_eq!(cfg.similarity(&a, &b).unwrap(), 0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.5), "0.500000");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.0123456789), "0.0123457");
        assert_eq!(sig6(123.0), "123.000");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn csv_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut s = sample(1, 1, 0.123456789);
        s.id = "x,1".into();
        s.score = 0.987654321;
        let r = EvalReport::from_samples(vec![s, sample(0, 1, 0.0)]);
        emit_report(&r, &p, ReportFormat::Csv).unwrap();
        let first = std::fs::read(&p).unwrap();
        emit_report(&r, &p, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        let back = read_report_csv(&p).unwrap();
        assert_eq!(back.per_sample[0].id, "x,1");
        assert!((back.per_sample[0].score - 0.987654321).abs() < 1e-6);
        assert_eq!((back.tp, back.fp), (1, 1));

        let empty = EvalReport::from_samples(Vec::new());
        emit_report(&empty, &p, ReportFormat::Csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "id,label,prediction,score,anomaly_fraction,unhashable\n"
        );

        let j = dir.path().join("r.json");
        emit_report(&r, &j, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&j).unwrap()).unwrap();
        assert_eq!(back.per_sample[0].score, 0.987654);
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ssdeep-xx".parse::<Method>().is_err());
    }

    #[test]
    fn learned_methods_need_checkpoints() {
        let cfg = RepetitionConfig {
            count: 2,
            runs: 1,
            factors: vec![1],
            ..RepetitionConfig::default()
        };
        let r = repetition_experiment(&cfg, &[Method::TlshTf], &HashMap::new());
        assert!(matches!(r, Err(Error::MissingCheckpoint(m)) if m == "tlsh-TF"));
    }

    proptest! {
        #[test]
        fn metric_identities(outcomes in proptest::collection::vec((0u8..2, 0u8..2), 0..300)) {
            let r = EvalReport::from_samples(outcomes.iter().map(|&(l, p)| sample(l, p, 0.0)).collect());
            prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, outcomes.len());
            let n = outcomes.len();
            if n > 0 {
                prop_assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / n as f64);
            }
        }
    }
}
