//! Acceptance suite. Each test prints one PASS/FAIL line with the measured
//! values and appends it to `acceptance.log` under the cargo target tmpdir.
//!
//! The learned-model checks train on 20,000 synthetic files and take most
//! of an hour on a single core.

mod common;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dlam::corpus::{synth_samples, CorpusEntry, HostSource, Sample, Sizing, SplitTag, SynthConfig};
use dlam::digest::Algo;
use dlam::eval::{
    baseline_classify_payloads, breakoff_analysis, evaluate, model_classify_payloads,
    repetition_experiment, BaselineConfig, EvalReport, IdPrediction, Method, RepetitionConfig,
    SampleOutcome,
};
use dlam::featurize::{batchify, featurize_corpus, FeatureRecord, TokenSequence};
use dlam::nn::{
    adam_step, bce_loss, save_checkpoint, train, AdamHyper, AdamState, Checkpoint, Model,
    ModelConfig, ModelKind, TrainConfig,
};
use dlam::rng::Stream;

const FILE_SIZE: usize = 5000;
const TRAIN_COUNT: usize = 20_000;
const EVAL_COUNT: usize = 2_000;
const POOL_SEED: u64 = 0;
const SUBSET_FRACTION: f64 = 0.15;

fn record(name: &str, pass: bool, elapsed: Duration, details: &str) {
    let line = format!(
        "{name}: {} ({details}; {:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    println!("{line}");
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.log");
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
    {
        let _ = writeln!(f, "{line}");
    }
}

fn check(name: &str, start: Instant, failures: &[String], details: &str) {
    record(name, failures.is_empty(), start.elapsed(), details);
    assert!(failures.is_empty(), "{name}: {}", failures.join("; "));
}

fn synth(count: usize, seed: u64, split: SplitTag) -> Vec<Sample> {
    let cfg = SynthConfig {
        count,
        host_size: FILE_SIZE,
        fraction_range: (0.01, 0.99),
        pool_seed: POOL_SEED,
        pool_length: dlam::corpus::DEFAULT_POOL_LENGTH,
        seed,
        host_source: HostSource::Random,
        sizing: Sizing::Payload,
        split,
    };
    synth_samples(&cfg).unwrap().1
}

fn split(samples: &[Sample]) -> (Vec<CorpusEntry>, Vec<Vec<u8>>) {
    samples
        .iter()
        .map(|s| (s.entry.clone(), s.payload.clone()))
        .unzip()
}

struct Data {
    eval_entries: Vec<CorpusEntry>,
    eval_payloads: Vec<Vec<u8>>,
    train_ssdeep: Vec<FeatureRecord>,
    train_tlsh: Vec<FeatureRecord>,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let (train_entries, train_payloads) = split(&synth(TRAIN_COUNT, 1, SplitTag::Train));
        let (eval_entries, eval_payloads) = split(&synth(EVAL_COUNT, 2, SplitTag::Eval));
        let featurize = |algo| {
            featurize_corpus(&train_entries, &train_payloads, algo)
                .unwrap()
                .0
        };
        Data {
            train_ssdeep: featurize(Algo::Ssdeep),
            train_tlsh: featurize(Algo::Tlsh),
            eval_entries,
            eval_payloads,
        }
    })
}

/// Transformer training setup used for the learned-model checks.
fn transformer_setup(algo: Algo) -> (ModelConfig, TrainConfig) {
    let mut m = ModelConfig::transformer(algo, 11);
    m.pre_norm = true;
    m.sinusoidal_positions = true;
    let t = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        max_epochs: 20,
        ..TrainConfig::for_kind(ModelKind::Transformer, 12)
    };
    (m, t)
}

struct Trained {
    checkpoint: Checkpoint,
    seconds: f64,
}

fn trained(method: Method) -> &'static Trained {
    static MODELS: OnceLock<HashMap<Method, OnceLock<Trained>>> = OnceLock::new();
    let cells = MODELS.get_or_init(|| {
        [Method::SsdeepTf, Method::TlshTf, Method::SsdeepFf]
            .into_iter()
            .map(|m| (m, OnceLock::new()))
            .collect()
    });
    cells[&method].get_or_init(|| {
        let d = data();
        let start = Instant::now();
        let checkpoint = match method {
            Method::SsdeepTf => {
                let (m, t) = transformer_setup(Algo::Ssdeep);
                train(&m, &d.train_ssdeep, &t).unwrap()
            }
            Method::TlshTf => {
                let (m, t) = transformer_setup(Algo::Tlsh);
                train(&m, &d.train_tlsh, &t).unwrap()
            }
            Method::SsdeepFf => train(
                &ModelConfig::feed_forward(Algo::Ssdeep, 13),
                &d.train_ssdeep,
                &TrainConfig::for_kind(ModelKind::FeedForward, 14),
            )
            .unwrap(),
            _ => unreachable!("no learned model for {method}"),
        };
        Trained {
            checkpoint,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn ssdeep_tf_report() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let d = data();
        model_classify_payloads(
            &d.eval_entries,
            &d.eval_payloads,
            &trained(Method::SsdeepTf).checkpoint,
        )
        .unwrap()
    })
}

fn subset(r: &EvalReport) -> EvalReport {
    r.subset(|s| s.label == 0 || s.anomaly_fraction >= SUBSET_FRACTION)
}

#[test]
fn hash_cores_match_reference_outputs() {
    let start = Instant::now();
    let reference = common::vectors::load();
    let mut failures = common::vectors::mismatches(&reference);
    if start.elapsed() >= Duration::from_secs(10) {
        failures.push(format!("took {:?}", start.elapsed()));
    }
    let details = format!(
        "{} inputs, {} mismatches",
        reference.inputs.len(),
        failures.len()
    );
    check(
        "hash cores match reference outputs",
        start,
        &failures,
        &details,
    );
}

#[test]
fn baselines_collapse_to_chance() {
    let start = Instant::now();
    let (entries, payloads) = split(&synth(2000, 21, SplitTag::Eval));
    let pool = dlam::corpus::generate_pool(POOL_SEED, dlam::corpus::DEFAULT_POOL_LENGTH).unwrap();
    let ss = baseline_classify_payloads(
        &entries,
        &payloads,
        pool.bytes(),
        &BaselineConfig::new(Algo::Ssdeep),
    )
    .unwrap();
    let tl = baseline_classify_payloads(
        &entries,
        &payloads,
        pool.bytes(),
        &BaselineConfig::new(Algo::Tlsh),
    )
    .unwrap();
    let mut failures = Vec::new();
    if (ss.accuracy - 0.5).abs() > 0.03 {
        failures.push(format!("ssdeep accuracy {}", ss.accuracy));
    }
    if ss.fpr > 0.01 {
        failures.push(format!("ssdeep fpr {}", ss.fpr));
    }
    if ss.fnr < 0.95 {
        failures.push(format!("ssdeep fnr {}", ss.fnr));
    }
    if (tl.accuracy - 0.5).abs() > 0.05 {
        failures.push(format!("tlsh accuracy {}", tl.accuracy));
    }
    if start.elapsed() >= Duration::from_secs(60) {
        failures.push(format!("took {:?}", start.elapsed()));
    }
    let details = format!(
        "ssdeep acc {:.4} fpr {:.4} fnr {:.4}; tlsh acc {:.4} fpr {:.4} fnr {:.4}",
        ss.accuracy, ss.fpr, ss.fnr, tl.accuracy, tl.fpr, tl.fnr
    );
    check("baselines collapse to chance", start, &failures, &details);
}

#[test]
fn transformer_learns_what_baselines_cannot() {
    let start = Instant::now();
    let tf = ssdeep_tf_report();
    let tf_subset = subset(tf);
    let d = data();
    let ff_model = trained(Method::SsdeepFf);
    let ff =
        model_classify_payloads(&d.eval_entries, &d.eval_payloads, &ff_model.checkpoint).unwrap();
    let tf_model = trained(Method::SsdeepTf);

    let mut failures = Vec::new();
    if tf.accuracy < 0.85 {
        failures.push(format!("transformer accuracy {:.4} < 0.85", tf.accuracy));
    }
    if tf_subset.accuracy < 0.95 {
        failures.push(format!(
            "transformer subset accuracy {:.4} < 0.95",
            tf_subset.accuracy
        ));
    }
    if ff.accuracy < 0.80 {
        failures.push(format!("feed-forward accuracy {:.4} < 0.80", ff.accuracy));
    }
    let details = format!(
        "transformer acc {:.4} (fraction >= {SUBSET_FRACTION} subset {:.4}, fpr {:.4}, fnr {:.4}, {} epochs in {:.0} s); \
         feed-forward acc {:.4} ({} epochs in {:.0} s)",
        tf.accuracy,
        tf_subset.accuracy,
        tf.fpr,
        tf.fnr,
        tf_model.checkpoint.history.len(),
        tf_model.seconds,
        ff.accuracy,
        ff_model.checkpoint.history.len(),
        ff_model.seconds,
    );
    check(
        "transformer learns what baselines cannot",
        start,
        &failures,
        &details,
    );
}

#[test]
fn false_negatives_sit_below_breakoff() {
    let start = Instant::now();
    let report = ssdeep_tf_report();
    let b = breakoff_analysis(report, SUBSET_FRACTION, 0.05).unwrap();
    let mut failures = Vec::new();
    if b.fn_below_cutoff_share < 0.70 {
        failures.push(format!(
            "{:.4} of false negatives below {SUBSET_FRACTION}",
            b.fn_below_cutoff_share
        ));
    }
    let mut bands = String::new();
    for band in b.bands.iter().filter(|band| band.lo >= 0.30 - 1e-9) {
        let _ = write!(
            bands,
            " [{:.2},{:.2}) {:.3}",
            band.lo,
            band.hi,
            band.fn_rate()
        );
        if band.fn_rate() > 0.05 {
            failures.push(format!(
                "band [{:.2},{:.2}) misses {:.4}",
                band.lo,
                band.hi,
                band.fn_rate()
            ));
        }
    }
    let details = format!(
        "{} false negatives, {:.4} below {SUBSET_FRACTION}; miss rate above 0.30:{bands}",
        report.fn_, b.fn_below_cutoff_share
    );
    check(
        "false negatives sit below the break-off",
        start,
        &failures,
        &details,
    );
}

#[test]
fn repetition_robustness() {
    let start = Instant::now();
    let cfg = RepetitionConfig {
        count: 1000,
        file_size: FILE_SIZE,
        pool_seed: POOL_SEED,
        seed: 31,
        runs: 3,
        ..RepetitionConfig::default()
    };
    let methods = [
        Method::SsdeepBaseline,
        Method::TlshBaseline,
        Method::SsdeepTf,
        Method::TlshTf,
    ];
    let checkpoints: HashMap<Method, Checkpoint> = [Method::SsdeepTf, Method::TlshTf]
        .into_iter()
        .map(|m| (m, trained(m).checkpoint.clone()))
        .collect();
    let table = repetition_experiment(&cfg, &methods, &checkpoints).unwrap();
    let acc = |f: usize, m: Method| table.accuracy(f, m).unwrap();

    let mut failures = Vec::new();
    for &f in &cfg.factors {
        for m in [Method::SsdeepBaseline, Method::TlshBaseline] {
            if (acc(f, m) - 0.5).abs() > 0.03 {
                failures.push(format!("{m} at x{f}: {:.4}", acc(f, m)));
            }
        }
    }
    let (first, last) = (cfg.factors[0], *cfg.factors.last().unwrap());
    if (acc(last, Method::TlshTf) - acc(first, Method::TlshTf)).abs() > 0.10 {
        failures.push(format!(
            "tlsh-TF moved from {:.4} to {:.4}",
            acc(first, Method::TlshTf),
            acc(last, Method::TlshTf)
        ));
    }
    for w in cfg.factors.windows(2) {
        if acc(w[1], Method::SsdeepTf) > acc(w[0], Method::SsdeepTf) + 0.02 {
            failures.push(format!("ssdeep-TF rises from x{} to x{}", w[0], w[1]));
        }
    }
    if (acc(last, Method::SsdeepTf) - 0.5).abs() > 0.05 {
        failures.push(format!(
            "ssdeep-TF at x{last}: {:.4}",
            acc(last, Method::SsdeepTf)
        ));
    }
    let mut details = String::new();
    for m in methods {
        let row: Vec<String> = cfg
            .factors
            .iter()
            .map(|&f| format!("{:.3}", acc(f, m)))
            .collect();
        let _ = write!(details, "{m} [{}] ", row.join(" "));
    }
    check(
        "repetition robustness",
        start,
        &failures,
        details.trim_end(),
    );
}

/// Largest relative gap between analytic and central-difference gradients.
fn max_grad_error(model: &Model<f64>, seqs: &[TokenSequence]) -> f64 {
    let batch = batchify(seqs, true).unwrap();
    let labels = batch.labels.clone().unwrap();
    let (_, grads, _) = model.backward(&batch, &labels).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, &analytic) in grads.iter().enumerate() {
        let mut m = model.clone();
        m.params[i] += h;
        let lp = bce_loss(&m.forward(&batch).unwrap(), &labels).unwrap();
        m.params[i] -= 2.0 * h;
        let lm = bce_loss(&m.forward(&batch).unwrap(), &labels).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let scale = numeric.abs().max(analytic.abs());
        let err = (numeric - analytic).abs() / if scale < 1e-7 { 1.0 } else { scale };
        worst = worst.max(err);
    }
    worst
}

fn toy_seq(tokens: &[u32], valid: usize, label: u8) -> TokenSequence {
    let mask: Vec<u8> = (0..tokens.len()).map(|i| u8::from(i < valid)).collect();
    TokenSequence {
        algo: Algo::Ssdeep,
        tokens: tokens
            .iter()
            .zip(&mask)
            .map(|(&t, &m)| if m == 1 { t } else { 0 })
            .collect(),
        mask,
        label: Some(label),
    }
}

fn tiny(kind: ModelKind, layers: usize) -> ModelConfig {
    let mut c = match kind {
        ModelKind::Transformer => ModelConfig::transformer(Algo::Ssdeep, 3),
        ModelKind::FeedForward => ModelConfig::feed_forward(Algo::Ssdeep, 4),
    };
    c.algo = None;
    c.vocab_size = 7;
    c.seq_len = 6;
    c.embed_dim = if kind == ModelKind::Transformer { 8 } else { 3 };
    c.num_layers = layers;
    c.num_heads = if kind == ModelKind::Transformer { 2 } else { 0 };
    c.ffn_dim = if kind == ModelKind::Transformer {
        12
    } else {
        0
    };
    c.hidden_dims = if kind == ModelKind::FeedForward {
        vec![5, 4]
    } else {
        Vec::new()
    };
    c
}

/// Runs synth, featurize, train and evaluation on a small corpus and
/// returns the checkpoint and report bytes.
fn small_pipeline(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let train_dir = dir.join("train");
    let eval_dir = dir.join("eval");
    let base = SynthConfig {
        count: 80,
        host_size: 800,
        sizing: Sizing::Payload,
        ..SynthConfig::default()
    };
    dlam::corpus::synth_corpus(
        &SynthConfig {
            seed: 41,
            ..base.clone()
        },
        &train_dir,
    )
    .unwrap();
    let eval_manifest = dlam::corpus::synth_corpus(
        &SynthConfig {
            seed: 42,
            count: 30,
            split: SplitTag::Eval,
            ..base
        },
        &eval_dir,
    )
    .unwrap();
    let (manifest, payloads) = dlam::corpus::load_corpus(&train_dir).unwrap();
    let (records, _) = featurize_corpus(&manifest.entries, &payloads, Algo::Ssdeep).unwrap();
    let mut mcfg = ModelConfig::transformer(Algo::Ssdeep, 43);
    mcfg.embed_dim = 16;
    mcfg.ffn_dim = 32;
    mcfg.num_heads = 2;
    mcfg.num_layers = 1;
    mcfg.dropout_rate = 0.1;
    let tcfg = TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        learning_rate: 1e-3,
        ..TrainConfig::for_kind(ModelKind::Transformer, 44)
    };
    let ckpt = train(&mcfg, &records, &tcfg).unwrap();
    let ckpt_path = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &ckpt_path).unwrap();
    let report = dlam::eval::model_classify(&eval_manifest, &eval_dir, &ckpt).unwrap();
    let report_path = dir.join("report.csv");
    dlam::eval::emit_report(&report, &report_path, dlam::eval::ReportFormat::Csv).unwrap();
    (
        std::fs::read(ckpt_path).unwrap(),
        std::fs::read(report_path).unwrap(),
    )
}

#[test]
fn neural_stack_properties() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let seqs = vec![
        toy_seq(&[1, 3, 5, 2, 6, 4], 6, 1),
        toy_seq(&[1, 2, 2, 6, 0, 0], 4, 0),
        toy_seq(&[1, 6, 0, 0, 0, 0], 2, 1),
    ];

    let mut worst = 0.0f64;
    for (kind, layers, pre_norm) in [
        (ModelKind::Transformer, 2, false),
        (ModelKind::Transformer, 2, true),
        (ModelKind::FeedForward, 0, false),
    ] {
        let mut cfg = tiny(kind, layers);
        cfg.pre_norm = pre_norm;
        worst = worst.max(max_grad_error(&Model::<f64>::new(cfg).unwrap(), &seqs));
    }
    if worst > 1e-4 {
        failures.push(format!("gradient relative error {worst:e}"));
    }

    let model = Model::<f32>::new(tiny(ModelKind::Transformer, 2)).unwrap();
    let clean = batchify(&seqs, true).unwrap();
    let mut noisy = clean.clone();
    let mut rng = Stream::new(5);
    for (t, m) in noisy.tokens.iter_mut().zip(&clean.mask) {
        if *m == 0 {
            *t = rng.below(7) as u32;
        }
    }
    let a: Vec<u32> = model
        .forward(&clean)
        .unwrap()
        .iter()
        .map(|p| p.to_bits())
        .collect();
    let b: Vec<u32> = model
        .forward(&noisy)
        .unwrap()
        .iter()
        .map(|p| p.to_bits())
        .collect();
    if a != b {
        failures.push("padding content changed the output".into());
    }

    let mut params = vec![0.3f64, -1.0, 2.5];
    let before = params.clone();
    let mut state = AdamState::new(3);
    for t in 1..=3 {
        adam_step(&mut params, &[0.0; 3], &mut state, &AdamHyper::new(0.1), t).unwrap();
    }
    if params != before {
        failures.push("zero gradient moved the parameters".into());
    }

    let half = bce_loss(&[0.5f64; 4], &[0, 1, 0, 1]).unwrap();
    if (half - std::f64::consts::LN_2).abs() > 1e-12 {
        failures.push(format!("bce at 0.5 is {half}"));
    }

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    if small_pipeline(d1.path()) != small_pipeline(d2.path()) {
        failures.push("two seeded pipeline runs differ".into());
    }
    if start.elapsed() >= Duration::from_secs(60) {
        failures.push(format!("took {:?}", start.elapsed()));
    }
    let details = format!(
        "max gradient error {worst:.2e}, masking, adam, bce and end-to-end determinism checked"
    );
    check("neural stack properties", start, &failures, &details);
}

#[test]
fn metric_identities_hold() {
    let start = Instant::now();
    let mut rng = Stream::new(77);
    let mut failures = Vec::new();
    let mut entries = Vec::new();
    let mut preds = Vec::new();
    let mut outcomes = Vec::new();
    for i in 0..10_000u64 {
        let label = rng.below(2) as u8;
        let prediction = rng.below(2) as u8;
        let id = format!("x{i}");
        outcomes.push(SampleOutcome {
            id: id.clone(),
            label,
            prediction,
            score: 0.0,
            anomaly_fraction: 0.0,
            unhashable: false,
        });
        entries.push((id.clone(), label));
        preds.push(IdPrediction { id, prediction });
    }
    let report = EvalReport::from_samples(outcomes.clone());

    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for o in &outcomes {
        match (o.label, o.prediction) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (0, 0) => tn += 1,
            _ => fne += 1,
        }
    }
    let n = outcomes.len() as f64;
    let expect = (
        (tp + tn) as f64 / n,
        fp as f64 / (fp + tn) as f64,
        fne as f64 / (fne + tp) as f64,
    );
    if (report.tp, report.fp, report.tn, report.fn_) != (tp, fp, tn, fne) {
        failures.push("confusion counts differ".into());
    }
    if (report.accuracy, report.fpr, report.fnr) != expect {
        failures.push(format!(
            "rates {:?} vs {:?}",
            (report.accuracy, report.fpr, report.fnr),
            expect
        ));
    }

    // Every prefix, so many different confusion tables get checked.
    for k in (1..=outcomes.len()).step_by(97) {
        let r = EvalReport::from_samples(outcomes[..k].to_vec());
        let correct = outcomes[..k]
            .iter()
            .filter(|o| o.label == o.prediction)
            .count();
        if r.accuracy != correct as f64 / k as f64 || r.tp + r.fp + r.tn + r.fn_ != k {
            failures.push(format!("prefix {k}"));
        }
    }

    // The manifest-driven path agrees and ignores prediction order.
    let pool = dlam::corpus::generate_pool(1, 1024).unwrap();
    let manifest_entries: Vec<CorpusEntry> = entries
        .iter()
        .map(|(id, label)| CorpusEntry {
            id: id.clone(),
            payload_path: format!("payloads/{id}.bin").into(),
            label: dlam::corpus::Label::from_bit(*label),
            anomaly_fraction: 0.0,
            payload_fraction: 0.0,
            anomaly_len: 0,
            host_size: 0,
            insert_offset: None,
            slice_offset: None,
            seed: 0,
        })
        .collect();
    let manifest = dlam::corpus::CorpusManifest::new(&pool, SplitTag::Eval, manifest_entries);
    let mut shuffled = preds.clone();
    Stream::new(3).shuffle(&mut shuffled);
    let via_manifest = evaluate(&shuffled, &manifest).unwrap();
    if (via_manifest.accuracy, via_manifest.fpr, via_manifest.fnr) != expect {
        failures.push("evaluate disagrees with the recount".into());
    }
    let details = format!("10000 outcomes: tp {tp} fp {fp} tn {tn} fn {fne}");
    check("metric identities", start, &failures, &details);
}
