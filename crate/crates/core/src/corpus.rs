//! Labeled corpora with spliced-in anomalies.
//!
//! An anomaly is a contiguous slice of one shared random byte pool, inserted
//! into a host so the payload grows by the slice length. The fraction is
//! stored both relative to the host (`anomaly_fraction`) and relative to the
//! final payload (`payload_fraction`).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{derive_seed, Stream};
use crate::tlsh;

pub const DEFAULT_POOL_LENGTH: usize = 65_536;
pub const MIN_FRACTION: f64 = 0.01;
pub const MAX_FRACTION: f64 = 0.99;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_DIR: &str = "payloads";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyPool {
    seed: u64,
    bytes: Vec<u8>,
}

impl AnomalyPool {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// The first `length` bytes of `Stream::new(seed)`.
pub fn generate_pool(seed: u64, length: usize) -> Result<AnomalyPool> {
    if length == 0 {
        return Err(Error::InvalidConfig("pool length must be positive".into()));
    }
    Ok(AnomalyPool {
        seed,
        bytes: Stream::new(seed).bytes(length),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Anomalous,
    Benign,
}

impl Label {
    pub fn as_bit(self) -> u8 {
        match self {
            Label::Anomalous => 1,
            Label::Benign => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Self {
        if bit != 0 {
            Label::Anomalous
        } else {
            Label::Benign
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

impl SplitTag {
    fn stream_tag(self) -> u64 {
        match self {
            SplitTag::Train => 0x0074_7261_696e,
            SplitTag::Eval => 0x6576_616c,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    /// Relative to the directory holding the manifest.
    pub payload_path: PathBuf,
    pub label: Label,
    pub anomaly_fraction: f64,
    pub payload_fraction: f64,
    pub anomaly_len: usize,
    pub host_size: usize,
    pub insert_offset: Option<usize>,
    pub slice_offset: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub pool_seed: u64,
    pub pool_length: usize,
    pub split_tag: SplitTag,
    pub anomalous_count: usize,
    pub benign_count: usize,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn new(pool: &AnomalyPool, split_tag: SplitTag, entries: Vec<CorpusEntry>) -> Self {
        let anomalous_count = entries
            .iter()
            .filter(|e| e.label == Label::Anomalous)
            .count();
        CorpusManifest {
            pool_seed: pool.seed(),
            pool_length: pool.len(),
            split_tag,
            anomalous_count,
            benign_count: entries.len() - anomalous_count,
            entries,
        }
    }

    pub fn pool(&self) -> Result<AnomalyPool> {
        generate_pool(self.pool_seed, self.pool_length)
    }
}

/// Where an injection landed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub anomaly_fraction: f64,
    pub payload_fraction: f64,
    pub anomaly_len: usize,
    pub host_size: usize,
    pub insert_offset: usize,
    pub slice_offset: usize,
    pub seed: u64,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if (MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::FractionOutOfRange(fraction))
    }
}

/// Draws the slice start, then the insertion offset.
fn splice(
    host: &[u8],
    pool: &AnomalyPool,
    len: usize,
    rng: &mut Stream,
) -> Result<(Vec<u8>, usize, usize)> {
    if len > pool.len() {
        return Err(Error::PoolTooSmall {
            needed: len,
            available: pool.len(),
        });
    }
    let slice_offset = rng.below((pool.len() - len) as u64 + 1) as usize;
    let insert_offset = rng.below(host.len() as u64 + 1) as usize;
    let mut out = Vec::with_capacity(host.len() + len);
    out.extend_from_slice(&host[..insert_offset]);
    out.extend_from_slice(&pool.bytes()[slice_offset..slice_offset + len]);
    out.extend_from_slice(&host[insert_offset..]);
    Ok((out, insert_offset, slice_offset))
}

fn injection(
    host_size: usize,
    len: usize,
    insert_offset: usize,
    slice_offset: usize,
    seed: u64,
) -> Injection {
    Injection {
        anomaly_fraction: len as f64 / host_size as f64,
        payload_fraction: len as f64 / (len + host_size) as f64,
        anomaly_len: len,
        host_size,
        insert_offset,
        slice_offset,
        seed,
    }
}

/// Splices `round(fraction * host.len())` pool bytes into `host`.
pub fn inject_anomaly(
    host: &[u8],
    pool: &AnomalyPool,
    fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<u8>, Injection)> {
    check_fraction(fraction)?;
    if host.is_empty() {
        return Err(Error::EmptyInput);
    }
    let len = (fraction * host.len() as f64).round() as usize;
    if len == 0 {
        return Err(Error::InvalidConfig(format!(
            "fraction {fraction} of a {}-byte host rounds to an empty anomaly",
            host.len()
        )));
    }
    let mut rng = Stream::new(rng_seed);
    let (out, insert_offset, slice_offset) = splice(host, pool, len, &mut rng)?;
    Ok((
        out,
        injection(host.len(), len, insert_offset, slice_offset, rng_seed),
    ))
}

pub fn concat_repeat(data: &[u8], factor: usize) -> Vec<u8> {
    assert!(factor >= 1, "repeat factor must be positive");
    data.repeat(factor)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostSource {
    Random,
    /// Every regular file directly inside the directory, in name order.
    Directory(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sizing {
    /// Hosts have `host_size` bytes; anomalous payloads grow beyond it.
    Host,
    /// Every payload has exactly `host_size` bytes: an anomaly of host-relative
    /// fraction `f` gets a host of `round(n / (1 + f))` bytes.
    Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub host_size: usize,
    pub fraction_range: (f64, f64),
    pub pool_seed: u64,
    pub pool_length: usize,
    pub seed: u64,
    pub host_source: HostSource,
    pub sizing: Sizing,
    pub split: SplitTag,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 2000,
            host_size: 5000,
            fraction_range: (MIN_FRACTION, MAX_FRACTION),
            pool_seed: 0,
            pool_length: DEFAULT_POOL_LENGTH,
            seed: 0,
            host_source: HostSource::Random,
            sizing: Sizing::Host,
            split: SplitTag::Train,
        }
    }
}

/// A synthesized entry held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub entry: CorpusEntry,
    pub payload: Vec<u8>,
}

fn list_hosts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let path = item.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no host files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.count % 2 != 0 {
            return Err(Error::InvalidConfig(format!("count {} is odd", self.count)));
        }
        let (lo, hi) = self.fraction_range;
        check_fraction(lo)?;
        check_fraction(hi)?;
        if lo > hi {
            return Err(Error::InvalidConfig(format!(
                "empty fraction range [{lo}, {hi}]"
            )));
        }
        if self.host_source == HostSource::Random && self.host_size < tlsh::MIN_DATA_LENGTH {
            return Err(Error::HostTooShortForTlsh {
                len: self.host_size,
            });
        }
        if self.sizing == Sizing::Payload && self.host_source != HostSource::Random {
            return Err(Error::InvalidConfig(
                "payload sizing needs random hosts".into(),
            ));
        }
        Ok(())
    }

    fn entry_id(&self, index: usize) -> String {
        format!("{}-{:06}", self.split.prefix(), index)
    }

    /// Entry `i` is anomalous when `i` is even. Its stream, seeded from
    /// `(seed, split, i)`, yields in order: the fraction (anomalous only), the
    /// host choice or host bytes, the pool slice start and the insertion
    /// offset.
    fn sample(&self, index: usize, pool: &AnomalyPool, hosts: &[PathBuf]) -> Result<Sample> {
        let id = self.entry_id(index);
        let seed = derive_seed(self.seed, self.split.stream_tag(), index as u64);
        let mut rng = Stream::new(seed);
        let anomalous = index % 2 == 0;
        let fraction = if anomalous {
            Some(rng.uniform(self.fraction_range.0, self.fraction_range.1))
        } else {
            None
        };

        let host = match &self.host_source {
            HostSource::Random => {
                let size = match (self.sizing, fraction) {
                    (Sizing::Payload, Some(f)) => {
                        (self.host_size as f64 / (1.0 + f)).round() as usize
                    }
                    _ => self.host_size,
                };
                rng.bytes(size)
            }
            HostSource::Directory(_) => {
                let path = &hosts[rng.below(hosts.len() as u64) as usize];
                fsutil::read(path)?
            }
        };

        let payload_path = Path::new(PAYLOAD_DIR).join(format!("{id}.bin"));
        let (payload, entry) = match fraction {
            Some(f) => {
                let len = match self.sizing {
                    Sizing::Payload => self.host_size - host.len(),
                    Sizing::Host => (f * host.len() as f64).round() as usize,
                };
                let len = len.max(1);
                if host.is_empty() {
                    return Err(Error::HostTooShortForTlsh { len: 0 });
                }
                let (payload, insert_offset, slice_offset) = splice(&host, pool, len, &mut rng)?;
                let inj = injection(host.len(), len, insert_offset, slice_offset, seed);
                let entry = CorpusEntry {
                    id,
                    payload_path,
                    label: Label::Anomalous,
                    anomaly_fraction: inj.anomaly_fraction,
                    payload_fraction: inj.payload_fraction,
                    anomaly_len: len,
                    host_size: host.len(),
                    insert_offset: Some(insert_offset),
                    slice_offset: Some(slice_offset),
                    seed,
                };
                (payload, entry)
            }
            None => {
                let entry = CorpusEntry {
                    id,
                    payload_path,
                    label: Label::Benign,
                    anomaly_fraction: 0.0,
                    payload_fraction: 0.0,
                    anomaly_len: 0,
                    host_size: host.len(),
                    insert_offset: None,
                    slice_offset: None,
                    seed,
                };
                (host, entry)
            }
        };
        if payload.len() < tlsh::MIN_DATA_LENGTH {
            return Err(Error::HostTooShortForTlsh { len: payload.len() });
        }
        Ok(Sample { entry, payload })
    }
}

/// Synthesizes every entry in memory. Entries are independent, so the work
/// is spread over the rayon pool without affecting the result.
pub fn synth_samples(config: &SynthConfig) -> Result<(AnomalyPool, Vec<Sample>)> {
    config.validate()?;
    let pool = generate_pool(config.pool_seed, config.pool_length)?;
    let hosts = match &config.host_source {
        HostSource::Random => Vec::new(),
        HostSource::Directory(dir) => list_hosts(dir)?,
    };
    let samples = (0..config.count)
        .into_par_iter()
        .map(|i| config.sample(i, &pool, &hosts))
        .collect::<Result<Vec<_>>>()?;
    Ok((pool, samples))
}

/// Writes payloads and `manifest.json` under `out_dir`.
///
/// Everything is staged in a sibling temporary directory and renamed into
/// place at the end, so a failure leaves `out_dir` untouched. `out_dir` must
/// be absent or empty.
pub fn synth_corpus(config: &SynthConfig, out_dir: &Path) -> Result<CorpusManifest> {
    let (pool, samples) = synth_samples(config)?;
    if out_dir.exists() {
        let mut it = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if it.next().is_some() {
            return Err(Error::InvalidConfig(format!(
                "output directory {} is not empty",
                out_dir.display()
            )));
        }
    }
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".dlam-corpus")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let payload_dir = staging.path().join(PAYLOAD_DIR);
    fs::create_dir(&payload_dir).map_err(|e| Error::io(&payload_dir, e))?;
    for s in &samples {
        let path = staging.path().join(&s.entry.payload_path);
        fs::write(&path, &s.payload).map_err(|e| Error::io(&path, e))?;
    }
    let entries = samples.into_iter().map(|s| s.entry).collect();
    let manifest = CorpusManifest::new(&pool, config.split, entries);
    save_manifest(&manifest, &staging.path().join(MANIFEST_FILE))?;

    if out_dir.exists() {
        fs::remove_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let staged = staging.keep();
    if let Err(e) = fs::rename(&staged, out_dir) {
        let _ = fs::remove_dir_all(&staged);
        return Err(Error::io(out_dir, e));
    }
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    schema_version: u32,
    #[serde(flatten)]
    manifest: CorpusManifest,
}

pub fn save_manifest(m: &CorpusManifest, path: &Path) -> Result<()> {
    let file = ManifestFile {
        schema_version: MANIFEST_VERSION,
        manifest: m.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
    text.push('\n');
    fsutil::write_atomic(path, text.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fsutil::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(MANIFEST_VERSION) => {}
        Some(v) => {
            return Err(Error::SchemaMismatch(format!(
                "manifest schema version {v}, expected {MANIFEST_VERSION}"
            )))
        }
        None => return Err(Error::SchemaMismatch("missing schema_version".into())),
    }
    let file: ManifestFile =
        serde_json::from_value(value).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    let m = file.manifest;
    let mut ids = std::collections::HashSet::new();
    for e in &m.entries {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::SchemaMismatch(format!(
                "duplicate entry id {}",
                e.id
            )));
        }
    }
    Ok(m)
}

/// Reads an entry's payload, resolving its path against `corpus_dir`.
pub fn load_payload(corpus_dir: &Path, entry: &CorpusEntry) -> Result<Vec<u8>> {
    fsutil::read(&corpus_dir.join(&entry.payload_path))
}

/// Loads a manifest together with all payloads.
pub fn load_corpus(corpus_dir: &Path) -> Result<(CorpusManifest, Vec<Vec<u8>>)> {
    let manifest = load_manifest(&corpus_dir.join(MANIFEST_FILE))?;
    let payloads = manifest
        .entries
        .par_iter()
        .map(|e| load_payload(corpus_dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, payloads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool() -> AnomalyPool {
        generate_pool(99, DEFAULT_POOL_LENGTH).unwrap()
    }

    #[test]
    fn pool_is_seeded() {
        let a = generate_pool(1, 65536).unwrap();
        assert_eq!(a, generate_pool(1, 65536).unwrap());
        assert_ne!(a.bytes(), generate_pool(2, 65536).unwrap().bytes());
        assert_eq!(generate_pool(5, 1).unwrap().len(), 1);
        assert!(generate_pool(5, 0).is_err());
    }

    #[test]
    fn half_fraction_splices_half_the_host() {
        let p = pool();
        let host = Stream::new(3).bytes(1000);
        let (out, inj) = inject_anomaly(&host, &p, 0.5, 17).unwrap();
        assert_eq!(out.len(), 1500);
        assert_eq!(inj.anomaly_len, 500);
        let s = inj.slice_offset;
        let o = inj.insert_offset;
        assert_eq!(&out[o..o + 500], &p.bytes()[s..s + 500]);
        assert_eq!(&out[..o], &host[..o]);
        assert_eq!(&out[o + 500..], &host[o..]);
        assert!((inj.payload_fraction - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(inject_anomaly(&host, &p, 0.5, 17).unwrap().0, out);
    }

    #[test]
    fn fraction_bounds() {
        let p = pool();
        let host = vec![7u8; 100];
        assert!(matches!(
            inject_anomaly(&host, &p, 0.995, 1),
            Err(Error::FractionOutOfRange(_))
        ));
        assert!(matches!(
            inject_anomaly(&host, &p, 0.005, 1),
            Err(Error::FractionOutOfRange(_))
        ));
        let small = generate_pool(1, 10).unwrap();
        assert!(matches!(
            inject_anomaly(&host, &small, 0.5, 1),
            Err(Error::PoolTooSmall {
                needed: 50,
                available: 10
            })
        ));
    }

    #[test]
    fn repeat() {
        assert_eq!(concat_repeat(b"ab", 3), b"ababab");
        assert_eq!(concat_repeat(b"xyz", 1), b"xyz");
    }

    #[test]
    fn odd_count_rejected() {
        let cfg = SynthConfig {
            count: 3,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_samples(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tiny_hosts_rejected() {
        let cfg = SynthConfig {
            count: 2,
            host_size: 49,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_samples(&cfg),
            Err(Error::HostTooShortForTlsh { len: 49 })
        ));
    }

    #[test]
    fn payload_sizing_fixes_length() {
        let cfg = SynthConfig {
            count: 40,
            sizing: Sizing::Payload,
            ..SynthConfig::default()
        };
        let (_, samples) = synth_samples(&cfg).unwrap();
        for s in &samples {
            assert_eq!(s.payload.len(), 5000);
            assert_eq!(s.entry.host_size + s.entry.anomaly_len, 5000);
        }
    }

    #[test]
    fn manifest_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let empty = CorpusManifest::new(&pool(), SplitTag::Eval, Vec::new());
        save_manifest(&empty, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), empty);

        let cfg = SynthConfig {
            count: 10,
            ..SynthConfig::default()
        };
        let (pl, samples) = synth_samples(&cfg).unwrap();
        let m = CorpusManifest::new(
            &pl,
            SplitTag::Train,
            samples.into_iter().map(|s| s.entry).collect(),
        );
        save_manifest(&m, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), m);

        let text = fs::read(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::SchemaMismatch(_))));
        assert!(matches!(
            load_manifest(&dir.path().join("missing.json")),
            Err(Error::IoFailure { .. })
        ));

        let bumped = String::from_utf8(text)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 2");
        fs::write(&p, bumped).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::SchemaMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn injection_contract(host_len in 1usize..3000, fraction in 0.01f64..=0.99, seed: u64) {
            let p = pool();
            let host = Stream::new(seed ^ 1).bytes(host_len);
            match inject_anomaly(&host, &p, fraction, seed) {
                Ok((out, inj)) => {
                    let a = (fraction * host_len as f64).round() as usize;
                    prop_assert_eq!(out.len(), host_len + a);
                    prop_assert!(inj.insert_offset <= host_len);
                    let (o, s) = (inj.insert_offset, inj.slice_offset);
                    prop_assert_eq!(&out[o..o + a], &p.bytes()[s..s + a]);
                }
                Err(e) => prop_assert!(matches!(e, Error::InvalidConfig(_))),
            }
        }

        #[test]
        fn repeat_length(data in proptest::collection::vec(any::<u8>(), 0..200), factor in 1usize..10) {
            prop_assert_eq!(concat_repeat(&data, factor).len(), factor * data.len());
        }
    }
}
