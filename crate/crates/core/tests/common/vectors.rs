//! Rebuilds the inputs described in `tests/vectors/reference.json` and checks
//! them against the recorded reference outputs.

use std::path::PathBuf;

use dlam::{ssdeep, tlsh};
use serde::Deserialize;
use sha2::{Digest, Sha256};

const WORDS: [&[u8]; 16] = [
    b"alpha",
    b"bravo",
    b"charlie",
    b"delta",
    b"echo",
    b"foxtrot",
    b"golf",
    b"hotel",
    b"india",
    b"juliett",
    b"kilo",
    b"lima",
    b"mike",
    b"november",
    b"oscar",
    b"papa",
];

#[derive(Deserialize)]
pub struct Edit {
    op: String,
    offset: usize,
    #[serde(default)]
    len: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
pub struct Recipe {
    pub name: String,
    kind: String,
    #[serde(default)]
    seed: u64,
    len: usize,
    #[serde(default)]
    unit: usize,
    #[serde(default)]
    byte: u8,
    #[serde(default)]
    edits: Vec<Edit>,
}

#[derive(Deserialize)]
pub struct Input {
    pub recipe: Recipe,
    pub len: usize,
    pub sha256: String,
    pub ssdeep: String,
    pub tlsh: Option<String>,
}

#[derive(Deserialize)]
pub struct Reference {
    pub inputs: Vec<Input>,
    pub ssdeep_scores: Vec<Vec<u32>>,
    pub tlsh_distances: Vec<Vec<Option<u32>>>,
}

pub fn load() -> Reference {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/vectors/reference.json");
    serde_json::from_slice(&std::fs::read(path).expect("reference.json")).expect("reference parses")
}

fn stream(seed: u64, n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n + 32);
    let mut counter = 0u64;
    while out.len() < n {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(counter.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(n);
    out
}

fn text(seed: u64, n: usize) -> Vec<u8> {
    let src = stream(seed, n);
    let mut out = Vec::with_capacity(n + 16);
    let mut i = 0;
    while out.len() < n {
        let b = src[i % src.len()];
        out.extend_from_slice(WORDS[usize::from(b & 15)]);
        out.push(if b >> 4 == 0 { b'\n' } else { b' ' });
        i += 1;
    }
    out.truncate(n);
    out
}

pub fn build(r: &Recipe) -> Vec<u8> {
    let mut data = match r.kind.as_str() {
        "random" => stream(r.seed, r.len),
        "text" => text(r.seed, r.len),
        "repeat" => {
            let unit = stream(r.seed, r.unit);
            unit.iter().copied().cycle().take(r.len).collect()
        }
        "constant" => vec![r.byte; r.len],
        k => panic!("unknown recipe kind {k}"),
    };
    for e in &r.edits {
        let end = (e.offset + e.len).min(data.len());
        match e.op.as_str() {
            "overwrite" => {
                let fresh = stream(e.seed, e.len);
                data.splice(e.offset..end, fresh);
            }
            "insert" => {
                let fresh = stream(e.seed, e.len);
                data.splice(e.offset..e.offset, fresh);
            }
            "delete" => {
                data.drain(e.offset..end);
            }
            op => panic!("unknown edit {op}"),
        }
    }
    data
}

pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Every mismatch against the reference, as human-readable lines.
pub fn mismatches(reference: &Reference) -> Vec<String> {
    let mut bad = Vec::new();
    let mut sd = Vec::new();
    let mut td = Vec::new();
    for input in &reference.inputs {
        let name = &input.recipe.name;
        let data = build(&input.recipe);
        if data.len() != input.len || sha256_hex(&data) != input.sha256 {
            bad.push(format!(
                "{name}: rebuilt input differs from the recorded one"
            ));
        }
        let s = ssdeep::hash(&data).expect("non-empty input");
        if s.to_string() != input.ssdeep {
            bad.push(format!("{name}: ssdeep {s} != {}", input.ssdeep));
        }
        let t = tlsh::hash(&data).ok();
        let t_text = t.as_ref().map(|d| d.to_string());
        if t_text != input.tlsh {
            bad.push(format!("{name}: tlsh {t_text:?} != {:?}", input.tlsh));
        }
        sd.push(ssdeep::parse(&input.ssdeep).expect("reference ssdeep parses"));
        td.push(
            input
                .tlsh
                .as_deref()
                .map(|t| tlsh::parse(t).expect("reference tlsh parses")),
        );
    }
    for (i, a) in sd.iter().enumerate() {
        for (j, b) in sd.iter().enumerate() {
            let got = ssdeep::compare(a, b);
            if got != reference.ssdeep_scores[i][j] {
                bad.push(format!(
                    "ssdeep score ({i},{j}) {got} != {}",
                    reference.ssdeep_scores[i][j]
                ));
            }
            let got = match (&td[i], &td[j]) {
                (Some(x), Some(y)) => Some(tlsh::distance(x, y)),
                _ => None,
            };
            if got != reference.tlsh_distances[i][j] {
                bad.push(format!(
                    "tlsh distance ({i},{j}) {got:?} != {:?}",
                    reference.tlsh_distances[i][j]
                ));
            }
        }
    }
    bad
}
