//! Context-triggered piecewise hashing, bit-compatible with ssdeep 2.14.
//!
//! A 7-byte rolling hash decides piece boundaries; each piece is reduced to
//! one base64 character by an FNV hash. The digest carries two signatures,
//! one at the chosen block size and one at twice that size.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const ROLLING_WINDOW: usize = 7;
pub const MIN_BLOCKSIZE: u32 = 3;
/// Maximum length of the first signature.
pub const SPAMSUM_LENGTH: usize = 64;
/// Maximum length of the second signature.
pub const HALF_SPAMSUM_LENGTH: usize = SPAMSUM_LENGTH / 2;
/// Upper bound on the canonical text length of any digest.
pub const MAX_DIGEST_TEXT_LEN: usize = 148;

const NUM_BLOCKHASHES: usize = 31;
const TOTAL_SIZE_MAX: u64 = (MIN_BLOCKSIZE as u64) << (NUM_BLOCKHASHES - 1) << 6;

const FNV_PRIME: u32 = 0x0100_0193;
const FNV_INIT: u32 = 0x2802_1967;
/// Only the low six bits of the FNV state ever reach the signature, and they
/// depend only on the low six bits of the previous state.
const HASH_INIT: u8 = (FNV_INIT & 0x3f) as u8;

pub const BASE64_ALPHABET: &[u8; 64] =
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

#[inline]
fn piece_hash(c: u8, h: u8) -> u8 {
    ((u32::from(h).wrapping_mul(FNV_PRIME) ^ u32::from(c)) & 0x3f) as u8
}

#[inline]
fn block_size(index: usize) -> u32 {
    MIN_BLOCKSIZE << index
}

/// Position of `c` in the base64 alphabet.
pub fn base64_index(c: u8) -> Option<u8> {
    match c {
        b'A'..=b'Z' => Some(c - b'A'),
        b'a'..=b'z' => Some(c - b'a' + 26),
        b'0'..=b'9' => Some(c - b'0' + 52),
        b'+' => Some(62),
        b'/' => Some(63),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RollingHash {
    window: [u8; ROLLING_WINDOW],
    h1: u32,
    h2: u32,
    h3: u32,
    n: usize,
}

impl RollingHash {
    #[inline]
    pub(crate) fn update(&mut self, c: u8) {
        let c32 = u32::from(c);
        self.h2 = self.h2.wrapping_sub(self.h1);
        self.h2 = self.h2.wrapping_add(ROLLING_WINDOW as u32 * c32);
        self.h1 = self.h1.wrapping_add(c32);
        self.h1 = self.h1.wrapping_sub(u32::from(self.window[self.n]));
        self.window[self.n] = c;
        self.n += 1;
        if self.n == ROLLING_WINDOW {
            self.n = 0;
        }
        self.h3 = (self.h3 << 5) ^ c32;
    }

    #[inline]
    pub(crate) fn sum(&self) -> u32 {
        self.h1.wrapping_add(self.h2).wrapping_add(self.h3)
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockHash {
    digest: [u8; SPAMSUM_LENGTH],
    dindex: usize,
    /// Pending character at `digest[dindex]` once the signature is full; 0 if none.
    pending: u8,
    half_pending: u8,
    h: u8,
    half_h: u8,
}

impl BlockHash {
    const fn new() -> Self {
        BlockHash {
            digest: [0; SPAMSUM_LENGTH],
            dindex: 0,
            pending: 0,
            half_pending: 0,
            h: HASH_INIT,
            half_h: HASH_INIT,
        }
    }
}

/// Single-pass engine tracking every candidate block size at once.
struct Engine {
    total_size: u64,
    reduce_border: u64,
    bh_start: usize,
    bh_end: usize,
    bh: [BlockHash; NUM_BLOCKHASHES],
    roll: RollingHash,
    roll_mask: u32,
    last_h: Option<u8>,
}

impl Engine {
    fn new() -> Self {
        Engine {
            total_size: 0,
            reduce_border: u64::from(MIN_BLOCKSIZE) * SPAMSUM_LENGTH as u64,
            bh_start: 0,
            bh_end: 1,
            bh: [BlockHash::new(); NUM_BLOCKHASHES],
            roll: RollingHash::default(),
            roll_mask: 0,
            last_h: None,
        }
    }

    fn try_fork(&mut self) {
        let last = self.bh_end - 1;
        if self.bh_end < NUM_BLOCKHASHES {
            let (h, half_h) = (self.bh[last].h, self.bh[last].half_h);
            let next = &mut self.bh[self.bh_end];
            *next = BlockHash::new();
            next.h = h;
            next.half_h = half_h;
            self.bh_end += 1;
        } else if self.last_h.is_none() {
            self.last_h = Some(self.bh[last].h);
        }
    }

    fn try_reduce(&mut self) {
        if self.bh_end - self.bh_start < 2 {
            return;
        }
        if self.reduce_border >= self.total_size {
            return;
        }
        if self.bh[self.bh_start + 1].dindex < HALF_SPAMSUM_LENGTH {
            return;
        }
        self.bh_start += 1;
        self.reduce_border *= 2;
        self.roll_mask = self.roll_mask * 2 + 1;
    }

    #[inline]
    fn step(&mut self, c: u8) {
        self.roll.update(c);
        let horg = self.roll.sum().wrapping_add(1);
        let mut h = horg / MIN_BLOCKSIZE;

        for bh in &mut self.bh[self.bh_start..self.bh_end] {
            bh.h = piece_hash(c, bh.h);
            bh.half_h = piece_hash(c, bh.half_h);
        }
        if let Some(last) = self.last_h.as_mut() {
            *last = piece_hash(c, *last);
        }

        // horg == 0 means sum == u32::MAX, which is never -1 mod 3·2^k.
        if horg == 0 || h & self.roll_mask != 0 || horg % MIN_BLOCKSIZE != 0 {
            return;
        }
        h >>= self.bh_start;

        let mut i = self.bh_start;
        loop {
            if self.bh[i].dindex == 0 {
                self.try_fork();
            }
            let bh = &mut self.bh[i];
            bh.pending = BASE64_ALPHABET[bh.h as usize];
            bh.half_pending = BASE64_ALPHABET[bh.half_h as usize];
            if bh.dindex < SPAMSUM_LENGTH - 1 {
                bh.digest[bh.dindex] = bh.pending;
                bh.dindex += 1;
                bh.pending = 0;
                bh.h = HASH_INIT;
                if bh.dindex < HALF_SPAMSUM_LENGTH {
                    bh.half_h = HASH_INIT;
                    bh.half_pending = 0;
                }
            } else {
                self.try_reduce();
            }
            if h & 1 != 0 {
                break;
            }
            h >>= 1;
            i += 1;
            if i >= self.bh_end {
                break;
            }
        }
    }

    fn digest(&self) -> SsdeepDigest {
        let rolling = self.roll.sum();
        let mut bi = self.bh_start;
        while u64::from(block_size(bi)) * (SPAMSUM_LENGTH as u64) < self.total_size {
            bi += 1;
        }
        if bi >= self.bh_end {
            bi = self.bh_end - 1;
        }
        while bi > self.bh_start && self.bh[bi].dindex < HALF_SPAMSUM_LENGTH {
            bi -= 1;
        }

        let bh = &self.bh[bi];
        let mut sig1 = bh.digest[..bh.dindex].to_vec();
        if rolling != 0 {
            sig1.push(BASE64_ALPHABET[bh.h as usize]);
        } else if bh.pending != 0 {
            sig1.push(bh.pending);
        }

        let mut sig2 = Vec::with_capacity(HALF_SPAMSUM_LENGTH);
        if bi < self.bh_end - 1 {
            let next = &self.bh[bi + 1];
            let n = next.dindex.min(HALF_SPAMSUM_LENGTH - 1);
            sig2.extend_from_slice(&next.digest[..n]);
            if rolling != 0 {
                sig2.push(BASE64_ALPHABET[next.half_h as usize]);
            } else if next.half_pending != 0 {
                sig2.push(next.half_pending);
            }
        } else if rolling != 0 {
            // Only reachable at the smallest or the largest block size.
            let h = if bi == 0 {
                bh.h
            } else {
                self.last_h.unwrap_or(bh.h)
            };
            sig2.push(BASE64_ALPHABET[h as usize]);
        }

        SsdeepDigest {
            block_size: block_size(bi),
            // Both signatures are drawn from the base64 alphabet.
            sig1: String::from_utf8(sig1).expect("base64 is ASCII"),
            sig2: String::from_utf8(sig2).expect("base64 is ASCII"),
        }
    }
}

/// An ssdeep digest: block size plus two base64 signatures.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SsdeepDigest {
    block_size: u32,
    sig1: String,
    sig2: String,
}

impl SsdeepDigest {
    /// Builds a digest from its parts, enforcing every invariant.
    pub fn new(block_size: u32, sig1: &str, sig2: &str) -> Result<Self> {
        if !is_valid_block_size(block_size) {
            return Err(Error::MalformedDigest(format!(
                "block size {block_size} is not 3·2^k"
            )));
        }
        check_signature(sig1, SPAMSUM_LENGTH)?;
        check_signature(sig2, HALF_SPAMSUM_LENGTH)?;
        Ok(SsdeepDigest {
            block_size,
            sig1: sig1.to_owned(),
            sig2: sig2.to_owned(),
        })
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn sig1(&self) -> &str {
        &self.sig1
    }

    pub fn sig2(&self) -> &str {
        &self.sig2
    }
}

fn is_valid_block_size(bs: u32) -> bool {
    bs % MIN_BLOCKSIZE == 0 && (bs / MIN_BLOCKSIZE).is_power_of_two()
}

fn check_signature(sig: &str, max_len: usize) -> Result<()> {
    if sig.len() > max_len {
        return Err(Error::MalformedDigest(format!(
            "signature longer than {max_len} characters"
        )));
    }
    if let Some(bad) = sig.bytes().find(|&c| base64_index(c).is_none()) {
        return Err(Error::MalformedDigest(format!(
            "character {:?} outside the base64 alphabet",
            bad as char
        )));
    }
    Ok(())
}

impl fmt::Display for SsdeepDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.block_size, self.sig1, self.sig2)
    }
}

impl FromStr for SsdeepDigest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

/// Hashes a whole buffer.
pub fn hash(data: &[u8]) -> Result<SsdeepDigest> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    if data.len() as u64 > TOTAL_SIZE_MAX {
        return Err(Error::InputTooLong(data.len() as u64));
    }
    let mut engine = Engine::new();
    engine.total_size = data.len() as u64;
    for &c in data {
        engine.step(c);
    }
    Ok(engine.digest())
}

/// Parses the canonical `block_size:sig1:sig2` form.
pub fn parse(text: &str) -> Result<SsdeepDigest> {
    let mut parts = text.split(':');
    let (Some(bs), Some(sig1), Some(sig2), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(Error::MalformedDigest(format!(
            "expected block_size:sig1:sig2, got {text:?}"
        )));
    };
    if bs.is_empty() || !bs.bytes().all(|c| c.is_ascii_digit()) || bs.starts_with('0') {
        return Err(Error::MalformedDigest(format!("bad block size {bs:?}")));
    }
    let block_size = bs
        .parse::<u32>()
        .map_err(|_| Error::MalformedDigest(format!("bad block size {bs:?}")))?;
    SsdeepDigest::new(block_size, sig1, sig2)
}

pub fn format(digest: &SsdeepDigest) -> String {
    digest.to_string()
}

/// Drops characters that would extend a run beyond three repeats.
fn eliminate_sequences(sig: &str) -> Vec<u8> {
    let bytes = sig.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    for (i, &c) in bytes.iter().enumerate() {
        if i >= 3 && c == bytes[i - 1] && c == bytes[i - 2] && c == bytes[i - 3] {
            continue;
        }
        out.push(c);
    }
    out
}

fn has_common_substring(s1: &[u8], s2: &[u8]) -> bool {
    if s1.len() < ROLLING_WINDOW || s2.len() < ROLLING_WINDOW {
        return false;
    }
    s1.windows(ROLLING_WINDOW)
        .any(|w1| s2.windows(ROLLING_WINDOW).any(|w2| w1 == w2))
}

/// Edit distance with unit insert/delete cost and a replacement cost of two.
pub(crate) fn weighted_edit_distance(s1: &[u8], s2: &[u8]) -> u32 {
    const INSERT: u32 = 1;
    const REMOVE: u32 = 1;
    const REPLACE: u32 = 2;
    let mut prev: Vec<u32> = (0..=s2.len() as u32).map(|i| i * REMOVE).collect();
    let mut cur = vec![0u32; s2.len() + 1];
    for (i1, &c1) in s1.iter().enumerate() {
        cur[0] = (i1 as u32 + 1) * INSERT;
        for (i2, &c2) in s2.iter().enumerate() {
            let cost_a = prev[i2 + 1] + INSERT;
            let cost_d = cur[i2] + REMOVE;
            let cost_r = prev[i2] + if c1 == c2 { 0 } else { REPLACE };
            cur[i2 + 1] = cost_a.min(cost_d).min(cost_r);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[s2.len()]
}

fn score_strings(s1: &[u8], s2: &[u8], block_size: u64) -> u32 {
    if s1.len() > SPAMSUM_LENGTH || s2.len() > SPAMSUM_LENGTH {
        return 0;
    }
    if !has_common_substring(s1, s2) {
        return 0;
    }
    let dist = weighted_edit_distance(s1, s2);
    let mut score = dist * SPAMSUM_LENGTH as u32 / (s1.len() + s2.len()) as u32;
    score = 100 * score / SPAMSUM_LENGTH as u32;
    score = 100 - score;
    // Small block sizes must not overstate how much content matched.
    let uncapped_from =
        (99 + ROLLING_WINDOW as u64) / ROLLING_WINDOW as u64 * u64::from(MIN_BLOCKSIZE);
    if block_size >= uncapped_from {
        return score;
    }
    let cap = block_size / u64::from(MIN_BLOCKSIZE) * s1.len().min(s2.len()) as u64;
    score.min(cap as u32)
}

/// Similarity score in `[0, 100]`; digests whose block sizes differ by more
/// than a factor of two are incomparable and score 0.
pub fn compare(a: &SsdeepDigest, b: &SsdeepDigest) -> u32 {
    let (bs1, bs2) = (u64::from(a.block_size), u64::from(b.block_size));
    if bs1 != bs2 && bs1 * 2 != bs2 && bs2 * 2 != bs1 {
        return 0;
    }
    let s1b1 = eliminate_sequences(&a.sig1);
    let s1b2 = eliminate_sequences(&a.sig2);
    let s2b1 = eliminate_sequences(&b.sig1);
    let s2b2 = eliminate_sequences(&b.sig2);

    if bs1 == bs2 && s1b1 == s2b1 && s1b2 == s2b2 {
        return 100;
    }
    if bs1 == bs2 {
        let score1 = score_strings(&s1b1, &s2b1, bs1);
        let score2 = score_strings(&s1b2, &s2b2, bs1 * 2);
        score1.max(score2)
    } else if bs1 * 2 == bs2 {
        score_strings(&s2b1, &s1b2, bs2)
    } else {
        score_strings(&s1b1, &s2b2, bs1)
    }
}
