//! TLSH locality-sensitive hashing (128 buckets, 1-byte checksum),
//! bit-compatible with the reference implementation.
//!
//! Every 5-byte window feeds six salted Pearson hashes of byte triplets into
//! 256 counters, of which the first 128 form the digest. Each bucket becomes
//! a 2-bit code by comparing its count against the quartiles of all counts.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const WINDOW_SIZE: usize = 5;
pub const EFF_BUCKETS: usize = 128;
pub const CODE_SIZE: usize = EFF_BUCKETS / 4;
pub const MIN_DATA_LENGTH: usize = 50;
/// Length of the canonical text form: version prefix plus 70 hex digits.
pub const DIGEST_TEXT_LEN: usize = 72;
pub const DIGEST_HEX_LEN: usize = 70;
const VERSION_PREFIX: &str = "T1";

/// Pearson substitution table of the reference implementation.
#[rustfmt::skip]
const PEARSON: [u8; 256] = [
    0x01, 0x57, 0x31, 0x0c, 0xb0, 0xb2, 0x66, 0xa6, 0x79, 0xc1, 0x06, 0x54, 0xf9, 0xe6, 0x2c, 0xa3,
    0x0e, 0xc5, 0xd5, 0xb5, 0xa1, 0x55, 0xda, 0x50, 0x40, 0xef, 0x18, 0xe2, 0xec, 0x8e, 0x26, 0xc8,
    0x6e, 0xb1, 0x68, 0x67, 0x8d, 0xfd, 0xff, 0x32, 0x4d, 0x65, 0x51, 0x12, 0x2d, 0x60, 0x1f, 0xde,
    0x19, 0x6b, 0xbe, 0x46, 0x56, 0xed, 0xf0, 0x22, 0x48, 0xf2, 0x14, 0xd6, 0xf4, 0xe3, 0x95, 0xeb,
    0x61, 0xea, 0x39, 0x16, 0x3c, 0xfa, 0x52, 0xaf, 0xd0, 0x05, 0x7f, 0xc7, 0x6f, 0x3e, 0x87, 0xf8,
    0xae, 0xa9, 0xd3, 0x3a, 0x42, 0x9a, 0x6a, 0xc3, 0xf5, 0xab, 0x11, 0xbb, 0xb6, 0xb3, 0x00, 0xf3,
    0x84, 0x38, 0x94, 0x4b, 0x80, 0x85, 0x9e, 0x64, 0x82, 0x7e, 0x5b, 0x0d, 0x99, 0xf6, 0xd8, 0xdb,
    0x77, 0x44, 0xdf, 0x4e, 0x53, 0x58, 0xc9, 0x63, 0x7a, 0x0b, 0x5c, 0x20, 0x88, 0x72, 0x34, 0x0a,
    0x8a, 0x1e, 0x30, 0xb7, 0x9c, 0x23, 0x3d, 0x1a, 0x8f, 0x4a, 0xfb, 0x5e, 0x81, 0xa2, 0x3f, 0x98,
    0xaa, 0x07, 0x73, 0xa7, 0xf1, 0xce, 0x03, 0x96, 0x37, 0x3b, 0x97, 0xdc, 0x5a, 0x35, 0x17, 0x83,
    0x7d, 0xad, 0x0f, 0xee, 0x4f, 0x5f, 0x59, 0x10, 0x69, 0x89, 0xe1, 0xe0, 0xd9, 0xa0, 0x25, 0x7b,
    0x76, 0x49, 0x02, 0x9d, 0x2e, 0x74, 0x09, 0x91, 0x86, 0xe4, 0xcf, 0xd4, 0xca, 0xd7, 0x45, 0xe5,
    0x1b, 0xbc, 0x43, 0x7c, 0xa8, 0xfc, 0x2a, 0x04, 0x1d, 0x6c, 0x15, 0xf7, 0x13, 0xcd, 0x27, 0xcb,
    0xe9, 0x28, 0xba, 0x93, 0xc6, 0xc0, 0x9b, 0x21, 0xa4, 0xbf, 0x62, 0xcc, 0xa5, 0xb4, 0x75, 0x4c,
    0x8c, 0x24, 0xd2, 0xac, 0x29, 0x36, 0x9f, 0x08, 0xb9, 0xe8, 0x71, 0xc4, 0xe7, 0x2f, 0x92, 0x78,
    0x33, 0x41, 0x1c, 0x90, 0xfe, 0xdd, 0x5d, 0xbd, 0xc2, 0x8b, 0x70, 0x2b, 0x47, 0x6d, 0xb8, 0xd1,
];

/// Upper bounds of each logarithmic length code (code `i` covers
/// `(TOP_VALUES[i-1], TOP_VALUES[i]]`).
#[rustfmt::skip]
const TOP_VALUES: [u32; 170] = [
    1, 2, 3, 5, 7, 11, 17, 25, 38, 57, 86, 129, 194, 291, 437, 656, 854, 1110, 1443, 1876, 2439,
    3171, 3475, 3823, 4205, 4626, 5088, 5597, 6157, 6772, 7450, 8195, 9014, 9916, 10907, 11998,
    13198, 14518, 15970, 17567, 19323, 21256, 23382, 25720, 28292, 31121, 34233, 37656, 41422,
    45564, 50121, 55133, 60646, 66711, 73382, 80721, 88793, 97672, 107439, 118183, 130002, 143002,
    157302, 173032, 190335, 209369, 230306, 253337, 278670, 306538, 337191, 370911, 408002, 448802,
    493682, 543050, 597356, 657091, 722800, 795081, 874589, 962048, 1058252, 1164078, 1280486,
    1408534, 1549388, 1704327, 1874759, 2062236, 2268459, 2495305, 2744836, 3019320, 3321252,
    3653374, 4018711, 4420582, 4862641, 5348905, 5883796, 6472176, 7119394, 7831333, 8614467,
    9475909, 10423501, 11465851, 12612437, 13873681, 15261050, 16787154, 18465870, 20312458,
    22343706, 24578077, 27035886, 29739474, 32713425, 35984770, 39583245, 43541573, 47895730,
    52685306, 57953837, 63749221, 70124148, 77136564, 84850228, 93335252, 102668779, 112935659,
    124229227, 136652151, 150317384, 165349128, 181884040, 200072456, 220079703, 242087671,
    266296456, 292926096, 322218735, 354440623, 389884688, 428873168, 471760495, 518936559,
    570830240, 627913311, 690704607, 759775136, 835752671, 919327967, 1011260767, 1112386880,
    1223623232, 1345985727, 1480584256, 1628642751, 1791507135, 1970657856, 2167723648,
    2384496256, 2622945920, 2885240448, 3173764736, 3491141248, 3840255616, 4224281216,
];

#[inline]
fn pearson(salt: u8, a: u8, b: u8, c: u8) -> u8 {
    let mut h = PEARSON[salt as usize];
    h = PEARSON[(h ^ a) as usize];
    h = PEARSON[(h ^ b) as usize];
    PEARSON[(h ^ c) as usize]
}

fn length_code(len: usize) -> Result<u8> {
    let len32 = u32::try_from(len).map_err(|_| Error::InputTooLong(len as u64))?;
    match TOP_VALUES.binary_search(&len32) {
        Ok(i) => Ok(i as u8),
        Err(i) if i < TOP_VALUES.len() => Ok(i as u8),
        Err(_) => Err(Error::InputTooLong(len as u64)),
    }
}

#[inline]
fn swap_nibbles(b: u8) -> u8 {
    b.rotate_left(4)
}

/// A TLSH digest: 3 header bytes and a 32-byte body of 2-bit bucket codes.
///
/// `body` is stored in text order: `body[0]` holds buckets 124..=127,
/// `body[31]` holds buckets 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TlshDigest {
    checksum: u8,
    l_value: u8,
    /// Low nibble: q1 ratio; high nibble: q2 ratio.
    q_ratios: u8,
    body: [u8; CODE_SIZE],
}

impl TlshDigest {
    pub fn from_parts(checksum: u8, l_value: u8, q_ratios: u8, body: [u8; CODE_SIZE]) -> Self {
        TlshDigest {
            checksum,
            l_value,
            q_ratios,
            body,
        }
    }

    pub fn checksum(&self) -> u8 {
        self.checksum
    }

    pub fn l_value(&self) -> u8 {
        self.l_value
    }

    pub fn q_ratios(&self) -> u8 {
        self.q_ratios
    }

    pub fn q1_ratio(&self) -> u8 {
        self.q_ratios & 0x0f
    }

    pub fn q2_ratio(&self) -> u8 {
        self.q_ratios >> 4
    }

    pub fn body(&self) -> &[u8; CODE_SIZE] {
        &self.body
    }

    /// Code of bucket `i` (0..128), in `{0, 1, 2, 3}`.
    pub fn bucket_code(&self, i: usize) -> u8 {
        let byte = self.body[CODE_SIZE - 1 - i / 4];
        (byte >> ((i % 4) * 2)) & 0b11
    }

    /// The 35 digest bytes as they appear in the hex text.
    pub fn to_bytes(&self) -> [u8; 35] {
        let mut out = [0u8; 35];
        out[0] = swap_nibbles(self.checksum);
        out[1] = swap_nibbles(self.l_value);
        out[2] = swap_nibbles(self.q_ratios);
        out[3..].copy_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8; 35]) -> Self {
        let mut body = [0u8; CODE_SIZE];
        body.copy_from_slice(&bytes[3..]);
        TlshDigest {
            checksum: swap_nibbles(bytes[0]),
            l_value: swap_nibbles(bytes[1]),
            q_ratios: swap_nibbles(bytes[2]),
            body,
        }
    }

    /// The 70 hex digits without the version prefix.
    pub fn hex(&self) -> String {
        let mut s = String::with_capacity(DIGEST_HEX_LEN);
        for b in self.to_bytes() {
            s.push_str(&format!("{b:02X}"));
        }
        s
    }
}

impl fmt::Display for TlshDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{VERSION_PREFIX}{}", self.hex())
    }
}

impl FromStr for TlshDigest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

/// Parses `T1` + 70 hex digits, or the 70 hex digits alone. Case-insensitive.
pub fn parse(text: &str) -> Result<TlshDigest> {
    let hex = match text.len() {
        DIGEST_TEXT_LEN if text.as_bytes()[..2].eq_ignore_ascii_case(VERSION_PREFIX.as_bytes()) => {
            &text[2..]
        }
        DIGEST_HEX_LEN => text,
        n => {
            return Err(Error::MalformedDigest(format!(
                "TLSH digest must be {DIGEST_TEXT_LEN} characters (T1 + 70 hex) or 70 hex, got {n}"
            )))
        }
    };
    let mut bytes = [0u8; 35];
    for (i, pair) in hex.as_bytes().chunks_exact(2).enumerate() {
        let hi = hex_value(pair[0])?;
        let lo = hex_value(pair[1])?;
        bytes[i] = hi << 4 | lo;
    }
    Ok(TlshDigest::from_bytes(&bytes))
}

fn hex_value(c: u8) -> Result<u8> {
    (c as char)
        .to_digit(16)
        .map(|v| v as u8)
        .ok_or_else(|| Error::MalformedDigest(format!("non-hex character {:?}", c as char)))
}

pub fn format(digest: &TlshDigest) -> String {
    digest.to_string()
}

/// Raw bucket counts and checksum after feeding `data`.
pub(crate) fn bucket_counts(data: &[u8]) -> ([u32; 256], u8) {
    let mut buckets = [0u32; 256];
    let mut checksum = 0u8;
    for i in WINDOW_SIZE - 1..data.len() {
        let c0 = data[i];
        let c1 = data[i - 1];
        let c2 = data[i - 2];
        let c3 = data[i - 3];
        let c4 = data[i - 4];
        checksum = pearson(0, c0, c1, checksum);
        buckets[pearson(2, c0, c1, c2) as usize] += 1;
        buckets[pearson(3, c0, c1, c3) as usize] += 1;
        buckets[pearson(5, c0, c2, c3) as usize] += 1;
        buckets[pearson(7, c0, c2, c4) as usize] += 1;
        buckets[pearson(11, c0, c1, c4) as usize] += 1;
        buckets[pearson(13, c0, c3, c4) as usize] += 1;
    }
    (buckets, checksum)
}

/// Values at sorted positions 31, 63 and 95 of the first 128 buckets.
fn quartiles(buckets: &[u32]) -> (u32, u32, u32) {
    let mut sorted = [0u32; EFF_BUCKETS];
    sorted.copy_from_slice(&buckets[..EFF_BUCKETS]);
    sorted.sort_unstable();
    let q = EFF_BUCKETS / 4;
    (
        sorted[q - 1],
        sorted[2 * q - 1],
        sorted[EFF_BUCKETS - q - 1],
    )
}

/// Quantizes the first 128 buckets against their quartiles.
fn encode_body(buckets: &[u32]) -> ([u8; CODE_SIZE], (u32, u32, u32)) {
    let (q1, q2, q3) = quartiles(buckets);
    let mut body = [0u8; CODE_SIZE];
    for (i, group) in buckets[..EFF_BUCKETS].chunks_exact(4).enumerate() {
        let mut code = 0u8;
        for (j, &k) in group.iter().enumerate() {
            let v = if k > q3 {
                3
            } else if k > q2 {
                2
            } else if k > q1 {
                1
            } else {
                0
            };
            code |= v << (j * 2);
        }
        body[CODE_SIZE - 1 - i] = code;
    }
    (body, (q1, q2, q3))
}

pub fn hash(data: &[u8]) -> Result<TlshDigest> {
    if data.len() < MIN_DATA_LENGTH {
        return Err(Error::InputTooShort {
            len: data.len(),
            min: MIN_DATA_LENGTH,
        });
    }
    let l_value = length_code(data.len())?;
    let (buckets, checksum) = bucket_counts(data);
    let nonzero = buckets[..EFF_BUCKETS].iter().filter(|&&c| c > 0).count();
    if nonzero <= EFF_BUCKETS / 2 {
        return Err(Error::InsufficientVariation);
    }
    let (body, (q1, q2, q3)) = encode_body(&buckets);

    // Single-precision arithmetic, exactly as the reference computes it.
    let ratio = |q: u32| ((q as f32 * 100.0f32) / q3 as f32) as u32 % 16;
    let q_ratios = (ratio(q2) << 4 | ratio(q1)) as u8;

    Ok(TlshDigest {
        checksum,
        l_value,
        q_ratios,
        body,
    })
}

fn mod_diff(x: u8, y: u8, range: i32) -> i32 {
    let (x, y) = (i32::from(x), i32::from(y));
    let (dl, dr) = if y > x {
        (y - x, x + range - y)
    } else {
        (x - y, y + range - x)
    };
    dl.min(dr)
}

/// Approximate Hamming distance between two bodies: each 2-bit code
/// difference counts as itself, except a difference of 3 which counts 6.
fn body_distance(a: &[u8; CODE_SIZE], b: &[u8; CODE_SIZE]) -> u32 {
    let mut diff = 0;
    for (&x, &y) in a.iter().zip(b) {
        for shift in [0, 2, 4, 6] {
            let d = ((x >> shift) & 3).abs_diff((y >> shift) & 3);
            diff += if d == 3 { 6 } else { u32::from(d) };
        }
    }
    diff
}

/// Distance between two digests; 0 for identical digests, unbounded above.
pub fn distance(a: &TlshDigest, b: &TlshDigest) -> u32 {
    let mut diff: i32 = 0;
    let ldiff = mod_diff(a.l_value, b.l_value, 256);
    diff += match ldiff {
        0 => 0,
        1 => 1,
        d => d * 12,
    };
    for (qa, qb) in [(a.q1_ratio(), b.q1_ratio()), (a.q2_ratio(), b.q2_ratio())] {
        let qd = mod_diff(qa, qb, 16);
        diff += if qd <= 1 { qd } else { (qd - 1) * 12 };
    }
    if a.checksum != b.checksum {
        diff += 1;
    }
    diff as u32 + body_distance(&a.body, &b.body)
}
