//! Algorithm-agnostic digest handling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssdeep::{self, SsdeepDigest};
use crate::tlsh::{self, TlshDigest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ssdeep,
    Tlsh,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Ssdeep => "ssdeep",
            Algo::Tlsh => "tlsh",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssdeep" => Ok(Algo::Ssdeep),
            "tlsh" => Ok(Algo::Tlsh),
            _ => Err(Error::InvalidConfig(format!("unknown algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Digest {
    Ssdeep(SsdeepDigest),
    Tlsh(TlshDigest),
}

impl Digest {
    pub fn algo(&self) -> Algo {
        match self {
            Digest::Ssdeep(_) => Algo::Ssdeep,
            Digest::Tlsh(_) => Algo::Tlsh,
        }
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Digest::Ssdeep(d) => d.fmt(f),
            Digest::Tlsh(d) => d.fmt(f),
        }
    }
}

pub fn hash(algo: Algo, data: &[u8]) -> Result<Digest> {
    match algo {
        Algo::Ssdeep => ssdeep::hash(data).map(Digest::Ssdeep),
        Algo::Tlsh => tlsh::hash(data).map(Digest::Tlsh),
    }
}

pub fn parse(algo: Algo, text: &str) -> Result<Digest> {
    match algo {
        Algo::Ssdeep => ssdeep::parse(text).map(Digest::Ssdeep),
        Algo::Tlsh => tlsh::parse(text).map(Digest::Tlsh),
    }
}

/// ssdeep similarity score (0..=100) or TLSH distance.
pub fn compare(a: &Digest, b: &Digest) -> Result<u32> {
    match (a, b) {
        (Digest::Ssdeep(x), Digest::Ssdeep(y)) => Ok(ssdeep::compare(x, y)),
        (Digest::Tlsh(x), Digest::Tlsh(y)) => Ok(tlsh::distance(x, y)),
        _ => Err(Error::MixedAlgorithms),
    }
}
