use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform in `±sqrt(3)`, i.e. unit variance. Used for embedding
    /// tables, whose rows are the inputs the Glorot scaling assumes.
    Embedding,
    /// Fixed sine/cosine table for a `[positions, width]` array: column
    /// `2k` holds `sin(p / 10000^(2k/width))`, column `2k+1` the cosine.
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of named arrays packed into one flat buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Layout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Range<usize> {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        };
        let start = self.total;
        self.total += spec.len();
        self.specs.push(spec);
        start..self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ranges(&self) -> impl Iterator<Item = (&ParamSpec, Range<usize>)> {
        let mut start = 0;
        self.specs.iter().map(move |s| {
            let r = start..start + s.len();
            start = r.end;
            (s, r)
        })
    }

    /// Draws every array in layout order from one stream.
    pub fn initialize<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = Stream::new(seed);
        let mut data = Vec::with_capacity(self.total);
        for spec in &self.specs {
            match spec.init {
                Init::Zeros => data.extend(std::iter::repeat(T::zero()).take(spec.len())),
                Init::Ones => data.extend(std::iter::repeat(T::one()).take(spec.len())),
                Init::Glorot { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for _ in 0..spec.len() {
                        let x = rng.uniform(-bound, bound) as f32;
                        data.push(T::from_f32(x));
                    }
                }
                Init::Embedding => {
                    let bound = 3f64.sqrt();
                    for _ in 0..spec.len() {
                        data.push(T::from_f32(rng.uniform(-bound, bound) as f32));
                    }
                }
                Init::Sinusoidal => {
                    let width = spec.shape.last().copied().unwrap_or(1);
                    for i in 0..spec.len() {
                        let (p, c) = ((i / width) as f64, i % width);
                        let angle = p / 10000f64.powf((c - c % 2) as f64 / width as f64);
                        let x = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                        data.push(T::from_f32(x as f32));
                    }
                }
            }
        }
        data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_table() {
        let mut l = Layout::default();
        l.add("p", &[3, 4], Init::Sinusoidal);
        let v: Vec<f64> = l.initialize(9);
        assert_eq!(&v[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((v[4] - 1f64.sin()).abs() < 1e-7);
        assert!((v[7] - (1f64 / 100.0).cos()).abs() < 1e-7);
        assert_eq!(v, l.initialize::<f64>(10));
    }

    #[test]
    fn ranges_are_contiguous() {
        let mut l = Layout::default();
        let a = l.add("a", &[2, 3], Init::Zeros);
        let b = l.add("b", &[4], Init::Ones);
        assert_eq!((a, b.clone()), (0..6, 6..10));
        assert_eq!(l.total(), 10);
        let v: Vec<f64> = l.initialize(1);
        assert!(v[b].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn glorot_is_bounded_and_precision_independent() {
        let mut l = Layout::default();
        l.add(
            "w",
            &[16, 16],
            Init::Glorot {
                fan_in: 16,
                fan_out: 16,
            },
        );
        let a: Vec<f32> = l.initialize(9);
        let b: Vec<f64> = l.initialize(9);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.abs() <= (6.0f32 / 32.0).sqrt());
            assert_eq!(f64::from(*x), *y);
        }
    }
}
