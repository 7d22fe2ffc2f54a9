use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{DType, Shape, Tensor};

use super::TrainError;

/// Gaussian class blobs: class `y` has per-channel mean
/// `amplitude·cos(2πy/classes + 2πc/channels)` and i.i.d. pixel noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub side: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(seed: u64) -> Self {
        SynthSpec {
            channels: 3,
            side: 16,
            classes: 10,
            train: 256,
            test: 128,
            amplitude: 1.0,
            noise: 1.0,
            seed,
        }
    }

    pub fn class_mean(&self, class: usize, channel: usize) -> f64 {
        let phase =
            TAU * class as f64 / self.classes as f64 + TAU * channel as f64 / self.channels as f64;
        self.amplitude * phase.cos()
    }

    pub fn generate(&self) -> Result<SynthDataset, TrainError> {
        if self.channels == 0 || self.side == 0 || self.classes < 2 || self.train == 0 {
            return Err(TrainError::DataSpec(format!("degenerate dataset {self:?}")));
        }
        let noise =
            Normal::new(0.0, self.noise).map_err(|e| TrainError::DataSpec(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut split = |count: usize| {
            let plane = self.side * self.side;
            let mut data = Vec::with_capacity(count * self.channels * plane);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let y = i % self.classes;
                labels.push(y);
                for c in 0..self.channels {
                    let m = self.class_mean(y, c);
                    data.extend((0..plane).map(|_| m + noise.sample(&mut rng)));
                }
            }
            Split {
                sample: Shape::new(1, self.channels, self.side, self.side),
                data,
                labels,
            }
        };
        let train = split(self.train);
        let test = split(self.test);
        Ok(SynthDataset {
            spec: *self,
            train,
            test,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Split,
    pub test: Split,
}

/// Samples stored in f64, cast per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    sample: Shape,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Shape of one sample, batch dimension 1.
    pub fn sample_shape(&self) -> Shape {
        self.sample
    }

    pub fn batch(
        &self,
        indices: &[usize],
        dtype: DType,
    ) -> Result<(Tensor, Vec<usize>), TrainError> {
        let len = self.sample.sample_len();
        let mut v = Vec::with_capacity(indices.len() * len);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(TrainError::Shape(format!("sample {i} of {}", self.len())));
            }
            v.extend_from_slice(&self.data[i * len..(i + 1) * len]);
            y.push(self.labels[i]);
        }
        let shape = Shape {
            n: indices.len(),
            ..self.sample
        };
        Ok((Tensor::from_f64(shape, dtype, &v)?, y))
    }

    /// Every sample in order.
    pub fn all(&self, dtype: DType) -> Result<(Tensor, Vec<usize>), TrainError> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, dtype)
    }
}

/// Dataset selector of the form `synth:seed=<u64>[,n=<train count>]`.
/// The test split gets half as many samples as the train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSpec {
    pub seed: u64,
    pub train: Option<usize>,
}

impl DataSpec {
    pub fn synth(&self) -> SynthSpec {
        let mut s = SynthSpec::new(self.seed);
        if let Some(n) = self.train {
            s.train = n;
            s.test = (n / 2).max(1);
        }
        s
    }
}

impl FromStr for DataSpec {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        let bad = |why: &str| TrainError::DataSpec(format!("`{s}`: {why}"));
        let rest = s
            .strip_prefix("synth:")
            .ok_or_else(|| bad("expected `synth:seed=<u64>[,n=<count>]`"))?;
        let mut seed = None;
        let mut train = None;
        for part in rest.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match k.trim() {
                "seed" => seed = Some(v.trim().parse().map_err(|_| bad("seed is not a u64"))?),
                "n" => {
                    let n: usize = v.trim().parse().map_err(|_| bad("n is not a count"))?;
                    if n == 0 {
                        return Err(bad("n must be positive"));
                    }
                    train = Some(n);
                }
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        Ok(DataSpec {
            seed: seed.ok_or_else(|| bad("seed is required"))?,
            train,
        })
    }
}

impl fmt::Display for DataSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "synth:seed={}", self.seed)?;
        if let Some(n) = self.train {
            write!(f, ",n={n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = SynthSpec::new(4).generate().unwrap();
        let b = SynthSpec::new(4).generate().unwrap();
        let c = SynthSpec::new(5).generate().unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
        assert_eq!(a.train.len(), 256);
        assert_eq!(a.test.len(), 128);
        assert_eq!(a.train.labels()[13], 3);
    }

    #[test]
    fn channel_means_follow_the_class() {
        let mut spec = SynthSpec::new(1);
        spec.train = 20;
        spec.side = 32;
        let d = spec.generate().unwrap();
        let (x, y) = d.train.all(DType::F64).unwrap();
        let v = x.to_f64_vec();
        let plane = 32 * 32;
        for (s, &label) in y.iter().enumerate() {
            for c in 0..3 {
                let o = (s * 3 + c) * plane;
                let mean = v[o..o + plane].iter().sum::<f64>() / plane as f64;
                // Noise on the mean has σ = 1/32.
                assert!((mean - spec.class_mean(label, c)).abs() < 5.0 / 32.0);
            }
        }
    }

    #[test]
    fn data_spec_parsing() {
        let d: DataSpec = "synth:seed=7,n=64".parse().unwrap();
        assert_eq!(
            d,
            DataSpec {
                seed: 7,
                train: Some(64)
            }
        );
        assert_eq!(d.synth().test, 32);
        assert_eq!(d.to_string().parse::<DataSpec>().unwrap(), d);
        let d: DataSpec = "synth:seed=9".parse().unwrap();
        assert_eq!(d.synth().train, 256);
        for bad in [
            "synth:",
            "synth:n=4",
            "cifar:seed=1",
            "synth:seed=x",
            "synth:seed=1,n=0",
            "synth:seed=1,k=2",
        ] {
            assert!(bad.parse::<DataSpec>().is_err(), "{bad}");
        }
    }
}
