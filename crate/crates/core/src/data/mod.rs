//! Corpus types and the synthetic attribute-paired dataset.
//!
//! Features are 36-dim sequences stored as CVT1 files, images are 8-bit PGM;
//! a manifest CSV ties pairs together and carries the generator parameters
//! plus the per-dimension normalization statistics in its trailer.

pub mod manifest;
pub mod pgm;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Age {
    Young,
    Aged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttributeLabel {
    pub gender: Gender,
    pub age: Age,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s {
            "male" => Some(Gender::Male),
            "female" => Some(Gender::Female),
            _ => None,
        }
    }
}

impl Age {
    pub fn as_str(self) -> &'static str {
        match self {
            Age::Young => "young",
            Age::Aged => "aged",
        }
    }

    pub fn parse(s: &str) -> Option<Age> {
        match s {
            "young" => Some(Age::Young),
            "aged" => Some(Age::Aged),
            _ => None,
        }
    }
}

impl AttributeLabel {
    pub const ALL: [AttributeLabel; 4] = [
        AttributeLabel { gender: Gender::Male, age: Age::Young },
        AttributeLabel { gender: Gender::Male, age: Age::Aged },
        AttributeLabel { gender: Gender::Female, age: Age::Young },
        AttributeLabel { gender: Gender::Female, age: Age::Aged },
    ];

    pub fn group_key(&self) -> String {
        format!("{}_{}", self.gender.as_str(), self.age.as_str())
    }
}

impl std::fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.gender.as_str(), self.age.as_str())
    }
}

/// Speech feature sequence, `[D, N]` (D feature dims, N frames).
#[derive(Debug, Clone)]
pub struct AcousticFeatureSequence {
    pub values: Tensor<f64>,
    pub frame_period_ms: f64,
}

pub const DEFAULT_FRAME_PERIOD_MS: f64 = 5.0;

impl AcousticFeatureSequence {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::shape(
                "acoustic feature sequence",
                format!("expected [D, N], got {:?}", values.shape()),
            ));
        }
        if !values.is_all_finite() {
            return Err(Error::shape("acoustic feature sequence", "non-finite values".to_string()));
        }
        Ok(AcousticFeatureSequence { values, frame_period_ms: DEFAULT_FRAME_PERIOD_MS })
    }

    pub fn dims(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Single-channel image, `[1, I, J]`, values in [0, 1].
#[derive(Debug, Clone)]
pub struct FaceImage {
    pub values: Tensor<f64>,
}

impl FaceImage {
    pub fn new(values: Tensor<f64>) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[0] != 1 {
            return Err(Error::shape(
                "face image",
                format!("expected [1, I, J], got {:?}", values.shape()),
            ));
        }
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::shape("face image", "values must lie in [0, 1]".to_string()));
        }
        Ok(FaceImage { values })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }
}

#[derive(Debug, Clone)]
pub struct PairedExample {
    pub pair_id: String,
    pub attrs: AttributeLabel,
    pub x: AcousticFeatureSequence,
    pub y: FaceImage,
}

/// Per-dimension z-scoring statistics, computed once over the training set
/// and applied identically at train and inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dims: usize) -> Self {
        FeatureNorm { mean: vec![0.0; dims], std: vec![1.0; dims] }
    }

    pub fn from_sequences<'a>(seqs: impl Iterator<Item = &'a AcousticFeatureSequence>, dims: usize) -> Self {
        let mut sum = vec![0.0; dims];
        let mut sumsq = vec![0.0; dims];
        let mut count = 0usize;
        for s in seqs {
            let n = s.frames();
            let data = s.values.data();
            for d in 0..dims {
                for t in 0..n {
                    let v = data[d * n + t];
                    sum[d] += v;
                    sumsq[d] += v * v;
                }
            }
            count += n;
        }
        let count = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        FeatureNorm { mean, std }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    /// `[D, N]` raw -> z-scored.
    pub fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.affine(x, |v, m, s| (v - m) / s)
    }

    /// `[D, N]` z-scored -> raw.
    pub fn invert(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.affine(x, |v, m, s| v * s + m)
    }

    fn affine(&self, x: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
        let sh = x.shape();
        if sh.len() != 2 || sh[0] != self.dims() {
            return Err(Error::shape(
                "feature normalization",
                format!("expected [{}, N], got {:?}", self.dims(), sh),
            ));
        }
        let n = sh[1];
        let mut out = x.clone();
        for d in 0..self.dims() {
            let (m, s) = (self.mean[d], self.std[d]);
            for v in &mut out.data_mut()[d * n..(d + 1) * n] {
                *v = f(*v, m, s);
            }
        }
        Ok(out)
    }
}

/// Deterministic per-group split: the last `ceil(fraction * group size)`
/// entries of each attribute group (in manifest order) are held out.
pub fn split_train_test(attrs: &[AttributeLabel], test_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for group in AttributeLabel::ALL {
        let members: Vec<usize> =
            attrs.iter().enumerate().filter(|(_, a)| **a == group).map(|(i, _)| i).collect();
        let n_test = ((members.len() as f64 * test_fraction).ceil() as usize).min(members.len());
        let cut = members.len() - n_test;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_norm_round_trips() {
        let x = Tensor::from_fn(&[3, 5], |i| i as f64 * 0.37 - 1.0);
        let seq = AcousticFeatureSequence::new(x.clone()).unwrap();
        let norm = FeatureNorm::from_sequences([&seq].into_iter(), 3);
        let z = norm.apply(&x).unwrap();
        let back = norm.invert(&z).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // per-dim mean ~0, std ~1 after z-scoring
        for d in 0..3 {
            let row = &z.data()[d * 5..(d + 1) * 5];
            let m: f64 = row.iter().sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn face_image_rejects_out_of_range() {
        let ok = Tensor::full(&[1, 4, 4], 0.5);
        assert!(FaceImage::new(ok).is_ok());
        let bad = Tensor::full(&[1, 4, 4], 1.5);
        assert!(FaceImage::new(bad).is_err());
    }

    #[test]
    fn split_is_per_group_and_deterministic() {
        let attrs: Vec<AttributeLabel> = AttributeLabel::ALL
            .into_iter()
            .flat_map(|a| std::iter::repeat(a).take(10))
            .collect();
        let (train, test) = split_train_test(&attrs, 0.2);
        assert_eq!(train.len(), 32);
        assert_eq!(test.len(), 8);
        let (t2, s2) = split_train_test(&attrs, 0.2);
        assert_eq!(train, t2);
        assert_eq!(test, s2);
        // held-out entries come two-per-group from the tail
        for group_start in [0, 10, 20, 30] {
            assert!(test.contains(&(group_start + 8)));
            assert!(test.contains(&(group_start + 9)));
        }
    }
}
