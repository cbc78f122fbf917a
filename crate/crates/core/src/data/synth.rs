//! Synthetic attribute-paired corpus.
//!
//! Faces are smooth radial gradients whose brightness encodes gender and
//! whose stripe frequency encodes age, plus per-sample pixel noise. Speech
//! features superpose attribute-deterministic offsets (gender on dims 0-11,
//! age on dims 12-23) on a smooth per-sample "content" trajectory of 12
//! sinusoid mixtures that is added across all dimensions. The offsets make
//! every attribute linearly decodable from time-averaged features; the
//! content carries the per-utterance variation the model must reconstruct.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{CorpusManifest, ManifestEntry};
use crate::data::pgm;
use crate::data::{
    AcousticFeatureSequence, AttributeLabel, FaceImage, FeatureNorm, Gender, PairedExample,
};
use crate::error::{Error, Result};
use crate::gaussian::standard_normal;
use crate::tensor::io as tio;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub noise_sigma: f64,
    pub gender_offset: f64,
    pub age_offset: f64,
    pub content_std: f64,
    pub content_components: usize,
    pub content_freq_min: f64,
    pub content_freq_max: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub feat_dim: usize,
    pub image_size: usize,
    pub brightness_male: f64,
    pub brightness_female: f64,
    pub radial_depth: f64,
    pub stripe_freq_young: f64,
    pub stripe_freq_aged: f64,
    pub stripe_amp: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            noise_sigma: 0.05,
            gender_offset: 0.8,
            age_offset: 0.8,
            content_std: 1.0,
            content_components: 4,
            content_freq_min: 0.5,
            content_freq_max: 4.0,
            n_min: 48,
            n_max: 96,
            feat_dim: 36,
            image_size: 32,
            brightness_male: 0.7,
            brightness_female: 0.4,
            radial_depth: 0.25,
            stripe_freq_young: 2.0,
            stripe_freq_aged: 5.0,
            stripe_amp: 0.12,
        }
    }
}

impl GenParams {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("gen.noise_sigma".into(), self.noise_sigma.to_string()),
            ("gen.gender_offset".into(), self.gender_offset.to_string()),
            ("gen.age_offset".into(), self.age_offset.to_string()),
            ("gen.content_std".into(), self.content_std.to_string()),
            ("gen.content_components".into(), self.content_components.to_string()),
            ("gen.content_freq_min".into(), self.content_freq_min.to_string()),
            ("gen.content_freq_max".into(), self.content_freq_max.to_string()),
            ("gen.n_min".into(), self.n_min.to_string()),
            ("gen.n_max".into(), self.n_max.to_string()),
            ("gen.feat_dim".into(), self.feat_dim.to_string()),
            ("gen.image_size".into(), self.image_size.to_string()),
            ("gen.brightness_male".into(), self.brightness_male.to_string()),
            ("gen.brightness_female".into(), self.brightness_female.to_string()),
            ("gen.radial_depth".into(), self.radial_depth.to_string()),
            ("gen.stripe_freq_young".into(), self.stripe_freq_young.to_string()),
            ("gen.stripe_freq_aged".into(), self.stripe_freq_aged.to_string()),
            ("gen.stripe_amp".into(), self.stripe_amp.to_string()),
        ]
    }
}

/// Number of independent content curves; dims 24-35 carry them verbatim and
/// dims 0-23 reuse them (d mod 12) under the attribute offsets.
pub const CONTENT_CURVES: usize = 12;

const STREAM_FEATURES: u64 = 0;
const STREAM_IMAGES: u64 = 1;
const STREAM_PAIRING: u64 = 2;

/// Stable per-sample seed derivation so generation order (or worker count)
/// cannot change any sample.
fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mix = seed
        .wrapping_add(stream.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xD1B54A32D192ED03));
    ChaCha8Rng::seed_from_u64(mix)
}

fn per_dim_offset(attrs: AttributeLabel, d: usize, p: &GenParams) -> f64 {
    if d < 12 {
        match attrs.gender {
            Gender::Male => p.gender_offset,
            Gender::Female => -p.gender_offset,
        }
    } else if d < 24 {
        match attrs.age {
            crate::data::Age::Young => p.age_offset,
            crate::data::Age::Aged => -p.age_offset,
        }
    } else {
        0.0
    }
}

pub fn synth_features(
    attrs: AttributeLabel,
    rng: &mut ChaCha8Rng,
    p: &GenParams,
) -> AcousticFeatureSequence {
    let n = rng.gen_range(p.n_min..=p.n_max);
    let k = p.content_components;
    let amp = p.content_std * (2.0 / k as f64).sqrt();
    // 12 smooth curves, each a fixed-variance mixture of random sinusoids
    let mut curves = vec![0.0f64; CONTENT_CURVES * n];
    for c in 0..CONTENT_CURVES {
        for _ in 0..k {
            let freq = rng.gen_range(p.content_freq_min..p.content_freq_max);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for t in 0..n {
                curves[c * n + t] +=
                    amp * (std::f64::consts::TAU * freq * t as f64 / n as f64 + phase).sin();
            }
        }
    }
    let mut data = vec![0.0f64; p.feat_dim * n];
    for d in 0..p.feat_dim {
        let off = per_dim_offset(attrs, d, p);
        let curve = &curves[(d % CONTENT_CURVES) * n..(d % CONTENT_CURVES + 1) * n];
        for t in 0..n {
            data[d * n + t] = curve[t] + off;
        }
    }
    AcousticFeatureSequence::new(Tensor::new(vec![p.feat_dim, n], data).expect("synth shape"))
        .expect("synth features finite")
}

pub fn synth_image(attrs: AttributeLabel, rng: &mut ChaCha8Rng, p: &GenParams) -> FaceImage {
    let s = p.image_size;
    let brightness = match attrs.gender {
        Gender::Male => p.brightness_male,
        Gender::Female => p.brightness_female,
    };
    let stripe_freq = match attrs.age {
        crate::data::Age::Young => p.stripe_freq_young,
        crate::data::Age::Aged => p.stripe_freq_aged,
    };
    let center = (s as f64 - 1.0) / 2.0;
    let max_r = (2.0f64).sqrt() * center;
    let mut data = vec![0.0f64; s * s];
    for i in 0..s {
        for j in 0..s {
            let r = ((i as f64 - center).powi(2) + (j as f64 - center).powi(2)).sqrt() / max_r;
            let stripes = p.stripe_amp
                * (std::f64::consts::TAU * stripe_freq * (i + j) as f64 / (2 * s) as f64).sin();
            let v = brightness - p.radial_depth * r + stripes + p.noise_sigma * standard_normal(rng);
            data[i * s + j] = v.clamp(0.0, 1.0);
        }
    }
    FaceImage::new(Tensor::new(vec![1, s, s], data).expect("synth shape")).expect("synth image range")
}

#[derive(Debug, Clone)]
pub struct FeatureItem {
    pub attrs: AttributeLabel,
    pub x: AcousticFeatureSequence,
}

#[derive(Debug, Clone)]
pub struct ImageItem {
    pub attrs: AttributeLabel,
    pub y: FaceImage,
}

/// Uniform random matching within attribute groups. With equal counts the
/// match is a random bijection; otherwise the smaller side is sampled with
/// replacement. Every group must be populated on both sides.
pub fn pair_by_attribute(
    features: &[FeatureItem],
    images: &[ImageItem],
    seed: u64,
) -> Result<Vec<PairedExample>> {
    let mut rng = derived_rng(seed, STREAM_PAIRING, 0);
    let mut out = Vec::new();
    for group in AttributeLabel::ALL {
        let fi: Vec<usize> =
            (0..features.len()).filter(|&i| features[i].attrs == group).collect();
        let ii: Vec<usize> = (0..images.len()).filter(|&i| images[i].attrs == group).collect();
        if fi.is_empty() || ii.is_empty() {
            return Err(Error::EmptyGroup(group.group_key()));
        }
        let count = fi.len().max(ii.len());
        let picks: Vec<(usize, usize)> = if fi.len() == ii.len() {
            let mut perm: Vec<usize> = (0..ii.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            (0..count).map(|k| (fi[k], ii[perm[k]])).collect()
        } else if fi.len() > ii.len() {
            (0..count).map(|k| (fi[k], ii[rng.gen_range(0..ii.len())])).collect()
        } else {
            (0..count).map(|k| (fi[rng.gen_range(0..fi.len())], ii[k])).collect()
        };
        for (k, (f, i)) in picks.into_iter().enumerate() {
            out.push(PairedExample {
                pair_id: format!("{}_{:04}", group.group_key(), k),
                attrs: group,
                x: features[f].x.clone(),
                y: images[i].y.clone(),
            });
        }
    }
    Ok(out)
}

/// Generates the full corpus on disk: per-group features and images, random
/// within-group pairing, manifest with generator parameters and feature
/// normalization statistics. Byte-identical for identical arguments.
pub fn generate_corpus(
    out_dir: &Path,
    seed: u64,
    per_group: usize,
    p: &GenParams,
) -> Result<CorpusManifest> {
    if per_group == 0 {
        return Err(Error::Config("per_group must be >= 1".to_string()));
    }
    let feat_dir = out_dir.join("features");
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(feat_dir.display().to_string(), e))?;
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;

    let mut features = Vec::with_capacity(4 * per_group);
    let mut images = Vec::with_capacity(4 * per_group);
    for (gi, group) in AttributeLabel::ALL.into_iter().enumerate() {
        for k in 0..per_group {
            let idx = (gi * per_group + k) as u64;
            let mut frng = derived_rng(seed, STREAM_FEATURES, idx);
            features.push(FeatureItem { attrs: group, x: synth_features(group, &mut frng, p) });
            let mut irng = derived_rng(seed, STREAM_IMAGES, idx);
            images.push(ImageItem { attrs: group, y: synth_image(group, &mut irng, p) });
        }
    }

    let pairs = pair_by_attribute(&features, &images, seed)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let feature_path = format!("features/{}.cvt1", pair.pair_id);
        let image_path = format!("images/{}.pgm", pair.pair_id);
        tio::save_tensor(&pair.x.values, &out_dir.join(&feature_path))?;
        pgm::save_image(&pair.y, &out_dir.join(&image_path))?;
        entries.push(ManifestEntry {
            pair_id: pair.pair_id.clone(),
            attrs: pair.attrs,
            feature_path,
            image_path,
        });
    }

    let norm = FeatureNorm::from_sequences(pairs.iter().map(|e| &e.x), p.feat_dim);
    let mut manifest =
        CorpusManifest { entries, params: Default::default(), base_dir: out_dir.to_path_buf() };
    manifest.params.insert("gen.seed".to_string(), seed.to_string());
    manifest.params.insert("gen.per_group".to_string(), per_group.to_string());
    for (k, v) in p.to_kv() {
        manifest.params.insert(k, v);
    }
    manifest.set_norm(&norm);
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_are_deterministic_per_seed() {
        let p = GenParams::default();
        let attrs = AttributeLabel::ALL[0];
        let a = synth_features(attrs, &mut derived_rng(5, STREAM_FEATURES, 3), &p);
        let b = synth_features(attrs, &mut derived_rng(5, STREAM_FEATURES, 3), &p);
        assert_eq!(a.values.data(), b.values.data());
        let c = synth_features(attrs, &mut derived_rng(6, STREAM_FEATURES, 3), &p);
        assert_ne!(a.values.data(), c.values.data());
    }

    #[test]
    fn gender_offset_separates_group_means() {
        let p = GenParams::default();
        let n_samples = 200;
        let mut diff_sum = 0.0;
        for d in 0..12 {
            let mut male = 0.0;
            let mut female = 0.0;
            for k in 0..n_samples {
                for (attrs, acc) in [
                    (AttributeLabel { gender: Gender::Male, age: crate::data::Age::Young }, &mut male),
                    (AttributeLabel { gender: Gender::Female, age: crate::data::Age::Young }, &mut female),
                ] {
                    let mut rng = derived_rng(11, STREAM_FEATURES, (d * n_samples + k) as u64);
                    let x = synth_features(attrs, &mut rng, &p);
                    let n = x.frames();
                    *acc += x.values.data()[d * n..(d + 1) * n].iter().sum::<f64>()
                        / (n as f64 * n_samples as f64);
                }
            }
            diff_sum += male - female;
        }
        let mean_diff = diff_sum / 12.0;
        assert!((mean_diff - 1.6).abs() < 0.1, "group mean gap {mean_diff}, expected about 1.6");
    }

    #[test]
    fn pairing_preserves_attributes_and_rejects_empty_groups() {
        let p = GenParams::default();
        let features: Vec<FeatureItem> = AttributeLabel::ALL
            .into_iter()
            .enumerate()
            .map(|(i, g)| FeatureItem {
                attrs: g,
                x: synth_features(g, &mut derived_rng(1, STREAM_FEATURES, i as u64), &p),
            })
            .collect();
        let images: Vec<ImageItem> = AttributeLabel::ALL
            .into_iter()
            .enumerate()
            .map(|(i, g)| ImageItem {
                attrs: g,
                y: synth_image(g, &mut derived_rng(1, STREAM_IMAGES, i as u64), &p),
            })
            .collect();
        let pairs = pair_by_attribute(&features, &images, 9).unwrap();
        assert_eq!(pairs.len(), 4); // singleton groups -> the unique pairing
        for (pair, f) in pairs.iter().zip(&features) {
            assert_eq!(pair.attrs, f.attrs);
            assert_eq!(pair.x.values.data(), f.x.values.data());
        }

        let err = pair_by_attribute(&features[..3], &images, 9).unwrap_err();
        assert!(err.to_string().contains("female_aged"), "{err}");
    }

    #[test]
    fn pairing_histogram_is_near_uniform() {
        // Equal counts give a random bijection; the image matched to the
        // first feature of the target group should be uniform over many
        // seeds. Chi-square with df=3, p > 0.01 <=> statistic < 11.345.
        let p = GenParams::default();
        let group = AttributeLabel::ALL[0];
        let mut features: Vec<FeatureItem> = Vec::new();
        let mut images: Vec<ImageItem> = Vec::new();
        for (i, g) in AttributeLabel::ALL.into_iter().enumerate() {
            let per_side = if g == group { 4 } else { 1 };
            for k in 0..per_side {
                let idx = (i * 4 + k) as u64;
                features.push(FeatureItem {
                    attrs: g,
                    x: synth_features(g, &mut derived_rng(2, STREAM_FEATURES, idx), &p),
                });
                let mut irng = derived_rng(2, STREAM_IMAGES, idx);
                images.push(ImageItem { attrs: g, y: synth_image(g, &mut irng, &p) });
            }
        }
        // tag target-group images with distinct corner pixels so the draw is recoverable
        let mut tagged = 0;
        for img in images.iter_mut().filter(|im| im.attrs == group) {
            img.y.values.data_mut()[0] = tagged as f64 / 255.0;
            tagged += 1;
        }
        let mut counts = [0usize; 4];
        let redraws = 10_000;
        for s in 0..redraws {
            let pairs = pair_by_attribute(&features, &images, 1000 + s).unwrap();
            let chosen = pairs.iter().find(|p| p.attrs == group).unwrap();
            let tag = (chosen.y.values.data()[0] * 255.0).round() as usize;
            counts[tag] += 1;
        }
        let expected = redraws as f64 / 4.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.345, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn images_stay_in_unit_range_with_attribute_contrast() {
        let p = GenParams::default();
        let male = synth_image(
            AttributeLabel { gender: Gender::Male, age: crate::data::Age::Young },
            &mut derived_rng(3, STREAM_IMAGES, 0),
            &p,
        );
        let female = synth_image(
            AttributeLabel { gender: Gender::Female, age: crate::data::Age::Young },
            &mut derived_rng(3, STREAM_IMAGES, 0),
            &p,
        );
        let mean = |im: &FaceImage| im.values.data().iter().sum::<f64>() / im.values.numel() as f64;
        assert!(mean(&male) - mean(&female) > 0.2);
    }
}
