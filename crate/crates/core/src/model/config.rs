//! Architecture configuration shared by init, checkpoints, and the CLI.

use crate::error::{Error, Result};

/// Shapes and sizes of the five networks.
///
/// The utterance encoder/decoder and voice encoder are stacks of three GLU
/// convolution blocks; height (feature axis) strides are fixed at [1, 2, 2]
/// while voice-encoder time strides are configurable. Time kernels follow
/// the stride: stride 1 uses kernel 9 / pad 4, stride 2 uses kernel 8 /
/// pad 3, so extents divide exactly and the stack stays fully convolutional.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// D: speech feature dimension (must be divisible by 4).
    pub feat_dim: usize,
    /// I = J: square face image extent (must be divisible by 8).
    pub image_size: usize,
    /// D': channels of the time-dependent latent sequence.
    pub latent_channels: usize,
    /// Dc: dimension of the time-independent voice/face code.
    pub code_dim: usize,
    pub utt_channels: [usize; 3],
    pub face_channels: [usize; 3],
    pub voice_channels: [usize; 3],
    /// Time strides of the three voice-encoder blocks, each 1 or 2.
    pub voice_time_strides: [usize; 3],
    /// When set, utterance/face decoders emit unit variance instead of a
    /// learned per-element variance head.
    pub fixed_decoder_variance: bool,
}

/// Utterance encoder time strides (decoder mirrors them).
pub const UTT_TIME_STRIDES: [usize; 3] = [1, 2, 2];
pub const HEIGHT_STRIDES: [usize; 3] = [1, 2, 2];
pub const LEAKY_SLOPE: f64 = 0.2;

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            feat_dim: 36,
            image_size: 32,
            latent_channels: 8,
            code_dim: 16,
            utt_channels: [8, 16, 32],
            face_channels: [32, 64, 128],
            voice_channels: [8, 16, 32],
            voice_time_strides: [1, 2, 2],
            fixed_decoder_variance: false,
        }
    }
}

/// Kernel extent and padding for one axis given its stride.
pub fn time_kernel(stride: usize) -> (usize, usize) {
    match stride {
        1 => (9, 4),
        _ => (8, 3),
    }
}

pub fn height_kernel(stride: usize) -> (usize, usize) {
    match stride {
        1 => (3, 1),
        _ => (4, 1),
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.feat_dim < 4 || self.feat_dim % 4 != 0 {
            problems.push(format!("feat_dim {} must be a positive multiple of 4", self.feat_dim));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            problems.push(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.latent_channels == 0 {
            problems.push("latent_channels must be >= 1".to_string());
        }
        if self.code_dim == 0 {
            problems.push("code_dim must be >= 1".to_string());
        }
        for (name, chans) in [
            ("utt_channels", &self.utt_channels),
            ("face_channels", &self.face_channels),
            ("voice_channels", &self.voice_channels),
        ] {
            if chans.iter().any(|&c| c == 0) {
                problems.push(format!("{name} must all be >= 1, got {chans:?}"));
            }
        }
        if self.voice_time_strides.iter().any(|&s| s != 1 && s != 2) {
            problems.push(format!(
                "voice_time_strides must each be 1 or 2, got {:?}",
                self.voice_time_strides
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Total time downsampling of the utterance encoder (latent N' = N / this).
    pub fn time_downsample(&self) -> usize {
        UTT_TIME_STRIDES.iter().product()
    }

    pub fn voice_time_downsample(&self) -> usize {
        self.voice_time_strides.iter().product()
    }

    /// Minimum accepted frame count before padding.
    pub fn min_frames(&self) -> usize {
        self.time_downsample().max(self.voice_time_downsample())
    }

    /// Channels after flattening the feature axis into channels at the top
    /// of the utterance encoder stack.
    pub fn utt_stack_channels(&self) -> usize {
        self.utt_channels[2] * (self.feat_dim / 4)
    }

    pub fn voice_stack_channels(&self) -> usize {
        self.voice_channels[2] * (self.feat_dim / 4)
    }

    pub fn face_stack_units(&self) -> usize {
        let s = self.image_size / 8;
        self.face_channels[2] * s * s
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("arch.feat_dim".into(), self.feat_dim.to_string()),
            ("arch.image_size".into(), self.image_size.to_string()),
            ("arch.latent_channels".into(), self.latent_channels.to_string()),
            ("arch.code_dim".into(), self.code_dim.to_string()),
            ("arch.utt_channels".into(), list(&self.utt_channels)),
            ("arch.face_channels".into(), list(&self.face_channels)),
            ("arch.voice_channels".into(), list(&self.voice_channels)),
            ("arch.voice_time_strides".into(), list(&self.voice_time_strides)),
            ("arch.fixed_decoder_variance".into(), self.fixed_decoder_variance.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        };
        let parse3 = |v: &str| -> Result<[usize; 3]> {
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("{key} expects three comma-separated values")));
            }
            Ok([parse_usize(parts[0])?, parse_usize(parts[1])?, parse_usize(parts[2])?])
        };
        match key {
            "arch.feat_dim" => self.feat_dim = parse_usize(value)?,
            "arch.image_size" => self.image_size = parse_usize(value)?,
            "arch.latent_channels" => self.latent_channels = parse_usize(value)?,
            "arch.code_dim" => self.code_dim = parse_usize(value)?,
            "arch.utt_channels" => self.utt_channels = parse3(value)?,
            "arch.face_channels" => self.face_channels = parse3(value)?,
            "arch.voice_channels" => self.voice_channels = parse3(value)?,
            "arch.voice_time_strides" => self.voice_time_strides = parse3(value)?,
            "arch.fixed_decoder_variance" => {
                self.fixed_decoder_variance = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))?
            }
            _ => return Err(Error::Config(format!("unknown architecture key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> Result<ArchConfig> {
        let mut cfg = ArchConfig::default();
        for (k, v) in pairs {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A deliberately tiny configuration for finite-difference checking of
    /// the full objective: every parameter tensor stays small enough to
    /// scan element by element.
    pub fn tiny() -> ArchConfig {
        ArchConfig {
            feat_dim: 8,
            image_size: 8,
            latent_channels: 2,
            code_dim: 3,
            utt_channels: [2, 3, 4],
            face_channels: [2, 3, 4],
            voice_channels: [2, 3, 4],
            voice_time_strides: [1, 2, 2],
            fixed_decoder_variance: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ArchConfig::default().validate().unwrap();
        ArchConfig::tiny().validate().unwrap();
    }

    #[test]
    fn validation_lists_all_conflicts() {
        let mut cfg = ArchConfig::default();
        cfg.feat_dim = 7;
        cfg.code_dim = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("feat_dim") && err.contains("code_dim"), "{err}");
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ArchConfig::default();
        cfg.voice_time_strides = [2, 2, 2];
        cfg.fixed_decoder_variance = true;
        let kv = cfg.to_kv();
        let back =
            ArchConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }
}
