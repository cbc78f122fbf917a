//! Corpus manifest: one CSV with header
//! `pair_id,gender,age,feature_path,image_path`, followed by a commented
//! `key=value` trailer holding the generator parameter block and the
//! training-set feature normalization statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::pgm;
use crate::data::{Age, AttributeLabel, FeatureNorm, Gender, PairedExample};
use crate::data::AcousticFeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::io as tio;

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub attrs: AttributeLabel,
    pub feature_path: String,
    pub image_path: String,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Generator parameters and normalization stats, `key=value`.
    pub params: BTreeMap<String, String>,
    /// Directory that relative entry paths resolve against.
    pub base_dir: PathBuf,
}

pub const HEADER: &str = "pair_id,gender,age,feature_path,image_path";

impl CorpusManifest {
    pub fn encode(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.pair_id,
                e.attrs.gender.as_str(),
                e.attrs.age.as_str(),
                e.feature_path,
                e.image_path
            ));
        }
        for (k, v) in &self.params {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(self.encode().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn parse(text: &str, base_dir: PathBuf, origin: &str) -> Result<CorpusManifest> {
        let fail = |detail: String| Error::format(origin, detail);
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == HEADER => {}
            other => return Err(fail(format!("bad header {:?}, expected {HEADER:?}", other))),
        }
        let mut entries = Vec::new();
        let mut params = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((k, v)) = rest.split_once('=') {
                    params.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(fail(format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len())));
            }
            let gender = Gender::parse(fields[1])
                .ok_or_else(|| fail(format!("line {}: bad gender {:?}", lineno + 2, fields[1])))?;
            let age = Age::parse(fields[2])
                .ok_or_else(|| fail(format!("line {}: bad age {:?}", lineno + 2, fields[2])))?;
            entries.push(ManifestEntry {
                pair_id: fields[0].to_string(),
                attrs: AttributeLabel { gender, age },
                feature_path: fields[3].to_string(),
                image_path: fields[4].to_string(),
            });
        }
        Ok(CorpusManifest { entries, params, base_dir })
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        CorpusManifest::parse(&text, base, &path.display().to_string())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every referenced feature/image file; any missing or malformed
    /// file is an error naming the path.
    pub fn load_examples(&self) -> Result<Vec<PairedExample>> {
        self.entries
            .iter()
            .map(|e| {
                let x = AcousticFeatureSequence::new(tio::load_tensor::<f64>(
                    &self.resolve(&e.feature_path),
                )?)?;
                let y = pgm::load_image(&self.resolve(&e.image_path))?;
                Ok(PairedExample { pair_id: e.pair_id.clone(), attrs: e.attrs, x, y })
            })
            .collect()
    }

    pub fn set_norm(&mut self, norm: &FeatureNorm) {
        self.params.insert("norm.dims".to_string(), norm.dims().to_string());
        for d in 0..norm.dims() {
            self.params.insert(format!("norm.mean.{d}"), format!("{}", norm.mean[d]));
            self.params.insert(format!("norm.std.{d}"), format!("{}", norm.std[d]));
        }
    }

    pub fn norm(&self) -> Result<FeatureNorm> {
        let dims: usize = self
            .params
            .get("norm.dims")
            .ok_or_else(|| Error::Config("manifest has no norm.dims entry".to_string()))?
            .parse()
            .map_err(|_| Error::Config("bad norm.dims value".to_string()))?;
        let get = |key: String| -> Result<f64> {
            self.params
                .get(&key)
                .ok_or_else(|| Error::Config(format!("manifest missing {key}")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}")))
        };
        let mean = (0..dims).map(|d| get(format!("norm.mean.{d}"))).collect::<Result<_>>()?;
        let std = (0..dims).map(|d| get(format!("norm.std.{d}"))).collect::<Result<_>>()?;
        Ok(FeatureNorm { mean, std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_text() {
        let mut m = CorpusManifest {
            entries: vec![ManifestEntry {
                pair_id: "0001".to_string(),
                attrs: AttributeLabel { gender: Gender::Female, age: Age::Aged },
                feature_path: "features/0001.cvt1".to_string(),
                image_path: "images/0001.pgm".to_string(),
            }],
            params: BTreeMap::new(),
            base_dir: PathBuf::from("/tmp"),
        };
        m.params.insert("gen.seed".to_string(), "42".to_string());
        m.set_norm(&FeatureNorm { mean: vec![0.25, -1.5], std: vec![1.0, 2.0] });

        let text = m.encode();
        let back = CorpusManifest::parse(&text, PathBuf::from("/tmp"), "mem").unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.params, m.params);
        assert_eq!(back.norm().unwrap(), m.norm().unwrap());
        // parse -> serialize -> parse is idempotent
        assert_eq!(back.encode(), text);
    }

    #[test]
    fn bad_header_rejected() {
        let err = CorpusManifest::parse("id,foo\n", PathBuf::new(), "mem").unwrap_err();
        assert!(err.to_string().contains("bad header"));
    }
}
