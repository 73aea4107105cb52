//! On-disk corpus: one tensor dump per image and per label map plus a
//! JSON manifest carrying the split and the generator config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{LabelMap, SceneConfig, SceneSample};
use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor};
use crate::text::ClassSplit;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split: ClassSplit,
    pub config: SceneConfig,
    pub config_hash: String,
    pub count: usize,
    pub images: Vec<String>,
    pub labels: Vec<String>,
}

pub fn save_corpus(dir: impl AsRef<Path>, config: &SceneConfig, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let img = format!("image_{i:05}.tensor");
        let lbl = format!("label_{i:05}.tensor");
        save_tensor(dir.join(&img), &s.image)?;
        save_tensor(dir.join(&lbl), &s.label.to_tensor())?;
        images.push(img);
        labels.push(lbl);
    }
    let manifest = CorpusManifest {
        split: config.split(),
        config: config.clone(),
        config_hash: config.hash(),
        count: samples.len(),
        images,
        labels,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(CorpusManifest, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let manifest: CorpusManifest = serde_json::from_str(&crate::error::read_text(&path)?)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::format(path, "config hash does not match config"));
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for (img, lbl) in manifest.images.iter().zip(&manifest.labels) {
        let image = load_tensor(dir.join(img))?;
        let label = LabelMap::from_tensor(&load_tensor(dir.join(lbl))?)?;
        samples.push(SceneSample::with_label(image, label));
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate;

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::benchmark(9);
        let samples = generate(&cfg, 3).unwrap();
        save_corpus(dir.path(), &cfg, &samples).unwrap();
        let (m, back) = load_corpus(dir.path()).unwrap();
        assert_eq!(back, samples);
        assert_eq!(m.split, cfg.split());
    }
}
