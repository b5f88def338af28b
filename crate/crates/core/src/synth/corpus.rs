//! Corpus generation and loading.
//!
//! Layout: `manifest.json` plus `patches/<split>/<label>_<seed>.png`.

use super::{default_categories, traits_of, CategorySpec, TraitTable, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub categories: Vec<CategorySpec>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// Simulated annotators per ordered category pair for `judgments.json`.
    pub annotators: u64,
    pub judgment_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            categories: default_categories(),
            train: 400,
            val: 100,
            test: 100,
            seed: 0,
            annotators: 100,
            judgment_noise: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.len() < 2 {
            return Err(Error::Config("corpus needs at least 2 categories".into()));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs >= 1 patch per category".into()));
        }
        self.categories.iter().try_for_each(CategorySpec::validate)
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// (split, label, seed) for every patch, in manifest order. Seeds come from
    /// a running index, so no seed is shared between splits.
    fn plan(&self) -> Vec<(Split, usize, u64)> {
        let mut out = Vec::new();
        let mut index = 0u64;
        for split in Split::ALL {
            for label in 0..self.categories.len() {
                for _ in 0..self.count(split) {
                    out.push((split, label, rng::mix(self.seed, index)));
                    index += 1;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub traits: [bool; 6],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub patch_size: usize,
    pub seed: u64,
    pub categories: Vec<CategorySpec>,
    pub traits: TraitTable,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn split(&self, s: Split) -> &[ManifestEntry] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn build(cfg: &CorpusConfig) -> Self {
        let mut m = CorpusManifest {
            version: 1,
            patch_size: PATCH_SIZE,
            seed: cfg.seed,
            categories: cfg.categories.clone(),
            traits: TraitTable::new(&cfg.categories),
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (split, label, seed) in cfg.plan() {
            let entry = ManifestEntry {
                file: format!("patches/{}/{label}_{seed}.png", split.name()),
                label,
                traits: traits_of(&cfg.categories[label]),
                seed,
            };
            match split {
                Split::Train => m.train.push(entry),
                Split::Val => m.val.push(entry),
                Split::Test => m.test.push(entry),
            }
        }
        m
    }
}

/// A labelled 3×32×32 patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub patch: Tensor,
    pub label: usize,
    pub traits: Option<[bool; 6]>,
}

/// In-memory corpus with all three splits decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub categories: Vec<CategorySpec>,
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
}

impl Dataset {
    /// Renders the corpus directly, matching what [`load_corpus`] decodes from disk.
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ds = Dataset {
            categories: cfg.categories.clone(),
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for (split, label, seed) in cfg.plan() {
            let spec = &cfg.categories[label];
            let sample = PatchSample {
                patch: spec.patch(seed).to_tensor(),
                label,
                traits: Some(traits_of(spec)),
            };
            ds.split_mut(split).push(sample);
        }
        Ok(ds)
    }

    pub fn split(&self, s: Split) -> &[PatchSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<PatchSample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Drops every sample of category `held_out` and renumbers the remaining
    /// labels to stay contiguous.
    pub fn without_category(&self, held_out: usize) -> Result<Dataset> {
        let k = self.num_categories();
        if held_out >= k || k < 3 {
            return Err(Error::Config(format!("cannot hold out category {held_out} of {k}")));
        }
        let remap = |s: &PatchSample| {
            (s.label != held_out).then(|| PatchSample {
                label: if s.label > held_out { s.label - 1 } else { s.label },
                ..s.clone()
            })
        };
        Ok(Dataset {
            categories: self.categories.iter().enumerate().filter(|(i, _)| *i != held_out).map(|(_, c)| c.clone()).collect(),
            train: self.train.iter().filter_map(remap).collect(),
            val: self.val.iter().filter_map(remap).collect(),
            test: self.test.iter().filter_map(remap).collect(),
        })
    }
}

/// Writes PNG patches, `manifest.json` and `judgments.json` under `out`.
pub fn gen_corpus(cfg: &CorpusConfig, out: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let manifest = CorpusManifest::build(cfg);
    for split in Split::ALL {
        io::create_dir(&out.join("patches").join(split.name()))?;
        for e in manifest.split(split) {
            let img = cfg.categories[e.label].patch(e.seed);
            io::write_rgb_png(&out.join(&e.file), &img)?;
        }
    }
    io::write_json(&out.join("manifest.json"), &manifest)?;
    let judgments = super::oracle_judgments(&cfg.categories, cfg.annotators, cfg.judgment_noise, cfg.seed)?;
    judgments.write_json(&out.join("judgments.json"))?;
    Ok(manifest)
}

/// Reads a corpus directory written by [`gen_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Dataset)> {
    let manifest: CorpusManifest = io::read_json(&dir.join("manifest.json"))?;
    if manifest.patch_size != PATCH_SIZE {
        return Err(Error::Data(format!("unsupported patch size {}", manifest.patch_size)));
    }
    let k = manifest.categories.len();
    let mut ds = Dataset {
        categories: manifest.categories.clone(),
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for split in Split::ALL {
        for e in manifest.split(split) {
            if e.label >= k {
                return Err(Error::Data(format!("{}: label {} >= {k}", e.file, e.label)));
            }
            let img = io::read_rgb_png(&dir.join(&e.file))?;
            if img.height != PATCH_SIZE || img.width != PATCH_SIZE {
                return Err(Error::Data(format!("{}: expected a {PATCH_SIZE}x{PATCH_SIZE} patch", e.file)));
            }
            ds.split_mut(split).push(PatchSample {
                patch: img.to_tensor(),
                label: e.label,
                traits: Some(e.traits),
            });
        }
    }
    Ok((manifest, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train: 3,
            val: 2,
            test: 1,
            annotators: 5,
            ..Default::default()
        }
    }

    #[test]
    fn manifest_counts() {
        let cfg = CorpusConfig::default();
        let m = CorpusManifest::build(&cfg);
        assert_eq!(m.len(), 4800);
        for label in 0..8 {
            assert_eq!(m.train.iter().filter(|e| e.label == label).count(), 400);
        }
        let seen: HashSet<(usize, u64)> = m.train.iter().map(|e| (e.label, e.seed)).collect();
        for e in m.val.iter().chain(&m.test) {
            assert!(!seen.contains(&(e.label, e.seed)));
        }
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        gen_corpus(&cfg, dir.path()).unwrap();
        let (m, ds) = load_corpus(dir.path()).unwrap();
        assert_eq!(m.train.len(), 24);
        let mem = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.train, mem.train);
        assert_eq!(ds.test, mem.test);
        assert!(dir.path().join("judgments.json").exists());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small();
        gen_corpus(&cfg, a.path()).unwrap();
        gen_corpus(&cfg, b.path()).unwrap();
        let m = CorpusManifest::build(&cfg);
        for e in m.train.iter().chain(&m.val).chain(&m.test) {
            assert_eq!(std::fs::read(a.path().join(&e.file)).unwrap(), std::fs::read(b.path().join(&e.file)).unwrap());
        }
        for f in ["manifest.json", "judgments.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn unwritable_output_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(matches!(gen_corpus(&small(), &blocker.join("sub")), Err(Error::Io { .. })));
    }

    #[test]
    fn hold_out_renumbers() {
        let ds = Dataset::generate(&small()).unwrap();
        let h = ds.without_category(2).unwrap();
        assert_eq!(h.num_categories(), 7);
        assert_eq!(h.train.len(), 21);
        assert!(h.train.iter().all(|s| s.label < 7));
        assert_eq!(h.categories[2].name, ds.categories[3].name);
    }

    #[test]
    fn zero_count_rejected() {
        let cfg = CorpusConfig { val: 0, ..small() };
        assert!(Dataset::generate(&cfg).is_err());
    }
}
