//! Synthetic material corpus: category specs, trait table, patch and corpus
//! generation, and a simulated similarity-judgment oracle.

mod corpus;
mod texture;

pub use corpus::{
    gen_corpus, load_corpus, CorpusConfig, CorpusManifest, Dataset, ManifestEntry, PatchSample,
    Split,
};
pub use texture::{render, Image, SCALE};

use crate::error::{Error, Result};
use crate::percept::{Judgment, SimilarityJudgments};
use crate::rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const PATCH_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stripes {
    /// Cycles per 32 pixels along the stripe normal.
    pub frequency: f64,
    /// Angle of the stripe normal in radians (0 = intensity varies along x).
    pub orientation: f64,
    pub contrast: f64,
}

/// Generative description of one material category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// top / mid / fine.
    pub path: [String; 3],
    /// Hue range [lo, hi] within [0, 1].
    pub hue: [f64; 2],
    pub saturation: f64,
    pub value: f64,
    pub stripes: Option<Stripes>,
    /// Fraction of pixels turned into speckles, [0, 0.3].
    pub speckle: f64,
    /// Luminance noise amplitude, [0, 0.3].
    pub roughness: f64,
    /// Expected highlight blobs per 32×32 area, [0, 4].
    pub gloss: f64,
    /// Blur sigma in pixels, [0, 3].
    pub fuzz: f64,
}

pub const MAX_STRIPE_FREQUENCY: f64 = 16.0;
pub const MAX_SPECKLE: f64 = 0.3;
pub const MAX_ROUGHNESS: f64 = 0.3;
pub const MAX_GLOSS: f64 = 4.0;
pub const MAX_FUZZ: f64 = 3.0;

impl CategorySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("category {:?}: {what}", self.name)));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.path.iter().any(|p| p.is_empty()) {
            return bad("hierarchy path needs three non-empty levels");
        }
        if !unit(self.hue[0]) || !unit(self.hue[1]) || self.hue[0] > self.hue[1] {
            return bad("hue range must satisfy 0 <= lo <= hi <= 1");
        }
        if !unit(self.saturation) || !unit(self.value) {
            return bad("saturation and value must be in [0,1]");
        }
        if let Some(s) = &self.stripes {
            if !(0.0..=MAX_STRIPE_FREQUENCY).contains(&s.frequency) || !unit(s.contrast) || !s.orientation.is_finite() {
                return bad("stripe frequency in [0,16], contrast in [0,1]");
            }
        }
        let ranges = [
            (self.speckle, MAX_SPECKLE, "speckle"),
            (self.roughness, MAX_ROUGHNESS, "roughness"),
            (self.gloss, MAX_GLOSS, "gloss"),
            (self.fuzz, MAX_FUZZ, "fuzz"),
        ];
        for (v, hi, name) in ranges {
            if !(0.0..=hi).contains(&v) {
                return bad(&format!("{name} must be in [0,{hi}]"));
            }
        }
        Ok(())
    }

    pub fn stripe_frequency(&self) -> f64 {
        self.stripes.as_ref().map_or(0.0, |s| if s.contrast > 0.0 { s.frequency } else { 0.0 })
    }

    /// Parameters scaled to [0,1] by their documented ranges.
    pub fn parameter_vector(&self) -> [f64; 10] {
        [
            0.5 * (self.hue[0] + self.hue[1]),
            self.hue[1] - self.hue[0],
            self.saturation,
            self.value,
            self.stripe_frequency() / MAX_STRIPE_FREQUENCY,
            self.stripes.as_ref().map_or(0.0, |s| s.contrast),
            self.speckle / MAX_SPECKLE,
            self.roughness / MAX_ROUGHNESS,
            self.gloss / MAX_GLOSS,
            self.fuzz / MAX_FUZZ,
        ]
    }

    /// Renders a quantized 3×32×32 patch.
    pub fn patch(&self, seed: u64) -> Image {
        render(self, seed, PATCH_SIZE, PATCH_SIZE).quantized()
    }
}

/// Semantic trait names, in bit order.
pub const TRAIT_NAMES: [&str; 6] = ["striped", "shiny", "rough", "fuzzy", "colorful", "smooth"];

/// Version of [`TRAIT_THRESHOLDS`]; bump on any change, it alters the data.
pub const TRAIT_TABLE_VERSION: u32 = 1;

/// Fixed thresholds mapping category parameters to trait bits.
pub struct TraitThresholds {
    pub striped_min_frequency: f64,
    pub striped_min_contrast: f64,
    pub shiny_min_gloss: f64,
    pub rough_min_roughness: f64,
    pub rough_min_speckle: f64,
    pub fuzzy_min_fuzz: f64,
    pub colorful_min_saturation: f64,
    pub colorful_min_hue_width: f64,
    pub smooth_max_roughness: f64,
    pub smooth_max_speckle: f64,
}

pub const TRAIT_THRESHOLDS: TraitThresholds = TraitThresholds {
    striped_min_frequency: 2.0,
    striped_min_contrast: 0.15,
    shiny_min_gloss: 1.0,
    rough_min_roughness: 0.08,
    rough_min_speckle: 0.08,
    fuzzy_min_fuzz: 1.5,
    colorful_min_saturation: 0.6,
    colorful_min_hue_width: 0.3,
    smooth_max_roughness: 0.04,
    smooth_max_speckle: 0.03,
};

/// Ground-truth trait bits of a category, in [`TRAIT_NAMES`] order.
pub fn traits_of(spec: &CategorySpec) -> [bool; 6] {
    let t = &TRAIT_THRESHOLDS;
    let stripes = spec.stripes.as_ref();
    [
        stripes.is_some_and(|s| s.frequency >= t.striped_min_frequency && s.contrast >= t.striped_min_contrast),
        spec.gloss >= t.shiny_min_gloss,
        spec.roughness >= t.rough_min_roughness || spec.speckle >= t.rough_min_speckle,
        spec.fuzz >= t.fuzzy_min_fuzz,
        spec.saturation >= t.colorful_min_saturation || spec.hue[1] - spec.hue[0] >= t.colorful_min_hue_width,
        spec.roughness < t.smooth_max_roughness && spec.speckle < t.smooth_max_speckle,
    ]
}

/// Per-category trait bits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitTable {
    pub names: Vec<String>,
    pub version: u32,
    pub rows: Vec<[bool; 6]>,
}

impl TraitTable {
    pub fn new(categories: &[CategorySpec]) -> Self {
        TraitTable {
            names: TRAIT_NAMES.iter().map(|s| s.to_string()).collect(),
            version: TRAIT_TABLE_VERSION,
            rows: categories.iter().map(traits_of).collect(),
        }
    }
}

fn spec(
    path: [&str; 3],
    hue: [f64; 2],
    saturation: f64,
    value: f64,
    stripes: Option<(f64, f64, f64)>,
    speckle: f64,
    roughness: f64,
    gloss: f64,
    fuzz: f64,
) -> CategorySpec {
    CategorySpec {
        name: path[2].to_string(),
        path: path.map(str::to_string),
        hue,
        saturation,
        value,
        stripes: stripes.map(|(frequency, orientation, contrast)| Stripes {
            frequency,
            orientation,
            contrast,
        }),
        speckle,
        roughness,
        gloss,
        fuzz,
    }
}

/// Eight categories in a 2×2×2 hierarchy.
pub fn default_categories() -> Vec<CategorySpec> {
    use std::f64::consts::FRAC_PI_2 as RIGHT;
    vec![
        spec(["organic", "wood", "oak"], [0.06, 0.10], 0.55, 0.55, Some((3.0, 0.0, 0.35)), 0.0, 0.06, 0.0, 0.5),
        spec(["organic", "wood", "lacquer"], [0.0, 0.04], 0.7, 0.45, Some((5.0, RIGHT, 0.3)), 0.0, 0.01, 2.0, 0.0),
        spec(["organic", "fiber", "fur"], [0.08, 0.13], 0.35, 0.7, None, 0.05, 0.18, 0.0, 2.0),
        spec(["organic", "fiber", "foliage"], [0.22, 0.38], 0.75, 0.5, None, 0.15, 0.1, 0.5, 0.0),
        spec(["inorganic", "metal", "polished"], [0.55, 0.62], 0.1, 0.65, None, 0.0, 0.01, 3.0, 0.0),
        spec(["inorganic", "metal", "brushed"], [0.55, 0.62], 0.15, 0.55, Some((10.0, RIGHT / 2.0, 0.25)), 0.0, 0.05, 1.0, 0.0),
        spec(["inorganic", "stone", "granite"], [0.05, 0.15], 0.1, 0.5, None, 0.25, 0.15, 0.0, 0.0),
        spec(["inorganic", "stone", "painted"], [0.0, 1.0], 0.8, 0.75, None, 0.0, 0.02, 0.0, 1.0),
    ]
}

/// Normalized Euclidean distance between category parameter vectors, in [0,1].
pub fn true_dissimilarity(a: &CategorySpec, b: &CategorySpec) -> f64 {
    let (va, vb) = (a.parameter_vector(), b.parameter_vector());
    crate::percept::embedding_distance(&va, &vb)
}

/// Simulated yes/no similarity answers: each annotator says "no" with
/// probability `clamp01(δ + U(-noise, noise))` for every ordered pair.
pub fn oracle_judgments(
    categories: &[CategorySpec],
    annotators: u64,
    noise: f64,
    seed: u64,
) -> Result<SimilarityJudgments> {
    if annotators == 0 {
        return Err(Error::Config("annotators must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Config(format!("noise must be in [0, 0.5), got {noise}")));
    }
    let mut r = rng::named_rng(seed, "judgments");
    let mut entries = Vec::new();
    for (a, sa) in categories.iter().enumerate() {
        for (b, sb) in categories.iter().enumerate() {
            if a == b {
                continue;
            }
            let delta = true_dissimilarity(sa, sb);
            let (mut yes, mut no) = (0, 0);
            for _ in 0..annotators {
                let jitter = if noise > 0.0 { r.gen_range(-noise..noise) } else { 0.0 };
                let p = (delta + jitter).clamp(0.0, 1.0);
                if r.gen::<f64>() < p {
                    no += 1;
                } else {
                    yes += 1;
                }
            }
            entries.push(Judgment { a, b, yes, no });
        }
    }
    Ok(SimilarityJudgments { entries })
}

/// Square image whose left half shows `left` and right half `right`,
/// plus the region mask (0 = left, 1 = right).
pub fn two_region_composite(
    left: &CategorySpec,
    right: &CategorySpec,
    seed: u64,
    height: usize,
    width: usize,
) -> (Image, Vec<u8>) {
    let a = render(left, rng::mix(seed, 0), height, width);
    let b = render(right, rng::mix(seed, 1), height, width);
    let mut img = a.clone();
    let mut mask = vec![0u8; height * width];
    for y in 0..height {
        for x in width / 2..width {
            mask[y * width + x] = 1;
            for c in 0..3 {
                let i = img.idx(c, y, x);
                img.data[i] = b.data[i];
            }
        }
    }
    (img.quantized(), mask)
}

/// `size`×`size` canvas of one category, cut into non-overlapping patches.
pub fn canvas_patches(spec: &CategorySpec, seed: u64, size: usize) -> Vec<Image> {
    let canvas = render(spec, seed, size, size).quantized();
    let per_side = size / PATCH_SIZE;
    (0..per_side * per_side)
        .map(|i| canvas.crop((i / per_side) * PATCH_SIZE, (i % per_side) * PATCH_SIZE, PATCH_SIZE, PATCH_SIZE))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid_and_hierarchical() {
        let cats = default_categories();
        assert_eq!(cats.len(), 8);
        for c in &cats {
            c.validate().unwrap();
        }
        let tops: std::collections::BTreeSet<_> = cats.iter().map(|c| c.path[0].clone()).collect();
        let mids: std::collections::BTreeSet<_> = cats.iter().map(|c| c.path[1].clone()).collect();
        assert_eq!(tops.len(), 2);
        assert_eq!(mids.len(), 4);
    }

    #[test]
    fn traits_follow_thresholds() {
        let t = &TRAIT_THRESHOLDS;
        for c in default_categories() {
            let bits = traits_of(&c);
            assert_eq!(bits[0], c.stripe_frequency() >= t.striped_min_frequency);
            assert_eq!(bits[1], c.gloss >= t.shiny_min_gloss);
            assert_eq!(bits[3], c.fuzz >= t.fuzzy_min_fuzz);
            if bits[5] {
                assert!(c.roughness < t.smooth_max_roughness);
            }
        }
        // every trait is present in some but not all categories
        let table = TraitTable::new(&default_categories());
        for i in 0..6 {
            let n = table.rows.iter().filter(|r| r[i]).count();
            assert!(n > 0 && n < 8, "trait {} count {n}", TRAIT_NAMES[i]);
        }
    }

    #[test]
    fn validation_catches_out_of_range() {
        let mut c = default_categories()[0].clone();
        c.gloss = 9.0;
        assert!(c.validate().is_err());
        let mut c = default_categories()[0].clone();
        c.hue = [0.5, 0.2];
        assert!(c.validate().is_err());
        let mut c = default_categories()[0].clone();
        c.path[1] = String::new();
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_categories_noise_free() {
        let c = default_categories()[2].clone();
        let j = oracle_judgments(&[c.clone(), c], 50, 0.0, 1).unwrap();
        assert!(j.entries.iter().all(|e| e.no == 0 && e.yes == 50));
        let d = crate::percept::build_distance_matrix(&j).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn oracle_converges_to_true_distances() {
        let cats = default_categories();
        let j = oracle_judgments(&cats, 1000, 0.0, 4).unwrap();
        let d = crate::percept::build_distance_matrix(&j).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let delta = if a == b { 0.0 } else { true_dissimilarity(&cats[a], &cats[b]) };
                assert!((d.get(a, b) - delta).abs() < 0.05);
                assert_eq!(d.get(a, b), d.get(b, a));
            }
        }
    }

    #[test]
    fn oracle_config_checks() {
        let cats = default_categories();
        assert!(oracle_judgments(&cats, 0, 0.0, 0).is_err());
        assert!(oracle_judgments(&cats, 3, 0.5, 0).is_err());
        assert_eq!(oracle_judgments(&cats, 3, 0.2, 9).unwrap(), oracle_judgments(&cats, 3, 0.2, 9).unwrap());
    }

    #[test]
    fn patches_deterministic_and_in_range() {
        for c in default_categories() {
            let a = c.patch(17);
            assert_eq!(a, c.patch(17));
            assert_ne!(a, c.patch(18));
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn plain_spec_is_constant() {
        let c = spec(["a", "b", "c"], [0.3, 0.6], 0.5, 0.5, None, 0.0, 0.0, 0.0, 0.0);
        let img = render(&c, 5, 32, 32);
        for ch in 0..3 {
            let plane = &img.data[ch * 1024..(ch + 1) * 1024];
            assert!(plane.iter().all(|v| *v == plane[0]));
        }
    }

    /// Magnitude of the naive DFT of `signal` at integer frequency `f`.
    fn dft_mag(signal: &[f64], f: usize) -> f64 {
        let n = signal.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in signal.iter().enumerate() {
            let t = 2.0 * std::f64::consts::PI * f as f64 * i as f64 / n;
            re += v * t.cos();
            im -= v * t.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn stripe_spectrum_peaks_at_frequency() {
        for (freq, orient) in [(3.0, 0.0), (5.0, std::f64::consts::FRAC_PI_2), (10.0, 0.0)] {
            let c = spec(["a", "b", "c"], [0.1, 0.1], 0.5, 0.8, Some((freq, orient, 0.5)), 0.0, 0.0, 0.0, 0.0);
            let img = render(&c, 3, 32, 32);
            // luminance profile along the stripe normal
            let profile: Vec<f64> = (0..32)
                .map(|i| {
                    (0..32)
                        .map(|j| {
                            let (y, x) = if orient == 0.0 { (j, i) } else { (i, j) };
                            (0..3).map(|ch| img.get(ch, y, x)).sum::<f64>()
                        })
                        .sum()
                })
                .collect();
            let peak = (1..16).max_by(|&a, &b| dft_mag(&profile, a).total_cmp(&dft_mag(&profile, b))).unwrap();
            assert!((peak as f64 - freq).abs() <= 1.0, "freq {freq}: peak {peak}");
        }
    }

    #[test]
    fn composite_mask_splits_halves() {
        let cats = default_categories();
        let (img, mask) = two_region_composite(&cats[0], &cats[4], 2, 48, 64);
        assert_eq!((img.height, img.width), (48, 64));
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 48 * 32);
        assert_eq!(mask[0], 0);
        assert_eq!(mask[63], 1);
    }

    #[test]
    fn canvas_yields_sixteen_patches() {
        let p = canvas_patches(&default_categories()[1], 7, 128);
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|i| i.height == 32 && i.width == 32));
    }
}
