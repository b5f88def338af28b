//! Recognition of an unseen category from a few images with a linear SVM
//! on frozen network features.

use crate::error::{Error, Result};
use crate::net::MacNetwork;
use crate::rng;
use crate::synth::{canvas_patches, CategorySpec};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    Attributes,
    Materials,
    Concat,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Attributes, FeatureSet::Materials, FeatureSet::Concat];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Attributes => "attributes",
            FeatureSet::Materials => "materials",
            FeatureSet::Concat => "concat",
        }
    }
}

/// Per-patch features: final attribute vector and category probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub attributes: Vec<f64>,
    pub materials: Vec<f64>,
}

impl PatchFeatures {
    pub fn select(&self, set: FeatureSet) -> Vec<f64> {
        match set {
            FeatureSet::Attributes => self.attributes.clone(),
            FeatureSet::Materials => self.materials.clone(),
            FeatureSet::Concat => self.attributes.iter().chain(&self.materials).copied().collect(),
        }
    }
}

/// A linear classifier `w·x + b > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) > 0.0
    }
}

/// Minimizes `½‖w‖² + C·Σ hinge(yᵢ(w·xᵢ + b))` by stochastic subgradient
/// steps with a 1/(λt) schedule, λ = 1/(C·n). The bias is an extra
/// regularized weight on a constant feature.
pub fn train_linear_svm(x: &[Vec<f64>], y: &[bool], c: f64, epochs: usize, seed: u64) -> Result<LinearSvm> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Invalid("svm needs matching, non-empty samples and labels".into()));
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::Invalid("svm needs both classes".into()));
    }
    if !(c > 0.0) || epochs == 0 {
        return Err(Error::Config("svm needs C > 0 and at least one epoch".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("ragged svm features".into()));
    }
    let n = x.len();
    let lambda = 1.0 / (c * n as f64);
    let mut w = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::named_rng(seed, "svm");
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let yi = if y[i] { 1.0 } else { -1.0 };
            let margin = yi * (w[..d].iter().zip(&x[i]).map(|(a, b)| a * b).sum::<f64>() + w[d]);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += eta * yi * xj;
                }
                w[d] += eta * yi;
            }
        }
    }
    let bias = w.pop().expect("bias slot");
    Ok(LinearSvm { weights: w, bias })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NShotConfig {
    pub ns: Vec<usize>,
    pub repeats: usize,
    /// Held-out training images available per repeat; every N must fit.
    pub pool_images: usize,
    pub test_images: usize,
    pub canvas_size: usize,
    pub c: f64,
    pub epochs: usize,
}

impl Default for NShotConfig {
    fn default() -> Self {
        NShotConfig {
            ns: vec![1, 2, 5, 10, 20],
            repeats: 5,
            pool_images: 20,
            test_images: 10,
            canvas_size: 128,
            c: 1.0,
            epochs: 200,
        }
    }
}

impl NShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(Error::Config("ns must be non-empty and positive".into()));
        }
        if let Some(&n) = self.ns.iter().find(|&&n| n > self.pool_images) {
            return Err(Error::Config(format!(
                "N = {n} exceeds the {} available images",
                self.pool_images
            )));
        }
        if self.repeats < 1 || self.test_images < 1 {
            return Err(Error::Config("repeats and test_images must be positive".into()));
        }
        if self.canvas_size < crate::synth::PATCH_SIZE || !self.canvas_size.is_multiple_of(crate::synth::PATCH_SIZE) {
            return Err(Error::Config(format!(
                "canvas size {} is not a multiple of the patch size",
                self.canvas_size
            )));
        }
        Ok(())
    }

    fn patches_per_image(&self) -> usize {
        (self.canvas_size / crate::synth::PATCH_SIZE).pow(2)
    }
}

/// Features for one repeat. Pool rows are grouped image by image; negatives
/// alternate across seen categories so any prefix is class-balanced.
#[derive(Clone, Debug, PartialEq)]
pub struct NShotSamples {
    pub pool_positive: Vec<PatchFeatures>,
    pub pool_negative: Vec<PatchFeatures>,
    pub test_positive: Vec<PatchFeatures>,
    pub test_negative: Vec<PatchFeatures>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NShotCell {
    pub n: usize,
    pub feature_set: FeatureSet,
    pub mean: f64,
    pub std: f64,
    /// Held-out recall of every repeat.
    pub recalls: Vec<f64>,
    /// Mean fraction of seen-category test patches rejected.
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NShotReport {
    pub held_out: String,
    pub cells: Vec<NShotCell>,
}

impl NShotReport {
    pub fn cell(&self, n: usize, set: FeatureSet) -> Option<&NShotCell> {
        self.cells.iter().find(|c| c.n == n && c.feature_set == set)
    }

    /// Columns `N,feature_set,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,feature_set,mean,std\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{}\n", c.n, c.feature_set.name(), c.mean, c.std));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Recall curves from precomputed features, one `NShotSamples` per repeat.
pub fn nshot_curves(repeats: &[NShotSamples], cfg: &NShotConfig, seed: u64) -> Result<Vec<NShotCell>> {
    let per_image = cfg.patches_per_image();
    let mut cells = Vec::new();
    for &n in &cfg.ns {
        for set in FeatureSet::ALL {
            let mut recalls = Vec::new();
            let mut specs = Vec::new();
            for (r, s) in repeats.iter().enumerate() {
                let count = n * per_image;
                if s.pool_positive.len() < count || s.pool_negative.len() < count {
                    return Err(Error::Invalid(format!("repeat {r} has too few pool patches for N = {n}")));
                }
                let mut x: Vec<Vec<f64>> = s.pool_positive[..count].iter().map(|f| f.select(set)).collect();
                x.extend(s.pool_negative[..count].iter().map(|f| f.select(set)));
                let y: Vec<bool> = (0..2 * count).map(|i| i < count).collect();
                let svm = train_linear_svm(&x, &y, cfg.c, cfg.epochs, rng::mix(seed, (r * 1000 + n) as u64))?;
                let hit = s.test_positive.iter().filter(|f| svm.predict(&f.select(set))).count();
                let rej = s.test_negative.iter().filter(|f| !svm.predict(&f.select(set))).count();
                recalls.push(hit as f64 / s.test_positive.len() as f64);
                specs.push(rej as f64 / s.test_negative.len().max(1) as f64);
            }
            let (mean, std) = mean_std(&recalls);
            cells.push(NShotCell {
                n,
                feature_set: set,
                mean,
                std,
                recalls,
                specificity: mean_std(&specs).0,
            });
        }
    }
    Ok(cells)
}

/// Frozen-network features for a list of patches.
pub fn patch_features(net: &MacNetwork, patches: &[Tensor]) -> Result<Vec<PatchFeatures>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let f = net.forward_tensors(&refs)?;
        let attrs = f
            .attributes
            .ok_or_else(|| Error::Invalid("n-shot features need attribute heads".into()))?;
        for i in 0..chunk.len() {
            out.push(PatchFeatures {
                attributes: attrs.row(i).to_vec(),
                materials: f.probabilities.row(i).to_vec(),
            });
        }
    }
    Ok(out)
}

fn canvases(spec: &CategorySpec, seed: u64, count: usize, size: usize) -> Vec<Tensor> {
    (0..count)
        .flat_map(|i| canvas_patches(spec, rng::mix(seed, i as u64), size))
        .map(|p| p.to_tensor())
        .collect()
}

fn balanced_negatives(seen: &[CategorySpec], seed: u64, count: usize) -> Vec<Tensor> {
    (0..count)
        .map(|i| seen[i % seen.len()].patch(rng::mix(seed, i as u64)).to_tensor())
        .collect()
}

/// Renders held-out canvases and seen-category negatives, extracts features
/// with `net` (trained without `held_out`) and measures recall for every N.
pub fn nshot_eval(
    net: &MacNetwork,
    held_out: &CategorySpec,
    seen: &[CategorySpec],
    cfg: &NShotConfig,
    seed: u64,
) -> Result<NShotReport> {
    cfg.validate()?;
    if seen.len() != net.config().categories {
        return Err(Error::Config(format!(
            "network has {} categories, {} seen categories given",
            net.config().categories,
            seen.len()
        )));
    }
    let per_image = cfg.patches_per_image();
    let max_n = *cfg.ns.iter().max().expect("validated non-empty");
    let mut repeats = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let base = rng::mix(seed, r as u64);
        let tag = |t: &str| rng::mix(base, rng::hash_str(t));
        repeats.push(NShotSamples {
            pool_positive: patch_features(net, &canvases(held_out, tag("pool"), max_n, cfg.canvas_size))?,
            pool_negative: patch_features(net, &balanced_negatives(seen, tag("negatives"), max_n * per_image))?,
            test_positive: patch_features(net, &canvases(held_out, tag("test"), cfg.test_images, cfg.canvas_size))?,
            test_negative: patch_features(
                net,
                &balanced_negatives(seen, tag("test-negatives"), cfg.test_images * per_image),
            )?,
        });
    }
    Ok(NShotReport {
        held_out: held_out.name.clone(),
        cells: nshot_curves(&repeats, cfg, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(v: f64, m: usize) -> PatchFeatures {
        PatchFeatures {
            attributes: vec![v; m],
            materials: vec![0.5; 3],
        }
    }

    #[test]
    fn separable_toy_features_give_full_recall() {
        let cfg = NShotConfig {
            canvas_size: 32,
            repeats: 5,
            epochs: 50,
            ..Default::default()
        };
        let s = NShotSamples {
            pool_positive: vec![feat(1.0, 4); 20],
            pool_negative: vec![feat(-1.0, 4); 20],
            test_positive: vec![feat(1.0, 4); 10],
            test_negative: vec![feat(-1.0, 4); 10],
        };
        let cells = nshot_curves(&vec![s; 5], &cfg, 0).unwrap();
        for c in cells.iter().filter(|c| c.feature_set != FeatureSet::Materials) {
            assert_eq!(c.mean, 1.0, "N = {}", c.n);
            assert_eq!(c.specificity, 1.0);
        }
    }

    #[test]
    fn svm_separates_shifted_gaussians() {
        use rand::Rng;
        let mut r = rng::rng(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let pos = i % 2 == 0;
            let shift = if pos { 1.5 } else { -1.5 };
            x.push(vec![shift + r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
            y.push(pos);
        }
        let svm = train_linear_svm(&x, &y, 1.0, 200, 3).unwrap();
        let acc = x.iter().zip(&y).filter(|(v, &l)| svm.predict(v) == l).count() as f64 / 200.0;
        assert_eq!(acc, 1.0);
        assert!(svm.weights[0] > 10.0 * svm.weights[1].abs());
        assert_eq!(svm, train_linear_svm(&x, &y, 1.0, 200, 3).unwrap());
    }

    #[test]
    fn n_beyond_pool_rejected() {
        let cfg = NShotConfig {
            ns: vec![1, 30],
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_columns() {
        let report = NShotReport {
            held_out: "x".into(),
            cells: vec![NShotCell {
                n: 5,
                feature_set: FeatureSet::Concat,
                mean: 0.5,
                std: 0.25,
                recalls: vec![0.25, 0.75],
                specificity: 1.0,
            }],
        };
        assert_eq!(report.to_csv(), "N,feature_set,mean,std\n5,concat,0.5,0.25\n");
    }
}
