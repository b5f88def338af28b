//! Evaluation: trait decoding, N-shot recognition, map consistency,
//! cluster separation and distribution matching.

mod logic;
mod metrics;
mod nshot;

pub use logic::{binarize, fit_logic_tree, AnnealConfig, BitTable, LogicFit, LogicTree};
pub use metrics::{cluster_separation, distribution_match, spatial_consistency, SpatialTv};
pub use nshot::{
    nshot_curves, nshot_eval, patch_features, train_linear_svm, FeatureSet, LinearSvm, NShotCell, NShotConfig,
    NShotReport, NShotSamples, PatchFeatures,
};

use crate::error::{Error, Result};
use crate::net::{predict_map, MacNetwork, MapTarget};
use crate::synth::{two_region_composite, CategorySpec, PatchSample, TRAIT_NAMES};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Binarization cut for attribute probabilities.
pub const ATTRIBUTE_THRESHOLD: f64 = 0.5;

/// Final attribute vectors for every sample.
pub fn attribute_vectors(net: &MacNetwork, samples: &[PatchSample]) -> Result<Vec<Vec<f64>>> {
    let patches: Vec<Tensor> = samples.iter().map(|s| s.patch.clone()).collect();
    Ok(patch_features(net, &patches)?.into_iter().map(|f| f.attributes).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitResult {
    pub name: String,
    /// Trait bit constant over the fitting samples; nothing to fit.
    pub skipped: bool,
    pub tree: Option<String>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitReport {
    pub traits: Vec<TraitResult>,
    pub mean_test_accuracy: f64,
}

fn bit_rows(attrs: &[Vec<f64>]) -> Vec<Vec<bool>> {
    attrs.iter().map(|a| binarize(a, ATTRIBUTE_THRESHOLD)).collect()
}

fn trait_column(samples: &[PatchSample], t: usize) -> Result<Vec<bool>> {
    samples
        .iter()
        .map(|s| s.traits.map(|b| b[t]).ok_or_else(|| Error::Data("sample without trait bits".into())))
        .collect()
}

/// Fits one logic tree per trait on `fit` samples and scores it on `test`.
/// Traits constant over `fit` are reported as skipped and left out of the mean.
pub fn decode_traits(
    net: &MacNetwork,
    fit: &[PatchSample],
    test: &[PatchSample],
    cfg: &AnnealConfig,
    seed: u64,
) -> Result<TraitReport> {
    let fit_table = BitTable::new(&bit_rows(&attribute_vectors(net, fit)?))?;
    let test_table = BitTable::new(&bit_rows(&attribute_vectors(net, test)?))?;
    let mut traits = Vec::new();
    for (t, name) in TRAIT_NAMES.iter().enumerate() {
        let target = trait_column(fit, t)?;
        let held = trait_column(test, t)?;
        let ones = target.iter().filter(|&&b| b).count();
        if ones < 2 || target.len() - ones < 2 {
            traits.push(TraitResult {
                name: name.to_string(),
                skipped: true,
                tree: None,
                train_accuracy: f64::NAN,
                test_accuracy: f64::NAN,
            });
            continue;
        }
        let fitted = fit_logic_tree(&fit_table, &target, cfg, crate::rng::mix(seed, t as u64))?;
        traits.push(TraitResult {
            name: name.to_string(),
            skipped: false,
            tree: Some(fitted.tree.to_string()),
            train_accuracy: fitted.accuracy,
            test_accuracy: test_table.accuracy(&fitted.tree, &held),
        });
    }
    let scored: Vec<f64> = traits.iter().filter(|t| !t.skipped).map(|t| t.test_accuracy).collect();
    if scored.is_empty() {
        return Err(Error::Data("every trait is constant over the fitting samples".into()));
    }
    Ok(TraitReport {
        mean_test_accuracy: scored.iter().sum::<f64>() / scored.len() as f64,
        traits,
    })
}

/// Per-attribute within/cross TV averaged over two-region composites of
/// every ordered category pair, mapped with the given window stride.
pub fn composite_consistency(
    net: &MacNetwork,
    categories: &[CategorySpec],
    size: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<SpatialTv>> {
    let m = net.config().attributes;
    let mut sums = vec![(0.0, 0.0); m];
    let mut count = 0usize;
    for (i, left) in categories.iter().enumerate() {
        for (j, right) in categories.iter().enumerate() {
            if i == j {
                continue;
            }
            let (img, mask) = two_region_composite(left, right, crate::rng::mix(seed, (i * categories.len() + j) as u64), size, size);
            let maps = predict_map(net, &img, stride, MapTarget::Attributes)?;
            for (a, s) in sums.iter_mut().enumerate() {
                let tv = spatial_consistency(maps.channel(a), size, size, &mask)?;
                s.0 += tv.within;
                s.1 += tv.cross;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("composites need at least two categories".into()));
    }
    Ok(sums
        .into_iter()
        .map(|(w, c)| SpatialTv {
            within: w / count as f64,
            cross: c / count as f64,
        })
        .collect())
}
