use crate::error::{Error, Result};
use crate::percept::{kde_eval, kl_beta_vs_kde, Bandwidth, BetaParams, DensityGrid};
use serde::{Deserialize, Serialize};

/// Mean absolute differences between 4-neighbour pixels, split by whether
/// the two pixels share a region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTv {
    pub within: f64,
    pub cross: f64,
}

pub fn spatial_consistency(map: &[f64], height: usize, width: usize, mask: &[u8]) -> Result<SpatialTv> {
    let n = height * width;
    if map.len() != n || mask.len() != n {
        return Err(Error::shape("spatial_consistency", &[height, width], &[map.len(), mask.len()]));
    }
    if mask.iter().all(|&r| r == mask[0]) {
        return Err(Error::Invalid("mask has a single region".into()));
    }
    let (mut within, mut wn, mut cross, mut cn) = (0.0, 0usize, 0.0, 0usize);
    let mut pair = |i: usize, j: usize| {
        let d = (map[i] - map[j]).abs();
        if mask[i] == mask[j] {
            within += d;
            wn += 1;
        } else {
            cross += d;
            cn += 1;
        }
    };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                pair(i, i + 1);
            }
            if y + 1 < height {
                pair(i, i + width);
            }
        }
    }
    Ok(SpatialTv {
        within: if wn > 0 { within / wn as f64 } else { 0.0 },
        cross: cross / cn as f64,
    })
}

/// Mean silhouette with Euclidean distance. A sample alone in its label
/// scores 0, as does any sample whose intra and nearest-other distances are
/// both zero.
pub fn cluster_separation(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let n = vectors.len();
    if labels.len() != n {
        return Err(Error::shape("cluster_separation", &[n], &[labels.len()]));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Invalid("silhouette needs at least two labels".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Invalid("ragged vectors".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                let dist: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                sums[labels[j]] += dist;
            }
        }
        let own = labels[i];
        if counts[own] < 2 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Divergence of the Beta target from the KDE of `values` on `grid`.
pub fn distribution_match(values: &[f64], beta: BetaParams, grid: &DensityGrid, bandwidth: Bandwidth) -> Result<f64> {
    let q = kde_eval(values, grid, bandwidth)?;
    kl_beta_vs_kde(grid, beta, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn piecewise_constant_map() {
        let mask: Vec<u8> = (0..16).map(|i| (i % 4 >= 2) as u8).collect();
        let map: Vec<f64> = mask.iter().map(|&r| r as f64 * 0.7).collect();
        let tv = spatial_consistency(&map, 4, 4, &mask).unwrap();
        assert_eq!(tv.within, 0.0);
        assert!((tv.cross - 0.7).abs() < 1e-12);
        let flat = spatial_consistency(&[0.3; 16], 4, 4, &mask).unwrap();
        assert_eq!((flat.within, flat.cross), (0.0, 0.0));
    }

    #[test]
    fn block_checkerboard_hand_count() {
        // 2×2 blocks alternating 0/1; mask splits left and right halves.
        // Horizontal pairs: 8 within with Δ0, 4 cross with Δ1.
        // Vertical pairs: 12 within, 4 of which straddle a block edge (Δ1).
        let map: Vec<f64> = (0..16).map(|i| (((i / 4) / 2 + (i % 4) / 2) % 2) as f64).collect();
        let mask: Vec<u8> = (0..16).map(|i| (i % 4 >= 2) as u8).collect();
        let tv = spatial_consistency(&map, 4, 4, &mask).unwrap();
        assert!((tv.within - 4.0 / 20.0).abs() < 1e-12);
        assert_eq!(tv.cross, 1.0);
        // pixel checkerboard: every neighbour pair differs by 1
        let pix: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let tv = spatial_consistency(&pix, 4, 4, &mask).unwrap();
        assert_eq!((tv.within, tv.cross), (1.0, 1.0));
    }

    #[test]
    fn single_region_rejected() {
        assert!(spatial_consistency(&[0.0; 4], 2, 2, &[1; 4]).is_err());
    }

    #[test]
    fn silhouette_of_tight_clusters() {
        let mut r = rng::rng(0);
        let mut v = Vec::new();
        let mut l = Vec::new();
        for c in 0..2 {
            for _ in 0..20 {
                v.push(vec![c as f64 * 10.0 + r.gen_range(-0.1..0.1), r.gen_range(-0.1..0.1)]);
                l.push(c);
            }
        }
        let s = cluster_separation(&v, &l).unwrap();
        // direct formula: a ≈ 0.1, b ≈ 10 → s ≈ 0.99
        assert!(s > 0.9, "{s}");
        let swapped: Vec<usize> = l.iter().map(|&x| 1 - x).collect();
        assert_eq!(cluster_separation(&v, &swapped).unwrap(), s);
    }

    #[test]
    fn silhouette_conventions() {
        let v = vec![vec![1.0, 1.0]; 6];
        assert_eq!(cluster_separation(&v, &[0, 0, 1, 1, 2, 2]).unwrap(), 0.0);
        // singleton label contributes 0
        let v = vec![vec![0.0], vec![0.1], vec![5.0]];
        let s = cluster_separation(&v, &[0, 0, 1]).unwrap();
        let per = (5.0 - 0.1) / 5.0 + (4.9 - 0.1) / 4.9;
        assert!((s - per / 3.0).abs() < 1e-12);
        assert!(cluster_separation(&v, &[0, 0, 0]).is_err());
    }

    #[test]
    fn beta_samples_match_better_than_uniform() {
        use statrs::distribution::{Beta, ContinuousCDF};
        let beta = BetaParams::default();
        let dist = Beta::new(beta.a, beta.b).unwrap();
        let mut r = rng::rng(4);
        let from_beta: Vec<f64> = (0..2000).map(|_| dist.inverse_cdf(r.gen_range(0.0..1.0))).collect();
        let uniform: Vec<f64> = (0..2000).map(|_| r.gen_range(0.0..1.0)).collect();
        let grid = DensityGrid::default();
        let kb = distribution_match(&from_beta, beta, &grid, Bandwidth::Auto).unwrap();
        let ku = distribution_match(&uniform, beta, &grid, Bandwidth::Auto).unwrap();
        assert!(kb < ku, "{kb} vs {ku}");
    }
}
