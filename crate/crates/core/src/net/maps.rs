use super::MacNetwork;
use crate::error::{Error, Result};
use crate::synth::Image;
use crate::tensor::Tensor;
use rayon::prelude::*;

const WINDOW_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapTarget {
    Categories,
    Attributes,
}

/// Dense per-pixel maps in [C, H, W] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Pixel coordinates (y, x) of every evaluated window center.
    pub centers: Vec<(usize, usize)>,
}

impl ProbabilityMaps {
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Per-pixel argmax over channels; ties go to the lower channel.
    pub fn argmax(&self) -> Vec<usize> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * hw + p] > self.data[best * hw + p] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Top-left offsets `0, s, 2s, …` of windows of `patch` that fit in `len`.
pub fn window_origins(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    if len < patch {
        return Err(Error::Invalid(format!("image side {len} smaller than patch {patch}")));
    }
    Ok((0..=len - patch).step_by(stride).collect())
}

/// Index of the window whose geometric center is closest to each pixel.
/// Centers are given doubled (`2·origin + patch − 1`) to stay integral.
fn nearest(doubled: &[usize], len: usize) -> Vec<usize> {
    (0..len)
        .map(|p| {
            let mut best = 0;
            for (i, &c) in doubled.iter().enumerate() {
                if (2 * p).abs_diff(c) < (2 * p).abs_diff(doubled[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Slides a patch-sized window over `image` with the given stride and assigns
/// each window's prediction to its center pixel. Every other pixel takes the
/// value of the nearest evaluated center.
pub fn predict_map(net: &MacNetwork, image: &Image, stride: usize, target: MapTarget) -> Result<ProbabilityMaps> {
    let p = net.config().patch_size;
    if target == MapTarget::Attributes && net.num_aux_heads() == 0 {
        return Err(Error::Invalid("network has no attribute heads".into()));
    }
    let ys = window_origins(image.height, p, stride)?;
    let xs = window_origins(image.width, p, stride)?;
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let rows: Vec<Vec<f64>> = origins
        .par_chunks(WINDOW_BATCH)
        .map(|chunk| -> Result<Vec<Vec<f64>>> {
            let patches: Vec<Tensor> = chunk.iter().map(|&(y, x)| image.crop(y, x, p, p).to_tensor()).collect();
            let refs: Vec<&Tensor> = patches.iter().collect();
            let out = net.forward_tensors(&refs)?;
            let t = match target {
                MapTarget::Categories => out.probabilities,
                MapTarget::Attributes => out.attributes.expect("aux heads present"),
            };
            Ok((0..chunk.len()).map(|i| t.row(i).to_vec()).collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let channels = rows[0].len();
    let (h, w) = (image.height, image.width);
    let ny = nearest(&ys.iter().map(|y| 2 * y + p - 1).collect::<Vec<_>>(), h);
    let nx = nearest(&xs.iter().map(|x| 2 * x + p - 1).collect::<Vec<_>>(), w);
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let row = &rows[ny[y] * xs.len() + nx[x]];
            for c in 0..channels {
                data[(c * h + y) * w + x] = row[c];
            }
        }
    }
    let centers = origins.iter().map(|&(y, x)| (y + p / 2, x + p / 2)).collect();
    Ok(ProbabilityMaps {
        channels,
        height: h,
        width: w,
        data,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use crate::synth::{default_categories, render};

    #[test]
    fn origins() {
        assert_eq!(window_origins(64, 32, 16).unwrap(), vec![0, 16, 32]);
        assert_eq!(window_origins(64, 32, 32).unwrap(), vec![0, 32]);
        assert_eq!(window_origins(32, 32, 5).unwrap(), vec![0]);
        assert!(window_origins(16, 32, 1).is_err());
        assert!(window_origins(64, 32, 0).is_err());
    }

    #[test]
    fn map_on_64_pixel_image() {
        let net = MacNetwork::build(&NetworkConfig::default(), 2).unwrap();
        let img = render(&default_categories()[0], 1, 64, 64);
        let maps = predict_map(&net, &img, 16, MapTarget::Categories).unwrap();
        assert_eq!(maps.centers.len(), 9);
        assert_eq!(maps.channels, 8);
        for y in 0..64 {
            for x in 0..64 {
                let s: f64 = (0..8).map(|c| maps.get(c, y, x)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        // the center pixel of the top-left window carries that window's prediction
        let direct = net.forward_tensors(&[&img.crop(0, 0, 32, 32).to_tensor()]).unwrap();
        for c in 0..8 {
            assert_eq!(maps.get(c, 16, 16), direct.probabilities.row(0)[c]);
            // corner pixels are filled from the nearest center
            assert_eq!(maps.get(c, 0, 0), maps.get(c, 16, 16));
        }
        let coarse = predict_map(&net, &img, 32, MapTarget::Attributes).unwrap();
        assert_eq!(coarse.centers.len(), 4);
        assert_eq!(coarse.channels, 12);
    }

    #[test]
    fn nearest_center_ties_go_low() {
        assert_eq!(nearest(&[32, 48], 40)[20], 0);
        assert_eq!(nearest(&[32, 48], 40)[21], 1);
    }

    #[test]
    fn stride_equal_to_patch_tiles_exactly() {
        // windows at 0 and 32 own pixels 0..32 and 32..64
        let cells = nearest(&[31, 95], 64);
        assert!(cells[..32].iter().all(|&c| c == 0));
        assert!(cells[32..].iter().all(|&c| c == 1));
    }
}
