//! Procedural material textures. Layers are applied in a fixed order:
//! base color → stripes → speckle → gloss blobs → roughness noise → fuzz blur
//! → clamp.

use super::CategorySpec;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use std::f64::consts::PI;

/// Stripe frequencies and noise scales are expressed per this many pixels.
pub const SCALE: f64 = 32.0;

/// RGB image in planar [3, H, W] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        let mut out = Image::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                let src = self.idx(c, y0 + y, x0);
                let dst = out.idx(c, y, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Rounds to the 8-bit grid (`round(v·255)/255`), as stored on disk.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn from_tensor(t: &Tensor) -> Option<Image> {
        match t.shape() {
            [3, h, w] => Some(Image {
                height: *h,
                width: *w,
                data: t.data().to_vec(),
            }),
            _ => None,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth value noise in [-1, 1] with lattice spacing `cell` pixels.
fn value_noise(h: usize, w: usize, cell: f64, rng: &mut rng::Rng) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|v| v / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.data.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    s += kv * img.get(c, y as usize, xx as usize);
                }
                tmp[img.idx(c, y as usize, x as usize)] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    s += kv * tmp[img.idx(c, yy as usize, x as usize)];
                }
                let i = img.idx(c, y as usize, x as usize);
                img.data[i] = s;
            }
        }
    }
}

/// Renders an `height`×`width` texture of `spec`; deterministic in (spec, seed).
pub fn render(spec: &CategorySpec, seed: u64, height: usize, width: usize) -> Image {
    let mut img = Image::new(height, width);
    let area_scale = (height * width) as f64 / (SCALE * SCALE);

    // base color
    let mut r = rng::named_rng(seed, "base");
    let hue = if spec.hue[1] > spec.hue[0] {
        r.gen_range(spec.hue[0]..spec.hue[1])
    } else {
        spec.hue[0]
    };
    let base = hsv_to_rgb(hue, spec.saturation, spec.value);
    for c in 0..3 {
        img.data[c * height * width..(c + 1) * height * width].fill(base[c]);
    }

    // stripes
    if let Some(st) = &spec.stripes {
        if st.frequency > 0.0 && st.contrast > 0.0 {
            let mut r = rng::named_rng(seed, "stripes");
            let phase = r.gen_range(0.0..2.0 * PI);
            let (cos, sin) = (st.orientation.cos(), st.orientation.sin());
            for y in 0..height {
                for x in 0..width {
                    let t = 2.0 * PI * st.frequency * (x as f64 * cos + y as f64 * sin) / SCALE + phase;
                    let k = 1.0 - st.contrast * (0.5 + 0.5 * t.sin());
                    for c in 0..3 {
                        let i = img.idx(c, y, x);
                        img.data[i] *= k;
                    }
                }
            }
        }
    }

    // speckle: isolated dark or bright pixels
    if spec.speckle > 0.0 {
        let mut r = rng::named_rng(seed, "speckle");
        let count = (spec.speckle * (height * width) as f64).round() as usize;
        for _ in 0..count {
            let (y, x) = (r.gen_range(0..height), r.gen_range(0..width));
            let bright = r.gen_bool(0.5);
            let amount = r.gen_range(0.4..0.8);
            for c in 0..3 {
                let i = img.idx(c, y, x);
                let v = img.data[i];
                img.data[i] = if bright { v + amount * (1.0 - v) } else { v * (1.0 - amount) };
            }
        }
    }

    // gloss: soft white highlights
    if spec.gloss > 0.0 {
        let mut r = rng::named_rng(seed, "gloss");
        let expected = spec.gloss * area_scale;
        let mut count = expected.floor() as usize;
        if r.gen::<f64>() < expected.fract() {
            count += 1;
        }
        for _ in 0..count {
            let cy = r.gen_range(0.0..height as f64);
            let cx = r.gen_range(0.0..width as f64);
            let sigma: f64 = r.gen_range(1.5..3.5);
            let strength = r.gen_range(0.6..0.9);
            let reach = (3.0 * sigma).ceil() as isize;
            for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(height as isize) {
                for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(width as isize) {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let g = strength * (-d2 / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        let i = img.idx(c, y as usize, x as usize);
                        img.data[i] += g * (1.0 - img.data[i]);
                    }
                }
            }
        }
    }

    // roughness: three octaves of luminance value noise
    if spec.roughness > 0.0 {
        let mut r = rng::named_rng(seed, "roughness");
        let mut noise = vec![0.0; height * width];
        for (cell, weight) in [(8.0, 0.5), (4.0, 0.3), (2.0, 0.2)] {
            let oct = value_noise(height, width, cell, &mut r);
            noise.iter_mut().zip(oct).for_each(|(n, o)| *n += weight * o);
        }
        for c in 0..3 {
            for (i, n) in noise.iter().enumerate() {
                img.data[c * height * width + i] += spec.roughness * n;
            }
        }
    }

    if spec.fuzz > 0.0 {
        gaussian_blur(&mut img, spec.fuzz);
    }

    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}
