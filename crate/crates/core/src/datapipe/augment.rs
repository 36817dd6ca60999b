use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ncsl_diffcore::Tensor;

use super::dataset::{Dataset, ImageRef};
use crate::rng::stream;
use crate::{CoreError, Result};

pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Per-channel normalization `(x - mean) / std` on `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalize {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalize {
    fn default() -> Self {
        Self {
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        }
    }
}

impl Normalize {
    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(CoreError::config(
                "normalize",
                format!("mean/std need {channels} entries, got {} and {}", self.mean.len(), self.std.len()),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::config("normalize.std", "entries must be positive"));
        }
        Ok(())
    }

    fn apply(&self, planes: &mut [f32], channels: usize) {
        let plane = planes.len() / channels;
        for (c, p) in planes.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            p.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Output side; `None` keeps the input side.
    pub out_size: Option<usize>,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub hflip_prob: f64,
    /// Brightness, contrast, saturation, hue strengths.
    pub color_jitter: [f64; 4],
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    /// Blur is skipped for outputs smaller than this side.
    pub blur_min_size: usize,
    pub normalize: Normalize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            out_size: None,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            hflip_prob: 0.5,
            color_jitter: [0.4, 0.4, 0.4, 0.1],
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            blur_min_size: 64,
            normalize: Normalize::default(),
        }
    }
}

impl AugmentationConfig {
    /// Crop, flip and normalization only; the linear-probe recipe.
    pub fn probe(normalize: Normalize) -> Self {
        Self {
            crop_scale: [0.08, 1.0],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            normalize,
            ..Self::default()
        }
    }

    /// Full-image crop and no stochastic ops.
    pub fn identity(normalize: Normalize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            normalize,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CoreError::config("augmentation.crop_scale", format!("need 0 < low <= high <= 1, got ({lo}, {hi})")));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(CoreError::config("augmentation.crop_ratio", "need 0 < low <= high"));
        }
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::config(format!("augmentation.{name}"), format!("probability {p} outside [0, 1]")));
            }
        }
        if self.color_jitter.iter().any(|&v| v < 0.0) || self.color_jitter[3] > 0.5 {
            return Err(CoreError::config("augmentation.color_jitter", "strengths must be non-negative, hue at most 0.5"));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(CoreError::config("augmentation.blur_sigma", "need 0 < low <= high"));
        }
        Ok(())
    }
}

fn to_unit(img: ImageRef<'_>) -> Vec<f32> {
    img.data.iter().map(|&v| v as f32 / 255.0).collect()
}

/// Bilinear resize (half-pixel centres) of the window `(top, left, h, w)` of
/// each plane to `out_h x out_w`.
#[allow(clippy::too_many_arguments)]
fn resize_window(src: &[f32], channels: usize, sh: usize, sw: usize, (top, left, h, w): (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Vec<f32> {
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let mut out = vec![0.0f32; channels * out_h * out_w];
    for c in 0..channels {
        let plane = &src[c * sh * sw..(c + 1) * sh * sw];
        let at = |y: usize, x: usize| plane[(top + y) * sw + left + x];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(c * out_h + oy) * out_w + ox] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

fn crop_window<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentationConfig, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio[0].ln(), cfg.crop_ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio[0] {
        (((w as f64) / cfg.crop_ratio[0]).round() as usize, w)
    } else if in_ratio > cfg.crop_ratio[1] {
        (h, ((h as f64) * cfg.crop_ratio[1]).round() as usize)
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn jitter<R: Rng + ?Sized>(px: &mut [f32], channels: usize, strengths: [f64; 4], rng: &mut R) {
    let n = px.len() / channels;
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |s: f64, rng: &mut R| rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
    for op in order {
        let s = strengths[op];
        if s == 0.0 {
            continue;
        }
        match op {
            0 => {
                let f = factor(s, rng);
                px.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            1 => {
                let f = factor(s, rng);
                let mean = if channels == 3 {
                    (0..n).map(|i| gray(px[i], px[n + i], px[2 * n + i])).sum::<f32>() / n as f32
                } else {
                    px.iter().sum::<f32>() / px.len() as f32
                };
                px.iter_mut().for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
            }
            2 if channels == 3 => {
                let f = factor(s, rng);
                for i in 0..n {
                    let g = gray(px[i], px[n + i], px[2 * n + i]);
                    for c in 0..3 {
                        let v = &mut px[c * n + i];
                        *v = ((*v - g) * f + g).clamp(0.0, 1.0);
                    }
                }
            }
            3 if channels == 3 => {
                let shift = rng.random_range(-s..=s) as f32;
                for i in 0..n {
                    let (h, sat, v) = rgb_to_hsv(px[i], px[n + i], px[2 * n + i]);
                    let (r, g, b) = hsv_to_rgb(h + shift, sat, v);
                    px[i] = r;
                    px[n + i] = g;
                    px[2 * n + i] = b;
                }
            }
            _ => {}
        }
    }
}

fn blur(px: &mut [f32], channels: usize, side: usize, sigma: f64) {
    let radius = ((side as f64 * 0.05).round() as usize).max(1);
    let k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp() as f32
        })
        .collect();
    let total: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / total).collect();
    let reflect = |i: isize| -> usize {
        let n = side as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0f32; side * side];
    for c in 0..channels {
        let plane = &mut px[c * side * side..(c + 1) * side * side];
        for y in 0..side {
            for x in 0..side {
                tmp[y * side + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * plane[y * side + reflect(x as isize + j as isize - radius as isize)])
                    .sum();
            }
        }
        for y in 0..side {
            for x in 0..side {
                plane[y * side + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - radius as isize) * side + x])
                    .sum();
            }
        }
    }
}

/// One draw of the augmentation chain: random resized crop, horizontal flip,
/// colour jitter, grayscale, blur, normalization.
pub fn augment_view<R: Rng + ?Sized>(img: ImageRef<'_>, cfg: &AugmentationConfig, rng: &mut R) -> Result<Vec<f32>> {
    cfg.validate()?;
    cfg.normalize.check(img.channels)?;
    let out = cfg.out_size.unwrap_or(img.height.min(img.width));
    if out == 0 || img.height < out || img.width < out {
        return Err(CoreError::Invalid(format!(
            "degenerate crop window: {}x{} image for a {out}x{out} output",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let window = crop_window(img.height, img.width, cfg, rng);
    let mut px = resize_window(&to_unit(img), c, img.height, img.width, window, out, out);

    if rng.random_bool(cfg.hflip_prob) {
        for row in px.chunks_mut(out) {
            row.reverse();
        }
    }
    if rng.random_bool(cfg.jitter_prob) {
        jitter(&mut px, c, cfg.color_jitter, rng);
    }
    if c == 3 && rng.random_bool(cfg.grayscale_prob) {
        let n = out * out;
        for i in 0..n {
            let g = gray(px[i], px[n + i], px[2 * n + i]);
            px[i] = g;
            px[n + i] = g;
            px[2 * n + i] = g;
        }
    }
    if out >= cfg.blur_min_size && rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        blur(&mut px, c, out, sigma);
    }
    cfg.normalize.apply(&mut px, c);
    Ok(px)
}

/// Two independent draws of the chain on one image.
pub fn augment_pair<R: Rng + ?Sized>(img: ImageRef<'_>, cfg: &AugmentationConfig, rng: &mut R) -> Result<(Vec<f32>, Vec<f32>)> {
    Ok((augment_view(img, cfg, rng)?, augment_view(img, cfg, rng)?))
}

/// Deterministic resize of the shorter side to `resize`, center crop to
/// `crop`, normalization.
pub fn eval_transform(img: ImageRef<'_>, resize: usize, crop: usize, norm: &Normalize) -> Result<Vec<f32>> {
    norm.check(img.channels)?;
    if resize == 0 || crop == 0 || crop > resize {
        return Err(CoreError::Invalid(format!("eval transform needs 0 < crop <= resize, got resize {resize}, crop {crop}")));
    }
    let (h, w) = (img.height, img.width);
    let (rh, rw) = if h <= w {
        (resize, ((resize as f64) * w as f64 / h as f64).round() as usize)
    } else {
        (((resize as f64) * h as f64 / w as f64).round() as usize, resize)
    };
    let c = img.channels;
    let resized = if (rh, rw) == (h, w) {
        to_unit(img)
    } else {
        resize_window(&to_unit(img), c, h, w, (0, 0, h, w), rh, rw)
    };
    let top = ((rh - crop) as f64 / 2.0).round() as usize;
    let left = ((rw - crop) as f64 / 2.0).round() as usize;
    let mut px = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = (ch * rh + top + y) * rw + left;
            px.extend_from_slice(&resized[row..row + crop]);
        }
    }
    norm.apply(&mut px, c);
    Ok(px)
}

fn stack(views: Vec<Vec<f32>>, c: usize, side: usize) -> Result<Tensor<f32>> {
    let b = views.len();
    Ok(Tensor::new(vec![b, c, side, side], views.concat())?)
}

fn out_side(ds: &Dataset, cfg: &AugmentationConfig) -> usize {
    cfg.out_size.unwrap_or(ds.height.min(ds.width))
}

/// Paired views for a batch. Slot `k` draws from the stream
/// `(seed, tag, step, k)`, so the batch does not depend on thread count.
pub fn augment_batch(ds: &Dataset, indices: &[usize], cfg: &AugmentationConfig, seed: u64, tag: u64, step: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| augment_pair(ds.image(i), cfg, &mut stream(seed, &[tag, step, k as u64])))
        .collect::<Result<_>>()?;
    let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let side = out_side(ds, cfg);
    Ok((stack(a, ds.channels, side)?, stack(b, ds.channels, side)?))
}

/// Single views for a batch, streams as in [`augment_batch`].
pub fn augment_single_batch(ds: &Dataset, indices: &[usize], cfg: &AugmentationConfig, seed: u64, tag: u64, step: u64) -> Result<Tensor<f32>> {
    let views: Vec<Vec<f32>> = indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| augment_view(ds.image(i), cfg, &mut stream(seed, &[tag, step, k as u64])))
        .collect::<Result<_>>()?;
    stack(views, ds.channels, out_side(ds, cfg))
}

pub fn eval_batch(ds: &Dataset, indices: &[usize], resize: usize, crop: usize, norm: &Normalize) -> Result<Tensor<f32>> {
    let views: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| eval_transform(ds.image(i), resize, crop, norm))
        .collect::<Result<_>>()?;
    stack(views, ds.channels, crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize, seed: u64) -> Vec<u8> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * side * side).map(|_| r.random()).collect()
    }

    fn view(data: &[u8], side: usize) -> ImageRef<'_> {
        ImageRef { data, channels: 3, height: side, width: side }
    }

    fn normalized(data: &[u8], norm: &Normalize) -> Vec<f32> {
        let plane = data.len() / 3;
        data.iter()
            .enumerate()
            .map(|(i, &v)| ((v as f32 / 255.0) - norm.mean[i / plane] as f32) / norm.std[i / plane] as f32)
            .collect()
    }

    #[test]
    fn identity_augmentation_returns_normalized_original() {
        let data = image(16, 1);
        let cfg = AugmentationConfig::identity(Normalize::default());
        let (a, b) = augment_pair(view(&data, 16), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let want = normalized(&data, &cfg.normalize);
        assert_eq!(a, want);
        assert_eq!(b, want);
    }

    #[test]
    fn forced_flip_mirrors_both_views() {
        let data = image(8, 2);
        let cfg = AugmentationConfig { hflip_prob: 1.0, ..AugmentationConfig::identity(Normalize::default()) };
        let (a, b) = augment_pair(view(&data, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let base = normalized(&data, &cfg.normalize);
        let mirrored: Vec<f32> = base.chunks(8).flat_map(|r| r.iter().rev().copied()).collect();
        assert_eq!(a, mirrored);
        assert_eq!(b, mirrored);
    }

    #[test]
    fn fixed_seed_reproduces_the_pair() {
        let data = image(32, 3);
        let cfg = AugmentationConfig { blur_min_size: 16, ..AugmentationConfig::default() };
        let p = augment_pair(view(&data, 32), &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let q = augment_pair(view(&data, 32), &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(p, q);
        assert_ne!(p.0, p.1);
        assert!(p.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_windows_are_rejected() {
        let data = image(8, 3);
        let cfg = AugmentationConfig { out_size: Some(16), ..AugmentationConfig::default() };
        assert!(augment_view(view(&data, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let cfg = AugmentationConfig { crop_scale: [0.5, 0.2], ..AugmentationConfig::default() };
        assert!(augment_view(view(&data, 8), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn eval_transform_contracts() {
        let norm = Normalize::default();
        let data = image(32, 4);
        let out = eval_transform(view(&data, 32), 32, 32, &norm).unwrap();
        assert_eq!(out, normalized(&data, &norm));
        assert_eq!(out, eval_transform(view(&data, 32), 32, 32, &norm).unwrap());
        let big = image(40, 5);
        assert_eq!(eval_transform(view(&big, 40), 36, 32, &norm).unwrap().len(), 3 * 32 * 32);
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.2f32, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut px = vec![0.5f32; 3 * 64 * 64];
        blur(&mut px, 3, 64, 1.5);
        assert!(px.iter().all(|v| (v - 0.5).abs() < 1e-6));
    }
}
