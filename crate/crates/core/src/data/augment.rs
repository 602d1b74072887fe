use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub cutout_count: usize,
    /// Side of each square zero-mask relative to `min(H, W)`.
    pub cutout_side_ratio: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Rotation angle is uniform in `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    pub interpolation: Interpolation,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            cutout_count: 10,
            cutout_side_ratio: 96.0 / 224.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_degrees: 15.0,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            cutout_count: 0,
            cutout_side_ratio: 1.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_degrees: 0.0,
            interpolation: Interpolation::Bilinear,
        }
    }

    pub fn cutout_side(&self, h: usize, w: usize) -> usize {
        ((self.cutout_side_ratio * h.min(w) as f64).floor() as usize).max(1)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.cutout_side_ratio > 0.0 && self.cutout_side_ratio <= 1.0) {
            return Err(crate::Error::Config("cutout_side_ratio must be in (0, 1]".into()));
        }
        if !unit(self.hflip_prob) || !unit(self.vflip_prob) {
            return Err(crate::Error::Config("flip probabilities must be in [0, 1]".into()));
        }
        if !(self.rotation_degrees >= 0.0) || !self.rotation_degrees.is_finite() {
            return Err(crate::Error::Config("rotation_degrees must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn dims(img: &Tensor<f64>) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

/// Zeroes one `side x side` square centred at (`cy`, `cx`), clipped at the borders.
pub(crate) fn zero_square(img: &mut Tensor<f64>, cy: usize, cx: usize, side: usize) {
    let (c, h, w) = dims(img);
    let half = side / 2;
    let y0 = cy.saturating_sub(half);
    let x0 = cx.saturating_sub(half);
    let y1 = (cy + side - half).min(h);
    let x1 = (cx + side - half).min(w);
    let data = img.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            data[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(0.0);
        }
    }
}

/// Places `cutout_count` square zero-masks at uniformly random pixel centres.
pub fn cutout<R: Rng + ?Sized>(image: &Tensor<f64>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f64> {
    let (_, h, w) = dims(image);
    let side = cfg.cutout_side(h, w);
    let mut out = image.clone();
    for _ in 0..cfg.cutout_count {
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        zero_square(&mut out, cy, cx, side);
    }
    out
}

pub fn hflip(image: &Tensor<f64>) -> Tensor<f64> {
    let (_, _, w) = dims(image);
    let mut out = image.clone();
    out.data_mut().chunks_exact_mut(w).for_each(|row| row.reverse());
    out
}

pub fn vflip(image: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = dims(image);
    let src = image.data();
    let mut out = image.clone();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let from = (ch * h + (h - 1 - y)) * w;
            dst[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&src[from..from + w]);
        }
    }
    out
}

/// Rotates about the image centre by `degrees` using inverse mapping; samples
/// that fall outside the source read as zero.
pub fn rotate(image: &Tensor<f64>, degrees: f64, interp: Interpolation) -> Tensor<f64> {
    let (c, h, w) = dims(image);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            for ch in 0..c {
                let v = match interp {
                    Interpolation::Nearest => at(ch, sy.round() as isize, sx.round() as isize),
                    Interpolation::Bilinear => {
                        let (x0, y0) = (sx.floor(), sy.floor());
                        let (fx, fy) = (sx - x0, sy - y0);
                        let (x0, y0) = (x0 as isize, y0 as isize);
                        at(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                            + at(ch, y0, x0 + 1) * fx * (1.0 - fy)
                            + at(ch, y0 + 1, x0) * (1.0 - fx) * fy
                            + at(ch, y0 + 1, x0 + 1) * fx * fy
                    }
                };
                dst[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Independent horizontal/vertical flips followed by a random rotation.
pub fn flip_rotate<R: Rng + ?Sized>(image: &Tensor<f64>, cfg: &AugmentConfig, rng: &mut R) -> Tensor<f64> {
    let mut out = image.clone();
    if rng.random_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if rng.random_bool(cfg.vflip_prob) {
        out = vflip(&out);
    }
    if cfg.rotation_degrees > 0.0 {
        let angle = rng.random_range(-cfg.rotation_degrees..=cfg.rotation_degrees);
        out = rotate(&out, angle, cfg.interpolation);
    }
    out
}
