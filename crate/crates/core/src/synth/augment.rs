//! Seeded image augmentation: rotation, shear, perspective, erosion and dilation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Raster;

/// Probability and magnitude of each transform.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_rotate: f64,
    pub max_rotate_deg: f64,
    pub p_shear: f64,
    pub max_shear: f64,
    pub p_perspective: f64,
    /// Maximum corner displacement as a fraction of the image extent.
    pub max_perspective: f64,
    pub p_erode: f64,
    pub p_dilate: f64,
    pub min_kernel: usize,
    pub max_kernel: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rotate: 0.5,
            max_rotate_deg: 10.0,
            p_shear: 0.5,
            max_shear: 0.1,
            p_perspective: 0.3,
            max_perspective: 0.05,
            p_erode: 0.15,
            p_dilate: 0.3,
            min_kernel: 2,
            max_kernel: 3,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self { p_rotate: 0.0, p_shear: 0.0, p_perspective: 0.0, p_erode: 0.0, p_dilate: 0.0, ..Self::default() }
    }
}

/// Maps output pixel centres to input coordinates (row-major 3x3).
type Homography = [f64; 9];

fn apply(h: &Homography, x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

fn bilinear(img: &Raster, x: f64, y: f64) -> f32 {
    // Pixel centres sit at integer + 0.5.
    let (fx, fy) = (x - 0.5, y - 0.5);
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = ((fx - x0) as f32, (fy - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.data[yi as usize * img.width + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1.0, y0) * tx;
    let bottom = at(x0, y0 + 1.0) * (1.0 - tx) + at(x0 + 1.0, y0 + 1.0) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn warp(img: &Raster, h: &Homography) -> Raster {
    let mut out = Raster::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = apply(h, x as f64 + 0.5, y as f64 + 0.5);
            out.data[y * img.width + x] = bilinear(img, sx, sy).clamp(0.0, 1.0);
        }
    }
    out
}

fn centre(img: &Raster) -> (f64, f64) {
    (img.width as f64 / 2.0, img.height as f64 / 2.0)
}

/// Rotates counter-clockwise by `degrees` about the image centre, keeping the canvas size.
pub fn rotate(img: &Raster, degrees: f64) -> Raster {
    let (cx, cy) = centre(img);
    // Inverse map: rotate output coordinates by -theta (y axis points down).
    let (s, c) = degrees.to_radians().sin_cos();
    let h = [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy, 0.0, 0.0, 1.0];
    warp(img, &h)
}

/// Horizontal shear `x' = x + k (y - cy)`.
pub fn shear(img: &Raster, k: f64) -> Raster {
    let (_, cy) = centre(img);
    let h = [1.0, -k, k * cy, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    warp(img, &h)
}

/// Solves the 8 unknowns of the homography mapping `from[i]` onto `to[i]`.
fn homography(from: [(f64, f64); 4], to: [(f64, f64); 4]) -> Option<Homography> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    Some(h)
}

/// Moves each corner by up to `max_frac` of the extent and warps accordingly.
pub fn perspective(img: &Raster, max_frac: f64, rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (img.width as f64, img.height as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut moved = corners;
    for p in &mut moved {
        p.0 += rng.random_range(-1.0..=1.0) * max_frac * w;
        p.1 += rng.random_range(-1.0..=1.0) * max_frac * h;
    }
    match homography(moved, corners) {
        Some(hm) => warp(img, &hm),
        None => img.clone(),
    }
}

fn morph(img: &Raster, k: usize, pick: fn(f32, f32) -> f32, init: f32) -> Raster {
    let mut out = Raster::zeros(img.height, img.width);
    // Window rows/cols [i - (k-1)/2, i + k/2].
    let (lo, hi) = ((k as isize - 1) / 2, k as isize / 2);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            let mut acc = init;
            for dy in -lo..=hi {
                for dx in -lo..=hi {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= img.height as isize || xx >= img.width as isize {
                        0.0
                    } else {
                        img.data[yy as usize * img.width + xx as usize]
                    };
                    acc = pick(acc, v);
                }
            }
            out.data[y as usize * img.width + x as usize] = acc;
        }
    }
    out
}

/// Thins ink with a `k x k` minimum filter.
pub fn erode(img: &Raster, k: usize) -> Raster {
    morph(img, k, f32::min, 1.0)
}

/// Thickens ink with a `k x k` maximum filter.
pub fn dilate(img: &Raster, k: usize) -> Raster {
    morph(img, k, f32::max, 0.0)
}

/// Applies a random subset of the transforms; deterministic for a given seed.
pub fn augment(img: &Raster, cfg: &AugmentConfig, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    if rng.random_bool(cfg.p_rotate.clamp(0.0, 1.0)) {
        let deg = rng.random_range(-1.0..=1.0) * cfg.max_rotate_deg;
        out = rotate(&out, deg);
    }
    if rng.random_bool(cfg.p_shear.clamp(0.0, 1.0)) {
        let k = rng.random_range(-1.0..=1.0) * cfg.max_shear;
        out = shear(&out, k);
    }
    if rng.random_bool(cfg.p_perspective.clamp(0.0, 1.0)) {
        out = perspective(&out, cfg.max_perspective, &mut rng);
    }
    let kernel = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_kernel.max(1)..=cfg.max_kernel.max(cfg.min_kernel.max(1)));
    if rng.random_bool(cfg.p_erode.clamp(0.0, 1.0)) {
        let k = kernel(&mut rng);
        out = erode(&out, k);
    }
    if rng.random_bool(cfg.p_dilate.clamp(0.0, 1.0)) {
        let k = kernel(&mut rng);
        out = dilate(&out, k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster {
        let mut r = Raster::zeros(64, 96);
        for y in 20..44 {
            for x in 30..70 {
                if (x + y) % 7 < 3 || y == 30 {
                    r.data[y * 96 + x] = 1.0;
                }
            }
        }
        r
    }

    #[test]
    fn identity_config_returns_input() {
        let img = sample();
        assert_eq!(augment(&img, &AugmentConfig::identity(), 5), img);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = sample();
        let cfg = AugmentConfig { p_rotate: 1.0, p_shear: 1.0, p_perspective: 1.0, p_dilate: 1.0, ..Default::default() };
        assert_eq!(augment(&img, &cfg, 9), augment(&img, &cfg, 9));
        assert_ne!(augment(&img, &cfg, 9), img);
    }

    #[test]
    fn rotation_round_trip_is_near_identity() {
        let img = sample();
        let back = rotate(&rotate(&img, 5.0), -5.0);
        let mad: f32 = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.data.len() as f32;
        assert!(mad < 0.05, "{mad}");
    }

    #[test]
    fn zero_rotation_is_exact() {
        let img = sample();
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn morphology_orders_ink() {
        let img = sample();
        let (e, d) = (erode(&img, 2), dilate(&img, 3));
        for i in 0..img.data.len() {
            assert!(e.data[i] <= img.data[i] && img.data[i] <= d.data[i]);
        }
    }

    #[test]
    fn homography_recovers_identity() {
        let c = [(0.0, 0.0), (4.0, 0.0), (4.0, 3.0), (0.0, 3.0)];
        let h = homography(c, c).unwrap();
        let (x, y) = apply(&h, 1.5, 2.5);
        assert!((x - 1.5).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);
    }
}
