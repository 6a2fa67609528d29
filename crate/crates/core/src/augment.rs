//! Deterministic batch augmentation.
//!
//! Ingestion masks every force map with a 10% cosine-tapered (Tukey) window
//! to suppress border reconstruction artifacts. Per sample, the pipeline is
//! then: horizontal flip (p = 0.5) → vertical flip (p = 0.5) → rotation by a
//! uniform angle in [0°, 360°) about the cell bounding-box center (bicubic,
//! zero fill, negatives clamped) → square crop whose center is uniform over
//! the cell bbox. Salt noise may then hit the input image only, and both
//! maps finally pass through the clipped log `ln(max(1, x))`.
//!
//! Every draw comes from the caller's [`SeedStream`] in a fixed order, so
//! the whole pipeline is a pure function of (data, seed, config).

use crate::frameset::FrameSet;
use crate::grid::Grid;
use crate::rng::SeedStream;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("tukey alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("no cell found: no foreground survives thresholding and morphology")]
    NoCellFound,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid augment config: {0}")]
    ConfigInvalid(String),
}

type Result<T> = std::result::Result<T, AugmentError>;

/// One (input image, force map) pair of equal shape, nonnegative values.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: Grid<f32>,
    pub force: Grid<f32>,
}

impl SamplePair {
    pub fn new(input: Grid<f32>, force: Grid<f32>) -> Result<Self> {
        if !input.same_shape(&force) {
            return Err(AugmentError::InvalidSample(format!(
                "input {}x{} vs force {}x{}",
                input.height(),
                input.width(),
                force.height(),
                force.width()
            )));
        }
        for (name, g) in [("input", &input), ("force", &force)] {
            if g.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(AugmentError::InvalidSample(format!(
                    "{name} contains negative or non-finite values"
                )));
            }
        }
        Ok(Self { input, force })
    }

    pub fn height(&self) -> usize {
        self.input.height()
    }

    pub fn width(&self) -> usize {
        self.input.width()
    }
}

/// Augmentation parameters.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub crop: usize,
    pub flip_prob: f64,
    pub salt_fraction: f64,
    pub salt_image_prob: f64,
    pub salt_intensity_max: f32,
    pub tukey_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 256,
            flip_prob: 0.5,
            salt_fraction: 0.01,
            salt_image_prob: 0.5,
            salt_intensity_max: 2000.0,
            tukey_alpha: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop < 32 {
            return Err(AugmentError::ConfigInvalid(format!("crop {} < 32", self.crop)));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("salt_fraction", self.salt_fraction),
            ("salt_image_prob", self.salt_image_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::ConfigInvalid(format!("{name} {p} outside [0,1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.tukey_alpha) {
            return Err(AugmentError::InvalidAlpha(self.tukey_alpha));
        }
        Ok(())
    }
}

// ── Tukey window ─────────────────────────────────────────────────────

fn tukey_1d(n: usize, alpha: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let edge = alpha * (n - 1) as f64 / 2.0;
    (0..n)
        .map(|i| {
            let m = i.min(n - 1 - i) as f64;
            if alpha == 0.0 || m > edge {
                1.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * (m / edge - 1.0)).cos())
            }
        })
        .collect()
}

/// 2-D Tukey window: outer product of two 1-D cosine-tapered windows with
/// taper fraction `alpha`. For alpha > 0 all four borders are exactly 0 and
/// the central plateau is exactly 1.
pub fn tukey_window2d(height: usize, width: usize, alpha: f64) -> Result<Grid<f32>> {
    if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
        return Err(AugmentError::InvalidAlpha(alpha));
    }
    let wy = tukey_1d(height, alpha);
    let wx = tukey_1d(width, alpha);
    Ok(Grid::from_fn(height, width, |r, c| (wy[r] * wx[c]) as f32))
}

/// Multiply every force map by the 10% Tukey window, in place. Applied once
/// at ingestion, before augmentation or evaluation. Not idempotent on the
/// taper: masking twice squares the ramp.
pub fn mask_forces(fs: &mut FrameSet) -> Result<()> {
    if fs.frames.is_empty() {
        return Ok(());
    }
    let window = tukey_window2d(fs.height(), fs.width(), 0.1)?;
    for frame in &mut fs.frames {
        for (v, &w) in frame.force.data_mut().iter_mut().zip(window.data()) {
            *v *= w;
        }
    }
    Ok(())
}

// ── cell extraction ──────────────────────────────────────────────────

/// Inclusive bounding box (rows `top..=bottom`, cols `left..=right`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn full_frame(height: usize, width: usize) -> Self {
        Self { top: 0, left: 0, bottom: height - 1, right: width - 1 }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.top + self.bottom) as f64 / 2.0,
            (self.left + self.right) as f64 / 2.0,
        )
    }
}

/// Otsu threshold over the positive intensities, 256 bins. Returns the value
/// above which a pixel counts as foreground.
fn otsu_threshold(image: &Grid<f32>) -> Option<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    let mut count = 0usize;
    for &v in image.data() {
        if v > 0.0 {
            lo = lo.min(v);
            hi = hi.max(v);
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    if lo == hi {
        // single positive level: everything positive is foreground
        return Some(lo * 0.5);
    }
    let bins = 256usize;
    let scale = (bins as f32 - 1e-3) / (hi - lo);
    let mut hist = [0u64; 256];
    for &v in image.data() {
        if v > 0.0 {
            hist[((v - lo) * scale) as usize] += 1;
        }
    }
    let total = count as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum::<f64>()
        / total;
    let mut best_k = 0usize;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for k in 0..bins - 1 {
        w0 += hist[k] as f64 / total;
        sum0 += k as f64 * hist[k] as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let w1 = 1.0 - w0;
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_k = k;
        }
    }
    // foreground = bins strictly above best_k
    Some(lo + (best_k as f32 + 1.0) / scale)
}

fn dilate5(mask: &Grid<bool>) -> Grid<bool> {
    let (h, w) = (mask.height(), mask.width());
    Grid::from_fn(h, w, |r, c| {
        for dr in r.saturating_sub(2)..=(r + 2).min(h - 1) {
            for dc in c.saturating_sub(2)..=(c + 2).min(w - 1) {
                if mask.get(dr, dc) {
                    return true;
                }
            }
        }
        false
    })
}

fn erode5(mask: &Grid<bool>) -> Grid<bool> {
    let (h, w) = (mask.height(), mask.width());
    Grid::from_fn(h, w, |r, c| {
        if r < 2 || c < 2 || r + 2 >= h || c + 2 >= w {
            return false; // outside the frame counts as background
        }
        for dr in r - 2..=r + 2 {
            for dc in c - 2..=c + 2 {
                if !mask.get(dr, dc) {
                    return false;
                }
            }
        }
        true
    })
}

/// Tight bbox of the largest 4-connected foreground component after Otsu
/// thresholding and a 5×5 box closing then opening.
pub fn extract_cell_bbox(image: &Grid<f32>) -> Result<BBox> {
    let thresh = otsu_threshold(image).ok_or(AugmentError::NoCellFound)?;
    let binary = image.map(|v| v >= thresh);
    let closed = erode5(&dilate5(&binary));
    let opened = dilate5(&erode5(&closed));

    let (h, w) = (opened.height(), opened.width());
    let mut visited = Grid::from_fill(h, w, false);
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for sr in 0..h {
        for sc in 0..w {
            if !opened.get(sr, sc) || visited.get(sr, sc) {
                continue;
            }
            let mut area = 0usize;
            let mut bb = BBox { top: sr, left: sc, bottom: sr, right: sc };
            stack.push((sr, sc));
            visited.set(sr, sc, true);
            while let Some((r, c)) = stack.pop() {
                area += 1;
                bb.top = bb.top.min(r);
                bb.bottom = bb.bottom.max(r);
                bb.left = bb.left.min(c);
                bb.right = bb.right.max(c);
                let mut push = |rr: usize, cc: usize, visited: &mut Grid<bool>| {
                    if opened.get(rr, cc) && !visited.get(rr, cc) {
                        visited.set(rr, cc, true);
                        stack.push((rr, cc));
                    }
                };
                if r > 0 {
                    push(r - 1, c, &mut visited);
                }
                if r + 1 < h {
                    push(r + 1, c, &mut visited);
                }
                if c > 0 {
                    push(r, c - 1, &mut visited);
                }
                if c + 1 < w {
                    push(r, c + 1, &mut visited);
                }
            }
            if best.as_ref().is_none_or(|(a, _)| area > *a) {
                best = Some((area, bb));
            }
        }
    }
    best.map(|(_, bb)| bb).ok_or(AugmentError::NoCellFound)
}

// ── geometry ─────────────────────────────────────────────────────────

/// Resolved draw of one sample's geometric transform.
#[derive(Debug, Clone, Copy)]
pub struct GeomParams {
    pub hflip: bool,
    pub vflip: bool,
    /// radians, counter-clockwise
    pub angle: f64,
    /// rotation and crop-placement center (row, col), from the cell bbox
    pub center: (f64, f64),
    /// crop window center (row, col)
    pub crop_center: (usize, usize),
}

fn flip_grid(g: &Grid<f32>, hflip: bool, vflip: bool) -> Grid<f32> {
    let (h, w) = (g.height(), g.width());
    Grid::from_fn(h, w, |r, c| {
        let rr = if vflip { h - 1 - r } else { r };
        let cc = if hflip { w - 1 - c } else { c };
        g.get(rr, cc)
    })
}

/// Catmull-Rom cubic kernel (a = −0.5).
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Rotate by `angle` (ccw) about `center` with bicubic interpolation, zero
/// fill outside, negative overshoot clamped to zero.
pub fn rotate_bicubic(g: &Grid<f32>, angle: f64, center: (f64, f64)) -> Grid<f32> {
    let (h, w) = (g.height(), g.width());
    let (cy, cx) = center;
    let (sin, cos) = angle.sin_cos();
    Grid::from_fn(h, w, |r, c| {
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        // inverse mapping
        let sy = cy + cos * dy + sin * dx;
        let sx = cx - sin * dy + cos * dx;
        let iy = sy.floor();
        let ix = sx.floor();
        let fy = sy - iy;
        let fx = sx - ix;
        let mut acc = 0.0f64;
        for m in -1i64..=2 {
            let wy = cubic_weight(fy - m as f64);
            if wy == 0.0 {
                continue;
            }
            let yy = iy as i64 + m;
            for n in -1i64..=2 {
                let wx = cubic_weight(fx - n as f64);
                if wx == 0.0 {
                    continue;
                }
                let xx = ix as i64 + n;
                let v = if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    g.get(yy as usize, xx as usize) as f64
                } else {
                    0.0
                };
                acc += wy * wx * v;
            }
        }
        (acc as f32).max(0.0)
    })
}

/// Extract a `crop`×`crop` window around `center`, clamped inside the frame;
/// frames smaller than the crop are centered on a zero canvas.
pub fn crop_at(g: &Grid<f32>, center: (usize, usize), crop: usize) -> Grid<f32> {
    let (h, w) = (g.height(), g.width());
    let place = |size: usize, center: usize| -> (usize, usize) {
        // (source start, destination offset)
        if size >= crop {
            let start = center
                .saturating_sub(crop / 2)
                .min(size - crop);
            (start, 0)
        } else {
            (0, (crop - size) / 2)
        }
    };
    let (top, off_r) = place(h, center.0);
    let (left, off_c) = place(w, center.1);
    let mut out = Grid::from_fill(crop, crop, 0.0f32);
    for r in 0..h.min(crop) {
        for c in 0..w.min(crop) {
            out.set(r + off_r, c + off_c, g.get(top + r, left + c));
        }
    }
    out
}

/// Draw the geometric transform for one sample: flips first, then the cell
/// bbox of the flipped input fixes the rotation center and the crop-center
/// distribution. Falls back to the full frame when no cell is found.
pub fn draw_geom(pair: &SamplePair, cfg: &AugmentConfig, rng: &mut SeedStream) -> GeomParams {
    let hflip = rng.coin(cfg.flip_prob);
    let vflip = rng.coin(cfg.flip_prob);
    let flipped_input = flip_grid(&pair.input, hflip, vflip);
    let bbox = extract_cell_bbox(&flipped_input)
        .unwrap_or_else(|_| BBox::full_frame(pair.height(), pair.width()));
    let angle = rng.unit_f64() * std::f64::consts::TAU;
    let crop_r = bbox.top + rng.below(bbox.bottom - bbox.top + 1);
    let crop_c = bbox.left + rng.below(bbox.right - bbox.left + 1);
    GeomParams { hflip, vflip, angle, center: bbox.center(), crop_center: (crop_r, crop_c) }
}

/// Apply an already-drawn transform to both maps identically.
pub fn apply_geom(pair: &SamplePair, params: &GeomParams, cfg: &AugmentConfig) -> SamplePair {
    let transform = |g: &Grid<f32>| {
        let flipped = flip_grid(g, params.hflip, params.vflip);
        let rotated = rotate_bicubic(&flipped, params.angle, params.center);
        crop_at(&rotated, params.crop_center, cfg.crop)
    };
    SamplePair { input: transform(&pair.input), force: transform(&pair.force) }
}

/// Flip/rotate/crop one sample; all randomness comes from `rng`.
pub fn augment_sample(pair: &SamplePair, cfg: &AugmentConfig, rng: &mut SeedStream) -> SamplePair {
    let params = draw_geom(pair, cfg, rng);
    apply_geom(pair, &params, cfg)
}

// ── salt noise and log transform ─────────────────────────────────────

/// With probability `salt_image_prob`, replace a uniformly chosen
/// `salt_fraction` of the pixels (exact count, without replacement) by
/// values uniform in [0, salt_intensity_max). Input images only; force maps
/// never see salt.
pub fn salt_noise(image: &Grid<f32>, cfg: &AugmentConfig, rng: &mut SeedStream) -> Grid<f32> {
    let mut out = image.clone();
    if !rng.coin(cfg.salt_image_prob) {
        return out;
    }
    let n = out.len();
    let count = (cfg.salt_fraction * n as f64).round() as usize;
    if count == 0 {
        return out;
    }
    // partial Fisher-Yates: the first `count` slots end up a uniform sample
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
        out.data_mut()[idx[i] as usize] = rng.unit_f32() * cfg.salt_intensity_max;
    }
    out
}

/// Elementwise clipped log `ln(max(1, x))`; the final pipeline step for
/// both the input image and the force map.
pub fn clipped_log(image: &Grid<f32>) -> Grid<f32> {
    image.map(|v| v.max(1.0).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_pair(h: usize, w: usize, v: f32) -> SamplePair {
        SamplePair::new(Grid::from_fill(h, w, v), Grid::from_fill(h, w, v)).unwrap()
    }

    // ── tukey ────────────────────────────────────────────────────────

    #[test]
    fn tukey_alpha_zero_is_rectangular() {
        let w = tukey_window2d(5, 7, 0.0).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tukey_borders_zero_center_one() {
        let g = tukey_window2d(32, 48, 0.1).unwrap();
        let (h, w) = (32, 48);
        for c in 0..w {
            assert_eq!(g.get(0, c), 0.0);
            assert_eq!(g.get(h - 1, c), 0.0);
        }
        for r in 0..h {
            assert_eq!(g.get(r, 0), 0.0);
            assert_eq!(g.get(r, w - 1), 0.0);
        }
        assert_eq!(g.get(h / 2, w / 2), 1.0);
        assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tukey_alpha_one_is_hann() {
        // Hann midpoint is 1 for odd length; compare a few points.
        let n = 33;
        let w = tukey_1d(n, 1.0);
        assert_eq!(w[n / 2], 1.0);
        for (i, &v) in w.iter().enumerate() {
            let hann =
                0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos());
            assert!((v - hann).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn tukey_rejects_bad_alpha() {
        assert!(matches!(
            tukey_window2d(8, 8, -0.1),
            Err(AugmentError::InvalidAlpha(_))
        ));
        assert!(matches!(
            tukey_window2d(8, 8, 1.5),
            Err(AugmentError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn masking_twice_squares_the_taper() {
        let w = tukey_window2d(16, 16, 0.5).unwrap();
        // plateau: double mask equals single; taper: it does not
        let mut once = Grid::from_fill(16, 16, 1.0f32);
        for (v, &m) in once.data_mut().iter_mut().zip(w.data()) {
            *v *= m;
        }
        let mut twice = once.clone();
        for (v, &m) in twice.data_mut().iter_mut().zip(w.data()) {
            *v *= m;
        }
        assert_eq!(once.get(8, 8), twice.get(8, 8)); // plateau
        let taper = (1, 1);
        assert!(w.get(taper.0, taper.1) > 0.0 && w.get(taper.0, taper.1) < 1.0);
        assert!(twice.get(taper.0, taper.1) < once.get(taper.0, taper.1));
    }

    // ── bbox extraction ──────────────────────────────────────────────

    fn square_image(h: usize, w: usize, top: usize, left: usize, size: usize) -> Grid<f32> {
        Grid::from_fn(h, w, |r, c| {
            if r >= top && r < top + size && c >= left && c < left + size {
                800.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn bbox_of_solid_square() {
        let img = square_image(64, 64, 10, 10, 20);
        let bb = extract_cell_bbox(&img).unwrap();
        assert_eq!(bb, BBox { top: 10, left: 10, bottom: 29, right: 29 });
    }

    #[test]
    fn opening_removes_isolated_pixel() {
        let mut img = square_image(64, 64, 10, 10, 20);
        img.set(50, 55, 800.0);
        let bb = extract_cell_bbox(&img).unwrap();
        assert_eq!(bb, BBox { top: 10, left: 10, bottom: 29, right: 29 });
    }

    #[test]
    fn all_zero_image_has_no_cell() {
        let img = Grid::from_fill(32, 32, 0.0f32);
        assert_eq!(extract_cell_bbox(&img), Err(AugmentError::NoCellFound));
    }

    #[test]
    fn bimodal_image_splits_on_otsu() {
        // background 20, cell 800: the threshold must land between.
        let img = Grid::from_fn(64, 64, |r, c| {
            if (20..40).contains(&r) && (20..40).contains(&c) {
                800.0
            } else {
                20.0
            }
        });
        let bb = extract_cell_bbox(&img).unwrap();
        assert_eq!(bb, BBox { top: 20, left: 20, bottom: 39, right: 39 });
    }

    // ── geometry ─────────────────────────────────────────────────────

    #[test]
    fn identity_transform_is_identity() {
        let mut rng = SeedStream::new(5);
        let input = Grid::from_fn(48, 48, |_, _| rng.unit_f32() * 100.0);
        let force = Grid::from_fn(48, 48, |_, _| rng.unit_f32() * 50.0);
        let pair = SamplePair::new(input, force).unwrap();
        let cfg = AugmentConfig { crop: 48, ..Default::default() };
        let params = GeomParams {
            hflip: false,
            vflip: false,
            angle: 0.0,
            center: (23.5, 23.5),
            crop_center: (24, 24),
        };
        let out = apply_geom(&pair, &params, &cfg);
        assert_eq!(out.input.data(), pair.input.data());
        assert_eq!(out.force.data(), pair.force.data());
    }

    #[test]
    fn rotation_90_matches_permutation_oracle() {
        // bright square, rotate 90° about the image center; away from the
        // square's edges the result must match the exact index permutation.
        let n = 64usize;
        let img = square_image(n, n, 20, 26, 16); // off-center square
        let center = ((n - 1) as f64 / 2.0, (n - 1) as f64 / 2.0);
        let rot = rotate_bicubic(&img, std::f64::consts::FRAC_PI_2, center);
        // ccw rotation oracle: out[r][c] = in[?]; with our inverse map,
        // source(r,c) = (cy + dx, cx - dy).
        let oracle = Grid::from_fn(n, n, |r, c| {
            let dy = r as f64 - center.0;
            let dx = c as f64 - center.1;
            let sr = (center.0 + dx).round() as i64;
            let sc = (center.1 - dy).round() as i64;
            if sr >= 0 && sc >= 0 && (sr as usize) < n && (sc as usize) < n {
                img.get(sr as usize, sc as usize)
            } else {
                0.0
            }
        });
        let mut checked = 0;
        for r in 0..n {
            for c in 0..n {
                // skip a 2-pixel band around the oracle's intensity edges
                let near_edge = (r.saturating_sub(2)..=(r + 2).min(n - 1)).any(|rr| {
                    (c.saturating_sub(2)..=(c + 2).min(n - 1))
                        .any(|cc| oracle.get(rr, cc) != oracle.get(r, c))
                });
                if near_edge {
                    continue;
                }
                assert!(
                    (rot.get(r, c) - oracle.get(r, c)).abs() < 1e-3 * 800.0,
                    "({r},{c}): {} vs {}",
                    rot.get(r, c),
                    oracle.get(r, c)
                );
                checked += 1;
            }
        }
        assert!(checked > n * n / 2, "oracle must cover most pixels, got {checked}");
    }

    #[test]
    fn rotation_clamps_bicubic_overshoot() {
        let img = square_image(32, 32, 8, 8, 12);
        let rot = rotate_bicubic(&img, 0.3, (15.5, 15.5));
        assert!(rot.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn geometry_applies_identically_to_both_maps() {
        // mark one pixel in both maps; after the transform the argmaxes
        // must coincide.
        let mut input = Grid::from_fill(64, 64, 0.0f32);
        let mut force = Grid::from_fill(64, 64, 0.0f32);
        // a blob so bbox extraction finds something
        for r in 24..40 {
            for c in 24..40 {
                input.set(r, c, 500.0);
            }
        }
        input.set(30, 35, 3000.0);
        force.set(30, 35, 3000.0);
        let pair = SamplePair::new(input, force).unwrap();
        let cfg = AugmentConfig { crop: 48, ..Default::default() };
        for seed in 0..5 {
            let mut rng = SeedStream::new(seed);
            let out = augment_sample(&pair, &cfg, &mut rng);
            let argmax = |g: &Grid<f32>| {
                let mut best = (0usize, 0usize);
                let mut bv = f32::NEG_INFINITY;
                for r in 0..g.height() {
                    for c in 0..g.width() {
                        if g.get(r, c) > bv {
                            bv = g.get(r, c);
                            best = (r, c);
                        }
                    }
                }
                best
            };
            let (ri, ci) = argmax(&out.input);
            let (rf, cf) = argmax(&out.force);
            assert!(
                (ri as i64 - rf as i64).abs() <= 1 && (ci as i64 - cf as i64).abs() <= 1,
                "seed {seed}: input peak ({ri},{ci}) vs force peak ({rf},{cf})"
            );
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let mut rng = SeedStream::new(1);
        let input = Grid::from_fn(64, 64, |_, _| rng.unit_f32() * 900.0);
        let pair = SamplePair::new(input.clone(), input).unwrap();
        let cfg = AugmentConfig { crop: 48, ..Default::default() };
        let a = augment_sample(&pair, &cfg, &mut SeedStream::new(33));
        let b = augment_sample(&pair, &cfg, &mut SeedStream::new(33));
        assert_eq!(a.input.data(), b.input.data());
        assert_eq!(a.force.data(), b.force.data());
        let c = augment_sample(&pair, &cfg, &mut SeedStream::new(34));
        assert_ne!(a.input.data(), c.input.data());
    }

    #[test]
    fn augment_preserves_nonnegativity_and_shape() {
        let mut rng = SeedStream::new(2);
        let input = Grid::from_fn(96, 80, |_, _| rng.unit_f32() * 1000.0);
        let force = Grid::from_fn(96, 80, |_, _| rng.unit_f32() * 500.0);
        let pair = SamplePair::new(input, force).unwrap();
        let cfg = AugmentConfig { crop: 64, ..Default::default() };
        for seed in 0..8 {
            let out = augment_sample(&pair, &cfg, &mut SeedStream::new(seed));
            assert_eq!((out.input.height(), out.input.width()), (64, 64));
            assert!(out.input.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            assert!(out.force.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn crop_pads_small_frames_with_zeros() {
        let g = Grid::from_fill(20, 20, 7.0f32);
        let out = crop_at(&g, (10, 10), 32);
        assert_eq!(out.height(), 32);
        // 20x20 placed at offset 6
        assert_eq!(out.get(5, 16), 0.0);
        assert_eq!(out.get(6, 6), 7.0);
        assert_eq!(out.get(25, 25), 7.0);
        assert_eq!(out.get(26, 26), 0.0);
    }

    // ── salt noise ───────────────────────────────────────────────────

    #[test]
    fn salt_off_is_identity() {
        let img = Grid::from_fill(50, 50, 3.0f32);
        let cfg = AugmentConfig { salt_image_prob: 0.0, ..Default::default() };
        let out = salt_noise(&img, &cfg, &mut SeedStream::new(4));
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn salt_replaces_exact_fraction_within_range() {
        let img = Grid::from_fill(1000, 1000, -0.0f32).map(|_| 5000.0f32);
        let cfg = AugmentConfig { salt_image_prob: 1.0, ..Default::default() };
        let out = salt_noise(&img, &cfg, &mut SeedStream::new(9));
        let changed: Vec<f32> = out
            .data()
            .iter()
            .zip(img.data())
            .filter(|(a, b)| a != b)
            .map(|(&a, _)| a)
            .collect();
        assert_eq!(changed.len(), 10_000); // round(0.01 * 1e6) exactly
        assert!(changed.iter().all(|&v| (0.0..2000.0).contains(&v)));
    }

    #[test]
    fn salt_is_deterministic() {
        let img = Grid::from_fill(100, 100, 10.0f32);
        let cfg = AugmentConfig { salt_image_prob: 1.0, ..Default::default() };
        let a = salt_noise(&img, &cfg, &mut SeedStream::new(7));
        let b = salt_noise(&img, &cfg, &mut SeedStream::new(7));
        assert_eq!(a.data(), b.data());
    }

    // ── clipped log ──────────────────────────────────────────────────

    #[test]
    fn clipped_log_fixed_points() {
        let img = Grid::from_vec(1, 4, vec![0.0, 1.0, std::f32::consts::E, 2000.0]);
        let out = clipped_log(&img);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 1.0).abs() < 1e-6);
        assert!((out.data()[3] - 7.6009026).abs() < 1e-4);
    }

    #[test]
    fn config_validation() {
        let cfg = AugmentConfig { crop: 16, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(AugmentError::ConfigInvalid(_))));
        let cfg = AugmentConfig { tukey_alpha: 2.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(AugmentError::InvalidAlpha(_))));
        assert!(AugmentConfig::default().validate().is_ok());
        let _ = uniform_pair(4, 4, 1.0);
    }

    #[test]
    fn sample_pair_rejects_mismatch_and_negatives() {
        let a = Grid::from_fill(4, 4, 1.0f32);
        let b = Grid::from_fill(4, 5, 1.0f32);
        assert!(SamplePair::new(a.clone(), b).is_err());
        let neg = Grid::from_fill(4, 4, -1.0f32);
        assert!(SamplePair::new(a, neg).is_err());
    }
}
