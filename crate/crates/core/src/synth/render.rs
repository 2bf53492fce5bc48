use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageSample, SpotPattern, SynthError};
use crate::rng::Rng;

pub const BACKGROUND: f64 = 45.0;
pub const BODY: f64 = 215.0;
pub const SPOT_FLOOR: f64 = 25.0;
const SUPERSAMPLE: usize = 3;

/// 3×3 projective transform acting on pixel coordinates (x right, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Homography([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn scale(z: f64) -> Self {
        Homography([[z, 0.0, 0.0], [0.0, z, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn projective(px: f64, py: f64) -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    }

    /// Rotation by `theta` about the pixel point (cx, cy).
    pub fn rotation_about(theta: f64, cx: f64, cy: f64) -> Self {
        Self::translation(cx, cy)
            .then_after(&Self::rotation(theta))
            .then_after(&Self::translation(-cx, -cy))
    }

    /// Matrix product `self · other` (apply `other` first).
    pub fn then_after(&self, other: &Homography) -> Homography {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let d = self.det();
        if d.abs() <= 1e-6 || !d.is_finite() {
            return None;
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let inv = [
            [cof(1, 2, 1, 2) / d, -cof(0, 2, 1, 2) / d, cof(0, 1, 1, 2) / d],
            [-cof(1, 2, 0, 2) / d, cof(0, 2, 0, 2) / d, -cof(0, 1, 0, 2) / d],
            [cof(1, 2, 0, 1) / d, -cof(0, 2, 0, 1) / d, cof(0, 1, 0, 1) / d],
        ];
        Some(Homography(inv))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }
}

/// A filled disk painted over the image, in output pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Maps canonical pixel coordinates to output pixel coordinates.
    pub warp: Homography,
    pub brightness_scale: f64,
    /// Additive Gaussian noise σ on the [0, 255] scale.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub occluders: Vec<Occluder>,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl RenderParams {
    pub fn canonical(image_size: (usize, usize)) -> Self {
        Self {
            image_size,
            warp: Homography::IDENTITY,
            brightness_scale: 1.0,
            noise_sigma: 0.0,
            noise_seed: 0,
            occluders: Vec::new(),
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn validate(&self, silhouette_area_px: f64) -> Result<(), SynthError> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(SynthError::Params("image_size must be positive".into()));
        }
        if self.warp.det().abs() <= 1e-6 {
            return Err(SynthError::Params(format!(
                "warp is not invertible (|det| = {:e})",
                self.warp.det().abs()
            )));
        }
        if !(0.5..=1.5).contains(&self.brightness_scale) {
            return Err(SynthError::Params(format!(
                "brightness_scale {} outside [0.5, 1.5]",
                self.brightness_scale
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::Params("noise_sigma must be finite and >= 0".into()));
        }
        let covered: f64 = self
            .occluders
            .iter()
            .map(|o| std::f64::consts::PI * o.radius * o.radius)
            .sum();
        if covered >= 0.2 * silhouette_area_px {
            return Err(SynthError::Params(format!(
                "occluders cover {covered:.1} px², at least 20% of the silhouette ({silhouette_area_px:.1} px²)"
            )));
        }
        Ok(())
    }
}

/// Geometric/photometric augmentation strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationLevel {
    /// Rotations up to ±90°, flips, shifts up to 10 px, zoom up to 10%,
    /// mild projective tilt.
    #[default]
    Extensive,
    /// Rotations up to ±10°, nothing else geometric.
    Small,
}

pub const EXTENSIVE_MAX_ROTATION_DEG: f64 = 90.0;
pub const SMALL_MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHIFT_PX: f64 = 10.0;
pub const MAX_ZOOM: f64 = 1.1;
pub const MAX_PROJECTIVE: f64 = 0.0015;

/// Sampled geometric components, kept alongside the composed warp so tests
/// and logs can inspect them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpComponents {
    pub rotation: f64,
    pub shift: (f64, f64),
    pub zoom: f64,
    pub projective: (f64, f64),
}

pub fn compose_warp(image_size: (usize, usize), c: &WarpComponents) -> Homography {
    let (h, w) = image_size;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Homography::translation(cx + c.shift.0, cy + c.shift.1)
        .then_after(&Homography::projective(c.projective.0, c.projective.1))
        .then_after(&Homography::rotation(c.rotation))
        .then_after(&Homography::scale(c.zoom))
        .then_after(&Homography::translation(-cx, -cy))
}

/// Draws augmentation parameters; returns the composed params and the raw
/// geometric components.
pub fn sample_view_components(
    rng: &mut Rng,
    level: AugmentationLevel,
    image_size: (usize, usize),
) -> (RenderParams, WarpComponents) {
    let (h, w) = image_size;
    let comps = match level {
        AugmentationLevel::Extensive => {
            let max = EXTENSIVE_MAX_ROTATION_DEG.to_radians();
            WarpComponents {
                rotation: rng.random_range(-max..=max),
                shift: (
                    rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                    rng.random_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                ),
                zoom: rng.random_range(1.0..=MAX_ZOOM),
                projective: (
                    rng.random_range(-MAX_PROJECTIVE..=MAX_PROJECTIVE),
                    rng.random_range(-MAX_PROJECTIVE..=MAX_PROJECTIVE),
                ),
            }
        }
        AugmentationLevel::Small => {
            let max = SMALL_MAX_ROTATION_DEG.to_radians();
            WarpComponents {
                rotation: rng.random_range(-max..=max),
                shift: (0.0, 0.0),
                zoom: 1.0,
                projective: (0.0, 0.0),
            }
        }
    };
    let (flip_h, flip_v) = match level {
        AugmentationLevel::Extensive => (rng.random_bool(0.5), rng.random_bool(0.5)),
        AugmentationLevel::Small => (false, false),
    };
    let brightness_scale = rng.random_range(0.75..=1.25);
    let noise_sigma = rng.random_range(0.0..=5.0);
    let noise_seed = rng.random();
    let n_occ = rng.random_range(0..=2usize);
    let scale = h.min(w) as f64 / 64.0;
    let occluders = (0..n_occ)
        .map(|_| Occluder {
            center: (
                w as f64 / 2.0 + rng.random_range(-0.3..=0.3) * w as f64,
                h as f64 / 2.0 + rng.random_range(-0.25..=0.25) * h as f64,
            ),
            radius: rng.random_range(1.5..=3.5) * scale,
            intensity: rng.random_range(20.0..=235.0),
        })
        .collect();
    let params = RenderParams {
        image_size,
        warp: compose_warp(image_size, &comps),
        brightness_scale,
        noise_sigma,
        noise_seed,
        occluders,
        flip_h,
        flip_v,
    };
    (params, comps)
}

pub fn sample_view_params(rng: &mut Rng, level: AugmentationLevel, image_size: (usize, usize)) -> RenderParams {
    sample_view_components(rng, level, image_size).0
}

fn shade(pattern: &SpotPattern, u: f64, v: f64) -> Option<f64> {
    if !pattern.silhouette.contains(u, v) {
        return None;
    }
    let dark = pattern
        .spots
        .iter()
        .filter(|s| s.contains(u, v))
        .map(|s| s.intensity)
        .fold(0.0, f64::max);
    Some(BODY - dark * (BODY - SPOT_FLOOR))
}

/// Rasterizes `pattern` through `params`.
pub fn render_view(pattern: &SpotPattern, params: &RenderParams, image_id: &str) -> Result<ImageSample, SynthError> {
    let (h, w) = params.image_size;
    let sil_area_px = pattern.silhouette.area() * (h * w) as f64;
    params.validate(sil_area_px)?;
    let inv = params
        .warp
        .inverse()
        .ok_or_else(|| SynthError::Params("warp is not invertible".into()))?;
    let mut values = vec![0.0f64; h * w];
    let mut inside = 0usize;
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let (cx, cy) = inv.apply(px, py);
                    match shade(pattern, cx / w as f64, cy / h as f64) {
                        Some(v) => {
                            inside += 1;
                            acc += v;
                        }
                        None => acc += BACKGROUND,
                    }
                }
            }
            values[y * w + x] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    if inside == 0 {
        return Err(SynthError::Degenerate {
            image_id: image_id.to_string(),
        });
    }
    Ok(finish(values, params, &pattern.individual_id, image_id))
}

/// Resamples an existing image through `params` (bilinear, border-mean fill)
/// and applies the same photometric stages as rendering.
pub fn augment_image(src: &ImageSample, params: &RenderParams) -> Result<ImageSample, SynthError> {
    let (h, w) = (src.height, src.width);
    if params.image_size != (h, w) {
        return Err(SynthError::Params(format!(
            "augmentation size {:?} differs from image size {:?}",
            params.image_size,
            (h, w)
        )));
    }
    params.validate(f64::INFINITY)?;
    let inv = params
        .warp
        .inverse()
        .ok_or_else(|| SynthError::Params("warp is not invertible".into()))?;
    let px = |x: usize, y: usize| src.pixels[y * w + x] as f64;
    let mut border = 0.0;
    for x in 0..w {
        border += px(x, 0) + px(x, h - 1);
    }
    for y in 0..h {
        border += px(0, y) + px(w - 1, y);
    }
    let fill = border / (2 * (w + h)) as f64;
    let sample = |xf: f64, yf: f64| -> f64 {
        // pixel centres sit at integer + 0.5
        let gx = xf - 0.5;
        let gy = yf - 0.5;
        if gx < -0.5 || gy < -0.5 || gx > w as f64 - 0.5 || gy > h as f64 - 0.5 {
            return fill;
        }
        let x0 = gx.floor().clamp(0.0, (w - 1) as f64);
        let y0 = gy.floor().clamp(0.0, (h - 1) as f64);
        let x1 = (x0 + 1.0).min((w - 1) as f64);
        let y1 = (y0 + 1.0).min((h - 1) as f64);
        let fx = (gx - x0).clamp(0.0, 1.0);
        let fy = (gy - y0).clamp(0.0, 1.0);
        let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
        let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
        let bot = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut values = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            values[y * w + x] = sample(sx, sy);
        }
    }
    Ok(finish(values, params, &src.individual_id, &src.image_id))
}

fn finish(mut values: Vec<f64>, params: &RenderParams, individual_id: &str, image_id: &str) -> ImageSample {
    let (h, w) = params.image_size;
    for v in values.iter_mut() {
        *v *= params.brightness_scale;
    }
    for occ in &params.occluders {
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - occ.center.0;
                let dy = y as f64 + 0.5 - occ.center.1;
                if dx * dx + dy * dy <= occ.radius * occ.radius {
                    values[y * w + x] = occ.intensity;
                }
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = Rng::seed_from_u64(params.noise_seed);
        let normal = Normal::new(0.0, params.noise_sigma).expect("sigma validated");
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut pixels: Vec<u8> = values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    if params.flip_h {
        for row in pixels.chunks_mut(w) {
            row.reverse();
        }
    }
    if params.flip_v {
        let rows: Vec<Vec<u8>> = pixels.chunks(w).rev().map(|r| r.to_vec()).collect();
        pixels = rows.concat();
    }
    ImageSample {
        individual_id: individual_id.to_string(),
        image_id: image_id.to_string(),
        height: h,
        width: w,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::synth::{generate_individual, GenerationConfig};

    fn pattern() -> SpotPattern {
        generate_individual(3, "ind", &GenerationConfig::default(), &[]).unwrap()
    }

    #[test]
    fn canonical_render_is_deterministic() {
        let p = pattern();
        let params = RenderParams::canonical((64, 64));
        let a = render_view(&p, &params, "v").unwrap();
        let b = render_view(&p, &params, "v").unwrap();
        assert_eq!(a.pixels, b.pixels);
        // spots are darker than the body
        assert!(a.pixels.iter().any(|&v| v < 150));
        assert!(a.pixels.iter().any(|&v| v > 200));
    }

    #[test]
    fn horizontal_flip_reverses_columns() {
        let p = pattern();
        let base = render_view(&p, &RenderParams::canonical((64, 48)), "v").unwrap();
        let flipped = render_view(
            &p,
            &RenderParams {
                flip_h: true,
                ..RenderParams::canonical((64, 48))
            },
            "v",
        )
        .unwrap();
        for y in 0..64 {
            for x in 0..48 {
                assert_eq!(flipped.pixels[y * 48 + x], base.pixels[y * 48 + 47 - x]);
            }
        }
    }

    #[test]
    fn rotation_then_inverse_matches_identity() {
        let p = pattern();
        let theta = 0.3;
        let warp = Homography::rotation_about(-theta, 32.0, 32.0).then_after(&Homography::rotation_about(theta, 32.0, 32.0));
        let composed = render_view(
            &p,
            &RenderParams {
                warp,
                ..RenderParams::canonical((64, 64))
            },
            "v",
        )
        .unwrap();
        let base = render_view(&p, &RenderParams::canonical((64, 64)), "v").unwrap();
        assert_eq!(composed.pixels, base.pixels);
    }

    #[test]
    fn singular_warp_rejected() {
        let p = pattern();
        let params = RenderParams {
            warp: Homography([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
            ..RenderParams::canonical((64, 64))
        };
        assert!(matches!(render_view(&p, &params, "v"), Err(SynthError::Params(_))));
    }

    #[test]
    fn silhouette_outside_frame_is_degenerate() {
        let p = pattern();
        let params = RenderParams {
            warp: Homography::translation(500.0, 500.0),
            ..RenderParams::canonical((64, 64))
        };
        assert!(matches!(render_view(&p, &params, "v"), Err(SynthError::Degenerate { .. })));
    }

    #[test]
    fn oversized_occluders_rejected() {
        let p = pattern();
        let params = RenderParams {
            occluders: vec![Occluder {
                center: (32.0, 32.0),
                radius: 20.0,
                intensity: 0.0,
            }],
            ..RenderParams::canonical((64, 64))
        };
        assert!(render_view(&p, &params, "v").is_err());
    }

    #[test]
    fn small_level_bounds() {
        let mut r = rng::stream(5, rng::Stream::Augment, 0);
        let max = SMALL_MAX_ROTATION_DEG.to_radians();
        for _ in 0..1000 {
            let (p, c) = sample_view_components(&mut r, AugmentationLevel::Small, (64, 64));
            assert!(c.rotation.abs() <= max);
            assert!(!p.flip_h && !p.flip_v);
            assert_eq!(c.shift, (0.0, 0.0));
            assert_eq!(c.zoom, 1.0);
            assert_eq!(c.projective, (0.0, 0.0));
            // corner displacement bounded by that of a 10° rotation about the centre
            let bound = 2.0 * (32.0f64 * 32.0 * 2.0).sqrt() * (max / 2.0).sin();
            for (x, y) in [(0.0, 0.0), (64.0, 0.0), (0.0, 64.0), (64.0, 64.0)] {
                let (u, v) = p.warp.apply(x, y);
                assert!(((u - x).powi(2) + (v - y).powi(2)).sqrt() <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn extensive_level_bounds() {
        let mut r = rng::stream(6, rng::Stream::Augment, 0);
        let max = EXTENSIVE_MAX_ROTATION_DEG.to_radians();
        let mut flips = 0;
        for _ in 0..1000 {
            let (p, c) = sample_view_components(&mut r, AugmentationLevel::Extensive, (64, 64));
            assert!(c.rotation.abs() <= max);
            assert!(c.shift.0.abs() <= MAX_SHIFT_PX && c.shift.1.abs() <= MAX_SHIFT_PX);
            assert!((1.0..=MAX_ZOOM).contains(&c.zoom));
            // image centre moves exactly by the sampled shift
            let (u, v) = p.warp.apply(32.0, 32.0);
            assert!((u - 32.0 - c.shift.0).abs() < 1e-9 && (v - 32.0 - c.shift.1).abs() < 1e-9);
            assert!((0.5..=1.5).contains(&p.brightness_scale));
            flips += p.flip_h as usize + p.flip_v as usize;
        }
        assert!(flips > 0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut a = rng::stream(9, rng::Stream::Augment, 0);
        let mut b = rng::stream(9, rng::Stream::Augment, 0);
        for _ in 0..50 {
            assert_eq!(
                sample_view_params(&mut a, AugmentationLevel::Extensive, (64, 64)),
                sample_view_params(&mut b, AugmentationLevel::Extensive, (64, 64))
            );
        }
    }

    #[test]
    fn identity_augmentation_preserves_pixels() {
        let p = pattern();
        let img = render_view(&p, &RenderParams::canonical((64, 64)), "v").unwrap();
        let out = augment_image(&img, &RenderParams::canonical((64, 64))).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn canonical_centroid_matches_spot_centroid() {
        // Label integrity: the dark mass of a canonical render sits where the
        // pattern's spots are.
        let cfg = GenerationConfig {
            spot_count: (4, 4),
            ..Default::default()
        };
        for seed in 0..10 {
            let p = generate_individual(seed, "x", &cfg, &[]).unwrap();
            let img = render_view(&p, &RenderParams::canonical((128, 128)), "v").unwrap();
            // pixels whose whole footprint lies inside the body
            let interior = |x: usize, y: usize| {
                [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                    .iter()
                    .all(|(dx, dy)| p.silhouette.contains((x as f64 + dx) / 128.0, (y as f64 + dy) / 128.0))
            };
            let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
            for y in 0..128 {
                for x in 0..128 {
                    if !interior(x, y) {
                        continue;
                    }
                    let u = (x as f64 + 0.5) / 128.0;
                    let v = (y as f64 + 0.5) / 128.0;
                    let d = BODY - img.pixels[y * 128 + x] as f64;
                    mx += d * u;
                    my += d * v;
                    mass += d;
                }
            }
            // expected centroid by dense sampling of the analytic spot shapes
            let (mut ex, mut ey, mut em) = (0.0, 0.0, 0.0);
            let n = 1024;
            for j in 0..n {
                for i in 0..n {
                    if !interior(i * 128 / n, j * 128 / n) {
                        continue;
                    }
                    let u = (i as f64 + 0.5) / n as f64;
                    let v = (j as f64 + 0.5) / n as f64;
                    let d = BODY - shade(&p, u, v).unwrap();
                    ex += d * u;
                    ey += d * v;
                    em += d;
                }
            }
            assert!((mx / mass - ex / em).abs() < 0.01, "seed {seed}");
            assert!((my / mass - ey / em).abs() < 0.01, "seed {seed}");
        }
    }
}
