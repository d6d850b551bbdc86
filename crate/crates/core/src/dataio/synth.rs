//! Procedural maritime scenes with exact labels.
//!
//! A frame is a sky band, a shore band sitting on the horizon (static
//! obstacle), open water below it, and a few boats (dynamic obstacles) on the
//! water. Thermal contrast and LIDAR returns do not depend on lighting; the
//! night flag only darkens and corrupts the colour image. LIDAR has no
//! returns from water or sky.
//!
//! Scene content is drawn from one RNG stream keyed by `(seed, frame_index)`
//! and night noise from a second one, so the day and night renders of a frame
//! share geometry, thermal and LIDAR exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layout::{FrameTags, Location, TimeOfDay};
use super::{FrameBundle, ModalitySet};
use crate::geometry::{lidar_input_image, CameraModel, DepthSample, SparseDepth};
use crate::raster::{Image, LabelMap, DYNAMIC_OBSTACLE, SKY, STATIC_OBSTACLE, WATER};
use crate::{Error, Result};

/// Camera height above the water surface used to place boats, meters.
const CAMERA_HEIGHT: f64 = 2.0;
const FRAME_PERIOD_US: i64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneParams {
    pub width: usize,
    pub height: usize,
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    /// Horizon row as a fraction of image height.
    pub horizon_min: f64,
    pub horizon_max: f64,
    pub night: bool,
    /// RGB attenuation at night, in `(0, 1]`.
    pub alpha: f64,
    /// Std-dev of additive RGB noise at night.
    pub sigma: f64,
    pub seed: u64,
    /// Per-pixel thermal sensor noise (std-dev), lighting independent.
    pub thermal_noise: f64,
    pub lidar_normalizer: f64,
    pub location: Location,
    /// Probability that a frame carries sun glare and is tagged difficult.
    pub difficult_prob: f64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        SyntheticSceneParams {
            width: 64,
            height: 64,
            obstacles_min: 1,
            obstacles_max: 3,
            horizon_min: 0.35,
            horizon_max: 0.55,
            night: false,
            alpha: 0.05,
            sigma: 0.03,
            seed: 0,
            thermal_noise: 0.04,
            lidar_normalizer: super::DEFAULT_LIDAR_NORMALIZER,
            location: Location::River,
            difficult_prob: 0.0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic scene: {m}")));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.sigma >= 0.0) || !(self.thermal_noise >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if self.width < 16 || self.height < 16 {
            return bad("image must be at least 16x16");
        }
        if !(0.0 < self.horizon_min && self.horizon_min <= self.horizon_max && self.horizon_max < 0.8) {
            return bad("horizon range must satisfy 0 < min <= max < 0.8");
        }
        if self.obstacles_min > self.obstacles_max {
            return bad("obstacle count range is empty");
        }
        if !(self.lidar_normalizer > 0.0) {
            return bad("lidar normalizer must be > 0");
        }
        if !(0.0..=1.0).contains(&self.difficult_prob) {
            return bad("difficult_prob must be in [0, 1]");
        }
        Ok(())
    }

    /// Pinhole camera the scene is rendered with.
    pub fn camera(&self) -> CameraModel {
        CameraModel::new(
            self.width as f64,
            self.width as f64,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
        .expect("valid by construction")
    }
}

/// A rendered frame plus the data needed to write it to disk.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub bundle: FrameBundle,
    /// LIDAR returns on the image plane (pixel centres, meters).
    pub lidar: SparseDepth,
    pub camera: CameraModel,
    pub tags: FrameTags,
}

struct Boat {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    cabin_left: f64,
    cabin_right: f64,
    cabin_top: f64,
    distance: f64,
    color: [f64; 3],
    heat: f64,
}

impl Boat {
    fn covers(&self, x: f64, y: f64) -> Option<bool> {
        let hull = x >= self.left && x <= self.right && y >= self.top && y <= self.bottom;
        let cabin = x >= self.cabin_left && x <= self.cabin_right && y >= self.cabin_top && y < self.top;
        (hull || cabin).then_some(cabin)
    }
}

fn mix_seed(seed: u64, index: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn quantize16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

pub fn synthesize_scene(params: &SyntheticSceneParams, frame_index: u64) -> Result<SyntheticScene> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let cam = params.camera();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, frame_index, 1));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let horizon = (rng.random_range(params.horizon_min..=params.horizon_max) * h as f64).round();
    let shore_base = rng.random_range(0.04..0.14) * h as f64;
    let shore_amp = rng.random_range(0.0..0.08) * h as f64;
    let shore_freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / w as f64;
    let shore_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let shore_top: Vec<f64> = (0..w)
        .map(|x| {
            let hgt = (shore_base + shore_amp * (shore_freq * x as f64 + shore_phase).sin()).max(0.0);
            horizon - hgt.round()
        })
        .collect();
    let shore_distance = rng.random_range(45.0..60.0);

    let n_boats = rng.random_range(params.obstacles_min..=params.obstacles_max);
    let palette = [[0.92, 0.92, 0.9], [0.8, 0.15, 0.1], [0.9, 0.8, 0.2], [0.95, 0.5, 0.1], [0.2, 0.25, 0.3]];
    let mut boats: Vec<Boat> = (0..n_boats)
        .map(|_| {
            let lo = horizon + 3.0;
            let hi = (h as f64 - 2.0).max(lo + 1.0);
            let bottom = rng.random_range(lo..hi).round();
            let gap = bottom - horizon;
            let hull_h = (gap * rng.random_range(0.25..0.45)).max(2.0).round();
            let hull_w = (hull_h * rng.random_range(1.8..3.5)).round();
            let cx = rng.random_range(0.0..w as f64);
            let cabin_w = hull_w * rng.random_range(0.35..0.6);
            let cabin_h = (hull_h * rng.random_range(0.5..0.9)).max(1.0).round();
            let cabin_off = rng.random_range(-0.2..0.2) * hull_w;
            let top = bottom - hull_h;
            Boat {
                left: cx - hull_w / 2.0,
                right: cx + hull_w / 2.0,
                top,
                bottom,
                cabin_left: cx + cabin_off - cabin_w / 2.0,
                cabin_right: cx + cabin_off + cabin_w / 2.0,
                cabin_top: top - cabin_h,
                distance: CAMERA_HEIGHT * cam.fy / gap,
                color: palette[rng.random_range(0..palette.len())],
                heat: rng.random_range(0.78..0.92),
            }
        })
        .collect();
    // Far boats first so nearer ones occlude them.
    boats.sort_by(|a, b| a.bottom.total_cmp(&b.bottom));

    let sky_tint = rng.random_range(-0.05..0.05);
    let shore_color = [
        rng.random_range(0.2..0.4),
        rng.random_range(0.35..0.55),
        rng.random_range(0.1..0.25),
    ];
    let water_tint = rng.random_range(-0.05..0.05);
    let t_sky = 0.15 + rng.random_range(-0.03..0.03);
    let t_water = 0.35 + rng.random_range(-0.03..0.03);
    let t_shore = 0.55 + rng.random_range(-0.05..0.05);
    let beam_phase = rng.random_range(0..2usize);
    let glare = rng.random::<f64>() < params.difficult_prob;
    let glare_center = (rng.random_range(0.0..w as f64), horizon + rng.random_range(0.0..0.3) * h as f64);
    let glare_radius = rng.random_range(0.15..0.3) * w as f64;

    let mut labels = vec![0u8; w * h];
    let mut rgb = Image::zeros(3, h, w);
    let mut thermal = Image::zeros(1, h, w);
    let mut samples = Vec::new();
    let n = w * h;

    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let i = y * w + x;
            let rgb_noise = 0.02 * unit.sample(&mut rng);
            let tex = unit.sample(&mut rng);
            let t_noise = params.thermal_noise * unit.sample(&mut rng);
            let lidar_keep = rng.random::<f64>() >= 0.1;

            let boat = boats.iter().rev().find_map(|b| b.covers(xf, yf).map(|cabin| (b, cabin)));
            let (class, color, heat, distance) = if let Some((b, cabin)) = boat {
                let shade = if cabin { 0.8 } else { 1.0 };
                let c = b.color.map(|v| v * shade + 0.03 * tex);
                let heat = if cabin { b.heat + 0.05 } else { b.heat };
                (DYNAMIC_OBSTACLE, c, heat, Some(b.distance))
            } else if yf >= horizon {
                let depth = (yf - horizon) / (h as f64 - horizon);
                let mut c = [0.1 + water_tint, 0.28 + 0.1 * depth, 0.45 + water_tint + 0.1 * depth];
                if tex > 2.3 {
                    c = [0.85, 0.88, 0.9];
                }
                (WATER, c.map(|v| v + 0.02 * tex), t_water, None)
            } else if yf >= shore_top[x] {
                let c = shore_color.map(|v| v + 0.08 * tex);
                (STATIC_OBSTACLE, c, t_shore + 0.02 * tex, Some(shore_distance + 0.5 * tex))
            } else {
                let up = yf / horizon.max(1.0);
                let c = [0.45 + 0.3 * up + sky_tint, 0.65 + 0.2 * up + sky_tint, 0.95];
                (SKY, c, t_sky, None)
            };
            labels[i] = class;
            let mut color = color;
            if glare {
                let r = ((xf - glare_center.0).powi(2) + (yf - glare_center.1).powi(2)).sqrt();
                let g = (1.0 - r / glare_radius).max(0.0);
                color = color.map(|v| v + (1.0 - v) * g.sqrt());
            }
            for c in 0..3 {
                rgb.data[c * n + i] = (color[c] + rgb_noise).clamp(0.0, 1.0);
            }
            thermal.data[i] = quantize16(heat + t_noise);
            if let Some(d) = distance {
                if y % 2 == beam_phase && lidar_keep {
                    // f32-representable so the value survives point-file storage.
                    let d = (d as f32) as f64;
                    samples.push(DepthSample { u: xf, v: yf, d });
                }
            }
        }
    }

    if params.night {
        let mut night_rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, frame_index, 2));
        let noise = Normal::new(0.0, params.sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in rgb.data.iter_mut() {
            *v = (params.alpha * *v + noise.sample(&mut night_rng)).clamp(0.0, 1.0);
        }
    }

    let sparse = SparseDepth {
        width: w,
        height: h,
        samples,
    };
    let lidar = lidar_input_image(&sparse, &cam, params.lidar_normalizer)?;
    let bundle = FrameBundle {
        rgb,
        thermal,
        lidar,
        labels: LabelMap {
            width: w,
            height: h,
            ids: labels,
        },
        available: ModalitySet::ALL,
        timestamp: frame_index as i64 * FRAME_PERIOD_US,
    };
    Ok(SyntheticScene {
        bundle,
        lidar: sparse,
        camera: cam,
        tags: FrameTags {
            time: if params.night { TimeOfDay::Night } else { TimeOfDay::Day },
            difficult: glare,
            location: params.location,
        },
    })
}

/// The frame bundle of [`synthesize_scene`].
pub fn synthesize_frame(params: &SyntheticSceneParams, frame_index: u64) -> Result<FrameBundle> {
    Ok(synthesize_scene(params, frame_index)?.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{check_unit_range, NUM_CLASSES};

    #[test]
    fn night_only_touches_rgb() {
        let day = SyntheticSceneParams { seed: 4, ..Default::default() };
        let night = SyntheticSceneParams { night: true, alpha: 1.0, sigma: 0.0, ..day.clone() };
        for idx in 0..5 {
            let a = synthesize_frame(&day, idx).unwrap();
            let b = synthesize_frame(&night, idx).unwrap();
            assert_eq!(a.thermal, b.thermal);
            assert_eq!(a.lidar, b.lidar);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.rgb, b.rgb);
        }
        let dark = SyntheticSceneParams { night: true, ..day.clone() };
        let a = synthesize_frame(&day, 0).unwrap();
        let b = synthesize_frame(&dark, 0).unwrap();
        assert_eq!(a.thermal, b.thermal);
        let mean = |img: &Image| img.data.iter().sum::<f64>() / img.data.len() as f64;
        assert!(mean(&b.rgb) < 0.1 * mean(&a.rgb) + 0.05);
    }

    #[test]
    fn lidar_is_zero_on_water_and_sky() {
        let p = SyntheticSceneParams::default();
        for idx in 0..10 {
            let f = synthesize_frame(&p, idx).unwrap();
            for (i, &id) in f.labels.ids.iter().enumerate() {
                if id == WATER || id == SKY {
                    assert_eq!(f.lidar.data[i], 0.0);
                }
            }
            assert!(f.lidar.data.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn pure_function_of_params_and_index() {
        let p = SyntheticSceneParams { seed: 9, night: true, ..Default::default() };
        assert_eq!(synthesize_frame(&p, 3).unwrap(), synthesize_frame(&p, 3).unwrap());
        assert_ne!(synthesize_frame(&p, 3).unwrap(), synthesize_frame(&p, 4).unwrap());
    }

    #[test]
    fn all_classes_present_over_many_frames() {
        let p = SyntheticSceneParams { seed: 1, ..Default::default() };
        for idx in 0..100 {
            let f = synthesize_frame(&p, idx).unwrap();
            f.validate().unwrap();
            assert!(check_unit_range(&f.rgb));
            let hist = f.labels.histogram();
            assert!((0..NUM_CLASSES).all(|k| hist[k] > 0), "frame {idx}: {hist:?}");
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = SyntheticSceneParams { alpha: 0.0, ..Default::default() };
        assert!(synthesize_frame(&p, 0).is_err());
        let p = SyntheticSceneParams { sigma: -1.0, ..Default::default() };
        assert!(synthesize_frame(&p, 0).is_err());
    }

    #[test]
    fn glare_marks_difficult() {
        let p = SyntheticSceneParams { difficult_prob: 1.0, ..Default::default() };
        assert!(synthesize_scene(&p, 0).unwrap().tags.difficult);
        let p = SyntheticSceneParams::default();
        assert!(!synthesize_scene(&p, 0).unwrap().tags.difficult);
    }
}
