//! Training-time augmentation and evaluation-time normalization of scans.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scan::{Class, PointScan};

/// Global geometric augmentations applied to every training scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalAugment {
    pub rotation: bool,
    pub rotation_deg: f64,
    pub flip: bool,
    pub flip_prob: f64,
    pub scale: bool,
    pub scale_range: [f64; 2],
    pub jitter: bool,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for GlobalAugment {
    fn default() -> Self {
        Self {
            rotation: true,
            rotation_deg: 180.0,
            flip: true,
            flip_prob: 0.5,
            scale: true,
            scale_range: [0.95, 1.05],
            jitter: true,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
        }
    }
}

impl GlobalAugment {
    pub fn disabled() -> Self {
        Self {
            rotation: false,
            flip: false,
            scale: false,
            jitter: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub dropout_prob: f64,
    /// Drop individual points' values instead of the whole channel.
    pub dropout_per_point: bool,
    pub eq_low_range: [f64; 2],
    pub eq_high_range: [f64; 2],
    pub eval_low: f64,
    pub eval_high: f64,
    pub yaw_limit_deg: f64,
    pub global_aug: GlobalAugment,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            dropout_prob: 0.2,
            dropout_per_point: false,
            eq_low_range: [0.0, 5.0],
            eq_high_range: [92.0, 97.0],
            eval_low: 2.0,
            eval_high: 95.0,
            yaw_limit_deg: 1.5,
            global_aug: GlobalAugment::default(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout_prob {} outside [0, 1]", self.dropout_prob)));
        }
        let [l0, l1] = self.eq_low_range;
        let [h0, h1] = self.eq_high_range;
        if !(0.0 <= l0 && l0 <= l1 && l1 < h0 && h0 <= h1 && h1 <= 100.0) {
            return Err(Error::Config(format!(
                "equalization ranges {:?} / {:?} must satisfy 0 <= low < high <= 100",
                self.eq_low_range, self.eq_high_range
            )));
        }
        if !(0.0 <= self.eval_low && self.eval_low < self.eval_high && self.eval_high <= 100.0) {
            return Err(Error::Config("eval cutoffs must satisfy 0 <= low < high <= 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Intensity,
    Ambient,
}

/// Nearest-rank percentile of a sorted slice.
fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = (pct / 100.0 * n as f64).ceil() as i64 - 1;
    sorted[rank.clamp(0, n as i64 - 1) as usize]
}

/// Percentile-clipped empirical-CDF remapping into `[0, 1]`.
///
/// Values at or below the `low_pct` percentile map to 0 and values at or
/// above the `high_pct` percentile map to 1; the rest map to
/// `(F(v) − low_pct) / (high_pct − low_pct)` where `F(v)` is the percentage
/// of values `≤ v`. The result depends only on ranks, and a constant input
/// maps to all zeros.
pub fn histogram_equalize(values: &[f64], low_pct: f64, high_pct: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Precondition("histogram_equalize needs at least one value".into()));
    }
    if !(0.0 <= low_pct && low_pct < high_pct && high_pct <= 100.0) {
        return Err(Error::Precondition(format!(
            "cutoffs ({low_pct}, {high_pct}) must satisfy 0 <= low < high <= 100"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, low_pct);
    let hi = nearest_rank(&sorted, high_pct);
    let n = sorted.len() as f64;
    Ok(values
        .iter()
        .map(|&v| {
            if v <= lo {
                0.0
            } else if v >= hi {
                1.0
            } else {
                let at_or_below = sorted.partition_point(|&s| s <= v) as f64;
                ((100.0 * at_or_below / n - low_pct) / (high_pct - low_pct)).clamp(0.0, 1.0)
            }
        })
        .collect())
}

pub fn sample_eq_cutoffs(cfg: &AugmentConfig, rng: &mut Rng) -> (f64, f64) {
    let [l0, l1] = cfg.eq_low_range;
    let [h0, h1] = cfg.eq_high_range;
    let low = l0 + (l1 - l0) * rng.random::<f64>();
    let high = h0 + (h1 - h0) * rng.random::<f64>();
    (low, high)
}

fn channel_mut(scan: &mut PointScan, channel: Channel) -> Option<&mut Vec<f64>> {
    match channel {
        Channel::Intensity => Some(&mut scan.intensity),
        Channel::Ambient => scan.ambient.as_mut(),
    }
}

/// Zeroes a channel with probability `prob`, either as a whole or per point.
pub fn channel_dropout(mut scan: PointScan, channel: Channel, prob: f64, per_point: bool, rng: &mut Rng) -> PointScan {
    if per_point {
        let draws: Vec<bool> = (0..scan.len()).map(|_| rng.random::<f64>() < prob).collect();
        if let Some(ch) = channel_mut(&mut scan, channel) {
            for (v, drop) in ch.iter_mut().zip(draws) {
                if drop {
                    *v = 0.0;
                }
            }
        }
    } else {
        let drop = rng.random::<f64>() < prob;
        if let Some(ch) = channel_mut(&mut scan, channel).filter(|_| drop) {
            ch.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    scan
}

fn rotate_z(p: [f64; 3], (s, c): (f64, f64)) -> [f64; 3] {
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Rotates road and ground points about the z-axis by `theta` radians.
pub fn road_ground_yaw_by(mut scan: PointScan, theta: f64) -> PointScan {
    let sc = theta.sin_cos();
    let road = Class::Road.id();
    let ground = Class::Ground.id();
    for (p, &l) in scan.xyz.iter_mut().zip(&scan.labels) {
        if l == road || l == ground {
            *p = rotate_z(*p, sc);
        }
    }
    scan
}

/// One yaw angle per scan, uniform in `±limit_deg`, applied to road/ground points only.
pub fn road_ground_yaw(scan: PointScan, limit_deg: f64, rng: &mut Rng) -> Result<PointScan> {
    if !scan.is_labeled() {
        return Err(Error::Precondition("road/ground yaw needs ground-truth labels".into()));
    }
    let theta = (rng.random::<f64>() * 2.0 - 1.0) * limit_deg.to_radians();
    Ok(road_ground_yaw_by(scan, theta))
}

pub fn rotate_scan(mut scan: PointScan, theta: f64) -> PointScan {
    let sc = theta.sin_cos();
    scan.xyz.iter_mut().for_each(|p| *p = rotate_z(*p, sc));
    scan
}

/// Mirror across the x-axis (`y → −y`).
pub fn flip_x(mut scan: PointScan) -> PointScan {
    scan.xyz.iter_mut().for_each(|p| p[1] = -p[1]);
    scan
}

/// Mirror across the y-axis (`x → −x`).
pub fn flip_y(mut scan: PointScan) -> PointScan {
    scan.xyz.iter_mut().for_each(|p| p[0] = -p[0]);
    scan
}

pub fn scale_scan(mut scan: PointScan, factor: f64) -> PointScan {
    scan.xyz.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v *= factor));
    scan
}

pub fn global_augment(mut scan: PointScan, cfg: &GlobalAugment, rng: &mut Rng) -> PointScan {
    if cfg.rotation {
        let theta = (rng.random::<f64>() * 2.0 - 1.0) * cfg.rotation_deg.to_radians();
        scan = rotate_scan(scan, theta);
    }
    if cfg.flip {
        if rng.random::<f64>() < cfg.flip_prob {
            scan = flip_x(scan);
        }
        if rng.random::<f64>() < cfg.flip_prob {
            scan = flip_y(scan);
        }
    }
    if cfg.scale {
        let [a, b] = cfg.scale_range;
        scan = scale_scan(scan, a + (b - a) * rng.random::<f64>());
    }
    if cfg.jitter && cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
        for p in scan.xyz.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(rng).clamp(-cfg.jitter_clip, cfg.jitter_clip);
            }
        }
    }
    scan
}

fn equalize_channels(mut scan: PointScan, low: f64, high: f64) -> Result<PointScan> {
    scan.intensity = histogram_equalize(&scan.intensity, low, high)?;
    if let Some(a) = &scan.ambient {
        scan.ambient = Some(histogram_equalize(a, low, high)?);
    }
    Ok(scan)
}

/// Deterministic normalization used for validation and inference.
pub fn eval_normalize(scan: PointScan, cfg: &AugmentConfig) -> Result<PointScan> {
    equalize_channels(scan, cfg.eval_low, cfg.eval_high)
}

/// Full training pipeline: global geometry, road/ground yaw (labeled scans),
/// randomized equalization, then intensity and ambient dropout.
pub fn train_augment(scan: PointScan, cfg: &AugmentConfig, rng: &mut Rng) -> Result<PointScan> {
    let mut scan = global_augment(scan, &cfg.global_aug, rng);
    if scan.is_labeled() {
        scan = road_ground_yaw(scan, cfg.yaw_limit_deg, rng)?;
    }
    let (low, high) = sample_eq_cutoffs(cfg, rng);
    scan = equalize_channels(scan, low, high)?;
    scan = channel_dropout(scan, Channel::Intensity, cfg.dropout_prob, cfg.dropout_per_point, rng);
    scan = channel_dropout(scan, Channel::Ambient, cfg.dropout_prob, cfg.dropout_per_point, rng);
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::scan::IGNORE;

    /// Independent oracle: nearest-rank cutoffs and CDF by counting.
    fn oracle(values: &[f64], low: f64, high: f64) -> Vec<f64> {
        let n = values.len();
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |p: f64| {
            let mut k = 1usize;
            while (k as f64) < p / 100.0 * n as f64 {
                k += 1;
            }
            s[k.min(n) - 1]
        };
        let (lo, hi) = (pick(low), pick(high));
        values
            .iter()
            .map(|&v| {
                if v <= lo {
                    0.0
                } else if v >= hi {
                    1.0
                } else {
                    let cnt = values.iter().filter(|&&w| w <= v).count() as f64;
                    (100.0 * cnt / n as f64 - low) / (high - low)
                }
            })
            .collect()
    }

    fn scan_fixture() -> PointScan {
        PointScan {
            xyz: vec![[1.0, 2.0, 0.5], [3.0, -1.0, -1.7], [-2.0, 4.0, 0.0], [0.5, 0.5, 2.0]],
            intensity: vec![1.0, 5.0, 3.0, 9.0],
            ambient: Some(vec![10.0, 20.0, 30.0, 40.0]),
            labels: vec![0, 1, 2, IGNORE],
            dataset_id: 0,
        }
    }

    #[test]
    fn equalize_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let out = histogram_equalize(&v, 2.0, 95.0).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[99], 1.0);
        assert!((out[49] - 48.0 / 93.0).abs() < 1e-12);
        assert_eq!(out, oracle(&v, 2.0, 95.0));
    }

    #[test]
    fn equalize_constant_is_zero_and_rank_invariant() {
        assert!(histogram_equalize(&[3.3; 17], 2.0, 95.0).unwrap().iter().all(|&v| v == 0.0));
        let v = [4.0, -1.0, 9.5, 2.0, 2.0, 7.0, 0.0];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x + 7.0).collect();
        assert_eq!(histogram_equalize(&v, 0.0, 97.0).unwrap(), histogram_equalize(&w, 0.0, 97.0).unwrap());
        assert!(histogram_equalize(&[], 2.0, 95.0).is_err());
        assert!(histogram_equalize(&v, 50.0, 50.0).is_err());
    }

    #[test]
    fn cutoff_sampling_statistics() {
        let cfg = AugmentConfig::default();
        let mut rng = derive_rng(11, 0);
        let n = 100_000;
        let (mut sl, mut sh) = (0.0, 0.0);
        for _ in 0..n {
            let (l, h) = sample_eq_cutoffs(&cfg, &mut rng);
            assert!(l < h && (0.0..=5.0).contains(&l) && (92.0..=97.0).contains(&h));
            sl += l;
            sh += h;
        }
        assert!((sl / n as f64 - 2.5).abs() < 0.05);
        assert!((sh / n as f64 - 94.5).abs() < 0.05);
        let mut a = derive_rng(3, 9);
        let mut b = derive_rng(3, 9);
        assert_eq!(sample_eq_cutoffs(&cfg, &mut a), sample_eq_cutoffs(&cfg, &mut b));
    }

    #[test]
    fn dropout_forced_and_disabled() {
        let mut rng = derive_rng(1, 1);
        let s = scan_fixture();
        let d = channel_dropout(s.clone(), Channel::Intensity, 1.0, false, &mut rng);
        assert!(d.intensity.iter().all(|&v| v == 0.0));
        assert_eq!(d.xyz, s.xyz);
        assert_eq!(d.ambient, s.ambient);
        let d = channel_dropout(s.clone(), Channel::Ambient, 0.0, false, &mut rng);
        assert_eq!(d, s);
    }

    #[test]
    fn dropout_frequency_monte_carlo() {
        let mut rng = derive_rng(5, 2);
        let s = scan_fixture();
        let trials = 10_000;
        let dropped = (0..trials)
            .filter(|_| channel_dropout(s.clone(), Channel::Intensity, 0.2, false, &mut rng).intensity[0] == 0.0)
            .count();
        assert!((dropped as f64 / trials as f64 - 0.2).abs() < 0.01, "{dropped}");
    }

    #[test]
    fn yaw_touches_only_road_and_ground() {
        let s = scan_fixture();
        assert_eq!(road_ground_yaw_by(s.clone(), 0.0), s);
        let mut rng = derive_rng(2, 0);
        let r = road_ground_yaw(s.clone(), 1.5, &mut rng).unwrap();
        for i in 0..s.len() {
            let (a, b) = (s.xyz[i], r.xyz[i]);
            assert_eq!(a[2].to_bits(), b[2].to_bits());
            if s.labels[i] <= 1 {
                assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
                let ang = b[1].atan2(b[0]) - a[1].atan2(a[0]);
                assert!(ang.abs() <= 1.5f64.to_radians() + 1e-12);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(r.intensity, s.intensity);
        let mut unl = s;
        unl.labels = vec![IGNORE; 4];
        assert!(road_ground_yaw(unl, 1.5, &mut rng).is_err());
    }

    #[test]
    fn global_augment_identities() {
        let s = scan_fixture();
        let mut rng = derive_rng(0, 0);
        assert_eq!(global_augment(s.clone(), &GlobalAugment::disabled(), &mut rng), s);
        assert_eq!(flip_x(flip_x(s.clone())), s);
        let scaled = scale_scan(s.clone(), 1.05);
        for i in 0..s.len() {
            for j in 0..s.len() {
                let d = |p: &[[f64; 3]]| {
                    ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2) + (p[i][2] - p[j][2]).powi(2)).sqrt()
                };
                assert!((d(&scaled.xyz) - 1.05 * d(&s.xyz)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jitter_is_clipped() {
        let s = scan_fixture();
        let cfg = GlobalAugment {
            jitter_sigma: 1.0,
            ..GlobalAugment::disabled()
        };
        let cfg = GlobalAugment { jitter: true, ..cfg };
        let mut rng = derive_rng(8, 8);
        let j = global_augment(s.clone(), &cfg, &mut rng);
        for (a, b) in s.xyz.iter().zip(&j.xyz) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.05 + 1e-15);
            }
        }
    }

    #[test]
    fn eval_normalize_is_deterministic_and_bounded() {
        let cfg = AugmentConfig::default();
        let a = eval_normalize(scan_fixture(), &cfg).unwrap();
        let b = eval_normalize(scan_fixture(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.intensity.iter().chain(a.ambient.as_ref().unwrap()).all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.intensity, oracle(&scan_fixture().intensity, 2.0, 95.0));
    }

    #[test]
    fn train_pipeline_is_seed_reproducible_and_keeps_labels() {
        let cfg = AugmentConfig::default();
        let a = train_augment(scan_fixture(), &cfg, &mut derive_rng(4, 4)).unwrap();
        let b = train_augment(scan_fixture(), &cfg, &mut derive_rng(4, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels, scan_fixture().labels);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            dropout_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            eq_low_range: [0.0, 95.0],
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
