//! Procedural multi-domain LiDAR benchmark.
//!
//! Each scan is a ray-cast scene: a ground plane with a curved road strip,
//! vegetation blobs, boxes for vehicles, structures and small objects, thin
//! columns for people, and spurious returns as outliers. Every sensor cell
//! casts one ray and keeps the nearest surface, so the sampling pattern
//! follows the sensor's resolution and field of view.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::SensorSpec;
use crate::rng::{derive_rng, stream_id, Rng};
use crate::scan::registry::{DatasetConfig, LabelMapRef, RegistryConfig, ScanFiles};
use crate::scan::{save_scan, Class, PointScan, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub mean: f64,
    pub std: f64,
}

const fn stat(mean: f64, std: f64) -> ClassStat {
    ClassStat { mean, std }
}

/// Scene content ranges; counts are inclusive `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub road_width: [f64; 2],
    pub road_radius: [f64; 2],
    pub ground_noise: f64,
    pub ground_undulation: f64,
    pub max_range: f64,
    pub vegetation: [usize; 2],
    pub vegetation_radius: [f64; 2],
    pub vehicles: [usize; 2],
    pub structures: [usize; 2],
    pub objects: [usize; 2],
    pub people: [usize; 2],
    /// Fraction of rays replaced by a spurious short return.
    pub outlier_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub dataset_id: usize,
    pub sensor: SensorSpec,
    /// Sensor height above the ground plane, meters.
    pub mount_height: f64,
    /// Per-class intensity, indexed by class id.
    pub intensity: [ClassStat; NUM_CLASSES],
    pub ambient: Option<[ClassStat; NUM_CLASSES]>,
    pub layout: Layout,
    /// Points kept per scan, drawn uniformly from this range (fewer if fewer rays hit).
    pub points_per_scan: [usize; 2],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        let l = &self.layout;
        let ok_range = |r: [usize; 2]| r[0] <= r[1];
        if !(self.mount_height > 0.0)
            || !(l.max_range > self.mount_height)
            || !(l.road_width[0] > 0.0 && l.road_width[0] <= l.road_width[1])
            || !(l.road_radius[0] > 0.0 && l.road_radius[0] <= l.road_radius[1])
            || !(0.0..1.0).contains(&l.outlier_rate)
            || ![l.vegetation, l.vehicles, l.structures, l.objects, l.people, self.points_per_scan]
                .into_iter()
                .all(ok_range)
            || self.points_per_scan[1] == 0
        {
            return Err(Error::Config("invalid scene spec".into()));
        }
        let stats = self.intensity.iter().chain(self.ambient.iter().flatten());
        if stats.into_iter().any(|s| !(s.std >= 0.0) || !s.mean.is_finite()) {
            return Err(Error::Config("class statistics must be finite with std >= 0".into()));
        }
        Ok(())
    }

    /// Urban, dense 32-beam sensor with a downward-looking field of view.
    pub fn pseudo_a(seed: u64) -> Self {
        Self {
            seed,
            dataset_id: 0,
            sensor: SensorSpec {
                height: 32,
                width: 256,
                fov_min_deg: -24.0,
                fov_max_deg: 3.0,
            },
            mount_height: 1.73,
            intensity: [
                stat(0.12, 0.04),
                stat(0.20, 0.06),
                stat(0.28, 0.08),
                stat(0.24, 0.08),
                stat(0.40, 0.15),
                stat(0.18, 0.06),
                stat(0.45, 0.12),
                stat(0.08, 0.06),
            ],
            ambient: None,
            layout: Layout {
                road_width: [7.0, 12.0],
                road_radius: [60.0, 400.0],
                ground_noise: 0.02,
                ground_undulation: 0.05,
                max_range: 45.0,
                vegetation: [8, 16],
                vegetation_radius: [1.0, 2.5],
                vehicles: [3, 8],
                structures: [2, 5],
                objects: [3, 8],
                people: [0, 3],
                outlier_rate: 0.004,
            },
            points_per_scan: [1400, 1800],
        }
    }

    /// Urban, taller mount, wider field of view at lower resolution.
    pub fn pseudo_b(seed: u64) -> Self {
        let a = Self::pseudo_a(seed);
        Self {
            dataset_id: 1,
            sensor: SensorSpec {
                height: 24,
                width: 192,
                fov_min_deg: -17.6,
                fov_max_deg: 2.4,
            },
            mount_height: 2.1,
            intensity: [
                stat(0.10, 0.04),
                stat(0.20, 0.06),
                stat(0.28, 0.10),
                stat(0.22, 0.08),
                stat(0.45, 0.20),
                stat(0.32, 0.08),
                stat(0.50, 0.18),
                stat(0.05, 0.05),
            ],
            layout: Layout {
                road_width: [8.0, 14.0],
                vegetation: [6, 14],
                vehicles: [4, 10],
                structures: [3, 6],
                outlier_rate: 0.003,
                ..a.layout
            },
            ..a
        }
    }

    /// Rural/forest target: 16 beams, symmetric field of view, low mount,
    /// narrow winding dirt road, ambient channel. Vehicles, structures and
    /// objects are scarce.
    pub fn pseudo_target(seed: u64) -> Self {
        Self {
            seed,
            dataset_id: 2,
            sensor: SensorSpec {
                height: 16,
                width: 128,
                fov_min_deg: -16.6,
                fov_max_deg: 16.6,
            },
            mount_height: 1.2,
            intensity: [
                stat(0.55, 0.06),
                stat(0.62, 0.08),
                stat(0.72, 0.08),
                stat(0.60, 0.10),
                stat(0.80, 0.12),
                stat(0.66, 0.08),
                stat(0.85, 0.10),
                stat(0.45, 0.15),
            ],
            ambient: Some([
                stat(0.70, 0.06),
                stat(0.45, 0.08),
                stat(0.30, 0.10),
                stat(0.40, 0.10),
                stat(0.55, 0.15),
                stat(0.50, 0.10),
                stat(0.60, 0.12),
                stat(0.90, 0.08),
            ]),
            layout: Layout {
                road_width: [3.5, 5.5],
                road_radius: [15.0, 60.0],
                ground_noise: 0.05,
                ground_undulation: 0.25,
                max_range: 40.0,
                vegetation: [10, 22],
                vegetation_radius: [1.0, 3.0],
                vehicles: [0, 2],
                structures: [1, 2],
                objects: [1, 2],
                people: [0, 2],
                outlier_rate: 0.006,
            },
            points_per_scan: [1100, 1500],
        }
    }
}

/// Road centerline: a circle of `radius` around `center` through the sensor
/// neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Road {
    pub center: [f64; 2],
    pub radius: f64,
    pub width: f64,
}

impl Road {
    /// Planar distance from `(x, y)` to the centerline.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        ((dx * dx + dy * dy).sqrt() - self.radius).abs()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.distance(x, y) <= 0.5 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Yawed box: center, half extents, yaw about +z.
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: Class,
}

/// Everything placed in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub road: Road,
    pub ground_z: f64,
    pub primitives: Vec<Primitive>,
}

fn scene_rng(spec: &SceneSpec, index: usize, part: u64) -> Rng {
    derive_rng(spec.seed, stream_id(&[spec.dataset_id as u64, index as u64, part]))
}

fn count(rng: &mut Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Random ground position at `dist` range band, kept off the road when asked.
fn place(rng: &mut Rng, road: &Road, dist: [f64; 2], clearance: Option<f64>) -> [f64; 2] {
    for _ in 0..64 {
        let r = uniform(rng, dist);
        let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (x, y) = (r * a.cos(), r * a.sin());
        match clearance {
            Some(c) if road.distance(x, y) < 0.5 * road.width + c => continue,
            _ => return [x, y],
        }
    }
    // crowded scenes fall back to a point well away from the road
    let side = road.radius + road.width + dist[0];
    [road.center[0], road.center[1] + side.copysign(-road.center[1])]
}

pub fn scene_layout(spec: &SceneSpec, index: usize) -> Scene {
    let mut rng = scene_rng(spec, index, 0);
    let l = &spec.layout;
    let ground_z = -spec.mount_height;
    let radius = uniform(&mut rng, l.road_radius);
    let width = uniform(&mut rng, l.road_width);
    // the sensor drives on the road, offset a little from its centerline
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let lateral = rng.random_range(-0.25..0.25) * width;
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let d = side * (radius + lateral);
    let center = [-heading.sin() * d, heading.cos() * d];
    let road = Road { center, radius, width };

    let mut prims = Vec::new();
    let z0 = ground_z;
    for _ in 0..count(&mut rng, l.vegetation) {
        let r = uniform(&mut rng, l.vegetation_radius);
        let [x, y] = place(&mut rng, &road, [4.0, l.max_range * 0.8], Some(r + 0.5));
        // bushes sit on the ground, crowns float on an unseen trunk
        let lift = if rng.random_bool(0.5) { 0.7 * r } else { r + rng.random_range(1.0..3.0) };
        prims.push(Primitive {
            shape: Shape::Sphere {
                center: [x, y, z0 + lift],
                radius: r,
            },
            class: Class::Vegetation,
        });
    }
    for _ in 0..count(&mut rng, l.vehicles) {
        let on_road = rng.random_bool(0.6);
        let [x, y] = if on_road {
            // along the centerline, away from the sensor
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let p = [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
            let dist = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if dist < 5.0 || dist > l.max_range * 0.8 {
                place(&mut rng, &road, [5.0, 30.0], Some(1.5))
            } else {
                p
            }
        } else {
            place(&mut rng, &road, [5.0, 30.0], Some(1.5))
        };
        let (len, wid, hgt) = (rng.random_range(3.8..5.2), rng.random_range(1.6..2.0), rng.random_range(1.4..1.9));
        prims.push(Primitive {
            shape: Shape::Box {
                center: [x, y, z0 + 0.5 * hgt + 0.15],
                half: [0.5 * len, 0.5 * wid, 0.5 * hgt],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            class: Class::Vehicle,
        });
    }
    for _ in 0..count(&mut rng, l.structures) {
        let [x, y] = place(&mut rng, &road, [12.0, l.max_range * 0.9], Some(4.0));
        let (a, b, h) = (rng.random_range(4.0..14.0), rng.random_range(4.0..14.0), rng.random_range(3.0..9.0));
        prims.push(Primitive {
            shape: Shape::Box {
                center: [x, y, z0 + 0.5 * h],
                half: [0.5 * a, 0.5 * b, 0.5 * h],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            class: Class::Structure,
        });
    }
    for _ in 0..count(&mut rng, l.objects) {
        let [x, y] = place(&mut rng, &road, [3.0, 20.0], Some(0.3));
        let (w, h) = (rng.random_range(0.4..0.9), rng.random_range(0.8..2.5));
        prims.push(Primitive {
            shape: Shape::Box {
                center: [x, y, z0 + 0.5 * h],
                half: [0.5 * w, 0.5 * w, 0.5 * h],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            class: Class::Object,
        });
    }
    for _ in 0..count(&mut rng, l.people) {
        let [x, y] = place(&mut rng, &road, [3.0, 12.0], None);
        let h = rng.random_range(1.55..1.9);
        prims.push(Primitive {
            shape: Shape::Box {
                center: [x, y, z0 + 0.5 * h],
                half: [0.25, 0.2, 0.5 * h],
                yaw: rng.random_range(0.0..std::f64::consts::PI),
            },
            class: Class::People,
        });
    }
    Scene {
        road,
        ground_z,
        primitives: prims,
    }
}

/// Distance along a unit ray from the origin to the first hit, if any.
fn intersect(shape: &Shape, dir: [f64; 3]) -> Option<f64> {
    match *shape {
        Shape::Sphere { center: c, radius } => {
            let b = dir[0] * c[0] + dir[1] * c[1] + dir[2] * c[2];
            let cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - radius * radius;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            [b - s, b + s].into_iter().find(|&t| t > 1e-6)
        }
        Shape::Box { center: c, half, yaw } => {
            // ray origin and direction in the box frame
            let (sn, cs) = yaw.sin_cos();
            let rot = |v: [f64; 3]| [cs * v[0] + sn * v[1], -sn * v[0] + cs * v[1], v[2]];
            let o = rot([-c[0], -c[1], -c[2]]);
            let d = rot(dir);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..3 {
                if d[k].abs() < 1e-12 {
                    if o[k].abs() > half[k] {
                        return None;
                    }
                    continue;
                }
                let (a, b) = ((-half[k] - o[k]) / d[k], (half[k] - o[k]) / d[k]);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
            if t0 > t1 || t1 <= 1e-6 {
                None
            } else if t0 > 1e-6 {
                Some(t0)
            } else {
                Some(t1)
            }
        }
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn draw(rng: &mut Rng, s: ClassStat) -> f64 {
    let n = Normal::new(s.mean, s.std.max(1e-12)).expect("validated std");
    clamp01(n.sample(rng))
}

/// One fully labeled scan; the same `(spec, index)` always gives the same scan.
pub fn generate_scan(spec: &SceneSpec, index: usize) -> PointScan {
    let scene = scene_layout(spec, index);
    let mut rng = scene_rng(spec, index, 1);
    let s = &spec.sensor;
    let l = &spec.layout;
    let (lo, hi) = (s.fov_min_deg.to_radians(), s.fov_max_deg.to_radians());
    let noise = Normal::new(0.0, l.ground_noise.max(1e-12)).expect("positive");
    let mut xyz = Vec::new();
    let mut labels = Vec::new();
    for row in 0..s.height {
        for col in 0..s.width {
            let jr: f64 = rng.random_range(0.2..0.8);
            let jc: f64 = rng.random_range(0.2..0.8);
            let elev = hi - (row as f64 + jr) / s.height as f64 * (hi - lo);
            let az = std::f64::consts::PI * (1.0 - 2.0 * (col as f64 + jc) / s.width as f64);
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let outlier = l.outlier_rate > 0.0 && rng.random_bool(l.outlier_rate);
            let mut best: Option<(f64, Class)> = None;
            if dir[2] < 0.0 {
                let t = scene.ground_z / dir[2];
                best = Some((t, Class::Ground));
            }
            for p in &scene.primitives {
                if let Some(t) = intersect(&p.shape, dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, p.class));
                    }
                }
            }
            let hit = if outlier {
                let cap = best.map_or(20.0, |(t, _)| t.min(20.0));
                Some((rng.random_range(0.5..cap.max(0.6)), Class::Outlier))
            } else {
                best
            };
            let Some((t, mut class)) = hit else { continue };
            if t > l.max_range {
                continue;
            }
            let mut p = [t * dir[0], t * dir[1], t * dir[2]];
            if class == Class::Ground {
                p[2] += l.ground_undulation * (p[0] / 7.0).sin() * (p[1] / 9.0).cos() + noise.sample(&mut rng);
                if scene.road.contains(p[0], p[1]) {
                    class = Class::Road;
                }
            }
            xyz.push(p);
            labels.push(class.id());
        }
    }
    let mut scan_rng = scene_rng(spec, index, 2);
    let target = uniform_count(&mut scan_rng, spec.points_per_scan);
    if xyz.len() > target {
        let mut keep = sample(&mut scan_rng, xyz.len(), target).into_vec();
        keep.sort_unstable();
        xyz = keep.iter().map(|&i| xyz[i]).collect();
        labels = keep.iter().map(|&i| labels[i]).collect();
    }
    let mut attr_rng = scene_rng(spec, index, 3);
    let intensity = labels
        .iter()
        .map(|&c| draw(&mut attr_rng, spec.intensity[c as usize]))
        .collect();
    let ambient = spec
        .ambient
        .map(|stats| labels.iter().map(|&c| draw(&mut attr_rng, stats[c as usize])).collect());
    PointScan {
        xyz,
        intensity,
        ambient,
        labels,
        dataset_id: spec.dataset_id,
    }
}

fn uniform_count(rng: &mut Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Corpus sizes and master seed of the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub a_train: usize,
    pub b_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    /// Validation scans for the source domains (unused by the default protocol).
    pub source_val: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            a_train: 800,
            b_train: 800,
            target_train: 37,
            target_val: 13,
            source_val: 0,
        }
    }
}

pub const PSEUDO_A: &str = "pseudo_a";
pub const PSEUDO_B: &str = "pseudo_b";
pub const PSEUDO_TARGET: &str = "pseudo_target";

/// The three domain specs under one master seed.
pub fn bench_specs(seed: u64) -> [(String, SceneSpec); 3] {
    let sub = |k: u64| stream_id(&[seed, k]);
    [
        (PSEUDO_A.into(), SceneSpec::pseudo_a(sub(0))),
        (PSEUDO_B.into(), SceneSpec::pseudo_b(sub(1))),
        (PSEUDO_TARGET.into(), SceneSpec::pseudo_target(sub(2))),
    ]
}

/// Writes all three domains as scan files plus `registry.toml`; returns the registry path.
pub fn make_benchmark(out_dir: &Path, cfg: &BenchConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sizes = [
        (cfg.a_train, cfg.source_val),
        (cfg.b_train, cfg.source_val),
        (cfg.target_train, cfg.target_val),
    ];
    let mut registry = RegistryConfig::default();
    for ((name, spec), (n_train, n_val)) in bench_specs(cfg.seed).into_iter().zip(sizes) {
        spec.validate()?;
        let files = |split: &str, offset: usize, n: usize| -> Result<Vec<ScanFiles>> {
            (0..n)
                .map(|i| {
                    let scan = generate_scan(&spec, offset + i);
                    let rel = PathBuf::from(&name).join(split);
                    let points = rel.join(format!("{i:06}.bin"));
                    let labels = rel.join(format!("{i:06}.label"));
                    save_scan(&scan, &out_dir.join(&points), &out_dir.join(&labels))?;
                    Ok(ScanFiles {
                        points,
                        labels: Some(labels),
                    })
                })
                .collect()
        };
        let train = files("train", 0, n_train)?;
        let val = files("val", n_train, n_val)?;
        let has_ambient = spec.ambient.is_some();
        registry.datasets.push(DatasetConfig {
            name,
            dataset_id: spec.dataset_id,
            has_ambient,
            channels: if has_ambient { 5 } else { 4 },
            label_map: LabelMapRef::Named("identity".into()),
            sensor: spec.sensor,
            train,
            val,
        });
    }
    let path = out_dir.join("registry.toml");
    std::fs::write(&path, registry.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
