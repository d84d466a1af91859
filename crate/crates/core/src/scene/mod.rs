//! Procedural toy scenes, the dataset generator, and the on-disk dataset
//! format (manifest.json + P6 images).

pub mod oracle;
pub mod ppm;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{
    add3, normalize3, normalize_scene, scale3, CameraPose, SceneNormalization, Vec3,
};
use crate::error::{Error, Result};

pub use oracle::{raytrace_oracle, surface_distance, trace_ray};
pub use ppm::{read_ppm, write_ppm};

/// Shared background color composited behind every scene (and behind the
/// learned field at render time).
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64, albedo: [f64; 3] },
    Cuboid { center: Vec3, half: Vec3, albedo: [f64; 3], checker: bool },
}

impl Primitive {
    /// Axis-aligned bounding-box corners (the normalization point cloud).
    pub fn bbox_corners(&self) -> Vec<Vec3> {
        let (c, h) = match self {
            Primitive::Sphere { center, radius, .. } => (*center, [*radius; 3]),
            Primitive::Cuboid { center, half, .. } => (*center, *half),
        };
        (0..8)
            .map(|i| {
                std::array::from_fn(|a| c[a] + if i >> a & 1 == 1 { h[a] } else { -h[a] })
            })
            .collect()
    }

    fn transformed(&self, n: &SceneNormalization) -> Primitive {
        let map = |p: Vec3| scale3(add3(p, n.translation), n.scale);
        match self {
            Primitive::Sphere { center, radius, albedo } => Primitive::Sphere {
                center: map(*center),
                radius: radius * n.scale,
                albedo: *albedo,
            },
            Primitive::Cuboid { center, half, albedo, checker } => Primitive::Cuboid {
                center: map(*center),
                half: scale3(*half, n.scale),
                albedo: *albedo,
                checker: *checker,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl ToyScene {
    pub fn points(&self) -> Vec<Vec3> {
        self.primitives.iter().flat_map(|p| p.bbox_corners()).collect()
    }

    pub fn transformed(&self, n: &SceneNormalization) -> ToyScene {
        ToyScene {
            primitives: self.primitives.iter().map(|p| p.transformed(n)).collect(),
            background: self.background,
        }
    }
}

// Documented generator ranges (before the random global scale).
const PRIM_COUNT: std::ops::RangeInclusive<usize> = 1..=6;
const PRIM_CENTER: std::ops::Range<f64> = -0.35..0.35;
const PRIM_SIZE: std::ops::Range<f64> = 0.08..0.25;
const ALBEDO: std::ops::Range<f64> = 0.1..0.9;
const GLOBAL_SCALE: std::ops::Range<f64> = 0.5..2.0;
const GROUND_PROB: f64 = 0.5;

/// Deterministic scene from a seed: 1-6 spheres/cuboids with uniform
/// centers, sizes, and albedos, an optional checkered ground slab, and a
/// random global scale undone later by normalization.
pub fn generate_scene(seed: u64) -> ToyScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let n = rng.gen_range(PRIM_COUNT);
    let mut primitives = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let center: Vec3 = std::array::from_fn(|_| rng.gen_range(PRIM_CENTER.clone()));
        let albedo: [f64; 3] = std::array::from_fn(|_| rng.gen_range(ALBEDO.clone()));
        if rng.gen_bool(0.5) {
            primitives.push(Primitive::Sphere {
                center,
                radius: rng.gen_range(PRIM_SIZE.clone()),
                albedo,
            });
        } else {
            primitives.push(Primitive::Cuboid {
                center,
                half: std::array::from_fn(|_| rng.gen_range(PRIM_SIZE.clone())),
                albedo,
                checker: false,
            });
        }
    }
    if rng.gen_bool(GROUND_PROB) {
        primitives.push(Primitive::Cuboid {
            center: [0.0, -0.55, 0.0],
            half: [0.6, 0.03, 0.6],
            albedo: std::array::from_fn(|_| rng.gen_range(ALBEDO.clone())),
            checker: true,
        });
    }
    let s = rng.gen_range(GLOBAL_SCALE);
    let scaled = SceneNormalization { scale: s, translation: [0.0; 3], z: 1.0 };
    ToyScene { primitives, background: BACKGROUND }.transformed(&scaled)
}

/// Camera-distance convention in normalized units.
pub const ORBIT_DISTANCE: std::ops::Range<f64> = 1.5..2.5;
const ORBIT_ELEVATION: std::ops::Range<f64> = -0.5..0.8; // radians
const FOCAL_RANGE: std::ops::Range<f64> = 0.9..1.3;

/// Raw-space orbit poses looking at the primitive-cloud centroid, placed so
/// that their normalized distances land exactly in ORBIT_DISTANCE.
fn orbit_poses<R: Rng>(
    scene: &ToyScene,
    views: usize,
    size: (usize, usize),
    rng: &mut R,
) -> Vec<CameraPose> {
    let pts = scene.points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let centroid: Vec3 = std::array::from_fn(|a| (lo[a] + hi[a]) / 2.0);
    let focal = rng.gen_range(FOCAL_RANGE);
    (0..views)
        .map(|_| {
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let el = rng.gen_range(ORBIT_ELEVATION.clone());
            let d = rng.gen_range(ORBIT_DISTANCE) * extent;
            let dir = normalize3([el.cos() * az.cos(), el.sin(), el.cos() * az.sin()]);
            let center = add3(centroid, scale3(dir, d));
            CameraPose::look_at(center, centroid, focal, size)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormalizationRecord {
    pub scale: f64,
    pub translation: [f64; 3],
    pub z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewRecord {
    pub file: String,
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub focal_normalized: f64,
    pub principal: [f64; 2],
    pub size: [usize; 2],
}

impl ViewRecord {
    pub fn pose(&self) -> CameraPose {
        CameraPose {
            rotation: self.rotation,
            center: self.center,
            focal: self.focal_normalized,
            principal_point: self.principal,
            image_size: (self.size[0], self.size[1]),
        }
    }

    fn from_pose(file: String, p: &CameraPose) -> ViewRecord {
        ViewRecord {
            file,
            rotation: p.rotation,
            center: p.center,
            focal_normalized: p.focal,
            principal: p.principal_point,
            size: [p.image_size.0, p.image_size.1],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    pub seed: u64,
    pub normalization: NormalizationRecord,
    pub views: Vec<ViewRecord>,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub holdout_stride: usize,
    pub scenes: Vec<SceneRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} (expected {})",
                m.version, MANIFEST_VERSION
            )));
        }
        Ok(m)
    }

    /// Every `holdout_stride`-th scene (starting at index 0) is held out.
    pub fn is_test(&self, scene_index: usize) -> bool {
        self.holdout_stride > 0 && scene_index % self.holdout_stride == 0
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| !self.is_test(i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.scenes.len()).filter(|&i| self.is_test(i)).collect()
    }
}

pub struct DatasetOptions {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub width: usize,
    pub height: usize,
    pub holdout_stride: usize,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            n_scenes: 64,
            views_per_scene: 12,
            width: 48,
            height: 48,
            holdout_stride: 8,
            seed: 0,
        }
    }
}

/// Generate a dataset directory: normalized scenes rendered by the analytic
/// oracle, a manifest, and one PPM per view. Regeneration with the same
/// options is byte-identical.
pub fn generate_dataset(dir: &Path, opts: &DatasetOptions) -> Result<Manifest> {
    if opts.views_per_scene < 3 {
        return Err(Error::Config(format!(
            "need >= 3 views per scene, got {}",
            opts.views_per_scene
        )));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    let mut scenes = Vec::with_capacity(opts.n_scenes);
    for id in 0..opts.n_scenes {
        let seed = opts.seed.wrapping_mul(0x100000001b3).wrapping_add(id as u64);
        let raw = generate_scene(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let raw_poses = orbit_poses(&raw, opts.views_per_scene, (opts.width, opts.height), &mut rng);
        let (norm, poses) = normalize_scene(&raw.points(), &raw_poses, 0)?;
        let scene = raw.transformed(&norm);
        let scene_dir = dir.join("images").join(id.to_string());
        std::fs::create_dir_all(&scene_dir)?;
        let mut views = Vec::with_capacity(poses.len());
        for (vi, pose) in poses.iter().enumerate() {
            pose.validate()?;
            let (rgb, _depth) = raytrace_oracle(&scene, pose);
            let rel: PathBuf = ["images", &id.to_string(), &format!("{vi}.ppm")].iter().collect();
            write_ppm(&dir.join(&rel), &rgb, opts.width, opts.height)?;
            views.push(ViewRecord::from_pose(rel.to_string_lossy().into_owned(), pose));
        }
        scenes.push(SceneRecord {
            id,
            seed,
            normalization: NormalizationRecord {
                scale: norm.scale,
                translation: norm.translation,
                z: norm.z,
            },
            views,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        holdout_stride: opts.holdout_stride,
        scenes,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Rebuild the normalized ToyScene for a manifest entry (oracle-side tests
/// and baselines).
pub fn scene_from_record(rec: &SceneRecord) -> ToyScene {
    let raw = generate_scene(rec.seed);
    let n = SceneNormalization {
        scale: rec.normalization.scale,
        translation: rec.normalization.translation,
        z: rec.normalization.z,
    };
    raw.transformed(&n)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use crate::camera::generate_ray;

    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_scene(1234), generate_scene(1234));
        assert_ne!(generate_scene(1), generate_scene(2));
    }

    #[test]
    fn primitive_count_diversity() {
        let counts: HashSet<usize> =
            (0..100).map(|s| generate_scene(s).primitives.len()).collect();
        assert!(counts.len() >= 4, "only {:?} distinct primitive counts", counts);
    }

    #[test]
    fn normalized_scenes_stay_in_bounds() {
        for seed in 0..1000 {
            let raw = generate_scene(seed);
            // Normalize exactly as the dataset generator does (poses do not
            // affect the geometric part of the normalization).
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let poses = orbit_poses(&raw, 3, (8, 8), &mut rng);
            let (norm, _) = normalize_scene(&raw.points(), &poses, 0).unwrap();
            let scene = raw.transformed(&norm);
            for p in scene.points() {
                for a in 0..3 {
                    assert!(
                        p[a].abs() <= 0.8 + 1e-9,
                        "seed {} point {:?} outside [-0.8, 0.8]",
                        seed,
                        p
                    );
                }
            }
        }
    }

    #[test]
    fn unit_sphere_center_depth() {
        let scene = ToyScene {
            primitives: vec![Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 1.0,
                albedo: [0.8, 0.2, 0.2],
            }],
            background: BACKGROUND,
        };
        let pose = CameraPose::look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0], 1.0, (9, 9));
        let ray = generate_ray(&pose, 4, 4);
        let (_, depth) = trace_ray(&scene, &ray).unwrap();
        assert!((depth - 1.0).abs() < 1e-9, "center depth {}", depth);
    }

    #[test]
    fn empty_scene_is_background_and_infinite_depth() {
        let scene = ToyScene { primitives: vec![], background: BACKGROUND };
        let pose = CameraPose::look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0], 1.0, (8, 6));
        let (rgb, depth) = raytrace_oracle(&scene, &pose);
        for px in 0..8 * 6 {
            assert_eq!(&rgb[px * 3..px * 3 + 3], &BACKGROUND);
            assert_eq!(depth[px], f64::INFINITY);
        }
    }

    #[test]
    fn sphere_silhouette_radius_matches_projection() {
        let r = 0.3;
        let d = 2.0;
        let scene = ToyScene {
            primitives: vec![Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: r,
                albedo: [0.5, 0.5, 0.5],
            }],
            background: BACKGROUND,
        };
        let (w, h) = (96usize, 96usize);
        let f = 1.2;
        let pose = CameraPose::look_at([0.0, 0.0, -d], [0.0, 0.0, 0.0], f, (w, h));
        let (_, depth) = raytrace_oracle(&scene, &pose);
        // Measure the silhouette half-width along the middle row.
        let row = h / 2;
        let hits: Vec<usize> =
            (0..w).filter(|&u| depth[row * w + u].is_finite()).collect();
        let measured = (hits.len() as f64) / 2.0;
        let expect = f * w as f64 * r / d;
        assert!(
            (measured - expect).abs() <= 1.0,
            "measured {} vs projected {}",
            measured,
            expect
        );
    }

    #[test]
    fn dataset_split_arithmetic_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            n_scenes: 10,
            views_per_scene: 3,
            width: 16,
            height: 16,
            holdout_stride: 5,
            seed: 7,
        };
        let m = generate_dataset(dir.path(), &opts).unwrap();
        assert_eq!(m.train_indices().len(), 8);
        assert_eq!(m.test_indices(), vec![0, 5]);
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        for s in &m.scenes {
            for v in &s.views {
                assert!(v.pose().validate().is_ok());
                assert!(dir.path().join(&v.file).exists());
                let (img, w, h) = read_ppm(&dir.path().join(&v.file)).unwrap();
                assert_eq!((w, h), (16, 16));
                assert_eq!(img.len(), 16 * 16 * 3);
            }
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            n_scenes: 3,
            views_per_scene: 3,
            width: 12,
            height: 12,
            holdout_stride: 3,
            seed: 21,
        };
        generate_dataset(d1.path(), &opts).unwrap();
        generate_dataset(d2.path(), &opts).unwrap();
        let a = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let b = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
        let ia = std::fs::read(d1.path().join("images/0/0.ppm")).unwrap();
        let ib = std::fs::read(d2.path().join("images/0/0.ppm")).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn camera_distances_follow_convention() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            n_scenes: 6,
            ..Default::default()
        };
        let m = generate_dataset(dir.path(), &opts).unwrap();
        for s in &m.scenes {
            assert!(s.normalization.z > ORBIT_DISTANCE.start - 1e-6);
            assert!(s.normalization.z < ORBIT_DISTANCE.end + 1e-6);
            for v in &s.views {
                let c = v.center;
                let d = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                // Normalization recenters on the bbox centroid, which the
                // orbit also targets, so |center| is the orbit distance.
                assert!(
                    d > ORBIT_DISTANCE.start - 1e-6 && d < ORBIT_DISTANCE.end + 1e-6,
                    "distance {}",
                    d
                );
            }
        }
    }

    #[test]
    fn depth_reprojection_lands_on_surfaces() {
        let dir = tempfile::tempdir().unwrap();
        let opts = DatasetOptions {
            n_scenes: 4,
            views_per_scene: 3,
            width: 24,
            height: 24,
            holdout_stride: 4,
            seed: 3,
        };
        let m = generate_dataset(dir.path(), &opts).unwrap();
        for rec in &m.scenes {
            let scene = scene_from_record(rec);
            for v in &rec.views {
                let pose = v.pose();
                let (_, depth) = raytrace_oracle(&scene, &pose);
                let (w, h) = pose.image_size;
                for py in 0..h {
                    for px in 0..w {
                        let t = depth[py * w + px];
                        if !t.is_finite() {
                            continue;
                        }
                        let ray = generate_ray(&pose, px, py);
                        let point: Vec3 =
                            std::array::from_fn(|a| ray.origin[a] + t * ray.direction[a]);
                        let dist = surface_distance(&scene, point);
                        assert!(
                            dist < 1e-4,
                            "scene {} view {:?} pixel ({},{}) off-surface by {}",
                            rec.id,
                            v.file,
                            px,
                            py,
                            dist
                        );
                    }
                }
            }
        }
    }
}
