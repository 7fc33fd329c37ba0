//! Synthetic scene generation: a handful of colored primitives inside the
//! unit cube, rendered by exact first-hit ray casting from a ring of
//! inward-facing cameras. Images are pixel-deterministic for a given spec.

use crate::fsutil::write_atomic;
use crate::manifest::{
    save_image_rgb, save_manifest, BoundsBlock, CameraBlock, DatasetManifest, FrameEntry,
};
use anyhow::{bail, Context, Result};
use radfield_core::render::Camera;
use radfield_core::rng::{seeded, RngExt};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

/// Half-extent of the scene cube; primitives must fit inside it.
pub const SCENE_HALF: f64 = 0.5;
/// Ring radius of the generated cameras.
pub const RING_RADIUS: f64 = 2.2;
/// Camera height above the scene-center plane.
pub const RING_HEIGHT: f64 = 0.35;
/// Margin around the scene cube covered by [t_near, t_far]; larger than the
/// cube half-diagonal (~0.866) so every primitive is inside the ray range.
pub const RANGE_MARGIN: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        center: [f64; 3],
        size: [f64; 3],
        albedo: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub image_side: usize,
    pub n_views: usize,
    pub n_train: usize,
    pub primitives: Vec<Primitive>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            bail!("image_side must be at least 8, got {}", self.image_side);
        }
        if self.n_views == 0 || self.n_train == 0 || self.n_train > self.n_views {
            bail!(
                "need 1 <= n_train <= n_views, got n_train={} n_views={}",
                self.n_train,
                self.n_views
            );
        }
        if self.primitives.is_empty() {
            bail!("a synthetic scene needs at least one primitive");
        }
        for (i, prim) in self.primitives.iter().enumerate() {
            let check_albedo = |a: &[f64; 3]| -> Result<()> {
                if a.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                    bail!("primitive {i}: albedo components must be in [0, 1]");
                }
                Ok(())
            };
            match prim {
                Primitive::Box { center, size, albedo } => {
                    check_albedo(albedo)?;
                    for a in 0..3 {
                        if size[a] <= 0.0 {
                            bail!("primitive {i}: box size must be positive");
                        }
                        if center[a] - 0.5 * size[a] < -SCENE_HALF
                            || center[a] + 0.5 * size[a] > SCENE_HALF
                        {
                            bail!("primitive {i}: box leaves the scene cube on axis {a}");
                        }
                    }
                }
                Primitive::Sphere { center, radius, albedo } => {
                    check_albedo(albedo)?;
                    if *radius <= 0.0 {
                        bail!("primitive {i}: sphere radius must be positive");
                    }
                    for a in 0..3 {
                        if center[a] - radius < -SCENE_HALF || center[a] + radius > SCENE_HALF {
                            bail!("primitive {i}: sphere leaves the scene cube on axis {a}");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The standard small test scene: two colored boxes and a sphere, viewed by
/// a four-camera ring split three train / one test.
pub fn desk_preset(seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        seed,
        image_side: 64,
        n_views: 4,
        n_train: 3,
        primitives: vec![
            Primitive::Box {
                center: [-0.18, -0.10, 0.05],
                size: [0.22, 0.30, 0.20],
                albedo: [0.85, 0.25, 0.20],
            },
            Primitive::Box {
                center: [0.16, -0.14, -0.12],
                size: [0.25, 0.22, 0.25],
                albedo: [0.20, 0.40, 0.85],
            },
            Primitive::Sphere {
                center: [0.02, 0.14, 0.10],
                radius: 0.16,
                albedo: [0.30, 0.80, 0.30],
            },
        ],
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Camera-to-world pose at `eye` looking at `target` (camera −z toward the
/// target, +y roughly up).
pub fn look_at_pose(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> [f64; 16] {
    let z = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
    let x = normalize(cross(up, z));
    let y = cross(z, x);
    [
        x[0], y[0], z[0], eye[0], //
        x[1], y[1], z[1], eye[1], //
        x[2], y[2], z[2], eye[2], //
        0.0, 0.0, 0.0, 1.0,
    ]
}

/// Ring camera positions and the shared intrinsics/bounds blocks for a spec;
/// the ring phase is jittered by the seed so different seeds give different
/// (but still evenly spaced) viewpoints.
pub fn ring_cameras(spec: &SyntheticSceneSpec) -> (CameraBlock, BoundsBlock, Vec<[f64; 16]>) {
    let side = spec.image_side;
    let cam = CameraBlock {
        fx: 1.25 * side as f64,
        fy: 1.25 * side as f64,
        cx: (side as f64 - 1.0) / 2.0,
        cy: (side as f64 - 1.0) / 2.0,
        width: side,
        height: side,
    };
    let dist = (RING_RADIUS * RING_RADIUS + RING_HEIGHT * RING_HEIGHT).sqrt();
    let bounds = BoundsBlock {
        min: [-SCENE_HALF; 3],
        max: [SCENE_HALF; 3],
        t_near: dist - RANGE_MARGIN,
        t_far: dist + RANGE_MARGIN,
    };
    let mut rng = seeded(spec.seed);
    let phase = rng.uniform_in(0.0, 2.0 * PI / spec.n_views as f64);
    let poses = (0..spec.n_views)
        .map(|k| {
            let theta = phase + 2.0 * PI * k as f64 / spec.n_views as f64;
            let eye = [RING_RADIUS * theta.cos(), RING_HEIGHT, RING_RADIUS * theta.sin()];
            look_at_pose(eye, [0.0; 3], [0.0, 1.0, 0.0])
        })
        .collect();
    (cam, bounds, poses)
}

/// Evenly interleaved train/test assignment over `n` views.
pub fn split_views(n: usize, n_train: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..n {
        if (k * n_train) % n < n_train {
            train.push(k);
        } else {
            test.push(k);
        }
    }
    (train, test)
}

fn hit_box(o: [f64; 3], d: [f64; 3], center: &[f64; 3], size: &[f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let lo = center[a] - 0.5 * size[a];
        let hi = center[a] + 0.5 * size[a];
        if d[a].abs() < 1e-15 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t0 > 0.0 {
        Some(t0)
    } else {
        None
    }
}

fn hit_sphere(o: [f64; 3], d: [f64; 3], center: &[f64; 3], radius: f64) -> Option<f64> {
    let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
    let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
    let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    if t > 0.0 {
        Some(t)
    } else {
        None
    }
}

/// First-hit color of a ray, or black when nothing is hit.
pub fn cast_ray(o: [f64; 3], d: [f64; 3], prims: &[Primitive]) -> [f64; 3] {
    let mut best: Option<(f64, [f64; 3])> = None;
    for prim in prims {
        let hit = match prim {
            Primitive::Box { center, size, albedo } => {
                hit_box(o, d, center, size).map(|t| (t, *albedo))
            }
            Primitive::Sphere { center, radius, albedo } => {
                hit_sphere(o, d, center, radius).map(|t| (t, *albedo))
            }
        };
        if let Some((t, a)) = hit {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, a));
            }
        }
    }
    best.map_or([0.0; 3], |(_, a)| a)
}

/// Render one view on the exact integer pixel grid; ray directions follow
/// the same backprojection convention as the training-time ray generator.
pub fn render_view(spec: &SyntheticSceneSpec, cam: &Camera) -> Vec<f64> {
    let o = [cam.pose[3], cam.pose[7], cam.pose[11]];
    let mut pixels = Vec::with_capacity(cam.width * cam.height * 3);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let dc = [
                (col as f64 - cam.cx()) / cam.fx(),
                -(row as f64 - cam.cy()) / cam.fy(),
                -1.0,
            ];
            let d = normalize(cam.rotate(dc));
            pixels.extend(cast_ray(o, d, &spec.primitives));
        }
    }
    pixels
}

/// Generate the full dataset on disk: one PNG per view plus `manifest.json`
/// and `scene.json` (the spec itself). Returns the manifest path.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let (cam_block, bounds, poses) = ring_cameras(spec);
    let (train_split, test_split) = split_views(spec.n_views, spec.n_train);
    let mut frames = Vec::with_capacity(spec.n_views);
    for (k, pose) in poses.iter().enumerate() {
        let cam = Camera {
            k: cam_block.intrinsics(),
            pose: *pose,
            width: cam_block.width,
            height: cam_block.height,
        };
        let rgb = render_view(spec, &cam);
        let name = format!("view_{k:03}.png");
        save_image_rgb(&out_dir.join(&name), &rgb, cam.width, cam.height)?;
        let mut transform = [[0.0; 4]; 4];
        for r in 0..4 {
            transform[r].copy_from_slice(&pose[r * 4..r * 4 + 4]);
        }
        frames.push(FrameEntry { image: name, transform });
    }
    let manifest = DatasetManifest {
        camera: cam_block,
        bounds,
        frames,
        train_split,
        test_split,
    };
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest_path, &manifest)?;
    let spec_json = serde_json::to_string_pretty(spec).context("serializing scene spec")?;
    write_atomic(&out_dir.join("scene.json"), spec_json.as_bytes())?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_dataset;

    fn single_sphere_spec(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed,
            image_side: 64,
            n_views: 4,
            n_train: 3,
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.16,
                albedo: [1.0, 1.0, 1.0],
            }],
        }
    }

    #[test]
    fn spec_validation_rejects_bad_scenes() {
        let mut s = desk_preset(1);
        s.primitives.clear();
        assert!(s.validate().is_err());
        let mut s = desk_preset(1);
        s.primitives.push(Primitive::Box {
            center: [0.45, 0.0, 0.0],
            size: [0.2, 0.1, 0.1],
            albedo: [0.5; 3],
        });
        assert!(s.validate().is_err()); // pokes out of the cube
        let mut s = desk_preset(1);
        s.primitives.push(Primitive::Sphere {
            center: [0.0; 3],
            radius: 0.6,
            albedo: [0.5; 3],
        });
        assert!(s.validate().is_err());
        let mut s = desk_preset(1);
        if let Primitive::Box { albedo, .. } = &mut s.primitives[0] {
            albedo[0] = 1.5;
        }
        assert!(s.validate().is_err());
        let mut s = desk_preset(1);
        s.n_train = 9;
        assert!(s.validate().is_err());
        assert!(desk_preset(1).validate().is_ok());
    }

    #[test]
    fn enclosing_box_paints_the_image_center_with_its_albedo() {
        let spec = SyntheticSceneSpec {
            seed: 3,
            image_side: 32,
            n_views: 1,
            n_train: 1,
            primitives: vec![Primitive::Box {
                center: [0.0; 3],
                size: [1.0, 1.0, 1.0],
                albedo: [0.25, 0.5, 0.75],
            }],
        };
        let (cb, _, poses) = ring_cameras(&spec);
        let cam = Camera { k: cb.intrinsics(), pose: poses[0], width: 32, height: 32 };
        let rgb = render_view(&spec, &cam);
        // the central ray points straight at the cube
        let mid = (16 * 32 + 16) * 3;
        assert_eq!(&rgb[mid..mid + 3], &[0.25, 0.5, 0.75]);
        // corner rays miss the cube entirely at this field of view
        assert_eq!(&rgb[0..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn first_hit_picks_the_nearest_primitive() {
        // two slabs stacked along the ray path; the nearer one wins
        let prims = vec![
            Primitive::Box {
                center: [0.0, 0.0, 0.3],
                size: [0.6, 0.6, 0.1],
                albedo: [1.0, 0.0, 0.0],
            },
            Primitive::Box {
                center: [0.0, 0.0, -0.3],
                size: [0.6, 0.6, 0.1],
                albedo: [0.0, 1.0, 0.0],
            },
        ];
        let c = cast_ray([0.0, 0.0, 2.0], [0.0, 0.0, -1.0], &prims);
        assert_eq!(c, [1.0, 0.0, 0.0]);
        let c = cast_ray([0.0, 0.0, -2.0], [0.0, 0.0, 1.0], &prims);
        assert_eq!(c, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn sphere_silhouette_area_matches_the_projected_radius_formula() {
        let spec = single_sphere_spec(11);
        let (cb, _, poses) = ring_cameras(&spec);
        let cam = Camera {
            k: cb.intrinsics(),
            pose: poses[0],
            width: cb.width,
            height: cb.height,
        };
        let rgb = render_view(&spec, &cam);
        let count = rgb.chunks_exact(3).filter(|p| p[0] > 0.0).count() as f64;
        let d = (RING_RADIUS * RING_RADIUS + RING_HEIGHT * RING_HEIGHT).sqrt();
        let rho = cb.fx * 0.16 / (d * d - 0.16 * 0.16).sqrt();
        let expected = PI * rho * rho;
        let tolerance = 2.0 * (2.0 * PI * rho);
        assert!(
            (count - expected).abs() <= tolerance,
            "count {count} vs expected {expected} (tolerance {tolerance})"
        );
    }

    #[test]
    fn same_seed_reproduces_identical_bytes_and_new_seed_differs() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let t3 = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&desk_preset(42), t1.path()).unwrap();
        generate_synthetic_dataset(&desk_preset(42), t2.path()).unwrap();
        generate_synthetic_dataset(&desk_preset(43), t3.path()).unwrap();
        let read = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
        for k in 0..4 {
            let name = format!("view_{k:03}.png");
            assert_eq!(read(t1.path(), &name), read(t2.path(), &name), "{name}");
        }
        assert_ne!(read(t1.path(), "view_000.png"), read(t3.path(), "view_000.png"));
    }

    #[test]
    fn generated_dataset_loads_and_passes_all_manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic_dataset(&desk_preset(7), dir.path()).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.views.len(), 4);
        assert_eq!(ds.train_views().len(), 3);
        assert_eq!(ds.test_views().len(), 1);
        // scene content is visible: some pixel in every view is non-black
        for v in &ds.views {
            assert!(v.pixels.iter().any(|&p| p > 0.0));
        }
        // and the spec file sits next to the manifest
        assert!(dir.path().join("scene.json").exists());
    }

    #[test]
    fn split_interleaves_test_views_between_training_views() {
        let (train, test) = split_views(4, 3);
        assert_eq!(train, vec![0, 2, 3]);
        assert_eq!(test, vec![1]);
        let (train, test) = split_views(6, 3);
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 3);
        assert!(train.windows(2).all(|w| w[1] - w[0] == 2));
    }

    #[test]
    fn look_at_pose_is_rigid_and_faces_the_target() {
        let pose = look_at_pose([2.0, 0.4, -1.0], [0.0; 3], [0.0, 1.0, 0.0]);
        let cam = Camera {
            k: [80.0, 0.0, 31.5, 0.0, 80.0, 31.5, 0.0, 0.0, 1.0],
            pose,
            width: 64,
            height: 64,
        };
        cam.validate().unwrap();
        // the −z axis points from the eye toward the target
        let fwd = [-pose[2], -pose[6], -pose[10]];
        let to_target = normalize([-2.0, -0.4, 1.0]);
        for a in 0..3 {
            assert!((fwd[a] - to_target[a]).abs() < 1e-12);
        }
    }
}
