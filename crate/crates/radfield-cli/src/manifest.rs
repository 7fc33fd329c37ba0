//! Dataset manifests (a transforms-style JSON file: one camera block, a
//! frames array with 4×4 camera-to-world matrices, scene bounds, and
//! train/test splits) plus 8-bit RGB PNG image I/O.

use crate::fsutil::write_atomic;
use anyhow::{anyhow, bail, Context, Result};
use image::ImageReader;
use radfield_core::render::{Camera, SceneBounds, View};
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraBlock {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraBlock {
    pub fn intrinsics(&self) -> [f64; 9] {
        [self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoundsBlock {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameEntry {
    pub image: String,
    /// Row-major 4×4 camera-to-world matrix.
    pub transform: [[f64; 4]; 4],
}

impl FrameEntry {
    pub fn pose(&self) -> [f64; 16] {
        let mut p = [0.0; 16];
        for r in 0..4 {
            p[r * 4..r * 4 + 4].copy_from_slice(&self.transform[r]);
        }
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub camera: CameraBlock,
    pub bounds: BoundsBlock,
    pub frames: Vec<FrameEntry>,
    pub train_split: Vec<usize>,
    pub test_split: Vec<usize>,
}

/// A fully loaded dataset: every frame decoded to [0,1] RGB and paired with
/// its validated camera.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: Vec<View>,
    pub bounds: SceneBounds,
}

impl Dataset {
    pub fn train_views(&self) -> Vec<View> {
        self.manifest
            .train_split
            .iter()
            .map(|&i| self.views[i].clone())
            .collect()
    }

    pub fn test_views(&self) -> Vec<View> {
        self.manifest
            .test_split
            .iter()
            .map(|&i| self.views[i].clone())
            .collect()
    }
}

/// Decode an 8-bit RGB image to row-major [0,1] floats.
pub fn load_image_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening image {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding image {}", path.display()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, w, h))
}

/// Quantize [0,1] floats to 8-bit and write a PNG atomically.
pub fn save_image_rgb(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        bail!(
            "save_image_rgb: {} values for a {width}x{height} RGB image",
            rgb.len()
        );
    }
    let bytes: Vec<u8> = rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img =
        image::RgbImage::from_raw(width as u32, height as u32, bytes).expect("sized buffer");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .with_context(|| format!("encoding {}", path.display()))?;
    write_atomic(path, &out.into_inner())
}

/// Scale a single-channel map to [0,1] by its own min/max (flat maps become
/// zero) and replicate it to RGB — used for depth and sub-band exports.
pub fn normalize_to_rgb(values: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .flat_map(|&v| {
            let g = (v - lo) / span;
            [g, g, g]
        })
        .collect()
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).context("serializing manifest")?;
    write_atomic(path, json.as_bytes())
}

fn validate_splits(m: &DatasetManifest) -> Result<()> {
    for (name, split) in [("train", &m.train_split), ("test", &m.test_split)] {
        for &i in split {
            if i >= m.frames.len() {
                bail!(
                    "{name} split references frame {i} but the manifest has {} frames",
                    m.frames.len()
                );
            }
        }
    }
    if m.train_split.is_empty() {
        bail!("train split is empty");
    }
    Ok(())
}

/// Conservative frustum/box overlap test: accepts when the camera sits
/// inside the box or when any probe point (8 corners + center) lies in
/// front of the camera within 1.5× the far bound and projects into the
/// image rectangle widened by half its size.
fn frustum_intersects(cam: &Camera, b: &BoundsBlock) -> bool {
    let p = &cam.pose;
    let o = [p[3], p[7], p[11]];
    if (0..3).all(|a| o[a] >= b.min[a] && o[a] <= b.max[a]) {
        return true;
    }
    let mut probes: Vec<[f64; 3]> = Vec::with_capacity(9);
    for i in 0..8 {
        probes.push([
            if i & 1 == 0 { b.min[0] } else { b.max[0] },
            if i & 2 == 0 { b.min[1] } else { b.max[1] },
            if i & 4 == 0 { b.min[2] } else { b.max[2] },
        ]);
    }
    probes.push([
        0.5 * (b.min[0] + b.max[0]),
        0.5 * (b.min[1] + b.max[1]),
        0.5 * (b.min[2] + b.max[2]),
    ]);
    let (w, h) = (cam.width as f64, cam.height as f64);
    for q in probes {
        let d = [q[0] - o[0], q[1] - o[1], q[2] - o[2]];
        // camera frame: columns of the rotation are the camera axes in world
        let xc = p[0] * d[0] + p[4] * d[1] + p[8] * d[2];
        let yc = p[1] * d[0] + p[5] * d[1] + p[9] * d[2];
        let zc = p[2] * d[0] + p[6] * d[1] + p[10] * d[2];
        let depth = -zc; // camera looks down −z
        if depth <= 0.0 || depth > 1.5 * b.t_far {
            continue;
        }
        let u = cam.cx() + cam.fx() * xc / depth;
        let v = cam.cy() - cam.fy() * yc / depth;
        if u >= -0.5 * w && u <= 1.5 * w && v >= -0.5 * h && v <= 1.5 * h {
            return true;
        }
    }
    false
}

/// Parse a manifest, decode every referenced image, validate poses,
/// dimensions, splits, and training-view frusta, and return the dataset
/// with pixels scaled to [0,1].
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing manifest {}", manifest_path.display()))?;
    validate_splits(&manifest)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let bounds = SceneBounds { min: manifest.bounds.min, max: manifest.bounds.max };
    bounds
        .validate()
        .map_err(|e| anyhow!("manifest bounds: {e}"))?;
    if !(manifest.bounds.t_near > 0.0 && manifest.bounds.t_near < manifest.bounds.t_far) {
        bail!(
            "manifest bounds need 0 < t_near < t_far, got {} and {}",
            manifest.bounds.t_near,
            manifest.bounds.t_far
        );
    }
    let k = manifest.camera.intrinsics();
    let mut views = Vec::with_capacity(manifest.frames.len());
    for (i, frame) in manifest.frames.iter().enumerate() {
        let cam = Camera {
            k,
            pose: frame.pose(),
            width: manifest.camera.width,
            height: manifest.camera.height,
        };
        cam.validate()
            .map_err(|e| anyhow!("frame {i} ({}): {e}", frame.image))?;
        let path = base.join(&frame.image);
        let (pixels, w, h) = load_image_rgb(&path)?;
        if (w, h) != (manifest.camera.width, manifest.camera.height) {
            bail!(
                "frame {i} ({}): image is {w}x{h} but the manifest declares {}x{}",
                frame.image,
                manifest.camera.width,
                manifest.camera.height
            );
        }
        views.push(View {
            camera: cam,
            pixels,
            t_near: manifest.bounds.t_near,
            t_far: manifest.bounds.t_far,
        });
    }
    for &i in &manifest.train_split {
        if !frustum_intersects(&views[i].camera, &manifest.bounds) {
            bail!(
                "frame {i} ({}): training view frustum does not intersect the scene box",
                manifest.frames[i].image
            );
        }
    }
    Ok(Dataset { manifest, views, bounds })
}
