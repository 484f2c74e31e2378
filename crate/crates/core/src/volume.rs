//! Synthetic labelled volumes and their on-disk format.
//!
//! A volume `<name>` is stored as three files:
//! - `<name>.json`: `{"shape":[C,H,W,D],"dtype":"f32le","seed":N,"has_labels":bool}`
//! - `<name>.raw`: little-endian `f32` voxels, axis order C,H,W,D with D fastest
//! - `<name>.labels.raw`: one byte per spatial voxel (H,W,D), present iff `has_labels`

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MimError, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 4],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub has_labels: bool,
}

impl VolumeHeader {
    pub fn new(shape: [usize; 4], seed: Option<u64>, has_labels: bool) -> Result<Self> {
        let h = VolumeHeader {
            shape,
            dtype: DTYPE_F32LE.to_string(),
            seed,
            has_labels,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtype != DTYPE_F32LE {
            return Err(MimError::UnknownDtype(self.dtype.clone()));
        }
        let [c, h, w, d] = self.shape;
        if c < 1 || h < 8 || w < 8 || d < 8 {
            return Err(MimError::Config(format!(
                "volume shape {:?} needs C >= 1 and H, W, D >= 8",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spatial_numel(&self) -> usize {
        self.spatial().iter().product()
    }
}

/// A dense `C×H×W×D` voxel grid with optional binary labels over `H×W×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub voxels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(header: VolumeHeader, voxels: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        header.validate()?;
        if voxels.len() != header.numel() {
            return Err(MimError::shape(
                "volume",
                format!("{} voxels for shape {:?}", voxels.len(), header.shape),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != header.spatial_numel() {
                return Err(MimError::shape(
                    "volume",
                    format!("{} labels for spatial shape {:?}", l.len(), header.spatial()),
                ));
            }
        }
        if labels.is_some() != header.has_labels {
            return Err(MimError::shape("volume", "has_labels disagrees with label payload"));
        }
        Ok(Volume {
            header,
            voxels,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.header.shape
    }
}

/// Parameters of the ellipsoid-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_blobs: usize,
    pub blob_radius_range: [f32; 2],
    pub noise_std: f32,
    pub background_level: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_blobs: 3,
            blob_radius_range: [4.0, 9.0],
            noise_std: 0.03,
            background_level: 0.2,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self, spatial: [usize; 3]) -> Result<()> {
        let [lo, hi] = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(MimError::InvalidSpec(format!(
                "blob radius range [{lo}, {hi}] must satisfy 0 < min <= max"
            )));
        }
        let smallest = spatial.iter().copied().min().unwrap_or(0) as f32;
        if self.num_blobs > 0 && 2.0 * hi > smallest {
            return Err(MimError::InvalidSpec(format!(
                "blob diameter {} does not fit in spatial shape {spatial:?}",
                2.0 * hi
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(MimError::InvalidSpec(format!("noise_std {} < 0", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(MimError::InvalidSpec(format!(
                "background_level {} outside [0, 1]",
                self.background_level
            )));
        }
        Ok(())
    }
}

struct Blob {
    center: [f32; 3],
    radii: [f32; 3],
    contrast: f32,
}

impl Blob {
    /// Normalized squared distance; `<= 1` inside the ellipsoid.
    fn rho2(&self, p: [f32; 3]) -> f32 {
        (0..3)
            .map(|a| {
                let t = (p[a] - self.center[a]) / self.radii[a];
                t * t
            })
            .sum()
    }
}

/// Ellipsoids of elevated intensity over a flat background plus Gaussian
/// noise. Blob intensity peaks at the center and falls off toward the rim;
/// labels mark voxels whose centers lie inside any ellipsoid.
pub fn generate_synthetic(seed: u64, shape: [usize; 4], spec: &SyntheticSpec) -> Result<Volume> {
    let header = VolumeHeader::new(shape, Some(seed), true)?;
    let spatial = header.spatial();
    spec.validate(spatial)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [rlo, rhi] = spec.blob_radius_range;

    let blobs: Vec<Blob> = (0..spec.num_blobs)
        .map(|_| {
            let radii: [f32; 3] = std::array::from_fn(|_| {
                if rhi > rlo {
                    rng.random_range(rlo..=rhi)
                } else {
                    rlo
                }
            });
            let center = std::array::from_fn(|a| {
                let (lo, hi) = (radii[a], spatial[a] as f32 - radii[a]);
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            });
            let contrast = rng.random_range(0.4..0.7f32);
            Blob {
                center,
                radii,
                contrast,
            }
        })
        .collect();

    let [h, w, d] = spatial;
    let mut base = Vec::with_capacity(h * w * d);
    let mut labels = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [i as f32 + 0.5, j as f32 + 0.5, k as f32 + 0.5];
                let mut v = spec.background_level;
                let mut inside = false;
                for b in &blobs {
                    let r2 = b.rho2(p);
                    if r2 <= 1.0 {
                        inside = true;
                        v = v.max(spec.background_level + b.contrast * (1.0 - 0.5 * r2));
                    }
                }
                base.push(v);
                labels.push(inside as u8);
            }
        }
    }

    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0f32, spec.noise_std).expect("validated std"));
    let mut raw = Vec::with_capacity(header.numel());
    for _ in 0..header.channels() {
        for &v in &base {
            let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            raw.push(v + n);
        }
    }
    let voxels = normalize_intensity(&raw, 0.0, 1.0)?;
    Volume::new(header, voxels, Some(labels))
}

/// `clamp((raw - lo) / (hi - lo), 0, 1)`.
pub fn normalize_intensity(raw: &[f32], lo: f32, hi: f32) -> Result<Vec<f32>> {
    if !(lo < hi) {
        return Err(MimError::InvalidRange { lo, hi });
    }
    let span = hi - lo;
    Ok(raw
        .iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect())
}

/// Maps `dir/name`, `dir/name.json` or `dir/name.raw` to the base path `dir/name`.
fn base_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for ext in [".labels.raw", ".json", ".raw"] {
        if let Some(stripped) = s.strip_suffix(ext) {
            return PathBuf::from(stripped);
        }
    }
    path.to_path_buf()
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let base = base_path(path.as_ref());
    let header_path = with_suffix(&base, ".json");
    let json = serde_json::to_vec(&v.header).map_err(|e| MimError::json(&header_path, e))?;
    fs::write(&header_path, json).map_err(|e| MimError::io(&header_path, e))?;

    let raw_path = with_suffix(&base, ".raw");
    let mut bytes = Vec::with_capacity(v.voxels.len() * 4);
    for &x in &v.voxels {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| MimError::io(&raw_path, e))?;

    let labels_path = with_suffix(&base, ".labels.raw");
    match &v.labels {
        Some(labels) => fs::write(&labels_path, labels).map_err(|e| MimError::io(&labels_path, e))?,
        None if labels_path.exists() => {
            fs::remove_file(&labels_path).map_err(|e| MimError::io(&labels_path, e))?
        }
        None => {}
    }
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let base = base_path(path.as_ref());
    let header_path = with_suffix(&base, ".json");
    let text = fs::read(&header_path).map_err(|e| MimError::io(&header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_slice(&text).map_err(|e| MimError::json(&header_path, e))?;
    header.validate()?;

    let raw_path = with_suffix(&base, ".raw");
    let bytes = fs::read(&raw_path).map_err(|e| MimError::io(&raw_path, e))?;
    let expected = header.numel() * 4;
    if bytes.len() != expected {
        return Err(MimError::LengthMismatch {
            path: raw_path,
            expected,
            found: bytes.len(),
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels = if header.has_labels {
        let labels_path = with_suffix(&base, ".labels.raw");
        let labels = fs::read(&labels_path).map_err(|e| MimError::io(&labels_path, e))?;
        if labels.len() != header.spatial_numel() {
            return Err(MimError::LengthMismatch {
                path: labels_path,
                expected: header.spatial_numel(),
                found: labels.len(),
            });
        }
        Some(labels)
    } else {
        None
    };
    Volume::new(header, voxels, labels)
}

/// Base paths of every volume header in `dir`, sorted by file name.
pub fn list_volumes(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| MimError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| MimError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.ends_with(".json") && path.with_extension("raw").exists() {
            out.push(base_path(&path));
        }
    }
    out.sort();
    Ok(out)
}
