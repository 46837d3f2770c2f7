//! Training images: synthetic analytic renders or a folder of PNGs.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, PoseDistribution, Vec3};
use crate::render::{render, RenderConfig, SamplingStrategy};
use crate::rng::stream;
use crate::sdf::{AnalyticScene, AnalyticSdf, SceneColor};

/// Square RGB image, channel planes one after another, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// `3 x (size * size)` tensor, the layout the renderer and the
    /// discriminator use.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(3, self.pixels(), self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_tensor(size: usize, t: &Tensor) -> Self {
        assert_eq!((t.rows, t.cols), (3, size * size), "image tensor shape mismatch");
        Self {
            size,
            data: t.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn rgb(&self, pixel: usize) -> [f32; 3] {
        let p = self.pixels();
        [self.data[pixel], self.data[p + pixel], self.data[2 * p + pixel]]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let c = self.rgb((y * s + x) as usize);
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        assert_eq!(img.width(), img.height(), "image must be square");
        let size = img.width() as usize;
        let p = size * size;
        let mut data = vec![0.0f32; 3 * p];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * p + i] = px.0[c] as f32 / 255.0;
            }
        }
        Self { size, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticSpheres,
    SyntheticBoxes,
    ImageFolder,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-spheres" => Ok(Self::SyntheticSpheres),
            "synthetic-boxes" => Ok(Self::SyntheticBoxes),
            "image-folder" => Ok(Self::ImageFolder),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset {other:?} (expected synthetic-spheres, synthetic-boxes or image-folder)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub resolution: usize,
    pub size: usize,
    pub background: [f64; 3],
    pub poses: PoseDistribution,
    /// Folder of PNG files for `image-folder`.
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticSpheres,
            resolution: 16,
            size: 500,
            background: [1.0; 3],
            poses: PoseDistribution::carla(),
            path: None,
            seed: 0,
        }
    }
}

/// Analytic object behind synthetic image `index`: radius (or half
/// extent) in `[0.3, 0.6]` and a random constant color.
pub fn synthetic_scene(kind: DatasetKind, seed: u64, index: usize) -> AnalyticScene {
    let mut rng = stream(seed, &[0x7379_6e74, index as u64]);
    let size: f64 = rng.random_range(0.3..=0.6);
    let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    let sdf = match kind {
        DatasetKind::SyntheticBoxes => {
            // Keep the box inside the ball of radius 0.6 the frame is sized for.
            let h = size / 3f64.sqrt();
            AnalyticSdf::cuboid(Vec3::ZERO, Vec3::splat(h))
        }
        _ => AnalyticSdf::sphere(Vec3::ZERO, size),
    };
    AnalyticScene::new(sdf, SceneColor::Constant { rgb })
}

/// Camera of synthetic image `index`.
pub fn synthetic_pose(spec: &DatasetSource, index: usize) -> CameraPose {
    spec.poses.sample(&mut stream(spec.seed, &[0x706f_7365, index as u64]))
}

/// Render settings for synthetic images: sharp edges so the background
/// stays exactly the background color.
pub fn synthetic_render_config(background: [f64; 3]) -> RenderConfig {
    RenderConfig {
        strategy: SamplingStrategy::CoarseAccurate,
        n_coarse: 16,
        delta: 0.1,
        beta: 400.0,
        background,
        normals: false,
        ..RenderConfig::default()
    }
}

/// Renders `spec.size` analytic objects at `resolution`. Image `i` depends
/// only on `(spec.seed, i)`.
pub fn synthesize_dataset(spec: &DatasetSource, resolution: usize) -> Result<Vec<Image>> {
    if spec.kind == DatasetKind::ImageFolder {
        return Err(Error::InvalidConfig("synthesize_dataset needs a synthetic dataset kind".into()));
    }
    spec.poses.validate()?;
    let cfg = synthetic_render_config(spec.background);
    (0..spec.size)
        .map(|i| {
            let scene = synthetic_scene(spec.kind, spec.seed, i);
            let out = render(&scene, &synthetic_pose(spec, i), resolution, resolution, &cfg)?;
            let p = resolution * resolution;
            let mut data = vec![0.0f32; 3 * p];
            for (k, rgb) in out.rgb.iter().enumerate() {
                for c in 0..3 {
                    data[c * p + k] = rgb[c] as f32;
                }
            }
            Ok(Image { size: resolution, data })
        })
        .collect()
}

/// Center crop to a square and resize.
fn crop_resize(img: &RgbImage, resolution: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    let crop = image::imageops::crop_imm(img, (w - s) / 2, (h - s) / 2, s, s).to_image();
    if s as usize == resolution {
        crop
    } else {
        image::imageops::resize(&crop, resolution as u32, resolution as u32, FilterType::Triangle)
    }
}

/// Decoded images of a folder, kept at native size so they can be resized
/// for each training stage.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub path: PathBuf,
    originals: Vec<RgbImage>,
}

impl ImageFolder {
    /// Loads every `.png` in `path` in file-name order. Unreadable files
    /// are skipped with a warning.
    pub fn open(path: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        let mut originals = Vec::new();
        for f in &files {
            match image::open(f) {
                Ok(img) => originals.push(img.to_rgb8()),
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
        if originals.is_empty() {
            return Err(Error::NoImages(path.to_path_buf()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            originals,
        })
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn images(&self, resolution: usize) -> Vec<Image> {
        self.originals
            .iter()
            .map(|img| Image::from_rgb8(&crop_resize(img, resolution)))
            .collect()
    }
}

/// Decodes, center-crops and resizes every PNG in `path`.
pub fn load_image_folder(path: &Path, resolution: usize) -> Result<Vec<Image>> {
    Ok(ImageFolder::open(path)?.images(resolution))
}

/// A training set that can be produced at any stage resolution.
#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic(DatasetSource),
    Folder(ImageFolder),
}

impl Dataset {
    pub fn from_source(spec: &DatasetSource) -> Result<Self> {
        match spec.kind {
            DatasetKind::ImageFolder => {
                let path = spec
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("image-folder dataset needs a path".into()))?;
                Ok(Self::Folder(ImageFolder::open(path)?))
            }
            _ => Ok(Self::Synthetic(spec.clone())),
        }
    }

    /// Images at `resolution`; an empty set is an error.
    pub fn images(&self, resolution: usize) -> Result<Vec<Image>> {
        let images = match self {
            Self::Synthetic(spec) => synthesize_dataset(spec, resolution)?,
            Self::Folder(f) => f.images(resolution),
        };
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(images)
    }
}
