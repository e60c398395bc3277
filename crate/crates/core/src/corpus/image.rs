//! Pixel loading: local raster files or synthetic patterns, rescaled to a
//! square and mapped to [−1, 1].

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::types::ImageKey;

/// Side at which synthetic patterns are drawn before rescaling.
pub const SYNTHETIC_SIDE: u32 = 64;

/// `side × side × 3` grid in HWC order with values in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    side: usize,
    data: Vec<f32>,
}

impl PixelImage {
    /// The all-zero image.
    pub fn dummy(side: usize) -> Self {
        PixelImage {
            side,
            data: vec![0.0; side * side * 3],
        }
    }

    pub fn from_rgb(img: &RgbImage, side: usize) -> Self {
        let resized;
        let src = if img.width() as usize == side && img.height() as usize == side {
            img
        } else {
            resized = image::imageops::resize(img, side as u32, side as u32, FilterType::Triangle);
            &resized
        };
        PixelImage {
            side,
            data: src.as_raw().iter().map(|&x| x as f32 / 127.5 - 1.0).collect(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_dummy(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pattern", rename_all = "snake_case")]
pub enum SyntheticSpec {
    Solid {
        rgb: [u8; 3],
    },
    Checker {
        a: [u8; 3],
        b: [u8; 3],
        cell: u32,
    },
    Stripes {
        a: [u8; 3],
        b: [u8; 3],
        width: u32,
        vertical: bool,
    },
    /// `grid × grid` blocks of seeded random colours.
    Blocks {
        seed: u64,
        grid: u32,
    },
}

impl SyntheticSpec {
    pub fn render(&self, size: u32) -> RgbImage {
        match *self {
            SyntheticSpec::Solid { rgb } => RgbImage::from_pixel(size, size, Rgb(rgb)),
            SyntheticSpec::Checker { a, b, cell } => {
                let cell = cell.max(1);
                RgbImage::from_fn(size, size, |x, y| {
                    Rgb(if (x / cell + y / cell) % 2 == 0 { a } else { b })
                })
            }
            SyntheticSpec::Stripes { a, b, width, vertical } => {
                let width = width.max(1);
                RgbImage::from_fn(size, size, |x, y| {
                    let p = if vertical { x } else { y };
                    Rgb(if (p / width) % 2 == 0 { a } else { b })
                })
            }
            SyntheticSpec::Blocks { seed, grid } => {
                let grid = grid.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let colors: Vec<[u8; 3]> = (0..grid * grid).map(|_| rng.random()).collect();
                let cell = size.div_ceil(grid);
                RgbImage::from_fn(size, size, |x, y| Rgb(colors[((y / cell) * grid + x / cell) as usize]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Load a source as a normalized square image.
pub fn load_image(source: &ImageSource, base_dir: &Path, side: usize) -> Result<PixelImage> {
    Ok(PixelImage::from_rgb(&decode_rgb(source, base_dir)?, side))
}

fn decode_rgb(source: &ImageSource, base_dir: &Path) -> Result<RgbImage> {
    match source {
        ImageSource::Synthetic(spec) => Ok(spec.render(SYNTHETIC_SIDE)),
        ImageSource::Path(p) => {
            let full = base_dir.join(p);
            image::open(&full)
                .map(|img| img.to_rgb8())
                .map_err(|e| Error::ImageLoad {
                    image_ref: full.display().to_string(),
                    msg: e.to_string(),
                })
        }
    }
}

/// Map from image id to its source. Relative paths resolve against the
/// directory holding the manifest file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    base_dir: PathBuf,
    entries: BTreeMap<String, ImageSource>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: BTreeMap<String, ImageSource>) -> Self {
        Manifest {
            base_dir: base_dir.into(),
            entries,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        Ok(Manifest {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &BTreeMap<String, ImageSource> {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Listed, and either synthetic or an existing file.
    pub fn is_available(&self, id: &str) -> bool {
        match self.entries.get(id) {
            Some(ImageSource::Synthetic(_)) => true,
            Some(ImageSource::Path(p)) => self.base_dir.join(p).is_file(),
            None => false,
        }
    }

    pub fn load_pixels(&self, key: &ImageKey, side: usize) -> Result<PixelImage> {
        match key {
            ImageKey::Dummy => Ok(PixelImage::dummy(side)),
            ImageKey::Id(id) => {
                let src = self.entries.get(id).ok_or_else(|| Error::ImageLoad {
                    image_ref: id.clone(),
                    msg: "not in manifest".into(),
                })?;
                load_image(src, &self.base_dir, side).map_err(|e| match e {
                    Error::ImageLoad { msg, .. } => Error::ImageLoad {
                        image_ref: id.clone(),
                        msg,
                    },
                    other => other,
                })
            }
        }
    }

    /// Raster bytes and MIME type for serving: files verbatim, synthetic
    /// images encoded as PNG.
    pub fn raster(&self, id: &str) -> Result<(Vec<u8>, &'static str)> {
        let src = self.entries.get(id).ok_or_else(|| Error::ImageLoad {
            image_ref: id.to_string(),
            msg: "not in manifest".into(),
        })?;
        match src {
            ImageSource::Path(p) => {
                let full = self.base_dir.join(p);
                let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
                let mime = match image::guess_format(&bytes) {
                    Ok(image::ImageFormat::Jpeg) => "image/jpeg",
                    Ok(image::ImageFormat::Png) => "image/png",
                    _ => "application/octet-stream",
                };
                Ok((bytes, mime))
            }
            ImageSource::Synthetic(spec) => {
                let mut out = Cursor::new(Vec::new());
                spec.render(SYNTHETIC_SIDE)
                    .write_to(&mut out, image::ImageFormat::Png)
                    .map_err(|e| Error::ImageLoad {
                        image_ref: id.to_string(),
                        msg: e.to_string(),
                    })?;
                Ok((out.into_inner(), "image/png"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dummy_is_all_zero() {
        for side in [1, 4, 32] {
            let d = PixelImage::dummy(side);
            assert_eq!(d.data().len(), side * side * 3);
            assert!(d.is_dummy());
        }
    }

    #[test]
    fn mid_gray_file_normalizes_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        RgbImage::from_pixel(40, 40, Rgb([128, 128, 128])).save(&path).unwrap();
        let img = load_image(&ImageSource::Path("gray.png".into()), dir.path(), 32).unwrap();
        let expected = 128.0 / 127.5 - 1.0;
        assert!(img.data().iter().all(|&x| (x - expected).abs() < 1e-6));
        assert!((expected - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn rescales_to_configured_side() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        RgbImage::from_fn(64, 64, |x, y| Rgb([x as u8, y as u8, 7]))
            .save(&path)
            .unwrap();
        let img = load_image(&ImageSource::Path(path.clone()), Path::new("/"), 32).unwrap();
        assert_eq!(img.side(), 32);
        assert_eq!(img.data().len(), 32 * 32 * 3);
        assert!(img.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn unreadable_file_is_image_error() {
        let err = load_image(&ImageSource::Path("missing.png".into()), Path::new("/nonexistent"), 8).unwrap_err();
        assert!(matches!(err, Error::ImageLoad { image_ref, .. } if image_ref.contains("missing.png")));
    }

    #[test]
    fn synthetic_rendering_is_deterministic_and_distinct() {
        let a = ImageSource::Synthetic(SyntheticSpec::Blocks { seed: 1, grid: 4 });
        let b = ImageSource::Synthetic(SyntheticSpec::Blocks { seed: 2, grid: 4 });
        let base = Path::new(".");
        assert_eq!(load_image(&a, base, 16).unwrap(), load_image(&a, base, 16).unwrap());
        assert_ne!(load_image(&a, base, 16).unwrap(), load_image(&b, base, 16).unwrap());
    }

    #[test]
    fn manifest_json_shape() {
        let json = r#"{"a": {"path": "x.png"}, "b": {"synthetic": {"pattern": "solid", "rgb": [1, 2, 3]}}}"#;
        let entries: BTreeMap<String, ImageSource> = serde_json::from_str(json).unwrap();
        let m = Manifest::new("/nowhere", entries);
        assert!(!m.is_available("a"));
        assert!(m.is_available("b"));
        assert!(!m.is_available("c"));
        assert_eq!(m.raster("b").unwrap().1, "image/png");
    }
}
