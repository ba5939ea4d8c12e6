use std::path::Path;

use image::{GrayImage, ImageBuffer, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

/// RGB image in `[0, 1]`, stored channel-major as `(3, height, width)`.
pub type Image = Array3<f64>;

/// An image together with the binary mask of its texture region.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSample {
    image: Image,
    mask: Array2<bool>,
}

impl TextureSample {
    pub fn new(image: Image, mask: Array2<bool>) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::InvalidSample(format!("expected 3 channels, got {c}")));
        }
        if mask.dim() != (h, w) {
            return Err(Error::InvalidSample(format!(
                "mask {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidSample("pixel values outside [0, 1]".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidSample("mask has no texture pixels".into()));
        }
        Ok(Self { image, mask })
    }

    /// Sample whose mask covers the whole image.
    pub fn full(image: Image) -> Result<Self> {
        let (_, h, w) = image.dim();
        Self::new(image, Array2::from_elem((h, w), true))
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        let image = self.image.slice(s![.., ..height, ..width]).to_owned();
        let mask = self.mask.slice(s![..height, ..width]).to_owned();
        Self::new(image, mask)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let rgb = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Loads a single-channel mask; pixels `>= 128` belong to the texture region.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    let path = path.as_ref();
    let gray = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

pub fn to_rgb8(image: ArrayView3<f64>) -> RgbImage {
    let (_, h, w) = image.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(image: ArrayView3<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    to_rgb8(image).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(mask: &Array2<bool>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}
