//! The in-memory raster type, PNG I/O, luma conversion and patch sampling.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-major raster with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
        Self { channels, height, width, data: vec![v; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data).expect("non-empty dimensions")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let (c, h, w) = t.dims3();
        Self::new(c, h, w, t.data().iter().map(|v| v.as_f64()).collect()).expect("tensor dims are non-zero")
    }

    /// Copy with every value clamped to `[0, 1]` (export-time only).
    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Largest top-left crop whose sides are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<Self> {
        let (h, w) = (self.height / s * s, self.width / s * s);
        self.crop(0, 0, h, w)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::UnsupportedFormat(format!("{} is not a PNG file", path.display())));
    }
    let img = reader.decode().map_err(|e| Error::Decode { path: path.into(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw, max): (usize, Vec<f64>, f64) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: {:?} (expected 8/16-bit gray or RGB without alpha)",
                path.display(),
                other.color()
            )))
        }
    };
    let mut data = vec![0.0; raw.len()];
    for (i, v) in raw.into_iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        data[c * h * w + pix] = v / max;
    }
    Image::new(channels, h, w, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes an image as PNG; values are clamped to `[0, 1]` and quantized.
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.shape();
    let interleave = |max: f64| -> Vec<f64> {
        let mut out = Vec::with_capacity(c * h * w);
        for pix in 0..h * w {
            for ch in 0..c {
                out.push(quantize(img.data()[ch * h * w + pix], max));
            }
        }
        out
    };
    let (wu, hu) = (w as u32, h as u32);
    let dynimg = match (c, depth) {
        (1, BitDepth::Eight) => {
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, interleave(255.0).into_iter().map(|v| v as u8).collect()).unwrap())
        }
        (3, BitDepth::Eight) => {
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, interleave(255.0).into_iter().map(|v| v as u8).collect()).unwrap())
        }
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, interleave(65535.0).into_iter().map(|v| v as u16).collect()).unwrap(),
        ),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(wu, hu, interleave(65535.0).into_iter().map(|v| v as u16).collect()).unwrap(),
        ),
        _ => return Err(Error::UnsupportedFormat(format!("cannot write {c}-channel image"))),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynimg
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.into(), message: e.to_string() })
}

/// BT.601 luma weights (R, G, B), studio-swing scale factors over 255.
pub const BT601_STUDIO: [f64; 3] = [65.481, 128.553, 24.966];
const STUDIO_RANGE: f64 = 219.0;
const STUDIO_OFFSET: f64 = 16.0;

fn check_rgb(img: &Image) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("luma conversion needs 3 channels, got {}", img.channels())));
    }
    Ok(())
}

/// BT.601 luma normalised to the full `[0, 1]` range (offset-free).
/// This is the variant used by the metrics.
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    check_rgb(img)?;
    let w = BT601_STUDIO.map(|c| c / STUDIO_RANGE);
    Ok(Image::from_fn(1, img.height(), img.width(), |_, y, x| {
        w[0] * img.get(0, y, x) + w[1] * img.get(1, y, x) + w[2] * img.get(2, y, x)
    }))
}

/// BT.601 studio-swing luma `(16 + 65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y_studio(img: &Image) -> Result<Image> {
    check_rgb(img)?;
    Ok(Image::from_fn(1, img.height(), img.width(), |_, y, x| {
        (STUDIO_OFFSET
            + BT601_STUDIO[0] * img.get(0, y, x)
            + BT601_STUDIO[1] * img.get(1, y, x)
            + BT601_STUDIO[2] * img.get(2, y, x))
            / 255.0
    }))
}

/// HR patch geometry and the augmentation flips that may be applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub lr_patch_size: usize,
    pub scale: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl PatchSpec {
    pub fn hr_size(&self) -> usize {
        self.lr_patch_size * self.scale
    }

    pub fn validate_for(&self, img: &Image) -> Result<()> {
        let p = self.hr_size();
        if p == 0 {
            return Err(Error::Invalid("patch size must be positive".into()));
        }
        if p > img.height().min(img.width()) {
            return Err(Error::Shape(format!(
                "HR patch {p}x{p} does not fit a {}x{} image",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

/// Where a patch came from and which flips were applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub top: usize,
    pub left: usize,
    pub horizontal: bool,
    pub vertical: bool,
}

/// Draws a patch with the given rng: top-left uniform over valid corners,
/// then an optional horizontal and vertical flip, each with probability 1/2.
pub fn random_patch_with<R: Rng>(hr: &Image, spec: &PatchSpec, rng: &mut R) -> Result<(Image, FlipRecord)> {
    spec.validate_for(hr)?;
    let p = spec.hr_size();
    let top = rng.random_range(0..=hr.height() - p);
    let left = rng.random_range(0..=hr.width() - p);
    let horizontal = spec.flip_horizontal && rng.random_bool(0.5);
    let vertical = spec.flip_vertical && rng.random_bool(0.5);
    let mut patch = hr.crop(top, left, p, p)?;
    if horizontal {
        patch = patch.flip_horizontal();
    }
    if vertical {
        patch = patch.flip_vertical();
    }
    Ok((patch, FlipRecord { top, left, horizontal, vertical }))
}

/// Deterministic patch draw: a pure function of `(hr, spec, seed)`.
pub fn random_patch_pair(hr: &Image, spec: &PatchSpec, seed: u64) -> Result<(Image, FlipRecord)> {
    random_patch_with(hr, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(name);
        (d, p)
    }

    #[test]
    fn white_and_black_pngs_load_to_extremes() {
        for (v, want) in [(255u8, 1.0), (0u8, 0.0)] {
            let (_d, p) = tmp("x.png");
            image::RgbImage::from_pixel(2, 2, Rgb([v, v, v])).save(&p).unwrap();
            let img = load_image(&p).unwrap();
            assert_eq!(img.shape(), (3, 2, 2));
            assert!(img.data().iter().all(|&x| x == want));
        }
    }

    #[test]
    fn channel_order_is_rgb() {
        let (_d, p) = tmp("c.png");
        image::RgbImage::from_pixel(1, 1, Rgb([255, 0, 51])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let (_d, p) = tmp("s.png");
        let img = Image::from_fn(3, 3, 4, |c, y, x| ((c * 12 + y * 4 + x) as f64 / 40.0).fract());
        save_image(&img, &p, BitDepth::Sixteen).unwrap();
        let back = load_image(&p).unwrap();
        let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 65535.0 + 1e-15);
    }

    #[test]
    fn alpha_and_lossy_inputs_are_rejected() {
        let (_d, p) = tmp("a.png");
        image::RgbaImage::from_pixel(2, 2, image::Rgba([1, 2, 3, 4])).save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(Error::UnsupportedFormat(_))));
        let (_d2, p2) = tmp("fake.png");
        std::fs::write(&p2, b"GIF89a....").unwrap();
        assert!(load_image(&p2).is_err());
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn luma_extremes_and_red_coefficient() {
        let white = Image::filled(3, 2, 2, 1.0);
        assert!(rgb_to_y(&white).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(rgb_to_y(&Image::filled(3, 1, 1, 0.0)).unwrap().data()[0].abs() < 1e-15);
        let red = Image::from_fn(3, 1, 1, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        assert!((rgb_to_y(&red).unwrap().data()[0] - 65.481 / 219.0).abs() < 1e-15);
        assert!((rgb_to_y_studio(&white).unwrap().data()[0] - 235.0 / 255.0).abs() < 1e-12);
        assert!(rgb_to_y(&Image::filled(1, 2, 2, 0.5)).is_err());
    }

    #[test]
    fn patch_without_flips_covers_whole_square_image() {
        let img = Image::from_fn(3, 48 * 2, 48 * 2, |c, y, x| (c + y * 7 + x) as f64 / 1000.0);
        let spec = PatchSpec { lr_patch_size: 48, scale: 2, flip_horizontal: false, flip_vertical: false };
        let (p, rec) = random_patch_pair(&img, &spec, 3).unwrap();
        assert_eq!(p, img);
        assert_eq!((rec.top, rec.left), (0, 0));
    }

    #[test]
    fn patch_too_large_is_an_error() {
        let img = Image::filled(3, 10, 10, 0.0);
        let spec = PatchSpec { lr_patch_size: 3, scale: 4, flip_horizontal: true, flip_vertical: true };
        assert!(random_patch_pair(&img, &spec, 0).is_err());
    }
}
