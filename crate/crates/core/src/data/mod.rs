//! Image/mask samples: PNG ingestion, synthetic generation, patching and
//! augmentation.

pub mod augment;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Augmentation, Transform};
pub use synthetic::{generate_synthetic, SyntheticKind, SyntheticSpec};

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

/// An RGB image `[3, H, W]` in `[0, 1]` with its binary mask `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 {
            return Err(Error::shape("sample", format!("image must be [3, H, W], got {is:?}")));
        }
        if ms.len() != 3 || ms[0] != 1 {
            return Err(Error::shape("sample", format!("mask must be [1, H, W], got {ms:?}")));
        }
        if is[1..] != ms[1..] {
            return Err(Error::ExtentMismatch {
                image: (is[1], is[2]),
                mask: (ms[1], ms[2]),
            });
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("sample", "mask values must be exactly 0 or 1"));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Stacks samples into network batches `[N, 3, H, W]` and `[N, 1, H, W]`.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<_> = samples.iter().map(|s| with_batch_axis(&s.image)).collect::<Result<_>>()?;
    let masks: Vec<_> = samples.iter().map(|s| with_batch_axis(&s.mask)).collect::<Result<_>>()?;
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

fn with_batch_axis(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(shape)
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::ImageReader::open(path)?.with_guessed_format()?.decode()?)
}

fn unsupported(path: &Path, detail: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) image into `[3, H, W]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let rgb = match open(path)? {
        DynamicImage::ImageRgb8(img) => img,
        img @ DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        other => {
            return Err(unsupported(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Reads an 8-bit grayscale mask into `[1, H, W]`, binarized at
/// [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let gray = match open(path)? {
        DynamicImage::ImageLuma8(img) => img,
        other => {
            return Err(unsupported(
                path,
                format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| f32::from(u8::from(p[0] >= MASK_THRESHOLD))).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Loads an image/mask pair; the id is the image file stem.
pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(id, image, mask)
}

/// Loads every `images/<id>.png` with its `masks/<id>.png`, sorted by id.
pub fn load_dir(root: &Path) -> Result<Vec<Sample>> {
    let images = root.join("images");
    if !images.is_dir() {
        return Err(Error::MissingFile(images));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_sample(p, &root.join("masks").join(p.file_name().expect("file path"))))
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_png(image: &Tensor<f32>) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("image_to_png", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(d[(c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    }))
}

/// Single-channel map in `[0, 1]` as 8-bit grayscale, `round(p · 255)`.
pub fn map_to_png(map: &Tensor<f32>) -> Result<GrayImage> {
    let s = map.shape();
    let (h, w) = match s {
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => return Err(Error::shape("map_to_png", format!("expected a single-channel map, got {s:?}"))),
    };
    let d = map.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(d[y as usize * w + x as usize])])))
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `root`.
pub fn save_sample(sample: &Sample, root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    let name = format!("{}.png", sample.id);
    image_to_png(&sample.image)?.save(images.join(&name))?;
    map_to_png(&sample.mask)?.save(masks.join(&name))?;
    Ok(())
}

/// Crops (and zero-fills beyond the border) a `[C, H, W]` window.
fn window(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(vec![c, size, size]);
    let (rows, cols) = (size.min(h - y0), size.min(w - x0));
    for ch in 0..c {
        for y in 0..rows {
            let src = &t.data()[(ch * h + y0 + y) * w + x0..][..cols];
            out.data_mut()[(ch * size + y) * size..][..cols].copy_from_slice(src);
        }
    }
    out
}

/// Sliding-window patches anchored at the top-left corner.
///
/// Windows that would extend past the image are dropped unless `pad` is set,
/// in which case they are kept and zero-filled.
pub fn extract_patches(sample: &Sample, patch: usize, stride: usize, pad: bool) -> Result<Vec<Sample>> {
    let (h, w) = (sample.height(), sample.width());
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("extract_patches", "patch and stride must be positive"));
    }
    if patch > h || patch > w {
        return Err(Error::invalid(
            "extract_patches",
            format!("patch {patch} exceeds image extents {h}×{w}"),
        ));
    }
    let anchors = |extent: usize| -> Vec<usize> {
        (0..extent)
            .step_by(stride)
            .filter(|&a| if pad { true } else { a + patch <= extent })
            .collect()
    };
    let mut out = Vec::new();
    for (r, &y) in anchors(h).iter().enumerate() {
        for (c, &x) in anchors(w).iter().enumerate() {
            out.push(Sample {
                id: format!("{}_r{r}_c{c}", sample.id),
                image: window(&sample.image, y, x, patch),
                mask: window(&sample.mask, y, x, patch),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let image = Tensor::from_fn(vec![3, h, w], |i| (i % 251) as f32 / 255.0);
        let mask = Tensor::from_fn(vec![1, h, w], |i| ((i / 7) % 2) as f32);
        Sample::new("s", image, mask).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(extract_patches(&sample(1500, 1500), 512, 512, false).unwrap().len(), 4);
        let one = extract_patches(&sample(512, 512), 512, 512, false).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].image, sample(512, 512).image);
        assert!(extract_patches(&sample(100, 100), 128, 128, false).is_err());
    }

    #[test]
    fn rejects_non_binary_mask() {
        let err = Sample::new("x", Tensor::zeros(vec![3, 2, 2]), Tensor::full(vec![1, 2, 2], 0.5)).unwrap_err();
        assert!(err.to_string().contains("0 or 1"));
    }

    #[test]
    fn extent_mismatch_is_distinct() {
        let err = Sample::new("x", Tensor::zeros(vec![3, 2, 2]), Tensor::zeros(vec![1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::ExtentMismatch { .. }));
    }

    #[test]
    fn collate_stacks() {
        let (a, b) = (sample(4, 4), sample(4, 4));
        let (x, y) = collate(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), [2, 3, 4, 4]);
        assert_eq!(y.shape(), [2, 1, 4, 4]);
    }
}
