//! Five-patch decomposition and per-patch normalization.
//!
//! Every image yields four quadrant crops plus a center crop of the same
//! size. When both extents are multiples of four the center overlaps each
//! corner in exactly one quarter of the patch area. Each crop is resized to
//! 256x256 with bilinear interpolation and normalized per channel.

use std::fmt;
use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::dataset::{one_hot, ImageRecord, NUM_CLASSES};
use crate::error::{Error, Result};

pub const PATCH_SIZE: usize = 256;
pub const CHANNELS: usize = 3;
pub const NUM_PATCHES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl PatchPosition {
    pub const ALL: [PatchPosition; NUM_PATCHES] = [
        PatchPosition::TopLeft,
        PatchPosition::TopRight,
        PatchPosition::BottomLeft,
        PatchPosition::BottomRight,
        PatchPosition::Center,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatchPosition::TopLeft => "top_left",
            PatchPosition::TopRight => "top_right",
            PatchPosition::BottomLeft => "bottom_left",
            PatchPosition::BottomRight => "bottom_right",
            PatchPosition::Center => "center",
        }
    }
}

impl fmt::Display for PatchPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PatchRect {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn intersection(&self, other: &PatchRect) -> Option<PatchRect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 > x0 && y1 > y0).then(|| PatchRect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// The five crop rectangles, indexed by [`PatchPosition::index`].
///
/// Corners are `floor(w/2) x floor(h/2)` anchored at `0` and `ceil(·/2)`;
/// the center has the same size anchored at `floor(·/4)`. For odd extents
/// the middle row or column is not covered by any corner.
pub fn patch_rects(width: u32, height: u32) -> Result<[PatchRect; NUM_PATCHES]> {
    if width < 2 || height < 2 {
        return Err(Error::Geometry(format!(
            "image is {width}x{height}; both sides must be at least 2"
        )));
    }
    let (w, h) = (width / 2, height / 2);
    let (right, bottom) = (width.div_ceil(2), height.div_ceil(2));
    let rect = |x, y| PatchRect { x, y, w, h };
    Ok([
        rect(0, 0),
        rect(right, 0),
        rect(0, bottom),
        rect(right, bottom),
        rect(width / 4, height / 4),
    ])
}

/// Pixel-exact crop.
pub fn extract_patch(image: &DynamicImage, rect: PatchRect) -> Result<DynamicImage> {
    if !rect.fits_within(image.width(), image.height()) {
        return Err(Error::Geometry(format!(
            "rect {rect:?} exceeds {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(image.crop_imm(rect.x, rect.y, rect.w, rect.h))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelScale {
    /// Pixel values mapped to `[0, 1]`.
    #[default]
    Unit,
}

/// Per-channel normalization declared by a backbone: `(v - mean) / std`
/// applied after scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocSpec {
    pub scale: PixelScale,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocSpec {
    pub fn identity() -> Self {
        PreprocSpec {
            scale: PixelScale::Unit,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "preprocessing needs finite means and positive stds, got {self:?}"
            )))
        }
    }
}

impl Default for PreprocSpec {
    fn default() -> Self {
        Self::identity()
    }
}

/// Dense `(height, width, channels)` array, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        if dims.0 * dims.1 * dims.2 != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {} values, got {}",
                dims.0 * dims.1 * dims.2,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite tensor value {bad}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: (usize, usize, usize), value: f32) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.dims.1 + x) * self.dims.2 + c]
    }
}

/// Converts to RGB floats in `[0, 1]`. Gray is replicated, alpha dropped.
fn to_unit_rgb(image: &DynamicImage) -> (usize, usize, Vec<f32>) {
    let rgb = image.to_rgb32f();
    (rgb.width() as usize, rgb.height() as usize, rgb.into_raw())
}

/// Bilinear resize of an interleaved RGB buffer with half-pixel centers.
fn bilinear_resize(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    // Source coordinate and blend weight for each destination index.
    fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
        let scale = src_len as f64 / dst_len as f64;
        (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, (s - i0 as f64).min(1.0) as f32)
            })
            .collect()
    }
    let xs = taps(sw, dw);
    let ys = taps(sh, dh);
    let at = |x: usize, y: usize, c: usize| src[(y * sw + x) * CHANNELS + c];
    // a + t (b - a) returns `a` exactly when a == b, so constants survive.
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);

    let mut out = Vec::with_capacity(dw * dh * CHANNELS);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..CHANNELS {
                let top = lerp(at(x0, y0, c), at(x1, y0, c), tx);
                let bottom = lerp(at(x0, y1, c), at(x1, y1, c), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

pub fn resize_normalize(patch: &DynamicImage, preproc: &PreprocSpec) -> Result<Tensor> {
    if patch.width() == 0 || patch.height() == 0 {
        return Err(Error::Geometry("cannot normalize an empty patch".into()));
    }
    let (sw, sh, rgb) = to_unit_rgb(patch);
    let mut data = bilinear_resize(&rgb, sw, sh, PATCH_SIZE, PATCH_SIZE);
    for px in data.chunks_exact_mut(CHANNELS) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = (*v - preproc.mean[c]) / preproc.std[c];
        }
    }
    Tensor::new((PATCH_SIZE, PATCH_SIZE, CHANNELS), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub image_id: String,
    /// Indexed by [`PatchPosition::index`].
    pub patches: [Tensor; NUM_PATCHES],
    pub label: Vec<f32>,
}

impl PatchSet {
    pub fn get(&self, position: PatchPosition) -> &Tensor {
        &self.patches[position.index()]
    }
}

/// Decodes a PNG or JPEG file, sniffing the format from its content.
pub fn open_image(path: &Path) -> Result<DynamicImage> {
    let to_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    image::ImageReader::open(path)
        .map_err(|e| to_err(image::ImageError::IoError(e)))?
        .with_guessed_format()
        .map_err(|e| to_err(image::ImageError::IoError(e)))?
        .decode()
        .map_err(to_err)
}

/// The five preprocessed patch tensors of an image, in position order.
pub fn patchify(image: &DynamicImage, preproc: &PreprocSpec) -> Result<[Tensor; NUM_PATCHES]> {
    let rects = patch_rects(image.width(), image.height())?;
    let mut tensors = Vec::with_capacity(NUM_PATCHES);
    for rect in rects {
        let crop = extract_patch(image, rect)?;
        tensors.push(resize_normalize(&crop, preproc)?);
    }
    Ok(tensors
        .try_into()
        .expect("exactly one tensor per patch position"))
}

pub fn make_patch_set(
    record: &ImageRecord,
    image: &DynamicImage,
    preproc: &PreprocSpec,
) -> Result<PatchSet> {
    if (image.width(), image.height()) != (record.width, record.height) {
        return Err(Error::Shape(format!(
            "image {} is {}x{} but the manifest says {}x{}",
            record.id,
            image.width(),
            image.height(),
            record.width,
            record.height
        )));
    }
    Ok(PatchSet {
        image_id: record.id.clone(),
        patches: patchify(image, preproc)?,
        label: one_hot(record.label, NUM_CLASSES)?,
    })
}
