//! Image loading, letterboxing to the network input, and box overlays.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader, Rgb, RgbImage};
use thiserror::Error;

use crate::postprocess::{BBox, Detection};
use crate::tensor::{Shape, Tensor};

/// Padding value of letterboxed inputs.
pub const PAD_GRAY: f32 = 0.5;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image has zero area")]
    Empty,
}

/// Reads a PPM (P6) or PNG file as 8-bit RGB.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage, ImagingError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = ImageReader::open(path)
        .map_err(|source| ImagingError::Io {
            path: shown.clone(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| ImagingError::Io {
            path: shown.clone(),
            source,
        })?;
    let img = reader
        .decode()
        .map_err(|source| ImagingError::Decode { path: shown, source })?
        .to_rgb8();
    if img.width() == 0 || img.height() == 0 {
        return Err(ImagingError::Empty);
    }
    Ok(img)
}

/// Writes `img`; `.ppm` files are binary P6, anything else follows the
/// extension.
pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    let shown = || path.display().to_string();
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if !is_ppm {
        return img.save(path).map_err(|source| ImagingError::Decode { path: shown(), source });
    }
    let file = File::create(path).map_err(|source| ImagingError::Io { path: shown(), source })?;
    let mut sink = BufWriter::new(file);
    PnmEncoder::new(&mut sink)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|source| ImagingError::Decode { path: shown(), source })?;
    sink.flush().map_err(|source| ImagingError::Io { path: shown(), source })
}

/// `1×3×H×W` tensor in `[0, 1]`.
pub fn to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Aspect-preserving placement of a source image inside the network input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_w: u32,
    pub src_h: u32,
    pub dst_w: u32,
    pub dst_h: u32,
    pub scale: f64,
    /// Resized content size.
    pub inner_w: u32,
    pub inner_h: u32,
    pub pad_x: u32,
    pub pad_y: u32,
}

impl Letterbox {
    pub fn fit(src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> Self {
        let scale = (dst_w as f64 / src_w as f64).min(dst_h as f64 / src_h as f64);
        let inner_w = ((src_w as f64 * scale).round() as u32).clamp(1, dst_w);
        let inner_h = ((src_h as f64 * scale).round() as u32).clamp(1, dst_h);
        Letterbox {
            src_w,
            src_h,
            dst_w,
            dst_h,
            scale,
            inner_w,
            inner_h,
            pad_x: (dst_w - inner_w) / 2,
            pad_y: (dst_h - inner_h) / 2,
        }
    }

    fn sx(&self) -> f64 {
        self.inner_w as f64 / self.src_w as f64
    }

    fn sy(&self) -> f64 {
        self.inner_h as f64 / self.src_h as f64
    }

    /// Source-image box to network-input pixels.
    pub fn to_input(&self, b: &BBox) -> BBox {
        BBox::new(
            b.cx * self.sx() + self.pad_x as f64,
            b.cy * self.sy() + self.pad_y as f64,
            b.w * self.sx(),
            b.h * self.sy(),
        )
    }

    /// Network-input box back to source-image pixels, clipped to the image.
    pub fn to_source(&self, b: &BBox) -> BBox {
        let (x1, y1, x2, y2) = b.corners();
        let ux = |x: f64| ((x - self.pad_x as f64) / self.sx()).clamp(0.0, self.src_w as f64);
        let uy = |y: f64| ((y - self.pad_y as f64) / self.sy()).clamp(0.0, self.src_h as f64);
        BBox::from_corners(ux(x1), uy(y1), ux(x2), uy(y2))
    }
}

/// Resizes `img` into a `dst_w×dst_h` gray canvas and returns the network
/// input with its placement.
pub fn letterbox(img: &RgbImage, dst_w: u32, dst_h: u32) -> (Tensor<f32>, Letterbox) {
    let lb = Letterbox::fit(img.width(), img.height(), dst_w, dst_h);
    let resized = if (lb.inner_w, lb.inner_h) == (img.width(), img.height()) {
        img.clone()
    } else {
        imageops::resize(img, lb.inner_w, lb.inner_h, FilterType::Triangle)
    };
    let t = Tensor::from_fn(Shape::new(1, 3, dst_h as usize, dst_w as usize), |_, c, y, x| {
        let (x, y) = (x as u32, y as u32);
        if x >= lb.pad_x && x < lb.pad_x + lb.inner_w && y >= lb.pad_y && y < lb.pad_y + lb.inner_h {
            resized.get_pixel(x - lb.pad_x, y - lb.pad_y).0[c] as f32 / 255.0
        } else {
            PAD_GRAY
        }
    });
    (t, lb)
}

const CLASS_COLORS: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
];

/// Outlines every detection with a class-colored rectangle.
pub fn draw_detections(img: &mut RgbImage, dets: &[Detection], thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    for d in dets {
        let color = Rgb(CLASS_COLORS[d.class_id % CLASS_COLORS.len()]);
        let (x1, y1, x2, y2) = d.bbox.corners();
        let x1 = (x1.round() as i64).clamp(0, w - 1);
        let y1 = (y1.round() as i64).clamp(0, h - 1);
        let x2 = (x2.round() as i64).clamp(0, w - 1);
        let y2 = (y2.round() as i64).clamp(0, h - 1);
        for t in 0..thickness as i64 {
            for x in x1..=x2 {
                for y in [y1 + t, y2 - t] {
                    if (y1..=y2).contains(&y) {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
            for y in y1..=y2 {
                for x in [x1 + t, x2 - t] {
                    if (x1..=x2).contains(&x) {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_image_is_padded_vertically() {
        let img = RgbImage::from_pixel(200, 100, Rgb([255, 0, 0]));
        let (t, lb) = letterbox(&img, 64, 64);
        assert_eq!((lb.inner_w, lb.inner_h, lb.pad_x, lb.pad_y), (64, 32, 0, 16));
        assert_eq!(t.get(0, 0, 0, 10), PAD_GRAY);
        assert_eq!(t.get(0, 0, 30, 10), 1.0);
        assert_eq!(t.get(0, 1, 30, 10), 0.0);
    }

    #[test]
    fn inverse_mapping_round_trips() {
        let lb = Letterbox::fit(640, 480, 416, 416);
        let b = BBox::new(320.0, 200.0, 100.0, 60.0);
        let back = lb.to_source(&lb.to_input(&b));
        for (a, c) in [(b.cx, back.cx), (b.cy, back.cy), (b.w, back.w), (b.h, back.h)] {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut img = RgbImage::from_pixel(20, 10, Rgb([10, 20, 30]));
        draw_detections(
            &mut img,
            &[Detection {
                bbox: BBox::new(10.0, 5.0, 8.0, 6.0),
                class_id: 1,
                score: 0.9,
            }],
            1,
        );
        save_rgb(&img, &path).unwrap();
        assert_eq!(load_rgb(&path).unwrap(), img);
        assert_eq!(&std::fs::read(&path).unwrap()[..2], b"P6");
    }
}
