//! Three-panel PNG: clean image with its detections, the magnified
//! perturbation, and the attacked image with its detections.

use crate::data::ImageTensor;
use crate::detector::DetectionList;
use crate::error::{Error, Result};
use crate::generator::Perturbation;
use image::{Rgb, RgbImage};
use std::path::Path;

/// Border around and between panels, in pixels.
pub const FIGURE_MARGIN: u32 = 4;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);
const CLEAN_BOX: Rgb<u8> = Rgb([40, 220, 60]);
const ATTACKED_BOX: Rgb<u8> = Rgb([235, 50, 40]);

/// 3×5 bitmaps for the digits 0-9, one row per byte (low three bits).
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn put(canvas: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
        canvas.put_pixel(x as u32, y as u32, color);
    }
}

fn blit(canvas: &mut RgbImage, x0: u32, y0: u32, img: &ImageTensor) {
    let raw = img.to_raw();
    for y in 0..raw.height {
        for x in 0..raw.width {
            let i = (y * raw.width + x) * 3;
            let px = Rgb([raw.pixels[i], raw.pixels[i + 1], raw.pixels[i + 2]]);
            canvas.put_pixel(x0 + x as u32, y0 + y as u32, px);
        }
    }
}

fn draw_detections(canvas: &mut RgbImage, x0: u32, y0: u32, dets: &DetectionList, color: Rgb<u8>, clip: (u32, u32)) {
    let (w, h) = (clip.0 as i64, clip.1 as i64);
    for (b, &conf) in dets.boxes.iter().zip(&dets.confidences) {
        let left = (b.x_min.floor() as i64).clamp(0, w - 1);
        let right = ((b.x_max.ceil() as i64) - 1).clamp(0, w - 1);
        let top = (b.y_min.floor() as i64).clamp(0, h - 1);
        let bottom = ((b.y_max.ceil() as i64) - 1).clamp(0, h - 1);
        let (ox, oy) = (x0 as i64, y0 as i64);
        for x in left..=right {
            put(canvas, ox + x, oy + top, color);
            put(canvas, ox + x, oy + bottom, color);
        }
        for y in top..=bottom {
            put(canvas, ox + left, oy + y, color);
            put(canvas, ox + right, oy + y, color);
        }
        // two-digit percentage just inside the top-left corner
        let pct = ((conf * 100.0).floor() as usize).min(99);
        for (k, digit) in [pct / 10, pct % 10].into_iter().enumerate() {
            let gx = ox + left + 2 + 4 * k as i64;
            let gy = oy + top + 2;
            for (row, bits) in DIGITS[digit].iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 && gx + col < ox + w && gy + (row as i64) < oy + h {
                        put(canvas, gx + col, gy + row as i64, color);
                    }
                }
            }
        }
    }
}

/// Compose the figure in memory. The middle panel maps `δ = 0` to mid-gray
/// and scales deviations by `magnify`.
pub fn render_figure(
    x: &ImageTensor,
    x_prime: &ImageTensor,
    delta: &Perturbation,
    detections_clean: &DetectionList,
    detections_attacked: &DetectionList,
    magnify: f64,
) -> Result<RgbImage> {
    if !(magnify > 0.0 && magnify.is_finite()) {
        return Err(Error::InvalidArgument(format!("magnify must be positive, got {magnify}")));
    }
    if x.shape() != x_prime.shape() || x.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", x.height(), x.width()),
            actual: format!(
                "{}x{} / {}x{}",
                x_prime.height(),
                x_prime.width(),
                delta.shape().0,
                delta.shape().1
            ),
        });
    }
    let (h, w) = (x.height() as u32, x.width() as u32);
    let m = FIGURE_MARGIN;
    let mut canvas = RgbImage::from_pixel(3 * w + 4 * m, h + 2 * m, BACKGROUND);

    blit(&mut canvas, m, m, x);
    draw_detections(&mut canvas, m, m, detections_clean, CLEAN_BOX, (w, h));

    let x_mid = 2 * m + w;
    for (i, px) in delta.values().chunks_exact(3).enumerate() {
        let (yy, xx) = (i as u32 / w, i as u32 % w);
        let c = |d: f64| (127.5 + magnify * d * 127.5).round().clamp(0.0, 255.0) as u8;
        canvas.put_pixel(x_mid + xx, m + yy, Rgb([c(px[0]), c(px[1]), c(px[2])]));
    }

    let x_right = 3 * m + 2 * w;
    blit(&mut canvas, x_right, m, x_prime);
    draw_detections(&mut canvas, x_right, m, detections_attacked, ATTACKED_BOX, (w, h));
    Ok(canvas)
}

/// Write the figure as a PNG.
pub fn export_figure(
    x: &ImageTensor,
    x_prime: &ImageTensor,
    delta: &Perturbation,
    detections_clean: &DetectionList,
    detections_attacked: &DetectionList,
    magnify: f64,
    path: &Path,
) -> Result<()> {
    let canvas = render_figure(x, x_prime, delta, detections_clean, detections_attacked, magnify)?;
    canvas.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn empty() -> DetectionList {
        DetectionList {
            boxes: vec![],
            confidences: vec![],
            threshold_used: 0.7,
        }
    }

    #[test]
    fn zero_perturbation_panel_is_mid_gray() {
        let x = ImageTensor::filled(16, 20, 0.3).unwrap();
        let fig = render_figure(&x, &x, &Perturbation::zeros(16, 20), &empty(), &empty(), 10.0).unwrap();
        assert_eq!(fig.width(), 3 * 20 + 4 * FIGURE_MARGIN);
        assert_eq!(fig.height(), 16 + 2 * FIGURE_MARGIN);
        let x0 = 2 * FIGURE_MARGIN + 20;
        for y in FIGURE_MARGIN..FIGURE_MARGIN + 16 {
            for x in x0..x0 + 20 {
                assert_eq!(fig.get_pixel(x, y), &Rgb([128, 128, 128]));
            }
        }
    }

    #[test]
    fn boxes_are_drawn_and_png_decodes() {
        let x = ImageTensor::filled(32, 32, -0.5).unwrap();
        let dets = DetectionList {
            boxes: vec![BBox::new(4.0, 4.0, 28.0, 28.0)],
            confidences: vec![0.93],
            threshold_used: 0.7,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.png");
        export_figure(&x, &x, &Perturbation::zeros(32, 32), &dets, &empty(), 10.0, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.width(), 3 * 32 + 4 * FIGURE_MARGIN);
        assert_eq!(back.get_pixel(FIGURE_MARGIN + 4, FIGURE_MARGIN + 10), &CLEAN_BOX);
    }

    #[test]
    fn rejects_non_positive_magnify() {
        let x = ImageTensor::filled(16, 16, 0.0).unwrap();
        assert!(render_figure(&x, &x, &Perturbation::zeros(16, 16), &empty(), &empty(), 0.0).is_err());
    }
}
