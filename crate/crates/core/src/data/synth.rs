use super::{GroundTruthBox, ImageSet, LabeledImage, RawImage};
use crate::error::{Error, Result};
use crate::par;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smallest canvas side that fits a glyph with margin.
pub const MIN_CANVAS: usize = 64;

const MAX_FACES: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 200;

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_canvas(canvas: (usize, usize)) -> Result<()> {
    if canvas.0 < MIN_CANVAS || canvas.1 < MIN_CANVAS {
        return Err(Error::CanvasTooSmall {
            height: canvas.0,
            width: canvas.1,
            min: MIN_CANVAS,
        });
    }
    Ok(())
}

/// `n` images, each with 1–3 non-overlapping face glyphs on a textured
/// background. Output depends only on `(n, canvas, seed)`.
pub fn synth_faces(n: usize, canvas: (usize, usize), seed: u64) -> Result<ImageSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    check_canvas(canvas)?;
    let items = par::map_range(n, |i| {
        let mut rng = image_rng(seed, i);
        let mut canvas_px = Canvas::background(canvas, &mut rng);
        let boxes = place_faces(&mut canvas_px, &mut rng);
        LabeledImage {
            image: canvas_px.into_raw(),
            boxes,
        }
    });
    Ok(ImageSet {
        items,
        split_name: "synthetic".into(),
        seed,
    })
}

/// Face-free images drawn from the same background distribution.
pub fn synth_backgrounds(n: usize, canvas: (usize, usize), seed: u64) -> Result<ImageSet> {
    check_canvas(canvas)?;
    let items = par::map_range(n, |i| {
        let mut rng = image_rng(seed ^ 0x5EED_BAC6, i);
        LabeledImage {
            image: Canvas::background(canvas, &mut rng).into_raw(),
            boxes: Vec::new(),
        }
    });
    Ok(ImageSet {
        items,
        split_name: "backgrounds".into(),
        seed,
    })
}

struct Canvas {
    height: usize,
    width: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn background(canvas: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let (height, width) = canvas;
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..170.0));
        let grad: [f64; 2] = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let freq: [f64; 2] = [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
        let phase: [f64; 2] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
        let amp = rng.random_range(3.0..10.0);
        let mut px = vec![0.0; height * width * 3];
        for y in 0..height {
            for x in 0..width {
                let fy = y as f64 / height as f64 - 0.5;
                let fx = x as f64 / width as f64 - 0.5;
                let wave = amp
                    * ((freq[0] * x as f64 + phase[0]).sin() * (freq[1] * y as f64 + phase[1]).cos());
                for c in 0..3 {
                    let noise = rng.random_range(-6.0..6.0);
                    px[(y * width + x) * 3 + c] = base[c] + grad[0] * fx + grad[1] * fy + wave + noise;
                }
            }
        }
        let mut canvas = Canvas { height, width, px };
        for _ in 0..rng.random_range(0..3) {
            let w = rng.random_range(4..width / 3);
            let h = rng.random_range(4..height / 3);
            let x0 = rng.random_range(0..width - w);
            let y0 = rng.random_range(0..height - h);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..200.0));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    canvas.set(x, y, color);
                }
            }
        }
        // featureless skin-toned blobs: a face is the eyes and mouth, not the ellipse
        let scale = height.min(width) as f64 / MIN_CANVAS as f64;
        for _ in 0..rng.random_range(0..3) {
            let rx = rng.random_range(7.0..13.0) * scale;
            let ry = rx * rng.random_range(0.8..1.3);
            let cx = rng.random_range(0.0..width as f64);
            let cy = rng.random_range(0.0..height as f64);
            let skin = skin_tone(rng);
            canvas.ellipse(cx, cy, rx, ry, || skin);
        }
        canvas
    }

    fn set(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.px[i..i + 3].copy_from_slice(&color);
    }

    /// Fill the ellipse centred at `(cx, cy)` with radii `(rx, ry)`.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, mut color: impl FnMut() -> [f64; 3]) {
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(self.height - 1);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(self.width - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.set(x, y, color());
                }
            }
        }
    }

    fn into_raw(self) -> RawImage {
        let pixels = self.px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        RawImage::new(self.height, self.width, pixels).expect("canvas is large enough")
    }
}

fn place_faces(canvas: &mut Canvas, rng: &mut ChaCha8Rng) -> Vec<GroundTruthBox> {
    let scale = canvas.height.min(canvas.width) as f64 / MIN_CANVAS as f64;
    let wanted = rng.random_range(1..=MAX_FACES);
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(wanted);
    for attempt in 0..PLACEMENT_ATTEMPTS {
        if boxes.len() == wanted {
            break;
        }
        let w = (rng.random_range(14.0..26.0) * scale).round();
        let h = (w * rng.random_range(1.1..1.3)).round();
        let max_x = canvas.width as f64 - w - 1.0;
        let max_y = canvas.height as f64 - h - 1.0;
        let x0 = rng.random_range(1.0..max_x).floor();
        let y0 = rng.random_range(1.0..max_y).floor();
        let candidate = GroundTruthBox::new(x0, y0, x0 + w, y0 + h);
        let gap = 2.0;
        let clear = boxes.iter().all(|b| {
            candidate.x_max + gap <= b.x_min
                || b.x_max + gap <= candidate.x_min
                || candidate.y_max + gap <= b.y_min
                || b.y_max + gap <= candidate.y_min
        });
        if clear || (boxes.is_empty() && attempt + 1 == PLACEMENT_ATTEMPTS) {
            draw_face(canvas, &candidate, rng);
            boxes.push(candidate);
        }
    }
    boxes
}

fn draw_face(canvas: &mut Canvas, b: &GroundTruthBox, rng: &mut ChaCha8Rng) {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let skin = skin_tone(rng);
    let mut noise = ChaCha8Rng::seed_from_u64(rng.random());
    canvas.ellipse(cx, cy, w / 2.0, h / 2.0, || {
        let n = noise.random_range(-4.0..4.0);
        [skin[0] + n, skin[1] + n, skin[2] + n]
    });
    let shade = rng.random_range(45.0..80.0);
    let eye = skin.map(|c| c - shade);
    for side in [-1.0, 1.0] {
        canvas.ellipse(
            cx + side * 0.22 * w,
            cy - 0.12 * h,
            (0.1 * w).max(1.0),
            (0.07 * h).max(1.0),
            || eye,
        );
    }
    let mouth = [skin[0] - 15.0, skin[1] - 55.0, skin[2] - 45.0];
    canvas.ellipse(cx, cy + 0.22 * h, 0.2 * w, (0.05 * h).max(0.8), || mouth);
}

fn skin_tone(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let r = rng.random_range(150.0..225.0);
    let g = r * rng.random_range(0.75..0.85);
    let b = g * rng.random_range(0.8..0.9);
    [r, g, b]
}
