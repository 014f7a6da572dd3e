use crate::geometry::BBox;
use serde::{Deserialize, Serialize};

/// Reference box tiled over feature-map cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center_x: f64,
    pub center_y: f64,
    /// Square root of the anchor area, in pixels.
    pub scale: f64,
    /// Height over width.
    pub aspect_ratio: f64,
}

impl Anchor {
    pub fn width(&self) -> f64 {
        self.scale / self.aspect_ratio.sqrt()
    }

    pub fn height(&self) -> f64 {
        self.scale * self.aspect_ratio.sqrt()
    }

    pub fn to_box(&self) -> BBox {
        BBox::from_center(self.center_x, self.center_y, self.width(), self.height())
    }

    /// Regression targets `(dx, dy, dw, dh)` that map this anchor onto `target`.
    pub fn encode(&self, target: &BBox) -> [f64; 4] {
        let (cx, cy) = target.center();
        [
            (cx - self.center_x) / self.width(),
            (cy - self.center_y) / self.height(),
            (target.width() / self.width()).ln(),
            (target.height() / self.height()).ln(),
        ]
    }

    /// Inverse of [`Anchor::encode`], with log-size deltas clamped.
    pub fn decode(&self, deltas: &[f64]) -> BBox {
        const MAX_LOG: f64 = 4.0;
        let cx = self.center_x + deltas[0] * self.width();
        let cy = self.center_y + deltas[1] * self.height();
        let w = self.width() * deltas[2].clamp(-MAX_LOG, MAX_LOG).exp();
        let h = self.height() * deltas[3].clamp(-MAX_LOG, MAX_LOG).exp();
        BBox::from_center(cx, cy, w, h)
    }
}

/// Scales and aspect ratios laid down at every feature-map cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![14.0, 20.0, 28.0],
            aspect_ratios: vec![0.8, 1.0, 1.25],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    /// Anchors for a `rows × cols` feature map, ordered `(row, col, kind)`.
    pub fn grid(&self, rows: usize, cols: usize, stride: usize) -> Vec<Anchor> {
        let mut out = Vec::with_capacity(rows * cols * self.per_cell());
        for i in 0..rows {
            for j in 0..cols {
                for &scale in &self.scales {
                    for &aspect_ratio in &self.aspect_ratios {
                        out.push(Anchor {
                            center_x: (j as f64 + 0.5) * stride as f64,
                            center_y: (i as f64 + 0.5) * stride as f64,
                            scale,
                            aspect_ratio,
                        });
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_inverts() {
        let a = Anchor {
            center_x: 12.0,
            center_y: 20.0,
            scale: 16.0,
            aspect_ratio: 1.25,
        };
        let target = BBox::new(3.0, 7.5, 25.0, 30.0);
        let back = a.decode(&a.encode(&target));
        for (x, y) in back.to_array().iter().zip(target.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_size_and_shape() {
        let cfg = AnchorConfig::default();
        let grid = cfg.grid(8, 8, 8);
        assert_eq!(grid.len(), 8 * 8 * 9);
        let a = grid[9 * 9 + 4];
        assert_eq!((a.center_x, a.center_y), (12.0, 12.0));
        assert!((a.width() * a.height() - a.scale * a.scale).abs() < 1e-9);
        assert!(grid.iter().all(|a| a.scale > 0.0 && a.aspect_ratio > 0.0));
    }
}
