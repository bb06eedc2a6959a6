//! Toy two-stage detector: a small strided-conv backbone, a per-cell proposal
//! head, and an ROI head with class and box-refinement outputs.
//!
//! Geometry is normalized: boxes live in `[0,1]` image coordinates, the
//! backbone downsamples by 4, and each cell of the resulting grid carries one
//! anchor.

mod loss;
mod net;
mod params;

pub use loss::{match_proposals, supervised_loss, supervised_loss_on_features, LossParts};
pub use net::{
    backbone, bind, cells_covered, detect, full_pass, nms_per_class, proposals_from_values,
    roi_head, roi_outputs_for_boxes, roi_pool, rpn, BoundParams, FullPass, RoiOut, RpnOut,
};
pub use params::{
    init_params, load_store, save_store, ParamStore, Provenance, Role, SavedStore, StoreError,
};

/// Axis-aligned box, center/size form, normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner form (x0, y0, x1, y1).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// Class-agnostic region with an objectness probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Classed, scored box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// A single-channel square frame with pixel values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub domain_tag: String,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<f64>, domain_tag: impl Into<String>) -> Self {
        assert_eq!(pixels.len(), size * size, "pixel buffer size mismatch");
        Image {
            size,
            pixels,
            domain_tag: domain_tag.into(),
        }
    }

    pub fn constant(size: usize, value: f64) -> Self {
        Image::new(size, vec![value; size * size], "none")
    }
}

/// Static architecture and inference knobs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// Input side length; the backbone needs it divisible by 4.
    pub img_size: usize,
    /// Foreground classes; the ROI head adds one background slot.
    pub classes: usize,
    /// Backbone output channels (the ROI feature width).
    pub feat_channels: usize,
    /// First conv output channels.
    pub mid_channels: usize,
    /// ROI head hidden width.
    pub hidden: usize,
    /// Anchor side length, normalized.
    pub anchor_size: f64,
    /// Proposals kept per image.
    pub top_l: usize,
    /// Greedy NMS IoU threshold.
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            img_size: 32,
            classes: 4,
            feat_channels: 16,
            mid_channels: 12,
            hidden: 48,
            anchor_size: 0.25,
            top_l: 12,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    /// Anchor grid side (one anchor per backbone cell).
    pub fn grid(&self) -> usize {
        self.img_size / 4
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Center of cell `(row, col)` in normalized coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let g = self.grid() as f64;
        ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
    }

    /// The anchor box sitting on cell `(row, col)`.
    pub fn anchor(&self, row: usize, col: usize) -> BBox {
        let (cx, cy) = self.cell_center(row, col);
        BBox::new(cx, cy, self.anchor_size, self.anchor_size)
    }

    /// A tiny variant used by hand-arithmetic tests: 8x8 input, 2x2 grid.
    pub fn miniature() -> Self {
        DetectorConfig {
            img_size: 8,
            top_l: 4,
            ..DetectorConfig::default()
        }
    }
}

/// Offsets `(tx, ty, tw, th)` of `bbox` relative to `anchor`.
pub fn encode_box(anchor: &BBox, bbox: &BBox) -> [f64; 4] {
    [
        (bbox.cx - anchor.cx) / anchor.w,
        (bbox.cy - anchor.cy) / anchor.h,
        (bbox.w / anchor.w).ln(),
        (bbox.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode_box`]. Raw offsets are clamped to ±2 before decoding
/// so untrained heads cannot produce degenerate geometry; centers are clamped
/// into the image.
pub fn decode_box(anchor: &BBox, t: &[f64; 4]) -> BBox {
    let cl = |v: f64| v.clamp(-2.0, 2.0);
    BBox {
        cx: (anchor.cx + cl(t[0]) * anchor.w).clamp(0.0, 1.0),
        cy: (anchor.cy + cl(t[1]) * anchor.h).clamp(0.0, 1.0),
        w: anchor.w * cl(t[2]).exp(),
        h: anchor.h * cl(t[3]).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_roundtrip() {
        let anchor = BBox::new(0.5, 0.5, 0.25, 0.25);
        let b = BBox::new(0.55, 0.45, 0.3, 0.2);
        let t = encode_box(&anchor, &b);
        let back = decode_box(&anchor, &t);
        assert!((back.cx - b.cx).abs() < 1e-12);
        assert!((back.cy - b.cy).abs() < 1e-12);
        assert!((back.w - b.w).abs() < 1e-12);
        assert!((back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn decode_clamps_offsets() {
        let anchor = BBox::new(0.5, 0.5, 0.25, 0.25);
        let b = decode_box(&anchor, &[100.0, -100.0, 50.0, -50.0]);
        assert!(b.w > 0.0 && b.h > 0.0);
        assert!(b.cx <= 1.0 && b.cy >= 0.0);
    }

    #[test]
    fn default_grid_is_eight() {
        let cfg = DetectorConfig::default();
        assert_eq!(cfg.grid(), 8);
        assert_eq!(cfg.cells(), 64);
        let (cx, cy) = cfg.cell_center(0, 0);
        assert!((cx - 0.0625).abs() < 1e-15 && (cy - 0.0625).abs() < 1e-15);
    }
}
