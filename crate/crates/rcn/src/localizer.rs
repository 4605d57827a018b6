//! Search windows, correlation peaks, and the mapping from feature-grid peaks back
//! to frame pixels.

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::{argmax2d, cross_correlate, CorrelationMap, Tensor};

/// Axis-aligned pixel rectangle; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid box x={x} y={y} w={w} h={h}")));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Longer side; the edge of the square footprint used for templates.
    pub fn extent(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// True when any part of the box lies inside a `height` x `width` frame.
    pub fn overlaps_frame(&self, frame: (usize, usize)) -> bool {
        self.right() > 0.0 && self.bottom() > 0.0 && self.x < frame.1 as f64 && self.y < frame.0 as f64
    }

    /// Shifts the box so it lies inside the frame, keeping its size where possible.
    pub fn clamped(&self, frame: (usize, usize)) -> BoundingBox {
        let (fh, fw) = (frame.0 as f64, frame.1 as f64);
        let w = self.w.min(fw);
        let h = self.h.min(fh);
        BoundingBox { x: self.x.clamp(0.0, fw - w), y: self.y.clamp(0.0, fh - h), w, h }
    }

    /// Square region of side `extent()` centered on the box.
    pub fn footprint(&self) -> (f64, f64, f64) {
        let m = self.extent();
        let (cx, cy) = self.center();
        (cx - m / 2.0, cy - m / 2.0, m)
    }
}

/// Square search region. `origin` is `(x, y)` of the top-left corner in whole pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchWindowSpec {
    pub center: (f64, f64),
    pub side: f64,
    pub alpha: f64,
    pub radius: f64,
    pub origin: (f64, f64),
    /// The frame was smaller than the requested side and the window covers it.
    pub degenerate: bool,
}

/// Window of side `max(W,H) + 2R`, `R = alpha * max(W,H)`, centered on the previous box
/// and slid inward so it stays inside a `(height, width)` frame.
pub fn make_search_window(prev: &BoundingBox, alpha: f64, frame: (usize, usize)) -> Result<SearchWindowSpec> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("model.alpha must be non-negative, got {alpha}")));
    }
    let m = prev.extent();
    let radius = alpha * m;
    let mut side = m + 2.0 * radius;
    let limit = frame.0.min(frame.1) as f64;
    let degenerate = side > limit;
    if degenerate {
        side = limit;
    }
    let center = prev.center();
    let place = |c: f64, extent: usize| (c - side / 2.0).round().clamp(0.0, (extent as f64 - side).floor().max(0.0));
    let origin = (place(center.0, frame.1), place(center.1, frame.0));
    Ok(SearchWindowSpec { center, side, alpha, radius, origin, degenerate })
}

/// Source pixel index for each of `res` output samples along one axis.
fn sample_indices(origin: f64, side: f64, res: usize, n: usize) -> Vec<usize> {
    let scale = side / res as f64;
    (0..res)
        .map(|j| (origin + (j as f64 + 0.5) * scale - 0.5).round().clamp(0.0, (n - 1) as f64) as usize)
        .collect()
}

fn check_crop(side: f64, res: usize) -> Result<()> {
    if res == 0 || !(side > 0.0) {
        return Err(Error::shape(format!("crop of side {side} at resolution {res}")));
    }
    Ok(())
}

/// Nearest-neighbour resample of the square region at `origin` with side `side` to
/// `res` x `res`. Source coordinates outside the frame are clamped to its border.
pub fn crop_resample(frame: &Tensor, origin: (f64, f64), side: f64, res: usize) -> Result<Tensor> {
    let (c, h, w) = frame.chw()?;
    check_crop(side, res)?;
    let xs = sample_indices(origin.0, side, res, w);
    let ys = sample_indices(origin.1, side, res, h);
    let src = frame.data();
    let mut out = Vec::with_capacity(c * res * res);
    for ch in 0..c {
        for &y in &ys {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.extend(xs.iter().map(|&x| row[x]));
        }
    }
    Tensor::new(vec![c, res, res], out)
}

/// [`crop_resample`] straight from an 8-bit image, scaled to `[0, 1]`.
pub fn crop_resample_gray(img: &GrayImage, origin: (f64, f64), side: f64, res: usize) -> Result<Tensor> {
    check_crop(side, res)?;
    let xs = sample_indices(origin.0, side, res, img.width);
    let ys = sample_indices(origin.1, side, res, img.height);
    let mut out = Vec::with_capacity(res * res);
    for &y in &ys {
        out.extend(xs.iter().map(|&x| img.get(x, y) as f64 / 255.0));
    }
    Tensor::new(vec![1, res, res], out)
}

/// Crop of the search window at `res` pixels.
pub fn window_crop(frame: &Tensor, window: &SearchWindowSpec, res: usize) -> Result<Tensor> {
    crop_resample(frame, window.origin, window.side, res)
}

/// Crop of the box's square footprint at `res` pixels.
pub fn template_crop(frame: &Tensor, b: &BoundingBox, res: usize) -> Result<Tensor> {
    let (x, y, m) = b.footprint();
    crop_resample(frame, (x, y), m, res)
}

/// Correlates window features with template features and picks the peak `(row, col)`.
pub fn localize(search_feat: &Tensor, template_feat: &Tensor) -> Result<((usize, usize), CorrelationMap)> {
    let map = cross_correlate(search_feat, template_feat)?;
    Ok((argmax2d(&map), map))
}

/// Result of moving a box to a correlation peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub bbox: BoundingBox,
    pub lost: bool,
}

/// Translates the template box to the peak. A peak at `(row, col)` puts the template
/// footprint's corner at `origin + (col, row) * pixel_stride`; the box keeps its size and
/// its offset inside the footprint. `pixel_stride` is the feature stride measured in frame
/// pixels (feature stride times the window's pixels per resampled pixel). A box that
/// would leave the frame entirely is reported lost and the template box is held.
pub fn peak_to_frame(
    peak: (usize, usize),
    window: &SearchWindowSpec,
    pixel_stride: f64,
    template_box: &BoundingBox,
    frame: (usize, usize),
) -> Placement {
    let (fx, fy, _) = template_box.footprint();
    let (dx, dy) = (template_box.x - fx, template_box.y - fy);
    let moved = BoundingBox {
        x: window.origin.0 + peak.1 as f64 * pixel_stride + dx,
        y: window.origin.1 + peak.0 as f64 * pixel_stride + dy,
        ..*template_box
    };
    if moved.overlaps_frame(frame) {
        Placement { bbox: moved.clamped(frame), lost: false }
    } else {
        Placement { bbox: *template_box, lost: true }
    }
}

/// Pixels per feature cell for a window resampled to `window_res` with feature stride `stride`.
pub fn pixel_stride(window: &SearchWindowSpec, stride: usize, window_res: usize) -> f64 {
    stride as f64 * window.side / window_res as f64
}
