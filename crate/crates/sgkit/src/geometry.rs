//! Box and mask geometry: IoU, 0-1000 coordinate normalization, and
//! area-ordered non-maximum suppression.

use crate::graph::{BBox, Mask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinate ceiling of the normalized text space.
pub const NORM_RANGE: u16 = 1000;

/// Box with integer coordinates in `[0, 1000]`, same corner semantics as
/// [`BBox`]. This is the form that appears in region-token text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormBBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl NormBBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_well_formed(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2 && self.x2 <= NORM_RANGE && self.y2 <= NORM_RANGE
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskDims(u32, u32, u32, u32),
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union of two boxes.
///
/// When the union has zero area the value is 0, except for two identical
/// degenerate points which compare as 1 so dedup treats them as equal.
pub fn iou_box(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        let identical_point = a == b && a.x1 == a.x2 && a.y1 == a.y2;
        return if identical_point { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Intersection over union of two masks' foregrounds.
///
/// Two empty masks compare as 1 (equality semantics for dedup); validation
/// flags empty masks separately.
pub fn iou_mask(a: &Mask, b: &Mask) -> Result<f64, GeometryError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(GeometryError::MaskDims(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let pa = a.decode();
    let pb = b.decode();
    let mut inter: u64 = 0;
    let mut union: u64 = 0;
    for (&x, &y) in pa.iter().zip(pb.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn scale_coord(v: f64, size: u32) -> u16 {
    // round half away from zero; coordinates are non-negative
    let scaled = (v * NORM_RANGE as f64 / size as f64).round();
    scaled.clamp(0.0, NORM_RANGE as f64) as u16
}

/// Scale a pixel box into `[0, 1000]` space.
///
/// Boxes exceeding the image bounds are clamped; the flag reports that a
/// clamp happened so callers can log a warning rather than fail.
pub fn normalize_box(b: &BBox, image_width: u32, image_height: u32) -> (NormBBox, bool) {
    let clamped = b.x1 < 0.0
        || b.y1 < 0.0
        || b.x2 > image_width as f64
        || b.y2 > image_height as f64
        || b.x1 > b.x2
        || b.y1 > b.y2;
    let x1 = b.x1.clamp(0.0, image_width as f64);
    let y1 = b.y1.clamp(0.0, image_height as f64);
    let x2 = b.x2.clamp(x1, image_width as f64);
    let y2 = b.y2.clamp(y1, image_height as f64);
    let norm = NormBBox::new(
        scale_coord(x1, image_width),
        scale_coord(y1, image_height),
        scale_coord(x2, image_width),
        scale_coord(y2, image_height),
    );
    (norm, clamped)
}

/// Map a normalized box back to pixel space.
pub fn denormalize_box(b: &NormBBox, image_width: u32, image_height: u32) -> BBox {
    let fx = image_width as f64 / NORM_RANGE as f64;
    let fy = image_height as f64 / NORM_RANGE as f64;
    BBox::new(
        b.x1 as f64 * fx,
        b.y1 as f64 * fy,
        b.x2 as f64 * fx,
        b.y2 as f64 * fy,
    )
}

/// A region proposal: box plus optional segmentation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Mask>,
}

impl Proposal {
    pub fn from_box(bbox: BBox) -> Self {
        Self { bbox, mask: None }
    }

    /// Mask pixel count when a mask is present, box area otherwise.
    pub fn area(&self) -> f64 {
        match &self.mask {
            Some(m) => m.foreground_count() as f64,
            None => self.bbox.area(),
        }
    }
}

/// IoU between proposals: mask IoU when both carry masks of equal
/// dimensions, box IoU otherwise.
pub fn proposal_iou(a: &Proposal, b: &Proposal) -> f64 {
    if let (Some(ma), Some(mb)) = (&a.mask, &b.mask) {
        if let Ok(v) = iou_mask(ma, mb) {
            return v;
        }
    }
    iou_box(&a.bbox, &b.bbox)
}

/// Greedy non-maximum suppression ordered by area instead of scores.
///
/// Candidates are sorted by area descending (ties keep input order); a
/// candidate survives iff its IoU with every already-kept candidate is below
/// the threshold. Returns the first `k` survivors in area order.
pub fn nms_by_area(candidates: &[Proposal], iou_threshold: f64, k: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .area()
            .partial_cmp(&candidates[a].area())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<&Proposal> = Vec::new();
    for idx in order {
        if kept.len() == k {
            break;
        }
        let cand = &candidates[idx];
        if kept.iter().all(|p| proposal_iou(p, cand) < iou_threshold) {
            kept.push(cand);
        }
    }
    kept.into_iter().cloned().collect()
}
