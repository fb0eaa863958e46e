//! Box algebra: coordinate conversions, IoU/GIoU, regression deltas.
//!
//! Boxes are continuous axis-aligned rectangles stored as corners
//! `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2`; there is no +1 pixel
//! convention. A box is either `Absolute` (pixels) or `Normalized`
//! (fractions of the image size); overlap measures refuse to mix the two.
//! All arithmetic is `f64` so matching thresholds do not flip on rounding.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxForm {
    Absolute,
    Normalized,
}

/// Axis-aligned rectangle in corner parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub form: BoxForm,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, form: BoxForm) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry(format!(
                "non-finite box coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Geometry(format!(
                "inverted box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2, form })
    }

    pub fn absolute(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2, y2, BoxForm::Absolute)
    }

    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2, y2, BoxForm::Normalized)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Center-size view `(cx, cy, w, h)`.
    pub fn center_size(&self) -> (f64, f64, f64, f64) {
        (
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.width(),
            self.height(),
        )
    }

    pub fn from_center_size(cx: f64, cy: f64, w: f64, h: f64, form: BoxForm) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, form)
    }

    /// Convert an absolute box to normalized coordinates for an `w`x`h` image.
    pub fn to_normalized(&self, w: f64, h: f64) -> Result<Self> {
        match self.form {
            BoxForm::Normalized => Ok(*self),
            BoxForm::Absolute => {
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::Geometry(format!("invalid image size {w}x{h}")));
                }
                Self::new(self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h, BoxForm::Normalized)
            }
        }
    }

    /// Convert a normalized box to absolute pixels of an `w`x`h` image.
    pub fn to_absolute(&self, w: f64, h: f64) -> Result<Self> {
        match self.form {
            BoxForm::Absolute => Ok(*self),
            BoxForm::Normalized => {
                Self::new(self.x1 * w, self.y1 * h, self.x2 * w, self.y2 * h, BoxForm::Absolute)
            }
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Box regression offsets: center shifts as fractions of width/height and
/// log-scale size factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub const ZERO: BoxDeltas = BoxDeltas { dx: 0.0, dy: 0.0, dw: 0.0, dh: 0.0 };

    pub fn is_finite(&self) -> bool {
        [self.dx, self.dy, self.dw, self.dh].iter().all(|v| v.is_finite())
    }
}

fn check_same_form(a: &BBox, b: &BBox) -> Result<()> {
    if a.form != b.form {
        return Err(Error::Geometry(format!(
            "mixed box forms {:?} vs {:?}",
            a.form, b.form
        )));
    }
    Ok(())
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union in `[0, 1]`; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_same_form(a, b)?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Generalized IoU in `[-1, 1]`: IoU minus the normalized empty fraction of
/// the smallest enclosing box. Falls back to plain IoU when the enclosing
/// box is degenerate.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_same_form(a, b)?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = ew * eh;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        return Ok(iou);
    }
    Ok(iou - (enclosing - union) / enclosing)
}

/// Matrix of `iou(a[i], b[j])`.
pub fn pairwise_iou(a: &[BBox], b: &[BBox]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, ba) in a.iter().enumerate() {
        for (j, bb) in b.iter().enumerate() {
            out[[i, j]] = iou(ba, bb)?;
        }
    }
    Ok(out)
}

/// Apply regression deltas without clamping.
///
/// Written so that zero deltas reproduce the input box exactly: each corner
/// is the original corner plus terms that vanish identically at zero.
pub fn apply_deltas(b: &BBox, d: &BoxDeltas) -> Result<BBox> {
    if !d.is_finite() {
        return Err(Error::Geometry("non-finite box deltas".to_string()));
    }
    let w = b.width();
    let h = b.height();
    let shift_x = d.dx * w;
    let shift_y = d.dy * h;
    // half-width change: w * (1 - exp(dw)) / 2, zero at dw = 0
    let gx = 0.5 * w * (1.0 - d.dw.exp());
    let gy = 0.5 * h * (1.0 - d.dh.exp());
    BBox::new(
        b.x1 + shift_x + gx,
        b.y1 + shift_y + gy,
        b.x2 + shift_x - gx,
        b.y2 + shift_y - gy,
        b.form,
    )
}

/// Deltas that map `src` onto `dst` (inverse of [`apply_deltas`]).
pub fn invert_deltas(src: &BBox, dst: &BBox) -> Result<BoxDeltas> {
    check_same_form(src, dst)?;
    let (scx, scy, sw, sh) = src.center_size();
    let (dcx, dcy, dw, dh) = dst.center_size();
    if sw <= 0.0 || sh <= 0.0 || dw <= 0.0 || dh <= 0.0 {
        return Err(Error::Geometry("degenerate box in delta inversion".to_string()));
    }
    Ok(BoxDeltas {
        dx: (dcx - scx) / sw,
        dy: (dcy - scy) / sh,
        dw: (dw / sw).ln(),
        dh: (dh / sh).ln(),
    })
}

/// Clamp a box to the region `[0, w] x [0, h]`. A box fully outside
/// collapses to a zero-area box on the boundary.
pub fn clamp_box(b: &BBox, w: f64, h: f64) -> BBox {
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    let x2 = b.x2.clamp(0.0, w);
    let y2 = b.y2.clamp(0.0, h);
    BBox { x1, y1, x2, y2, form: b.form }
}
