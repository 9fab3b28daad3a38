use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Axis-aligned box in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Validating constructor: requires `x_min < x_max`, `y_min < y_max`, finite coordinates.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !b.is_valid() {
            return Err(Error::shape(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Clamps to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn long_side(&self) -> f64 {
        self.width().max(self.height())
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target relative to an anchor:
/// `dx = (cx_t - cx_a) / w_a`, `dy = (cy_t - cy_a) / h_a`,
/// `dw = ln(w_t / w_a)`, `dh = ln(h_t / h_a)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDeltas {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

/// Size deltas are clamped to this before exponentiation when decoding.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode_box(anchor: &BoundingBox, target: &BoundingBox) -> Result<BoxDeltas> {
    if !anchor.is_valid() {
        return Err(Error::shape(format!("degenerate anchor {anchor:?}")));
    }
    if !target.is_valid() {
        return Err(Error::shape(format!("degenerate target {target:?}")));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDeltas {
        dx: (tcx - acx) / anchor.width(),
        dy: (tcy - acy) / anchor.height(),
        dw: (target.width() / anchor.width()).ln(),
        dh: (target.height() / anchor.height()).ln(),
    })
}

/// Inverse of [`encode_box`]; size deltas are clamped to [`MAX_LOG_SCALE`].
/// Clip the result with [`BoundingBox::clip`] to keep it inside the image.
pub fn decode_box(anchor: &BoundingBox, deltas: &BoxDeltas) -> Result<BoundingBox> {
    if !anchor.is_valid() {
        return Err(Error::shape(format!("degenerate anchor {anchor:?}")));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BoundingBox::from_center(
        acx + deltas.dx * aw,
        acy + deltas.dy * ah,
        aw * deltas.dw.min(MAX_LOG_SCALE).exp(),
        ah * deltas.dh.min(MAX_LOG_SCALE).exp(),
    ))
}
