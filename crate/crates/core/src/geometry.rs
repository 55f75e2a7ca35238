//! Normalized boxes and points.
//!
//! Coordinates are fractions of the image extent: `x` runs over width and
//! `y` over height, both in `[0, 1]`. Pixel `j` of an axis of length `n`
//! spans `[j/n, (j+1)/n]`; its center is `(j + 0.5)/n`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y)` in normalized image coordinates.
pub type Point = [f64; 2];

const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    /// Checks ordering and range; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("x_min", self.x_min),
            ("y_min", self.y_min),
            ("x_max", self.x_max),
            ("y_max", self.y_max),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Schema {
                    location: "bbox".into(),
                    field: name.into(),
                    reason: format!("{v} outside [0, 1]"),
                });
            }
        }
        if self.x_min >= self.x_max {
            return Err(Error::Schema {
                location: "bbox".into(),
                field: "x_min".into(),
                reason: format!("x_min {} must be < x_max {}", self.x_min, self.x_max),
            });
        }
        if self.y_min >= self.y_max {
            return Err(Error::Schema {
                location: "bbox".into(),
                field: "y_min".into(),
                reason: format!("y_min {} must be < y_max {}", self.y_min, self.y_max),
            });
        }
        Ok(())
    }

    /// Box covering pixel rows `rows` and columns `cols` of an `h × w` grid.
    pub fn from_pixels(rows: Range<usize>, cols: Range<usize>, h: usize, w: usize) -> Self {
        Self {
            x_min: cols.start as f64 / w as f64,
            y_min: rows.start as f64 / h as f64,
            x_max: cols.end as f64 / w as f64,
            y_max: rows.end as f64 / h as f64,
        }
    }

    /// Smallest pixel window containing the box, never empty.
    pub fn pixel_window(&self, h: usize, w: usize) -> (Range<usize>, Range<usize>) {
        (
            axis_window(self.y_min, self.y_max, h),
            axis_window(self.x_min, self.x_max, w),
        )
    }

    pub fn center(&self) -> Point {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: Point) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        match self.intersection(other) {
            Some(i) => {
                let inter = i.area();
                inter / (self.area() + other.area() - inter)
            }
            None => 0.0,
        }
    }
}

fn axis_window(lo: f64, hi: f64, n: usize) -> Range<usize> {
    let start = ((lo * n as f64) + SNAP).floor().max(0.0) as usize;
    let end = ((hi * n as f64) - SNAP).ceil().min(n as f64) as usize;
    let start = start.min(n - 1);
    start..end.max(start + 1)
}

/// Normalized center of pixel `(row, col)` on an `h × w` grid.
pub fn pixel_center(row: usize, col: usize, h: usize, w: usize) -> Point {
    [(col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64]
}
