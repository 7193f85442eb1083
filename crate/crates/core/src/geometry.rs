//! Quadrilateral boxes and their scanline rasterization.
//!
//! Pixel `(x, y)` has its center at the integer point `(x, y)`. A pixel belongs
//! to a quad when its center lies inside the quad or on its boundary.

use serde::{Deserialize, Serialize};

use crate::raster::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Four-vertex box. Vertex order follows the annotation schema: left-top,
/// left-bottom, right-top, right-bottom; the outline runs lt, rt, rb, lb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadBox {
    pub lt: Point,
    pub lb: Point,
    pub rt: Point,
    pub rb: Point,
}

/// Inclusive horizontal run of pixels `x0..=x1` on row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub y: usize,
    pub x0: usize,
    pub x1: usize,
}

impl QuadBox {
    pub fn new(lt: Point, lb: Point, rt: Point, rb: Point) -> Self {
        Self { lt, lb, rt, rb }
    }

    /// Axis-aligned box spanning `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            lt: Point::new(x0, y0),
            lb: Point::new(x0, y1),
            rt: Point::new(x1, y0),
            rb: Point::new(x1, y1),
        }
    }

    /// Vertices in schema order `[lt, lb, rt, rb]`.
    pub fn to_array(&self) -> [[f64; 2]; 4] {
        [
            [self.lt.x, self.lt.y],
            [self.lb.x, self.lb.y],
            [self.rt.x, self.rt.y],
            [self.rb.x, self.rb.y],
        ]
    }

    pub fn from_array(v: [[f64; 2]; 4]) -> Self {
        Self {
            lt: Point::new(v[0][0], v[0][1]),
            lb: Point::new(v[1][0], v[1][1]),
            rt: Point::new(v[2][0], v[2][1]),
            rb: Point::new(v[3][0], v[3][1]),
        }
    }

    /// Vertices in outline order.
    pub fn outline(&self) -> [Point; 4] {
        [self.lt, self.rt, self.rb, self.lb]
    }

    pub fn signed_area(&self) -> f64 {
        let p = self.outline();
        let mut acc = 0.0;
        for i in 0..4 {
            let (a, b) = (p[i], p[(i + 1) % 4]);
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn is_finite(&self) -> bool {
        self.outline().iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Opposite edges of the outline do not touch.
    pub fn is_simple(&self) -> bool {
        let p = self.outline();
        !segments_intersect(p[0], p[1], p[2], p[3]) && !segments_intersect(p[1], p[2], p[3], p[0])
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let p = self.outline();
        p.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), q| (a.min(q.x), b.min(q.y), c.max(q.x), d.max(q.y)),
        )
    }

    pub fn within_margin(&self, width: usize, height: usize, margin: f64) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= -margin && y0 >= -margin && x1 <= width as f64 + margin && y1 <= height as f64 + margin
    }

    /// Center-inside-or-on-boundary test for a single point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if self.signed_area().abs() < AREA_EPS {
            return false;
        }
        let p = self.outline();
        for i in 0..4 {
            if on_segment(p[i], p[(i + 1) % 4], Point::new(x, y)) {
                return true;
            }
        }
        // Even-odd ray cast to +x.
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (p[i], p[(i + 1) % 4]);
            if (a.y > y) != (b.y > y) {
                let xc = a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y);
                if x < xc {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Mirrors the box horizontally inside an image of `width` pixels.
    /// Left and right vertices swap roles so the vertex order stays meaningful.
    pub fn flipped_horizontally(&self, width: usize) -> QuadBox {
        let m = |p: Point| Point::new(width as f64 - 1.0 - p.x, p.y);
        QuadBox {
            lt: m(self.rt),
            lb: m(self.rb),
            rt: m(self.lt),
            rb: m(self.lb),
        }
    }
}

const AREA_EPS: f64 = 1e-12;

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    cross(a, b, p) == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

/// Scanline fill of `quad`, clipped to the `width` x `height` grid.
///
/// Per row the interior is the set of intervals between paired edge
/// crossings (half-open in y), extended by every boundary point lying on the
/// row so that centers on edges and vertices are included.
pub fn quad_spans(quad: &QuadBox, width: usize, height: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    if width == 0 || height == 0 || !quad.is_finite() || quad.signed_area().abs() < AREA_EPS {
        return spans;
    }
    let pts = quad.outline();
    let (_, min_y, _, max_y) = quad.bounds();
    let y_start = min_y.ceil().max(0.0);
    let y_end = max_y.floor().min(height as f64 - 1.0);
    if y_start > y_end {
        return spans;
    }

    let mut crossings: Vec<f64> = Vec::with_capacity(4);
    let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(8);
    for row in (y_start as usize)..=(y_end as usize) {
        let cy = row as f64;
        crossings.clear();
        intervals.clear();
        for i in 0..4 {
            let (a, b) = (pts[i], pts[(i + 1) % 4]);
            if a.y == b.y {
                if a.y == cy {
                    intervals.push((a.x.min(b.x), a.x.max(b.x)));
                }
                continue;
            }
            let (lo, hi) = if a.y < b.y { (a, b) } else { (b, a) };
            if cy < lo.y || cy > hi.y {
                continue;
            }
            let x = if cy == lo.y {
                lo.x
            } else if cy == hi.y {
                hi.x
            } else {
                lo.x + (cy - lo.y) * (hi.x - lo.x) / (hi.y - lo.y)
            };
            intervals.push((x, x));
            if cy < hi.y {
                crossings.push(x);
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        for pair in crossings.chunks_exact(2) {
            intervals.push((pair[0], pair[1]));
        }
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut merged: Option<(f64, f64)> = None;
        let emit = |lo: f64, hi: f64, spans: &mut Vec<Span>| {
            let x0 = lo.ceil().max(0.0);
            let x1 = hi.floor().min(width as f64 - 1.0);
            if x0 <= x1 {
                spans.push(Span {
                    y: row,
                    x0: x0 as usize,
                    x1: x1 as usize,
                });
            }
        };
        for &(lo, hi) in &intervals {
            merged = match merged {
                Some((mlo, mhi)) if lo <= mhi => Some((mlo, mhi.max(hi))),
                Some((mlo, mhi)) => {
                    emit(mlo, mhi, &mut spans);
                    Some((lo, hi))
                }
                None => Some((lo, hi)),
            };
        }
        if let Some((lo, hi)) = merged {
            emit(lo, hi, &mut spans);
        }
    }
    // Adjacent float intervals can round onto the same pixel; fold such overlaps.
    spans.dedup_by(|b, a| {
        if a.y == b.y && b.x0 <= a.x1 + 1 {
            a.x1 = a.x1.max(b.x1);
            true
        } else {
            false
        }
    });
    spans
}

/// Binary mask of the pixels whose centers lie in `quad` (boundary included).
/// Zero-area quads give an empty mask.
pub fn rasterize_quad(quad: &QuadBox, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    fill_spans(&mut mask, &quad_spans(quad, width, height));
    mask
}

pub(crate) fn fill_spans(mask: &mut BinaryMask, spans: &[Span]) {
    for s in spans {
        for x in s.x0..=s.x1 {
            mask.set(x, s.y, true);
        }
    }
}
