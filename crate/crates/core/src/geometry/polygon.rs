use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::AffineMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// An axis-aligned rectangle in pixel coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedCropRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundedCropRect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x0, self.y0),
            Point::new(self.x1, self.y0),
            Point::new(self.x1, self.y1),
            Point::new(self.x0, self.y1),
        ]
    }
}

/// Signed shoelace area; positive for counterclockwise order in the (x, y) plane.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
}

/// Images under `m` of the four corner pixel centres of a `width x height` frame, ordered
/// counterclockwise (positive signed area).
pub fn footprint_polygon(m: &AffineMatrix, width: usize, height: usize) -> Result<[Point; 4]> {
    m.invert()?;
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let mut quad = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)].map(|(x, y)| {
        let (px, py) = m.apply(x, y);
        Point::new(px, py)
    });
    if polygon_area(&quad) < 0.0 {
        quad.reverse();
    }
    Ok(quad)
}

/// Whether `p` lies inside the convex counterclockwise polygon, allowing `tol` pixels of
/// slack outside each edge.
pub fn point_in_convex_polygon(poly: &[Point], p: Point, tol: f64) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let (ex, ey) = (b.x - a.x, b.y - a.y);
        let len = ex.hypot(ey);
        if len == 0.0 {
            return true;
        }
        let cross = ex * (p.y - a.y) - ey * (p.x - a.x);
        cross / len >= -tol
    })
}

const GOLDEN_ITERS: usize = 90;
const BISECT_ITERS: usize = 70;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Maximizes a unimodal function on `[lo, hi]`; returns the best point seen and its value.
fn golden_max(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    for _ in 0..GOLDEN_ITERS {
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
        }
    }
    if fa >= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

struct Slicer<'a> {
    poly: &'a [Point],
}

impl Slicer<'_> {
    /// Horizontal extent `[left, right]` of the polygon at height `y`.
    fn span(&self, y: f64) -> (f64, f64) {
        let n = self.poly.len();
        let mut left = f64::INFINITY;
        let mut right = f64::NEG_INFINITY;
        for i in 0..n {
            let (a, b) = (self.poly[i], self.poly[(i + 1) % n]);
            let (ylo, yhi) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
            if y < ylo || y > yhi {
                continue;
            }
            if a.y == b.y {
                left = left.min(a.x.min(b.x));
                right = right.max(a.x.max(b.x));
            } else {
                let t = (y - a.y) / (b.y - a.y);
                let x = a.x + t * (b.x - a.x);
                left = left.min(x);
                right = right.max(x);
            }
        }
        (left, right)
    }

    fn width(&self, top: (f64, f64), y1: f64) -> f64 {
        let (l1, r1) = self.span(y1);
        top.1.min(r1) - top.0.max(l1)
    }
}

/// Maximal-area axis-aligned rectangle inside a convex polygon.
///
/// For rows `y0 < y1` the widest admissible rectangle spans
/// `[max(L(y0), L(y1)), min(R(y0), R(y1))]`, where `L` is convex and `R` concave. The
/// resulting area is log-concave jointly in `(y0, y1)`, so the inner maximum over `y1` and the
/// outer maximum over `y0` are both unimodal and a nested golden-section search finds the
/// global optimum.
pub fn max_inscribed_rect(poly: &[Point]) -> Result<BoundedCropRect> {
    if poly.len() < 3 {
        return Err(Error::contract("polygon needs at least 3 vertices"));
    }
    let area = polygon_area(poly);
    if area.abs() + 1e-9 < 1.0 {
        return Err(Error::numeric(format!("degenerate polygon (area {area:e} px^2)")));
    }
    let ccw: Vec<Point> = if area > 0.0 { poly.to_vec() } else { poly.iter().rev().copied().collect() };
    let n = ccw.len();
    for i in 0..n {
        let (a, b, c) = (ccw[i], ccw[(i + 1) % n], ccw[(i + 2) % n]);
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross < -1e-9 * (1.0 + area.abs()) {
            return Err(Error::contract("polygon is not convex"));
        }
    }

    let slicer = Slicer { poly: &ccw };
    let ymin = ccw.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let ymax = ccw.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);

    let best_for_top = |y0: f64| -> (f64, f64) {
        let top = slicer.span(y0);
        if top.1 <= top.0 {
            return (y0, 0.0);
        }
        // Positive width is an interval starting at y0; find its upper end.
        let mut hi = ymax;
        if slicer.width(top, ymax) <= 0.0 {
            let mut lo = y0;
            for _ in 0..BISECT_ITERS {
                let mid = 0.5 * (lo + hi);
                if slicer.width(top, mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi = lo;
        }
        golden_max(y0, hi, |y1| (y1 - y0) * slicer.width(top, y1).max(0.0))
    };

    let (y0, _) = golden_max(ymin, ymax, |y0| best_for_top(y0).1);
    let (y1, best) = best_for_top(y0);
    if !(best > 0.0) {
        return Err(Error::numeric("no inscribed rectangle with positive area"));
    }
    let (l0, r0) = slicer.span(y0);
    let (l1, r1) = slicer.span(y1);
    Ok(BoundedCropRect { x0: l0.max(l1), y0, x1: r0.min(r1), y1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AffineParams;

    #[test]
    fn identity_footprint_is_frame() {
        let q = footprint_polygon(&AffineMatrix::IDENTITY, 10, 6).unwrap();
        assert_eq!(q, [Point::new(0.0, 0.0), Point::new(9.0, 0.0), Point::new(9.0, 5.0), Point::new(0.0, 5.0)]);
    }

    #[test]
    fn rotated_square_corners_closed_form() {
        let p = AffineParams { theta: 45.0, ..AffineParams::IDENTITY };
        let q = footprint_polygon(&AffineMatrix::build(&p, 11, 11), 11, 11).unwrap();
        let r = 5.0 * 2f64.sqrt();
        // Corner (0,0) sits at (-5,-5) from the centre; rotating by 45 degrees puts it at (0, -r).
        let expect = [Point::new(5.0, 5.0 - r), Point::new(5.0 + r, 5.0), Point::new(5.0, 5.0 + r), Point::new(5.0 - r, 5.0)];
        for (a, b) in q.iter().zip(expect.iter()) {
            assert!((a.x - b.x).abs() <= 1e-9 && (a.y - b.y).abs() <= 1e-9, "{q:?}");
        }
    }

    #[test]
    fn shear_footprint_is_parallelogram() {
        let p = AffineParams { sx: 25.0, ..AffineParams::IDENTITY };
        let q = footprint_polygon(&AffineMatrix::build(&p, 20, 20), 20, 20).unwrap();
        let d = |a: Point, b: Point| (b.x - a.x, b.y - a.y);
        let (e0, e2) = (d(q[0], q[1]), d(q[3], q[2]));
        let (e1, e3) = (d(q[1], q[2]), d(q[0], q[3]));
        assert!((e0.0 * e2.1 - e0.1 * e2.0).abs() <= 1e-9);
        assert!((e1.0 * e3.1 - e1.1 * e3.0).abs() <= 1e-9);
    }

    #[test]
    fn axis_aligned_square_returns_itself() {
        let sq = [Point::new(0.0, 0.0), Point::new(4.0, 0.0), Point::new(4.0, 4.0), Point::new(0.0, 4.0)];
        let r = max_inscribed_rect(&sq).unwrap();
        assert!((r.area() - 16.0).abs() < 1e-9, "{r:?}");
        assert!(r.x0.abs() < 1e-6 && r.y0.abs() < 1e-6 && (r.x1 - 4.0).abs() < 1e-6 && (r.y1 - 4.0).abs() < 1e-6);
    }

    #[test]
    fn rotated_unit_square_gives_half_area() {
        let h = 0.5f64.sqrt();
        let diamond = [Point::new(0.0, -h), Point::new(h, 0.0), Point::new(0.0, h), Point::new(-h, 0.0)];
        let r = max_inscribed_rect(&diamond).unwrap();
        assert!((r.area() - 0.5).abs() <= 0.005, "{}", r.area());
        for c in r.corners() {
            assert!(point_in_convex_polygon(&diamond, c, 1e-6));
        }
    }

    #[test]
    fn clockwise_input_is_accepted() {
        let sq = [Point::new(0.0, 0.0), Point::new(0.0, 3.0), Point::new(3.0, 3.0), Point::new(3.0, 0.0)];
        assert!((max_inscribed_rect(&sq).unwrap().area() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_polygon_is_numeric_error() {
        let sliver = [Point::new(0.0, 0.0), Point::new(10.0, 0.0), Point::new(10.0, 0.01), Point::new(0.0, 0.01)];
        assert!(matches!(max_inscribed_rect(&sliver), Err(Error::Numeric(_))));
    }

    #[test]
    fn non_convex_is_rejected() {
        let dart = [Point::new(0.0, 0.0), Point::new(4.0, 2.0), Point::new(0.0, 4.0), Point::new(1.0, 2.0)];
        assert!(matches!(max_inscribed_rect(&dart), Err(Error::Contract(_))));
    }
}
