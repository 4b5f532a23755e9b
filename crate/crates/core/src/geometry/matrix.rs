use std::ops::Mul;

use crate::error::{Error, Result};

use super::params::AffineParams;

const SINGULAR_DET: f64 = 1e-12;

/// A 3x3 homogeneous affine matrix acting on pixel coordinates `(x, y, 1)` with x to the right
/// and y down. The bottom row is always `[0, 0, 1]`.
///
/// Matrices produced by [`AffineMatrix::build`] remember the frame (width, height) they were
/// built for so warps can reject images of a different size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix {
    top: [[f64; 3]; 2],
    frame: Option<(usize, usize)>,
}

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix =
        AffineMatrix { top: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], frame: None };

    pub fn from_top_rows(top: [[f64; 3]; 2]) -> Self {
        AffineMatrix { top, frame: None }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_top_rows([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    pub fn rotation_deg(theta: f64) -> Self {
        let (s, c) = theta.to_radians().sin_cos();
        Self::from_top_rows([[c, -s, 0.0], [s, c, 0.0]])
    }

    /// Shear by angles: x' = x + tan(sx) y, y' = tan(sy) x + y.
    pub fn shear_deg(sx: f64, sy: f64) -> Self {
        Self::from_top_rows([[1.0, sx.to_radians().tan(), 0.0], [sy.to_radians().tan(), 1.0, 0.0]])
    }

    pub fn scale(sigma: f64) -> Self {
        Self::from_top_rows([[sigma, 0.0, 0.0], [0.0, sigma, 0.0]])
    }

    /// Builds `C * T * R * Sh * Sc * C^-1`: scale, then shear, then rotate, all about the image
    /// center, then translate by `(tx * width, ty * height)`.
    ///
    /// The center is the middle of the pixel grid, `((width - 1) / 2, (height - 1) / 2)`, so a
    /// 180 degree rotation maps pixel `x` exactly onto `width - 1 - x`.
    pub fn build(p: &AffineParams, width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "frame must be at least 1x1");
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let m = Self::translation(cx, cy)
            * Self::translation(p.tx * width as f64, p.ty * height as f64)
            * Self::rotation_deg(p.theta)
            * Self::shear_deg(p.sx, p.sy)
            * Self::scale(p.sigma)
            * Self::translation(-cx, -cy);
        AffineMatrix { frame: Some((width, height)), ..m }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        [self.top[0], self.top[1], [0.0, 0.0, 1.0]]
    }

    pub fn frame(&self) -> Option<(usize, usize)> {
        self.frame
    }

    pub fn with_frame(self, frame: Option<(usize, usize)>) -> Self {
        AffineMatrix { frame, ..self }
    }

    /// Determinant of the upper-left 2x2 block.
    pub fn det(&self) -> f64 {
        self.top[0][0] * self.top[1][1] - self.top[0][1] * self.top[1][0]
    }

    pub fn invert(&self) -> Result<Self> {
        let det = self.det();
        if !(det.abs() >= SINGULAR_DET) {
            return Err(Error::numeric(format!("affine matrix is singular (det = {det:e})")));
        }
        let [[a, b, tx], [c, d, ty]] = self.top;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineMatrix {
            top: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
            frame: self.frame,
        })
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b, tx], [c, d, ty]] = self.top;
        (a * x + b * y + tx, c * x + d * y + ty)
    }
}

impl Mul for AffineMatrix {
    type Output = AffineMatrix;

    fn mul(self, rhs: AffineMatrix) -> AffineMatrix {
        let l = self.top;
        let r = rhs.top;
        let mut top = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                top[i][j] = l[i][0] * r[0][j] + l[i][1] * r[1][j];
            }
            top[i][2] = l[i][0] * r[0][2] + l[i][1] * r[1][2] + l[i][2];
        }
        AffineMatrix { top, frame: self.frame.or(rhs.frame) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_affine_params, ComponentMask, ParamRanges};
    use crate::rng::stream;

    fn mat3(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    #[test]
    fn identity_params_give_exact_identity() {
        for (w, h) in [(1, 1), (32, 32), (64, 17)] {
            let m = AffineMatrix::build(&AffineParams::IDENTITY, w, h);
            assert_eq!(m.rows(), AffineMatrix::IDENTITY.rows());
        }
    }

    #[test]
    fn quarter_turn_matches_center_pivot_product() {
        let p = AffineParams { theta: 90.0, ..AffineParams::IDENTITY };
        let m = AffineMatrix::build(&p, 100, 100).rows();
        let c = 49.5;
        let to_center = [[1.0, 0.0, c], [0.0, 1.0, c], [0.0, 0.0, 1.0]];
        let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let from_center = [[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]];
        let expect = mat3(mat3(to_center, rot), from_center);
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - expect[i][j]).abs() <= 1e-9, "{m:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn double_scale_hand_expansion() {
        let p = AffineParams { sigma: 2.0, ..AffineParams::IDENTITY };
        let m = AffineMatrix::build(&p, 10, 10).rows();
        let c = 4.5;
        assert_eq!(m[0][0], 2.0);
        assert_eq!(m[1][1], 2.0);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][0], 0.0);
        assert!((m[0][2] - c * (1.0 - 2.0)).abs() < 1e-12);
        assert!((m[1][2] - c * (1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        assert_eq!(AffineMatrix::IDENTITY.invert().unwrap().rows(), AffineMatrix::IDENTITY.rows());
        let mut rng = stream(21, &[]);
        for _ in 0..500 {
            let p = sample_affine_params(&mut rng, ComponentMask::ALL, &ParamRanges::PAPER).unwrap();
            let m = AffineMatrix::build(&p, 32, 32);
            let prod = (m * m.invert().unwrap()).rows();
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[i][j] - e).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn forced_singularity_is_numeric_error() {
        let p = AffineParams { sigma: 1e-13, ..AffineParams::IDENTITY };
        let m = AffineMatrix::build(&p, 32, 32);
        assert!(matches!(m.invert(), Err(Error::Numeric(_))));
    }
}
