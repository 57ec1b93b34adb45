//! Pinhole camera with inverse-depth back-projection and the analytic
//! Jacobians used by the dense bundle adjustment.

use nalgebra::{Matrix2x4, Matrix2x6, Matrix4x6, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::CameraError;
use crate::se3::PoseSE3;

/// Minimum camera-frame depth for a point to count as projectable.
pub const EPS_Z: f64 = 1e-4;

/// Homogeneous point `(X, Y, Z, W)`.
pub type HomogeneousPoint = Vector4<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(CameraError::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pinhole projection; `None` when the point is not in front of the camera (Z ≤ [`EPS_Z`]).
    ///
    /// The horizontal offset is `c_x`. Some printed versions of this formula
    /// use `c_y` for both rows, which is a typo.
    pub fn project(&self, x: &HomogeneousPoint) -> Option<Vector2<f64>> {
        if !(x.z > EPS_Z) {
            return None;
        }
        Some(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }

    /// Inverse projection `((u − c_x)/f_x, (v − c_y)/f_y, 1, d)`.
    pub fn backproject(&self, p: &Vector2<f64>, d: f64) -> Result<HomogeneousPoint, CameraError> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(CameraError::NonPositiveDepth(d));
        }
        Ok(self.backproject_unchecked(p, d))
    }

    #[inline]
    pub(crate) fn backproject_unchecked(&self, p: &Vector2<f64>, d: f64) -> HomogeneousPoint {
        Vector4::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0, d)
    }

    /// ∂Π/∂X, a 2×4 matrix whose last column is zero.
    pub fn jac_project(&self, x: &HomogeneousPoint) -> Option<Matrix2x4<f64>> {
        if !(x.z > EPS_Z) {
            return None;
        }
        let iz = 1.0 / x.z;
        Some(Matrix2x4::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz * iz,
            0.0,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz * iz,
            0.0,
        ))
    }

    /// Whether pixel `p` lies inside a `width × height` grid of pixel centers.
    pub fn in_bounds(p: &Vector2<f64>, width: usize, height: usize) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (width as f64 - 1.0) && p.y <= (height as f64 - 1.0)
    }
}

/// Which endpoint of an edge `(i, j)` a pose Jacobian refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeSide {
    Source,
    Target,
}

/// Generator matrix `∂(exp(ξ)·X)/∂ξ` at ξ = 0 for `[v; ω]` twists.
pub fn point_generator(x: &HomogeneousPoint) -> Matrix4x6<f64> {
    let (px, py, pz, pw) = (x.x, x.y, x.z, x.w);
    #[rustfmt::skip]
    let m = Matrix4x6::new(
        pw,  0.0, 0.0, 0.0,  pz, -py,
        0.0, pw,  0.0, -pz, 0.0,  px,
        0.0, 0.0, pw,   py, -px, 0.0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    );
    m
}

/// ∂X'/∂ξ for the transformed point `X' = G_ij · X`.
///
/// For the target frame this is the generator matrix at `X'`. For the source
/// frame the perturbation is moved through `G_ij` with its adjoint, giving
/// `−gen(X') · Adj(G_ij)`.
pub fn jac_point_wrt_pose(x_transformed: &HomogeneousPoint, side: EdgeSide, g_ij: &PoseSE3) -> Matrix4x6<f64> {
    let gen = point_generator(x_transformed);
    match side {
        EdgeSide::Target => gen,
        EdgeSide::Source => -(gen * g_ij.adjoint()),
    }
}

/// ∂p'/∂d = ∂Π/∂X' · (t_x, t_y, t_z, 1)ᵀ with `t` the translation of `G_ij`.
pub fn jac_pixel_wrt_depth(
    x_transformed: &HomogeneousPoint,
    g_ij: &PoseSE3,
    intr: &Intrinsics,
) -> Option<Vector2<f64>> {
    let jp = intr.jac_project(x_transformed)?;
    let t = g_ij.translation();
    Some(jp * Vector4::new(t.x, t.y, t.z, 1.0))
}

/// 2×6 pixel Jacobian w.r.t. a left perturbation of the transformed point's frame,
/// plus the 2×1 depth Jacobian. The source-side Jacobian is `-target · Adj(G_ij)`.
pub(crate) struct PixelJacobians {
    pub target: Matrix2x6<f64>,
    pub depth: Vector2<f64>,
}

#[inline]
pub(crate) fn pixel_jacobians(
    x_transformed: &HomogeneousPoint,
    t_ij: &nalgebra::Vector3<f64>,
    intr: &Intrinsics,
) -> Option<PixelJacobians> {
    let jp = intr.jac_project(x_transformed)?;
    let target = jp * point_generator(x_transformed);
    let depth = jp * Vector4::new(t_ij.x, t_ij.y, t_ij.z, 1.0);
    Some(PixelJacobians {
        target,
        depth,
    })
}

/// Per-pixel positive inverse depth, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseDepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl InverseDepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, CameraError> {
        if values.len() != width * height {
            return Err(CameraError::DimensionMismatch {
                width,
                height,
                expected: width * height,
                actual: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(CameraError::NonPositiveDepth(bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Self {
        assert!(d > 0.0 && d.is_finite(), "inverse depth must be positive");
        Self {
            width,
            height,
            values: vec![d; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Adds `delta` per pixel and clamps the result into `[d_min, d_max]`.
    pub fn add_clamped(&mut self, delta: &[f64], d_min: f64, d_max: f64) {
        for (v, dv) in self.values.iter_mut().zip(delta) {
            *v = (*v + dv).clamp(d_min, d_max);
        }
    }

    /// Multiplies every value by `s > 0`.
    pub fn scaled(&self, s: f64) -> Self {
        assert!(s > 0.0);
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}
