//! Dense correspondence fields induced by poses and inverse depth.

use nalgebra::Vector2;

use crate::camera::{InverseDepthMap, Intrinsics};
use crate::se3::PoseSE3;

/// Minimum fraction of pixels with a valid, in-image correspondence for two
/// frames to count as covisible.
pub const MIN_COVISIBLE_FRACTION: f64 = 0.5;

/// Regular lattice of pixel centers, row-major; pixel `(row, col)` sits at `(col, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn point(&self, index: usize) -> Vector2<f64> {
        Vector2::new((index % self.width) as f64, (index / self.width) as f64)
    }

    pub fn points(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        (0..self.len()).map(move |k| self.point(k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceField {
    pub width: usize,
    pub height: usize,
    /// Target pixel in frame `j`; NaN where `valid` is false.
    pub targets: Vec<Vector2<f64>>,
    /// Point lands in front of camera `j`.
    pub valid: Vec<bool>,
    /// Valid and inside the image of frame `j`.
    pub in_bounds: Vec<bool>,
}

impl CorrespondenceField {
    pub fn grid(&self) -> PixelGrid {
        PixelGrid::new(self.width, self.height)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Fraction of pixels with a valid correspondence inside the image.
    pub fn overlap(&self) -> f64 {
        let n = self.in_bounds.iter().filter(|v| **v).count();
        n as f64 / self.targets.len().max(1) as f64
    }
}

/// `p_ij = Π(G_ij ∘ Π⁻¹(p_i, d_i))` with `G_ij = G_j ∘ G_i⁻¹`.
pub fn dense_correspondence(
    g_i: &PoseSE3,
    g_j: &PoseSE3,
    d_i: &InverseDepthMap,
    intr: &Intrinsics,
) -> CorrespondenceField {
    let g_ij = g_j.compose(&g_i.inverse());
    correspondence_from_relative(&g_ij, d_i, intr)
}

pub(crate) fn correspondence_from_relative(
    g_ij: &PoseSE3,
    d_i: &InverseDepthMap,
    intr: &Intrinsics,
) -> CorrespondenceField {
    let grid = PixelGrid::new(d_i.width(), d_i.height());
    let n = grid.len();
    let mut targets = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut in_bounds = Vec::with_capacity(n);
    for (k, &d) in d_i.values().iter().enumerate() {
        let x = intr.backproject_unchecked(&grid.point(k), d);
        match intr.project(&g_ij.act(&x)) {
            Some(p) => {
                in_bounds.push(Intrinsics::in_bounds(&p, grid.width, grid.height));
                targets.push(p);
                valid.push(true);
            }
            None => {
                targets.push(Vector2::new(f64::NAN, f64::NAN));
                valid.push(false);
                in_bounds.push(false);
            }
        }
    }
    CorrespondenceField {
        width: grid.width,
        height: grid.height,
        targets,
        valid,
        in_bounds,
    }
}

/// Flow `p_ij − p_i` at valid pixels, `None` elsewhere.
pub fn induced_flow(field: &CorrespondenceField, grid: &PixelGrid) -> Vec<Option<Vector2<f64>>> {
    assert_eq!(field.targets.len(), grid.len(), "grid and field dimensions differ");
    field
        .targets
        .iter()
        .zip(&field.valid)
        .enumerate()
        .map(|(k, (t, &ok))| ok.then(|| t - grid.point(k)))
        .collect()
}

/// Mean flow norm over valid pixels, or `+∞` when the frames are not covisible.
pub fn mean_flow_magnitude(
    g_i: &PoseSE3,
    g_j: &PoseSE3,
    d_i: &InverseDepthMap,
    intr: &Intrinsics,
) -> f64 {
    mean_flow_of_field(&dense_correspondence(g_i, g_j, d_i, intr))
}

pub fn mean_flow_of_field(field: &CorrespondenceField) -> f64 {
    if field.overlap() < MIN_COVISIBLE_FRACTION {
        return f64::INFINITY;
    }
    let grid = field.grid();
    let (sum, count) = induced_flow(field, &grid)
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), f| (s + f.norm(), c + 1));
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}
