//! Local wave vectors, deformation gradients and volume distortion.

use std::ops::Range;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_profile, angular_profile, MapKind, ScalarMap};
use crate::error::{Error, Result};
use crate::geometry::{Mat2, Vec2};
use crate::spectral::bump_detection;
use crate::sswpt::SsEnergy;

/// Per-cell estimates of the three upper-half-plane wave vectors.
///
/// Slot `j` holds the vector closest in direction to the reference vector
/// `u_j = N (cos jπ/3, sin jπ/3)`, taken with the sign that puts it within
/// 30° of `u_j`. This keeps labels stable when a wave vector crosses the
/// 0°/180° seam of the half-plane grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveVectorField {
    pub vectors: Array2<[Vec2; 3]>,
    pub valid: Array2<[bool; 3]>,
}

impl WaveVectorField {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, k1: usize, k2: usize, j: usize) -> Option<Vec2> {
        self.valid[[k1, k2]][j].then(|| self.vectors[[k1, k2]][j])
    }
}

/// Reference vectors `u_j = n·(cos jπ/3, sin jπ/3)`.
pub fn reference_vectors(n: f64) -> [Vec2; 3] {
    std::array::from_fn(|j| Vec2::from_angle(j as f64 * std::f64::consts::FRAC_PI_3) * n)
}

/// Slot and sign-adjusted vector for a wave vector with argument in `[0, π)`.
fn canonical_slot(v: Vec2) -> (usize, Vec2) {
    let deg = v.arg().to_degrees();
    let k = ((deg + 30.0) / 60.0).floor() as i64;
    match k.rem_euclid(3) as usize {
        0 if k == 3 => (0, -v),
        slot => (slot, v),
    }
}

fn cell_vectors(energy: &SsEnergy, k1: usize, k2: usize, c1: f64, c2: f64) -> ([Vec2; 3], [bool; 3]) {
    let la = energy.la();
    let m = la / 3;
    let bin_deg = 180.0 / la as f64;
    let r_axis = energy.r_axis();
    let polar = energy.at(k1, k2);
    let mut vectors = [Vec2::ZERO; 3];
    let mut valid = [false; 3];
    let mut mass = [0.0f64; 3];
    let Some(base) = analyze_profile(&angular_profile(energy, k1, k2, None), c1, c2, bin_deg).angle_deg else {
        return (vectors, valid);
    };
    for j in 0..3 {
        // A 60° window centred on the expected direction of the j-th vector,
        // wrapping through 180° since the grid only holds the upper half plane.
        let start = ((base + 60.0 * j as f64 - 30.0) / bin_deg).round() as i64;
        let bin = |k: usize| (start + k as i64).rem_euclid(la as i64) as usize;
        let window: Vec<f64> = (0..m).map(|k| polar.column(bin(k)).sum()).collect();
        let stats = analyze_profile(&window, c1, c2, bin_deg);
        let Some(angle) = stats.angle_deg else { continue };
        let radial: Vec<f64> = (0..energy.lr())
            .map(|ir| stats.first_bump.iter().map(|&k| polar[[ir, bin(k)]]).sum())
            .collect();
        let Ok((lo, hi)) = bump_detection(&radial, c1, c2) else { continue };
        let (mut w, mut wr) = (0.0, 0.0);
        for ir in lo.ceil() as usize..=hi.floor() as usize {
            w += radial[ir];
            wr += radial[ir] * r_axis[ir];
        }
        if !(w > 0.0) {
            continue;
        }
        let arg = (start as f64 * bin_deg + angle).to_radians();
        let (slot, v) = canonical_slot((Vec2::from_angle(arg) * (wr / w)).upper_half());
        if !valid[slot] || stats.te1 > mass[slot] {
            vectors[slot] = v;
            valid[slot] = true;
            mass[slot] = stats.te1;
        }
    }
    (vectors, valid)
}

/// Wave-vector field from angular bumps in 60° windows centred on the
/// stacked rotation angle plus `jπ/3`, followed by a radial bump detection
/// inside each angular bump.
pub fn estimate_wave_vector_field(energy: &SsEnergy, c1: f64, c2: f64) -> Result<WaveVectorField> {
    if !energy.la().is_multiple_of(3) {
        return Err(Error::InvalidParameter(format!("L_A = {} is not a multiple of 3", energy.la())));
    }
    let lb = energy.lb();
    let cells: Vec<_> = (0..lb * lb).into_par_iter().map(|i| cell_vectors(energy, i / lb, i % lb, c1, c2)).collect();
    let vectors = Array2::from_shape_fn((lb, lb), |(i, j)| cells[i * lb + j].0);
    let valid = Array2::from_shape_fn((lb, lb), |(i, j)| cells[i * lb + j].1);
    Ok(WaveVectorField { vectors, valid })
}

/// Per-cell least-squares deformation gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGradientField {
    pub matrices: Array2<Mat2>,
    pub residual: Array2<f64>,
    pub defined: Array2<bool>,
}

impl DeformationGradientField {
    pub fn len(&self) -> usize {
        self.matrices.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn get(&self, k1: usize, k2: usize) -> Option<Mat2> {
        self.defined[[k1, k2]].then(|| self.matrices[[k1, k2]])
    }
}

/// Solves `min_G Σ_j ‖Gᵀ u_j − v_j‖²` over the given pairs through the 2×2
/// normal equations. Returns `G` and the residual norm.
pub fn least_squares_gradient(pairs: &[(Vec2, Vec2)]) -> Option<(Mat2, f64)> {
    if pairs.len() < 2 {
        return None;
    }
    let outer = |a: Vec2, b: Vec2| Mat2::new(a.x * b.x, a.x * b.y, a.y * b.x, a.y * b.y);
    let mut m = Mat2::ZERO;
    let mut b = Mat2::ZERO;
    for &(u, v) in pairs {
        m = m + outer(u, u);
        b = b + outer(u, v);
    }
    let scale = m.frobenius();
    if !(scale > 0.0) || m.det().abs() <= 1e-12 * scale * scale {
        return None;
    }
    let g = m.inverse()? * b;
    let gt = g.transpose();
    let residual = pairs.iter().map(|&(u, v)| (gt * u - v).norm_sq()).sum::<f64>().sqrt();
    Some((g, residual))
}

/// Deformation gradient at every cell with at least two valid wave vectors,
/// using reference vectors of length `n`.
pub fn solve_deformation_gradient(field: &WaveVectorField, n: f64) -> Result<DeformationGradientField> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidParameter(format!("reciprocal number must be positive, got {n}")));
    }
    let u = reference_vectors(n);
    let lb = field.len();
    let mut matrices = Array2::from_elem((lb, lb), Mat2::ZERO);
    let mut residual = Array2::from_elem((lb, lb), f64::NAN);
    let mut defined = Array2::from_elem((lb, lb), false);
    for ((i, j), vs) in field.vectors.indexed_iter() {
        let pairs: Vec<(Vec2, Vec2)> = (0..3).filter(|&s| field.valid[[i, j]][s]).map(|s| (u[s], vs[s])).collect();
        if let Some((g, r)) = least_squares_gradient(&pairs) {
            matrices[[i, j]] = g;
            residual[[i, j]] = r;
            defined[[i, j]] = true;
        }
    }
    Ok(DeformationGradientField { matrices, residual, defined })
}

/// How the mean determinant normalizes the volume distortion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeNormalization {
    /// `det(G/c) − 1 = det(G)/c² − 1`.
    #[default]
    MatrixByMean,
    /// `det(G/√c) − 1 = det(G)/c − 1`, which centres a uniform field at 0.
    MatrixBySqrtMean,
}

/// Volume distortion relative to the mean determinant `c` over defined cells.
pub fn volume_distortion(grad: &DeformationGradientField, norm: VolumeNormalization) -> Result<ScalarMap> {
    let dets: Vec<f64> = grad
        .matrices
        .iter()
        .zip(grad.defined.iter())
        .filter(|(_, ok)| **ok)
        .map(|(g, _)| g.det())
        .collect();
    if dets.is_empty() {
        return Err(Error::Undefined("deformation gradient has no defined cells".into()));
    }
    let c = dets.iter().sum::<f64>() / dets.len() as f64;
    if !(c > 0.0) {
        return Err(Error::DegenerateField(c));
    }
    let denom = match norm {
        VolumeNormalization::MatrixByMean => c * c,
        VolumeNormalization::MatrixBySqrtMean => c,
    };
    let values = Array2::from_shape_fn(grad.matrices.dim(), |(i, j)| {
        if grad.defined[[i, j]] {
            grad.matrices[[i, j]].det() / denom - 1.0
        } else {
            0.0
        }
    });
    ScalarMap::with_mask(values, grad.defined.clone(), MapKind::VolumeDistortion)
}

/// Rectangle of position cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellWindow {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Extrema of a volume-distortion dipole and the implied Burgers direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurgersReadout {
    /// Position (unit-square coordinates) of the maximum.
    pub x1: Vec2,
    /// Position of the minimum.
    pub x2: Vec2,
    /// Unit vector perpendicular to `x1 − x2`.
    pub direction: Vec2,
    /// `Vol(x1) − Vol(x2)`.
    pub strength: f64,
}

/// Reads the dipole inside `window`; needs both signs of `Vol` there.
pub fn burgers_direction(vol: &ScalarMap, window: &CellWindow) -> Result<BurgersReadout> {
    let lb = vol.len();
    let mut hi: Option<(usize, usize, f64)> = None;
    let mut lo: Option<(usize, usize, f64)> = None;
    for i in window.rows.start..window.rows.end.min(lb) {
        for j in window.cols.start..window.cols.end.min(vol.values.ncols()) {
            let Some(v) = vol.get(i, j) else { continue };
            if hi.is_none_or(|h| v > h.2) {
                hi = Some((i, j, v));
            }
            if lo.is_none_or(|l| v < l.2) {
                lo = Some((i, j, v));
            }
        }
    }
    let (Some(hi), Some(lo)) = (hi, lo) else {
        return Err(Error::NoSignChange);
    };
    if !(hi.2 > 0.0 && lo.2 < 0.0) {
        return Err(Error::NoSignChange);
    }
    let pos = |c: (usize, usize, f64)| Vec2::new(c.0 as f64 / lb as f64, c.1 as f64 / lb as f64);
    let (x1, x2) = (pos(hi), pos(lo));
    let axis = x1 - x2;
    Ok(BurgersReadout { x1, x2, direction: axis.perp() * (1.0 / axis.norm()), strength: hi.2 - lo.2 })
}
