//! Rotation and boundary maps from synchrosqueezed energy.
//!
//! The polar grid splits `[0, π)` into three sectors of `L_A/3` bins. The
//! stacked algorithm sums the sectors before looking for angular bumps; the
//! per-vector algorithm treats each sector separately and blends the results
//! by energy. Angular profiles are circular with period 60°, so bump
//! detection runs on a copy rotated to put the maximum at the centre.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_deg;
use crate::spectral::bump_detection;
use crate::sswpt::SsEnergy;

pub const DEFAULT_ANGULAR_C1: f64 = 0.3;
pub const DEFAULT_ANGULAR_C2: f64 = 0.1;

/// What a [`ScalarMap`] holds; decides rendering and valid ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    AngleDeg,
    BoundaryIndicator,
    Energy,
    VolumeDistortion,
}

/// A field on the position grid with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub values: Array2<f64>,
    pub valid: Array2<bool>,
    pub kind: MapKind,
}

impl ScalarMap {
    pub fn new(values: Array2<f64>, kind: MapKind) -> Self {
        let valid = values.mapv(f64::is_finite);
        Self { values, valid, kind }
    }

    pub fn with_mask(values: Array2<f64>, valid: Array2<bool>, kind: MapKind) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::ShapeMismatch("values and mask differ in shape".into()));
        }
        Ok(Self { values, valid, kind })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k1: usize, k2: usize) -> Option<f64> {
        self.valid[[k1, k2]].then(|| self.values[[k1, k2]])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Minimum and maximum over valid cells.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter(|(_, ok)| **ok)
            .fold(None, |acc, (v, _)| match acc {
                None => Some((*v, *v)),
                Some((lo, hi)) => Some((lo.min(*v), hi.max(*v))),
            })
    }
}

/// Result of the two-bump analysis of one angular profile.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpStats {
    pub te1: f64,
    pub te2: f64,
    /// Weighted mean angle of the heavier bump in degrees, in `[0, 60)`.
    pub angle_deg: Option<f64>,
    pub bd: f64,
    /// Profile bins belonging to the heavier bump.
    pub first_bump: Vec<usize>,
}

impl BumpStats {
    fn undefined() -> Self {
        Self { te1: 0.0, te2: 0.0, angle_deg: None, bd: 1.0, first_bump: Vec::new() }
    }
}

/// Bins of the dominant bump of a circular profile, listed from the low
/// angle end, together with their unwrapped offsets from the peak bin.
fn circular_bump(profile: &[f64], c1: f64, c2: f64) -> Result<Vec<(usize, i64)>> {
    let m = profile.len();
    let mut peak = 0;
    for (i, &v) in profile.iter().enumerate() {
        if v > profile[peak] {
            peak = i;
        }
    }
    let centre = m / 2;
    let rotated: Vec<f64> = (0..m).map(|i| profile[(i + peak + m - centre) % m]).collect();
    let (lo, hi) = bump_detection(&rotated, c1, c2)?;
    Ok((lo.ceil() as usize..=hi.floor() as usize)
        .map(|i| ((i + peak + m - centre) % m, i as i64 - centre as i64))
        .collect())
}

/// Total energy, weighted mean angle and bins of the dominant bump.
fn bump_moments(profile: &[f64], c1: f64, c2: f64, bin_deg: f64) -> Result<(f64, f64, Vec<usize>)> {
    let bins = circular_bump(profile, c1, c2)?;
    let peak = bins.iter().find(|(_, off)| *off == 0).map(|(i, _)| *i).unwrap_or(bins[0].0);
    let peak_angle = (peak as f64 + 0.5) * bin_deg;
    let mut te = 0.0;
    let mut moment = 0.0;
    for &(i, off) in &bins {
        te += profile[i];
        moment += profile[i] * (peak_angle + off as f64 * bin_deg);
    }
    let angle = if te > 0.0 { wrap_deg(moment / te, 60.0) } else { wrap_deg(peak_angle, 60.0) };
    Ok((te, angle, bins.into_iter().map(|(i, _)| i).collect()))
}

/// Two-bump analysis of one circular angular profile covering 60° with bins
/// of `bin_deg` degrees.
pub fn analyze_profile(profile: &[f64], c1: f64, c2: f64, bin_deg: f64) -> BumpStats {
    if profile.len() < 2 || !profile.iter().any(|v| *v > 0.0) {
        return BumpStats::undefined();
    }
    let (te1, angle1, bins1) = match bump_moments(profile, c1, c2, bin_deg) {
        Ok(b) => b,
        Err(_) => return BumpStats::undefined(),
    };
    let mut rest = profile.to_vec();
    for &i in &bins1 {
        rest[i] = 0.0;
    }
    let second = if rest.iter().any(|v| *v > 0.0) { bump_moments(&rest, c1, c2, bin_deg).ok() } else { None };
    let (te1, te2, angle, first_bump) = match second {
        // The heavier bump is reported first so that TE₁ ≥ TE₂.
        Some((te2, angle2, bins2)) if te2 > te1 => (te2, te1, angle2, bins2),
        Some((te2, _, _)) => (te1, te2, angle1, bins1),
        None => (te1, 0.0, angle1, bins1),
    };
    let bd = 1.0 / (te1 - te2 + 1.0).sqrt();
    BumpStats { te1, te2, angle_deg: Some(angle), bd, first_bump }
}

/// Angular profile `E_a(θ) = Σ_r T(r, θ + jπ/3)` of sector `j` at one cell,
/// or of the stacked distribution when `sector` is `None`.
pub fn angular_profile(energy: &SsEnergy, k1: usize, k2: usize, sector: Option<usize>) -> Vec<f64> {
    let polar = energy.at(k1, k2);
    let m = energy.la() / 3;
    let mut out = vec![0.0; m];
    for row in polar.rows() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += match sector {
                Some(j) => row[i + j * m],
                None => row[i] + row[i + m] + row[i + 2 * m],
            };
        }
    }
    out
}

/// Per-cell maps produced by the stacked algorithm, or by one sector of the
/// per-vector algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpMaps {
    pub angle: ScalarMap,
    pub bd: ScalarMap,
    pub te1: ScalarMap,
    pub te2: ScalarMap,
}

impl BumpMaps {
    fn from_cells(lb: usize, cells: &[BumpStats]) -> Self {
        let grid = |f: &dyn Fn(&BumpStats) -> f64| Array2::from_shape_fn((lb, lb), |(i, j)| f(&cells[i * lb + j]));
        let angle_valid = Array2::from_shape_fn((lb, lb), |(i, j)| cells[i * lb + j].angle_deg.is_some());
        let angle = grid(&|c| c.angle_deg.unwrap_or(0.0));
        Self {
            angle: ScalarMap { values: angle, valid: angle_valid, kind: MapKind::AngleDeg },
            bd: ScalarMap::new(grid(&|c| c.bd), MapKind::BoundaryIndicator),
            te1: ScalarMap::new(grid(&|c| c.te1), MapKind::Energy),
            te2: ScalarMap::new(grid(&|c| c.te2), MapKind::Energy),
        }
    }
}

fn check_energy(energy: &SsEnergy) -> Result<()> {
    if !energy.la().is_multiple_of(3) || energy.la() < 6 {
        return Err(Error::InvalidParameter(format!("L_A = {} is not a multiple of 3", energy.la())));
    }
    Ok(())
}

fn bin_deg(energy: &SsEnergy) -> f64 {
    180.0 / energy.la() as f64
}

fn per_cell<T: Send>(lb: usize, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    (0..lb * lb).into_par_iter().map(|idx| f(idx / lb, idx % lb)).collect()
}

/// Stacked synchrosqueezed energy analysis.
pub fn analyze_stacked(energy: &SsEnergy, c1: f64, c2: f64) -> Result<BumpMaps> {
    check_energy(energy)?;
    let lb = energy.lb();
    let w = bin_deg(energy);
    let cells = per_cell(lb, |i, j| analyze_profile(&angular_profile(energy, i, j, None), c1, c2, w));
    Ok(BumpMaps::from_cells(lb, &cells))
}

/// Output of the per-vector algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct PerVectorMaps {
    pub angle: ScalarMap,
    pub bd: ScalarMap,
    pub per_j: [BumpMaps; 3],
    /// Blending weights `W_j`; they sum to 1 wherever `bd` comes from data.
    pub weights: [Array2<f64>; 3],
}

/// Energy-weighted mean on a circle of the given period.
pub fn circular_weighted_mean(values: &[(f64, f64)], period: f64) -> Option<f64> {
    let (mut x, mut y) = (0.0, 0.0);
    for &(angle, weight) in values {
        let phi = angle / period * std::f64::consts::TAU;
        x += weight * phi.cos();
        y += weight * phi.sin();
    }
    if x == 0.0 && y == 0.0 {
        return None;
    }
    Some(wrap_deg(y.atan2(x) / std::f64::consts::TAU * period, period))
}

/// Per-vector analysis with energy-weighted blending of the three sectors.
pub fn analyze_per_vector(energy: &SsEnergy, c1: f64, c2: f64) -> Result<PerVectorMaps> {
    check_energy(energy)?;
    let lb = energy.lb();
    let w = bin_deg(energy);
    let cells: Vec<[BumpStats; 3]> = per_cell(lb, |i, j| {
        std::array::from_fn(|s| analyze_profile(&angular_profile(energy, i, j, Some(s)), c1, c2, w))
    });
    let per_j: [BumpMaps; 3] = std::array::from_fn(|s| {
        let column: Vec<BumpStats> = cells.iter().map(|c| c[s].clone()).collect();
        BumpMaps::from_cells(lb, &column)
    });
    let mut weights: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((lb, lb)));
    let mut angle = Array2::zeros((lb, lb));
    let mut angle_valid = Array2::from_elem((lb, lb), false);
    let mut bd = Array2::from_elem((lb, lb), 1.0);
    for (idx, c) in cells.iter().enumerate() {
        let (i, j) = (idx / lb, idx % lb);
        let total: f64 = c.iter().map(|s| s.te1 + s.te2).sum();
        if !(total > 0.0) {
            continue;
        }
        let wj: [f64; 3] = std::array::from_fn(|s| (c[s].te1 + c[s].te2) / total);
        bd[[i, j]] = (0..3).map(|s| wj[s] * c[s].bd).sum();
        let samples: Vec<(f64, f64)> =
            (0..3).filter_map(|s| c[s].angle_deg.map(|a| (a, wj[s]))).collect();
        if let Some(a) = circular_weighted_mean(&samples, 60.0) {
            angle[[i, j]] = a;
            angle_valid[[i, j]] = true;
        }
        for s in 0..3 {
            weights[s][[i, j]] = wj[s];
        }
    }
    Ok(PerVectorMaps {
        angle: ScalarMap { values: angle, valid: angle_valid, kind: MapKind::AngleDeg },
        bd: ScalarMap::new(bd, MapKind::BoundaryIndicator),
        per_j,
        weights,
    })
}

/// Cells with `bd ≥ tau·max(bd)`, minus 4-connected components smaller than
/// four cells.
pub fn threshold_boundary(bd: &ScalarMap, tau: f64) -> Result<Array2<bool>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidParameter(format!("threshold must lie in (0, 1], got {tau}")));
    }
    let (_, max) = bd.range().ok_or_else(|| Error::Undefined("boundary map has no valid cells".into()))?;
    let level = tau * max;
    let mut mask = Array2::from_shape_fn(bd.values.dim(), |(i, j)| bd.valid[[i, j]] && bd.values[[i, j]] >= level);
    remove_small_components(&mut mask, 4);
    Ok(mask)
}

fn remove_small_components(mask: &mut Array2<bool>, min_size: usize) {
    let (rows, cols) = mask.dim();
    let mut seen = Array2::from_elem((rows, cols), false);
    for start in (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))) {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut component = vec![start];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some((i, j)) = stack.pop() {
            let neighbours = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for n in neighbours {
                if n.0 < rows && n.1 < cols && mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                    component.push(n);
                }
            }
        }
        if component.len() < min_size {
            for c in component {
                mask[c] = false;
            }
        }
    }
}
