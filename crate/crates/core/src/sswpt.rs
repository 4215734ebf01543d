//! Band-limited discrete synchrosqueezed wave-packet transform.
//!
//! Packets live on concentric rings covering the band `[r1, r2]`. The packet
//! centred at `a·e_θ` has Fourier profile
//!
//! ```text
//! ŵ(A_a⁻¹ R_θ⁻¹ (ξ − a·e_θ)) · a^{−(t+s)/2},   A_a = diag(aᵗ, aˢ)
//! ```
//!
//! and coefficients `W(a, θ, b) = Σ_ξ profile(ξ) f̂(ξ) e^{2πi b·ξ}`, sampled
//! at `b = k/L_B`. Because `e^{2πi b·ξ}` only depends on `ξ mod L_B` at those
//! points, folding the support into an `L_B×L_B` array and running one
//! inverse FFT gives exact samples.
//!
//! Synchrosqueezing moves `|W|²` from `(a, θ, b)` to the estimated local wave
//! vector `v = Re(∇_b W / (2πi W))` on a polar grid. Only `θ ∈ [0, π)` is
//! computed since images are real.

use std::f64::consts::PI;

use ndarray::{Array2, Array4, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::lattice::CrystalImage;
use crate::spectral::{fft2_in_place, fourier_coefficients, signed_frequency, FrequencyBand};

/// Distance in bin widths below which a coordinate is treated as on an edge.
const EDGE_TOLERANCE: f64 = 1e-9;

fn snapped_floor(u: f64) -> i64 {
    let edge = u.round();
    if (u - edge).abs() <= EDGE_TOLERANCE {
        edge as i64
    } else {
        u.floor() as i64
    }
}

/// Parameters of the transform and of the squeezing grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SstParams {
    /// Angular scaling exponent.
    pub s: f64,
    /// Radial scaling exponent.
    pub t: f64,
    /// Support radius of the mother packet.
    pub d: f64,
    /// Relative squeeze threshold.
    pub epsilon: f64,
    /// Position grid size; chosen from the band when `None`.
    pub lb: Option<usize>,
    /// Radial bins of the squeezing grid.
    pub lr: usize,
    /// Angular bins over `[0, π)`.
    pub la: usize,
    /// Tiling overlap factor.
    pub redundancy: f64,
}

impl Default for SstParams {
    fn default() -> Self {
        Self { s: 0.5, t: 0.5, d: 1.0, epsilon: 1e-4, lb: None, lr: 16, la: 96, redundancy: 2.0 }
    }
}

impl SstParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.5 <= self.s && self.s <= self.t && self.t <= 1.0) {
            return bad(format!("need 0.5 ≤ s ≤ t ≤ 1, got s={} t={}", self.s, self.t));
        }
        if !(self.d > 0.0 && self.d <= 1.0) {
            return bad(format!("need 0 < d ≤ 1, got {}", self.d));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.la == 0 || !self.la.is_multiple_of(3) {
            return bad(format!("L_A must be a positive multiple of 3, got {}", self.la));
        }
        if self.lr == 0 {
            return bad("L_R must be positive".into());
        }
        if self.lb == Some(0) {
            return bad("L_B must be positive".into());
        }
        if !(self.redundancy >= 1.0) || !self.redundancy.is_finite() {
            return bad(format!("redundancy must be at least 1, got {}", self.redundancy));
        }
        Ok(())
    }

    /// Explicit `L_B`, or the smallest power of two `≥ 4·d·r2ᵗ`, at least 64.
    pub fn position_grid(&self, band: &FrequencyBand) -> usize {
        self.lb.unwrap_or_else(|| {
            let need = (4.0 * self.d * band.r2.powf(self.t)).ceil().max(1.0) as usize;
            need.next_power_of_two().max(64)
        })
    }

    fn amplitude_exponent(&self) -> f64 {
        (self.s + self.t) / 2.0
    }
}

/// Peak-normalized mother packet `ŵ(y) = exp(1 − 1/(1 − |y/d|²))` on `|y| < d`.
pub fn mother_packet(y: Vec2, d: f64) -> f64 {
    let rho2 = y.norm_sq() / (d * d);
    if rho2 < 1.0 {
        (1.0 - 1.0 / (1.0 - rho2)).exp()
    } else {
        0.0
    }
}

/// One discrete packet: centre `a·e_θ`, quadrature weight `a·Δa·Δθ`, and its
/// Fourier support as `(ξ1, ξ2, profile)` triples.
#[derive(Debug, Clone)]
pub struct Atom {
    pub a: f64,
    pub theta: f64,
    pub weight: f64,
    pub support: Vec<(i64, i64, f64)>,
}

impl Atom {
    pub fn centre(&self) -> Vec2 {
        Vec2::from_angle(self.theta) * self.a
    }
}

/// Atoms covering the upper half of the annulus `r1 ≤ |ξ| ≤ r2`.
#[derive(Debug, Clone)]
pub struct PacketTiling {
    pub atoms: Vec<Atom>,
    pub band: FrequencyBand,
    pub rings: Vec<f64>,
    pub params: SstParams,
    pub image_len: usize,
}

impl PacketTiling {
    /// Largest packet support diameter `2·d·aᵗ`.
    pub fn max_support_diameter(&self) -> f64 {
        let a_max = self.rings.last().copied().unwrap_or(0.0);
        2.0 * self.params.d * a_max.powf(self.params.t)
    }

    /// Spatial half-width `1/(d·aˢ)` of the widest packet, in unit-square
    /// coordinates. Cells closer than this to a boundary see both sides.
    pub fn spatial_radius(&self) -> f64 {
        let a_min = self.rings.first().copied().unwrap_or(1.0);
        1.0 / (self.params.d * a_min.powf(self.params.s))
    }

    /// Whether some atom's open support contains `ξ`.
    pub fn covers(&self, xi: Vec2) -> bool {
        let p = &self.params;
        self.atoms.iter().any(|atom| {
            let rel = xi - atom.centre();
            let e = Vec2::from_angle(atom.theta);
            let y = Vec2::new(rel.dot(e) / atom.a.powf(p.t), rel.dot(e.perp()) / atom.a.powf(p.s));
            y.norm() < p.d
        })
    }
}

/// Places rings `a_{i+1} = a_i + d·a_iᵗ/redundancy` from `max(r1, 1)` until a
/// ring reaches `r2`, and on each ring `n_i` equally spaced angles in
/// `[0, π)` with spacing at most `2·asin(d·aˢ/(2a))/redundancy`.
pub fn build_tiling(band: &FrequencyBand, params: &SstParams, image_len: usize) -> Result<PacketTiling> {
    params.validate()?;
    let need = 2.0 * (band.r2 + params.d * band.r2.powf(params.t));
    if (image_len as f64) < need {
        return Err(Error::BandNearNyquist { r1: band.r1, r2: band.r2, len: image_len });
    }
    let step = |a: f64| params.d * a.powf(params.t) / params.redundancy;
    let mut rings = Vec::new();
    let mut a = band.r1.max(1.0);
    loop {
        rings.push(a);
        if a >= band.r2 {
            break;
        }
        a += step(a);
    }

    let half = image_len as i64 / 2;
    let amp = |a: f64| a.powf(-params.amplitude_exponent());
    let mut atoms = Vec::new();
    for &a in &rings {
        let spacing = 2.0 * (params.d * a.powf(params.s) / (2.0 * a)).min(1.0).asin() / params.redundancy;
        let count = (PI / spacing).ceil() as usize;
        let d_theta = PI / count as f64;
        let (at, as_) = (a.powf(params.t), a.powf(params.s));
        let reach = params.d * at.max(as_);
        for j in 0..count {
            let theta = j as f64 * d_theta;
            let e = Vec2::from_angle(theta);
            let c = e * a;
            let mut support = Vec::new();
            for x1 in (c.x - reach).ceil() as i64..=(c.x + reach).floor() as i64 {
                for x2 in (c.y - reach).ceil() as i64..=(c.y + reach).floor() as i64 {
                    if x1.abs() >= half || x2.abs() >= half {
                        continue;
                    }
                    let rel = Vec2::new(x1 as f64, x2 as f64) - c;
                    let y = Vec2::new(rel.dot(e) / at, rel.dot(e.perp()) / as_);
                    let v = mother_packet(y, params.d) * amp(a);
                    if v > 0.0 {
                        support.push((x1, x2, v));
                    }
                }
            }
            atoms.push(Atom { a, theta, weight: a * step(a) * d_theta, support });
        }
    }
    Ok(PacketTiling { atoms, band: *band, rings, params: *params, image_len })
}

/// Per-atom transform coefficients `W` and `∇_b W` on the position grid.
#[derive(Debug, Clone)]
pub struct SsCoefficients {
    pub lb: usize,
    pub image_len: usize,
    pub w: Vec<Array2<Complex64>>,
    pub grad: Vec<[Array2<Complex64>; 2]>,
}

/// Shared state of one transform: the image spectrum and grid sizes.
struct Transform<'a> {
    fhat: Array2<Complex64>,
    tiling: &'a PacketTiling,
    lb: usize,
}

impl<'a> Transform<'a> {
    fn new(img: &CrystalImage, tiling: &'a PacketTiling) -> Result<Self> {
        if img.len() != tiling.image_len {
            return Err(Error::ShapeMismatch(format!(
                "tiling built for {}x{} images, got {}x{}",
                tiling.image_len,
                tiling.image_len,
                img.len(),
                img.len()
            )));
        }
        let lb = tiling.params.position_grid(&tiling.band);
        let diameter = tiling.max_support_diameter();
        if (lb as f64) < diameter {
            return Err(Error::PositionGridTooSmall { lb, diameter });
        }
        Ok(Self { fhat: fourier_coefficients(img), tiling, lb })
    }

    fn fhat_at(&self, x1: i64, x2: i64) -> Complex64 {
        let len = self.fhat.nrows() as i64;
        self.fhat[[x1.rem_euclid(len) as usize, x2.rem_euclid(len) as usize]]
    }

    /// `W` and optionally `∂_{b1} W`, `∂_{b2} W` for one atom.
    fn atom(&self, atom: &Atom, with_grad: bool) -> (Array2<Complex64>, Option<[Array2<Complex64>; 2]>) {
        let lb = self.lb as i64;
        let mut w = Array2::<Complex64>::zeros((self.lb, self.lb));
        let mut g = with_grad.then(|| [w.clone(), w.clone()]);
        for &(x1, x2, profile) in &atom.support {
            let c = self.fhat_at(x1, x2) * profile;
            let idx = [x1.rem_euclid(lb) as usize, x2.rem_euclid(lb) as usize];
            w[idx] += c;
            if let Some([g1, g2]) = g.as_mut() {
                let ic = Complex64::new(0.0, 2.0 * PI) * c;
                g1[idx] += ic * x1 as f64;
                g2[idx] += ic * x2 as f64;
            }
        }
        fft2_in_place(&mut w, true);
        if let Some([g1, g2]) = g.as_mut() {
            fft2_in_place(g1, true);
            fft2_in_place(g2, true);
        }
        (w, g)
    }

    /// Mass scale turning `|W|²·weight` into energy per position cell
    /// measured in pixel units.
    fn mass_scale(&self) -> f64 {
        let r = self.tiling.image_len as f64 / self.lb as f64;
        r * r
    }
}

/// Runs the forward transform and keeps every atom's coefficients.
pub fn forward_transform(img: &CrystalImage, tiling: &PacketTiling) -> Result<SsCoefficients> {
    let tr = Transform::new(img, tiling)?;
    let (w, grad): (Vec<_>, Vec<_>) = tiling
        .atoms
        .par_iter()
        .map(|atom| {
            let (w, g) = tr.atom(atom, true);
            (w, g.expect("gradient requested"))
        })
        .unzip();
    Ok(SsCoefficients { lb: tr.lb, image_len: tiling.image_len, w, grad })
}

/// Synchrosqueezed energy `T[b1, b2, r, θ]` with its polar axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SsEnergy {
    pub t: Array4<f64>,
    pub r_min: f64,
    pub r_max: f64,
}

impl SsEnergy {
    pub fn zeros(lb: usize, lr: usize, la: usize, r_min: f64, r_max: f64) -> Self {
        Self { t: Array4::zeros((lb, lb, lr, la)), r_min, r_max }
    }

    pub fn lb(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn lr(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn la(&self) -> usize {
        self.t.shape()[3]
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / self.lr() as f64
    }

    pub fn dtheta(&self) -> f64 {
        PI / self.la() as f64
    }

    /// Radial bin centres.
    pub fn r_axis(&self) -> Vec<f64> {
        (0..self.lr()).map(|i| self.r_min + (i as f64 + 0.5) * self.dr()).collect()
    }

    /// Angular bin centres in radians.
    pub fn theta_axis(&self) -> Vec<f64> {
        (0..self.la()).map(|i| (i as f64 + 0.5) * self.dtheta()).collect()
    }

    /// The `L_R×L_A` polar distribution at one position.
    pub fn at(&self, k1: usize, k2: usize) -> ArrayView2<'_, f64> {
        self.t.slice(ndarray::s![k1, k2, .., ..])
    }

    pub fn total(&self) -> f64 {
        self.t.sum()
    }

    /// Polar bin of a wave vector already in the upper half plane. Edges are
    /// closed on the left; a coordinate within rounding of an edge is put on
    /// it, and angles at π fold onto 0, so exact estimates of on-grid vectors
    /// land in one bin whatever their last-bit errors.
    pub fn bin_of(&self, v: Vec2) -> Option<(usize, usize)> {
        let r = v.norm();
        if !(r >= self.r_min && r < self.r_max) {
            return None;
        }
        let ir = snapped_floor((r - self.r_min) / self.dr()).clamp(0, self.lr() as i64 - 1) as usize;
        let ia = snapped_floor(v.arg() / self.dtheta()).rem_euclid(self.la() as i64) as usize;
        Some((ir, ia))
    }
}

/// Radial extent of the squeezing grid for a band.
pub fn squeeze_range(band: &FrequencyBand) -> (f64, f64) {
    (0.9 * band.r1, 1.1 * band.r2)
}

/// Local wave-vector estimate `Re(∇W / (2πi W))`, mapped to the upper half plane.
fn wave_vector(w: Complex64, g1: Complex64, g2: Complex64) -> Vec2 {
    let n = 2.0 * PI * w.norm_sqr();
    Vec2::new((g1 * w.conj()).im / n, (g2 * w.conj()).im / n).upper_half()
}

/// Retained `(flat T index, mass)` pairs for one atom.
fn squeeze_atom(
    energy: &SsEnergy,
    atom: &Atom,
    w: &Array2<Complex64>,
    g: &[Array2<Complex64>; 2],
    cutoff: f64,
    scale: f64,
) -> Vec<(usize, f64)> {
    let (lb, lr, la) = (energy.lb(), energy.lr(), energy.la());
    let mut out = Vec::new();
    for ((k1, k2), &wv) in w.indexed_iter() {
        if wv.norm() < cutoff || wv.norm() == 0.0 {
            continue;
        }
        let v = wave_vector(wv, g[0][[k1, k2]], g[1][[k1, k2]]);
        if let Some((ir, ia)) = energy.bin_of(v) {
            let flat = ((k1 * lb + k2) * lr + ir) * la + ia;
            out.push((flat, wv.norm_sqr() * atom.weight * scale));
        }
    }
    out
}

/// Absolute `|W|` cutoff for an atom given the global normalized maximum.
fn cutoff(params: &SstParams, a: f64, max_normalized: f64) -> f64 {
    a.powf(-params.amplitude_exponent()) * params.epsilon.sqrt() * max_normalized
}

/// Squeezes precomputed coefficients.
pub fn synchrosqueeze(coeffs: &SsCoefficients, tiling: &PacketTiling) -> Result<SsEnergy> {
    if coeffs.w.len() != tiling.atoms.len() || coeffs.grad.len() != tiling.atoms.len() {
        return Err(Error::ShapeMismatch("coefficients do not match the tiling".into()));
    }
    let p = &tiling.params;
    let (r_min, r_max) = squeeze_range(&tiling.band);
    let mut energy = SsEnergy::zeros(coeffs.lb, p.lr, p.la, r_min, r_max);
    let max = tiling
        .atoms
        .iter()
        .zip(&coeffs.w)
        .map(|(atom, w)| atom.a.powf(p.amplitude_exponent()) * w.iter().fold(0.0f64, |m, c| m.max(c.norm())))
        .fold(0.0, f64::max);
    let r = coeffs.image_len as f64 / coeffs.lb as f64;
    let contributions: Vec<_> = tiling
        .atoms
        .par_iter()
        .enumerate()
        .map(|(i, atom)| squeeze_atom(&energy, atom, &coeffs.w[i], &coeffs.grad[i], cutoff(p, atom.a, max), r * r))
        .collect();
    let t = energy.t.as_slice_mut().expect("standard layout");
    for list in contributions {
        for (flat, mass) in list {
            t[flat] += mass;
        }
    }
    Ok(energy)
}

/// Transform and squeeze in two streaming passes without storing all
/// coefficients. Results are identical to [`synchrosqueeze`] applied to
/// [`forward_transform`].
pub fn synchrosqueezed_energy(img: &CrystalImage, tiling: &PacketTiling) -> Result<SsEnergy> {
    let tr = Transform::new(img, tiling)?;
    let p = &tiling.params;
    let max = tiling
        .atoms
        .par_iter()
        .map(|atom| {
            let (w, _) = tr.atom(atom, false);
            atom.a.powf(p.amplitude_exponent()) * w.iter().fold(0.0f64, |m, c| m.max(c.norm()))
        })
        .reduce(|| 0.0, f64::max);
    let (r_min, r_max) = squeeze_range(&tiling.band);
    let mut energy = SsEnergy::zeros(tr.lb, p.lr, p.la, r_min, r_max);
    let scale = tr.mass_scale();
    // Contributions are scattered in atom order so the sums do not depend on
    // thread scheduling.
    for chunk in tiling.atoms.chunks(64) {
        let contributions: Vec<_> = chunk
            .par_iter()
            .map(|atom| {
                let (w, g) = tr.atom(atom, true);
                squeeze_atom(&energy, atom, &w, &g.expect("gradient requested"), cutoff(p, atom.a, max), scale)
            })
            .collect();
        let t = energy.t.as_slice_mut().expect("standard layout");
        for list in contributions {
            for (flat, mass) in list {
                t[flat] += mass;
            }
        }
    }
    Ok(energy)
}

/// One retained local wave-vector estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveVectorSample {
    pub atom: usize,
    pub k1: usize,
    pub k2: usize,
    pub v: Vec2,
    pub amplitude: f64,
}

/// Every wave-vector estimate that passes the squeeze threshold, whether or
/// not it lands inside the squeezing grid.
pub fn wave_vector_estimates(img: &CrystalImage, tiling: &PacketTiling) -> Result<Vec<WaveVectorSample>> {
    let coeffs = forward_transform(img, tiling)?;
    let p = &tiling.params;
    let max = tiling
        .atoms
        .iter()
        .zip(&coeffs.w)
        .map(|(atom, w)| atom.a.powf(p.amplitude_exponent()) * w.iter().fold(0.0f64, |m, c| m.max(c.norm())))
        .fold(0.0, f64::max);
    let mut out = Vec::new();
    for (i, atom) in tiling.atoms.iter().enumerate() {
        let cut = cutoff(p, atom.a, max);
        for ((k1, k2), &w) in coeffs.w[i].indexed_iter() {
            if w.norm() >= cut && w.norm() > 0.0 {
                let v = wave_vector(w, coeffs.grad[i][0][[k1, k2]], coeffs.grad[i][1][[k1, k2]]);
                out.push(WaveVectorSample { atom: i, k1, k2, v, amplitude: w.norm() });
            }
        }
    }
    Ok(out)
}

/// `Σ_atoms Σ_b |W|²·weight`, in the same units as the squeezed energy.
pub fn frame_energy(coeffs: &SsCoefficients, tiling: &PacketTiling) -> f64 {
    let r = coeffs.image_len as f64 / coeffs.lb as f64;
    tiling
        .atoms
        .iter()
        .zip(&coeffs.w)
        .map(|(atom, w)| atom.weight * w.iter().map(|c| c.norm_sqr()).sum::<f64>())
        .sum::<f64>()
        * r
        * r
}

/// Pixel-sum energy `Σ_x |f_band(x)|²` of the part of `img` with
/// `r1 ≤ |ξ| ≤ r2`.
pub fn band_energy(img: &CrystalImage, band: &FrequencyBand) -> f64 {
    let len = img.len();
    let fhat = fourier_coefficients(img);
    let sum: f64 = fhat
        .indexed_iter()
        .filter(|((k1, k2), _)| {
            let r = (signed_frequency(*k1, len) as f64).hypot(signed_frequency(*k2, len) as f64);
            band.contains(r)
        })
        .map(|(_, c)| c.norm_sqr())
        .sum();
    sum * (len * len) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cos_wave(len: usize, k: (i64, i64), phase: f64) -> CrystalImage {
        let s = Array2::from_shape_fn((len, len), |(i, j)| {
            (2.0 * PI * (k.0 as f64 * i as f64 + k.1 as f64 * j as f64) / len as f64 + phase).cos()
        });
        CrystalImage::new(s).unwrap()
    }

    #[test]
    fn bin_edges_absorb_rounding() {
        let e = SsEnergy::zeros(1, 16, 96, 36.0, 66.0);
        // 51 sits exactly on the edge between radial bins 7 and 8.
        assert_eq!(e.bin_of(Vec2::new(51.0 - 1e-13, 1e-15)), Some((8, 0)));
        assert_eq!(e.bin_of(Vec2::new(51.0, 0.0)), Some((8, 0)));
        assert_eq!(e.bin_of(Vec2::new(-51.0, 1e-15)), Some((8, 0)));
        assert_eq!(e.bin_of(Vec2::new(0.0, 51.0)), Some((8, 48)));
        assert_eq!(e.bin_of(Vec2::new(30.0, 0.0)), None);
    }

    #[test]
    fn default_params_are_valid() {
        SstParams::default().validate().unwrap();
        let mut p = SstParams { la: 100, ..SstParams::default() };
        assert!(p.validate().is_err());
        p = SstParams { s: 0.8, t: 0.7, ..SstParams::default() };
        assert!(p.validate().is_err());
        p = SstParams { s: 1.0, t: 1.0, ..SstParams::default() };
        p.validate().unwrap();
    }

    #[test]
    fn mother_packet_is_peak_normalized_and_compact() {
        assert_eq!(mother_packet(Vec2::ZERO, 1.0), 1.0);
        assert_eq!(mother_packet(Vec2::new(1.0, 0.0), 1.0), 0.0);
        assert_eq!(mother_packet(Vec2::new(0.3, 0.0), 0.3), 0.0);
        assert!(mother_packet(Vec2::new(0.5, 0.0), 1.0) > 0.0);
    }

    #[test]
    fn tiling_matches_placement_formulas() {
        // Evaluated independently: step √a/2, count ⌈π/(asin(√a/(2a)))⌉.
        let band = FrequencyBand::new(115.0, 125.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), 512).unwrap();
        let mut expected_rings = vec![115.0f64];
        while *expected_rings.last().unwrap() < 125.0 {
            let a = *expected_rings.last().unwrap();
            expected_rings.push(a + a.sqrt() / 2.0);
        }
        assert_eq!(tiling.rings, expected_rings);
        assert!((2..=4).contains(&tiling.rings.len()));
        let per_ring = |a: f64| (PI / ((a.sqrt() / (2.0 * a)).asin())).ceil() as usize;
        assert_eq!(per_ring(120.0), 69);
        let total: usize = tiling.rings.iter().map(|&a| per_ring(a)).sum();
        assert_eq!(tiling.atoms.len(), total);
    }

    #[test]
    fn isotropic_tiling_at_unit_exponents() {
        let band = FrequencyBand::new(20.0, 30.0).unwrap();
        let p = SstParams { s: 1.0, t: 1.0, d: 1.0, ..SstParams::default() };
        let tiling = build_tiling(&band, &p, 256).unwrap();
        for pair in tiling.rings.windows(2) {
            assert!((pair[1] - pair[0] - pair[0] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiling_covers_annulus() {
        let band = FrequencyBand::new(30.5, 41.2).unwrap();
        for p in [
            SstParams::default(),
            SstParams { s: 0.75, t: 0.75, d: 0.5, ..SstParams::default() },
            SstParams { s: 0.6, t: 0.9, d: 1.0, redundancy: 1.0, ..SstParams::default() },
        ] {
            let tiling = build_tiling(&band, &p, 256).unwrap();
            for x1 in -42i64..=42 {
                for x2 in 0i64..=42 {
                    let xi = Vec2::new(x1 as f64, x2 as f64);
                    let r = xi.norm();
                    if band.contains(r) && (x2 > 0 || x1 > 0) {
                        assert!(tiling.covers(xi), "{xi:?} uncovered for {p:?}");
                    }
                }
            }
            for atom in &tiling.atoms {
                for &(x1, x2, _) in &atom.support {
                    let dist = (Vec2::new(x1 as f64, x2 as f64) - atom.centre()).norm();
                    assert!(dist <= p.d * atom.a.powf(p.t) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn band_near_nyquist_is_rejected() {
        let band = FrequencyBand::new(100.0, 120.0).unwrap();
        let p = SstParams { s: 1.0, t: 1.0, ..SstParams::default() };
        assert!(matches!(build_tiling(&band, &p, 256), Err(Error::BandNearNyquist { .. })));
    }

    #[test]
    fn small_position_grid_is_rejected() {
        let band = FrequencyBand::new(40.0, 50.0).unwrap();
        let p = SstParams { lb: Some(8), ..SstParams::default() };
        let tiling = build_tiling(&band, &p, 256).unwrap();
        let img = cos_wave(256, (45, 0), 0.0);
        assert!(matches!(forward_transform(&img, &tiling), Err(Error::PositionGridTooSmall { .. })));
    }

    #[test]
    fn zero_image_has_zero_coefficients() {
        let band = FrequencyBand::new(20.0, 30.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), 128).unwrap();
        let img = CrystalImage::new(Array2::zeros((128, 128))).unwrap();
        let c = forward_transform(&img, &tiling).unwrap();
        assert!(c.w.iter().all(|w| w.iter().all(|z| z.norm() == 0.0)));
        assert_eq!(synchrosqueeze(&c, &tiling).unwrap().total(), 0.0);
    }

    #[test]
    fn plane_wave_modulus_matches_closed_form() {
        let len = 128;
        let k = (21i64, 14i64);
        let img = cos_wave(len, k, 0.4);
        let band = FrequencyBand::new(20.0, 30.0).unwrap();
        let p = SstParams::default();
        let tiling = build_tiling(&band, &p, len).unwrap();
        let c = forward_transform(&img, &tiling).unwrap();
        let xi = Vec2::new(k.0 as f64, k.1 as f64);
        for (atom, w) in tiling.atoms.iter().zip(&c.w) {
            let rel = xi - atom.centre();
            let e = Vec2::from_angle(atom.theta);
            let y = Vec2::new(rel.dot(e) / atom.a.powf(p.t), rel.dot(e.perp()) / atom.a.powf(p.s));
            // cos = (e^{iξx} + e^{−iξx})/2; only +ξ reaches upper-half atoms here
            let expected = 0.5 * atom.a.powf(-(p.s + p.t) / 2.0) * mother_packet(y, p.d);
            for z in w.iter() {
                assert!((z.norm() - expected).abs() < 1e-12, "{} vs {}", z.norm(), expected);
            }
        }
    }

    #[test]
    fn fft_sampling_matches_direct_quadrature() {
        let img = crate::lattice::noise_image(64, 1.0, 5).unwrap();
        let band = FrequencyBand::new(10.0, 14.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), 64).unwrap();
        let c = forward_transform(&img, &tiling).unwrap();
        let fhat = fourier_coefficients(&img);
        let mut err = 0.0;
        let mut count = 0.0;
        for (i, atom) in tiling.atoms.iter().enumerate().step_by(7) {
            for &(k1, k2) in &[(0usize, 0usize), (5, 17), (40, 63), (31, 2)] {
                let b = Vec2::new(k1 as f64 / c.lb as f64, k2 as f64 / c.lb as f64);
                let mut direct = Complex64::new(0.0, 0.0);
                for &(x1, x2, v) in &atom.support {
                    let f = fhat[[x1.rem_euclid(64) as usize, x2.rem_euclid(64) as usize]];
                    direct += f * v * Complex64::from_polar(1.0, 2.0 * PI * (b.x * x1 as f64 + b.y * x2 as f64));
                }
                let fast = c.w[i][[k1, k2]];
                err += (fast - direct).norm() / direct.norm().max(1e-300);
                count += 1.0;
            }
        }
        assert!(err / count <= 1e-6, "mean relative error {}", err / count);
    }

    #[test]
    fn plane_wave_mass_lands_in_one_bin() {
        let len = 256;
        let k = (40i64, 23i64);
        let img = cos_wave(len, k, 1.0);
        let band = FrequencyBand::new(40.0, 52.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), len).unwrap();
        let energy = synchrosqueezed_energy(&img, &tiling).unwrap();
        let bin = energy.bin_of(Vec2::new(k.0 as f64, k.1 as f64)).unwrap();
        let inside: f64 = energy.t.slice(ndarray::s![.., .., bin.0, bin.1]).sum();
        assert!(energy.total() > 0.0);
        assert!((energy.total() - inside).abs() <= 1e-9 * inside);
    }

    #[test]
    fn streaming_and_stored_paths_agree() {
        let img = crate::lattice::noise_image(64, 1.0, 11).unwrap();
        let band = FrequencyBand::new(10.0, 16.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), 64).unwrap();
        let a = synchrosqueezed_energy(&img, &tiling).unwrap();
        let b = synchrosqueeze(&forward_transform(&img, &tiling).unwrap(), &tiling).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn squeezing_never_creates_mass() {
        let img = crate::lattice::noise_image(64, 1.0, 3).unwrap();
        let band = FrequencyBand::new(10.0, 16.0).unwrap();
        let tiling = build_tiling(&band, &SstParams::default(), 64).unwrap();
        let c = forward_transform(&img, &tiling).unwrap();
        let e = synchrosqueeze(&c, &tiling).unwrap();
        assert!(e.t.iter().all(|v| *v >= 0.0));
        assert!(e.total() <= frame_energy(&c, &tiling) * (1.0 + 1e-12));
    }
}
