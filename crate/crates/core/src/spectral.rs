//! Radially averaged Fourier spectrum and dominant-band detection.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::CrystalImage;

/// Default relative threshold for radial bump detection.
pub const DEFAULT_C1: f64 = 0.3;
/// Default relative widening of the detected radial bump.
pub const DEFAULT_C2: f64 = 0.2;

/// In-place 2D FFT of a square array. The forward transform carries no
/// normalization; neither does the inverse.
pub(crate) fn fft2_in_place(data: &mut Array2<Complex64>, inverse: bool) {
    let (rows, cols) = data.dim();
    debug_assert_eq!(rows, cols);
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(cols) } else { planner.plan_fft_forward(cols) };
    // rustfft processes a buffer as consecutive length-`cols` chunks, so one
    // call covers every row; transposing twice covers the columns.
    if !data.is_standard_layout() {
        *data = data.as_standard_layout().into_owned();
    }
    fft.process(data.as_slice_mut().expect("standard layout"));
    let mut t = data.t().as_standard_layout().into_owned();
    fft.process(t.as_slice_mut().expect("standard layout"));
    data.assign(&t.t());
}

/// Fourier coefficients `f̂(k) = L⁻² Σ_n f(n) e^{−2πi k·n/L}`, indexed like the
/// DFT (index `k` stands for frequency `k` wrapped into `(−L/2, L/2]`).
pub fn fourier_coefficients(img: &CrystalImage) -> Array2<Complex64> {
    let len = img.len();
    let mut data = img.samples().mapv(|v| Complex64::new(v, 0.0));
    fft2_in_place(&mut data, false);
    let scale = 1.0 / (len * len) as f64;
    data.mapv_inplace(|c| c * scale);
    data
}

/// Signed frequency of DFT index `k` on a grid of length `len`.
pub fn signed_frequency(k: usize, len: usize) -> i64 {
    if k > len / 2 {
        k as i64 - len as i64
    } else {
        k as i64
    }
}

/// `E(nΔ)` on the radius grid `{nΔ}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    pub values: Vec<f64>,
    pub delta: f64,
}

impl RadialSpectrum {
    pub fn radius(&self, index: usize) -> f64 {
        index as f64 * self.delta
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|i| self.radius(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A frequency band `[r1, r2]` in cycles per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyBand {
    pub r1: f64,
    pub r2: f64,
}

impl FrequencyBand {
    pub fn new(r1: f64, r2: f64) -> Result<Self> {
        if r1.is_finite() && r2.is_finite() && 0.0 <= r1 && r1 < r2 {
            Ok(Self { r1, r2 })
        } else {
            Err(Error::InvalidParameter(format!("invalid frequency band [{r1}, {r2}]")))
        }
    }

    pub fn contains(&self, r: f64) -> bool {
        self.r1 <= r && r <= self.r2
    }
}

/// Radially averaged spectrum `E(nΔ) = (nΔ)⁻¹ Σ_{|ξ| ∈ [nΔ, (n+1)Δ)} |f̂(ξ)|`
/// over the disc inscribed in the frequency grid, with `E(0) = 0`.
pub fn radial_spectrum(img: &CrystalImage, delta: f64) -> Result<RadialSpectrum> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("radial step must be positive, got {delta}")));
    }
    let len = img.len();
    let bins = ((len as f64 / 2.0) / delta).floor() as usize;
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("radial step {delta} too coarse for a {len}x{len} image")));
    }
    let coeffs = fourier_coefficients(img);
    let mut values = vec![0.0; bins];
    for ((k1, k2), c) in coeffs.indexed_iter() {
        let r = (signed_frequency(k1, len) as f64).hypot(signed_frequency(k2, len) as f64);
        let n = (r / delta).floor() as usize;
        if n < bins {
            values[n] += c.norm();
        }
    }
    values[0] = 0.0;
    for (n, v) in values.iter_mut().enumerate().skip(1) {
        *v /= n as f64 * delta;
    }
    Ok(RadialSpectrum { values, delta })
}

/// Locates the most dominant bump of `e`, returning index end points (which
/// may be half-integers).
///
/// Values are clipped at `c1·max`, plateau edges are found on both sides of
/// the first maximum, and the result is widened by the relative factor `c2`
/// and clamped to `[0, len − 1]`.
pub fn bump_detection(e: &[f64], c1: f64, c2: f64) -> Result<(f64, f64)> {
    let len = e.len();
    if len < 2 {
        return Err(Error::InvalidParameter("bump detection needs at least two samples".into()));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("bump detection input must be finite".into()));
    }
    let mut p0 = 0;
    for (i, &v) in e.iter().enumerate() {
        if v > e[p0] {
            p0 = i;
        }
    }
    if !(e[p0] > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let delta = e[p0] * c1;
    let clipped: Vec<f64> = e.iter().map(|&v| v.min(delta)).collect();

    let left_edge = (0..p0).rev().find(|&p| clipped[p] >= clipped[p + 1]).unwrap_or(0);
    let r1 = match (0..p0).rev().find(|&p| clipped[p] > clipped[p + 1]) {
        Some(p1) => (p1 + left_edge) as f64 / 2.0,
        None => left_edge as f64,
    };
    let right_edge = (p0 + 1..len).find(|&p| clipped[p] >= clipped[p - 1]).unwrap_or(len - 1);
    let r2 = match (p0 + 1..len).find(|&p| clipped[p] > clipped[p - 1]) {
        Some(p2) => (right_edge + p2) as f64 / 2.0,
        None => right_edge as f64,
    };

    let r1 = (r1 * (1.0 - c2)).max(0.0);
    let r2 = (r2 * (1.0 + c2)).min((len - 1) as f64);
    Ok((r1, r2))
}

/// Band of the dominant oscillatory bump. A bump starting at index 0 is
/// treated as trend energy: it is removed and detection runs once more.
pub fn dominant_band(spectrum: &RadialSpectrum, c1: f64, c2: f64) -> Result<FrequencyBand> {
    let (mut r1, mut r2) = bump_detection(&spectrum.values, c1, c2)?;
    if r1 == 0.0 {
        let mut e = spectrum.values.clone();
        let cut = (r2.floor() as usize).min(e.len() - 1);
        e[..=cut].iter_mut().for_each(|v| *v = 0.0);
        (r1, r2) = match bump_detection(&e, c1, c2) {
            Ok(b) => b,
            Err(Error::DegenerateSpectrum) => return Err(Error::NoOscillatoryContent),
            Err(err) => return Err(err),
        };
        if r1 == 0.0 {
            return Err(Error::NoOscillatoryContent);
        }
    }
    FrequencyBand::new(r1 * spectrum.delta, r2 * spectrum.delta)
}

/// Radius of the largest `E` inside the band; ties go to the smaller radius.
pub fn estimate_reciprocal_number(spectrum: &RadialSpectrum, band: &FrequencyBand) -> Result<f64> {
    let mut best: Option<usize> = None;
    for (i, &v) in spectrum.values.iter().enumerate() {
        if band.contains(spectrum.radius(i)) && best.is_none_or(|b| v > spectrum.values[b]) {
            best = Some(i);
        }
    }
    best.map(|i| spectrum.radius(i))
        .ok_or_else(|| Error::InvalidParameter("frequency band contains no spectrum sample".into()))
}
