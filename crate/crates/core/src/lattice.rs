//! Synthetic crystal images with known ground truth.
//!
//! A scene is a union of grains. Inside grain `k` the image is
//!
//! ```text
//! f(x) = α_k(x) · S(2π N F φ_k(x)) + c_k(x)
//! ```
//!
//! where `S` is a 2π-periodic shape function given by its Fourier
//! coefficients, `F` maps the unit cell onto the lattice, and
//! `φ_k(x) = R(θ_k)ᵀ φ_def(x) + z_k` takes image coordinates to reference
//! lattice coordinates. With this convention a grain rotated by `θ` has its
//! wave vectors rotated by `+θ`, and the local wave vectors are
//! `v_j(x) = ∇φ(x)ᵀ u_j` for the reference vectors `u_j`.
//!
//! Pixel `(n1, n2)` of an `L×L` image samples `x = (n1/L, n2/L)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_deg, Mat2, Vec2};

/// Smallest reciprocal lattice number accepted by the generator.
pub const MIN_RECIPROCAL_NUMBER: f64 = 16.0;

/// Upper bound on `‖∇(ψ − id)‖` for the sinusoidal deformation family.
pub const MAX_WARP_GRADIENT: f64 = 0.1;

// ---------------------------------------------------------------------------
// Lattice geometry
// ---------------------------------------------------------------------------

/// The affine map taking a hexagonal unit cell onto the unit square.
pub fn hexagonal_unit_cell() -> Mat2 {
    let r3 = 3f64.sqrt();
    Mat2::new(1.0, -r3 / 3.0, 0.0, 2.0 * r3 / 3.0)
}

/// Hexagonal lattice matrix used by default in scenes.
///
/// This is [`hexagonal_unit_cell`] rescaled by `√3/2` and turned by 30°, so
/// the six dominant wave vectors of `S(2πNFx)` sit on a hexagon of radius
/// exactly `N` with one vertex on the positive `x1` axis.
pub fn hexagonal_lattice_matrix() -> Mat2 {
    hexagonal_unit_cell().scale(3f64.sqrt() / 2.0) * Mat2::rotation(PI / 6.0)
}

/// Wave vector `Fᵀ n` (per unit of `N`) of the Fourier mode `n`.
pub fn mode_vector(lattice: &Mat2, n: [i32; 2]) -> Vec2 {
    lattice.transpose() * Vec2::new(n[0] as f64, n[1] as f64)
}

/// Smallest `|nᵀF|` over nonzero integer `n` with `|n_i| ≤ 3`.
pub fn lattice_min_norm(lattice: &Mat2) -> f64 {
    let mut best = f64::INFINITY;
    for a in -3..=3 {
        for b in -3..=3 {
            if a == 0 && b == 0 {
                continue;
            }
            best = best.min(mode_vector(lattice, [a, b]).norm());
        }
    }
    best
}

/// The six index pairs `n` with `|n_i| ≤ 2` whose wave vectors `nᵀF` are
/// shortest, provided the six share one length (hexagonal symmetry).
pub fn dominant_indices(lattice: &Mat2) -> Option<Vec<[i32; 2]>> {
    let mut all: Vec<([i32; 2], f64)> = Vec::new();
    for a in -2..=2 {
        for b in -2..=2 {
            if a == 0 && b == 0 {
                continue;
            }
            all.push(([a, b], mode_vector(lattice, [a, b]).norm()));
        }
    }
    all.sort_by(|p, q| p.1.total_cmp(&q.1).then(p.0.cmp(&q.0)));
    let len = all[0].1;
    let six: Vec<_> = all.iter().take(6).collect();
    let equal = six.iter().all(|(_, l)| (l - len).abs() <= 1e-9 * len);
    let seventh_longer = all[6].1 > len * (1.0 + 1e-9);
    (equal && seventh_longer).then(|| six.into_iter().map(|(n, _)| *n).collect())
}

/// The three reference wave vectors `u_j = N nᵀF` of the dominant hexagon in
/// the upper half plane, sorted by argument.
pub fn reference_wave_vectors(lattice: &Mat2, reciprocal: f64) -> Option<[Vec2; 3]> {
    let idx = dominant_indices(lattice)?;
    let mut ups: Vec<Vec2> = idx
        .iter()
        .map(|&n| mode_vector(lattice, n).upper_half() * reciprocal)
        .collect();
    ups.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    ups.dedup_by(|a, b| (*a - *b).norm() < 1e-9 * reciprocal);
    (ups.len() == 3).then(|| [ups[0], ups[1], ups[2]])
}

/// Which of the three hexagon directions (`0..3`) a wave vector belongs to,
/// measured relative to the first reference vector.
fn direction_of(v: Vec2, reference0: Vec2) -> usize {
    let rel = (v.upper_half().arg() - reference0.arg()).rem_euclid(PI);
    ((rel / (PI / 3.0)).round() as usize) % 3
}

// ---------------------------------------------------------------------------
// Shape function
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Coefficient {
    n: [i32; 2],
    re: f64,
    #[serde(default)]
    im: f64,
}

/// A 2π-periodic shape function given by finitely many Fourier coefficients.
///
/// The constant `M` bounding `Σ|Ŝ(n)|` and `‖S‖∞` is only documentary here;
/// [`ShapeFunction::sup_bound`] reports the former.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Coefficient>", into = "Vec<Coefficient>")]
pub struct ShapeFunction {
    coefficients: BTreeMap<[i32; 2], Complex64>,
}

impl From<Vec<Coefficient>> for ShapeFunction {
    fn from(v: Vec<Coefficient>) -> Self {
        let coefficients = v.into_iter().map(|c| (c.n, Complex64::new(c.re, c.im))).collect();
        Self { coefficients }
    }
}

impl From<ShapeFunction> for Vec<Coefficient> {
    fn from(s: ShapeFunction) -> Self {
        s.coefficients
            .into_iter()
            .map(|(n, c)| Coefficient { n, re: c.re, im: c.im })
            .collect()
    }
}

impl Default for ShapeFunction {
    fn default() -> Self {
        Self::hexagonal()
    }
}

impl ShapeFunction {
    pub fn from_coefficients(coefficients: BTreeMap<[i32; 2], Complex64>) -> Self {
        Self { coefficients }
    }

    /// One-mode hexagonal pattern: the six lowest-order modes of the
    /// hexagonal lattice with equal coefficients `1/√6`.
    pub fn hexagonal() -> Self {
        let idx = dominant_indices(&hexagonal_unit_cell()).expect("hexagonal lattice has a dominant hexagon");
        let c = Complex64::new(1.0 / 6f64.sqrt(), 0.0);
        Self { coefficients: idx.into_iter().map(|n| (n, c)).collect() }
    }

    pub fn coefficient(&self, n: [i32; 2]) -> Complex64 {
        self.coefficients.get(&n).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([i32; 2], Complex64)> + '_ {
        self.coefficients.iter().filter(|(_, c)| c.norm() > 0.0).map(|(n, c)| (*n, *c))
    }

    /// `Σ |Ŝ(n)|²`, the squared normalized `L²([-π, π]²)` norm.
    pub fn norm_sq(&self) -> f64 {
        self.coefficients.values().map(|c| c.norm_sqr()).sum()
    }

    /// `Σ |Ŝ(n)|`, which also bounds `‖S‖∞`.
    pub fn sup_bound(&self) -> f64 {
        self.coefficients.values().map(|c| c.norm()).sum()
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        self.iter()
            .map(|(n, c)| {
                let phase = n[0] as f64 * x.x + n[1] as f64 * x.y;
                (c * Complex64::from_polar(1.0, phase)).re
            })
            .sum()
    }

    /// Checks the shape-function class conditions: finite (hence uniformly
    /// convergent) Fourier series, zero mean, unit norm, the gcd condition,
    /// and Hermitian symmetry so rendered images are real.
    pub fn check_conditions(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("shape function: {m}")));
        if self.coefficients.values().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return bad("non-finite coefficient");
        }
        if self.coefficient([0, 0]).norm() != 0.0 {
            return bad("nonzero mean coefficient");
        }
        if (self.norm_sq() - 1.0).abs() > 1e-12 {
            return bad("L2 norm is not 1");
        }
        for (n, c) in self.iter() {
            let mirror = self.coefficient([-n[0], -n[1]]);
            if (mirror - c.conj()).norm() > 1e-12 {
                return bad("coefficients are not Hermitian symmetric");
            }
        }
        let mut g = 0u32;
        for (n, _) in self.iter() {
            g = gcd(g, n[0].unsigned_abs());
            g = gcd(g, n[1].unsigned_abs());
        }
        if g != 1 {
            return bad("gcd condition fails");
        }
        Ok(())
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Grain ingredients
// ---------------------------------------------------------------------------

/// Region of the unit square occupied by a grain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Region {
    Everywhere,
    /// Points with `(x − point)·normal ≥ 0`.
    HalfPlane { point: Vec2, normal: Vec2 },
    Polygon { vertices: Vec<Vec2> },
    /// Cell `index` of the Voronoi diagram of `seeds`.
    Voronoi { seeds: Vec<Vec2>, index: usize },
}

impl Region {
    pub fn contains(&self, x: Vec2) -> bool {
        match self {
            Region::Everywhere => true,
            Region::HalfPlane { point, normal } => (x - *point).dot(*normal) >= 0.0,
            Region::Polygon { vertices } => point_in_polygon(x, vertices),
            Region::Voronoi { seeds, index } => {
                let mine = (x - seeds[*index]).norm_sq();
                seeds.iter().enumerate().all(|(i, s)| {
                    let d = (x - *s).norm_sq();
                    d > mine || (d == mine && i >= *index)
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Region::HalfPlane { normal, .. } if normal.norm() == 0.0 => {
                Err(Error::InvalidParameter("half-plane normal is zero".into()))
            }
            Region::Polygon { vertices } if vertices.len() < 3 => {
                Err(Error::InvalidParameter("polygon needs at least 3 vertices".into()))
            }
            Region::Voronoi { seeds, index } if *index >= seeds.len() => {
                Err(Error::InvalidParameter("voronoi index out of range".into()))
            }
            _ => Ok(()),
        }
    }
}

fn point_in_polygon(p: Vec2, vertices: &[Vec2]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Smooth scalar field used for amplitudes and trends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SmoothField {
    Constant { value: f64 },
    /// `value + gradient · x`
    Linear { value: f64, gradient: Vec2 },
    /// `mean + amplitude · cos(2π wave · x + phase)`
    Cosine { mean: f64, amplitude: f64, wave: Vec2, phase: f64 },
}

impl SmoothField {
    pub fn constant(value: f64) -> Self {
        SmoothField::Constant { value }
    }

    pub fn eval(&self, x: Vec2) -> f64 {
        match self {
            SmoothField::Constant { value } => *value,
            SmoothField::Linear { value, gradient } => value + gradient.dot(x),
            SmoothField::Cosine { mean, amplitude, wave, phase } => {
                mean + amplitude * (2.0 * PI * wave.dot(x) + phase).cos()
            }
        }
    }

    /// Lower bound over the unit square.
    fn min_on_unit_square(&self) -> f64 {
        match self {
            SmoothField::Constant { value } => *value,
            SmoothField::Linear { value, gradient } => {
                value + gradient.x.min(0.0) + gradient.y.min(0.0)
            }
            SmoothField::Cosine { mean, amplitude, .. } => mean - amplitude.abs(),
        }
    }
}

/// One sinusoidal term `a · sin(2π k·x + δ)` of a warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineMode {
    pub amplitude: Vec2,
    pub wave: Vec2,
    #[serde(default)]
    pub phase: f64,
}

/// Non-rigid part of a grain's lattice map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Deformation {
    #[default]
    Identity,
    /// Affine lattice map `φ_def(x) = A x`, i.e. `ψ(x) = A⁻¹ x`.
    Affine { gradient: Mat2 },
    /// `ψ(x) = x + Σ a_m sin(2π k_m·x + δ_m)`; the lattice map is `ψ⁻¹`.
    Sinusoidal { modes: Vec<SineMode> },
}

impl Deformation {
    /// Bound on `‖∇(ψ − id)‖` for the sinusoidal family.
    pub fn warp_gradient_bound(modes: &[SineMode]) -> f64 {
        modes.iter().map(|m| 2.0 * PI * m.amplitude.norm() * m.wave.norm()).sum()
    }

    fn validate(&self) -> Result<()> {
        match self {
            Deformation::Identity => Ok(()),
            Deformation::Affine { gradient } => {
                if gradient.is_finite() && gradient.det() > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter("affine deformation must have positive determinant".into()))
                }
            }
            Deformation::Sinusoidal { modes } => {
                let bound = Self::warp_gradient_bound(modes);
                if bound <= MAX_WARP_GRADIENT {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "sinusoidal warp gradient bound {bound:.4} exceeds {MAX_WARP_GRADIENT}"
                    )))
                }
            }
        }
    }

    fn psi(modes: &[SineMode], y: Vec2) -> (Vec2, Mat2) {
        let mut value = y;
        let mut grad = Mat2::IDENTITY;
        for m in modes {
            let arg = 2.0 * PI * m.wave.dot(y) + m.phase;
            let (s, c) = arg.sin_cos();
            value = value + m.amplitude * s;
            let k = m.wave * (2.0 * PI * c);
            grad = grad + Mat2::new(m.amplitude.x * k.x, m.amplitude.x * k.y, m.amplitude.y * k.x, m.amplitude.y * k.y);
        }
        (value, grad)
    }

    /// The lattice map `φ_def(x)` and its gradient.
    pub fn map(&self, x: Vec2) -> (Vec2, Mat2) {
        match self {
            Deformation::Identity => (x, Mat2::IDENTITY),
            Deformation::Affine { gradient } => (*gradient * x, *gradient),
            Deformation::Sinusoidal { modes } => {
                // Newton on ψ(y) = x; ψ − id is a contraction so this converges fast.
                let mut y = x;
                for _ in 0..64 {
                    let (value, grad) = Self::psi(modes, y);
                    let step = grad.inverse().expect("warp gradient is invertible") * (value - x);
                    y = y - step;
                    if step.norm() < 1e-15 {
                        break;
                    }
                }
                let (_, grad) = Self::psi(modes, y);
                (y, grad.inverse().expect("warp gradient is invertible"))
            }
        }
    }
}

/// A single grain of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrainSpec {
    pub region: Region,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub translation: Vec2,
    #[serde(default)]
    pub deformation: Deformation,
    #[serde(default = "unit_field")]
    pub amplitude: SmoothField,
    #[serde(default = "zero_field")]
    pub trend: SmoothField,
}

fn unit_field() -> SmoothField {
    SmoothField::constant(1.0)
}

fn zero_field() -> SmoothField {
    SmoothField::constant(0.0)
}

impl GrainSpec {
    pub fn new(region: Region, rotation_deg: f64) -> Self {
        Self {
            region,
            rotation_deg,
            translation: Vec2::ZERO,
            deformation: Deformation::Identity,
            amplitude: unit_field(),
            trend: zero_field(),
        }
    }

    pub fn with_deformation(mut self, deformation: Deformation) -> Self {
        self.deformation = deformation;
        self
    }

    pub fn with_translation(mut self, translation: Vec2) -> Self {
        self.translation = translation;
        self
    }

    /// Lattice map `φ(x) = R(θ)ᵀ φ_def(x) + z` and its gradient.
    pub fn lattice_map(&self, x: Vec2) -> (Vec2, Mat2) {
        let rt = Mat2::rotation(self.rotation_deg.to_radians()).transpose();
        let (p, g) = self.deformation.map(x);
        (rt * p + self.translation, rt * g)
    }
}

/// Gaussian amplitude suppression `1 − depth·exp(−|x − center|²/radius²)`.
///
/// With `direction = Some(j)` only the wave components of hexagon direction
/// `j` are suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defect {
    pub center: Vec2,
    pub radius: f64,
    pub depth: f64,
    #[serde(default)]
    pub direction: Option<usize>,
}

impl Defect {
    pub fn factor(&self, x: Vec2) -> f64 {
        1.0 - self.depth * (-(x - self.center).norm_sq() / (self.radius * self.radius)).exp()
    }
}

// ---------------------------------------------------------------------------
// Scenes and images
// ---------------------------------------------------------------------------

fn default_lattice() -> Mat2 {
    hexagonal_lattice_matrix()
}

/// Everything needed to synthesize one crystal image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub grains: Vec<GrainSpec>,
    pub reciprocal_number: f64,
    #[serde(default = "default_lattice")]
    pub lattice_matrix: Mat2,
    #[serde(default)]
    pub shape: ShapeFunction,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub defects: Vec<Defect>,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(grains: Vec<GrainSpec>, reciprocal_number: f64) -> Self {
        Self {
            grains,
            reciprocal_number,
            lattice_matrix: hexagonal_lattice_matrix(),
            shape: ShapeFunction::hexagonal(),
            noise_sigma: 0.0,
            defects: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reciprocal_number >= MIN_RECIPROCAL_NUMBER) {
            return Err(Error::ReciprocalTooSmall(self.reciprocal_number));
        }
        if !(lattice_min_norm(&self.lattice_matrix) >= 1.0 - 1e-12) {
            return Err(Error::InvalidParameter("lattice matrix must satisfy |nᵀF| ≥ 1".into()));
        }
        self.shape.check_conditions()?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
        }
        if self.grains.is_empty() {
            return Err(Error::InvalidParameter("scene has no grains".into()));
        }
        for g in &self.grains {
            g.region.validate()?;
            g.deformation.validate()?;
            if !(g.amplitude.min_on_unit_square() > 0.0) {
                return Err(Error::InvalidParameter("grain amplitude must be positive".into()));
            }
        }
        for d in &self.defects {
            if !(d.radius > 0.0) || !(0.0..=1.0).contains(&d.depth) {
                return Err(Error::InvalidParameter("defect needs radius > 0 and depth in [0, 1]".into()));
            }
            if d.direction.is_some_and(|j| j >= 3) {
                return Err(Error::InvalidParameter("defect direction must be 0, 1 or 2".into()));
            }
        }
        Ok(())
    }

    /// Smallest image size that samples the dominant hexagon adequately.
    pub fn min_grid_size(&self) -> usize {
        let row_norm = self.lattice_matrix.row(0).norm().max(self.lattice_matrix.row(1).norm());
        (4.0 * self.reciprocal_number * row_norm - 1e-9).ceil() as usize
    }

    /// Index of the first grain containing `x`.
    pub fn grain_at(&self, x: Vec2) -> Option<usize> {
        self.grains.iter().position(|g| g.region.contains(x))
    }
}

/// A sampled square image on `[0, 1)²` with power-of-two side length.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalImage {
    samples: Array2<f64>,
}

impl CrystalImage {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        let (r, c) = samples.dim();
        if r != c || !r.is_power_of_two() {
            return Err(Error::ShapeMismatch(format!("image must be square with power-of-two side, got {r}x{c}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("image has non-finite samples".into()));
        }
        Ok(Self { samples })
    }

    /// Embeds an arbitrary rectangular array into the smallest power-of-two
    /// square, padding with zeros.
    pub fn zero_padded(samples: &Array2<f64>) -> Result<Self> {
        let (r, c) = samples.dim();
        let len = r.max(c).max(1).next_power_of_two();
        let mut out = Array2::zeros((len, len));
        out.slice_mut(ndarray::s![..r, ..c]).assign(samples);
        Self::new(out)
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.samples.mean().unwrap_or(0.0)
    }

    /// Population variance over all pixels.
    pub fn variance(&self) -> f64 {
        self.samples.var(0.0)
    }

    /// Divides by the largest absolute sample so the peak intensity is 1.
    pub fn max_normalized(&self) -> Self {
        let m = self.max_abs();
        if m == 0.0 {
            self.clone()
        } else {
            Self { samples: &self.samples / m }
        }
    }

    /// Zero mean, then peak absolute amplitude 1.
    pub fn standardized(&self) -> Self {
        let mean = self.mean();
        Self { samples: &self.samples - mean }.max_normalized()
    }

    /// Circular shift by `(d1, d2)` pixels.
    pub fn shifted(&self, d1: usize, d2: usize) -> Self {
        let l = self.len();
        let samples = Array2::from_shape_fn((l, l), |(i, j)| {
            self.samples[[(i + l - d1 % l) % l, (j + l - d2 % l) % l]]
        });
        Self { samples }
    }
}

impl std::ops::Add for &CrystalImage {
    type Output = CrystalImage;
    fn add(self, rhs: &CrystalImage) -> CrystalImage {
        CrystalImage { samples: &self.samples + &rhs.samples }
    }
}

/// Evaluates the noiseless scene at `x`.
fn scene_value(scene: &SceneSpec, modes: &[([i32; 2], Complex64, Vec2, usize)], x: Vec2) -> f64 {
    let Some(k) = scene.grain_at(x) else {
        return 0.0;
    };
    let grain = &scene.grains[k];
    let (p, _) = grain.lattice_map(x);
    let mut suppress_all = 1.0;
    let mut suppress_dir = [1.0; 3];
    for d in &scene.defects {
        let f = d.factor(x);
        match d.direction {
            Some(j) => suppress_dir[j] *= f,
            None => suppress_all *= f,
        }
    }
    let oscillation: f64 = modes
        .iter()
        .map(|(_, c, k_vec, dir)| {
            let phase = 2.0 * PI * scene.reciprocal_number * k_vec.dot(p);
            suppress_dir[*dir] * (c * Complex64::from_polar(1.0, phase)).re
        })
        .sum();
    grain.amplitude.eval(x) * suppress_all * oscillation + grain.trend.eval(x)
}

/// Renders a scene on an `L×L` grid. A positive `noise_sigma` max-normalizes
/// the clean image and adds Gaussian noise seeded by `scene.seed`.
pub fn render_scene(scene: &SceneSpec, len: usize) -> Result<CrystalImage> {
    scene.validate()?;
    if !len.is_power_of_two() {
        return Err(Error::InvalidParameter(format!("grid size {len} is not a power of two")));
    }
    let required = scene.min_grid_size();
    if len < required {
        return Err(Error::Nyquist { required, actual: len });
    }
    let reference0 = reference_wave_vectors(&scene.lattice_matrix, 1.0)
        .map(|u| u[0])
        .unwrap_or(Vec2::new(1.0, 0.0));
    let modes: Vec<_> = scene
        .shape
        .iter()
        .map(|(n, c)| {
            let k = mode_vector(&scene.lattice_matrix, n);
            (n, c, k, direction_of(k, reference0))
        })
        .collect();
    let values: Vec<f64> = (0..len * len)
        .into_par_iter()
        .map(|idx| {
            let x = Vec2::new((idx / len) as f64 / len as f64, (idx % len) as f64 / len as f64);
            scene_value(scene, &modes, x)
        })
        .collect();
    let clean = CrystalImage::new(Array2::from_shape_vec((len, len), values).expect("len² samples"))?;
    if scene.noise_sigma > 0.0 {
        add_noise(&clean, scene.noise_sigma, scene.seed)
    } else {
        Ok(clean)
    }
}

/// Max-normalizes `img` and adds i.i.d. `N(0, sigma²)` noise per pixel.
pub fn add_noise(img: &CrystalImage, sigma: f64, seed: u64) -> Result<CrystalImage> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter("sigma must be non-negative".into()));
    }
    let mut out = img.max_normalized();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in out.samples.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Pure white noise image of standard deviation `sigma`.
pub fn noise_image(len: usize, sigma: f64, seed: u64) -> Result<CrystalImage> {
    let zeros = CrystalImage::new(Array2::zeros((len, len)))?;
    add_noise(&zeros, sigma, seed)
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

/// Analytic reference maps on the `L_B×L_B` position grid `b = k/L_B`.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Local rotation in degrees, in `[0, 60)`; NaN outside every grain.
    pub angle_map: Array2<f64>,
    /// Cells within one position cell of a grain boundary, defect blob, or
    /// the periodization seam at the image frame.
    pub boundary_mask: Array2<bool>,
    /// `∇φ` at each cell (identity outside every grain).
    pub gradient_field: Array2<Mat2>,
    /// Distance (unit-square units) to the nearest boundary of any kind.
    pub boundary_distance: Array2<f64>,
    pub labels: Array2<Option<usize>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.angle_map.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.angle_map.is_empty()
    }
}

/// Local rotation in degrees of a wave vector relative to its reference.
pub fn local_rotation_deg(gradient: &Mat2, reference: Vec2) -> f64 {
    let v = gradient.transpose() * reference;
    wrap_deg((v.arg() - reference.arg()).to_degrees(), 60.0)
}

pub fn ground_truth(scene: &SceneSpec, lb: usize) -> Result<GroundTruth> {
    scene.validate()?;
    if lb == 0 {
        return Err(Error::InvalidParameter("position grid must be nonempty".into()));
    }
    let reference = reference_wave_vectors(&scene.lattice_matrix, scene.reciprocal_number)
        .ok_or_else(|| Error::InvalidParameter("lattice has no dominant hexagon".into()))?;
    let cell = |k: usize| k as f64 / lb as f64;

    let labels = Array2::from_shape_fn((lb, lb), |(i, j)| scene.grain_at(Vec2::new(cell(i), cell(j))));
    let gradient_field = Array2::from_shape_fn((lb, lb), |(i, j)| match labels[[i, j]] {
        Some(k) => scene.grains[k].lattice_map(Vec2::new(cell(i), cell(j))).1,
        None => Mat2::IDENTITY,
    });
    let angle_map = Array2::from_shape_fn((lb, lb), |(i, j)| match labels[[i, j]] {
        Some(_) => local_rotation_deg(&gradient_field[[i, j]], reference[0]),
        None => f64::NAN,
    });

    // Boundary points between differently labelled samples of a finer grid.
    let fine = (4 * lb).max(256);
    let fl = Array2::from_shape_fn((fine, fine), |(i, j)| {
        scene.grain_at(Vec2::new(i as f64 / fine as f64, j as f64 / fine as f64))
    });
    let at = |i: usize, j: usize| Vec2::new(i as f64 / fine as f64, j as f64 / fine as f64);
    // Bisects the segment between two differently labelled samples.
    let locate = |mut p: Vec2, mut q: Vec2| {
        let lp = scene.grain_at(p);
        for _ in 0..40 {
            let mid = (p + q) * 0.5;
            if scene.grain_at(mid) == lp {
                p = mid;
            } else {
                q = mid;
            }
        }
        (p + q) * 0.5
    };
    let mut edges = Vec::new();
    for i in 0..fine {
        for j in 0..fine {
            if i + 1 < fine && fl[[i, j]] != fl[[i + 1, j]] {
                edges.push(locate(at(i, j), at(i + 1, j)));
            }
            if j + 1 < fine && fl[[i, j]] != fl[[i, j + 1]] {
                edges.push(locate(at(i, j), at(i, j + 1)));
            }
        }
    }
    let boundary_distance = Array2::from_shape_fn((lb, lb), |(i, j)| {
        let b = Vec2::new(cell(i), cell(j));
        let frame = b.x.min(1.0 - b.x).min(b.y).min(1.0 - b.y);
        let edge = edges.iter().map(|e| (*e - b).norm()).fold(f64::INFINITY, f64::min);
        let blob = scene
            .defects
            .iter()
            .map(|d| ((b - d.center).norm() - d.radius).max(0.0))
            .fold(f64::INFINITY, f64::min);
        frame.min(edge).min(blob)
    });
    let boundary_mask = boundary_distance.mapv(|d| d <= 1.0 / lb as f64 + 1e-12);

    Ok(GroundTruth { angle_map, boundary_mask, gradient_field, boundary_distance, labels })
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Ready-made scenes used by tests, examples and the CLI.
pub mod fixtures {
    use super::*;

    /// Two undeformed grains separated by the vertical line `x1 = 0.5`,
    /// rotated by 15° (left) and 52.5° (right), with `N = 120`.
    pub fn two_grain_toy() -> SceneSpec {
        let left = GrainSpec::new(Region::HalfPlane { point: Vec2::new(0.5, 0.0), normal: Vec2::new(-1.0, 0.0) }, 15.0);
        let right = GrainSpec::new(Region::HalfPlane { point: Vec2::new(0.5, 0.0), normal: Vec2::new(1.0, 0.0) }, 52.5);
        SceneSpec::new(vec![left, right], 120.0)
    }

    /// A single grain filling the image.
    pub fn single_grain(reciprocal: f64, rotation_deg: f64) -> SceneSpec {
        SceneSpec::new(vec![GrainSpec::new(Region::Everywhere, rotation_deg)], reciprocal)
    }

    /// A single grain under the affine lattice map `φ(x) = A x`.
    pub fn affine_grain(reciprocal: f64, gradient: Mat2) -> SceneSpec {
        let grain = GrainSpec::new(Region::Everywhere, 0.0).with_deformation(Deformation::Affine { gradient });
        SceneSpec::new(vec![grain], reciprocal)
    }

    /// A single grain under a smooth periodic warp with `‖∇(ψ − id)‖ ≤ 0.05`.
    pub fn warped_grain(reciprocal: f64) -> SceneSpec {
        let modes = vec![
            SineMode { amplitude: Vec2::new(0.004, 0.0), wave: Vec2::new(1.0, 1.0), phase: 0.3 },
            SineMode { amplitude: Vec2::new(0.0, 0.003), wave: Vec2::new(-1.0, 1.0), phase: 1.1 },
        ];
        let grain = GrainSpec::new(Region::Everywhere, 7.0).with_deformation(Deformation::Sinusoidal { modes });
        SceneSpec::new(vec![grain], reciprocal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hexagonal_shape_coefficients() {
        let s = ShapeFunction::hexagonal();
        let expected = [[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1]];
        for n in expected {
            assert!((s.coefficient(n).re - 1.0 / 6f64.sqrt()).abs() < 1e-15, "{n:?}");
            assert_eq!(s.coefficient(n).im, 0.0);
        }
        assert_eq!(s.iter().count(), 6);
        assert_eq!(s.coefficient([0, 0]), Complex64::new(0.0, 0.0));
        assert!((s.norm_sq() - 1.0).abs() < 1e-12);
        s.check_conditions().unwrap();
    }

    #[test]
    fn shape_conditions_reject_violations() {
        let mut c = BTreeMap::new();
        c.insert([2, 0], Complex64::new(0.5f64.sqrt(), 0.0));
        c.insert([-2, 0], Complex64::new(0.5f64.sqrt(), 0.0));
        // gcd of {2} is 2
        assert!(ShapeFunction::from_coefficients(c.clone()).check_conditions().is_err());
        c.insert([0, 0], Complex64::new(0.1, 0.0));
        assert!(ShapeFunction::from_coefficients(c).check_conditions().is_err());
    }

    #[test]
    fn lattice_matrix_hexagon_has_radius_one_and_vertex_on_axis() {
        let g = hexagonal_lattice_matrix();
        let u = reference_wave_vectors(&g, 1.0).unwrap();
        for (j, v) in u.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert!((v.arg() - j as f64 * PI / 3.0).abs() < 1e-12);
        }
        assert!((lattice_min_norm(&g) - 1.0).abs() < 1e-12);
        // Same six modes as the printed unit-cell map.
        let sorted = |m: &Mat2| {
            let mut v = dominant_indices(m).unwrap();
            v.sort();
            v
        };
        assert_eq!(sorted(&g), sorted(&hexagonal_unit_cell()));
    }

    #[test]
    fn nyquist_rejection_reports_minimum() {
        let scene = fixtures::single_grain(120.0, 0.0);
        match render_scene(&scene, 256) {
            Err(Error::Nyquist { required, actual }) => {
                assert_eq!(required, 480);
                assert_eq!(actual, 256);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_reciprocal_rejected() {
        let scene = fixtures::single_grain(8.0, 0.0);
        assert!(matches!(render_scene(&scene, 64), Err(Error::ReciprocalTooSmall(_))));
    }

    #[test]
    fn add_noise_zero_sigma_is_max_normalization() {
        let img = render_scene(&fixtures::single_grain(16.0, 10.0), 64).unwrap();
        let n = add_noise(&img, 0.0, 3).unwrap();
        assert_eq!(n, img.max_normalized());
        assert!((n.max_abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let img = render_scene(&fixtures::single_grain(16.0, 0.0), 64).unwrap();
        let a = add_noise(&img, 1.4, 9).unwrap();
        let b = add_noise(&img, 1.4, 9).unwrap();
        let c = add_noise(&img, 1.4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn render_with_noise_matches_composition() {
        let mut scene = fixtures::two_grain_toy();
        scene.reciprocal_number = 16.0;
        scene.seed = 42;
        let clean = render_scene(&scene, 64).unwrap();
        scene.noise_sigma = 1.0;
        let noisy = render_scene(&scene, 64).unwrap();
        assert_eq!(noisy, add_noise(&clean, 1.0, 42).unwrap());
    }

    #[test]
    fn sinusoidal_map_inverts_warp() {
        let modes = vec![SineMode { amplitude: Vec2::new(0.01, 0.005), wave: Vec2::new(1.0, 0.0), phase: 0.2 }];
        let d = Deformation::Sinusoidal { modes: modes.clone() };
        let x = Vec2::new(0.3, 0.7);
        let (y, g) = d.map(x);
        let (back, dpsi) = Deformation::psi(&modes, y);
        assert!((back - x).norm() < 1e-14);
        assert!((g * dpsi - Mat2::IDENTITY).frobenius() < 1e-13);
    }

    #[test]
    fn ground_truth_rotation_and_identity_gradient() {
        let gt = ground_truth(&fixtures::single_grain(64.0, 15.0), 16).unwrap();
        assert!(gt.angle_map.iter().all(|a| (a - 15.0).abs() < 1e-9));
        let gt = ground_truth(&fixtures::single_grain(64.0, 0.0), 16).unwrap();
        assert!(gt.gradient_field.iter().all(|g| *g == Mat2::IDENTITY));
    }

    #[test]
    fn ground_truth_affine_gradient_is_constant() {
        let a = Mat2::new(1.02, 0.01, 0.0, 0.98);
        let gt = ground_truth(&fixtures::affine_grain(64.0, a), 8).unwrap();
        assert!(gt.gradient_field.iter().all(|g| *g == a));
    }

    #[test]
    fn ground_truth_angle_is_periodic_in_sixty_degrees() {
        for extra in [60.0, 120.0, -60.0, 300.0] {
            let a = ground_truth(&fixtures::single_grain(64.0, 12.5), 8).unwrap();
            let b = ground_truth(&fixtures::single_grain(64.0, 12.5 + extra), 8).unwrap();
            for (x, y) in a.angle_map.iter().zip(b.angle_map.iter()) {
                let d = crate::geometry::circular_diff(*x, *y, 60.0);
                assert!(d.abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn ground_truth_boundary_mask_follows_vertical_boundary() {
        let gt = ground_truth(&fixtures::two_grain_toy(), 64).unwrap();
        for i in 0..64 {
            let expect_row = (i as f64 / 64.0 - 0.5).abs() <= 1.0 / 64.0 + 1e-12;
            // interior columns only, away from the frame
            assert_eq!(gt.boundary_mask[[i, 32]], expect_row || i <= 1 || i >= 63, "row {i}");
        }
        assert!((gt.angle_map[[10, 30]] - 15.0).abs() < 1e-9);
        assert!((gt.angle_map[[50, 30]] - 52.5).abs() < 1e-9);
    }

    #[test]
    fn voronoi_cells_partition_the_square() {
        let seeds = vec![Vec2::new(0.2, 0.2), Vec2::new(0.8, 0.3), Vec2::new(0.5, 0.8)];
        for i in 0..20 {
            for j in 0..20 {
                let x = Vec2::new(i as f64 / 20.0, j as f64 / 20.0);
                let count = (0..3)
                    .filter(|&k| Region::Voronoi { seeds: seeds.clone(), index: k }.contains(x))
                    .count();
                assert_eq!(count, 1);
            }
        }
    }

    #[test]
    fn polygon_membership() {
        let square = Region::Polygon {
            vertices: vec![Vec2::new(0.25, 0.25), Vec2::new(0.75, 0.25), Vec2::new(0.75, 0.75), Vec2::new(0.25, 0.75)],
        };
        assert!(square.contains(Vec2::new(0.5, 0.5)));
        assert!(!square.contains(Vec2::new(0.1, 0.5)));
    }

    #[test]
    fn scene_round_trips_through_json() {
        let mut scene = fixtures::warped_grain(64.0);
        scene.defects.push(Defect { center: Vec2::new(0.5, 0.5), radius: 0.03, depth: 0.8, direction: Some(1) });
        let text = serde_json::to_string(&scene).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, scene);
    }
}
