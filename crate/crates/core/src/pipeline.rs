//! The full analysis chain as pure functions: spectrum, band, transform,
//! angular analysis and deformation.

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_per_vector, analyze_stacked, ScalarMap, DEFAULT_ANGULAR_C1, DEFAULT_ANGULAR_C2};
use crate::deformation::{
    estimate_wave_vector_field, solve_deformation_gradient, volume_distortion, DeformationGradientField,
    VolumeNormalization, WaveVectorField,
};
use crate::error::Result;
use crate::lattice::CrystalImage;
use crate::spectral::{
    dominant_band, estimate_reciprocal_number, radial_spectrum, FrequencyBand, RadialSpectrum, DEFAULT_C1, DEFAULT_C2,
};
use crate::sswpt::{build_tiling, synchrosqueezed_energy, PacketTiling, SsEnergy, SstParams};

/// Which angular analysis produces the angle and boundary maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Sum the three 60° sectors, then analyze one profile per cell.
    #[default]
    Stacked,
    /// Analyze each sector separately and combine.
    PerVector,
}

/// Bump-detection constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpParams {
    pub c1: f64,
    pub c2: f64,
}

/// Everything the chain needs besides the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineParams {
    pub sst: SstParams,
    pub spectral: BumpParams,
    pub angular: BumpParams,
    /// Radial bin width of the spectrum.
    pub spectrum_delta: f64,
    /// Skips band detection when set.
    pub band: Option<FrequencyBand>,
    /// Skips the reciprocal-number estimate when set.
    pub reciprocal: Option<f64>,
    pub algorithm: Algorithm,
    pub volume: VolumeNormalization,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            sst: SstParams::default(),
            spectral: BumpParams { c1: DEFAULT_C1, c2: DEFAULT_C2 },
            angular: BumpParams { c1: DEFAULT_ANGULAR_C1, c2: DEFAULT_ANGULAR_C2 },
            spectrum_delta: 1.0,
            band: None,
            reciprocal: None,
            algorithm: Algorithm::Stacked,
            volume: VolumeNormalization::MatrixByMean,
        }
    }
}

/// Result of the spectral stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BandEstimate {
    pub spectrum: RadialSpectrum,
    pub band: FrequencyBand,
    pub reciprocal: f64,
}

pub fn estimate_band(img: &CrystalImage, params: &PipelineParams) -> Result<BandEstimate> {
    let spectrum = radial_spectrum(img, params.spectrum_delta)?;
    let band = match params.band {
        Some(b) => b,
        None => dominant_band(&spectrum, params.spectral.c1, params.spectral.c2)?,
    };
    let reciprocal = match params.reciprocal {
        Some(n) => n,
        None => estimate_reciprocal_number(&spectrum, &band)?,
    };
    Ok(BandEstimate { spectrum, band, reciprocal })
}

/// Squeezed energy and the angular maps derived from it.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub estimate: BandEstimate,
    pub tiling: PacketTiling,
    pub energy: SsEnergy,
    pub angle: ScalarMap,
    pub bd: ScalarMap,
}

pub fn analyze(img: &CrystalImage, params: &PipelineParams) -> Result<Analysis> {
    params.sst.validate()?;
    let estimate = estimate_band(img, params)?;
    let tiling = build_tiling(&estimate.band, &params.sst, img.len())?;
    let energy = synchrosqueezed_energy(img, &tiling)?;
    let BumpParams { c1, c2 } = params.angular;
    let (angle, bd) = match params.algorithm {
        Algorithm::Stacked => {
            let maps = analyze_stacked(&energy, c1, c2)?;
            (maps.angle, maps.bd)
        }
        Algorithm::PerVector => {
            let maps = analyze_per_vector(&energy, c1, c2)?;
            (maps.angle, maps.bd)
        }
    };
    Ok(Analysis { estimate, tiling, energy, angle, bd })
}

/// Output of the deformation stage.
#[derive(Debug, Clone)]
pub struct Deformation {
    pub wave_vectors: WaveVectorField,
    pub gradient: DeformationGradientField,
    pub volume: ScalarMap,
}

pub fn deform(energy: &SsEnergy, reciprocal: f64, params: &PipelineParams) -> Result<Deformation> {
    let wave_vectors = estimate_wave_vector_field(energy, params.angular.c1, params.angular.c2)?;
    let gradient = solve_deformation_gradient(&wave_vectors, reciprocal)?;
    let volume = volume_distortion(&gradient, params.volume)?;
    Ok(Deformation { wave_vectors, gradient, volume })
}
