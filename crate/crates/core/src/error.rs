use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid size {actual} violates the sampling requirement; need at least {required}")]
    Nyquist { required: usize, actual: usize },

    #[error("reciprocal lattice number {0} is below the minimum of 16")]
    ReciprocalTooSmall(f64),

    #[error("degenerate spectrum: no positive energy")]
    DegenerateSpectrum,

    #[error("no oscillatory content found outside the low-frequency bump")]
    NoOscillatoryContent,

    #[error("frequency band [{r1}, {r2}] is too close to the Nyquist limit of a {len}x{len} image")]
    BandNearNyquist { r1: f64, r2: f64, len: usize },

    #[error("position grid {lb} is smaller than the largest packet support diameter {diameter:.2}")]
    PositionGridTooSmall { lb: usize, diameter: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("noise has zero variance")]
    ZeroNoiseVariance,

    #[error("map has zero total mass")]
    ZeroMass,

    #[error("degenerate deformation field: mean determinant {0} is not positive")]
    DegenerateField(f64),

    #[error("no sign change of the volume distortion inside the window")]
    NoSignChange,

    #[error("no defined cells: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Nyquist { .. } => "nyquist",
            Error::ReciprocalTooSmall(_) => "reciprocal_too_small",
            Error::DegenerateSpectrum => "degenerate_spectrum",
            Error::NoOscillatoryContent => "no_oscillatory_content",
            Error::BandNearNyquist { .. } => "band_near_nyquist",
            Error::PositionGridTooSmall { .. } => "position_grid_too_small",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ZeroNoiseVariance => "zero_noise_variance",
            Error::ZeroMass => "zero_mass",
            Error::DegenerateField(_) => "degenerate_field",
            Error::NoSignChange => "no_sign_change",
            Error::Undefined(_) => "undefined",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
