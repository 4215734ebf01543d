//! Run configuration: a TOML (or manifest JSON) file merged with command-line
//! overrides, then validated before anything is written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crystal_sst::lattice::{render_scene, SceneSpec};
use crystal_sst::pipeline::PipelineParams;
use crystal_sst::spectral::FrequencyBand;
use crystal_sst::CrystalImage;

use crate::CliError;

/// Where the image comes from. Exactly one source must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Scene description file (TOML or JSON).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    /// Scene description given inline; manifests record scenes this way.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene_inline: Option<SceneSpec>,
    /// Grayscale PNG or `.bin` array.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    /// Grid size for rendered scenes.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub png: bool,
    pub csv: bool,
    /// Flat binary arrays: gradient field, squeezed energy, images.
    pub binary: bool,
    /// 8 or 16.
    pub png_bits: u8,
    /// Symmetric color limit for volume maps.
    pub vol_clip: f64,
    /// Relative threshold of the boundary mask.
    pub mask_tau: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), png: true, csv: true, binary: false, png_bits: 16, vol_clip: 0.15, mask_tau: 0.45 }
    }
}

/// Noise levels of a stability sweep. Explicit `sigmas` take precedence
/// over `snr_db`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub realizations: usize,
    pub emd_grid: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { snr_db: vec![20.0, 10.0, 0.0, -5.0], sigmas: Vec::new(), realizations: 10, emd_grid: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub params: PipelineParams,
    pub output: OutputConfig,
    /// Noise seed; for scenes it replaces the scene's own seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub sweep: SweepConfig,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self { scene: None, scene_inline: None, image: None, len: 512 }
    }
}

/// Reads a config file into a TOML table. JSON files are accepted, and a
/// run manifest contributes its `config` entry.
pub fn load_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
        strip_nulls(&mut value);
        return toml::Table::try_from(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// TOML has no null; an absent key means the same to the config types.
fn strip_nulls(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|_, v| !v.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables. The
/// value is parsed as TOML, falling back to a plain string.
pub fn set_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = parse_value(raw.trim());
    set_path(table, key.trim(), value)
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Inserts `value` at a dotted key path.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        let entry = current.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| CliError::Config(format!("override key {key:?} crosses a non-table value")))?;
    }
    current.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Config(e.message().to_string()))
    }

    /// Checks everything that can be checked without running the analysis.
    pub fn validate(&self) -> Result<(), CliError> {
        let sources = [self.input.scene.is_some(), self.input.scene_inline.is_some(), self.input.image.is_some()];
        match sources.iter().filter(|s| **s).count() {
            1 => {}
            0 => return Err(CliError::Config("no input: set input.scene, input.scene_inline or input.image".into())),
            _ => return Err(CliError::Config("more than one input source given".into())),
        }
        for path in [&self.input.scene, &self.input.image].into_iter().flatten() {
            if !path.exists() {
                return Err(CliError::Config(format!("input {} does not exist", path.display())));
            }
        }
        self.params.sst.validate().map_err(CliError::Invalid)?;
        if let Some(b) = self.params.band {
            FrequencyBand::new(b.r1, b.r2).map_err(CliError::Invalid)?;
        }
        if let Some(n) = self.params.reciprocal {
            if !(n > 0.0 && n.is_finite()) {
                return Err(CliError::Config(format!("reciprocal number must be positive, got {n}")));
            }
        }
        for (name, p) in [("spectral", self.params.spectral), ("angular", self.params.angular)] {
            if !(p.c1 > 0.0 && p.c1 <= 1.0 && p.c2 >= 0.0 && p.c2 < 1.0) {
                return Err(CliError::Config(format!("{name} bump constants need 0 < c1 ≤ 1 and 0 ≤ c2 < 1")));
            }
        }
        if !(self.params.spectrum_delta > 0.0 && self.params.spectrum_delta.is_finite()) {
            return Err(CliError::Config("spectrum_delta must be positive".into()));
        }
        let out = &self.output;
        if out.png_bits != 8 && out.png_bits != 16 {
            return Err(CliError::Config(format!("png_bits must be 8 or 16, got {}", out.png_bits)));
        }
        if !(out.vol_clip > 0.0 && out.vol_clip.is_finite()) {
            return Err(CliError::Config("vol_clip must be positive".into()));
        }
        if !(out.mask_tau > 0.0 && out.mask_tau <= 1.0) {
            return Err(CliError::Config("mask_tau must lie in (0, 1]".into()));
        }
        let sweep = &self.sweep;
        if sweep.realizations == 0 || sweep.emd_grid == 0 {
            return Err(CliError::Config("sweep needs at least one realization and a nonzero EMD grid".into()));
        }
        if sweep.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) || sweep.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(CliError::Config("sweep levels must be finite and sigmas positive".into()));
        }
        Ok(())
    }

    /// The scene to render, with the configured seed applied.
    pub fn scene(&self) -> Result<Option<SceneSpec>, CliError> {
        let mut scene = match (&self.input.scene_inline, &self.input.scene) {
            (Some(s), _) => s.clone(),
            (None, Some(path)) => load_scene(path)?,
            (None, None) => return Ok(None),
        };
        if let Some(seed) = self.seed {
            scene.seed = seed;
        }
        scene.validate().map_err(CliError::Invalid)?;
        Ok(Some(scene))
    }

    /// Copy of the config that reproduces this run without outside files
    /// other than an input image.
    pub fn resolved(&self, scene: Option<&SceneSpec>) -> RunConfig {
        let mut out = self.clone();
        if let Some(scene) = scene {
            out.input.scene = None;
            out.input.scene_inline = Some(scene.clone());
            out.seed = Some(scene.seed);
        }
        out
    }
}

pub fn load_scene(path: &Path) -> Result<SceneSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// The image to analyze, and the scene it was rendered from if any.
pub struct LoadedInput {
    pub image: CrystalImage,
    pub scene: Option<SceneSpec>,
}

/// Renders or reads the input and normalizes it to zero mean and peak
/// absolute amplitude 1.
pub fn load_input(config: &RunConfig) -> Result<LoadedInput, CliError> {
    match config.scene()? {
        Some(scene) => {
            let image = render_scene(&scene, config.input.len).map_err(CliError::Invalid)?.standardized();
            Ok(LoadedInput { image, scene: Some(scene) })
        }
        None => {
            let path = config.input.image.as_ref().expect("validated: one source");
            let image = crystal_sst::io::ingest_image(path).map_err(CliError::Invalid)?;
            Ok(LoadedInput { image, scene: None })
        }
    }
}

/// Description of the input normalization, recorded in manifests.
pub const NORMALIZATION: &str = "zero-padded to a power-of-two square, shifted to zero mean, scaled to max |amplitude| 1";
