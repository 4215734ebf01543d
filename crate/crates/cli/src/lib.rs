//! Orchestration behind the `crystal-sst` binary: configuration, staged
//! artifact output, manifests and map rendering.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crystal_sst::analysis::{threshold_boundary, MapKind, ScalarMap};
use crystal_sst::io::{
    write_energy_binary, write_gradient_binary, write_image_binary, write_map_csv, write_png16,
    write_spectrum_csv, FORMAT_VERSION,
};
use crystal_sst::lattice::{add_noise, ground_truth, render_scene};
use crystal_sst::metrics::{emd, rotation_error, sigma_for_snr, StabilityReport};
use crystal_sst::pipeline::{analyze, deform, estimate_band, Analysis, BandEstimate};
use crystal_sst::CrystalImage;

use config::{load_input, LoadedInput, RunConfig, NORMALIZATION};
use render::{mask_map, write_map_png, Style};

/// Version of the manifest layout.
pub const MANIFEST_VERSION: u32 = 1;

/// Exit code for configuration and input errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for rejections raised while the analysis runs.
pub const EXIT_RUN: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    /// A module rejected the configuration or input before any output.
    #[error(transparent)]
    Invalid(crystal_sst::Error),
    #[error(transparent)]
    Run(crystal_sst::Error),
    #[error("cannot write output: {0}")]
    Output(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Run(_) | CliError::Output(_) => EXIT_RUN,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Invalid(e) | CliError::Run(e) => e.kind(),
            CliError::Output(_) => "output",
        }
    }

    /// Single-line machine-readable report.
    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() }, "exit_code": self.exit_code() }).to_string()
    }
}

impl From<crystal_sst::Error> for CliError {
    fn from(e: crystal_sst::Error) -> Self {
        CliError::Run(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Spectrum,
    Analyze,
    Deform,
    Stability,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Spectrum => "spectrum",
            Command::Analyze => "analyze",
            Command::Deform => "deform",
            Command::Stability => "stability",
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scene: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub len: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub algorithm: Option<String>,
    /// `dotted.key=value` assignments, applied last.
    pub set: Vec<String>,
}

/// Loads the config file if any, applies overrides and validates.
/// Relative input paths in the file are taken relative to the file.
pub fn build_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let mut t = config::load_table(p)?;
            let base = p.parent().unwrap_or(Path::new(""));
            if let Some(input) = t.get_mut("input").and_then(|v| v.as_table_mut()) {
                for key in ["scene", "image"] {
                    if let Some(toml::Value::String(s)) = input.get_mut(key) {
                        if Path::new(s.as_str()).is_relative() {
                            *s = base.join(s.as_str()).to_string_lossy().into_owned();
                        }
                    }
                }
            }
            t
        }
        None => toml::Table::new(),
    };
    let path_value = |p: &Path| toml::Value::String(p.to_string_lossy().into_owned());
    if overrides.scene.is_some() || overrides.image.is_some() {
        if let Some(input) = table.get_mut("input").and_then(|v| v.as_table_mut()) {
            for key in ["scene", "scene_inline", "image"] {
                input.remove(key);
            }
        }
    }
    if let Some(p) = &overrides.scene {
        config::set_path(&mut table, "input.scene", path_value(p))?;
    }
    if let Some(p) = &overrides.image {
        config::set_path(&mut table, "input.image", path_value(p))?;
    }
    if let Some(len) = overrides.len {
        config::set_path(&mut table, "input.len", toml::Value::Integer(len as i64))?;
    }
    if let Some(p) = &overrides.out {
        config::set_path(&mut table, "output.dir", path_value(p))?;
    }
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("seed {seed} is too large")))?;
        config::set_path(&mut table, "seed", toml::Value::Integer(seed))?;
    }
    if let Some(a) = &overrides.algorithm {
        config::set_path(&mut table, "params.algorithm", toml::Value::String(a.clone()))?;
    }
    for assignment in &overrides.set {
        config::set_override(&mut table, assignment)?;
    }
    let cfg = RunConfig::from_table(table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory that only appears once a run has fully succeeded.
/// Files are written to a hidden sibling and moved into place at the end.
struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(target: &Path) -> Result<Self, CliError> {
        let name = target.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
        let dir = target.with_file_name(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(CliError::Output)?;
        }
        fs::create_dir_all(&dir).map_err(CliError::Output)?;
        Ok(Self { dir, target: target.to_path_buf(), committed: false })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Moves every staged file into the target.
    fn commit(mut self) -> Result<(), CliError> {
        fs::create_dir_all(&self.target).map_err(CliError::Output)?;
        for entry in fs::read_dir(&self.dir).map_err(CliError::Output)? {
            let entry = entry.map_err(CliError::Output)?;
            fs::rename(entry.path(), self.target.join(entry.file_name())).map_err(CliError::Output)?;
        }
        fs::remove_dir(&self.dir).map_err(CliError::Output)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub seed: Option<u64>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub normalization: &'static str,
    pub format_versions: serde_json::Value,
    pub summary: serde_json::Value,
    pub artifacts: Vec<String>,
}

/// Runs one subcommand and returns its manifest. Nothing is written unless
/// the whole run succeeds.
pub fn run(command: Command, config: &RunConfig) -> Result<Manifest, CliError> {
    let start = Instant::now();
    config.validate()?;
    let (input, raw) = if command == Command::Synth {
        let scene = config.scene()?.ok_or_else(|| CliError::Config("synth needs a scene input".into()))?;
        let raw = render_scene(&scene, config.input.len).map_err(CliError::Invalid)?;
        (LoadedInput { image: raw.standardized(), scene: Some(scene) }, Some(raw))
    } else {
        (load_input(config)?, None)
    };
    let resolved = config.resolved(input.scene.as_ref());
    let staging = Staging::new(&config.output.dir)?;
    let summary = match command {
        Command::Synth => synth(&staging, config, &input, raw.as_ref().expect("rendered above"))?,
        Command::Spectrum => spectrum(&staging, config, &input.image)?,
        Command::Analyze => analyze_cmd(&staging, config, &input.image)?,
        Command::Deform => deform_cmd(&staging, config, &input.image)?,
        Command::Stability => stability(&staging, config, &input)?,
    };
    let mut manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool: "crystal-sst",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name(),
        seed: resolved.seed,
        config: resolved,
        threads: rayon::current_num_threads(),
        wall_time_s: 0.0,
        normalization: NORMALIZATION,
        format_versions: json!({
            "manifest": MANIFEST_VERSION,
            "binary": FORMAT_VERSION,
            "png_sidecar": FORMAT_VERSION,
            "csv": FORMAT_VERSION,
        }),
        summary,
        artifacts: Vec::new(),
    };
    let mut names: Vec<String> =
        fs::read_dir(&staging.dir).map_err(CliError::Output)?.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    names.push("manifest.json".into());
    names.sort();
    manifest.artifacts = names;
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Run(e.into()))?;
    fs::write(staging.path("manifest.json"), text).map_err(CliError::Output)?;
    staging.commit()?;
    Ok(manifest)
}

fn write_map(staging: &Staging, config: &RunConfig, name: &str, map: &ScalarMap) -> crystal_sst::Result<()> {
    write_map_styled(staging, config, name, map, Style::for_kind(map.kind, config.output.vol_clip))
}

fn write_map_styled(staging: &Staging, config: &RunConfig, name: &str, map: &ScalarMap, style: Style) -> crystal_sst::Result<()> {
    if config.output.csv {
        write_map_csv(&staging.path(&format!("{name}.csv")), map)?;
    }
    if config.output.png {
        write_map_png(&staging.path(&format!("{name}.png")), map, style, config.output.png_bits)?;
    }
    Ok(())
}

fn band_json(staging: &Staging, estimate: &BandEstimate, image_len: usize, lb: Option<usize>) -> crystal_sst::Result<serde_json::Value> {
    let value = json!({
        "format_version": FORMAT_VERSION,
        "r1": estimate.band.r1,
        "r2": estimate.band.r2,
        "reciprocal": estimate.reciprocal,
        "image_len": image_len,
        "lb": lb,
    });
    fs::write(staging.path("band.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(value)
}

fn synth(staging: &Staging, config: &RunConfig, input: &LoadedInput, raw: &CrystalImage) -> Result<serde_json::Value, CliError> {
    let scene = input.scene.as_ref().expect("synth renders a scene");
    write_png16(&staging.path("image.png"), raw.samples())?;
    if config.output.binary {
        write_image_binary(&staging.path("image.bin"), raw)?;
    }
    let lb = config.params.sst.lb.unwrap_or(64);
    let truth = ground_truth(scene, lb)?;
    let angle = ScalarMap::new(truth.angle_map.clone(), MapKind::AngleDeg);
    write_map(staging, config, "truth_angle", &angle)?;
    write_map_styled(staging, config, "truth_boundary", &mask_map(&truth.boundary_mask), Style::Gray { range: Some((0.0, 1.0)) })?;
    Ok(json!({ "image_len": raw.len(), "truth_lb": lb, "grains": scene.grains.len() }))
}

fn spectrum(staging: &Staging, config: &RunConfig, img: &CrystalImage) -> Result<serde_json::Value, CliError> {
    let estimate = estimate_band(img, &config.params)?;
    write_spectrum_csv(&staging.path("spectrum.csv"), &estimate.spectrum)?;
    Ok(band_json(staging, &estimate, img.len(), None)?)
}

fn write_analysis(staging: &Staging, img: &CrystalImage, result: &Analysis) -> crystal_sst::Result<serde_json::Value> {
    write_spectrum_csv(&staging.path("spectrum.csv"), &result.estimate.spectrum)?;
    band_json(staging, &result.estimate, img.len(), Some(result.energy.lb()))
}

fn analyze_cmd(staging: &Staging, config: &RunConfig, img: &CrystalImage) -> Result<serde_json::Value, CliError> {
    let result = analyze(img, &config.params)?;
    let band = write_analysis(staging, img, &result)?;
    write_map(staging, config, "angle", &result.angle)?;
    write_map(staging, config, "bd", &result.bd)?;
    let mask = threshold_boundary(&result.bd, config.output.mask_tau)?;
    write_map_styled(staging, config, "boundary_mask", &mask_map(&mask), Style::Gray { range: Some((0.0, 1.0)) })?;
    if config.output.binary {
        write_energy_binary(&staging.path("energy.bin"), &result.energy)?;
    }
    let defined = result.angle.valid_count();
    Ok(json!({
        "band": band,
        "algorithm": config.params.algorithm,
        "angle_defined_cells": defined,
        "bd_range": result.bd.range(),
        "boundary_cells": mask.iter().filter(|m| **m).count(),
    }))
}

fn deform_cmd(staging: &Staging, config: &RunConfig, img: &CrystalImage) -> Result<serde_json::Value, CliError> {
    let result = analyze(img, &config.params)?;
    let band = write_analysis(staging, img, &result)?;
    let out = deform(&result.energy, result.estimate.reciprocal, &config.params)?;
    write_map(staging, config, "vol", &out.volume)?;
    if config.output.binary {
        write_gradient_binary(&staging.path("gradient.bin"), &out.gradient)?;
    }
    let defined = out.gradient.defined.iter().filter(|d| **d).count();
    Ok(json!({
        "band": band,
        "volume_normalization": config.params.volume,
        "gradient_defined_cells": defined,
        "vol_range": out.volume.range(),
    }))
}

/// One noise level: its standard deviation and nominal SNR.
fn sweep_levels(config: &RunConfig, clean: &CrystalImage) -> Vec<(f64, f64)> {
    if config.sweep.sigmas.is_empty() {
        config.sweep.snr_db.iter().map(|&db| (sigma_for_snr(clean, db), db)).collect()
    } else {
        let var = clean.variance();
        config.sweep.sigmas.iter().map(|&s| (s, 10.0 * (var / (s * s)).log10())).collect()
    }
}

fn stability(staging: &Staging, config: &RunConfig, input: &LoadedInput) -> Result<serde_json::Value, CliError> {
    let clean = input.image.max_normalized();
    let reference = analyze(&clean, &config.params)?;
    let base_seed = config.seed.or(input.scene.as_ref().map(|s| s.seed)).unwrap_or(0);
    let n = config.sweep.realizations;
    let mut reports = Vec::new();
    let mut sigmas = Vec::new();
    for (sigma, snr_db) in sweep_levels(config, &clean) {
        let runs: Vec<(f64, f64, f64)> = (0..n as u64)
            .into_par_iter()
            .map(|r| {
                let noisy = add_noise(&clean, sigma, base_seed.wrapping_add(r))?;
                let result = analyze(&noisy, &config.params)?;
                let (mean, std) = rotation_error(&result.angle, &reference.angle)?;
                let e = emd(&result.bd, &reference.bd, config.sweep.emd_grid)?;
                Ok((e, mean, std))
            })
            .collect::<crystal_sst::Result<_>>()?;
        let avg = |f: fn(&(f64, f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / n as f64;
        reports.push(StabilityReport {
            snr_db,
            emd: avg(|r| r.0),
            rot_mean_deg: avg(|r| r.1),
            rot_std_deg: avg(|r| r.2),
            n_realizations: n,
        });
        sigmas.push(sigma);
    }
    let mut csv = String::from("snr_db,sigma,emd,rot_mean_deg,rot_std_deg,n_realizations\n");
    for (r, s) in reports.iter().zip(&sigmas) {
        csv.push_str(&format!("{:?},{:?},{:?},{:?},{:?},{}\n", r.snr_db, s, r.emd, r.rot_mean_deg, r.rot_std_deg, r.n_realizations));
    }
    fs::write(staging.path("stability.csv"), csv).map_err(CliError::Output)?;
    let reports_json = serde_json::to_value(&reports).map_err(|e| CliError::Run(e.into()))?;
    fs::write(staging.path("stability.json"), serde_json::to_string_pretty(&reports_json).expect("plain values"))
        .map_err(CliError::Output)?;
    Ok(json!({ "levels": reports.len(), "base_seed": base_seed, "reports": reports_json }))
}
