//! File formats: 16-bit PNG with a range sidecar, CSV maps, flat
//! little-endian `f64` arrays with a JSON header, and PNG ingest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{MapKind, ScalarMap};
use crate::deformation::DeformationGradientField;
use crate::error::{Error, Result};
use crate::lattice::CrystalImage;
use crate::sswpt::SsEnergy;

/// Version tag written into every header and sidecar.
pub const FORMAT_VERSION: u32 = 1;

/// Value range mapped onto `0..=65535` in a 16-bit PNG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PngRange {
    pub format_version: u32,
    pub min: f64,
    pub max: f64,
}

/// `foo.png` → `foo.png.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `values` as 16-bit grayscale, linearly mapping `[min, max]` to the
/// full range, and records the range in a JSON sidecar. Non-finite values
/// are written as 0. A constant array maps to mid-gray.
pub fn write_png16(path: &Path, values: &Array2<f64>) -> Result<PngRange> {
    let (min, max) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
    let span = max - min;
    let (rows, cols) = values.dim();
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(cols as u32, rows as u32, |x, y| {
        let v = values[[y as usize, x as usize]];
        let level = if !v.is_finite() {
            0.0
        } else if span > 0.0 {
            (v - min) / span * 65535.0
        } else {
            32768.0
        };
        Luma([level.round().clamp(0.0, 65535.0) as u16])
    });
    img.save(path)?;
    let range = PngRange { format_version: FORMAT_VERSION, min, max };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&range)?)?;
    Ok(range)
}

/// Reads a grayscale PNG at any bit depth into `[0, 1]`, or into the range
/// of its sidecar when one exists.
pub fn read_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let unit = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| img.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0);
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let range: PngRange = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
        return Ok(unit.mapv(|u| range.min + u * (range.max - range.min)));
    }
    Ok(unit)
}

/// Loads an image for analysis: zero-pads to a power-of-two square, then
/// shifts to zero mean and scales to peak absolute amplitude 1.
pub fn ingest_image(path: &Path) -> Result<CrystalImage> {
    let raw = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("f64") => {
            let arr = read_f64_binary(path)?.0;
            if arr.ndim() != 2 {
                return Err(Error::ShapeMismatch(format!("expected a 2D array, got {} dimensions", arr.ndim())));
            }
            arr.into_dimensionality::<ndarray::Ix2>().expect("checked rank")
        }
        _ => read_png(path)?,
    };
    Ok(CrystalImage::zero_padded(&raw)?.standardized())
}

/// Writes one CSV row per map row. Undefined cells are left empty; defined
/// values use the shortest representation that parses back to the same bits.
pub fn write_map_csv(path: &Path, map: &ScalarMap) -> Result<()> {
    let mut out = String::new();
    for (row_v, row_ok) in map.values.rows().into_iter().zip(map.valid.rows()) {
        let cells: Vec<String> = row_v
            .iter()
            .zip(row_ok.iter())
            .map(|(v, ok)| if *ok { format!("{v:?}") } else { String::new() })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_map_csv(path: &Path, kind: MapKind) -> Result<ScalarMap> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<Option<f64>>> = text
        .lines()
        .map(|l| {
            l.split(',')
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.trim().parse::<f64>().map(Some).map_err(|e| Error::InvalidParameter(format!("bad CSV value {c:?}: {e}")))
                    }
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("ragged CSV map".into()));
    }
    let values = Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j].unwrap_or(f64::NAN));
    let valid = Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j].is_some());
    ScalarMap::with_mask(values, valid, kind)
}

/// Two-column `radius,energy` table.
pub fn write_spectrum_csv(path: &Path, spectrum: &crate::spectral::RadialSpectrum) -> Result<()> {
    let mut out = String::from("radius,energy\n");
    for (r, e) in spectrum.radii().zip(spectrum.values.iter()) {
        out.push_str(&format!("{r:?},{e:?}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Header of a flat binary array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryHeader {
    pub format_version: u32,
    pub dtype: String,
    /// Row-major shape, outermost axis first.
    pub shape: Vec<usize>,
    /// Free-form metadata such as axis values.
    #[serde(default)]
    pub meta: Value,
}

/// Writes `data` as little-endian `f64` to `path` with a JSON header at
/// `path.json`.
pub fn write_f64_binary(path: &Path, data: &ArrayD<f64>, meta: Value) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let header = BinaryHeader { format_version: FORMAT_VERSION, dtype: "f64le".into(), shape: data.shape().to_vec(), meta };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn read_f64_binary(path: &Path) -> Result<(ArrayD<f64>, BinaryHeader)> {
    let header: BinaryHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if header.dtype != "f64le" {
        return Err(Error::InvalidParameter(format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(path)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(Error::ShapeMismatch(format!("header declares {n} values, file holds {} bytes", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let arr = ArrayD::from_shape_vec(IxDyn(&header.shape), values).expect("length checked");
    Ok((arr, header))
}

/// Image samples as a `[L, L]` array.
pub fn write_image_binary(path: &Path, img: &CrystalImage) -> Result<()> {
    let l = img.len();
    write_f64_binary(path, &img.samples().clone().into_dyn(), serde_json::json!({ "width": l, "height": l }))
}

/// Gradient field as `[L_B, L_B, 2, 2]`; undefined cells hold NaN.
pub fn write_gradient_binary(path: &Path, field: &DeformationGradientField) -> Result<()> {
    let (r, c) = field.defined.dim();
    let arr = ArrayD::from_shape_fn(IxDyn(&[r, c, 2, 2]), |ix| match field.get(ix[0], ix[1]) {
        Some(m) => m.m[ix[2]][ix[3]],
        None => f64::NAN,
    });
    write_f64_binary(path, &arr, serde_json::json!({ "layout": "row-major gradient per cell" }))
}

/// Squeezed energy as `[L_B, L_B, L_R, L_A]` with both polar axes in the header.
pub fn write_energy_binary(path: &Path, energy: &SsEnergy) -> Result<()> {
    let meta = serde_json::json!({
        "r_min": energy.r_min,
        "r_max": energy.r_max,
        "r_axis": energy.r_axis(),
        "theta_axis": energy.theta_axis(),
    });
    write_f64_binary(path, &energy.t.clone().into_dyn(), meta)
}
