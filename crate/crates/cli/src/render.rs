//! Grayscale renderings of scalar maps. Rows of the image follow the first
//! map index. Undefined cells are transparent over neutral gray.

use std::path::Path;

use image::{ImageBuffer, LumaA};
use ndarray::Array2;

use crystal_sst::analysis::{MapKind, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Style {
    /// Linear from black at the low limit to white at the high limit.
    Gray { range: Option<(f64, f64)> },
    /// Zero at mid-gray, `±clip` at white and black. Without a clip the
    /// largest absolute value is used.
    Diverging { clip: Option<f64> },
}

impl Style {
    /// Conventional style for a map kind.
    pub fn for_kind(kind: MapKind, vol_clip: f64) -> Self {
        match kind {
            MapKind::AngleDeg => Style::Gray { range: Some((0.0, 60.0)) },
            MapKind::BoundaryIndicator => Style::Gray { range: Some((0.0, 1.0)) },
            MapKind::Energy => Style::Gray { range: None },
            MapKind::VolumeDistortion => Style::Diverging { clip: Some(vol_clip) },
        }
    }
}

/// Levels in `[0, 1]`; `None` for undefined cells.
pub fn levels(map: &ScalarMap, style: Style) -> Array2<Option<f64>> {
    let defined = |i: usize, j: usize| map.get(i, j).filter(|v| v.is_finite());
    let level: Box<dyn Fn(f64) -> f64> = match style {
        Style::Gray { range } => {
            let (lo, hi) = range.or_else(|| map.range()).unwrap_or((0.0, 0.0));
            if hi > lo {
                Box::new(move |v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            } else {
                Box::new(|_| 0.5)
            }
        }
        Style::Diverging { clip } => {
            let c = clip.unwrap_or_else(|| map.range().map_or(0.0, |(lo, hi)| lo.abs().max(hi.abs())));
            if c > 0.0 {
                Box::new(move |v| (0.5 + 0.5 * v / c).clamp(0.0, 1.0))
            } else {
                Box::new(|_| 0.5)
            }
        }
    };
    Array2::from_shape_fn(map.values.dim(), |(i, j)| defined(i, j).map(&level))
}

pub fn write_map_png(path: &Path, map: &ScalarMap, style: Style, bits: u8) -> image::ImageResult<()> {
    let lv = levels(map, style);
    let (rows, cols) = lv.dim();
    if bits == 8 {
        ImageBuffer::<LumaA<u8>, Vec<u8>>::from_fn(cols as u32, rows as u32, |x, y| match lv[[y as usize, x as usize]] {
            Some(l) => LumaA([(l * 255.0).round() as u8, u8::MAX]),
            None => LumaA([128, 0]),
        })
        .save(path)
    } else {
        ImageBuffer::<LumaA<u16>, Vec<u16>>::from_fn(cols as u32, rows as u32, |x, y| match lv[[y as usize, x as usize]] {
            Some(l) => LumaA([(l * 65535.0).round() as u16, u16::MAX]),
            None => LumaA([32768, 0]),
        })
        .save(path)
    }
}

/// A boolean mask as a map with values 0 and 1.
pub fn mask_map(mask: &Array2<bool>) -> ScalarMap {
    ScalarMap::new(mask.mapv(|m| if m { 1.0 } else { 0.0 }), MapKind::BoundaryIndicator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, kind: MapKind) -> ScalarMap {
        ScalarMap::new(Array2::from_shape_vec((1, values.len()), values).unwrap(), kind)
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let m = map(vec![3.0; 4], MapKind::Energy);
        assert!(levels(&m, Style::Gray { range: None }).iter().all(|l| *l == Some(0.5)));
        let z = map(vec![0.0; 4], MapKind::VolumeDistortion);
        assert!(levels(&z, Style::Diverging { clip: None }).iter().all(|l| *l == Some(0.5)));
    }

    #[test]
    fn volume_clip_is_symmetric() {
        let m = map(vec![-0.3, -0.15, 0.0, 0.075, 0.15, 0.3], MapKind::VolumeDistortion);
        let l: Vec<f64> = levels(&m, Style::for_kind(MapKind::VolumeDistortion, 0.15)).iter().map(|l| l.unwrap()).collect();
        assert_eq!(l, vec![0.0, 0.0, 0.5, 0.75, 1.0, 1.0]);
    }

    #[test]
    fn angle_map_spans_zero_to_sixty() {
        let m = map(vec![0.0, 15.0, 30.0, 59.9], MapKind::AngleDeg);
        let l: Vec<f64> = levels(&m, Style::for_kind(MapKind::AngleDeg, 0.15)).iter().map(|l| l.unwrap()).collect();
        assert_eq!(&l[..3], &[0.0, 0.25, 0.5]);
        assert!(l[3] < 1.0);
    }

    #[test]
    fn undefined_cells_are_transparent() {
        let m = map(vec![1.0, f64::NAN, 2.0], MapKind::Energy);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_map_png(&p, &m, Style::Gray { range: None }, 8).unwrap();
        let img = image::open(&p).unwrap().into_luma_alpha8();
        assert_eq!(img.get_pixel(0, 0).0, [0, 255]);
        assert_eq!(img.get_pixel(1, 0).0, [128, 0]);
        assert_eq!(img.get_pixel(2, 0).0, [255, 255]);
    }
}
