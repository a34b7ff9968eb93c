//! Reading maps out of a trained generator and presenting them: colored
//! slice overlays, atlas region tables and summary statistics.
//!
//! Slices follow the `[d, h, w]` voxel layout: an axial slice fixes `d`
//! (image rows `h`, columns `w`), a coronal slice fixes `h` (rows `d`,
//! columns `w`) and a sagittal slice fixes `w` (rows `d`, columns `h`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{Generator, Params};
use crate::phantom::PhantomSample;
use crate::train::load_checkpoint;
use crate::volume::{ClassDiscriminativeMap, ClassLabel, Grid3, Shape3, Volume};

/// Δx for `x` toward `target`, checking that the generator accepts both.
pub fn map_with(generator: &Generator, params: &Params, x: &Volume, target: ClassLabel) -> Result<ClassDiscriminativeMap> {
    if target.k() != generator.spec().k {
        return Err(Error::SpecMismatch(format!(
            "target has K = {}, checkpoint K = {}",
            target.k(),
            generator.spec().k
        )));
    }
    generator
        .check_shape(x.shape())
        .map_err(|e| Error::SpecMismatch(format!("volume {:?} does not fit the generator: {e}", x.shape())))?;
    generator.map(params, x, target)
}

/// Δx = G(x, y') from the generator stored in a training checkpoint.
pub fn extract_map(checkpoint: impl AsRef<Path>, x: &Volume, target: ClassLabel) -> Result<ClassDiscriminativeMap> {
    let (model, state) = load_checkpoint(checkpoint)?;
    map_with(&model.generator, &state.g, x, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Sagittal,
    Coronal,
    Axial,
}

impl View {
    pub const ALL: [View; 3] = [View::Sagittal, View::Coronal, View::Axial];

    /// Voxel axis held fixed by the view.
    pub fn axis(self) -> usize {
        match self {
            View::Axial => 0,
            View::Coronal => 1,
            View::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
            View::Axial => "axial",
        }
    }

    pub fn parse(s: &str) -> Result<View> {
        View::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown view {s:?}")))
    }

    /// `(rows, cols)` of a slice of `shape`.
    pub fn image_dims(self, shape: Shape3) -> (usize, usize) {
        match self {
            View::Axial => (shape[1], shape[2]),
            View::Coronal => (shape[0], shape[2]),
            View::Sagittal => (shape[0], shape[1]),
        }
    }

    fn voxel(self, slice: usize, r: usize, c: usize) -> (usize, usize, usize) {
        match self {
            View::Axial => (slice, r, c),
            View::Coronal => (r, slice, c),
            View::Sagittal => (r, c, slice),
        }
    }
}

/// Diverging colormaps with a hard zero at mid-gray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    /// Negative toward blue, positive toward crimson.
    BlueGrayRed,
    /// Negative toward purple, positive toward orange.
    PurpleGrayOrange,
}

impl Colormap {
    pub fn name(self) -> &'static str {
        match self {
            Colormap::BlueGrayRed => "blue-gray-red",
            Colormap::PurpleGrayOrange => "purple-gray-orange",
        }
    }

    pub fn parse(s: &str) -> Result<Colormap> {
        [Colormap::BlueGrayRed, Colormap::PurpleGrayOrange]
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown colormap {s:?}")))
    }

    fn ends(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Colormap::BlueGrayRed => ([30.0, 70.0, 220.0], [220.0, 20.0, 60.0]),
            Colormap::PurpleGrayOrange => ([120.0, 40.0, 160.0], [240.0, 140.0, 20.0]),
        }
    }

    /// Color of a normalized value `t` in `[-1, 1]`, linear from mid-gray.
    pub fn color(self, t: f64) -> [f64; 3] {
        let t = t.clamp(-1.0, 1.0);
        let (neg, pos) = self.ends();
        let end = if t < 0.0 { neg } else { pos };
        let a = t.abs();
        std::array::from_fn(|i| (1.0 - a) * 128.0 + a * end[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlaySpec {
    pub view: View,
    pub slice_index: usize,
    pub colormap: Colormap,
    pub alpha: f64,
}

impl OverlaySpec {
    pub fn validate(&self, shape: Shape3) -> Result<()> {
        let len = shape[self.view.axis()];
        if self.slice_index >= len {
            return Err(Error::SliceOutOfRange {
                index: self.slice_index,
                len,
            });
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// Central slice of `view`.
    pub fn central(view: View, shape: Shape3) -> Self {
        OverlaySpec {
            view,
            slice_index: shape[view.axis()] / 2,
            colormap: Colormap::BlueGrayRed,
            alpha: 0.7,
        }
    }
}

/// 8-bit RGB image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    /// Key/value text stored alongside the pixels.
    pub metadata: Vec<(String, String)>,
}

impl Raster {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let as_io = |e: png::EncodingError| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()));
        for (k, v) in &self.metadata {
            enc.add_text_chunk(k.clone(), v.clone()).map_err(as_io)?;
        }
        let mut w = enc.write_header().map_err(as_io)?;
        w.write_image_data(&self.rgb).map_err(as_io)?;
        w.finish().map_err(as_io)
    }
}

fn gray_level(x: &Volume, v: f64) -> f64 {
    let (lo, hi) = x.range();
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0
}

/// Grayscale slice of `x` only.
pub fn render_grayscale(x: &Volume, view: View, slice_index: usize) -> Result<Raster> {
    let spec = OverlaySpec {
        view,
        slice_index,
        colormap: Colormap::BlueGrayRed,
        alpha: 0.0,
    };
    render_overlay_raster(x, None, &spec)
}

/// Blends each pixel toward the colormap by `alpha · |Δx| / max|Δx|`, the
/// maximum taken over the whole map; zero-map pixels stay pure gray.
pub fn render_overlay_raster(x: &Volume, map: Option<&ClassDiscriminativeMap>, spec: &OverlaySpec) -> Result<Raster> {
    let shape = x.shape();
    spec.validate(shape)?;
    if let Some(m) = map {
        x.grid().check_same_shape(m.grid())?;
    }
    let max_abs = map.map_or(0.0, |m| m.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
    let (rows, cols) = spec.view.image_dims(shape);
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        for c in 0..cols {
            let (d, h, w) = spec.view.voxel(spec.slice_index, r, c);
            let gray = gray_level(x, x.grid().get(d, h, w));
            let t = match map {
                Some(m) if max_abs > 0.0 => m.grid().get(d, h, w) / max_abs,
                _ => 0.0,
            };
            let a = spec.alpha * t.abs();
            let color = spec.colormap.color(t);
            for ch in color {
                rgb.push(((1.0 - a) * gray + a * ch).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let metadata = vec![
        ("view".to_string(), spec.view.name().to_string()),
        ("slice_index".to_string(), spec.slice_index.to_string()),
        ("colormap".to_string(), spec.colormap.name().to_string()),
        ("alpha".to_string(), format!("{:?}", spec.alpha)),
        ("normalization".to_string(), "per-map max-abs".to_string()),
        ("max_abs".to_string(), format!("{max_abs:?}")),
    ];
    Ok(Raster {
        width: cols,
        height: rows,
        rgb,
        metadata,
    })
}

/// Renders and writes a PNG overlay.
pub fn render_overlay(x: &Volume, map: &ClassDiscriminativeMap, spec: &OverlaySpec, out: impl AsRef<Path>) -> Result<Raster> {
    let raster = render_overlay_raster(x, Some(map), spec)?;
    raster.write_png(out)?;
    Ok(raster)
}

/// Integer label grid with region names; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasVolume {
    shape: Shape3,
    labels: Vec<u32>,
    names: BTreeMap<u32, String>,
}

impl AtlasVolume {
    pub fn new(shape: Shape3, labels: Vec<u32>, names: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(shape, [labels.len(), 1, 1]));
        }
        Ok(AtlasVolume { shape, labels, names })
    }

    /// Reads labels from a grid of non-negative integral values.
    pub fn from_grid(grid: &Grid3, names: BTreeMap<u32, String>) -> Result<Self> {
        let labels = grid
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::InvalidArgument(format!("atlas label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<_>>()?;
        AtlasVolume::new(grid.shape(), labels, names)
    }

    /// The lesion spheres of a phantom sample as regions `lesion-1`, ...
    pub fn from_phantom(sample: &PhantomSample) -> Self {
        let names = (1..=sample.site_centers.len() as u32).map(|i| (i, format!("lesion-{i}"))).collect();
        AtlasVolume {
            shape: sample.raw.shape(),
            labels: sample.atlas(),
            names,
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn name(&self, region: u32) -> String {
        self.names.get(&region).cloned().unwrap_or_else(|| format!("region-{region}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub region: u32,
    pub name: String,
    pub mean_abs: f64,
    /// Fraction of the region's voxels with `|Δx| >= threshold` (and nonzero).
    pub fraction_above: f64,
    pub voxels: usize,
}

pub const REGION_CSV_HEADER: &str = "roi_index,roi_name,mean_abs_delta,fraction_above_threshold,voxels";

/// Per-region statistics sorted by mean |Δx| descending, ties by region
/// index ascending, truncated to `top_n` rows. The default threshold is
/// half the map's maximum |Δx|.
pub fn region_report(
    map: &ClassDiscriminativeMap,
    atlas: &AtlasVolume,
    top_n: usize,
    threshold: Option<f64>,
) -> Result<Vec<RegionRow>> {
    if map.shape() != atlas.shape {
        return Err(Error::shape(atlas.shape, map.shape()));
    }
    let threshold = threshold.unwrap_or_else(|| 0.5 * map.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
    // region -> (sum |Δx|, voxels, voxels above)
    let mut acc: BTreeMap<u32, (f64, usize, usize)> = BTreeMap::new();
    for (&label, &v) in atlas.labels.iter().zip(map.data()) {
        if label == 0 {
            continue;
        }
        let e = acc.entry(label).or_default();
        e.0 += v.abs();
        e.1 += 1;
        if v.abs() >= threshold && v != 0.0 {
            e.2 += 1;
        }
    }
    let mut rows: Vec<RegionRow> = acc
        .into_iter()
        .map(|(region, (sum, n, above))| RegionRow {
            region,
            name: atlas.name(region),
            mean_abs: sum / n as f64,
            fraction_above: above as f64 / n as f64,
            voxels: n,
        })
        .collect();
    rows.sort_by(|a, b| b.mean_abs.total_cmp(&a.mean_abs).then(a.region.cmp(&b.region)));
    rows.truncate(top_n);
    Ok(rows)
}

pub fn region_csv(rows: &[RegionRow]) -> String {
    let mut out = format!("{REGION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:?},{:?},{}", r.region, r.name, r.mean_abs, r.fraction_above, r.voxels);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub positive_fraction: f64,
    pub negative_fraction: f64,
}

pub fn map_stats(map: &ClassDiscriminativeMap) -> MapStats {
    let n = map.data().len() as f64;
    let d = map.data();
    MapStats {
        mean_abs: d.iter().map(|v| v.abs()).sum::<f64>() / n,
        max_abs: d.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        positive_fraction: d.iter().filter(|&&v| v > 0.0).count() as f64 / n,
        negative_fraction: d.iter().filter(|&&v| v < 0.0).count() as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(shape: Shape3) -> Volume {
        Volume::new(Grid3::from_fn(shape, |d, h, w| ((d + 2 * h + 3 * w) % 9) as f64 / 4.0 - 1.0)).unwrap()
    }

    fn map_from(shape: Shape3, f: impl FnMut(usize, usize, usize) -> f64) -> ClassDiscriminativeMap {
        ClassDiscriminativeMap::new(Grid3::from_fn(shape, f)).unwrap()
    }

    #[test]
    fn zero_map_and_zero_alpha_render_grayscale() {
        let shape = [6, 7, 8];
        let x = volume(shape);
        for view in View::ALL {
            let gray = render_grayscale(&x, view, 3).unwrap();
            let spec = OverlaySpec {
                view,
                slice_index: 3,
                colormap: Colormap::BlueGrayRed,
                alpha: 0.8,
            };
            let zero = map_from(shape, |_, _, _| 0.0);
            assert_eq!(render_overlay_raster(&x, Some(&zero), &spec).unwrap().rgb, gray.rgb);
            let busy = map_from(shape, |d, _, _| d as f64 - 2.5);
            let transparent = OverlaySpec { alpha: 0.0, ..spec };
            assert_eq!(render_overlay_raster(&x, Some(&busy), &transparent).unwrap().rgb, gray.rgb);
            assert!(gray.rgb.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        }
    }

    #[test]
    fn overlay_color_is_local() {
        let shape = [8, 8, 8];
        let x = volume(shape);
        let map = map_from(shape, |d, h, w| if d >= 4 && h >= 4 && w >= 4 { 0.5 } else { 0.0 });
        let spec = OverlaySpec {
            view: View::Axial,
            slice_index: 5,
            colormap: Colormap::BlueGrayRed,
            alpha: 1.0,
        };
        let r = render_overlay_raster(&x, Some(&map), &spec).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let p = r.pixel(row, col);
                let colored = !(p[0] == p[1] && p[1] == p[2]);
                assert_eq!(colored, row >= 4 && col >= 4, "pixel {row},{col}");
            }
        }
        let outside = OverlaySpec { slice_index: 1, ..spec };
        let r = render_overlay_raster(&x, Some(&map), &outside).unwrap();
        assert_eq!(r.rgb, render_grayscale(&x, View::Axial, 1).unwrap().rgb);
    }

    #[test]
    fn slice_bounds_and_png_output() {
        let shape = [4, 5, 6];
        let x = volume(shape);
        let map = map_from(shape, |d, _, _| d as f64 * 0.1 - 0.2);
        let bad = OverlaySpec {
            view: View::Sagittal,
            slice_index: 6,
            colormap: Colormap::PurpleGrayOrange,
            alpha: 0.5,
        };
        assert!(matches!(render_overlay_raster(&x, Some(&map), &bad), Err(Error::SliceOutOfRange { index: 6, len: 6 })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        let spec = OverlaySpec { slice_index: 5, ..bad };
        let r = render_overlay(&x, &map, &spec, &path).unwrap();
        assert_eq!((r.height, r.width), (4, 5));
        let decoder = png::Decoder::new(File::open(&path).unwrap());
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height), (5, 4));
        assert!(info.uncompressed_latin1_text.iter().any(|t| t.keyword == "normalization"));
    }

    #[test]
    fn diverging_colormap_is_centered_and_signed() {
        for cm in [Colormap::BlueGrayRed, Colormap::PurpleGrayOrange] {
            assert_eq!(cm.color(0.0), [128.0; 3]);
            let (neg, pos) = (cm.color(-1.0), cm.color(1.0));
            assert_ne!(neg, pos);
            assert_eq!(Colormap::parse(cm.name()).unwrap(), cm);
        }
    }

    fn atlas_two_regions(shape: Shape3) -> AtlasVolume {
        let labels = (0..shape.iter().product::<usize>()).map(|i| (i % 3) as u32).collect();
        AtlasVolume::new(shape, labels, BTreeMap::from([(1, "left".into()), (2, "right".into())])).unwrap()
    }

    #[test]
    fn region_report_examples() {
        let shape = [4, 4, 4];
        let labels: Vec<u32> = (0..64).map(|i| (i / 16) as u32).collect();
        let atlas = AtlasVolume::new(shape, labels.clone(), BTreeMap::new()).unwrap();
        let map = ClassDiscriminativeMap::new(Grid3::new(shape, labels.iter().map(|&l| if l == 3 { -0.4 } else { 0.0 }).collect()).unwrap()).unwrap();
        let rows = region_report(&map, &atlas, 10, None).unwrap();
        assert_eq!(rows[0].region, 3);
        assert_eq!(rows[0].fraction_above, 1.0);
        assert_eq!(rows[0].name, "region-3");
        let uniform = map_from(shape, |_, _, _| 0.2);
        let rows = region_report(&uniform, &atlas, 10, None).unwrap();
        assert_eq!(rows.iter().map(|r| r.region).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(rows.iter().map(|r| r.voxels).sum::<usize>(), labels.iter().filter(|&&l| l != 0).count());
        assert_eq!(region_report(&uniform, &atlas, 1, None).unwrap().len(), 1);
        let wrong = map_from([4, 4, 2], |_, _, _| 0.0);
        assert!(matches!(region_report(&wrong, &atlas, 3, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn region_means_match_masked_averages() {
        let shape = [5, 5, 5];
        let atlas = atlas_two_regions(shape);
        let map = map_from(shape, |d, h, w| ((d * 31 + h * 17 + w * 7) % 13) as f64 / 6.5 - 1.0);
        let rows = region_report(&map, &atlas, 5, None).unwrap();
        for row in rows {
            let vals: Vec<f64> = map
                .data()
                .iter()
                .zip(atlas.labels())
                .filter(|(_, &l)| l == row.region)
                .map(|(v, _)| v.abs())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((row.mean_abs - mean).abs() < 1e-12);
        }
        assert!(region_csv(&region_report(&map, &atlas, 5, None).unwrap()).starts_with(REGION_CSV_HEADER));
    }

    #[test]
    fn stats_of_a_signed_map() {
        let m = map_from([2, 2, 2], |d, _, _| if d == 0 { -0.5 } else { 0.25 });
        let s = map_stats(&m);
        assert_eq!((s.mean_abs, s.max_abs, s.positive_fraction, s.negative_fraction), (0.375, 0.5, 0.5, 0.5));
    }
}
