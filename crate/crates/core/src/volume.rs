//! Volumetric data types, intensity normalization, label encoding and the
//! MPGV volume file format.
//!
//! An MPGV file is a 16-byte header followed by the voxels:
//!
//! | offset | size | content                              |
//! |--------|------|--------------------------------------|
//! | 0      | 4    | ASCII magic `MPGV`                   |
//! | 4      | 12   | depth, height, width as LE `u32`     |
//! | 16     | 4·n  | LE `f32` voxels, depth-major order   |
//!
//! Depth-major means the width index varies fastest:
//! `index = (d * height + h) * width + w`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MPGV_MAGIC: &[u8; 4] = b"MPGV";
pub const MPGV_HEADER_LEN: usize = 16;

/// `[depth, height, width]`.
pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape.iter().product()
}

/// A rank-3 scalar field with no intensity contract.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    shape: Shape3,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidShape(shape, "every extent must be positive"));
        }
        if voxel_count(shape) != data.len() {
            return Err(Error::shape(voxel_count(shape), data.len()));
        }
        Ok(Grid3 { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Grid3 {
            shape,
            data: vec![0.0; voxel_count(shape)],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Grid3 { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(d, h, w)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn sub(&self, other: &Grid3) -> Result<Grid3> {
        self.check_same_shape(other)?;
        Ok(Grid3 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Grid3) -> Result<Grid3> {
        self.check_same_shape(other)?;
        Ok(Grid3 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Grid3 {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Grid3) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }
}

/// Affine map `v -> scale * v + offset` applied by [`normalize_volume`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityAffine {
    pub scale: f64,
    pub offset: f64,
}

impl IntensityAffine {
    pub fn apply(&self, v: f64) -> f64 {
        self.scale * v + self.offset
    }
}

/// A normalized volume: a [`Grid3`] whose voxels lie in `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid3,
    range: (f64, f64),
}

pub const DEFAULT_RANGE: (f64, f64) = (-1.0, 1.0);

impl Volume {
    /// Wraps a grid whose values already lie in `[-1, 1]`.
    pub fn new(grid: Grid3) -> Result<Self> {
        Volume::with_range(grid, DEFAULT_RANGE)
    }

    pub fn with_range(grid: Grid3, range: (f64, f64)) -> Result<Self> {
        if let Some(i) = grid.first_non_finite() {
            return Err(Error::NonFiniteInput(i));
        }
        if let Some(v) = grid.data.iter().find(|&&v| v < range.0 || v > range.1) {
            return Err(Error::InvalidArgument(format!(
                "voxel value {v} outside intensity range [{}, {}]",
                range.0, range.1
            )));
        }
        Ok(Volume { grid, range })
    }

    pub fn from_data(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        Volume::new(Grid3::new(shape, data)?)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn into_grid(self) -> Grid3 {
        self.grid
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.grid.data
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }
}

/// Per-volume min-max rescale onto `[-1, 1]`.
pub fn normalize_volume(raw: &Grid3) -> Result<Volume> {
    normalize_with_affine(raw).map(|(v, _)| v)
}

/// As [`normalize_volume`], also returning the affine that was applied.
pub fn normalize_with_affine(raw: &Grid3) -> Result<(Volume, IntensityAffine)> {
    if let Some(i) = raw.first_non_finite() {
        return Err(Error::NonFiniteInput(i));
    }
    let (min, max) = raw.min_max();
    if max <= min {
        return Err(Error::ConstantVolume(min));
    }
    let span = max - min;
    let data = raw
        .data
        .iter()
        .map(|&v| (2.0 * ((v - min) / span) - 1.0).clamp(-1.0, 1.0))
        .collect();
    let affine = IntensityAffine {
        scale: 2.0 / span,
        offset: -2.0 * min / span - 1.0,
    };
    Ok((
        Volume {
            grid: Grid3 { shape: raw.shape, data },
            range: DEFAULT_RANGE,
        },
        affine,
    ))
}

/// Ordinal disease-stage label in `[0, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassLabel {
    index: usize,
    k: usize,
}

impl ClassLabel {
    pub fn new(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidLabel { index, k });
        }
        Ok(ClassLabel { index, k })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

pub fn one_hot(label: ClassLabel) -> Vec<f64> {
    let mut v = vec![0.0; label.k];
    v[label.index] = 1.0;
    v
}

/// Expands a length-K vector into K constant channels: `[k, d, h, w]`.
pub fn broadcast_label(vec: &[f64], shape: Shape3) -> Tensor {
    let n = voxel_count(shape);
    let mut data = Vec::with_capacity(vec.len() * n);
    for &v in vec {
        data.extend(std::iter::repeat(v).take(n));
    }
    Tensor::new(vec![vec.len(), shape[0], shape[1], shape[2]], data)
}

/// A point on the probability simplex over K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {probs:?}")));
        }
        Ok(ClassProbabilities { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        crate::autograd::softmax_in_place(&mut probs);
        ClassProbabilities { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Signed additive map Δx produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDiscriminativeMap {
    grid: Grid3,
}

impl ClassDiscriminativeMap {
    pub fn new(grid: Grid3) -> Result<Self> {
        if let Some(i) = grid.first_non_finite() {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(ClassDiscriminativeMap { grid })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn into_grid(self) -> Grid3 {
        self.grid
    }

    pub fn shape(&self) -> Shape3 {
        self.grid.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.grid.data
    }
}

// ----- MPGV I/O ------------------------------------------------------------

pub fn encode_grid(grid: &Grid3) -> Vec<u8> {
    let mut buf = Vec::with_capacity(MPGV_HEADER_LEN + 4 * grid.len());
    buf.extend_from_slice(MPGV_MAGIC);
    for &d in &grid.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &grid.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid3> {
    if bytes.len() < MPGV_HEADER_LEN {
        return Err(Error::CorruptHeader(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MPGV_MAGIC {
        return Err(Error::CorruptHeader(format!("bad magic {:?}", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::CorruptHeader(format!("zero extent in {shape:?}")));
    }
    let payload = &bytes[MPGV_HEADER_LEN..];
    let expected = voxel_count(shape);
    if payload.len() != 4 * expected {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected} voxels for {shape:?}"),
            found: format!("{} bytes", payload.len()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Grid3 { shape, data })
}

/// Writes a grid as MPGV. Values are stored as `f32`.
pub fn save_grid(grid: &Grid3, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_grid(&volume.grid, path)
}

/// Loads an MPGV file whose values already lie in `[-1, 1]`. Raw scans
/// should go through [`load_grid`] and [`normalize_volume`] instead.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::new(load_grid(path)?)
}

/// Minimal single-file NIfTI-1 (`.nii`) reader for scalar volumes.
#[cfg(feature = "nifti")]
pub mod nifti {
    use super::*;

    /// Reads the first 3-D frame of an uncompressed `.nii` file, applying
    /// `scl_slope`/`scl_inter`. The returned grid is `[nz, ny, nx]`, which
    /// matches the NIfTI on-disk order.
    pub fn load_nifti(path: impl AsRef<Path>) -> Result<Grid3> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_nifti(&bytes)
    }

    pub fn decode_nifti(bytes: &[u8]) -> Result<Grid3> {
        if bytes.len() < 352 {
            return Err(Error::CorruptHeader("NIfTI header truncated".into()));
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348;
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348;
        if !le && !be {
            return Err(Error::CorruptHeader("sizeof_hdr is not 348".into()));
        }
        let i16_at = |o: usize| {
            let b: [u8; 2] = bytes[o..o + 2].try_into().unwrap();
            if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
        };
        let f32_at = |o: usize| {
            let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
            if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
        };
        let ndim = i16_at(40);
        if !(3..=7).contains(&ndim) {
            return Err(Error::CorruptHeader(format!("unsupported dim[0] = {ndim}")));
        }
        let (nx, ny, nz) = (i16_at(42), i16_at(44), i16_at(46));
        if nx <= 0 || ny <= 0 || nz <= 0 {
            return Err(Error::CorruptHeader(format!("bad dims {nx}x{ny}x{nz}")));
        }
        let datatype = i16_at(70);
        let vox_offset = f32_at(108) as usize;
        let (mut slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
        if slope == 0.0 {
            slope = 1.0;
        }
        let shape = [nz as usize, ny as usize, nx as usize];
        let n = voxel_count(shape);
        let width = match datatype {
            2 => 1,
            4 | 512 => 2,
            8 | 16 => 4,
            64 => 8,
            other => return Err(Error::CorruptHeader(format!("unsupported datatype {other}"))),
        };
        let payload = bytes.get(vox_offset..vox_offset + n * width).ok_or_else(|| Error::ShapeMismatch {
            expected: format!("{n} voxels of {width} bytes"),
            found: format!("{} bytes after offset {vox_offset}", bytes.len().saturating_sub(vox_offset)),
        })?;
        let data = payload
            .chunks_exact(width)
            .map(|c| {
                let v = match (datatype, le) {
                    (2, _) => c[0] as f64,
                    (4, true) => i16::from_le_bytes(c.try_into().unwrap()) as f64,
                    (4, false) => i16::from_be_bytes(c.try_into().unwrap()) as f64,
                    (512, true) => u16::from_le_bytes(c.try_into().unwrap()) as f64,
                    (512, false) => u16::from_be_bytes(c.try_into().unwrap()) as f64,
                    (8, true) => i32::from_le_bytes(c.try_into().unwrap()) as f64,
                    (8, false) => i32::from_be_bytes(c.try_into().unwrap()) as f64,
                    (16, true) => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    (16, false) => f32::from_be_bytes(c.try_into().unwrap()) as f64,
                    (64, true) => f64::from_le_bytes(c.try_into().unwrap()),
                    _ => f64::from_be_bytes(c.try_into().unwrap()),
                };
                v * slope + inter
            })
            .collect();
        Grid3::new(shape, data)
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn reads_float32_little_endian() {
            let mut h = vec![0u8; 352];
            h[0..4].copy_from_slice(&348i32.to_le_bytes());
            for (o, v) in [(40, 3i16), (42, 2), (44, 1), (46, 2), (70, 16)] {
                h[o..o + 2].copy_from_slice(&v.to_le_bytes());
            }
            h[108..112].copy_from_slice(&352f32.to_le_bytes());
            for v in [1f32, 2.0, 3.0, 4.0] {
                h.extend_from_slice(&v.to_le_bytes());
            }
            let g = decode_nifti(&h).unwrap();
            assert_eq!(g.shape(), [2, 1, 2]);
            assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(shape: Shape3, data: &[f64]) -> Grid3 {
        Grid3::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = normalize_volume(&grid([1, 1, 3], &[0.0, 5.0, 10.0])).unwrap();
        assert_eq!(v.data(), &[-1.0, 0.0, 1.0]);
        let v = normalize_volume(&grid([1, 1, 2], &[2.0, 4.0])).unwrap();
        assert_eq!(v.data(), &[-1.0, 1.0]);
        let v = normalize_volume(&grid([1, 1, 3], &[2.0, 3.0, 4.0])).unwrap();
        assert_eq!(v.data(), &[-1.0, 0.0, 1.0]);
        let already = grid([1, 2, 2], &[-1.0, 0.25, -0.5, 1.0]);
        assert_eq!(normalize_volume(&already).unwrap().data(), already.data());
    }

    #[test]
    fn normalize_errors() {
        assert!(matches!(normalize_volume(&grid([1, 1, 2], &[3.0, 3.0])), Err(Error::ConstantVolume(_))));
        assert!(matches!(
            normalize_volume(&grid([1, 1, 2], &[3.0, f64::NAN])),
            Err(Error::NonFiniteInput(1))
        ));
        assert!(matches!(
            normalize_volume(&grid([1, 1, 2], &[f64::INFINITY, 0.0])),
            Err(Error::NonFiniteInput(0))
        ));
    }

    #[test]
    fn affine_reproduces_normalized_values() {
        let raw = grid([1, 2, 2], &[0.3, -2.0, 7.5, 1.0]);
        let (v, a) = normalize_with_affine(&raw).unwrap();
        for (r, n) in raw.data().iter().zip(v.data()) {
            assert!((a.apply(*r) - n).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(ClassLabel::new(2, 5).unwrap()), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(one_hot(ClassLabel::new(0, 5).unwrap()), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(one_hot(ClassLabel::new(4, 5).unwrap()), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(ClassLabel::new(5, 5).is_err());
        for i in 0..5 {
            assert_eq!(argmax(&one_hot(ClassLabel::new(i, 5).unwrap())), i);
        }
    }

    #[test]
    fn broadcast_examples() {
        let t = broadcast_label(&[0.0, 1.0], [2, 2, 2]);
        assert_eq!(t.shape(), &[2, 2, 2, 2]);
        assert!(t.data()[..8].iter().all(|&v| v == 0.0));
        assert!(t.data()[8..].iter().all(|&v| v == 1.0));
        let t = broadcast_label(&[1.0, 0.0, 0.0, 0.0, 0.0], [4, 4, 4]);
        assert!(t.data()[..64].iter().all(|&v| v == 1.0));
        assert!(t.data()[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_contract() {
        assert!(ClassProbabilities::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassProbabilities::new(vec![0.5, 0.6]).is_err());
        assert!(ClassProbabilities::new(vec![1.5, -0.5]).is_err());
        let p = ClassProbabilities::from_logits(&[2.0, 0.0]);
        assert!((p.probs()[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn mpgv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.mpgv");
        let ramp = Grid3::from_fn([4, 4, 4], |d, h, w| (d * 16 + h * 4 + w) as f64 / 63.0 * 2.0 - 1.0);
        let v = normalize_volume(&ramp).unwrap();
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), [4, 4, 4]);
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(*a as f32, *b as f32);
        }

        let mut bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"MPGV");
        assert_eq!(bytes.len(), 16 + 4 * 64);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_grid(&bytes), Err(Error::ShapeMismatch { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_grid(&bytes), Err(Error::CorruptHeader(_))));
        assert!(matches!(decode_grid(b"MPG"), Err(Error::CorruptHeader(_))));
        assert!(matches!(load_grid(dir.path().join("missing.mpgv")), Err(Error::IoFailure { .. })));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_order_preserving(data in prop::collection::vec(-1e3f64..1e3, 2..64)) {
            let n = data.len();
            let g = Grid3::new([1, 1, n], data.clone()).unwrap();
            prop_assume!(g.min_max().1 > g.min_max().0);
            let v = normalize_volume(&g).unwrap();
            let again = normalize_volume(v.grid()).unwrap();
            for (a, b) in v.data().iter().zip(again.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            prop_assert_eq!(argmax(&data), argmax(v.data()));
            let neg: Vec<f64> = data.iter().map(|x| -x).collect();
            let vneg: Vec<f64> = v.data().iter().map(|x| -x).collect();
            prop_assert_eq!(argmax(&neg), argmax(&vneg));
            for i in 0..n {
                for j in 0..n {
                    if data[i] < data[j] {
                        prop_assert!(v.data()[i] <= v.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn mpgv_round_trip_is_exact(
            shape in (1usize..5, 1usize..5, 1usize..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let shape = [shape.0, shape.1, shape.2];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..voxel_count(shape))
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff) as f64)
                .filter(|v| v.is_finite())
                .collect();
            prop_assume!(data.len() == voxel_count(shape));
            let g = Grid3::new(shape, data).unwrap();
            let back = decode_grid(&encode_grid(&g)).unwrap();
            prop_assert_eq!(back.shape(), g.shape());
            for (a, b) in back.data().iter().zip(g.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
