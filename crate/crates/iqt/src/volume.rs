//! Core volumetric types and the IQTV on-disk format.
//!
//! A [`Volume3D`] is a dense 3D scalar field with voxel spacing in mm, stored
//! x-fastest. [`TissueMasks`] carries probabilistic WM/GM/other channels on
//! the same grid, a partition of unity per voxel. Both round-trip bit-exactly
//! through the IQTV format described in [`load_volume`].

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Magic bytes opening every IQTV file.
pub const IQTV_MAGIC: [u8; 4] = *b"IQTV";
/// Current format version.
pub const IQTV_VERSION: u32 = 1;
/// Fixed header size in bytes; the payload starts immediately after.
pub const IQTV_HEADER_LEN: usize = 64;

/// Default threshold separating skull-stripped background (exact zero up to
/// float noise) from tissue on normalized volumes.
pub const DEFAULT_BACKGROUND_EPSILON: f32 = 1e-6;

/// Tolerance on the per-voxel mask channel sum.
pub const MASK_PARTITION_TOL: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic {found:?}, expected \"IQTV\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported IQTV version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("non-positive dimension {dim} = {value}")]
    NonPositiveDim { dim: char, value: u32 },
    #[error("non-positive spacing {axis} = {value}")]
    NonPositiveSpacing { axis: char, value: f32 },
    #[error("channel count {0} not in {{1, 3}}")]
    BadChannelCount(u32),
    #[error("data length {got} does not match nx*ny*nz = {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("non-finite intensity at voxel index {index}")]
    NonFinite { index: usize },
    #[error("mask channel value {value} at index {index} outside [0, 1]")]
    MaskRange { index: usize, value: f32 },
    #[error("mask channels sum to {sum} at index {index}, not 1 within {MASK_PARTITION_TOL}")]
    MaskPartition { index: usize, sum: f32 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_spacing(sx: f32, sy: f32, sz: f32) -> Result<(), VolumeError> {
    for (axis, s) in [('x', sx), ('y', sy), ('z', sz)] {
        if !(s > 0.0) || !s.is_finite() {
            return Err(VolumeError::NonPositiveSpacing { axis, value: s });
        }
    }
    Ok(())
}

fn check_dims(nx: usize, ny: usize, nz: usize) -> Result<(), VolumeError> {
    for (dim, n) in [('x', nx), ('y', ny), ('z', nz)] {
        if n == 0 {
            return Err(VolumeError::NonPositiveDim { dim, value: 0 });
        }
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<(), VolumeError> {
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::NonFinite { index });
    }
    Ok(())
}

/// A 3D scalar field with voxel spacing in mm. Data is stored x-fastest,
/// then y, then z. Immutable after construction; all intensities are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    nx: usize,
    ny: usize,
    nz: usize,
    sx: f32,
    sy: f32,
    sz: f32,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = dims;
        let (sx, sy, sz) = spacing;
        check_dims(nx, ny, nz)?;
        check_spacing(sx, sy, sz)?;
        let expected = nx * ny * nz;
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                expected,
                got: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            nx,
            ny,
            nz,
            sx,
            sy,
            sz,
            data,
        })
    }

    pub fn filled(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        value: f32,
    ) -> Result<Self, VolumeError> {
        let n = dims.0 * dims.1 * dims.2;
        Self::new(dims, spacing, vec![value; n])
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Result<Self, VolumeError> {
        Self::filled(dims, spacing, 0.0)
    }

    /// Builds a volume by evaluating `f` at every (ix, iy, iz).
    pub fn from_fn(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    data.push(f(ix, iy, iz));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        (self.sx, self.sy, self.sz)
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        (iz * self.ny + iy) * self.nx + ix
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.data[self.index(ix, iy, iz)]
    }

    /// Applies `f` to every intensity, validating the result stays finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.dims(), self.spacing(), data)
    }
}

/// Probabilistic WM/GM/other masks on the same grid as an associated volume.
/// Channels are each in [0, 1] and sum to 1 per voxel within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMasks {
    nx: usize,
    ny: usize,
    nz: usize,
    sx: f32,
    sy: f32,
    sz: f32,
    wm: Vec<f32>,
    gm: Vec<f32>,
    other: Vec<f32>,
}

impl TissueMasks {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        wm: Vec<f32>,
        gm: Vec<f32>,
        other: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = dims;
        let (sx, sy, sz) = spacing;
        check_dims(nx, ny, nz)?;
        check_spacing(sx, sy, sz)?;
        let expected = nx * ny * nz;
        for channel in [&wm, &gm, &other] {
            if channel.len() != expected {
                return Err(VolumeError::DataLength {
                    expected,
                    got: channel.len(),
                });
            }
        }
        for i in 0..expected {
            let mut sum = 0.0f32;
            for channel in [&wm, &gm, &other] {
                let v = channel[i];
                if !v.is_finite() {
                    return Err(VolumeError::NonFinite { index: i });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(VolumeError::MaskRange { index: i, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > MASK_PARTITION_TOL {
                return Err(VolumeError::MaskPartition { index: i, sum });
            }
        }
        Ok(Self {
            nx,
            ny,
            nz,
            sx,
            sy,
            sz,
            wm,
            gm,
            other,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        (self.sx, self.sy, self.sz)
    }

    pub fn wm(&self) -> &[f32] {
        &self.wm
    }

    pub fn gm(&self) -> &[f32] {
        &self.gm
    }

    pub fn other(&self) -> &[f32] {
        &self.other
    }

    pub fn voxel_count(&self) -> usize {
        self.wm.len()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iy < self.ny && iz < self.nz);
        (iz * self.ny + iy) * self.nx + ix
    }

    /// Checks that the masks live on the same grid as `v`.
    pub fn check_grid(&self, v: &Volume3D) -> Result<(), VolumeError> {
        if self.dims() != v.dims() || self.spacing() != v.spacing() {
            return Err(VolumeError::GridMismatch(format!(
                "masks {:?}/{:?} vs volume {:?}/{:?}",
                self.dims(),
                self.spacing(),
                v.dims(),
                v.spacing()
            )));
        }
        Ok(())
    }
}

/// Intensity summary of a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Fraction of voxels with intensity strictly above the background epsilon.
    pub foreground_fraction: f64,
}

impl fmt::Display for VolumeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min {:.6} max {:.6} mean {:.6} std {:.6} fg {:.4}",
            self.min, self.max, self.mean, self.std, self.foreground_fraction
        )
    }
}

/// Summarizes intensities; reductions accumulate in f64. `std` is the
/// population standard deviation.
pub fn stats(v: &Volume3D, background_epsilon: f32) -> VolumeStats {
    let n = v.voxel_count() as f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    let mut foreground = 0usize;
    for &x in v.data() {
        let x = x as f64;
        min = min.min(x);
        max = max.max(x);
        sum += x;
        if x > background_epsilon as f64 {
            foreground += 1;
        }
    }
    let mean = sum / n;
    let mut ssq = 0.0f64;
    for &x in v.data() {
        let d = x as f64 - mean;
        ssq += d * d;
    }
    VolumeStats {
        min,
        max,
        mean,
        std: (ssq / n).sqrt(),
        foreground_fraction: foreground as f64 / n,
    }
}

/// Either payload of an IQTV file, discriminated by channel count.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume {
    Scalar(Volume3D),
    Masks(TissueMasks),
}

impl LoadedVolume {
    pub fn into_scalar(self) -> Result<Volume3D, VolumeError> {
        match self {
            LoadedVolume::Scalar(v) => Ok(v),
            LoadedVolume::Masks(_) => Err(VolumeError::GridMismatch(
                "expected single-channel volume, found masks".into(),
            )),
        }
    }

    pub fn into_masks(self) -> Result<TissueMasks, VolumeError> {
        match self {
            LoadedVolume::Masks(m) => Ok(m),
            LoadedVolume::Scalar(_) => Err(VolumeError::GridMismatch(
                "expected 3-channel masks, found scalar volume".into(),
            )),
        }
    }
}

fn encode_header(dims: (usize, usize, usize), spacing: (f32, f32, f32), n_channels: u32) -> [u8; IQTV_HEADER_LEN] {
    let mut h = [0u8; IQTV_HEADER_LEN];
    h[0..4].copy_from_slice(&IQTV_MAGIC);
    h[4..8].copy_from_slice(&IQTV_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&(dims.0 as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(dims.1 as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(dims.2 as u32).to_le_bytes());
    h[20..24].copy_from_slice(&spacing.0.to_le_bytes());
    h[24..28].copy_from_slice(&spacing.1.to_le_bytes());
    h[28..32].copy_from_slice(&spacing.2.to_le_bytes());
    h[32..36].copy_from_slice(&n_channels.to_le_bytes());
    h
}

fn write_payload(w: &mut impl Write, channels: &[&[f32]]) -> Result<(), VolumeError> {
    let mut buf = Vec::with_capacity(channels.iter().map(|c| c.len()).sum::<usize>() * 4);
    for channel in channels {
        for v in *channel {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes a single-channel IQTV file.
pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(v.dims(), v.spacing(), 1))?;
    write_payload(&mut w, &[v.data()])?;
    w.flush()?;
    Ok(())
}

/// Writes a 3-channel IQTV file (WM, GM, other in channel order).
pub fn save_masks(m: &TissueMasks, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(m.dims(), m.spacing(), 3))?;
    write_payload(&mut w, &[m.wm(), m.gm(), m.other()])?;
    w.flush()?;
    Ok(())
}

/// Reads an IQTV file.
///
/// The format is little-endian: bytes 0-3 magic `"IQTV"`, u32 version = 1,
/// u32 nx/ny/nz, f32 sx/sy/sz in mm, u32 n_channels (1 or 3), zero padding up
/// to a 64-byte header, then nx*ny*nz*n_channels f32 values ordered x-fastest,
/// then y, then z, then channel. Single-channel files load as
/// [`Volume3D`], 3-channel files as [`TissueMasks`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; IQTV_HEADER_LEN];
    let got = read_up_to(&mut r, &mut header)?;
    if got < 4 {
        return Err(VolumeError::Truncated {
            expected: IQTV_HEADER_LEN,
            got,
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&header[0..4]);
    if magic != IQTV_MAGIC {
        return Err(VolumeError::BadMagic { found: magic });
    }
    if got < IQTV_HEADER_LEN {
        return Err(VolumeError::Truncated {
            expected: IQTV_HEADER_LEN,
            got,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(header[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(header[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != IQTV_VERSION {
        return Err(VolumeError::UnsupportedVersion(version));
    }
    let (nx, ny, nz) = (u32_at(8), u32_at(12), u32_at(16));
    for (dim, n) in [('x', nx), ('y', ny), ('z', nz)] {
        if n == 0 {
            return Err(VolumeError::NonPositiveDim { dim, value: n });
        }
    }
    let (sx, sy, sz) = (f32_at(20), f32_at(24), f32_at(28));
    check_spacing(sx, sy, sz)?;
    let n_channels = u32_at(32);
    if n_channels != 1 && n_channels != 3 {
        return Err(VolumeError::BadChannelCount(n_channels));
    }

    let voxels = nx as usize * ny as usize * nz as usize;
    let payload_len = voxels * n_channels as usize * 4;
    let mut payload = vec![0u8; payload_len];
    let got = read_up_to(&mut r, &mut payload)?;
    if got < payload_len {
        return Err(VolumeError::Truncated {
            expected: IQTV_HEADER_LEN + payload_len,
            got: IQTV_HEADER_LEN + got,
        });
    }

    let mut values = Vec::with_capacity(voxels * n_channels as usize);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let dims = (nx as usize, ny as usize, nz as usize);
    let spacing = (sx, sy, sz);
    if n_channels == 1 {
        Ok(LoadedVolume::Scalar(Volume3D::new(dims, spacing, values)?))
    } else {
        let gm = values.split_off(2 * voxels);
        let wm_gm = values.split_off(voxels);
        Ok(LoadedVolume::Masks(TissueMasks::new(
            dims, spacing, values, wm_gm, gm,
        )?))
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize, VolumeError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}
