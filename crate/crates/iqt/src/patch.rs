//! Paired patch extraction, background exclusion, offline augmentation,
//! subsampling, and volume reassembly.
//!
//! Low-field patches are cropped on a regular stride grid; the matching
//! high-field patch occupies the same position scaled by k along z. A patch
//! is kept only if strictly fewer than `background_threshold` of its voxels
//! are background, judged on the noiseless simulated volume. Augmentation
//! reruns the simulator with fresh SNR draws, so every copy of a high-field
//! patch is bitwise identical while the low-field patches differ.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{simulate_low_field, SimConfig, SimError, SnrMode, SnrPrior};
use crate::volume::{load_volume, save_volume, TissueMasks, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("volume dims {dims:?} smaller than patch size {size:?}")]
    VolumeTooSmall {
        dims: (usize, usize, usize),
        size: (usize, usize, usize),
    },
    #[error("high-field dims {hi:?} do not match low-field dims {lo:?} at k = {k}")]
    DimMismatch {
        lo: (usize, usize, usize),
        hi: (usize, usize, usize),
        k: usize,
    },
    #[error("voxel {0:?} covered by no patch")]
    UncoveredVoxel((usize, usize, usize)),
    #[error("subsample fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("invalid patch spec: {0}")]
    BadSpec(String),
    #[error("library manifest corrupt: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Patch geometry and the background exclusion rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub k: usize,
    pub low_size: (usize, usize, usize),
    pub high_size: (usize, usize, usize),
    /// Strides in low-field voxels along x, y, z.
    pub strides: (usize, usize, usize),
    /// A patch whose background fraction reaches this value is excluded.
    pub background_threshold: f64,
    pub background_epsilon: f32,
}

impl PatchSpec {
    /// The standard geometry for factor k: low 32 x 32 x 32/k, high
    /// 32 x 32 x 32, strides (8, 16, 16/k).
    pub fn for_factor(k: usize) -> Self {
        Self {
            k,
            low_size: (32, 32, 32 / k),
            high_size: (32, 32, 32),
            strides: (8, 16, 16 / k),
            background_threshold: 0.80,
            background_epsilon: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        let (lx, ly, lz) = self.low_size;
        let (hx, hy, hz) = self.high_size;
        if hx != lx || hy != ly || hz != self.k * lz {
            return Err(PatchError::BadSpec(format!(
                "high size {:?} must equal low size {:?} with z scaled by k={}",
                self.high_size, self.low_size, self.k
            )));
        }
        let (sx, sy, sz) = self.strides;
        if sx == 0 || sy == 0 || sz == 0 {
            return Err(PatchError::BadSpec("strides must be positive".into()));
        }
        if !(self.background_threshold > 0.0 && self.background_threshold <= 1.0) {
            return Err(PatchError::BadSpec(format!(
                "background_threshold {} outside (0, 1]",
                self.background_threshold
            )));
        }
        Ok(())
    }

    pub fn low_voxels(&self) -> usize {
        self.low_size.0 * self.low_size.1 * self.low_size.2
    }

    pub fn high_voxels(&self) -> usize {
        self.high_size.0 * self.high_size.1 * self.high_size.2
    }
}

/// One training pair; tensors are x-fastest like volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub low: Vec<f32>,
    pub high: Vec<f32>,
    /// Low-field voxel index of the patch corner; the high-field corner is
    /// (x, y, k*z).
    pub origin: (usize, usize, usize),
    pub subject_id: usize,
    pub augmentation_id: usize,
}

/// A set of paired patches sharing one [`PatchSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLibrary {
    pub spec: PatchSpec,
    pub pairs: Vec<PatchPair>,
    /// Distinct kept (subject, origin) positions.
    pub kept_positions: usize,
    /// Augmentation factor N.
    pub n_aug: usize,
}

impl PatchLibrary {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Concatenates libraries with identical specs.
    pub fn merge(mut self, other: PatchLibrary) -> Result<PatchLibrary, PatchError> {
        if self.spec != other.spec {
            return Err(PatchError::BadSpec(
                "merging libraries with different specs".into(),
            ));
        }
        if self.n_aug != other.n_aug {
            return Err(PatchError::BadSpec(
                "merging libraries with different augmentation factors".into(),
            ));
        }
        self.pairs.extend(other.pairs);
        self.kept_positions += other.kept_positions;
        Ok(self)
    }
}

fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=(dim - size) / stride).map(|i| i * stride).collect()
}

/// Regular grid origins: multiples of the strides with the whole patch in
/// bounds; count per axis is floor((dim - size)/stride) + 1.
pub fn patch_grid(
    lo_dims: (usize, usize, usize),
    spec: &PatchSpec,
) -> Result<Vec<(usize, usize, usize)>, PatchError> {
    spec.validate()?;
    let (nx, ny, nz) = lo_dims;
    let (px, py, pz) = spec.low_size;
    if nx < px || ny < py || nz < pz {
        return Err(PatchError::VolumeTooSmall {
            dims: lo_dims,
            size: spec.low_size,
        });
    }
    let xs = axis_origins(nx, px, spec.strides.0);
    let ys = axis_origins(ny, py, spec.strides.1);
    let zs = axis_origins(nz, pz, spec.strides.2);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((x, y, z));
            }
        }
    }
    Ok(origins)
}

/// Like [`patch_grid`] but guaranteeing full coverage: each axis gains an
/// end-aligned origin (snapped to the boundary) when the stride grid stops
/// short of it. Used at inference time.
pub fn covering_grid(
    lo_dims: (usize, usize, usize),
    spec: &PatchSpec,
) -> Result<Vec<(usize, usize, usize)>, PatchError> {
    spec.validate()?;
    let (nx, ny, nz) = lo_dims;
    let (px, py, pz) = spec.low_size;
    if nx < px || ny < py || nz < pz {
        return Err(PatchError::VolumeTooSmall {
            dims: lo_dims,
            size: spec.low_size,
        });
    }
    let axis = |dim: usize, size: usize, stride: usize| {
        let mut v = axis_origins(dim, size, stride);
        if *v.last().unwrap() != dim - size {
            v.push(dim - size);
        }
        v
    };
    let xs = axis(nx, px, spec.strides.0);
    let ys = axis(ny, py, spec.strides.1);
    let zs = axis(nz, pz, spec.strides.2);
    let mut origins = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((x, y, z));
            }
        }
    }
    Ok(origins)
}

fn crop(v: &Volume3D, origin: (usize, usize, usize), size: (usize, usize, usize)) -> Vec<f32> {
    let (ox, oy, oz) = origin;
    let (sx, sy, sz) = size;
    let (nx, ny, _) = v.dims();
    let mut out = Vec::with_capacity(sx * sy * sz);
    for z in 0..sz {
        for y in 0..sy {
            let base = ((oz + z) * ny + oy + y) * nx + ox;
            out.extend_from_slice(&v.data()[base..base + sx]);
        }
    }
    out
}

fn is_kept(bg_patch: &[f32], spec: &PatchSpec) -> bool {
    let background = bg_patch
        .iter()
        .filter(|v| v.abs() <= spec.background_epsilon)
        .count();
    // kept iff strictly fewer than threshold * count background voxels;
    // a patch at exactly the threshold is excluded
    (background as f64) < spec.background_threshold * bg_patch.len() as f64
}

fn extract_tagged(
    lo: &Volume3D,
    background_ref: &Volume3D,
    hi: &Volume3D,
    spec: &PatchSpec,
    subject_id: usize,
    augmentation_id: usize,
) -> Result<PatchLibrary, PatchError> {
    spec.validate()?;
    let (lx, ly, lz) = lo.dims();
    if background_ref.dims() != lo.dims() {
        return Err(PatchError::DimMismatch {
            lo: lo.dims(),
            hi: background_ref.dims(),
            k: 1,
        });
    }
    if hi.dims() != (lx, ly, spec.k * lz) {
        return Err(PatchError::DimMismatch {
            lo: lo.dims(),
            hi: hi.dims(),
            k: spec.k,
        });
    }
    let mut pairs = Vec::new();
    for origin in patch_grid(lo.dims(), spec)? {
        let bg_patch = crop(background_ref, origin, spec.low_size);
        if !is_kept(&bg_patch, spec) {
            continue;
        }
        let low = crop(lo, origin, spec.low_size);
        let hi_origin = (origin.0, origin.1, spec.k * origin.2);
        let high = crop(hi, hi_origin, spec.high_size);
        pairs.push(PatchPair {
            low,
            high,
            origin,
            subject_id,
            augmentation_id,
        });
    }
    let kept_positions = pairs.len();
    Ok(PatchLibrary {
        spec: *spec,
        pairs,
        kept_positions,
        n_aug: 1,
    })
}

/// Extracts all grid pairs whose low patch passes the background rule; the
/// low volume itself serves as the background reference.
pub fn extract_pairs(
    lo: &Volume3D,
    hi: &Volume3D,
    spec: &PatchSpec,
) -> Result<PatchLibrary, PatchError> {
    extract_tagged(lo, lo, hi, spec, 0, 0)
}

/// Extraction with a separate background-reference volume (typically the
/// noiseless simulation) and identifying tags.
pub fn extract_pairs_with_background(
    lo: &Volume3D,
    background_ref: &Volume3D,
    hi: &Volume3D,
    spec: &PatchSpec,
    subject_id: usize,
    augmentation_id: usize,
) -> Result<PatchLibrary, PatchError> {
    extract_tagged(lo, background_ref, hi, spec, subject_id, augmentation_id)
}

/// Runs the simulator `n_aug` times on one subject with fresh SNR draws and
/// concatenates the extracted pairs. The background rule is evaluated on each
/// run's noiseless volume; the noisy volume supplies the training input.
#[allow(clippy::too_many_arguments)]
pub fn augment_library(
    hi: &Volume3D,
    masks: &TissueMasks,
    sim_cfg: &SimConfig,
    prior: &SnrPrior,
    n_aug: usize,
    spec: &PatchSpec,
    subject_id: usize,
    rng: &mut impl Rng,
) -> Result<PatchLibrary, PatchError> {
    assert!(n_aug >= 1, "augmentation factor must be at least 1");
    let mut pairs = Vec::new();
    let mut kept_positions = None;
    for j in 0..n_aug {
        let sim = simulate_low_field(hi, masks, sim_cfg, &SnrMode::Sampled(*prior), rng)?;
        let lib = extract_tagged(&sim.noisy, &sim.noiseless, hi, spec, subject_id, j)?;
        match kept_positions {
            None => kept_positions = Some(lib.kept_positions),
            Some(k) => debug_assert_eq!(
                k, lib.kept_positions,
                "kept set must not depend on the SNR draw"
            ),
        }
        pairs.extend(lib.pairs);
    }
    Ok(PatchLibrary {
        spec: *spec,
        pairs,
        kept_positions: kept_positions.unwrap_or(0),
        n_aug,
    })
}

/// Uniform sample without replacement of round(fraction * len) pairs
/// (ties round to even). Selected pairs keep their original order.
pub fn subsample(
    lib: &PatchLibrary,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<PatchLibrary, PatchError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PatchError::BadFraction(fraction));
    }
    let target = (fraction * lib.len() as f64).round_ties_even() as usize;
    let target = target.min(lib.len());
    let mut selected = rand::seq::index::sample(rng, lib.len(), target).into_vec();
    selected.sort_unstable();
    Ok(PatchLibrary {
        spec: lib.spec,
        pairs: selected.iter().map(|&i| lib.pairs[i].clone()).collect(),
        kept_positions: lib.kept_positions,
        n_aug: lib.n_aug,
    })
}

/// Averages overlapping patch predictions into a volume. `patches` carry
/// high-field-space origins; every voxel of `dims` must be covered.
pub fn assemble(
    patches: &[((usize, usize, usize), Vec<f32>)],
    patch_size: (usize, usize, usize),
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> Result<Volume3D, PatchError> {
    let (nx, ny, nz) = dims;
    let mut sum = vec![0.0f64; nx * ny * nz];
    let mut count = vec![0u32; nx * ny * nz];
    let (px, py, pz) = patch_size;
    for ((ox, oy, oz), data) in patches {
        assert_eq!(data.len(), px * py * pz, "patch data length");
        for z in 0..pz {
            for y in 0..py {
                let dst = ((oz + z) * ny + oy + y) * nx + ox;
                let src = (z * py + y) * px;
                for x in 0..px {
                    sum[dst + x] += data[src + x] as f64;
                    count[dst + x] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        let z = i / (nx * ny);
        let y = (i / nx) % ny;
        let x = i % nx;
        return Err(PatchError::UncoveredVoxel((x, y, z)));
    }
    let data: Vec<f32> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    Ok(Volume3D::new(dims, spacing, data)?)
}

/// Per-voxel cover counts for the same accumulation `assemble` performs.
pub fn coverage_counts(
    patches: &[(usize, usize, usize)],
    patch_size: (usize, usize, usize),
    dims: (usize, usize, usize),
) -> Vec<u32> {
    let (nx, ny, nz) = dims;
    let mut count = vec![0u32; nx * ny * nz];
    let (px, py, pz) = patch_size;
    for &(ox, oy, oz) in patches {
        for z in 0..pz {
            for y in 0..py {
                let dst = ((oz + z) * ny + oy + y) * nx + ox;
                for x in 0..px {
                    count[dst + x] += 1;
                }
            }
        }
    }
    count
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    origin: (usize, usize, usize),
    subject_id: usize,
    augmentation_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryManifest {
    spec: PatchSpec,
    kept_positions: usize,
    n_aug: usize,
    shard_size: usize,
    pairs: Vec<PairRecord>,
}

const SHARD_SIZE: usize = 256;

/// Persists a library as a manifest plus one low/high IQTV file pair per
/// shard, with up to 256 patch pairs stacked along z in each shard file.
pub fn save_library(lib: &PatchLibrary, dir: impl AsRef<Path>) -> Result<(), PatchError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = LibraryManifest {
        spec: lib.spec,
        kept_positions: lib.kept_positions,
        n_aug: lib.n_aug,
        shard_size: SHARD_SIZE,
        pairs: lib
            .pairs
            .iter()
            .map(|p| PairRecord {
                origin: p.origin,
                subject_id: p.subject_id,
                augmentation_id: p.augmentation_id,
            })
            .collect(),
    };
    fs::write(
        dir.join("library.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    let (lx, ly, lz) = lib.spec.low_size;
    let (hx, hy, hz) = lib.spec.high_size;
    for (si, chunk) in lib.pairs.chunks(SHARD_SIZE).enumerate() {
        let mut low = Vec::with_capacity(chunk.len() * lib.spec.low_voxels());
        let mut high = Vec::with_capacity(chunk.len() * lib.spec.high_voxels());
        for p in chunk {
            low.extend_from_slice(&p.low);
            high.extend_from_slice(&p.high);
        }
        let low_vol = Volume3D::new((lx, ly, lz * chunk.len()), (1.0, 1.0, 1.0), low)?;
        let high_vol = Volume3D::new((hx, hy, hz * chunk.len()), (1.0, 1.0, 1.0), high)?;
        save_volume(&low_vol, dir.join(format!("shard_{si:04}_low.iqtv")))?;
        save_volume(&high_vol, dir.join(format!("shard_{si:04}_high.iqtv")))?;
    }
    Ok(())
}

/// Loads a library saved by [`save_library`].
pub fn load_library(dir: impl AsRef<Path>) -> Result<PatchLibrary, PatchError> {
    let dir = dir.as_ref();
    let manifest: LibraryManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("library.json"))?)
            .map_err(|e| PatchError::BadManifest(e.to_string()))?;
    let low_voxels = manifest.spec.low_voxels();
    let high_voxels = manifest.spec.high_voxels();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for (si, chunk) in manifest.pairs.chunks(manifest.shard_size).enumerate() {
        let low_vol = load_volume(dir.join(format!("shard_{si:04}_low.iqtv")))?.into_scalar()?;
        let high_vol = load_volume(dir.join(format!("shard_{si:04}_high.iqtv")))?.into_scalar()?;
        if low_vol.voxel_count() != chunk.len() * low_voxels
            || high_vol.voxel_count() != chunk.len() * high_voxels
        {
            return Err(PatchError::BadManifest(format!(
                "shard {si} size does not match manifest"
            )));
        }
        for (i, record) in chunk.iter().enumerate() {
            pairs.push(PatchPair {
                low: low_vol.data()[i * low_voxels..(i + 1) * low_voxels].to_vec(),
                high: high_vol.data()[i * high_voxels..(i + 1) * high_voxels].to_vec(),
                origin: record.origin,
                subject_id: record.subject_id,
                augmentation_id: record.augmentation_id,
            });
        }
    }
    Ok(PatchLibrary {
        spec: manifest.spec,
        pairs,
        kept_positions: manifest.kept_positions,
        n_aug: manifest.n_aug,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::sim::FwhmMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_k4() -> PatchSpec {
        PatchSpec::for_factor(4)
    }

    #[test]
    fn grid_count_matches_closed_form() {
        // 64 x 64 x 16 at k=4: 5 * 3 * 3 = 45 origins
        let origins = patch_grid((64, 64, 16), &spec_k4()).unwrap();
        assert_eq!(origins.len(), 45);
    }

    #[test]
    fn exact_fit_gives_single_origin() {
        let origins = patch_grid((32, 32, 8), &spec_k4()).unwrap();
        assert_eq!(origins, vec![(0, 0, 0)]);
    }

    #[test]
    fn one_extra_voxel_keeps_single_x_origin() {
        // floor(1/8) + 1 = 1 in x
        let origins = patch_grid((33, 32, 8), &spec_k4()).unwrap();
        assert_eq!(origins.len(), 1);
    }

    #[test]
    fn too_small_volume_rejected() {
        assert!(matches!(
            patch_grid((16, 32, 8), &spec_k4()),
            Err(PatchError::VolumeTooSmall { .. })
        ));
    }

    #[test]
    fn covering_grid_snaps_to_boundary() {
        // 70 in x: stride origins 0..32 step 8, then end-aligned 38 = 70-32
        let origins = covering_grid((70, 32, 8), &spec_k4()).unwrap();
        let xs: Vec<usize> = origins.iter().map(|o| o.0).collect();
        assert!(xs.contains(&38));
        let counts = coverage_counts(&origins, (32, 32, 8), (70, 32, 8));
        assert!(counts.iter().all(|&c| c > 0), "full coverage");
    }

    fn flat_volume(dims: (usize, usize, usize), value: f32) -> Volume3D {
        Volume3D::filled(dims, (1.0, 1.0, 1.0), value).unwrap()
    }

    #[test]
    fn all_zero_volume_gives_empty_library() {
        let lo = flat_volume((64, 64, 16), 0.0);
        let hi = flat_volume((64, 64, 64), 0.0);
        let lib = extract_pairs(&lo, &hi, &spec_k4()).unwrap();
        assert!(lib.is_empty());
    }

    #[test]
    fn full_foreground_keeps_every_origin() {
        let lo = flat_volume((64, 64, 16), 0.5);
        let hi = flat_volume((64, 64, 64), 0.5);
        let lib = extract_pairs(&lo, &hi, &spec_k4()).unwrap();
        assert_eq!(lib.len(), 45);
        assert_eq!(lib.kept_positions, 45);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let lo = flat_volume((64, 64, 16), 0.5);
        let hi = flat_volume((64, 64, 32), 0.5);
        assert!(matches!(
            extract_pairs(&lo, &hi, &spec_k4()),
            Err(PatchError::DimMismatch { .. })
        ));
    }

    #[test]
    fn exactly_threshold_background_is_excluded() {
        // craft a low volume where one patch has exactly 80% background
        let spec = PatchSpec {
            k: 1,
            low_size: (10, 4, 4),
            high_size: (10, 4, 4),
            strides: (10, 4, 4),
            background_threshold: 0.80,
            background_epsilon: 1e-6,
        };
        // patch voxels: 160; 128 background = exactly 0.8
        let mut data = vec![0.0f32; 160];
        for v in data.iter_mut().take(32) {
            *v = 1.0;
        }
        let lo = Volume3D::new((10, 4, 4), (1.0, 1.0, 1.0), data.clone()).unwrap();
        let hi = lo.clone();
        let lib = extract_pairs(&lo, &hi, &spec).unwrap();
        assert!(lib.is_empty(), "exactly 80% background must be excluded");

        // one fewer background voxel is kept
        data[32] = 1.0;
        let lo = Volume3D::new((10, 4, 4), (1.0, 1.0, 1.0), data).unwrap();
        let lib = extract_pairs(&lo, &lo.clone(), &spec).unwrap();
        assert_eq!(lib.len(), 1);
    }

    fn phantom_pair() -> (Volume3D, crate::volume::TissueMasks) {
        generate_phantom(&PhantomConfig {
            dims: (64, 64, 32),
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    fn sim_cfg() -> SimConfig {
        SimConfig {
            k: 4,
            sigma_x: 0.02,
            sigma_y: 0.01,
            fwhm_mode: FwhmMode::Spacing,
            seed: 0,
        }
    }

    #[test]
    fn exclusion_matches_bruteforce_recount() {
        let (hi, masks) = phantom_pair();
        let cfg = sim_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sim = simulate_low_field(
            &hi,
            &masks,
            &cfg,
            &SnrMode::Sampled(SnrPrior::default()),
            &mut rng,
        )
        .unwrap();
        let spec = spec_k4();
        let lib = extract_tagged(&sim.noisy, &sim.noiseless, &hi, &spec, 0, 0).unwrap();

        // independent recount: brute-force scan of every grid patch
        let mut kept = 0;
        for (ox, oy, oz) in patch_grid(sim.noiseless.dims(), &spec).unwrap() {
            let mut background = 0usize;
            let total = spec.low_voxels();
            for z in 0..spec.low_size.2 {
                for y in 0..spec.low_size.1 {
                    for x in 0..spec.low_size.0 {
                        if sim.noiseless.get(ox + x, oy + y, oz + z).abs()
                            <= spec.background_epsilon
                        {
                            background += 1;
                        }
                    }
                }
            }
            if (background as f64) < spec.background_threshold * total as f64 {
                kept += 1;
            }
        }
        assert_eq!(lib.len(), kept);
        assert!(
            !lib.is_empty() && lib.len() < 45,
            "phantom should keep some and exclude some patches, kept {}",
            lib.len()
        );
    }

    #[test]
    fn augmentation_multiplies_counts_and_shares_high() {
        let (hi, masks) = phantom_pair();
        let cfg = sim_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lib4 = augment_library(
            &hi,
            &masks,
            &cfg,
            &SnrPrior::default(),
            4,
            &spec_k4(),
            7,
            &mut rng,
        )
        .unwrap();
        assert_eq!(lib4.len(), lib4.kept_positions * 4);
        assert_eq!(lib4.n_aug, 4);
        assert!(lib4.pairs.iter().all(|p| p.subject_id == 7));

        // pairs sharing an origin across augmentations: identical high,
        // different low
        let first = &lib4.pairs[0];
        let twin = lib4
            .pairs
            .iter()
            .find(|p| p.origin == first.origin && p.augmentation_id == 1)
            .expect("same origin in augmentation 1");
        assert_eq!(first.high, twin.high);
        assert_ne!(first.low, twin.low);
    }

    #[test]
    fn single_augmentation_equals_direct_extraction() {
        let (hi, masks) = phantom_pair();
        let cfg = sim_cfg();
        let prior = SnrPrior::default();
        let lib = augment_library(
            &hi,
            &masks,
            &cfg,
            &prior,
            1,
            &spec_k4(),
            0,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let sim = simulate_low_field(
            &hi,
            &masks,
            &cfg,
            &SnrMode::Sampled(prior),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let direct = extract_tagged(&sim.noisy, &sim.noiseless, &hi, &spec_k4(), 0, 0).unwrap();
        assert_eq!(lib.pairs, direct.pairs);
    }

    #[test]
    fn subsample_rounding_and_determinism() {
        let lo = flat_volume((64, 64, 16), 0.5);
        let hi = flat_volume((64, 64, 64), 0.5);
        let lib = extract_pairs(&lo, &hi, &spec_k4()).unwrap();
        assert_eq!(lib.len(), 45);
        // round_ties_even(45 * 0.125) = round(5.625) = 6
        let sub = subsample(&lib, 0.125, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(sub.len(), 6);
        let sub2 = subsample(&lib, 0.125, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(sub.pairs, sub2.pairs);

        let full = subsample(&lib, 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(full.pairs, lib.pairs);

        assert!(matches!(
            subsample(&lib, 0.0, &mut ChaCha8Rng::seed_from_u64(6)),
            Err(PatchError::BadFraction(_))
        ));
    }

    #[test]
    fn extract_then_assemble_reconstructs() {
        let (hi, _) = phantom_pair();
        let spec = spec_k4();
        // cover the high volume with high-size patches on the covering grid
        let lo_dims = (64, 64, 8);
        let origins = covering_grid(lo_dims, &spec).unwrap();
        let patches: Vec<((usize, usize, usize), Vec<f32>)> = origins
            .iter()
            .map(|&(x, y, z)| {
                let ho = (x, y, spec.k * z);
                (ho, crop(&hi, ho, spec.high_size))
            })
            .collect();
        let out = assemble(&patches, spec.high_size, hi.dims(), hi.spacing()).unwrap();
        for i in 0..hi.voxel_count() {
            assert!((out.data()[i] - hi.data()[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn overlapping_patches_average() {
        let patches = vec![((0, 0, 0), vec![0.0f32; 8]), ((0, 0, 0), vec![2.0f32; 8])];
        let out = assemble(&patches, (2, 2, 2), (2, 2, 2), (1.0, 1.0, 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uncovered_voxel_is_reported() {
        let patches = vec![((0, 0, 0), vec![1.0f32; 8])];
        match assemble(&patches, (2, 2, 2), (4, 2, 2), (1.0, 1.0, 1.0)) {
            Err(PatchError::UncoveredVoxel((x, _, _))) => assert!(x >= 2),
            other => panic!("expected UncoveredVoxel, got {other:?}"),
        }
    }

    #[test]
    fn coverage_counts_match_bruteforce_tally() {
        let spec = spec_k4();
        let lo_dims = (64, 64, 16);
        let origins = covering_grid(lo_dims, &spec).unwrap();
        let high_origins: Vec<(usize, usize, usize)> = origins
            .iter()
            .map(|&(x, y, z)| (x, y, spec.k * z))
            .collect();
        let counts = coverage_counts(&high_origins, spec.high_size, (64, 64, 64));
        // brute force: for each voxel count patches containing it
        let mut expected = vec![0u32; 64 * 64 * 64];
        for (i, e) in expected.iter_mut().enumerate() {
            let x = i % 64;
            let y = (i / 64) % 64;
            let z = i / (64 * 64);
            for &(ox, oy, oz) in &high_origins {
                if x >= ox
                    && x < ox + spec.high_size.0
                    && y >= oy
                    && y < oy + spec.high_size.1
                    && z >= oz
                    && z < oz + spec.high_size.2
                {
                    *e += 1;
                }
            }
        }
        assert_eq!(counts, expected);
    }

    #[test]
    fn library_save_load_roundtrip() {
        let (hi, masks) = phantom_pair();
        let lib = augment_library(
            &hi,
            &masks,
            &sim_cfg(),
            &SnrPrior::default(),
            2,
            &spec_k4(),
            3,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_library(&lib, dir.path()).unwrap();
        let loaded = load_library(dir.path()).unwrap();
        assert_eq!(loaded, lib);
    }
}
