//! Synthetic skull-stripped brain phantoms.
//!
//! Each phantom is a pair of nested ellipsoids: a bright WM core inside a GM
//! shell, zero background outside, with sigmoid-softened probabilistic masks
//! and optional small lesions at the GM-WM junction. These stand in for real
//! high-field subjects so the whole pipeline can run at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seed::item_seed;
use crate::volume::{TissueMasks, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("wm_intensity must exceed gm_intensity > 0, got wm={wm}, gm={gm}")]
    IntensityOrder { wm: f32, gm: f32 },
    #[error("dims must be at least 16 per axis, got {0:?}")]
    DimsTooSmall((usize, usize, usize)),
    #[error("boundary_softness_mm must be positive, got {0}")]
    NonPositiveSoftness(f32),
    #[error("spacing_mm must be positive, got {0}")]
    NonPositiveSpacing(f32),
    #[error("dims {0:?} too small to contain both tissue shells")]
    ShellsDoNotFit((usize, usize, usize)),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Configuration for one synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Isotropic voxel spacing in mm.
    pub spacing_mm: f32,
    pub wm_intensity: f32,
    pub gm_intensity: f32,
    /// Sigmoid scale of the tissue boundaries, in mm.
    pub boundary_softness_mm: f32,
    pub lesion_count: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: (64, 64, 64),
            spacing_mm: 0.7,
            // plausible T1w contrast on a [0,1] scale; free parameters
            wm_intensity: 0.82,
            gm_intensity: 0.64,
            boundary_softness_mm: 0.7,
            lesion_count: 0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.wm_intensity > self.gm_intensity && self.gm_intensity > 0.0) {
            return Err(PhantomError::IntensityOrder {
                wm: self.wm_intensity,
                gm: self.gm_intensity,
            });
        }
        let (nx, ny, nz) = self.dims;
        if nx < 16 || ny < 16 || nz < 16 {
            return Err(PhantomError::DimsTooSmall(self.dims));
        }
        if !(self.boundary_softness_mm > 0.0) {
            return Err(PhantomError::NonPositiveSoftness(self.boundary_softness_mm));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(PhantomError::NonPositiveSpacing(self.spacing_mm));
        }
        Ok(())
    }
}

/// Half-width of the boundary transition in sigmoid scales. Outside it the
/// indicator is exactly 0 or 1, keeping the background bit-exactly zero.
const SIGMOID_SUPPORT: f64 = 3.0;

/// Sigmoid-shaped soft indicator with compact support: 1 deep inside, 0 well
/// outside, a cubic smoothstep in between with the same center slope (1/4 per
/// scale) as the logistic.
#[inline]
fn soft_inside(signed_dist_mm: f64, softness_mm: f64) -> f64 {
    let t = signed_dist_mm / softness_mm;
    if t >= SIGMOID_SUPPORT {
        0.0
    } else if t <= -SIGMOID_SUPPORT {
        1.0
    } else {
        let u = (SIGMOID_SUPPORT - t) / (2.0 * SIGMOID_SUPPORT);
        u * u * (3.0 - 2.0 * u)
    }
}

/// Axis-aligned ellipsoid in physical coordinates.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// First-order signed distance in mm, negative inside (exact for spheres).
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let mut rho2 = 0.0;
        let mut grad2 = 0.0;
        for i in 0..3 {
            let d = p[i] - self.center[i];
            let a = self.semi_axes[i];
            rho2 += (d / a) * (d / a);
            grad2 += d * d / (a * a * a * a);
        }
        let rho = rho2.sqrt();
        if rho < 1e-9 {
            return -self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        (rho - 1.0) * rho / grad2.sqrt()
    }
}

struct Geometry {
    outer: Ellipsoid,
    wm: Ellipsoid,
    lesions: Vec<Ellipsoid>,
    lesion_intensity: f64,
}

fn derive_geometry(cfg: &PhantomConfig) -> Result<Geometry, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sp = cfg.spacing_mm as f64;
    let extent = [
        cfg.dims.0 as f64 * sp,
        cfg.dims.1 as f64 * sp,
        cfg.dims.2 as f64 * sp,
    ];
    let center = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];

    let mut outer_axes = [0.0; 3];
    for (i, a) in outer_axes.iter_mut().enumerate() {
        *a = 0.42 * extent[i] * rng.gen_range(0.90..1.0);
    }
    let wm_scale = rng.gen_range(0.56..0.66);
    let wm_axes = [
        outer_axes[0] * wm_scale,
        outer_axes[1] * wm_scale,
        outer_axes[2] * wm_scale,
    ];

    let min_wm = wm_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_gap = (0..3)
        .map(|i| outer_axes[i] - wm_axes[i])
        .fold(f64::INFINITY, f64::min);
    if min_wm < 1.5 * sp || min_gap < 1.5 * sp {
        return Err(PhantomError::ShellsDoNotFit(cfg.dims));
    }

    let outer = Ellipsoid {
        center,
        semi_axes: outer_axes,
    };
    let wm = Ellipsoid {
        center,
        semi_axes: wm_axes,
    };

    let mut lesions = Vec::with_capacity(cfg.lesion_count);
    for _ in 0..cfg.lesion_count {
        // a point on the WM surface: lesions sit at the GM-WM junction
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let cos_theta: f64 = rng.gen_range(-1.0..1.0);
        let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
        let dir = [sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta];
        let lesion_center = [
            center[0] + wm_axes[0] * dir[0],
            center[1] + wm_axes[1] * dir[1],
            center[2] + wm_axes[2] * dir[2],
        ];
        let r = rng.gen_range(1.5..3.0);
        lesions.push(Ellipsoid {
            center: lesion_center,
            semi_axes: [
                r * rng.gen_range(0.8..1.2),
                r * rng.gen_range(0.8..1.2),
                r * rng.gen_range(0.8..1.2),
            ],
        });
    }

    Ok(Geometry {
        outer,
        wm,
        lesions,
        lesion_intensity: 0.5 * (cfg.wm_intensity as f64 + cfg.gm_intensity as f64),
    })
}

/// Generates one subject: a T1w-like volume plus probabilistic WM/GM/other
/// masks (partition of unity by construction, background exactly zero).
/// Bitwise deterministic per seed.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume3D, TissueMasks), PhantomError> {
    cfg.validate()?;
    let geo = derive_geometry(cfg)?;
    let (nx, ny, nz) = cfg.dims;
    let sp = cfg.spacing_mm as f64;
    let softness = cfg.boundary_softness_mm as f64;
    let wm_int = cfg.wm_intensity as f64;
    let gm_int = cfg.gm_intensity as f64;

    let n = nx * ny * nz;
    let mut intensity = Vec::with_capacity(n);
    let mut wm_ch = Vec::with_capacity(n);
    let mut gm_ch = Vec::with_capacity(n);
    let mut other_ch = Vec::with_capacity(n);

    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = [
                    (ix as f64 + 0.5) * sp,
                    (iy as f64 + 0.5) * sp,
                    (iz as f64 + 0.5) * sp,
                ];
                let in_outer = soft_inside(geo.outer.signed_distance(p), softness);
                let in_wm = soft_inside(geo.wm.signed_distance(p), softness);
                let m_wm = in_wm * in_outer;
                let m_gm = (1.0 - in_wm) * in_outer;
                let m_other = 1.0 - in_outer;

                let mut value = wm_int * m_wm + gm_int * m_gm;
                for lesion in &geo.lesions {
                    let l = soft_inside(lesion.signed_distance(p), softness) * in_outer;
                    value = value * (1.0 - l) + geo.lesion_intensity * l;
                }

                intensity.push(value as f32);
                wm_ch.push(m_wm as f32);
                gm_ch.push(m_gm as f32);
                other_ch.push(m_other as f32);
            }
        }
    }

    let spacing = (cfg.spacing_mm, cfg.spacing_mm, cfg.spacing_mm);
    let volume = Volume3D::new(cfg.dims, spacing, intensity)?;
    let masks = TissueMasks::new(cfg.dims, spacing, wm_ch, gm_ch, other_ch)?;
    Ok((volume, masks))
}

/// The per-subject configuration used by [`generate_cohort`]: intensities are
/// jittered around the base config and the subject gets its own derived seed.
pub fn cohort_member_config(base: &PhantomConfig, cohort_seed: u64, index: usize) -> PhantomConfig {
    let member_seed = item_seed(cohort_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
    let wm = base.wm_intensity * rng.gen_range(0.96..1.04);
    let gm = base.gm_intensity * rng.gen_range(0.96..1.04);
    PhantomConfig {
        wm_intensity: wm,
        gm_intensity: gm,
        seed: member_seed,
        ..base.clone()
    }
}

/// Generates `n_subjects` pairwise-distinct subjects around `base`;
/// reproducible per seed.
pub fn generate_cohort(
    n_subjects: usize,
    base: &PhantomConfig,
    seed: u64,
) -> Result<Vec<(Volume3D, TissueMasks)>, PhantomError> {
    base.validate()?;
    (0..n_subjects)
        .map(|i| generate_phantom(&cohort_member_config(base, seed, i)))
        .collect()
}
