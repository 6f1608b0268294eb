//! Probabilistic decimation simulator: high-field volume in, synthetic
//! low-field volume out.
//!
//! The simulation runs seven steps in order: blur and decimate along z with a
//! Gaussian slice profile, resample the tissue masks the same way, measure the
//! high-field per-tissue SNR, pick a low-field SNR target (fixed or drawn from
//! a bivariate Gaussian prior), rescale tissue intensities by the SNR ratios,
//! and add background noise. The slice profile's FWHM defaults to the slice
//! spacing k*e_z, i.e. sigma = k*e_z/sqrt(8 ln 2); [`FwhmMode::Thickness`]
//! narrows it to model a slice gap.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{TissueMasks, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("truncation must be positive, got {0}")]
    NonPositiveTruncation(f64),
    #[error("kernel must have odd length, got {0}")]
    EvenKernel(usize),
    #[error("nz = {nz} not divisible by decimation factor k = {k}")]
    IndivisibleNz { nz: usize, k: usize },
    #[error("decimation factor k = {0} not in {{2, 4, 8}}")]
    UnsupportedFactor(usize),
    #[error("noise levels must satisfy sigma_x > sigma_y >= 0, got sigma_x={sigma_x}, sigma_y={sigma_y}")]
    NoiseOrder { sigma_x: f64, sigma_y: f64 },
    #[error("sigma_y must be positive to measure SNR, got {0}")]
    SigmaYZero(f64),
    #[error("empty tissue: {0} mask has zero total mass")]
    EmptyTissue(&'static str),
    #[error("SNR prior covariance not symmetric: sigma[0][1]={a}, sigma[1][0]={b}")]
    AsymmetricCovariance { a: f64, b: f64 },
    #[error("SNR prior covariance not positive semi-definite")]
    NotPositiveSemiDefinite,
    #[error("exceeded {0} retries drawing a positive SNR sample")]
    RetryLimit(usize),
    #[error("high-field SNR must be positive, got ({0}, {1})")]
    NonPositiveHighSnr(f64, f64),
    #[error("negative noise level sigma_x = {0}")]
    NegativeNoise(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Bivariate Gaussian prior over the low-field (WM, GM) SNR pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrPrior {
    /// Mean (SNR_WM, SNR_GM).
    pub mu: [f64; 2],
    /// 2x2 covariance, symmetric positive semi-definite.
    pub sigma: [[f64; 2]; 2],
}

impl Default for SnrPrior {
    /// The empirical 0.36T prior.
    fn default() -> Self {
        Self {
            mu: [64.50, 54.14],
            sigma: [[78.47, 71.50], [71.50, 73.91]],
        }
    }
}

const PSD_TOL: f64 = 1e-9;

impl SnrPrior {
    pub fn validate(&self) -> Result<(), SimError> {
        if (self.sigma[0][1] - self.sigma[1][0]).abs() > PSD_TOL {
            return Err(SimError::AsymmetricCovariance {
                a: self.sigma[0][1],
                b: self.sigma[1][0],
            });
        }
        self.cholesky()?;
        Ok(())
    }

    /// Lower-triangular Cholesky factor, tolerating eigenvalues down to -1e-9.
    fn cholesky(&self) -> Result<[[f64; 2]; 2], SimError> {
        let s = &self.sigma;
        if s[0][0] < -PSD_TOL || s[1][1] < -PSD_TOL {
            return Err(SimError::NotPositiveSemiDefinite);
        }
        let l11 = s[0][0].max(0.0).sqrt();
        let l21 = if l11 > 0.0 {
            s[0][1] / l11
        } else {
            if s[0][1].abs() > PSD_TOL {
                return Err(SimError::NotPositiveSemiDefinite);
            }
            0.0
        };
        let rem = s[1][1] - l21 * l21;
        if rem < -PSD_TOL {
            return Err(SimError::NotPositiveSemiDefinite);
        }
        Ok([[l11, 0.0], [l21, rem.max(0.0).sqrt()]])
    }
}

/// One concrete low-field SNR target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSample {
    pub snr_wm: f64,
    pub snr_gm: f64,
}

/// How the slice-profile FWHM relates to the slice spacing k*e_z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FwhmMode {
    /// FWHM = k*e_z (the spacing; sigma = k*e_z/sqrt(8 ln 2)).
    Spacing,
    /// FWHM = ratio * k*e_z; ratio 0.75 reproduces a 2.1 mm thickness on a
    /// 2.8 mm spacing, leaving a slice gap.
    Thickness { ratio: f64 },
}

/// Decimation simulator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Decimation factor along z; one of 2, 4, 8.
    pub k: usize,
    /// Low-field background noise standard deviation.
    pub sigma_x: f64,
    /// High-field background noise standard deviation.
    pub sigma_y: f64,
    pub fwhm_mode: FwhmMode,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            k: 4,
            sigma_x: 0.01,
            sigma_y: 0.001,
            fwhm_mode: FwhmMode::Spacing,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !matches!(self.k, 2 | 4 | 8) {
            return Err(SimError::UnsupportedFactor(self.k));
        }
        if !(self.sigma_x > self.sigma_y && self.sigma_y >= 0.0) {
            return Err(SimError::NoiseOrder {
                sigma_x: self.sigma_x,
                sigma_y: self.sigma_y,
            });
        }
        Ok(())
    }

    /// Slice-profile sigma in mm for an input z spacing of `sz_mm`.
    pub fn profile_sigma_mm(&self, sz_mm: f64) -> f64 {
        let fwhm = match self.fwhm_mode {
            FwhmMode::Spacing => self.k as f64 * sz_mm,
            FwhmMode::Thickness { ratio } => ratio * self.k as f64 * sz_mm,
        };
        fwhm / (8.0 * std::f64::consts::LN_2).sqrt()
    }
}

/// Fixed target (skips the sampling step) or a prior to draw from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrMode {
    Fixed(SnrSample),
    Sampled(SnrPrior),
}

/// Everything one simulator run produces. The noiseless volume feeds the
/// patch background rule; the SNR records feed provenance manifests.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub noisy: Volume3D,
    pub noiseless: Volume3D,
    pub low_masks: TissueMasks,
    pub snr_low: SnrSample,
    pub snr_high: (f64, f64),
}

/// Samples a Gaussian at integer multiples of `spacing_mm`, truncated at
/// `truncation` sigmas per side and renormalized to sum exactly 1. The result
/// has odd length 2*radius + 1 with the peak in the middle.
pub fn gaussian_kernel_1d(
    sigma_mm: f64,
    spacing_mm: f64,
    truncation: f64,
) -> Result<Vec<f64>, SimError> {
    if !(sigma_mm > 0.0) {
        return Err(SimError::NonPositiveSigma(sigma_mm));
    }
    if !(truncation > 0.0) {
        return Err(SimError::NonPositiveTruncation(truncation));
    }
    let radius = (truncation * sigma_mm / spacing_mm).ceil() as usize;
    let mut weights = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as i64)..=(radius as i64) {
        let z = i as f64 * spacing_mm;
        weights.push((-z * z / (2.0 * sigma_mm * sigma_mm)).exp());
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// z offset of an output slice's tap center within its input slab: the slab
/// center (k-1)/2 rounded half-up to an integer, so output slice zp reads
/// input slices around k*zp + offset.
#[inline]
pub fn center_offset(k: usize) -> usize {
    if k % 2 == 0 {
        k / 2
    } else {
        (k - 1) / 2
    }
}

fn filter_decimate_z(
    data: &[f32],
    nx: usize,
    ny: usize,
    nz: usize,
    k: usize,
    kernel: &[f64],
) -> Result<Vec<f32>, SimError> {
    if kernel.len() % 2 == 0 {
        return Err(SimError::EvenKernel(kernel.len()));
    }
    if k == 0 || nz % k != 0 {
        return Err(SimError::IndivisibleNz { nz, k });
    }
    let radius = (kernel.len() - 1) as i64 / 2;
    let nz_out = nz / k;
    let plane = nx * ny;
    let offset = center_offset(k) as i64;
    let mut out = vec![0.0f32; plane * nz_out];
    let mut acc = vec![0.0f64; plane];
    for zp in 0..nz_out {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let z0 = (k * zp) as i64 + offset;
        for (j, &w) in kernel.iter().enumerate() {
            let z = z0 + j as i64 - radius;
            if z < 0 || z >= nz as i64 {
                continue; // zero padding beyond the z boundary
            }
            let src = &data[z as usize * plane..(z as usize + 1) * plane];
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += w * s as f64;
            }
        }
        let dst = &mut out[zp * plane..(zp + 1) * plane];
        for (d, &a) in dst.iter_mut().zip(acc.iter()) {
            *d = a as f32;
        }
    }
    Ok(out)
}

/// Blur-and-decimate along z: output slice `zp` is the kernel-weighted
/// combination of input slices around the slab center, x and y untouched.
/// Output spacing is k*sz; regions beyond the z boundary read as zero.
pub fn downsample_z(v: &Volume3D, k: usize, kernel: &[f64]) -> Result<Volume3D, SimError> {
    let (nx, ny, nz) = v.dims();
    let out = filter_decimate_z(v.data(), nx, ny, nz, k, kernel)?;
    let (sx, sy, sz) = v.spacing();
    Ok(Volume3D::new(
        (nx, ny, nz / k),
        (sx, sy, sz * k as f32),
        out,
    )?)
}

/// Resamples masks with the identical kernel and stride as the image, then
/// renormalizes each voxel back to a partition of unity.
pub fn downsample_masks(m: &TissueMasks, k: usize, kernel: &[f64]) -> Result<TissueMasks, SimError> {
    let (nx, ny, nz) = m.dims();
    let mut wm = filter_decimate_z(m.wm(), nx, ny, nz, k, kernel)?;
    let mut gm = filter_decimate_z(m.gm(), nx, ny, nz, k, kernel)?;
    let mut other = filter_decimate_z(m.other(), nx, ny, nz, k, kernel)?;
    for i in 0..wm.len() {
        let sum = wm[i] as f64 + gm[i] as f64 + other[i] as f64;
        if sum > 1e-12 {
            wm[i] = (wm[i] as f64 / sum).clamp(0.0, 1.0) as f32;
            gm[i] = (gm[i] as f64 / sum).clamp(0.0, 1.0) as f32;
            other[i] = (other[i] as f64 / sum).clamp(0.0, 1.0) as f32;
        } else {
            wm[i] = 0.0;
            gm[i] = 0.0;
            other[i] = 1.0;
        }
    }
    let (sx, sy, sz) = m.spacing();
    Ok(TissueMasks::new(
        (nx, ny, nz / k),
        (sx, sy, sz * k as f32),
        wm,
        gm,
        other,
    )?)
}

/// Per-tissue SNR: mask-weighted mean intensity over `sigma_y`, for WM and GM.
pub fn compute_snr(
    v: &Volume3D,
    m: &TissueMasks,
    sigma_y: f64,
) -> Result<(f64, f64), SimError> {
    if !(sigma_y > 0.0) {
        return Err(SimError::SigmaYZero(sigma_y));
    }
    m.check_grid(v)?;
    let mut num = [0.0f64; 2];
    let mut den = [0.0f64; 2];
    let data = v.data();
    for (i, (&w, &g)) in m.wm().iter().zip(m.gm()).enumerate() {
        let y = data[i] as f64;
        num[0] += w as f64 * y;
        den[0] += w as f64;
        num[1] += g as f64 * y;
        den[1] += g as f64;
    }
    if den[0] <= 0.0 {
        return Err(SimError::EmptyTissue("WM"));
    }
    if den[1] <= 0.0 {
        return Err(SimError::EmptyTissue("GM"));
    }
    Ok((num[0] / (sigma_y * den[0]), num[1] / (sigma_y * den[1])))
}

const SNR_RETRY_LIMIT: usize = 100;

/// Draws (SNR_WM, SNR_GM) from the prior via its Cholesky factor, redrawing
/// (up to 100 times) while either component is <= 1.
pub fn sample_snr(prior: &SnrPrior, rng: &mut impl Rng) -> Result<SnrSample, SimError> {
    let l = prior.cholesky()?;
    for _ in 0..SNR_RETRY_LIMIT {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let snr_wm = prior.mu[0] + l[0][0] * z1;
        let snr_gm = prior.mu[1] + l[1][0] * z1 + l[1][1] * z2;
        if snr_wm > 1.0 && snr_gm > 1.0 {
            return Ok(SnrSample { snr_wm, snr_gm });
        }
    }
    Err(SimError::RetryLimit(SNR_RETRY_LIMIT))
}

/// Rescales per-tissue intensity by l_j = SNR_low_j / SNR_high_j, with
/// l_other = 1: out = (l_wm*M_wm + l_gm*M_gm + M_other) * in.
pub fn contrast_transfer(
    v: &Volume3D,
    m: &TissueMasks,
    snr_low: &SnrSample,
    snr_high: (f64, f64),
) -> Result<Volume3D, SimError> {
    if !(snr_high.0 > 0.0 && snr_high.1 > 0.0) {
        return Err(SimError::NonPositiveHighSnr(snr_high.0, snr_high.1));
    }
    m.check_grid(v)?;
    let l_wm = snr_low.snr_wm / snr_high.0;
    let l_gm = snr_low.snr_gm / snr_high.1;
    let mut out = Vec::with_capacity(v.voxel_count());
    let data = v.data();
    for i in 0..data.len() {
        let scale =
            l_wm * m.wm()[i] as f64 + l_gm * m.gm()[i] as f64 + m.other()[i] as f64;
        out.push((scale * data[i] as f64) as f32);
    }
    Ok(Volume3D::new(v.dims(), v.spacing(), out)?)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma_x` per voxel.
pub fn add_noise(v: &Volume3D, sigma_x: f64, rng: &mut impl Rng) -> Result<Volume3D, SimError> {
    if sigma_x < 0.0 {
        return Err(SimError::NegativeNoise(sigma_x));
    }
    if sigma_x == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma_x).expect("sigma_x validated");
    let data: Vec<f32> = v
        .data()
        .iter()
        .map(|&x| (x as f64 + normal.sample(rng)) as f32)
        .collect();
    Ok(Volume3D::new(v.dims(), v.spacing(), data)?)
}

/// Runs the full simulation on a skull-stripped high-field volume and its
/// masks. Fixed mode uses the given SNR target; sampled mode draws one from
/// the prior. Deterministic given the rng state.
pub fn simulate_low_field(
    y: &Volume3D,
    m: &TissueMasks,
    cfg: &SimConfig,
    mode: &SnrMode,
    rng: &mut impl Rng,
) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    m.check_grid(y)?;
    let sigma_mm = cfg.profile_sigma_mm(y.spacing().2 as f64);
    let kernel = gaussian_kernel_1d(sigma_mm, y.spacing().2 as f64, 3.0)?;

    let y_down = downsample_z(y, cfg.k, &kernel)?;
    let m_down = downsample_masks(m, cfg.k, &kernel)?;
    let snr_high = compute_snr(&y_down, &m_down, cfg.sigma_y)?;
    let snr_low = match mode {
        SnrMode::Fixed(sample) => *sample,
        SnrMode::Sampled(prior) => sample_snr(prior, rng)?,
    };
    let noiseless = contrast_transfer(&y_down, &m_down, &snr_low, snr_high)?;
    let noisy = add_noise(&noiseless, cfg.sigma_x, rng)?;
    Ok(SimOutput {
        noisy,
        noiseless,
        low_masks: m_down,
        snr_low,
        snr_high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_normalized_and_symmetric() {
        for (sigma, spacing) in [(0.5, 0.7), (1.19, 0.7), (3.0, 1.0)] {
            let k = gaussian_kernel_1d(sigma, spacing, 3.0).unwrap();
            assert_eq!(k.len() % 2, 1);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            for i in 0..k.len() / 2 {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn profile_sigma_matches_fwhm_formula() {
        // oracle: sigma = k*e_z/sqrt(8 ln 2), evaluated independently
        let cfg = SimConfig {
            k: 4,
            ..SimConfig::default()
        };
        let sigma = cfg.profile_sigma_mm(0.7);
        let oracle = 4.0 * 0.7 / (8.0 * std::f64::consts::LN_2).sqrt();
        assert!((sigma - oracle).abs() < 1e-15);
        assert!((sigma - 1.1890505204032267).abs() < 1e-12);

        // thickness 0.75 reproduces a 2.1 mm FWHM on the 2.8 mm spacing
        let thick = SimConfig {
            k: 4,
            fwhm_mode: FwhmMode::Thickness { ratio: 0.75 },
            ..SimConfig::default()
        };
        let fwhm = thick.profile_sigma_mm(0.7) * (8.0 * std::f64::consts::LN_2).sqrt();
        assert!((fwhm - 2.1).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_concentrates_center_weight() {
        let k = gaussian_kernel_1d(0.01, 1.0, 3.0).unwrap();
        let center = k[k.len() / 2];
        assert!(center > 0.999, "center weight {center}");
    }

    #[test]
    fn kernel_rejects_bad_sigma() {
        assert!(matches!(
            gaussian_kernel_1d(0.0, 1.0, 3.0),
            Err(SimError::NonPositiveSigma(_))
        ));
        assert!(matches!(
            gaussian_kernel_1d(-1.0, 1.0, 3.0),
            Err(SimError::NonPositiveSigma(_))
        ));
    }

    fn ramp_volume(nx: usize, ny: usize, nz: usize) -> Volume3D {
        Volume3D::from_fn((nx, ny, nz), (1.0, 1.0, 1.0), |_, _, iz| iz as f32).unwrap()
    }

    #[test]
    fn delta_kernel_decimates_exactly() {
        let v = ramp_volume(2, 2, 4);
        let out = downsample_z(&v, 2, &[1.0]).unwrap();
        assert_eq!(out.dims(), (2, 2, 2));
        // center offset for k=2 is 1: slices 1 and 3 survive
        assert_eq!(out.get(0, 0, 0), 1.0);
        assert_eq!(out.get(1, 1, 1), 3.0);
    }

    #[test]
    fn constant_volume_stays_constant_interior() {
        let v = Volume3D::filled((4, 4, 32), (1.0, 1.0, 1.0), 3.5).unwrap();
        let kernel = gaussian_kernel_1d(1.19, 1.0, 3.0).unwrap();
        let radius = kernel.len() / 2;
        let out = downsample_z(&v, 4, &kernel).unwrap();
        for zp in 0..8 {
            let z0 = 4 * zp + 2;
            if z0 >= radius && z0 + radius < 32 {
                assert!((out.get(2, 2, zp) - 3.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ramp_preserved_at_slab_centers() {
        // symmetric kernels reproduce affine signals at the tap center;
        // oracle: direct convolution sum_j w_j * (z0 + j) = z0
        let v = ramp_volume(3, 3, 32);
        let kernel = gaussian_kernel_1d(1.19, 1.0, 3.0).unwrap();
        let radius = kernel.len() / 2;
        let out = downsample_z(&v, 4, &kernel).unwrap();
        for zp in 0..8 {
            let z0 = 4 * zp + 2;
            if z0 >= radius && z0 + radius < 32 {
                let direct: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, &w)| w * (z0 + j - radius) as f64)
                    .sum();
                assert!((direct - z0 as f64).abs() < 1e-12);
                assert!(
                    (out.get(1, 1, zp) as f64 - z0 as f64).abs() < 1e-6,
                    "slice {zp}: {} vs {z0}",
                    out.get(1, 1, zp)
                );
            }
        }
    }

    #[test]
    fn spacing_scales_by_k() {
        let v = Volume3D::zeros((4, 4, 32), (0.7, 0.7, 0.7)).unwrap();
        let out = downsample_z(&v, 4, &[1.0]).unwrap();
        assert_eq!(out.dims(), (4, 4, 8));
        assert!((out.spacing().2 - 2.8).abs() < 1e-6);
    }

    #[test]
    fn indivisible_nz_rejected() {
        let v = Volume3D::zeros((2, 2, 10), (1.0, 1.0, 1.0)).unwrap();
        assert!(matches!(
            downsample_z(&v, 4, &[1.0]),
            Err(SimError::IndivisibleNz { nz: 10, k: 4 })
        ));
    }

    fn slab_masks(nx: usize, ny: usize, nz: usize, boundary: usize) -> TissueMasks {
        // WM below `boundary`, GM above, no other
        let n = nx * ny * nz;
        let mut wm = vec![0.0f32; n];
        let mut gm = vec![0.0f32; n];
        for iz in 0..nz {
            for i in 0..nx * ny {
                if iz < boundary {
                    wm[iz * nx * ny + i] = 1.0;
                } else {
                    gm[iz * nx * ny + i] = 1.0;
                }
            }
        }
        TissueMasks::new((nx, ny, nz), (1.0, 1.0, 1.0), wm, gm, vec![0.0; n]).unwrap()
    }

    #[test]
    fn constant_masks_unchanged() {
        let n = 2 * 2 * 8;
        let m = TissueMasks::new(
            (2, 2, 8),
            (1.0, 1.0, 1.0),
            vec![0.2; n],
            vec![0.3; n],
            vec![0.5; n],
        )
        .unwrap();
        let kernel = gaussian_kernel_1d(0.6, 1.0, 3.0).unwrap();
        let out = downsample_masks(&m, 2, &kernel).unwrap();
        for i in 0..out.voxel_count() {
            assert!((out.wm()[i] - 0.2).abs() < 1e-6);
            assert!((out.gm()[i] - 0.3).abs() < 1e-6);
            assert!((out.other()[i] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn downsampled_masks_partition_unity() {
        let m = slab_masks(2, 2, 16, 7);
        let kernel = gaussian_kernel_1d(1.19, 1.0, 3.0).unwrap();
        let out = downsample_masks(&m, 4, &kernel).unwrap();
        for i in 0..out.voxel_count() {
            let sum = out.wm()[i] + out.gm()[i] + out.other()[i];
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn boundary_voxel_gets_kernel_mass_split() {
        // direct convolution of the indicator as oracle
        let m = slab_masks(1, 1, 16, 7);
        let kernel = gaussian_kernel_1d(1.19, 1.0, 3.0).unwrap();
        let radius = kernel.len() as i64 / 2;
        let out = downsample_masks(&m, 4, &kernel).unwrap();
        for zp in 0..4usize {
            let z0 = (4 * zp + 2) as i64;
            let mut wm_mass = 0.0;
            let mut total = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let z = z0 + j as i64 - radius;
                if (0..16).contains(&z) {
                    total += w;
                    if z < 7 {
                        wm_mass += w;
                    }
                }
            }
            let expected = wm_mass / total;
            assert!(
                (out.wm()[zp] as f64 - expected).abs() < 1e-6,
                "slice {zp}: {} vs {expected}",
                out.wm()[zp]
            );
        }
    }

    #[test]
    fn snr_of_uniform_tissue() {
        let m = slab_masks(4, 4, 8, 4);
        let v = Volume3D::filled((4, 4, 8), (1.0, 1.0, 1.0), 0.82).unwrap();
        let (snr_wm, snr_gm) = compute_snr(&v, &m, 0.01).unwrap();
        // the stored intensity is the f32 nearest to 0.82
        let expected = 0.82f32 as f64 / 0.01;
        assert!((snr_wm - expected).abs() < 1e-9);
        assert!((snr_gm - expected).abs() < 1e-9);
        assert!((snr_wm - 82.0).abs() < 1e-5);
    }

    #[test]
    fn snr_is_homogeneous_in_intensity() {
        let m = slab_masks(4, 4, 8, 4);
        let v = Volume3D::from_fn((4, 4, 8), (1.0, 1.0, 1.0), |ix, iy, iz| {
            0.1 + 0.05 * (ix + 2 * iy + 3 * iz) as f32
        })
        .unwrap();
        let (a_wm, a_gm) = compute_snr(&v, &m, 0.01).unwrap();
        let doubled = v.map(|x| 2.0 * x).unwrap();
        let (b_wm, b_gm) = compute_snr(&doubled, &m, 0.01).unwrap();
        assert!((b_wm - 2.0 * a_wm).abs() < 1e-9 * a_wm.abs());
        assert!((b_gm - 2.0 * a_gm).abs() < 1e-9 * a_gm.abs());
    }

    #[test]
    fn snr_empty_tissue_is_named() {
        let n = 4 * 4 * 8;
        let m = TissueMasks::new(
            (4, 4, 8),
            (1.0, 1.0, 1.0),
            vec![0.0; n],
            vec![0.5; n],
            vec![0.5; n],
        )
        .unwrap();
        let v = Volume3D::filled((4, 4, 8), (1.0, 1.0, 1.0), 1.0).unwrap();
        match compute_snr(&v, &m, 0.01) {
            Err(SimError::EmptyTissue(t)) => assert_eq!(t, "WM"),
            other => panic!("expected EmptyTissue, got {other:?}"),
        }
        assert!(matches!(
            compute_snr(&v, &m, 0.0),
            Err(SimError::SigmaYZero(_))
        ));
    }

    #[test]
    fn degenerate_prior_returns_mu() {
        let prior = SnrPrior {
            mu: [64.50, 54.14],
            sigma: [[0.0, 0.0], [0.0, 0.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_snr(&prior, &mut rng).unwrap();
        assert_eq!(s.snr_wm, 64.50);
        assert_eq!(s.snr_gm, 54.14);
    }

    #[test]
    fn sampling_is_deterministic() {
        let prior = SnrPrior::default();
        let a = sample_snr(&prior, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_snr(&prior, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_moments_match_prior() {
        let prior = SnrPrior::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let s = sample_snr(&prior, &mut rng).unwrap();
            sum[0] += s.snr_wm;
            sum[1] += s.snr_gm;
            samples.push(s);
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        assert!((mean[0] - 64.50).abs() < 0.5, "mean wm {}", mean[0]);
        assert!((mean[1] - 54.14).abs() < 0.5, "mean gm {}", mean[1]);
        let mut cov = [[0.0f64; 2]; 2];
        for s in &samples {
            let d = [s.snr_wm - mean[0], s.snr_gm - mean[1]];
            cov[0][0] += d[0] * d[0];
            cov[0][1] += d[0] * d[1];
            cov[1][1] += d[1] * d[1];
        }
        cov[0][0] /= n as f64;
        cov[0][1] /= n as f64;
        cov[1][1] /= n as f64;
        assert!((cov[0][0] - 78.47).abs() < 0.05 * 78.47, "cov00 {}", cov[0][0]);
        assert!((cov[0][1] - 71.50).abs() < 0.05 * 71.50, "cov01 {}", cov[0][1]);
        assert!((cov[1][1] - 73.91).abs() < 0.05 * 73.91, "cov11 {}", cov[1][1]);
    }

    #[test]
    fn invalid_priors_rejected() {
        let asym = SnrPrior {
            mu: [1.0, 1.0],
            sigma: [[1.0, 0.5], [0.2, 1.0]],
        };
        assert!(matches!(
            asym.validate(),
            Err(SimError::AsymmetricCovariance { .. })
        ));
        let non_psd = SnrPrior {
            mu: [1.0, 1.0],
            sigma: [[1.0, 2.0], [2.0, 1.0]],
        };
        assert!(matches!(
            non_psd.validate(),
            Err(SimError::NotPositiveSemiDefinite)
        ));
    }

    fn binary_tissue_setup() -> (Volume3D, TissueMasks) {
        let m = slab_masks(4, 4, 8, 4);
        let v = Volume3D::from_fn((4, 4, 8), (1.0, 1.0, 1.0), |_, _, iz| {
            if iz < 4 {
                0.82
            } else {
                0.64
            }
        })
        .unwrap();
        (v, m)
    }

    #[test]
    fn identity_ratios_leave_volume_unchanged() {
        let (v, m) = binary_tissue_setup();
        let (snr_wm, snr_gm) = compute_snr(&v, &m, 0.01).unwrap();
        let out = contrast_transfer(
            &v,
            &m,
            &SnrSample { snr_wm, snr_gm },
            (snr_wm, snr_gm),
        )
        .unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn half_snr_halves_tissue_voxels() {
        let (v, m) = binary_tissue_setup();
        let out = contrast_transfer(
            &v,
            &m,
            &SnrSample {
                snr_wm: 61.0,
                snr_gm: 53.0,
            },
            (122.0, 106.0),
        )
        .unwrap();
        for i in 0..v.voxel_count() {
            assert!((out.data()[i] - 0.5 * v.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pure_other_voxels_unchanged() {
        let n = 2 * 2 * 2;
        let m = TissueMasks::new(
            (2, 2, 2),
            (1.0, 1.0, 1.0),
            vec![0.0; n],
            vec![0.0; n],
            vec![1.0; n],
        )
        .unwrap();
        let v = Volume3D::filled((2, 2, 2), (1.0, 1.0, 1.0), 0.37).unwrap();
        let out = contrast_transfer(
            &v,
            &m,
            &SnrSample {
                snr_wm: 10.0,
                snr_gm: 10.0,
            },
            (100.0, 100.0),
        )
        .unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn contrast_transfer_is_linear_in_intensity() {
        let (v, m) = binary_tissue_setup();
        let low = SnrSample {
            snr_wm: 61.0,
            snr_gm: 53.0,
        };
        let high = (120.0, 90.0);
        let a = contrast_transfer(&v, &m, &low, high).unwrap();
        let scaled = v.map(|x| 3.0 * x).unwrap();
        let b = contrast_transfer(&scaled, &m, &low, high).unwrap();
        for i in 0..a.voxel_count() {
            assert!((b.data()[i] - 3.0 * a.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn nonpositive_high_snr_rejected() {
        let (v, m) = binary_tissue_setup();
        let low = SnrSample {
            snr_wm: 61.0,
            snr_gm: 53.0,
        };
        assert!(matches!(
            contrast_transfer(&v, &m, &low, (0.0, 10.0)),
            Err(SimError::NonPositiveHighSnr(..))
        ));
    }

    #[test]
    fn zero_noise_is_identity() {
        let v = Volume3D::filled((3, 3, 3), (1.0, 1.0, 1.0), 0.5).unwrap();
        let out = add_noise(&v, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn noise_std_calibrated() {
        // Monte-Carlo std check over 10^6 voxels
        let v = Volume3D::zeros((100, 100, 100), (1.0, 1.0, 1.0)).unwrap();
        let out = add_noise(&v, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s = crate::volume::stats(&out, 1e-6);
        assert!(s.std >= 0.0995 && s.std <= 0.1005, "std {}", s.std);
    }

    #[test]
    fn noise_differs_across_seeds() {
        let v = Volume3D::zeros((4, 4, 4), (1.0, 1.0, 1.0)).unwrap();
        let a = add_noise(&v, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = add_noise(&v, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.data(), b.data());
    }

    fn closed_loop_cfg() -> SimConfig {
        SimConfig {
            k: 4,
            sigma_x: 0.02,
            sigma_y: 0.01,
            fwhm_mode: FwhmMode::Spacing,
            seed: 0,
        }
    }

    #[test]
    fn simulate_shape_contract() {
        let (y, m) = generate_phantom(&PhantomConfig {
            dims: (16, 16, 32),
            ..PhantomConfig::default()
        })
        .unwrap();
        let out = simulate_low_field(
            &y,
            &m,
            &closed_loop_cfg(),
            &SnrMode::Fixed(SnrSample {
                snr_wm: 61.0,
                snr_gm: 53.0,
            }),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.noisy.dims(), (16, 16, 8));
        assert!((out.noisy.spacing().2 - 4.0 * 0.7).abs() < 1e-6);
    }

    #[test]
    fn snr_closed_loop_on_phantom() {
        // measuring the simulated low-field volume with the same sigma_y
        // normalizer reproduces the fixed target (exact for binary masks)
        let (y, m) = generate_phantom(&PhantomConfig {
            dims: (48, 48, 32),
            boundary_softness_mm: 0.2,
            ..PhantomConfig::default()
        })
        .unwrap();
        let cfg = closed_loop_cfg();
        let target = SnrSample {
            snr_wm: 61.0,
            snr_gm: 53.0,
        };
        let out = simulate_low_field(
            &y,
            &m,
            &cfg,
            &SnrMode::Fixed(target),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let (wm, gm) = compute_snr(&out.noisy, &out.low_masks, cfg.sigma_y).unwrap();
        assert!((wm - 61.0).abs() / 61.0 < 0.05, "wm {wm}");
        assert!((gm - 53.0).abs() / 53.0 < 0.05, "gm {gm}");
    }

    #[test]
    fn sampled_mode_varies_low_field_only() {
        let (y, m) = generate_phantom(&PhantomConfig {
            dims: (16, 16, 16),
            ..PhantomConfig::default()
        })
        .unwrap();
        let cfg = SimConfig {
            k: 2,
            ..closed_loop_cfg()
        };
        let mode = SnrMode::Sampled(SnrPrior::default());
        let a = simulate_low_field(&y, &m, &cfg, &mode, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let b = simulate_low_field(&y, &m, &cfg, &mode, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        assert_ne!(a.noisy.data(), b.noisy.data());
        assert_ne!(a.snr_low, b.snr_low);
        assert_eq!(a.snr_high, b.snr_high);
    }

    #[test]
    fn simulation_bitwise_deterministic() {
        let (y, m) = generate_phantom(&PhantomConfig {
            dims: (16, 16, 16),
            ..PhantomConfig::default()
        })
        .unwrap();
        let cfg = SimConfig {
            k: 2,
            ..closed_loop_cfg()
        };
        let mode = SnrMode::Sampled(SnrPrior::default());
        let a = simulate_low_field(&y, &m, &cfg, &mode, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let b = simulate_low_field(&y, &m, &cfg, &mode, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!(a.noisy.data(), b.noisy.data());
    }

    #[test]
    fn config_validation() {
        let bad_k = SimConfig {
            k: 3,
            ..SimConfig::default()
        };
        assert!(matches!(bad_k.validate(), Err(SimError::UnsupportedFactor(3))));
        let bad_noise = SimConfig {
            sigma_x: 0.001,
            sigma_y: 0.01,
            ..SimConfig::default()
        };
        assert!(matches!(bad_noise.validate(), Err(SimError::NoiseOrder { .. })));
    }
}
