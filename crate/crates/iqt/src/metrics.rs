//! Image quality metrics and the paired statistical test used to compare
//! methods: PSNR, mean SSIM over a 3D Gaussian window, and the two-tailed
//! Wilcoxon signed-rank test (exact for small samples, normal approximation
//! with tie and continuity corrections beyond).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::volume::Volume3D;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: reference {0:?} vs test {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("peak must be positive, got {0}")]
    NonPositivePeak(f64),
    #[error("volume dims {dims:?} smaller than the {window}-tap SSIM window")]
    VolumeTooSmall {
        dims: (usize, usize, usize),
        window: usize,
    },
    #[error("SSIM window must have odd tap count, got {0}")]
    EvenWindow(usize),
    #[error("SSIM constants k1, k2 must be positive, got ({0}, {1})")]
    NonPositiveK(f64, f64),
    #[error("reference volume has zero dynamic range and volumes differ")]
    ConstantReference,
    #[error("sample length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no nonzero differences between the samples")]
    AllZeroDifferences,
    #[error("need at least 5 nonzero differences, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite value in sample at index {0}")]
    NonFinite(usize),
}

/// PSNR peak: the reference maximum, or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", content = "value")]
pub enum Peak {
    Auto,
    Value(f64),
}

/// SSIM dynamic range L: the reference max minus min, or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", content = "value")]
pub enum DynamicRange {
    Auto,
    Value(f64),
}

/// SSIM parameters; defaults are the reference-implementation constants with
/// the 11-tap sigma-1.5 Gaussian window extended separably to 3D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_taps: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: DynamicRange,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_taps: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: DynamicRange::Auto,
        }
    }
}

/// Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE) with the MSE
/// taken over the whole volume. Identical volumes return +infinity.
pub fn psnr(reference: &Volume3D, test: &Volume3D, peak: Peak) -> Result<f64, MetricsError> {
    if reference.dims() != test.dims() {
        return Err(MetricsError::DimMismatch(reference.dims(), test.dims()));
    }
    let peak = match peak {
        Peak::Auto => reference.data().iter().cloned().fold(f32::MIN, f32::max) as f64,
        Peak::Value(p) => p,
    };
    if !(peak > 0.0) {
        return Err(MetricsError::NonPositivePeak(peak));
    }
    let mut sq = 0.0f64;
    for (&r, &t) in reference.data().iter().zip(test.data()) {
        let d = r as f64 - t as f64;
        sq += d * d;
    }
    let mse = sq / reference.voxel_count() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1D Gaussian window of `taps` samples.
fn ssim_window(taps: usize, sigma: f64) -> Vec<f64> {
    let radius = (taps / 2) as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// In-place-free separable convolution along one axis with zero padding.
/// Axis: 0 = x, 1 = y, 2 = z.
fn conv_axis(data: &[f64], dims: (usize, usize, usize), w: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let radius = (w.len() / 2) as i64;
    let mut out = vec![0.0f64; data.len()];
    let (stride, len) = match axis {
        0 => (1usize, nx),
        1 => (nx, ny),
        _ => (nx * ny, nz),
    };
    // iterate over all lines along `axis`
    let lines: Vec<(usize, usize)> = match axis {
        0 => (0..ny * nz).map(|i| (i * nx, 0)).collect(),
        1 => (0..nz)
            .flat_map(|z| (0..nx).map(move |x| (z * nx * ny + x, 0)))
            .collect(),
        _ => (0..nx * ny).map(|i| (i, 0)).collect(),
    };
    for (base, _) in lines {
        for i in 0..len {
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let p = i as i64 + j as i64 - radius;
                if p >= 0 && (p as usize) < len {
                    acc += wj * data[base + p as usize * stride];
                }
            }
            out[base + i * stride] = acc;
        }
    }
    out
}

fn gaussian_blur_3d(data: &[f64], dims: (usize, usize, usize), w: &[f64]) -> Vec<f64> {
    let x = conv_axis(data, dims, w, 0);
    let y = conv_axis(&x, dims, w, 1);
    conv_axis(&y, dims, w, 2)
}

/// Mean SSIM over all fully-windowed voxels, computed with separable
/// Gaussian-weighted local moments in f64.
pub fn mssim(
    reference: &Volume3D,
    test: &Volume3D,
    params: &SsimParams,
) -> Result<f64, MetricsError> {
    if reference.dims() != test.dims() {
        return Err(MetricsError::DimMismatch(reference.dims(), test.dims()));
    }
    if params.window_taps % 2 == 0 {
        return Err(MetricsError::EvenWindow(params.window_taps));
    }
    if !(params.k1 > 0.0 && params.k2 > 0.0) {
        return Err(MetricsError::NonPositiveK(params.k1, params.k2));
    }
    let (nx, ny, nz) = reference.dims();
    let taps = params.window_taps;
    if nx < taps || ny < taps || nz < taps {
        return Err(MetricsError::VolumeTooSmall {
            dims: reference.dims(),
            window: taps,
        });
    }
    let l = match params.dynamic_range {
        DynamicRange::Auto => {
            let max = reference.data().iter().cloned().fold(f32::MIN, f32::max);
            let min = reference.data().iter().cloned().fold(f32::MAX, f32::min);
            (max - min) as f64
        }
        DynamicRange::Value(v) => v,
    };
    if !(l > 0.0) {
        if reference.data() == test.data() {
            return Ok(1.0);
        }
        return Err(MetricsError::ConstantReference);
    }

    let dims = reference.dims();
    let n = reference.voxel_count();
    let x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = (0..n).map(|i| x[i] * y[i]).collect();

    let w = ssim_window(taps, params.window_sigma);
    let mu_x = gaussian_blur_3d(&x, dims, &w);
    let mu_y = gaussian_blur_3d(&y, dims, &w);
    let m_xx = gaussian_blur_3d(&xx, dims, &w);
    let m_yy = gaussian_blur_3d(&yy, dims, &w);
    let m_xy = gaussian_blur_3d(&xy, dims, &w);

    let c1 = (params.k1 * l) * (params.k1 * l);
    let c2 = (params.k2 * l) * (params.k2 * l);
    let radius = taps / 2;

    let mut sum = 0.0f64;
    let mut count = 0usize;
    for iz in radius..nz - radius {
        for iy in radius..ny - radius {
            for ix in radius..nx - radius {
                let i = (iz * ny + iy) * nx + ix;
                let (mx, my) = (mu_x[i], mu_y[i]);
                let var_x = m_xx[i] - mx * mx;
                let var_y = m_yy[i] - my * my;
                let cov = m_xy[i] - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
                sum += num / den;
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Result of the Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-), the smaller signed-rank sum.
    pub statistic: f64,
    /// Two-tailed p-value.
    pub p_value: f64,
    /// Number of pairs after dropping zero differences.
    pub n_used: usize,
    /// Whether the exact distribution was enumerated (n <= 20).
    pub exact: bool,
}

/// Sample size up to which the exact sign-flip distribution is used.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

/// Ranks of |d| in ascending order with average ranks for ties, returned in
/// doubled units so that tied average ranks stay integral.
fn doubled_ranks(abs_d: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let n = abs_d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| abs_d[i].partial_cmp(&abs_d[j]).unwrap());
    let mut ranks2 = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[order[j + 1]] == abs_d[order[i]] {
            j += 1;
        }
        // positions i..=j share the average rank (i+1 + ... + j+1)/(j-i+1)
        let doubled_avg = (i + 1 + j + 1) as u64; // 2 * average rank
        for &idx in &order[i..=j] {
            ranks2[idx] = doubled_avg;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    (ranks2, tie_sizes)
}

/// Distribution of 2*W+ over all 2^n sign assignments, as pattern counts.
fn sign_sum_distribution(ranks2: &[u64]) -> Vec<u64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in ranks2 {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Two-tailed Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; |differences| are ranked with average ranks
/// for ties; the statistic is W = min(W+, W-). For n <= 20 the p-value is
/// exact over all 2^n sign assignments: p = P(min(W+, W-) <= W_observed).
/// For larger n a normal approximation with tie and continuity corrections
/// is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    for (i, v) in a.iter().chain(b.iter()).enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFinite(i % a.len()));
        }
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(MetricsError::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < 5 {
        return Err(MetricsError::TooFewPairs(n));
    }

    let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks2, tie_sizes) = doubled_ranks(&abs_d);
    let w2_plus: u64 = ranks2
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let s2: u64 = ranks2.iter().sum(); // n(n+1), the doubled total rank sum
    let w2_minus = s2 - w2_plus;
    let w2 = w2_plus.min(w2_minus);
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_LIMIT {
        let counts = sign_sum_distribution(&ranks2);
        let favorable: u64 = counts
            .iter()
            .enumerate()
            .filter(|(s, _)| (*s as u64).min(s2 - *s as u64) <= w2)
            .map(|(_, &c)| c)
            .sum();
        let p = favorable as f64 / (1u64 << n) as f64;
        Ok(WilcoxonResult {
            statistic,
            p_value: p,
            n_used: n,
            exact: true,
        })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                (t * t * t - t) / 48.0
            })
            .sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let sd = var.sqrt();
        // continuity correction toward the mean on the min side
        let z = (statistic - mean + 0.5) / sd;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let p = (2.0 * normal.cdf(z)).min(1.0);
        Ok(WilcoxonResult {
            statistic,
            p_value: p,
            n_used: n,
            exact: false,
        })
    }
}
