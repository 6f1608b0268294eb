//! Cubic B-spline interpolation along z, the non-learned upsampling baseline.
//!
//! Interpolating (not smoothing) splines: samples are prefiltered into
//! B-spline coefficients with the standard two-pass recursive filter, pole
//! z1 = sqrt(3) - 2, mirror boundary, then evaluated on the fine grid. Only z
//! is processed; in-plane resolution is untouched by the degradation.

use crate::sim::center_offset;
use crate::volume::{Volume3D, VolumeError};

/// The single pole of the cubic B-spline direct filter.
pub const CUBIC_POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2

/// Overall gain (1 - z)(1 - 1/z) of the cubic prefilter; exactly 6.
const GAIN: f64 = 6.0;

/// Cubic B-spline basis function B3(t), supported on |t| < 2.
#[inline]
pub fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

/// Reflects an index into [0, n) with whole-sample mirror symmetry.
#[inline]
fn mirror_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as i64 {
        i = period - i;
    }
    i as usize
}

/// Computes interpolating cubic B-spline coefficients c such that
/// sum_m c[m] * B3(z - m) equals `samples[z]` at every integer z, using the
/// two-pass recursive filter with mirror boundary.
pub fn bspline_prefilter_1d(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    if n == 1 {
        return vec![samples[0]];
    }
    let z = CUBIC_POLE;
    let mut c: Vec<f64> = samples.iter().map(|&x| x * GAIN).collect();

    // causal initialization: the exact sum over one mirror period when the
    // signal is short, a truncated geometric sum otherwise
    let horizon = (f64::EPSILON.ln() / z.abs().ln()).ceil() as usize;
    c[0] = if n < horizon {
        let zn1 = z.powi(n as i32 - 1);
        let z2n = zn1 * zn1; // z^(2n-2), one mirror period
        let mut sum = c[0] + zn1 * c[n - 1];
        let mut zk = z;
        for k in 1..n - 1 {
            sum += (zk + z2n / zk) * c[k];
            zk *= z;
        }
        sum / (1.0 - z2n)
    } else {
        let mut sum = c[0];
        let mut zk = z;
        for k in 1..horizon {
            sum += zk * c[k];
            zk *= z;
        }
        sum
    };
    for i in 1..n {
        c[i] += z * c[i - 1];
    }

    // anticausal pass
    c[n - 1] = (z / (z * z - 1.0)) * (c[n - 1] + z * c[n - 2]);
    for i in (0..n - 1).rev() {
        c[i] = z * (c[i + 1] - c[i]);
    }
    c
}

/// Evaluates the spline defined by `coeffs` at (possibly fractional, possibly
/// out-of-range) position `t`, mirror-extending the coefficients.
pub fn evaluate_bspline(coeffs: &[f64], t: f64) -> f64 {
    let base = t.floor() as i64;
    let mut acc = 0.0;
    for m in (base - 1)..=(base + 2) {
        let w = bspline3(t - m as f64);
        if w != 0.0 {
            acc += w * coeffs[mirror_index(m, coeffs.len())];
        }
    }
    acc
}

/// Upsamples along z by an integer factor `k` with interpolating cubic
/// B-splines, column by column. Output slice j samples the coarse-grid spline
/// at (j - offset)/k, the inverse of the decimator's slab-center convention,
/// so coarse samples are reproduced at their own centers.
pub fn upsample_z_bspline(v: &Volume3D, k: usize) -> Result<Volume3D, VolumeError> {
    assert!(k >= 2, "upsampling factor must be at least 2");
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let nz_out = k * nz;
    let offset = center_offset(k) as f64;
    let plane = nx * ny;
    let mut out = vec![0.0f32; plane * nz_out];

    let mut column = vec![0.0f64; nz];
    for iy in 0..ny {
        for ix in 0..nx {
            let base = iy * nx + ix;
            for iz in 0..nz {
                column[iz] = v.data()[iz * plane + base] as f64;
            }
            let coeffs = bspline_prefilter_1d(&column);
            for j in 0..nz_out {
                let t = (j as f64 - offset) / k as f64;
                out[j * plane + base] = evaluate_bspline(&coeffs, t) as f32;
            }
        }
    }
    Volume3D::new((nx, ny, nz_out), (sx, sy, sz / k as f32), out)
}
