//! Multi-dimensional FFTs over torus site arrays.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place `d`-dimensional FFT of a row-major array with `side` points per axis.
/// `inverse` applies the unnormalized inverse transform.
pub fn fft_nd(data: &mut [Complex64], dim: usize, side: usize, inverse: bool) {
    assert_eq!(data.len(), side.pow(dim as u32));
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(side)
    } else {
        planner.plan_fft_forward(side)
    };
    let mut line = vec![Complex64::new(0.0, 0.0); side];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for axis in 0..dim {
        let stride = side.pow((dim - 1 - axis) as u32);
        let block = stride * side;
        for start in (0..data.len()).step_by(block) {
            for offset in 0..stride {
                let base = start + offset;
                for k in 0..side {
                    line[k] = data[base + k * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for k in 0..side {
                    data[base + k * stride] = line[k];
                }
            }
        }
    }
}

pub fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Circular autocorrelation `c(x) = n^{-1} sum_y f(y) f(y + x)`.
pub fn autocorrelation(values: &[f64], dim: usize, side: usize) -> Vec<f64> {
    let n = values.len();
    let mut spec = to_complex(values);
    fft_nd(&mut spec, dim, side, false);
    spec.iter_mut().for_each(|z| *z = Complex64::new(z.norm_sqr(), 0.0));
    fft_nd(&mut spec, dim, side, true);
    let scale = 1.0 / (n as f64 * n as f64);
    spec.iter().map(|z| z.re * scale).collect()
}

/// Signed frequency index in `(-side/2, side/2]`.
pub fn signed_frequency(k: usize, side: usize) -> i64 {
    let k = k as i64;
    let l = side as i64;
    if k > l / 2 {
        k - l
    } else {
        k
    }
}
