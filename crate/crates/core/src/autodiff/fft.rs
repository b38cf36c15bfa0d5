//! FFT-backed linear convolution and correlation for batches of 1-D signals.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Something that can be laid out in a circular buffer of length `n`.
pub(crate) trait Circular: Sync {
    fn embed(&self, n: usize) -> Vec<Complex<f64>>;
}

/// Plain signal supported on `0..len`; zero-padded.
impl Circular for Vec<f64> {
    fn embed(&self, n: usize) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (b, v) in buf.iter_mut().zip(self) {
            b.re = *v;
        }
        buf
    }
}

/// Filter given as `(offset, value)` taps; negative offsets wrap around.
impl Circular for Vec<(isize, f64)> {
    fn embed(&self, n: usize) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for &(off, v) in self {
            buf[off.rem_euclid(n as isize) as usize].re += v;
        }
        buf
    }
}

/// Transform length that keeps every offset in `(-len, len)` alias-free.
pub(crate) fn fft_len(len: usize) -> usize {
    (2 * len).next_power_of_two()
}

/// `y_i[t] = sum_u x_i[u] h[t - u]` for `t in 0..len`, where signal `i`
/// uses filter `hs[i % hs.len()]`.
pub(crate) fn convolve_many<H: Circular>(xs: &[Vec<f64>], hs: &[H], len: usize) -> Vec<Vec<f64>> {
    let n = fft_len(len);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let hf: Vec<Vec<Complex<f64>>> = hs
        .iter()
        .map(|h| {
            let mut b = h.embed(n);
            fwd.process(&mut b);
            b
        })
        .collect();
    xs.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut b = x.embed(n);
            fwd.process(&mut b);
            for (v, h) in b.iter_mut().zip(&hf[i % hf.len()]) {
                *v *= h;
            }
            inv.process(&mut b);
            b[..len].iter().map(|c| c.re / n as f64).collect()
        })
        .collect()
}

/// Circular correlation `r_i[s] = sum_t a_i[t] b[t - s]` where signal `i`
/// pairs with `bs[i % bs.len()]`. `pick(n)` lists the circular indices to
/// return, in output order.
pub(crate) fn correlate_many<B: Circular>(
    a: &[Vec<f64>],
    bs: &[B],
    pick: impl Fn(usize) -> Vec<usize>,
) -> Vec<Vec<f64>> {
    let len = a.first().map_or(0, Vec::len);
    let n = fft_len(len);
    let idx = pick(n);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let bf: Vec<Vec<Complex<f64>>> = bs
        .par_iter()
        .map(|b| {
            let mut buf = b.embed(n);
            fwd.process(&mut buf);
            buf
        })
        .collect();
    a.par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut buf = x.embed(n);
            fwd.process(&mut buf);
            for (v, b) in buf.iter_mut().zip(&bf[i % bf.len()]) {
                *v *= b.conj();
            }
            inv.process(&mut buf);
            idx.iter().map(|&j| buf[j].re / n as f64).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_matches_direct_sum() {
        let a = vec![vec![1.0, -2.0, 0.5, 3.0]];
        let b = vec![vec![0.25, 1.5, -1.0, 2.0]];
        let r = correlate_many(&a, &b, |n| vec![0, 1, n - 1]);
        let direct = |s: isize| -> f64 {
            (0..4)
                .filter_map(|t: isize| {
                    let j = t - s;
                    (0..4).contains(&j).then(|| a[0][t as usize] * b[0][j as usize])
                })
                .sum()
        };
        for (got, s) in r[0].iter().zip([0, 1, -1]) {
            assert!((got - direct(s)).abs() < 1e-12);
        }
    }
}
