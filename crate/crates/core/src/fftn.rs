//! Multidimensional FFT over row-major buffers and cyclic convolution.

use realfft::RealFftPlanner;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// In-place unnormalized DFT along every axis of a row-major array.
pub fn fft_nd(buf: &mut [Complex64], dims: &[usize], inverse: bool) {
    fft_axes(buf, dims, dims.len(), inverse)
}

/// DFT along the first `axes` axes only.
fn fft_axes(buf: &mut [Complex64], dims: &[usize], axes: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let total: usize = dims.iter().product();
    assert_eq!(buf.len(), total);
    for axis in 0..axes {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let stride: usize = dims[axis + 1..].iter().product();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for outer in 0..total / (n * stride) {
            for inner in 0..stride {
                let base = outer * n * stride + inner;
                for k in 0..n {
                    line[k] = buf[base + k * stride];
                }
                fft.process(&mut line);
                for k in 0..n {
                    buf[base + k * stride] = line[k];
                }
            }
        }
    }
}

/// Cyclic convolution of two real arrays of the same shape.
pub fn cyclic_convolve(a: &[f64], b: &[f64], dims: &[usize]) -> Vec<f64> {
    let mut fa: Vec<Complex64> = a.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let mut fb: Vec<Complex64> = b.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fft_nd(&mut fa, dims, false);
    fft_nd(&mut fb, dims, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft_nd(&mut fa, dims, true);
    let n = fa.len() as f64;
    fa.iter().map(|c| c.re / n).collect()
}

/// Smallest `n' ≥ n` of the form `2^a 3^b 5^c`.
pub fn fast_len(n: usize) -> usize {
    (n.max(1)..)
        .find(|&k| {
            let mut r = k;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            r == 1
        })
        .expect("unbounded search")
}

/// `Σ_{x,y} v_x v_y K(x - y)` for an array `v` of shape `dims` and an even
/// kernel `K`, through the autocorrelation `A(k) = Σ_x v_x v_{x+k}` computed
/// by real-to-complex FFTs on a zero-padded grid. Only the half spectrum is
/// stored.
pub fn autocorrelation_pairing(v: &[f64], dims: &[usize], kernel: impl Fn(&[i32]) -> f64) -> f64 {
    let d = dims.len();
    assert_eq!(v.len(), dims.iter().product::<usize>());
    let pad: Vec<usize> = dims.iter().map(|m| fast_len(2 * m - 1)).collect();
    let last = pad[d - 1];
    let half = last / 2 + 1;
    let mut sdims = pad.clone();
    sdims[d - 1] = half;
    let lines: usize = pad[..d - 1].iter().product();
    let mut spec = vec![Complex64::new(0.0, 0.0); lines * half];
    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(last);
    let c2r = planner.plan_fft_inverse(last);
    let mut line = r2c.make_input_vec();
    let mut out = r2c.make_output_vec();
    let src_lines: usize = dims[..d - 1].iter().product();
    let m_last = dims[d - 1];
    let mut idx = vec![0usize; d.saturating_sub(1)];
    for l in 0..src_lines {
        // Multi-index over the first d - 1 axes of the source.
        let mut rem = l;
        for i in (0..d - 1).rev() {
            idx[i] = rem % dims[i];
            rem /= dims[i];
        }
        line.iter_mut().for_each(|x| *x = 0.0);
        line[..m_last].copy_from_slice(&v[l * m_last..(l + 1) * m_last]);
        r2c.process(&mut line, &mut out).expect("matching lengths");
        let target = idx.iter().zip(&pad).fold(0, |a, (i, n)| a * n + i);
        spec[target * half..(target + 1) * half].copy_from_slice(&out);
    }
    fft_axes(&mut spec, &sdims, d - 1, false);
    spec.iter_mut().for_each(|c| *c = Complex64::new(c.norm_sqr(), 0.0));
    fft_axes(&mut spec, &sdims, d - 1, true);
    let norm = pad.iter().product::<usize>() as f64;
    let signed = |i: usize, n: usize| if i < n / 2 + 1 { i as i32 } else { i as i32 - n as i32 };
    let mut total = 0.0;
    let mut k = vec![0i32; d];
    let mut back = c2r.make_output_vec();
    for t in 0..lines {
        let mut rem = t;
        let mut inside = true;
        for i in (0..d - 1).rev() {
            k[i] = signed(rem % pad[i], pad[i]);
            inside &= k[i].unsigned_abs() as usize <= dims[i] - 1;
            rem /= pad[i];
        }
        if !inside {
            continue;
        }
        let row = &mut spec[t * half..(t + 1) * half];
        row[0].im = 0.0;
        row[half - 1].im = 0.0;
        c2r.process(row, &mut back).expect("matching lengths");
        for (j, a) in back.iter().enumerate() {
            k[d - 1] = signed(j, last);
            if k[d - 1].unsigned_abs() as usize <= m_last - 1 {
                total += a / norm * kernel(&k);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convolution_matches_direct_sum() {
        let dims = [4usize, 3, 5];
        let n: usize = dims.iter().product();
        let a: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 3) % 5) as f64).collect();
        let c = cyclic_convolve(&a, &b, &dims);
        let idx = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let mut s = 0.0;
                    for p in 0..dims[0] {
                        for q in 0..dims[1] {
                            for r in 0..dims[2] {
                                let o = idx(
                                    (i + dims[0] - p) % dims[0],
                                    (j + dims[1] - q) % dims[1],
                                    (k + dims[2] - r) % dims[2],
                                );
                                s += a[idx(p, q, r)] * b[o];
                            }
                        }
                    }
                    assert!((s - c[idx(i, j, k)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pairing_matches_double_sum() {
        for dims in [vec![5usize, 4, 3], vec![7, 6], vec![2, 3, 4, 5]] {
            let n: usize = dims.iter().product();
            let v: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 - 2.5).collect();
            let kernel = |k: &[i32]| 1.0 / (1.0 + k.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt());
            let unravel = |mut i: usize| {
                let mut c = vec![0i32; dims.len()];
                for a in (0..dims.len()).rev() {
                    c[a] = (i % dims[a]) as i32;
                    i /= dims[a];
                }
                c
            };
            let mut direct = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (unravel(i), unravel(j));
                    let k: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                    direct += v[i] * v[j] * kernel(&k);
                }
            }
            let fast = autocorrelation_pairing(&v, &dims, kernel);
            assert!((fast - direct).abs() < 1e-9 * direct.abs().max(1.0), "{dims:?}: {fast} vs {direct}");
        }
        assert_eq!(fast_len(321), 324);
        assert_eq!(fast_len(7), 8);
    }
}
