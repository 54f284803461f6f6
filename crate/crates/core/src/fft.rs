//! Iterative radix-2 Cooley-Tukey FFT and a 2D wrapper for square periodic grids.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.re * s, self.im * s)
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }
}

/// Precomputed plan for transforms of one power-of-two length.
#[derive(Clone, Debug)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex>,
    bitrev: Vec<usize>,
}

impl Fft {
    /// Returns `None` unless `n` is a power of two.
    pub fn new(n: usize) -> Option<Self> {
        if !n.is_power_of_two() {
            return None;
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if n == 1 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        // twiddles[j] = exp(-2πi j / n); index 0 is exactly (1, 0)
        let twiddles = (0..n / 2)
            .map(|j| {
                if j == 0 {
                    Complex::new(1.0, 0.0)
                } else {
                    let a = -2.0 * PI * j as f64 / n as f64;
                    Complex::new(a.cos(), a.sin())
                }
            })
            .collect();
        Some(Self { n, twiddles, bitrev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, data: &mut [Complex]) {
        self.transform(data, false);
    }

    /// Inverse transform including the `1/n` factor, in place.
    pub fn inverse(&self, data: &mut [Complex]) {
        self.transform(data, true);
        let s = 1.0 / self.n as f64;
        data.iter_mut().for_each(|z| *z = z.scale(s));
    }

    fn transform(&self, data: &mut [Complex], inverse: bool) {
        assert_eq!(data.len(), self.n, "fft length mismatch");
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                data.swap(i, j);
            }
        }
        let mut half = 1;
        while half < self.n {
            let step = self.n / (2 * half);
            for start in (0..self.n).step_by(2 * half) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w.im = -w.im;
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
    }
}

/// 2D transforms over an `n × n` row-major grid.
#[derive(Clone, Debug)]
pub struct Fft2 {
    plan: Fft,
    column: Vec<Complex>,
}

impl Fft2 {
    pub fn new(n: usize) -> Option<Self> {
        Some(Self {
            plan: Fft::new(n)?,
            column: vec![Complex::ZERO; n],
        })
    }

    pub fn size(&self) -> usize {
        self.plan.len()
    }

    pub fn forward(&mut self, grid: &mut [Complex]) {
        self.apply(grid, false);
    }

    /// Inverse including the `1/n²` normalization.
    pub fn inverse(&mut self, grid: &mut [Complex]) {
        self.apply(grid, true);
    }

    fn apply(&mut self, grid: &mut [Complex], inverse: bool) {
        let n = self.plan.len();
        assert_eq!(grid.len(), n * n, "fft2 grid size mismatch");
        for row in grid.chunks_exact_mut(n) {
            if inverse {
                self.plan.inverse(row);
            } else {
                self.plan.forward(row);
            }
        }
        for col in 0..n {
            for r in 0..n {
                self.column[r] = grid[r * n + col];
            }
            if inverse {
                self.plan.inverse(&mut self.column);
            } else {
                self.plan.forward(&mut self.column);
            }
            for r in 0..n {
                grid[r * n + col] = self.column[r];
            }
        }
    }
}

/// 2D transforms of real `n × n` grids using the half spectrum
/// (`n × (n/2 + 1)`, row-major). Rows are transformed two at a time by
/// packing them into the real and imaginary parts of one complex FFT.
#[derive(Clone, Debug)]
pub struct RealFft2 {
    plan: Fft,
    row: Vec<Complex>,
    column: Vec<Complex>,
}

impl RealFft2 {
    /// `n` must be a power of two and at least 2.
    pub fn new(n: usize) -> Option<Self> {
        if n < 2 {
            return None;
        }
        Some(Self {
            plan: Fft::new(n)?,
            row: vec![Complex::ZERO; n],
            column: vec![Complex::ZERO; n],
        })
    }

    pub fn size(&self) -> usize {
        self.plan.len()
    }

    /// Width of the stored half spectrum.
    pub fn half_width(&self) -> usize {
        self.plan.len() / 2 + 1
    }

    pub fn forward(&mut self, real: &[f64], spectrum: &mut [Complex]) {
        let n = self.plan.len();
        let half = self.half_width();
        assert_eq!(real.len(), n * n, "rfft2 input size mismatch");
        assert_eq!(spectrum.len(), n * half, "rfft2 output size mismatch");
        for r in (0..n).step_by(2) {
            for x in 0..n {
                self.row[x] = Complex::new(real[r * n + x], real[(r + 1) * n + x]);
            }
            self.plan.forward(&mut self.row);
            for k in 0..half {
                let zk = self.row[k];
                let zc = self.row[(n - k) % n];
                // split Z = A + iB into the spectra of the two real rows
                spectrum[r * half + k] =
                    Complex::new(0.5 * (zk.re + zc.re), 0.5 * (zk.im - zc.im));
                spectrum[(r + 1) * half + k] =
                    Complex::new(0.5 * (zk.im + zc.im), -0.5 * (zk.re - zc.re));
            }
        }
        for k in 0..half {
            for r in 0..n {
                self.column[r] = spectrum[r * half + k];
            }
            self.plan.forward(&mut self.column);
            for r in 0..n {
                spectrum[r * half + k] = self.column[r];
            }
        }
    }

    /// Inverse including the `1/n²` normalization. `spectrum` is clobbered.
    pub fn inverse(&mut self, spectrum: &mut [Complex], real: &mut [f64]) {
        let n = self.plan.len();
        let half = self.half_width();
        assert_eq!(real.len(), n * n, "irfft2 output size mismatch");
        assert_eq!(spectrum.len(), n * half, "irfft2 input size mismatch");
        for k in 0..half {
            for r in 0..n {
                self.column[r] = spectrum[r * half + k];
            }
            self.plan.inverse(&mut self.column);
            for r in 0..n {
                spectrum[r * half + k] = self.column[r];
            }
        }
        for r in (0..n).step_by(2) {
            let a = &spectrum[r * half..(r + 1) * half];
            let b = &spectrum[(r + 1) * half..(r + 2) * half];
            for k in 0..n {
                let (ak, bk) = if k < half {
                    (a[k], b[k])
                } else {
                    let (x, y) = (a[n - k], b[n - k]);
                    (Complex::new(x.re, -x.im), Complex::new(y.re, -y.im))
                };
                // Z = A + iB
                self.row[k] = Complex::new(ak.re - bk.im, ak.im + bk.re);
            }
            self.plan.inverse(&mut self.row);
            for x in 0..n {
                real[r * n + x] = self.row[x].re;
                real[(r + 1) * n + x] = self.row[x].im;
            }
        }
    }
}

/// Angular wavenumber of FFT bin `m` on a periodic grid of `n` unit-spaced points.
pub fn wavenumber(m: usize, n: usize) -> f64 {
    let signed = if m < n / 2 { m as f64 } else { m as f64 - n as f64 };
    2.0 * PI * signed / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dft(x: &[Complex]) -> Vec<Complex> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex::ZERO, |acc, (j, &v)| {
                    let a = -2.0 * PI * (j * k) as f64 / n as f64;
                    acc + v * Complex::new(a.cos(), a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn matches_direct_dft() {
        for n in [1, 2, 4, 8, 32] {
            let x: Vec<Complex> = (0..n)
                .map(|i| Complex::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut y = x.clone();
            Fft::new(n).unwrap().forward(&mut y);
            for (a, b) in y.iter().zip(dft(&x)) {
                assert!((a.re - b.re).abs() < 1e-10 && (a.im - b.im).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn roundtrip_2d() {
        let n = 16;
        let grid: Vec<Complex> = (0..n * n)
            .map(|i| Complex::new(((i * 7) % 13) as f64 - 6.0, 0.0))
            .collect();
        let mut g = grid.clone();
        let mut f = Fft2::new(n).unwrap();
        f.forward(&mut g);
        f.inverse(&mut g);
        for (a, b) in g.iter().zip(&grid) {
            assert!((a.re - b.re).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_has_exact_dc_only() {
        let n = 64;
        let mut g = vec![Complex::new(0.3, 0.0); n * n];
        let mut f = Fft2::new(n).unwrap();
        f.forward(&mut g);
        assert!(g[1..].iter().all(|z| z.re == 0.0 && z.im == 0.0));
        f.inverse(&mut g);
        assert!(g.iter().all(|z| z.re == 0.3));
    }

    #[test]
    fn real_transform_matches_complex_half() {
        let n = 16;
        let half = n / 2 + 1;
        let real: Vec<f64> = (0..n * n).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let mut full: Vec<Complex> = real.iter().map(|&v| Complex::new(v, 0.0)).collect();
        Fft2::new(n).unwrap().forward(&mut full);
        let mut rf = RealFft2::new(n).unwrap();
        let mut spec = vec![Complex::ZERO; n * half];
        rf.forward(&real, &mut spec);
        for r in 0..n {
            for k in 0..half {
                let (a, b) = (spec[r * half + k], full[r * n + k]);
                assert!((a.re - b.re).abs() < 1e-11 && (a.im - b.im).abs() < 1e-11);
            }
        }
        let mut back = vec![0.0; n * n];
        rf.inverse(&mut spec, &mut back);
        for (x, y) in back.iter().zip(&real) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn real_transform_keeps_constants_exact() {
        let n = 64;
        let mut rf = RealFft2::new(n).unwrap();
        let mut spec = vec![Complex::ZERO; n * (n / 2 + 1)];
        rf.forward(&vec![-0.37; n * n], &mut spec);
        assert!(spec[1..].iter().all(|z| z.re == 0.0 && z.im == 0.0));
        let mut back = vec![0.0; n * n];
        rf.inverse(&mut spec, &mut back);
        assert!(back.iter().all(|&v| v == -0.37));
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(Fft::new(12).is_none());
        assert!(Fft2::new(48).is_none());
    }
}
