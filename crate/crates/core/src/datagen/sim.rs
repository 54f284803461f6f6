//! Semi-implicit Fourier spectral solver for the Cahn-Hilliard equation
//! `∂c/∂t = M ∇²μ`, `μ = A(c³ − c) − κ∇²c`, on a periodic unit-spaced grid.
//!
//! Each step treats the stiff fourth-order term implicitly and the double-well
//! term explicitly:
//! `ĉ⁺ = (ĉ − dt·M·k²·F[A(c³ − c)]) / (1 + dt·M·k²·(κx kx² + κy ky²))`.

use rand::Rng as _;

use super::params::SimParams;
use crate::error::{Error, Result};
use crate::fft::{wavenumber, Complex, Fft2, RealFft2};
use crate::rng::Rng;

/// Composition field on an `n × n` periodic grid, row-major `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    n: usize,
    values: Vec<f64>,
}

impl PhaseField {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::GridNotPowerOfTwo(n));
        }
        if values.len() != n * n {
            return Err(Error::InvalidTensor(format!(
                "{n}x{n} field needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn uniform(n: usize, c: f64) -> Result<Self> {
        Self::new(n, vec![c; n * n])
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn spectrum(&self, fft: &mut Fft2) -> Vec<Complex> {
        let mut hat: Vec<Complex> = self.values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.forward(&mut hat);
        hat
    }
}

/// Squared wavenumbers of an `n × n` grid, `(kx², ky²)` per bin.
pub(crate) fn wavenumbers_sq(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut kx2 = Vec::with_capacity(n * n);
    let mut ky2 = Vec::with_capacity(n * n);
    for row in 0..n {
        let ky = wavenumber(row, n);
        for col in 0..n {
            let kx = wavenumber(col, n);
            kx2.push(kx * kx);
            ky2.push(ky * ky);
        }
    }
    (kx2, ky2)
}

/// Squared wavenumbers over the half spectrum (`n × (n/2 + 1)`).
fn half_wavenumbers_sq(n: usize) -> (Vec<f64>, Vec<f64>) {
    let half = n / 2 + 1;
    let mut kx2 = Vec::with_capacity(n * half);
    let mut ky2 = Vec::with_capacity(n * half);
    for row in 0..n {
        let ky = wavenumber(row, n);
        for col in 0..half {
            let kx = wavenumber(col, n);
            kx2.push(kx * kx);
            ky2.push(ky * ky);
        }
    }
    (kx2, ky2)
}

/// Time stepper. Holds the field in spectral space between steps.
pub struct Simulation {
    params: SimParams,
    n: usize,
    fft: RealFft2,
    c: Vec<f64>,
    c_hat: Vec<Complex>,
    work: Vec<Complex>,
    nonlinear: Vec<f64>,
    k2: Vec<f64>,
    /// `κx kx² + κy ky²`
    kappa_k2: Vec<f64>,
    step: usize,
}

impl Simulation {
    /// Sets up the initial condition: `c0` plus zero-mean uniform noise of the
    /// configured amplitude plus a half-amplitude cosine along x shifted by the
    /// texture phase. Zero noise amplitude gives an exactly uniform field.
    pub fn new(params: &SimParams, n: usize, rng: &mut Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("grid size {n} is too small")));
        }
        let mut fft = RealFft2::new(n).ok_or(Error::GridNotPowerOfTwo(n))?;
        params.check_physical()?;
        let amp = params.noise_amplitude;
        let mut noise: Vec<f64> = (0..n * n)
            .map(|_| amp * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let noise_mean = noise.iter().sum::<f64>() / noise.len() as f64;
        noise.iter_mut().for_each(|v| *v -= noise_mean);
        let two_pi = 2.0 * std::f64::consts::PI;
        let c: Vec<f64> = noise
            .iter()
            .enumerate()
            .map(|(i, xi)| {
                let x = (i % n) as f64 / n as f64;
                let wave = (two_pi * (x + params.texture_phase)).cos();
                params.c0 + xi + 0.5 * amp * wave
            })
            .collect();
        // the cosine sums to zero over a full period only up to roundoff;
        // if amp == 0 every term above is exactly c0
        let field = PhaseField::new(n, c)?;
        let mut c_hat = vec![Complex::ZERO; n * fft.half_width()];
        fft.forward(&field.values, &mut c_hat);
        let (kx2, ky2) = half_wavenumbers_sq(n);
        let (kappa_x, kappa_y) = params.kappa_xy();
        let k2 = kx2.iter().zip(&ky2).map(|(a, b)| a + b).collect();
        let kappa_k2 = kx2
            .iter()
            .zip(&ky2)
            .map(|(a, b)| kappa_x * a + kappa_y * b)
            .collect();
        Ok(Self {
            params: *params,
            n,
            fft,
            c: field.values,
            c_hat,
            work: vec![Complex::ZERO; n * (n / 2 + 1)],
            nonlinear: vec![0.0; n * n],
            k2,
            kappa_k2,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.params.steps()
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn field(&self) -> PhaseField {
        PhaseField {
            n: self.n,
            values: self.c.clone(),
        }
    }

    /// Advances one time step.
    pub fn step(&mut self) -> Result<()> {
        let p = &self.params;
        let dt = p.dt;
        let mobility = p.mobility_at(self.step as f64 * dt);
        let a = p.well_height;
        for (w, &c) in self.nonlinear.iter_mut().zip(&self.c) {
            *w = a * (c * c * c - c);
        }
        self.fft.forward(&self.nonlinear, &mut self.work);
        for i in 0..self.c_hat.len() {
            let dm_k2 = dt * mobility * self.k2[i];
            let numer = self.c_hat[i] - self.work[i].scale(dm_k2);
            self.c_hat[i] = numer.scale(1.0 / (1.0 + dm_k2 * self.kappa_k2[i]));
        }
        self.work.copy_from_slice(&self.c_hat);
        self.fft.inverse(&mut self.work, &mut self.c);
        self.step += 1;
        if !self.c.iter().all(|v| v.is_finite()) {
            return Err(Error::SimulationDiverged { step: self.step });
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<PhaseField> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.field())
    }

    /// Discrete free energy `Σ [A(c² − 1)²/4 + (κx cx² + κy cy²)/2]` with
    /// spectral derivatives.
    pub fn free_energy(&self) -> f64 {
        let a = self.params.well_height;
        let bulk: f64 = self
            .c
            .iter()
            .map(|c| {
                let d = c * c - 1.0;
                a * d * d / 4.0
            })
            .sum();
        let n2 = (self.n * self.n) as f64;
        let half = self.n / 2 + 1;
        // interior half-spectrum columns stand for their conjugate mirror too
        let gradient: f64 = self
            .c_hat
            .iter()
            .zip(&self.kappa_k2)
            .enumerate()
            .map(|(i, (z, kk))| {
                let col = i % half;
                let weight = if col == 0 || col == half - 1 { 1.0 } else { 2.0 };
                weight * kk * z.norm_sqr()
            })
            .sum::<f64>()
            / (2.0 * n2);
        bulk + gradient
    }
}

/// Runs a full simulation: `ceil(T / dt)` steps from a noisy initial state.
pub fn run_simulation(params: &SimParams, n: usize, rng: &mut Rng) -> Result<PhaseField> {
    Simulation::new(params, n, rng)?.run_to_end()
}
