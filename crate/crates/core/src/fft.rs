//! Shared FFT plan cache.
//!
//! Filtering and feature extraction perform a large number of small
//! fixed-size transforms (frame-length convolutions, zero-padded magnitude
//! spectra), so plans are created once per worker and reused. The cache wraps
//! both the real-to-complex planner (forward spectra, Hermitian inverse) and
//! the general complex planner (adjoint passes need an inverse transform of a
//! non-Hermitian spectrum).
//!
//! Conventions: forward transforms are unnormalized (plain DFT sums); the
//! Hermitian inverse helper divides by the transform length so that
//! `irfft(rfft(x))` round-trips. The complex inverse helper is left
//! unnormalized because its callers fold normalization into their own
//! weights.

use std::collections::HashMap;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::real::{r, Real};

/// Number of complex bins in the half spectrum of an `n`-point real FFT.
#[inline]
pub fn half_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Cache of FFT plans keyed by transform length, plus reusable scratch.
pub struct FftCache<T: Real> {
    real_planner: RealFftPlanner<T>,
    complex_planner: FftPlanner<T>,
    r2c: HashMap<usize, Arc<dyn RealToComplex<T>>>,
    c2r: HashMap<usize, Arc<dyn ComplexToReal<T>>>,
    c_inv: HashMap<usize, Arc<dyn Fft<T>>>,
    scratch_real: Vec<T>,
    scratch_cplx: Vec<Complex<T>>,
}

impl<T: Real> Default for FftCache<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> FftCache<T> {
    pub fn new() -> Self {
        Self {
            real_planner: RealFftPlanner::new(),
            complex_planner: FftPlanner::new(),
            r2c: HashMap::new(),
            c2r: HashMap::new(),
            c_inv: HashMap::new(),
            scratch_real: Vec::new(),
            scratch_cplx: Vec::new(),
        }
    }

    fn r2c_plan(&mut self, n: usize) -> Arc<dyn RealToComplex<T>> {
        let planner = &mut self.real_planner;
        self.r2c
            .entry(n)
            .or_insert_with(|| planner.plan_fft_forward(n))
            .clone()
    }

    fn c2r_plan(&mut self, n: usize) -> Arc<dyn ComplexToReal<T>> {
        let planner = &mut self.real_planner;
        self.c2r
            .entry(n)
            .or_insert_with(|| planner.plan_fft_inverse(n))
            .clone()
    }

    fn c_inv_plan(&mut self, n: usize) -> Arc<dyn Fft<T>> {
        let planner = &mut self.complex_planner;
        self.c_inv
            .entry(n)
            .or_insert_with(|| planner.plan_fft_inverse(n))
            .clone()
    }

    /// Unnormalized `n`-point real FFT of `x` zero-padded (or truncated) to
    /// `n` samples. Writes the `n/2 + 1` half-spectrum bins into `out`.
    pub fn rfft_padded(&mut self, x: &[T], n: usize, out: &mut Vec<Complex<T>>) {
        let plan = self.r2c_plan(n);
        self.scratch_real.clear();
        self.scratch_real.resize(n, T::zero());
        let m = x.len().min(n);
        self.scratch_real[..m].copy_from_slice(&x[..m]);
        out.clear();
        out.resize(half_bins(n), Complex::new(T::zero(), T::zero()));
        plan.process(&mut self.scratch_real, out)
            .expect("real FFT buffer lengths are consistent");
    }

    /// Hermitian inverse of an `n/2 + 1`-bin half spectrum, normalized by
    /// `1/n`, writing `n` real samples into `out`.
    ///
    /// The caller must supply a spectrum of Hermitian origin (DC and, for
    /// even `n`, Nyquist bins real); the imaginary parts of those bins are
    /// forced to zero to satisfy the inverse plan.
    pub fn irfft(&mut self, spectrum: &[Complex<T>], n: usize, out: &mut Vec<T>) {
        assert_eq!(spectrum.len(), half_bins(n), "half-spectrum length");
        let plan = self.c2r_plan(n);
        self.scratch_cplx.clear();
        self.scratch_cplx.extend_from_slice(spectrum);
        self.scratch_cplx[0].im = T::zero();
        if n % 2 == 0 {
            let last = self.scratch_cplx.len() - 1;
            self.scratch_cplx[last].im = T::zero();
        }
        out.clear();
        out.resize(n, T::zero());
        plan.process(&mut self.scratch_cplx, out)
            .expect("inverse real FFT buffer lengths are consistent");
        let scale = T::one() / r::<T>(n as f64);
        for v in out.iter_mut() {
            *v = *v * scale;
        }
    }

    /// Unnormalized complex inverse FFT, in place over `buf` (`buf.len()`
    /// selects the transform length).
    pub fn complex_inverse_inplace(&mut self, buf: &mut [Complex<T>]) {
        let plan = self.c_inv_plan(buf.len());
        plan.process(buf);
    }
}
