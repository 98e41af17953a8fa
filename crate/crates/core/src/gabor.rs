//! Gabor filter synthesis and filter-bank machinery.
//!
//! A filter is a Gaussian-windowed cosine parameterized by center frequency
//! `fc` and quality factor `Q`:
//!
//! ```text
//! w[z] = exp(-(b * u)^2) * cos(omega_c * u),   u = z - (P + 1) / 2
//! omega_c = 2 * pi * fc / fs
//! b = sqrt(2 * pi) * BW / (2 * fs),            BW = fc / Q
//! ```
//!
//! for tap indices `z in {1, .., P}`; the window is centered so the full
//! two-sided Gaussian envelope is realized, which is what makes the analytic
//! center-frequency gain hold:
//!
//! ```text
//! |W(omega_c)| = (sqrt(2) * pi * Q / omega_c) * (1 + exp(-8 * pi * Q^2))
//! ```
//!
//! For Q >= 0.5 the correction term is below 0.2%, so the gain is effectively
//! `sqrt(2) * pi * Q / omega_c`: the center gain grows linearly with Q while
//! the bandwidth shrinks as `1/Q`. That coupling is the lever the adaptive
//! layer actuates, so adaptive-layer filters are used unnormalized, while the
//! fixed analysis layer is peak-normalized to unit center gain.
//!
//! Frame filtering runs as centered same-length correlation. Because the
//! taps are even-symmetric in their envelope, correlation and convolution
//! coincide for static filters; the correlation convention is fixed here and
//! shared with the autodiff op so the trained and inference paths match
//! exactly. The hot path uses FFT products (exact linear correlation via
//! zero-padding); a direct time-domain reference lives alongside for tests.

use rustfft::num_complex::Complex;

use crate::audio::FrameSequence;
use crate::fft::{half_bins, FftCache};
use crate::real::{r, to_f64, Real};

// ============================================================================
// Errors
// ============================================================================

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GaborError {
    /// Filter parameters outside the synthesizable regime.
    InvalidSpec(String),
    /// Spatial difference order is not smaller than the channel count.
    OrderTooHigh { order: usize, channels: usize },
}

impl std::fmt::Display for GaborError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GaborError::InvalidSpec(detail) => write!(f, "invalid filter spec: {detail}"),
            GaborError::OrderTooHigh { order, channels } => write!(
                f,
                "difference order {order} needs at least {} channels, got {channels}",
                order + 1
            ),
        }
    }
}

impl std::error::Error for GaborError {}

// ============================================================================
// Filter spec and synthesis
// ============================================================================

/// Parameters of one Gabor filter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborFilterSpec {
    pub fc_hz: f64,
    pub q: f64,
    /// Tap count P.
    pub taps: usize,
    pub fs_hz: f64,
}

impl GaborFilterSpec {
    pub fn new(fc_hz: f64, q: f64, taps: usize, fs_hz: f64) -> Result<Self, GaborError> {
        if !(fc_hz > 0.0 && fc_hz < fs_hz / 2.0) {
            return Err(GaborError::InvalidSpec(format!(
                "center frequency {fc_hz} Hz outside (0, {})",
                fs_hz / 2.0
            )));
        }
        if !(q >= 0.5) {
            return Err(GaborError::InvalidSpec(format!(
                "Q = {q}; the analytic gain model needs Q >= 0.5"
            )));
        }
        if taps < 3 {
            return Err(GaborError::InvalidSpec(format!("tap count {taps} below 3")));
        }
        Ok(Self { fc_hz, q, taps, fs_hz })
    }

    /// Nominal bandwidth `fc / Q` in Hz.
    pub fn bandwidth_hz(&self) -> f64 {
        self.fc_hz / self.q
    }
}

/// Per-channel synthesis tables: everything about the taps that does not
/// depend on Q, precomputed once so per-frame re-synthesis costs one `exp`
/// and a few multiplies per tap.
#[derive(Debug, Clone)]
pub struct ChannelSynth<T> {
    /// Centered tap offsets `u = z - (P+1)/2`.
    pub u: Vec<T>,
    /// `u^2`.
    pub u2: Vec<T>,
    /// `cos(omega_c * u)`.
    pub cos_tab: Vec<T>,
    /// `b * Q = sqrt(2*pi) * fc / (2 * fs)`, so `b = kb / Q`.
    pub kb: T,
    pub fc_hz: f64,
    pub fs_hz: f64,
}

impl<T: Real> ChannelSynth<T> {
    pub fn new(fc_hz: f64, fs_hz: f64, taps: usize) -> Self {
        let center = (taps as f64 + 1.0) / 2.0;
        let omega_c = 2.0 * std::f64::consts::PI * fc_hz / fs_hz;
        let mut u = Vec::with_capacity(taps);
        let mut u2 = Vec::with_capacity(taps);
        let mut cos_tab = Vec::with_capacity(taps);
        for z in 1..=taps {
            let uu = z as f64 - center;
            u.push(r(uu));
            u2.push(r(uu * uu));
            cos_tab.push(r((omega_c * uu).cos()));
        }
        let kb = r((2.0 * std::f64::consts::PI).sqrt() * fc_hz / (2.0 * fs_hz));
        Self { u, u2, cos_tab, kb, fc_hz, fs_hz }
    }

    /// Writes the taps for quality factor `q` into `out`.
    pub fn taps_into(&self, q: T, out: &mut [T]) {
        let b2 = (self.kb / q) * (self.kb / q);
        for ((o, &u2), &c) in out.iter_mut().zip(&self.u2).zip(&self.cos_tab) {
            *o = (-b2 * u2).exp() * c;
        }
    }

    /// Writes taps and their derivative with respect to `q`.
    ///
    /// With `b = kb / q`: `d w / d q = w * 2 * (b*u)^2 / q`.
    pub fn taps_and_dq_into(&self, q: T, taps: &mut [T], dtaps: &mut [T]) {
        let b2 = (self.kb / q) * (self.kb / q);
        let two_over_q = r::<T>(2.0) / q;
        for i in 0..taps.len() {
            let e = (-b2 * self.u2[i]).exp() * self.cos_tab[i];
            taps[i] = e;
            dtaps[i] = e * b2 * self.u2[i] * two_over_q;
        }
    }

    /// Derivative of the taps with respect to `q`, recovered from taps that
    /// were already synthesized at the same `q` (avoids re-running `exp`).
    pub fn dq_from_taps(&self, q: T, taps: &[T], dtaps: &mut [T]) {
        let b2 = (self.kb / q) * (self.kb / q);
        let two_over_q = r::<T>(2.0) / q;
        for i in 0..taps.len() {
            dtaps[i] = taps[i] * b2 * self.u2[i] * two_over_q;
        }
    }
}

/// Synthesizes the taps of a single filter.
pub fn synth_gabor<T: Real>(spec: &GaborFilterSpec) -> Result<Vec<T>, GaborError> {
    // Re-validate so direct callers get the same contract as `new`.
    let spec = GaborFilterSpec::new(spec.fc_hz, spec.q, spec.taps, spec.fs_hz)?;
    let synth = ChannelSynth::<T>::new(spec.fc_hz, spec.fs_hz, spec.taps);
    let mut out = vec![T::zero(); spec.taps];
    synth.taps_into(r(spec.q), &mut out);
    Ok(out)
}

/// Magnitude of the filter's transfer function at angular frequency `omega`
/// (radians/sample): `|sum_z w[z] * exp(-i * omega * z)|`. The modulus is
/// independent of the tap index base.
pub fn dtft_gain_at<T: Real>(taps: &[T], omega: f64) -> f64 {
    let mut re = 0.0f64;
    let mut im = 0.0f64;
    for (j, &w) in taps.iter().enumerate() {
        let ang = -omega * (j as f64 + 1.0);
        let wv = to_f64(w);
        re += wv * ang.cos();
        im += wv * ang.sin();
    }
    (re * re + im * im).sqrt()
}

/// Analytic center-frequency gain `sqrt(2) * pi * Q / omega_c` of the
/// Gaussian-envelope filter (valid within 2% for Q >= 0.5; the exact value
/// carries an extra factor `1 + exp(-8 * pi * Q^2)`).
pub fn predicted_center_gain(fc_hz: f64, q: f64, fs_hz: f64) -> f64 {
    let omega_c = 2.0 * std::f64::consts::PI * fc_hz / fs_hz;
    std::f64::consts::SQRT_2 * std::f64::consts::PI * q / omega_c
}

/// Magnitude response sampled at `n_points` frequencies uniformly spanning
/// `[0, fs/2]` (inclusive endpoints).
pub fn freq_response<T: Real>(taps: &[T], n_points: usize) -> Result<Vec<f64>, GaborError> {
    if n_points < 64 {
        return Err(GaborError::InvalidSpec(format!(
            "response grid of {n_points} points is below the 64-point minimum"
        )));
    }
    Ok((0..n_points)
        .map(|i| {
            let omega = std::f64::consts::PI * i as f64 / (n_points - 1) as f64;
            dtft_gain_at(taps, omega)
        })
        .collect())
}

// ============================================================================
// Layout and bank
// ============================================================================

/// Center frequencies of a filter bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankLayout {
    pub centers_hz: Vec<f64>,
    pub fs_hz: f64,
}

impl FilterbankLayout {
    /// Linear spacing: `centers[i] = f_lo + i * (f_hi - f_lo) / (n - 1)`.
    pub fn linear(f_lo: f64, f_hi: f64, n: usize, fs_hz: f64) -> Result<Self, GaborError> {
        if n < 2 {
            return Err(GaborError::InvalidSpec(format!("bank needs >= 2 channels, got {n}")));
        }
        if !(f_lo >= 50.0) {
            return Err(GaborError::InvalidSpec(format!(
                "lowest center {f_lo} Hz below the 50 Hz floor"
            )));
        }
        if !(f_hi > f_lo && f_hi < fs_hz / 2.0) {
            return Err(GaborError::InvalidSpec(format!(
                "highest center {f_hi} Hz outside ({f_lo}, {})",
                fs_hz / 2.0
            )));
        }
        let step = (f_hi - f_lo) / (n - 1) as f64;
        Ok(Self {
            centers_hz: (0..n).map(|i| f_lo + i as f64 * step).collect(),
            fs_hz,
        })
    }

    pub fn channels(&self) -> usize {
        self.centers_hz.len()
    }
}

/// A synthesized bank of Gabor filters sharing one tap count.
#[derive(Debug, Clone)]
pub struct GaborBank<T> {
    pub centers_hz: Vec<f64>,
    pub fs_hz: f64,
    pub taps_per_filter: usize,
    /// Row-major `channels x taps`.
    pub taps: Vec<T>,
    /// Q used for each channel.
    pub q: Vec<f64>,
    /// Center-frequency gain of the *unnormalized* taps, per channel.
    pub raw_center_gains: Vec<f64>,
    /// Whether taps were rescaled to unit center-frequency gain.
    pub peak_normalized: bool,
}

impl<T: Real> GaborBank<T> {
    pub fn channels(&self) -> usize {
        self.centers_hz.len()
    }

    pub fn channel_taps(&self, c: usize) -> &[T] {
        &self.taps[c * self.taps_per_filter..(c + 1) * self.taps_per_filter]
    }
}

/// Builds a bank over `layout` with a shared quality factor `q`.
///
/// `peak_normalized = true` rescales each channel to unit gain at its center
/// frequency (the fixed analysis layer); `false` keeps the raw Q-dependent
/// gains (the adaptive layer, where gain-vs-Q coupling is the point).
pub fn build_bank<T: Real>(
    layout: &FilterbankLayout,
    q: f64,
    taps: usize,
    peak_normalized: bool,
) -> Result<GaborBank<T>, GaborError> {
    let n = layout.channels();
    let mut bank_taps = Vec::with_capacity(n * taps);
    let mut raw_gains = Vec::with_capacity(n);
    for &fc in &layout.centers_hz {
        let spec = GaborFilterSpec::new(fc, q, taps, layout.fs_hz)?;
        let mut w = synth_gabor::<T>(&spec)?;
        let omega_c = 2.0 * std::f64::consts::PI * fc / layout.fs_hz;
        let gain = dtft_gain_at(&w, omega_c);
        raw_gains.push(gain);
        if peak_normalized {
            let scale = r::<T>(1.0 / gain);
            for v in w.iter_mut() {
                *v = *v * scale;
            }
        }
        bank_taps.extend_from_slice(&w);
    }
    Ok(GaborBank {
        centers_hz: layout.centers_hz.clone(),
        fs_hz: layout.fs_hz,
        taps_per_filter: taps,
        taps: bank_taps,
        q: vec![q; n],
        raw_center_gains: raw_gains,
        peak_normalized,
    })
}

// ============================================================================
// Subband tensor
// ============================================================================

/// Filter-bank output: `frames x channels x frame_len`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTensor<T = f32> {
    data: Vec<T>,
    frames: usize,
    channels: usize,
    frame_len: usize,
    pub centers_hz: Vec<f64>,
}

impl<T: Real> SubbandTensor<T> {
    pub fn zeros(frames: usize, channels: usize, frame_len: usize, centers_hz: Vec<f64>) -> Self {
        assert_eq!(centers_hz.len(), channels);
        Self { data: vec![T::zero(); frames * channels * frame_len], frames, channels, frame_len, centers_hz }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn channel_frame(&self, t: usize, c: usize) -> &[T] {
        let at = (t * self.channels + c) * self.frame_len;
        &self.data[at..at + self.frame_len]
    }

    pub fn channel_frame_mut(&mut self, t: usize, c: usize) -> &mut [T] {
        let at = (t * self.channels + c) * self.frame_len;
        &mut self.data[at..at + self.frame_len]
    }

    /// All channels of one frame as a contiguous `channels x frame_len` slice.
    pub fn frame_matrix(&self, t: usize) -> &[T] {
        let at = t * self.channels * self.frame_len;
        &self.data[at..at + self.channels * self.frame_len]
    }
}

// ============================================================================
// Frame correlation (direct and FFT)
// ============================================================================

/// Tap alignment offset for same-length centered correlation.
#[inline]
pub fn center_offset(taps: usize) -> usize {
    (taps - 1) / 2
}

/// Direct same-length centered correlation with zero boundaries:
/// `out[n] = sum_j taps[j] * x[n + j - center]`. Reference implementation
/// for tests; the production path is FFT-based.
pub fn naive_correlate_same<T: Real>(x: &[T], taps: &[T], out: &mut [T]) {
    let c = center_offset(taps.len()) as isize;
    for (n, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, &w) in taps.iter().enumerate() {
            let i = n as isize + j as isize - c;
            if i >= 0 && (i as usize) < x.len() {
                acc += w * x[i as usize];
            }
        }
        *o = acc;
    }
}

/// FFT workspace for repeated same-length correlations of `frame_len`-sample
/// frames against `taps_len`-tap filters. Holds scratch only; spectra are
/// owned by the caller so forward products can be reused by adjoint passes.
pub struct FrameConvolver<T: Real> {
    nfft: usize,
    frame_len: usize,
    taps_len: usize,
    prod: Vec<Complex<T>>,
    time: Vec<T>,
}

impl<T: Real> FrameConvolver<T> {
    pub fn new(frame_len: usize, taps_len: usize) -> Self {
        let nfft = (frame_len + taps_len - 1).next_power_of_two();
        Self { nfft, frame_len, taps_len, prod: Vec::new(), time: Vec::new() }
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    /// Zero-padded spectrum of a tap vector or a frame-length row.
    pub fn spectrum(&self, row: &[T], cache: &mut FftCache<T>, out: &mut Vec<Complex<T>>) {
        debug_assert!(row.len() == self.taps_len || row.len() == self.frame_len);
        cache.rfft_padded(row, self.nfft, out);
    }

    /// Centered correlation `out[n] = sum_j taps[j] * x[n + j - center]`
    /// from precomputed spectra. Matches [`naive_correlate_same`].
    pub fn correlate(
        &mut self,
        taps_spec: &[Complex<T>],
        x_spec: &[Complex<T>],
        cache: &mut FftCache<T>,
        out: &mut [T],
    ) {
        debug_assert_eq!(taps_spec.len(), half_bins(self.nfft));
        debug_assert_eq!(out.len(), self.frame_len);
        self.prod.clear();
        self.prod.extend(taps_spec.iter().zip(x_spec).map(|(t, x)| t.conj() * x));
        let mut time = std::mem::take(&mut self.time);
        cache.irfft(&self.prod, self.nfft, &mut time);
        let c = center_offset(self.taps_len);
        for (n, o) in out.iter_mut().enumerate() {
            *o = time[(n + self.nfft - c) % self.nfft];
        }
        self.time = time;
    }

    /// Adjoint of [`Self::correlate`] with respect to the frame: given the
    /// spectrum of the upstream output gradient, accumulates
    /// `dx[m] += sum_n g[n] * taps[m - n + center]` into `out`.
    pub fn adjoint_frame_grad(
        &mut self,
        taps_spec: &[Complex<T>],
        g_spec: &[Complex<T>],
        cache: &mut FftCache<T>,
        out: &mut [T],
    ) {
        debug_assert_eq!(out.len(), self.frame_len);
        self.prod.clear();
        self.prod.extend(taps_spec.iter().zip(g_spec).map(|(t, g)| t * g));
        let mut time = std::mem::take(&mut self.time);
        cache.irfft(&self.prod, self.nfft, &mut time);
        let c = center_offset(self.taps_len);
        for (m, o) in out.iter_mut().enumerate() {
            *o += time[(m + c) % self.nfft];
        }
        self.time = time;
    }

    /// Cross-correlation at tap lags: `corr[j] = sum_n g[n] * x[n + j - center]`,
    /// the inner product the tap-parameter gradient needs
    /// (`dL/dq = dot(dtaps, corr)`).
    pub fn lag_correlation(
        &mut self,
        g_spec: &[Complex<T>],
        x_spec: &[Complex<T>],
        cache: &mut FftCache<T>,
        out: &mut [T],
    ) {
        debug_assert_eq!(out.len(), self.taps_len);
        self.prod.clear();
        self.prod.extend(g_spec.iter().zip(x_spec).map(|(g, x)| g.conj() * x));
        let mut time = std::mem::take(&mut self.time);
        cache.irfft(&self.prod, self.nfft, &mut time);
        let c = center_offset(self.taps_len);
        for (j, o) in out.iter_mut().enumerate() {
            *o = time[(j + self.nfft - c) % self.nfft];
        }
        self.time = time;
    }
}

/// Filters every frame through every bank channel: same-length centered
/// correlation, FFT path. Output is `frames x channels x frame_len`.
pub fn filter_frames<T: Real>(
    bank: &GaborBank<T>,
    frames: &FrameSequence,
    cache: &mut FftCache<T>,
) -> SubbandTensor<T> {
    let mut conv = FrameConvolver::new(frames.frame_len(), bank.taps_per_filter);
    let mut bank_spectra: Vec<Vec<Complex<T>>> = Vec::with_capacity(bank.channels());
    for ch in 0..bank.channels() {
        let mut spec = Vec::new();
        conv.spectrum(bank.channel_taps(ch), cache, &mut spec);
        bank_spectra.push(spec);
    }
    let mut out = SubbandTensor::zeros(
        frames.count(),
        bank.channels(),
        frames.frame_len(),
        bank.centers_hz.clone(),
    );
    let mut frame_t: Vec<T> = vec![T::zero(); frames.frame_len()];
    let mut x_spec: Vec<Complex<T>> = Vec::new();
    for t in 0..frames.count() {
        for (dst, &src) in frame_t.iter_mut().zip(frames.frame(t)) {
            *dst = r(src as f64);
        }
        conv.spectrum(&frame_t, cache, &mut x_spec);
        for (ch, spec) in bank_spectra.iter().enumerate() {
            conv.correlate(spec, &x_spec, cache, out.channel_frame_mut(t, ch));
        }
    }
    out
}

// ============================================================================
// Spatial differencing
// ============================================================================

/// First-order spatial difference across channels, applied `order` times:
/// each pass maps channel `c` to `x[c+1] - x[c]` and the center frequency to
/// the midpoint of the pair, dropping one channel per pass.
pub fn spatial_diff<T: Real>(
    input: &SubbandTensor<T>,
    order: usize,
) -> Result<SubbandTensor<T>, GaborError> {
    if order >= input.channels() {
        return Err(GaborError::OrderTooHigh { order, channels: input.channels() });
    }
    if order == 0 {
        return Ok(input.clone());
    }
    let mut cur = input.clone();
    for _ in 0..order {
        let channels = cur.channels() - 1;
        let centers: Vec<f64> = (0..channels)
            .map(|c| (cur.centers_hz[c] + cur.centers_hz[c + 1]) / 2.0)
            .collect();
        let mut next = SubbandTensor::zeros(cur.frames(), channels, cur.frame_len(), centers);
        for t in 0..cur.frames() {
            for c in 0..channels {
                let hi = cur.channel_frame(t, c + 1);
                let lo = cur.channel_frame(t, c);
                let dst = next.channel_frame_mut(t, c);
                for i in 0..dst.len() {
                    dst[i] = hi[i] - lo[i];
                }
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Center frequencies after `order` midpoint-difference passes.
pub fn diff_centers(centers: &[f64], order: usize) -> Vec<f64> {
    let mut cur = centers.to_vec();
    for _ in 0..order {
        cur = cur.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{frame_signal, Waveform};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 16_000.0;

    fn taps_for(fc: f64, q: f64, p: usize) -> Vec<f64> {
        synth_gabor::<f64>(&GaborFilterSpec::new(fc, q, p, FS).unwrap()).unwrap()
    }

    // ------------------------------------------------------------------
    // Analytic center gain
    // ------------------------------------------------------------------

    #[test]
    fn center_gain_matches_analytic_prediction() {
        // Unnormalized DFT gain at fc within 2% of sqrt(2)*pi*Q/omega_c
        // across the whole supported Q range at fc = 3 kHz.
        let omega_c = 2.0 * std::f64::consts::PI * 3000.0 / FS;
        for &q in &[0.5, 1.0, 1.5, 2.0, 2.5, 4.0, 8.0] {
            let taps = taps_for(3000.0, q, 150);
            let measured = dtft_gain_at(&taps, omega_c);
            let predicted = predicted_center_gain(3000.0, q, FS);
            let rel = (measured - predicted).abs() / predicted;
            assert!(rel < 0.02, "Q={q}: measured {measured}, predicted {predicted}, rel {rel}");
        }
    }

    #[test]
    fn center_gains_scale_linearly_with_q() {
        // Peak gains at Q = 1.5 : 2.0 : 2.5 must stand in those ratios
        // within 1% (the analytic gain is linear in Q).
        let omega_c = 2.0 * std::f64::consts::PI * 3000.0 / FS;
        let gains: Vec<f64> = [1.5, 2.0, 2.5]
            .iter()
            .map(|&q| dtft_gain_at(&taps_for(3000.0, q, 150), omega_c))
            .collect();
        assert_relative_eq!(gains[1] / gains[0], 2.0 / 1.5, epsilon = 0.01);
        assert_relative_eq!(gains[2] / gains[0], 2.5 / 1.5, epsilon = 0.01);
        assert_relative_eq!(gains[2] / gains[1], 2.5 / 2.0, epsilon = 0.01);
    }

    // ------------------------------------------------------------------
    // Bandwidth behavior
    // ------------------------------------------------------------------

    /// Full width in Hz between the -3 dB points around the response peak.
    fn measured_3db_width(taps: &[f64]) -> f64 {
        let n = 8192;
        let resp = freq_response(taps, n).unwrap();
        let (peak_i, peak) = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &v)| (i, v))
            .unwrap();
        let target = peak / std::f64::consts::SQRT_2;
        let mut lo = peak_i;
        while lo > 0 && resp[lo] > target {
            lo -= 1;
        }
        let mut hi = peak_i;
        while hi < n - 1 && resp[hi] > target {
            hi += 1;
        }
        (hi - lo) as f64 * (FS / 2.0) / (n - 1) as f64
    }

    #[test]
    fn doubling_q_halves_the_3db_bandwidth() {
        for &q in &[1.0, 2.0, 3.0] {
            let w1 = measured_3db_width(&taps_for(3000.0, q, 301));
            let w2 = measured_3db_width(&taps_for(3000.0, 2.0 * q, 301));
            assert_relative_eq!(w2 / w1, 0.5, epsilon = 0.05);
        }
    }

    #[test]
    fn bandwidth_strictly_decreases_with_q() {
        let widths: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&q| measured_3db_width(&taps_for(3000.0, q, 301)))
            .collect();
        for pair in widths.windows(2) {
            assert!(pair[1] < pair[0], "widths not decreasing: {widths:?}");
        }
    }

    // ------------------------------------------------------------------
    // Synthesis structure
    // ------------------------------------------------------------------

    #[test]
    fn taps_are_symmetric_about_the_window_center() {
        for &p in &[150usize, 151] {
            let taps = taps_for(1234.0, 2.7, p);
            for z in 0..p {
                // u(z) and u(P-1-z) are negatives; envelope and cosine even.
                assert_abs_diff_eq!(taps[z], taps[p - 1 - z], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tap_derivative_matches_finite_differences() {
        let synth = ChannelSynth::<f64>::new(2500.0, FS, 151);
        let q = 2.3;
        let h = 1e-6;
        let mut taps = vec![0.0; 151];
        let mut dtaps = vec![0.0; 151];
        synth.taps_and_dq_into(q, &mut taps, &mut dtaps);
        let mut plus = vec![0.0; 151];
        let mut minus = vec![0.0; 151];
        synth.taps_into(q + h, &mut plus);
        synth.taps_into(q - h, &mut minus);
        for i in 0..151 {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            assert_abs_diff_eq!(dtaps[i], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        assert!(GaborFilterSpec::new(0.0, 2.0, 150, FS).is_err());
        assert!(GaborFilterSpec::new(8000.0, 2.0, 150, FS).is_err());
        assert!(GaborFilterSpec::new(1000.0, 0.49, 150, FS).is_err());
        assert!(GaborFilterSpec::new(1000.0, 2.0, 2, FS).is_err());
        assert!(GaborFilterSpec::new(1000.0, 0.5, 3, FS).is_ok());
    }

    #[test]
    fn impulse_taps_have_flat_response() {
        let mut taps = vec![0.0f64; 9];
        taps[0] = 1.0;
        let resp = freq_response(&taps, 64).unwrap();
        for v in resp {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn response_grid_must_be_dense_enough() {
        let taps = taps_for(1000.0, 2.0, 21);
        assert!(freq_response(&taps, 63).is_err());
        assert!(freq_response(&taps, 64).is_ok());
    }

    // ------------------------------------------------------------------
    // Layout and bank
    // ------------------------------------------------------------------

    #[test]
    fn linear_layout_matches_closed_form() {
        let layout = FilterbankLayout::linear(60.0, 7800.0, 40, FS).unwrap();
        assert_eq!(layout.channels(), 40);
        for (i, &c) in layout.centers_hz.iter().enumerate() {
            let expected = 60.0 + i as f64 * (7800.0 - 60.0) / 39.0;
            assert_abs_diff_eq!(c, expected, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(layout.centers_hz[39], 7800.0, epsilon = 1e-9);
    }

    #[test]
    fn layout_validation() {
        assert!(FilterbankLayout::linear(30.0, 7800.0, 40, FS).is_err());
        assert!(FilterbankLayout::linear(60.0, 8000.0, 40, FS).is_err());
        assert!(FilterbankLayout::linear(60.0, 7800.0, 1, FS).is_err());
    }

    #[test]
    fn peak_normalized_bank_has_unit_center_gain() {
        let layout = FilterbankLayout::linear(60.0, 7800.0, 40, FS).unwrap();
        let bank = build_bank::<f64>(&layout, 4.0, 150, true).unwrap();
        for ch in 0..bank.channels() {
            let omega_c = 2.0 * std::f64::consts::PI * bank.centers_hz[ch] / FS;
            let gain = dtft_gain_at(bank.channel_taps(ch), omega_c);
            assert_relative_eq!(gain, 1.0, epsilon = 1e-9);
            assert!(bank.raw_center_gains[ch] > 1.0);
        }
    }

    // ------------------------------------------------------------------
    // Correlation paths
    // ------------------------------------------------------------------

    #[test]
    fn fft_correlation_matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(f_len, p) in &[(176usize, 150usize), (64, 31), (100, 101)] {
            let x: Vec<f64> = (0..f_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let taps: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let mut direct = vec![0.0; f_len];
            naive_correlate_same(&x, &taps, &mut direct);

            let mut cache = FftCache::new();
            let mut conv = FrameConvolver::new(f_len, p);
            let (mut t_spec, mut x_spec) = (Vec::new(), Vec::new());
            conv.spectrum(&taps, &mut cache, &mut t_spec);
            conv.spectrum(&x, &mut cache, &mut x_spec);
            let mut fast = vec![0.0; f_len];
            conv.correlate(&t_spec, &x_spec, &mut cache, &mut fast);

            for (a, b) in direct.iter().zip(fast.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn fft_correlation_matches_direct_in_f32_within_1e5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..176).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let taps: Vec<f32> = (0..150).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let mut direct = vec![0.0f32; 176];
        naive_correlate_same(&x, &taps, &mut direct);
        let mut cache = FftCache::new();
        let mut conv = FrameConvolver::new(176, 150);
        let (mut t_spec, mut x_spec) = (Vec::new(), Vec::new());
        conv.spectrum(&taps, &mut cache, &mut t_spec);
        conv.spectrum(&x, &mut cache, &mut x_spec);
        let mut fast = vec![0.0f32; 176];
        conv.correlate(&t_spec, &x_spec, &mut cache, &mut fast);
        for (a, b) in direct.iter().zip(fast.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn filtering_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..176).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f32> = (0..176).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let combo: Vec<f32> = a.iter().zip(&b).map(|(&x, &y)| 2.0 * x - 0.5 * y).collect();
        let layout = FilterbankLayout::linear(200.0, 6000.0, 8, FS).unwrap();
        let bank = build_bank::<f64>(&layout, 3.0, 99, true).unwrap();
        let mut cache = FftCache::new();
        let run = |samples: &[f32], cache: &mut FftCache<f64>| {
            let w = Waveform::new(samples.to_vec(), 16_000, "");
            let fr = frame_signal(&w, 11.0).unwrap();
            filter_frames(&bank, &fr, cache)
        };
        let ya = run(&a, &mut cache);
        let yb = run(&b, &mut cache);
        let yc = run(&combo, &mut cache);
        for ch in 0..bank.channels() {
            for i in 0..176 {
                let lhs = yc.channel_frame(0, ch)[i];
                let rhs = 2.0 * ya.channel_frame(0, ch)[i] - 0.5 * yb.channel_frame(0, ch)[i];
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn bandpass_attenuates_out_of_band_tones() {
        // A 3 kHz filter passes a 3 kHz tone and crushes an 800 Hz tone.
        let layout = FilterbankLayout::linear(3000.0, 3500.0, 2, FS).unwrap();
        let bank = build_bank::<f64>(&layout, 4.0, 150, true).unwrap();
        let mut cache = FftCache::new();
        let energy = |freq: f64, cache: &mut FftCache<f64>| {
            let w = crate::audio::sine(freq, 0.5, 0.05, 16_000, 0.0);
            let fr = frame_signal(&w, 11.0).unwrap();
            let out = filter_frames(&bank, &fr, cache);
            // middle frame, first channel
            out.channel_frame(2, 0).iter().map(|&v| v * v).sum::<f64>()
        };
        let on = energy(3000.0, &mut cache);
        let off = energy(800.0, &mut cache);
        assert!(on > 100.0 * off, "on-band {on} vs off-band {off}");
    }

    // ------------------------------------------------------------------
    // Spatial differencing
    // ------------------------------------------------------------------

    #[test]
    fn spatial_diff_of_channelwise_constant_is_zero() {
        let mut t = SubbandTensor::<f64>::zeros(2, 4, 8, vec![100.0, 200.0, 300.0, 400.0]);
        for frame in 0..2 {
            for c in 0..4 {
                for (i, v) in t.channel_frame_mut(frame, c).iter_mut().enumerate() {
                    *v = i as f64 * 0.25; // same per channel
                }
            }
        }
        let d = spatial_diff(&t, 1).unwrap();
        assert_eq!(d.channels(), 3);
        assert_eq!(d.centers_hz, vec![150.0, 250.0, 350.0]);
        for frame in 0..2 {
            for c in 0..3 {
                assert!(d.channel_frame(frame, c).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn spatial_diff_first_order_closed_form() {
        let mut t = SubbandTensor::<f64>::zeros(1, 3, 2, vec![100.0, 200.0, 300.0]);
        t.channel_frame_mut(0, 0).copy_from_slice(&[1.0, 2.0]);
        t.channel_frame_mut(0, 1).copy_from_slice(&[5.0, 7.0]);
        t.channel_frame_mut(0, 2).copy_from_slice(&[11.0, 20.0]);
        let d = spatial_diff(&t, 1).unwrap();
        assert_eq!(d.channel_frame(0, 0), &[4.0, 5.0]);
        assert_eq!(d.channel_frame(0, 1), &[6.0, 13.0]);
        // Second order: difference of differences.
        let d2 = spatial_diff(&t, 2).unwrap();
        assert_eq!(d2.channels(), 1);
        assert_eq!(d2.channel_frame(0, 0), &[2.0, 8.0]);
        assert_eq!(d2.centers_hz, vec![200.0]);
    }

    #[test]
    fn spatial_diff_rejects_too_high_order() {
        let t = SubbandTensor::<f64>::zeros(1, 3, 4, vec![1.0, 2.0, 3.0]);
        assert_eq!(
            spatial_diff(&t, 3).unwrap_err(),
            GaborError::OrderTooHigh { order: 3, channels: 3 }
        );
        assert!(spatial_diff(&t, 2).is_ok());
    }
}
