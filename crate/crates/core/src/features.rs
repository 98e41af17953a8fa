//! Spectral features computed from subband frames.
//!
//! Per channel and frame, the classifier consumes six numbers:
//!
//! * **Log energy** — `ln(mean(c^2) + 1e-6)` over the frame's samples.
//! * **Five centroid magnitudes** — for each octave band `[lo, hi)` in
//!   {[250,500), [500,1000), [1000,2000), [2000,4000), [4000,8000)} Hz,
//!
//!   ```text
//!   CM_j = sum_{k in band} f_k * E_k / sum_{k in band} f_k
//!   ```
//!
//!   where `E` is the three-point-smoothed magnitude spectrum of the frame
//!   (zero-padded DFT) and `f_k = k * fs / nfft`. The denominator is a
//!   constant, so CM is a fixed non-negative reweighting of the envelope —
//!   linear in `E`, which lets the differentiable path compute all five
//!   octaves as one matrix product with [`cm_weight_matrix`].
//!
//! A feature vector stacks the per-channel log energies first, then the
//! centroid magnitudes channel-major: `[lnE_0 .. lnE_{C-1}, CM_{0,0..5},
//! CM_{1,0..5}, ...]`, giving `C * 6` values. The same layout (energies,
//! then centroid magnitudes) is used per frame in the `ADFT` feature file
//! format, and the construction here is asserted (by test) to match the
//! tape-built differentiable path node for node.

use std::ops::Range;
use std::path::Path;

use crate::fft::{half_bins, FftCache};
use crate::real::{r, to_f64, Real};

pub const NUM_OCTAVES: usize = 5;

/// Octave band edges in Hz; bands are half-open `[lo, hi)`.
pub const OCTAVE_EDGES_HZ: [(f64, f64); NUM_OCTAVES] =
    [(250.0, 500.0), (500.0, 1000.0), (1000.0, 2000.0), (2000.0, 4000.0), (4000.0, 8000.0)];

/// Additive floor inside the log-energy feature.
pub const FEATURE_LOG_FLOOR: f64 = 1e-6;

pub const FEATURE_MAGIC: [u8; 4] = *b"ADFT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug)]
pub enum FeatureError {
    /// Octave index outside `0..NUM_OCTAVES`.
    InvalidOctave(usize),
    /// Unreadable feature file.
    Malformed(String),
    Io(std::io::Error),
}

impl std::fmt::Display for FeatureError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureError::InvalidOctave(j) => {
                write!(f, "octave index {j} outside 0..{NUM_OCTAVES}")
            }
            FeatureError::Malformed(detail) => write!(f, "malformed feature file: {detail}"),
            FeatureError::Io(e) => write!(f, "feature file i/o error: {e}"),
        }
    }
}

impl std::error::Error for FeatureError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FeatureError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for FeatureError {
    fn from(e: std::io::Error) -> Self {
        FeatureError::Io(e)
    }
}

/// DFT bins whose center frequency falls inside octave `j`:
/// `k` with `lo <= k * fs / nfft < hi`. May be empty if the band lies above
/// the represented spectrum.
pub fn octave_bin_range(fs_hz: f64, nfft: usize, octave: usize) -> Result<Range<usize>, FeatureError> {
    let (lo_hz, hi_hz) = *OCTAVE_EDGES_HZ
        .get(octave)
        .ok_or(FeatureError::InvalidOctave(octave))?;
    let bin_hz = fs_hz / nfft as f64;
    let k_lo = (lo_hz / bin_hz).ceil() as usize;
    let k_hi = (hi_hz / bin_hz).ceil() as usize;
    let n_bins = half_bins(nfft);
    Ok(k_lo.min(n_bins)..k_hi.min(n_bins))
}

/// Centroid magnitude of one octave: frequency-weighted envelope mass,
/// normalized by the band's total frequency weight. Zero when the band
/// holds no bins. `envelope` spans the half spectrum (`nfft/2 + 1` bins).
pub fn centroid_magnitude<T: Real>(
    envelope: &[T],
    fs_hz: f64,
    nfft: usize,
    octave: usize,
) -> Result<T, FeatureError> {
    assert_eq!(envelope.len(), half_bins(nfft), "envelope must span the half spectrum");
    let range = octave_bin_range(fs_hz, nfft, octave)?;
    let bin_hz: T = r(fs_hz / nfft as f64);
    let mut num = T::zero();
    let mut den = T::zero();
    for k in range {
        let f_k = r::<T>(k as f64) * bin_hz;
        num += f_k * envelope[k].abs();
        den += f_k;
    }
    Ok(if den > T::zero() { num / den } else { T::zero() })
}

/// Constant weight matrix `(nfft/2 + 1) x NUM_OCTAVES` such that
/// `envelope_row * W` yields the five centroid magnitudes — used by the
/// differentiable path so CM needs no dedicated op.
pub fn cm_weight_matrix<T: Real>(fs_hz: f64, nfft: usize) -> Vec<T> {
    let n_bins = half_bins(nfft);
    let bin_hz = fs_hz / nfft as f64;
    let mut w = vec![T::zero(); n_bins * NUM_OCTAVES];
    for j in 0..NUM_OCTAVES {
        let range = octave_bin_range(fs_hz, nfft, j).expect("octave index in range");
        let den: f64 = range.clone().map(|k| k as f64 * bin_hz).sum();
        if den <= 0.0 {
            continue;
        }
        for k in range {
            w[k * NUM_OCTAVES + j] = r(k as f64 * bin_hz / den);
        }
    }
    w
}

/// Three-point moving average with shrinking edge windows — the same
/// smoothing the tape op applies, kept in lockstep by test.
pub fn smooth3_line<T: Real>(x: &[T], out: &mut [T]) {
    assert_eq!(x.len(), out.len());
    let n = x.len();
    for j in 0..n {
        let lo = j.saturating_sub(1);
        let hi = (j + 1).min(n - 1);
        let mut acc = T::zero();
        for &v in &x[lo..=hi] {
            acc += v;
        }
        out[j] = acc / r((hi - lo + 1) as f64);
    }
}

/// Zero-padded magnitude spectrum of a frame over the half spectrum.
pub fn magnitude_spectrum<T: Real>(
    frame: &[T],
    nfft: usize,
    cache: &mut FftCache<T>,
    out: &mut Vec<T>,
) {
    let mut spec = Vec::new();
    cache.rfft_padded(frame, nfft, &mut spec);
    out.clear();
    out.extend(spec.iter().map(|c| c.norm()));
}

/// Mean squared sample value of one subband frame.
pub fn subband_energy<T: Real>(row: &[T]) -> T {
    if row.is_empty() {
        return T::zero();
    }
    let mut acc = T::zero();
    for &v in row {
        acc += v * v;
    }
    acc / r(row.len() as f64)
}

/// Feature vector of one subband frame block (`channels x frame_len`,
/// row-major): per-channel log energies, then per-channel centroid
/// magnitudes. Length `channels * (1 + NUM_OCTAVES)`.
pub fn frame_feature_vector<T: Real>(
    block: &[T],
    channels: usize,
    frame_len: usize,
    fs_hz: f64,
    nfft: usize,
    cache: &mut FftCache<T>,
) -> Vec<T> {
    assert_eq!(block.len(), channels * frame_len);
    let mut features = vec![T::zero(); channels * (1 + NUM_OCTAVES)];
    let mut mag = Vec::new();
    let mut env = vec![T::zero(); half_bins(nfft)];
    for ch in 0..channels {
        let row = &block[ch * frame_len..(ch + 1) * frame_len];
        features[ch] = (subband_energy(row) + r(FEATURE_LOG_FLOOR)).ln();
        magnitude_spectrum(row, nfft, cache, &mut mag);
        smooth3_line(&mag, &mut env);
        for j in 0..NUM_OCTAVES {
            features[channels + ch * NUM_OCTAVES + j] =
                centroid_magnitude(&env, fs_hz, nfft, j).expect("octave index in range");
        }
    }
    features
}

// ============================================================================
// Feature files
// ============================================================================

/// Frame-major feature matrix with the `ADFT` on-disk layout:
///
/// ```text
/// "ADFT"  u32 version  u32 channels  u32 frames  u32 octaves
/// frames * channels * (1 + octaves) f32 values, frame-major, each frame as
/// [channel energies..., channel-major centroid magnitudes...]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub channels: usize,
    pub octaves: usize,
    /// `frames * channels * (1 + octaves)` values, frame-major.
    pub data: Vec<f32>,
}

impl FeatureSeries {
    pub fn new(channels: usize, octaves: usize) -> Self {
        Self { channels, octaves, data: Vec::new() }
    }

    pub fn frame_width(&self) -> usize {
        self.channels * (1 + self.octaves)
    }

    pub fn frames(&self) -> usize {
        if self.frame_width() == 0 {
            0
        } else {
            self.data.len() / self.frame_width()
        }
    }

    pub fn push_frame(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), self.frame_width(), "feature frame width");
        self.data.extend_from_slice(frame);
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let w = self.frame_width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.octaves as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let need = |pos: usize, n: usize| -> Result<(), FeatureError> {
            if pos + n > bytes.len() {
                Err(FeatureError::Malformed(format!(
                    "truncated at byte {pos} (wanted {n} more)"
                )))
            } else {
                Ok(())
            }
        };
        need(0, 20)?;
        if bytes[0..4] != FEATURE_MAGIC {
            return Err(FeatureError::Malformed(format!(
                "bad magic {:02x?}, expected {FEATURE_MAGIC:02x?}",
                &bytes[0..4]
            )));
        }
        let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(FeatureError::Malformed(format!("unsupported version {version}")));
        }
        let channels = u32_at(8) as usize;
        let frames = u32_at(12) as usize;
        let octaves = u32_at(16) as usize;
        let count = frames
            .checked_mul(channels * (1 + octaves))
            .ok_or_else(|| FeatureError::Malformed("dimension overflow".into()))?;
        need(20, count * 4)?;
        if bytes.len() != 20 + count * 4 {
            return Err(FeatureError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - 20 - count * 4
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let p = 20 + i * 4;
            data.push(f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()));
        }
        Ok(Self { channels, octaves, data })
    }

    pub fn save_file(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, FeatureError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Converts a generic feature vector into the file's f32 frame layout.
    pub fn push_frame_generic<T: Real>(&mut self, frame: &[T]) {
        assert_eq!(frame.len(), self.frame_width(), "feature frame width");
        self.data.extend(frame.iter().map(|&v| to_f64(v) as f32));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 16_000.0;
    const NFFT: usize = 512;

    /// Independent reference: walk physical frequencies, not bin ranges.
    fn cm_reference(env: &[f64], octave: usize) -> f64 {
        let (lo, hi) = OCTAVE_EDGES_HZ[octave];
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &e) in env.iter().enumerate() {
            let f = k as f64 * FS / NFFT as f64;
            if f >= lo && f < hi {
                num += f * e.abs();
                den += f;
            }
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    #[test]
    fn centroid_magnitude_matches_reference_on_random_envelopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let env: Vec<f64> = (0..half_bins(NFFT)).map(|_| rng.gen_range(0.0..4.0)).collect();
            for j in 0..NUM_OCTAVES {
                let got = centroid_magnitude(&env, FS, NFFT, j).unwrap();
                assert_abs_diff_eq!(got, cm_reference(&env, j), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn octave_bins_land_on_exact_boundaries_at_16k_512() {
        let expected = [8..16, 16..32, 32..64, 64..128, 128..256];
        for (j, want) in expected.into_iter().enumerate() {
            assert_eq!(octave_bin_range(FS, NFFT, j).unwrap(), want, "octave {j}");
        }
    }

    #[test]
    fn invalid_octave_is_rejected() {
        assert!(matches!(
            octave_bin_range(FS, NFFT, NUM_OCTAVES),
            Err(FeatureError::InvalidOctave(_))
        ));
        let env = vec![0.0f64; half_bins(NFFT)];
        assert!(centroid_magnitude(&env, FS, NFFT, 7).is_err());
    }

    #[test]
    fn flat_envelope_centroid_is_the_constant() {
        let env = vec![0.37f64; half_bins(NFFT)];
        for j in 0..NUM_OCTAVES {
            assert_abs_diff_eq!(
                centroid_magnitude(&env, FS, NFFT, j).unwrap(),
                0.37,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_envelope_centroid_is_zero() {
        let env = vec![0.0f64; half_bins(NFFT)];
        for j in 0..NUM_OCTAVES {
            assert_eq!(centroid_magnitude(&env, FS, NFFT, j).unwrap(), 0.0);
        }
    }

    #[test]
    fn band_above_spectrum_yields_zero() {
        // nfft = 64 at 4 kHz: bins reach 2 kHz, so the top octave is empty.
        let env = vec![1.0f64; half_bins(64)];
        assert_eq!(centroid_magnitude(&env, 4_000.0, 64, 4).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn centroid_is_linear_in_the_envelope(
            seed in 0u64..1_000,
            alpha in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..half_bins(NFFT)).map(|_| rng.gen_range(0.0..2.0)).collect();
            let b: Vec<f64> = (0..half_bins(NFFT)).map(|_| rng.gen_range(0.0..2.0)).collect();
            let scaled: Vec<f64> = a.iter().map(|&v| alpha * v).collect();
            let summed: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
            for j in 0..NUM_OCTAVES {
                let ca = centroid_magnitude(&a, FS, NFFT, j).unwrap();
                let cb = centroid_magnitude(&b, FS, NFFT, j).unwrap();
                let cs = centroid_magnitude(&scaled, FS, NFFT, j).unwrap();
                let csum = centroid_magnitude(&summed, FS, NFFT, j).unwrap();
                prop_assert!((cs - alpha * ca).abs() < 1e-9 * (1.0 + cs.abs()));
                prop_assert!((csum - (ca + cb)).abs() < 1e-9 * (1.0 + csum.abs()));
            }
        }
    }

    #[test]
    fn weight_matrix_reproduces_per_octave_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_bins = half_bins(NFFT);
        let w = cm_weight_matrix::<f64>(FS, NFFT);
        for _ in 0..10 {
            let env: Vec<f64> = (0..n_bins).map(|_| rng.gen_range(0.0..3.0)).collect();
            for j in 0..NUM_OCTAVES {
                let via_matrix: f64 =
                    (0..n_bins).map(|k| env[k] * w[k * NUM_OCTAVES + j]).sum();
                let direct = centroid_magnitude(&env, FS, NFFT, j).unwrap();
                assert_abs_diff_eq!(via_matrix, direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_matches_the_tape_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..33).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut direct = vec![0.0; 33];
        smooth3_line(&x, &mut direct);

        let mut tape = Tape::<f64>::new();
        let xl = tape.leaf(&x, 1, 33, false);
        let y = tape.smooth3(xl);
        for (a, b) in tape.value(y).iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn feature_vector_matches_the_differentiable_path() {
        // The hand-rolled extraction and the tape construction must agree
        // exactly on layout and values.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (channels, frame_len) = (4usize, 96usize);
        let block: Vec<f64> =
            (0..channels * frame_len).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let mut cache = FftCache::new();
        let direct = frame_feature_vector(&block, channels, frame_len, FS, NFFT, &mut cache);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&block, channels, frame_len, false);
        let sq = tape.square(x);
        let energy = tape.row_mean(sq);
        let ln_e = tape.log_floor(energy, FEATURE_LOG_FLOOR);
        let mag = tape.spectrum_mag(x, NFFT);
        let env = tape.smooth3(mag);
        let wm = cm_weight_matrix::<f64>(FS, NFFT);
        let w = tape.leaf(&wm, half_bins(NFFT), NUM_OCTAVES, false);
        let cm = tape.matmul(env, w);
        let cm_flat = tape.reshape(cm, channels * NUM_OCTAVES, 1);
        let feat = tape.concat_rows(ln_e, cm_flat);

        assert_eq!(tape.shape(feat), (channels * (1 + NUM_OCTAVES), 1));
        for (a, b) in tape.value(feat).iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn centroid_magnitudes_are_stable_under_small_time_shift() {
        // A steady tone's envelope barely moves when the framing shifts.
        let fs = FS;
        let n = 176usize;
        let tone = |offset: usize| -> Vec<f64> {
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * (i + offset) as f64 / fs).sin())
                .collect()
        };
        let mut cache = FftCache::new();
        let mut cms = Vec::new();
        for offset in [0usize, 16] {
            let frame = tone(offset);
            let mut mag = Vec::new();
            magnitude_spectrum(&frame, NFFT, &mut cache, &mut mag);
            let mut env = vec![0.0; mag.len()];
            smooth3_line(&mag, &mut env);
            cms.push(centroid_magnitude(&env, fs, NFFT, 2).unwrap());
        }
        let rel = (cms[0] - cms[1]).abs() / cms[0].abs();
        assert!(rel < 0.02, "CM moved {:.3}% under a 1 ms shift", rel * 100.0);
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let mut series = FeatureSeries::new(3, NUM_OCTAVES);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let frame: Vec<f32> =
                (0..series.frame_width()).map(|_| rng.gen_range(-4.0..4.0)).collect();
            series.push_frame(&frame);
        }
        let bytes = series.to_bytes();
        let loaded = FeatureSeries::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.channels, 3);
        assert_eq!(loaded.frames(), 5);
        for (a, b) in loaded.data.iter().zip(&series.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.adft");
        series.save_file(&path).unwrap();
        assert_eq!(FeatureSeries::load_file(&path).unwrap(), series);
    }

    #[test]
    fn feature_file_rejects_corruption() {
        let mut series = FeatureSeries::new(2, NUM_OCTAVES);
        series.push_frame(&vec![1.0f32; series.frame_width()]);
        let good = series.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[1] = b'X';
        assert!(FeatureSeries::from_bytes(&bad_magic).is_err());

        let truncated = &good[..good.len() - 2];
        assert!(FeatureSeries::from_bytes(truncated).is_err());

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 0]);
        assert!(FeatureSeries::from_bytes(&trailing).is_err());

        let mut bad_version = good;
        bad_version[4] = 9;
        assert!(FeatureSeries::from_bytes(&bad_version).is_err());
    }
}
