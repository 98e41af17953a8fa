//! Audio ingestion: WAV decode/encode, resampling to the engine rate,
//! framing, and a small raw sample format for fixtures and caches.
//!
//! The engine runs exclusively at 16 kHz mono. `decode_wav` accepts 16-bit
//! PCM and 32-bit IEEE float RIFF files (mono only), `ensure_16k` brings the
//! supported source rates to 16 kHz, and `frame_signal` cuts the signal into
//! non-overlapping frames with tail zero-padding.

use crate::fft::FftCache;

/// Target sample rate of the whole engine, in Hz.
pub const TARGET_RATE: u32 = 16_000;

/// Source rates `ensure_16k` accepts.
pub const SUPPORTED_RATES: [u32; 6] = [8_000, 16_000, 22_050, 32_000, 44_100, 48_000];

/// Magic tag of the raw sample format.
pub const RAW_MAGIC: &[u8; 4] = b"ADFE";

/// Version written into raw sample headers.
pub const RAW_VERSION: u32 = 1;

// ============================================================================
// Errors
// ============================================================================

/// Errors produced by audio decoding, resampling and framing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioError {
    /// Container structure is broken: bad magic, truncated chunk, missing
    /// mandatory chunk, or size fields that overrun the buffer.
    MalformedHeader(String),
    /// Structurally valid file whose encoding this engine does not accept
    /// (non-mono, unsupported codec tag, unsupported bit depth).
    UnsupportedEncoding(String),
    /// Sample rate outside [`SUPPORTED_RATES`].
    UnsupportedRate(u32),
    /// No samples to work with.
    EmptyAudio,
}

impl std::fmt::Display for AudioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AudioError::MalformedHeader(detail) => write!(f, "malformed audio header: {detail}"),
            AudioError::UnsupportedEncoding(detail) => {
                write!(f, "unsupported audio encoding: {detail}")
            }
            AudioError::UnsupportedRate(rate) => {
                write!(f, "unsupported sample rate {rate} Hz (supported: {SUPPORTED_RATES:?})")
            }
            AudioError::EmptyAudio => write!(f, "audio contains no samples"),
        }
    }
}

impl std::error::Error for AudioError {}

// ============================================================================
// Types
// ============================================================================

/// A mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Free-form origin tag (file stem, synthetic clip id, ...).
    pub source_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        Self { samples, sample_rate, source_id: source_id.into() }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Non-overlapping frames of a waveform, row-major `count x frame_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Vec<f32>,
    frame_len: usize,
    count: usize,
    pub sample_rate: u32,
}

impl FrameSequence {
    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len..(t + 1) * self.frame_len]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.frame_len)
    }
}

/// Sample encodings `encode_wav` can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

// ============================================================================
// WAV decode / encode
// ============================================================================

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, AudioError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AudioError::MalformedHeader(format!("truncated at byte {at}")))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, AudioError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| AudioError::MalformedHeader(format!("truncated at byte {at}")))
}

/// Decodes a RIFF/WAVE byte buffer into a [`Waveform`].
///
/// Accepts mono 16-bit PCM (`format 1`) and mono 32-bit IEEE float
/// (`format 3`). 16-bit samples are scaled by `1/32768`, so `+32767` maps to
/// `32767/32768` and `0` maps to exactly `0.0`. Float samples are clamped to
/// `[-1, 1]` to uphold the waveform range contract.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 {
        return Err(AudioError::MalformedHeader("shorter than RIFF preamble".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(AudioError::MalformedHeader("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("missing WAVE form type".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4)? as usize;
        let body_start = at + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| AudioError::MalformedHeader("chunk size overflow".into()))?;
        if body_end > bytes.len() {
            return Err(AudioError::MalformedHeader(format!(
                "chunk `{}` overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedHeader("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    read_u16(bytes, body_start)?,
                    read_u16(bytes, body_start + 2)?,
                    read_u32(bytes, body_start + 4)?,
                    read_u16(bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        at = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::MalformedHeader("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedHeader("missing data chunk".into()))?;

    if channels != 1 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{channels} channels (engine is mono-only)"
        )));
    }
    let samples: Vec<f32> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]).clamp(-1.0, 1.0))
            .collect(),
        (fmt_tag, bit_depth) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag {fmt_tag} with {bit_depth}-bit samples (accepted: PCM16, float32)"
            )))
        }
    };
    if samples.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    Ok(Waveform::new(samples, rate, ""))
}

/// Encodes a waveform as a RIFF/WAVE byte buffer in the requested format.
pub fn encode_wav(w: &Waveform, format: WavFormat) -> Vec<u8> {
    let (format_tag, bits): (u16, u16) = match format {
        WavFormat::Pcm16 => (1, 16),
        WavFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = w.samples.len() as u32 * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * bytes_per_sample).to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match format {
        WavFormat::Pcm16 => {
            for &s in &w.samples {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
        }
        WavFormat::Float32 => {
            for &s in &w.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    out
}

// ============================================================================
// Resampling
// ============================================================================

/// Designs a Hamming-windowed sinc lowpass with `taps` coefficients (odd
/// count, linear phase) and normalized cutoff `cutoff` in cycles/sample of
/// the rate the filter runs at, with unit DC gain.
fn lowpass_taps(cutoff: f64, taps: usize) -> Vec<f64> {
    debug_assert!(taps % 2 == 1, "linear-phase design wants an odd tap count");
    let center = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let u = k as f64 - center;
            let sinc = if u == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * u).sin() / (std::f64::consts::PI * u)
            };
            let window = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * k as f64 / (taps as f64 - 1.0)).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    for v in h.iter_mut() {
        *v /= gain;
    }
    h
}

/// FIR-filters `x` with `h` (zero-padded boundaries), then keeps every
/// `step`-th output starting at 0.
fn fir_decimate(x: &[f32], h: &[f64], step: usize) -> Vec<f32> {
    let center = h.len() / 2;
    let out_len = x.len().div_ceil(step);
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let pos = j * step;
        let mut acc = 0.0f64;
        for (k, &hk) in h.iter().enumerate() {
            let i = pos as isize + k as isize - center as isize;
            if i >= 0 && (i as usize) < x.len() {
                acc += hk * x[i as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    out
}

/// Integer-factor polyphase resampling: upsample by `up`, lowpass, then keep
/// every `down`-th sample. The anti-alias/anti-image cutoff is placed at 90%
/// of the narrower Nyquist band.
fn resample_integer(x: &[f32], up: usize, down: usize) -> Vec<f32> {
    let cutoff = 0.45 / up.max(down) as f64;
    let taps = 24 * up.max(down) + 1;
    let h = lowpass_taps(cutoff, taps);
    if up == 1 {
        return fir_decimate(x, &h, down);
    }
    // Zero-stuff to the upsampled rate, filter with gain `up`, decimate.
    let mut stuffed = vec![0.0f32; x.len() * up];
    for (i, &v) in x.iter().enumerate() {
        stuffed[i * up] = v * up as f32;
    }
    fir_decimate(&stuffed, &h, down)
}

/// Linear-interpolation resampling for non-integer ratios. Quality tradeoff:
/// no anti-alias filter, acceptable for the narrowband desk-scale material
/// this path serves; integer ratios take the windowed-sinc path instead.
fn resample_linear(x: &[f32], src_rate: u32, dst_rate: u32) -> Vec<f32> {
    let out_len = ((x.len() as u64 * dst_rate as u64 + src_rate as u64 / 2)
        / src_rate as u64) as usize;
    let ratio = src_rate as f64 / dst_rate as f64;
    (0..out_len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = (pos - i as f64) as f32;
            let a = x.get(i).copied().unwrap_or(0.0);
            let b = x.get(i + 1).copied().unwrap_or(a);
            a + (b - a) * frac
        })
        .collect()
}

/// Returns a waveform at [`TARGET_RATE`]. A 16 kHz input is returned
/// bit-identically. 8/32/48 kHz take the windowed-sinc polyphase path;
/// 22.05/44.1 kHz take the linear-interpolation path; anything else is
/// [`AudioError::UnsupportedRate`].
pub fn ensure_16k(w: &Waveform) -> Result<Waveform, AudioError> {
    if w.samples.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let samples = match w.sample_rate {
        16_000 => return Ok(w.clone()),
        8_000 => resample_integer(&w.samples, 2, 1),
        32_000 => resample_integer(&w.samples, 1, 2),
        48_000 => resample_integer(&w.samples, 1, 3),
        22_050 | 44_100 => resample_linear(&w.samples, w.sample_rate, TARGET_RATE),
        other => return Err(AudioError::UnsupportedRate(other)),
    };
    Ok(Waveform::new(samples, TARGET_RATE, w.source_id.clone()))
}

// ============================================================================
// Framing
// ============================================================================

/// Cuts the waveform into non-overlapping frames of `frame_ms` milliseconds
/// (`frame_len = round(frame_ms * rate / 1000)` samples). The final frame is
/// zero-padded, so the frame count is `ceil(len / frame_len)`.
pub fn frame_signal(w: &Waveform, frame_ms: f64) -> Result<FrameSequence, AudioError> {
    if w.samples.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    let frame_len = (frame_ms * w.sample_rate as f64 / 1000.0).round() as usize;
    assert!(frame_len > 0, "frame length must round to at least one sample");
    let count = w.samples.len().div_ceil(frame_len);
    let mut data = vec![0.0f32; count * frame_len];
    data[..w.samples.len()].copy_from_slice(&w.samples);
    Ok(FrameSequence { data, frame_len, count, sample_rate: w.sample_rate })
}

// ============================================================================
// Raw sample format
// ============================================================================

/// Serializes a waveform in the raw sample format: a 16-byte header
/// (`ADFE`, version, sample rate, sample count; all little-endian u32 after
/// the magic) followed by float32 little-endian samples.
pub fn write_raw(w: &Waveform) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + w.samples.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.samples.len() as u32).to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Parses the raw sample format written by [`write_raw`].
pub fn read_raw(bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 16 {
        return Err(AudioError::MalformedHeader("raw header shorter than 16 bytes".into()));
    }
    if &bytes[0..4] != RAW_MAGIC {
        return Err(AudioError::MalformedHeader("missing raw sample magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != RAW_VERSION {
        return Err(AudioError::MalformedHeader(format!("unknown raw version {version}")));
    }
    let rate = read_u32(bytes, 8)?;
    let len = read_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != len * 4 {
        return Err(AudioError::MalformedHeader(format!(
            "raw body holds {} bytes, header promises {}",
            body.len(),
            len * 4
        )));
    }
    if len == 0 {
        return Err(AudioError::EmptyAudio);
    }
    let samples = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Waveform::new(samples, rate, ""))
}

// ============================================================================
// Test-support signal generators
// ============================================================================

/// Generates a sine waveform (used widely by tests and the synthetic tasks).
pub fn sine(freq_hz: f64, amplitude: f64, seconds: f64, rate: u32, phase: f64) -> Waveform {
    let n = (seconds * rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            (amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / rate as f64 + phase).sin())
                as f32
        })
        .collect();
    Waveform::new(samples, rate, format!("sine-{freq_hz}hz"))
}

/// Index of the dominant DFT bin of a waveform, as a frequency in Hz.
/// Test oracle helper: independent of the filter-bank code paths.
pub fn dominant_frequency_hz(w: &Waveform) -> f64 {
    let mut cache = FftCache::<f64>::new();
    let n = w.samples.len();
    let x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let mut spec = Vec::new();
    cache.rfft_padded(&x, n, &mut spec);
    let mut best = (0usize, -1.0f64);
    for (i, bin) in spec.iter().enumerate().skip(1) {
        let mag = bin.norm();
        if mag > best.1 {
            best = (i, mag);
        }
    }
    best.0 as f64 * w.sample_rate as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp_waveform(n: usize, rate: u32) -> Waveform {
        let samples = (0..n).map(|i| ((i % 200) as f32 / 100.0) - 1.0).collect();
        Waveform::new(samples, rate, "ramp")
    }

    // ------------------------------------------------------------------
    // WAV round trips
    // ------------------------------------------------------------------

    #[test]
    fn pcm16_scaling_endpoints() {
        // +32767 -> 32767/32768, 0 -> 0.0 exactly.
        let mut bytes = encode_wav(&Waveform::new(vec![0.0], 16_000, ""), WavFormat::Pcm16);
        let n = bytes.len();
        bytes[n - 2..].copy_from_slice(&32767i16.to_le_bytes());
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);

        let zero = decode_wav(&encode_wav(&Waveform::new(vec![0.0], 16_000, ""), WavFormat::Pcm16))
            .unwrap();
        assert_eq!(zero.samples[0], 0.0);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let w = ramp_waveform(777, 16_000);
        let back = decode_wav(&encode_wav(&w, WavFormat::Pcm16)).unwrap();
        assert_eq!(back.samples.len(), w.samples.len());
        assert_eq!(back.sample_rate, w.sample_rate);
        for (a, b) in w.samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let w = ramp_waveform(513, 44_100);
        let back = decode_wav(&encode_wav(&w, WavFormat::Float32)).unwrap();
        assert_eq!(back.samples, w.samples);
        assert_eq!(back.sample_rate, 44_100);
    }

    #[test]
    fn decode_rejects_broken_containers() {
        assert!(matches!(decode_wav(b"RIF"), Err(AudioError::MalformedHeader(_))));
        assert!(matches!(
            decode_wav(b"JUNKxxxxWAVE"),
            Err(AudioError::MalformedHeader(_))
        ));
        // Valid RIFF/WAVE preamble but no chunks at all.
        assert!(matches!(
            decode_wav(b"RIFF\x04\x00\x00\x00WAVE"),
            Err(AudioError::MalformedHeader(_))
        ));
        // Chunk size overruns the buffer.
        let mut truncated = encode_wav(&ramp_waveform(64, 16_000), WavFormat::Pcm16);
        truncated.truncate(50);
        assert!(matches!(decode_wav(&truncated), Err(AudioError::MalformedHeader(_))));
    }

    #[test]
    fn decode_rejects_unsupported_encodings() {
        // Stereo PCM16.
        let mut stereo = encode_wav(&ramp_waveform(8, 16_000), WavFormat::Pcm16);
        stereo[22] = 2;
        assert!(matches!(decode_wav(&stereo), Err(AudioError::UnsupportedEncoding(_))));
        // 24-bit PCM tag.
        let mut deep = encode_wav(&ramp_waveform(8, 16_000), WavFormat::Pcm16);
        deep[34] = 24;
        assert!(matches!(decode_wav(&deep), Err(AudioError::UnsupportedEncoding(_))));
        // A-law tag.
        let mut alaw = encode_wav(&ramp_waveform(8, 16_000), WavFormat::Pcm16);
        alaw[20] = 6;
        assert!(matches!(decode_wav(&alaw), Err(AudioError::UnsupportedEncoding(_))));
    }

    #[test]
    fn decode_flags_empty_audio() {
        let w = Waveform::new(vec![], 16_000, "");
        let bytes = encode_wav(&w, WavFormat::Pcm16);
        assert_eq!(decode_wav(&bytes), Err(AudioError::EmptyAudio));
    }

    #[test]
    fn decode_skips_unknown_chunks() {
        // Splice a LIST chunk between fmt and data.
        let clean = encode_wav(&ramp_waveform(16, 16_000), WavFormat::Pcm16);
        let mut spliced = Vec::new();
        spliced.extend_from_slice(&clean[..36]); // RIFF..fmt chunk end
        spliced.extend_from_slice(b"LIST");
        spliced.extend_from_slice(&5u32.to_le_bytes());
        spliced.extend_from_slice(b"INFOx");
        spliced.push(0); // pad byte for odd size
        spliced.extend_from_slice(&clean[36..]);
        let riff_size = (spliced.len() - 8) as u32;
        spliced[4..8].copy_from_slice(&riff_size.to_le_bytes());
        let w = decode_wav(&spliced).unwrap();
        assert_eq!(w.samples.len(), 16);
    }

    // ------------------------------------------------------------------
    // Resampling
    // ------------------------------------------------------------------

    #[test]
    fn ensure_16k_is_identity_at_16k() {
        let w = ramp_waveform(1000, 16_000);
        let out = ensure_16k(&w).unwrap();
        assert_eq!(out, w); // bit-identical, including metadata
    }

    #[test]
    fn resample_32k_preserves_tone_frequency() {
        // Oracle: dominant DFT bin of the resampled signal sits at 1 kHz.
        let w = sine(1000.0, 0.5, 1.0, 32_000, 0.0);
        let out = ensure_16k(&w).unwrap();
        assert_eq!(out.sample_rate, 16_000);
        assert_abs_diff_eq!(dominant_frequency_hz(&out), 1000.0, epsilon = 1.5);
    }

    #[test]
    fn resample_48k_preserves_tone_frequency() {
        let w = sine(2500.0, 0.5, 1.0, 48_000, 0.3);
        let out = ensure_16k(&w).unwrap();
        assert_abs_diff_eq!(dominant_frequency_hz(&out), 2500.0, epsilon = 1.5);
    }

    #[test]
    fn resample_44k1_preserves_tone_frequency() {
        let w = sine(440.0, 0.5, 1.0, 44_100, 0.0);
        let out = ensure_16k(&w).unwrap();
        assert_eq!(out.sample_rate, 16_000);
        assert_abs_diff_eq!(dominant_frequency_hz(&out), 440.0, epsilon = 2.0);
    }

    #[test]
    fn upsample_8k_half_second_yields_8000_samples() {
        let w = sine(700.0, 0.4, 0.5, 8_000, 0.0);
        let out = ensure_16k(&w).unwrap();
        assert!((out.samples.len() as i64 - 8000).abs() <= 1, "{}", out.samples.len());
        assert_abs_diff_eq!(dominant_frequency_hz(&out), 700.0, epsilon = 2.5);
    }

    #[test]
    fn resample_rejects_unknown_rate() {
        let w = ramp_waveform(100, 11_025);
        assert_eq!(ensure_16k(&w), Err(AudioError::UnsupportedRate(11_025)));
    }

    // ------------------------------------------------------------------
    // Framing
    // ------------------------------------------------------------------

    #[test]
    fn frame_counts_follow_ceiling_arithmetic() {
        // Oracle: T = ceil(n / F) computed independently here.
        for &(n, ms, rate) in
            &[(16_000usize, 11.0f64, 16_000u32), (16_001, 11.0, 16_000), (175, 11.0, 16_000), (176, 11.0, 16_000), (1, 11.0, 16_000)]
        {
            let w = ramp_waveform(n, rate);
            let fs = frame_signal(&w, ms).unwrap();
            let f = (ms * rate as f64 / 1000.0).round() as usize;
            assert_eq!(fs.frame_len(), f);
            let expected = (n + f - 1) / f;
            assert_eq!(fs.count(), expected, "n={n}");
        }
    }

    #[test]
    fn one_second_at_16k_with_11ms_frames_yields_91_frames() {
        let w = ramp_waveform(16_000, 16_000);
        let fs = frame_signal(&w, 11.0).unwrap();
        assert_eq!(fs.frame_len(), 176);
        assert_eq!(fs.count(), 91);
    }

    #[test]
    fn final_frame_is_zero_padded() {
        let w = Waveform::new(vec![0.5; 180], 16_000, "");
        let fs = frame_signal(&w, 11.0).unwrap();
        assert_eq!(fs.count(), 2);
        let last = fs.frame(1);
        assert_eq!(last[..4], [0.5; 4]);
        assert!(last[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn framing_empty_audio_fails() {
        let w = Waveform::new(vec![], 16_000, "");
        assert_eq!(frame_signal(&w, 11.0).unwrap_err(), AudioError::EmptyAudio);
    }

    // ------------------------------------------------------------------
    // Raw sample format
    // ------------------------------------------------------------------

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let w = ramp_waveform(321, 16_000);
        let bytes = write_raw(&w);
        assert_eq!(&bytes[0..4], RAW_MAGIC);
        assert_eq!(bytes.len(), 16 + 321 * 4);
        let back = read_raw(&bytes).unwrap();
        assert_eq!(back.samples, w.samples);
        assert_eq!(back.sample_rate, 16_000);
    }

    #[test]
    fn raw_rejects_corruption() {
        let w = ramp_waveform(8, 16_000);
        let mut bytes = write_raw(&w);
        bytes[0] = b'X';
        assert!(matches!(read_raw(&bytes), Err(AudioError::MalformedHeader(_))));
        let mut short = write_raw(&w);
        short.truncate(short.len() - 2);
        assert!(matches!(read_raw(&short), Err(AudioError::MalformedHeader(_))));
    }
}
