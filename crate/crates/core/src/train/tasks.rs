//! Synthetic desk-scale classification tasks.
//!
//! Three fully seeded generators produce labeled 1-second clips at 16 kHz
//! with disjoint, class-balanced train/valid/test splits:
//!
//! * `loudness_tones` — 8 pure-tone classes by center frequency, each clip
//!   at a random level in a wide loudness range plus white noise at a
//!   random SNR. The loudness spread is the point: a fixed-gain front end
//!   sees the same class at wildly different input levels.
//! * `chirp_classes` — 5 linear-sweep shapes (up/down/flat/fast-up/fast-down).
//! * `noisy_vowels` — 4 two-formant vowel spectra over a random pitch.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::audio::{Waveform, TARGET_RATE};

/// Every generated clip lasts exactly this long.
pub const CLIP_SECONDS: f64 = 1.0;

/// Total training clips per task (divides evenly by every class count).
pub const TRAIN_CLIPS: usize = 600;

/// Per-split holdout budget; rounded down to the nearest class-balanced
/// count (e.g. 96 for 8 classes), keeping "equal per-class counts" exact.
pub const HOLDOUT_BUDGET: usize = 100;

/// Default loudness range (dB FS) for `loudness_tones`.
pub const TONE_LEVEL_LO_DB: f64 = -40.0;

// ============================================================================
// Kinds, splits, clips
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LoudnessTones,
    ChirpClasses,
    NoisyVowels,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::LoudnessTones => "loudness_tones",
            TaskKind::ChirpClasses => "chirp_classes",
            TaskKind::NoisyVowels => "noisy_vowels",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            TaskKind::LoudnessTones => 8,
            TaskKind::ChirpClasses => 5,
            TaskKind::NoisyVowels => 4,
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            TaskKind::LoudnessTones => TONE_FREQS_HZ
                .iter()
                .map(|f| format!("tone_{f}hz"))
                .collect(),
            TaskKind::ChirpClasses => {
                ["chirp_up", "chirp_down", "chirp_flat", "chirp_fast_up", "chirp_fast_down"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            }
            TaskKind::NoisyVowels => {
                ["vowel_a", "vowel_i", "vowel_u", "vowel_ae"].iter().map(|s| s.to_string()).collect()
            }
        }
    }

    pub fn all() -> [TaskKind; 3] {
        [TaskKind::LoudnessTones, TaskKind::ChirpClasses, TaskKind::NoisyVowels]
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loudness_tones" => Ok(TaskKind::LoudnessTones),
            "chirp_classes" => Ok(TaskKind::ChirpClasses),
            "noisy_vowels" => Ok(TaskKind::NoisyVowels),
            other => Err(format!(
                "unknown task {other:?} (loudness_tones|chirp_classes|noisy_vowels)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Valid, Split::Test]
    }
}

/// One labeled clip with the generator draws that produced it.
#[derive(Debug, Clone)]
pub struct Clip {
    pub wave: Waveform,
    pub label: usize,
    pub split: Split,
    pub id: String,
    /// Generator parameter draws, for the manifest (name, value).
    pub gen_params: Vec<(&'static str, f64)>,
}

/// A complete synthetic task: clips, labels, splits, provenance.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub name: String,
    pub kind: TaskKind,
    pub generator_seed: u64,
    pub class_names: Vec<String>,
    pub clips: Vec<Clip>,
}

impl ToyTask {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Clip indices belonging to one split, in generation order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Content hashes of one split's clips (sample bit patterns).
    pub fn split_hashes(&self, split: Split) -> HashSet<u64> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| hash_samples(&c.wave.samples))
            .collect()
    }

    /// True when the three splits share no clip content.
    pub fn splits_disjoint(&self) -> bool {
        let tr = self.split_hashes(Split::Train);
        let va = self.split_hashes(Split::Valid);
        let te = self.split_hashes(Split::Test);
        tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te)
    }

    /// JSON manifest: clip id, label, split, generator params.
    pub fn manifest_json(&self) -> String {
        #[derive(Serialize)]
        struct ManifestClip<'a> {
            id: &'a str,
            label: usize,
            class: &'a str,
            split: &'a str,
            seconds: f64,
            params: Vec<(&'static str, f64)>,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            task: &'a str,
            kind: &'a str,
            generator_seed: u64,
            sample_rate: u32,
            classes: &'a [String],
            clips: Vec<ManifestClip<'a>>,
        }
        let doc = Manifest {
            task: &self.name,
            kind: self.kind.label(),
            generator_seed: self.generator_seed,
            sample_rate: TARGET_RATE,
            classes: &self.class_names,
            clips: self
                .clips
                .iter()
                .map(|c| ManifestClip {
                    id: &c.id,
                    label: c.label,
                    class: &self.class_names[c.label],
                    split: c.split.label(),
                    seconds: c.wave.duration_seconds(),
                    params: c.gen_params.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("manifest serializes")
    }
}

/// FNV-1a over the sample bit patterns: a stable content fingerprint for
/// the split-disjointness assertion.
pub fn hash_samples(samples: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &s in samples {
        for b in s.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

// ============================================================================
// Generation
// ============================================================================

/// Tone class center frequencies (Hz), spread across the analysis band.
pub const TONE_FREQS_HZ: [f64; 8] = [250.0, 400.0, 650.0, 1000.0, 1600.0, 2600.0, 4100.0, 6500.0];

/// Chirp classes as (start, end) frequencies of a 1 s linear sweep.
pub const CHIRP_SWEEPS_HZ: [(f64, f64); 5] =
    [(500.0, 2500.0), (2500.0, 500.0), (1200.0, 1200.0), (300.0, 6000.0), (6000.0, 300.0)];

/// Vowel classes as (F1, F2) formant pairs (Hz).
pub const VOWEL_FORMANTS_HZ: [(f64, f64); 4] =
    [(730.0, 1090.0), (270.0, 2290.0), (300.0, 870.0), (660.0, 1720.0)];

/// Generates a task with its default parameters.
pub fn gen_synthetic_task(kind: TaskKind, seed: u64) -> ToyTask {
    match kind {
        TaskKind::LoudnessTones => gen_loudness_tones(seed, TONE_LEVEL_LO_DB),
        _ => generate(kind, seed, TONE_LEVEL_LO_DB),
    }
}

/// `loudness_tones` with an adjustable lower loudness bound (widened for
/// the adaptivity comparison).
pub fn gen_loudness_tones(seed: u64, level_lo_db: f64) -> ToyTask {
    generate(TaskKind::LoudnessTones, seed, level_lo_db)
}

fn generate(kind: TaskKind, seed: u64, tone_level_lo_db: f64) -> ToyTask {
    let k = kind.class_count();
    let per_class_holdout = HOLDOUT_BUDGET / k;
    let plan = [
        (Split::Train, TRAIN_CLIPS / k),
        (Split::Valid, per_class_holdout),
        (Split::Test, per_class_holdout),
    ];
    let mut clips = Vec::new();
    for (split_idx, &(split, per_class)) in plan.iter().enumerate() {
        for class in 0..k {
            for i in 0..per_class {
                let clip_seed = mix_seed(seed, split_idx as u64, class as u64, i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
                let id = format!("{}-{}-c{class}-{i:03}", kind.label(), split.label());
                let (samples, gen_params) = match kind {
                    TaskKind::LoudnessTones => {
                        tone_clip(&mut rng, TONE_FREQS_HZ[class], tone_level_lo_db)
                    }
                    TaskKind::ChirpClasses => chirp_clip(&mut rng, CHIRP_SWEEPS_HZ[class]),
                    TaskKind::NoisyVowels => vowel_clip(&mut rng, VOWEL_FORMANTS_HZ[class]),
                };
                clips.push(Clip {
                    wave: Waveform::new(samples, TARGET_RATE, id.clone()),
                    label: class,
                    split,
                    id,
                    gen_params,
                });
            }
        }
    }
    ToyTask {
        name: kind.label().to_string(),
        kind,
        generator_seed: seed,
        class_names: kind.class_names(),
        clips,
    }
}

/// SplitMix64-style stream separation so every clip owns an independent
/// deterministic stream.
fn mix_seed(seed: u64, split: u64, class: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(split.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(class.wrapping_mul(0x94d049bb133111eb))
        .wrapping_add(idx.wrapping_add(0x2545f4914f6cdd1d));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn clip_len() -> usize {
    (CLIP_SECONDS * TARGET_RATE as f64).round() as usize
}

fn add_noise_at_snr(rng: &mut ChaCha8Rng, samples: &mut [f32], signal_rms: f64, snr_db: f64) {
    let noise_std = signal_rms / 10f64.powf(snr_db / 20.0);
    for s in samples.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *s = (*s as f64 + n * noise_std).clamp(-1.0, 1.0) as f32;
    }
}

/// Pure tone: level uniform in [level_lo, 0] dB FS (peak-referenced),
/// random phase, white noise at SNR uniform in [0, 30] dB.
fn tone_clip(
    rng: &mut ChaCha8Rng,
    freq_hz: f64,
    level_lo_db: f64,
) -> (Vec<f32>, Vec<(&'static str, f64)>) {
    let level_db = rng.gen_range(level_lo_db..=0.0);
    let snr_db = rng.gen_range(0.0..=30.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = 10f64.powf(level_db / 20.0);
    let w = 2.0 * std::f64::consts::PI * freq_hz / TARGET_RATE as f64;
    let mut samples: Vec<f32> =
        (0..clip_len()).map(|n| (amp * (w * n as f64 + phase).sin()) as f32).collect();
    add_noise_at_snr(rng, &mut samples, amp / std::f64::consts::SQRT_2, snr_db);
    (samples, vec![("freq_hz", freq_hz), ("level_db", level_db), ("snr_db", snr_db)])
}

/// Linear sweep from f0 to f1 over the clip, plus noise.
fn chirp_clip(rng: &mut ChaCha8Rng, (f0, f1): (f64, f64)) -> (Vec<f32>, Vec<(&'static str, f64)>) {
    let level_db = rng.gen_range(-30.0..=-5.0);
    let snr_db = rng.gen_range(5.0..=30.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = 10f64.powf(level_db / 20.0);
    let fs = TARGET_RATE as f64;
    let t_total = CLIP_SECONDS;
    let mut samples: Vec<f32> = (0..clip_len())
        .map(|n| {
            let t = n as f64 / fs;
            let arg = std::f64::consts::TAU * (f0 * t + (f1 - f0) * t * t / (2.0 * t_total));
            (amp * (arg + phase).sin()) as f32
        })
        .collect();
    add_noise_at_snr(rng, &mut samples, amp / std::f64::consts::SQRT_2, snr_db);
    (samples, vec![("f0_hz", f0), ("f1_hz", f1), ("level_db", level_db), ("snr_db", snr_db)])
}

/// Two-formant vowel: harmonics of a random pitch, shaped by Gaussian
/// formant bumps, peak-normalized to a random level, plus noise.
fn vowel_clip(
    rng: &mut ChaCha8Rng,
    (form1, form2): (f64, f64),
) -> (Vec<f32>, Vec<(&'static str, f64)>) {
    let level_db = rng.gen_range(-30.0..=-5.0);
    let snr_db = rng.gen_range(10.0..=30.0);
    let f0 = rng.gen_range(100.0..=180.0);
    let fs = TARGET_RATE as f64;
    let mut samples = vec![0.0f64; clip_len()];
    let mut k = 1;
    while k as f64 * f0 <= 4000.0 {
        let f = k as f64 * f0;
        let a = (-(f - form1).powi(2) / (2.0 * 100.0f64.powi(2))).exp()
            + 0.7 * (-(f - form2).powi(2) / (2.0 * 120.0f64.powi(2))).exp();
        if a > 1e-4 {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * f / fs;
            for (n, s) in samples.iter_mut().enumerate() {
                *s += a * (w * n as f64 + phase).sin();
            }
        }
        k += 1;
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let amp = 10f64.powf(level_db / 20.0);
    let scale = amp / peak;
    let mut out: Vec<f32> = samples.iter().map(|&v| (v * scale) as f32).collect();
    let rms = (out.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / out.len() as f64).sqrt();
    add_noise_at_snr(rng, &mut out, rms, snr_db);
    (
        out,
        vec![
            ("f1_hz", form1),
            ("f2_hz", form2),
            ("pitch_hz", f0),
            ("level_db", level_db),
            ("snr_db", snr_db),
        ],
    )
}

// ============================================================================
// Tests
// ============================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::dominant_frequency_hz;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_synthetic_task(TaskKind::ChirpClasses, 42);
        let b = gen_synthetic_task(TaskKind::ChirpClasses, 42);
        assert_eq!(a.clips.len(), b.clips.len());
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.wave.samples, y.wave.samples);
            assert_eq!(x.label, y.label);
            assert_eq!(x.id, y.id);
        }
        let c = gen_synthetic_task(TaskKind::ChirpClasses, 43);
        assert_ne!(a.clips[0].wave.samples, c.clips[0].wave.samples);
    }

    #[test]
    fn splits_are_class_balanced_and_sized() {
        for kind in TaskKind::all() {
            let task = gen_synthetic_task(kind, 7);
            let k = task.class_count();
            let expect = [
                (Split::Train, TRAIN_CLIPS / k),
                (Split::Valid, HOLDOUT_BUDGET / k),
                (Split::Test, HOLDOUT_BUDGET / k),
            ];
            for (split, per_class) in expect {
                let idx = task.indices(split);
                assert_eq!(idx.len(), per_class * k, "{:?} {:?}", kind, split);
                for class in 0..k {
                    let n = idx.iter().filter(|&&i| task.clips[i].label == class).count();
                    assert_eq!(n, per_class, "{:?} {:?} class {class}", kind, split);
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_by_content() {
        for kind in TaskKind::all() {
            let task = gen_synthetic_task(kind, 3);
            assert!(task.splits_disjoint(), "{:?} splits share content", kind);
        }
    }

    #[test]
    fn tone_levels_cover_the_requested_range() {
        let task = gen_synthetic_task(TaskKind::LoudnessTones, 11);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for clip in &task.clips {
            let level = clip
                .gen_params
                .iter()
                .find(|(n, _)| *n == "level_db")
                .map(|(_, v)| *v)
                .expect("tone clips record their level");
            assert!((TONE_LEVEL_LO_DB..=0.0).contains(&level), "level {level} out of range");
            lo = lo.min(level);
            hi = hi.max(level);
        }
        assert!(hi - lo > 30.0, "levels should spread over the range, got [{lo}, {hi}]");
        // Measured peak amplitude tracks the drawn level (tone + bounded noise).
        for clip in task.clips.iter().take(16) {
            let level = clip.gen_params.iter().find(|(n, _)| *n == "level_db").unwrap().1;
            let amp = 10f64.powf(level / 20.0);
            let peak =
                clip.wave.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
            assert!(peak <= 1.0 + 1e-6);
            assert!(peak >= amp * 0.7, "peak {peak} far below drawn amplitude {amp}");
        }
    }

    #[test]
    fn widened_level_range_reaches_lower() {
        let task = gen_loudness_tones(5, -60.0);
        let min_level = task
            .clips
            .iter()
            .map(|c| c.gen_params.iter().find(|(n, _)| *n == "level_db").unwrap().1)
            .fold(f64::INFINITY, f64::min);
        assert!(min_level < -45.0, "widened range should reach below -45, got {min_level}");
    }

    #[test]
    fn chirp_flat_class_sits_at_its_frequency() {
        let task = gen_synthetic_task(TaskKind::ChirpClasses, 2);
        let flat = task.clips.iter().find(|c| c.label == 2 && c.split == Split::Test).unwrap();
        let dom = dominant_frequency_hz(&flat.wave);
        assert!((dom - 1200.0).abs() < 60.0, "flat chirp peaks at {dom} Hz");
    }

    #[test]
    fn vowel_classes_differ_in_content() {
        let task = gen_synthetic_task(TaskKind::NoisyVowels, 9);
        let a = task.clips.iter().find(|c| c.label == 0).unwrap();
        let i = task.clips.iter().find(|c| c.label == 1).unwrap();
        assert_ne!(hash_samples(&a.wave.samples), hash_samples(&i.wave.samples));
        for clip in task.clips.iter().take(8) {
            let peak = clip.wave.samples.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            assert!(peak > 0.01, "vowel clip should be audible");
        }
    }

    #[test]
    fn manifest_lists_every_clip_once() {
        let task = gen_synthetic_task(TaskKind::NoisyVowels, 1);
        let manifest = task.manifest_json();
        let doc: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(doc["clips"].as_array().unwrap().len(), task.clips.len());
        assert_eq!(doc["kind"], "noisy_vowels");
        assert_eq!(doc["classes"].as_array().unwrap().len(), 4);
        assert_eq!(doc["generator_seed"], 1);
    }

    #[test]
    fn kind_parsing_round_trips() {
        for kind in TaskKind::all() {
            let parsed: TaskKind = kind.label().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("mystery_task".parse::<TaskKind>().is_err());
    }
}
