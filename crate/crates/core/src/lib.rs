//! Adaptive Gabor filter-bank audio front-end.
//!
//! This crate implements a two-layer Gabor filter-bank front-end in which the
//! second (adaptive) layer has its per-channel Q-factors retuned every frame
//! by two feedback signals computed from the previous frame: a hand-crafted
//! level-dependent rule driven by subband energy, and a small trainable
//! controller network driven by per-channel frequency deviation and/or
//! energy. The crate also provides the feature extractor that sits on top of
//! the filter-bank (log subband energies plus octave-band spectral centroid
//! magnitudes), a self-contained reverse-mode autodiff engine with Adam so
//! the controller can be trained jointly with a downstream classifier, and a
//! desk-scale benchmark harness on synthetic classification tasks.
//!
//! Module map:
//!
//! * [`audio`] — WAV and raw sample I/O, resampling to 16 kHz, framing.
//! * [`gabor`] — Gabor tap synthesis, frequency responses, filter banks,
//!   frame filtering and spatial differencing.
//! * [`fft`] — shared FFT plan cache used by filtering and features.
//! * [`grad`] — reverse-mode tape, fused DSP ops, Adam, parameter store,
//!   checkpoint I/O, finite-difference gradient checking.
//! * [`features`] — spectral envelopes, octave centroid magnitudes, frame
//!   feature assembly and the feature file format.
//! * [`frontend`] — the adaptive front-end proper: configuration, per-frame
//!   state, the level-dependent Q rule, the learned controller, the frame
//!   loop, and Q/energy traces.
//! * [`train`] — synthetic tasks, the training and evaluation harness, and
//!   the ablation matrix.

pub mod audio;
pub mod features;
pub mod fft;
pub mod frontend;
pub mod gabor;
pub mod grad;
pub mod real;
pub mod train;
