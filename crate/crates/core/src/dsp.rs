//! Audio front end: WAV decoding, resampling, STFT and log mel-spectrograms.
//!
//! Conventions: periodic Hann window, power spectrum (|X|²) before the mel
//! filterbank, HTK mel scale `2595·log10(1 + f/700)`, and `log10` compression
//! with an additive floor.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use std::io::Cursor;

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedCodec(String),
    #[error("truncated WAV data chunk: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("invalid DSP configuration: {0}")]
    InvalidConfig(String),
    #[error("mel filter {index} covers no FFT bin (too many mel bands for frame size {frame_size})")]
    EmptyFilter { index: usize, frame_size: usize },
    #[error("signal has {len} samples, shorter than one frame of {frame_size}")]
    TooShort { len: usize, frame_size: usize },
    #[error("signal sample rate {actual} Hz does not match configured {expected} Hz; resample first")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("cannot extract patches from an empty spectrogram")]
    EmptySpectrogram,
    #[error("invalid patch geometry: patch_frames and stride must be >= 1")]
    InvalidPatch,
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmSignal<S> {
    samples: Vec<S>,
    sample_rate: u32,
}

impl<S: Scalar> PcmSignal<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSignal("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(DspError::InvalidSignal(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[S] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<S> {
        self.samples
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub target_sample_rate: u32,
    pub frame_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_epsilon: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            target_sample_rate: 22050,
            frame_size: 1024,
            hop_size: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 11025.0,
            log_epsilon: 1e-10,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DspError::InvalidConfig(msg));
        if self.target_sample_rate == 0 {
            return bad("target_sample_rate must be positive".into());
        }
        if self.hop_size == 0 || self.hop_size > self.frame_size {
            return bad(format!(
                "need 0 < hop_size <= frame_size, got hop {} frame {}",
                self.hop_size, self.frame_size
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        let nyquist = self.target_sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min {} f_max {}",
                self.f_min, self.f_max
            ));
        }
        if !(self.log_epsilon > 0.0 && self.log_epsilon.is_finite()) {
            return bad("log_epsilon must be a positive finite number".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Frame count for a signal of `len` samples (`len >= frame_size`).
    pub fn n_frames(&self, len: usize) -> usize {
        (len - self.frame_size) / self.hop_size + 1
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * self.target_sample_rate as f64 / self.frame_size as f64
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }
}

/// Index of the first maximum (strict comparison keeps the lowest index on ties).
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// WAV

fn wav_error(e: hound::Error) -> DspError {
    match e {
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            DspError::UnsupportedCodec(e.to_string())
        }
        other => DspError::MalformedHeader(other.to_string()),
    }
}

/// Decodes a RIFF/WAVE stream holding integer PCM (8 to 32 bits) or float32
/// audio, 1 or 2 channels. Stereo is downmixed by channel mean.
pub fn decode_wav<S: Scalar>(bytes: &[u8]) -> Result<PcmSignal<S>> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes)).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.sample_rate == 0 {
        return Err(DspError::MalformedHeader("sample rate is zero".into()));
    }
    if !(spec.channels == 1 || spec.channels == 2) {
        return Err(DspError::UnsupportedCodec(format!("{} channels", spec.channels)));
    }
    let width = spec.bits_per_sample.div_ceil(8) as usize;
    let declared = reader.len() as usize;
    let truncated = |read: usize| DspError::Truncated {
        expected: declared * width,
        found: read * width,
    };
    let collect = |values: &mut dyn Iterator<Item = hound::Result<f64>>| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(declared);
        for v in values {
            match v {
                Ok(x) => out.push(x),
                // reading from memory fails only when the data chunk runs out
                Err(hound::Error::IoError(_)) => return Err(truncated(out.len())),
                Err(e) => return Err(wav_error(e)),
            }
        }
        Ok(out)
    };
    let raw = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => {
            collect(&mut reader.samples::<f32>().map(|r| r.map(f64::from)))?
        }
        (hound::SampleFormat::Int, bits @ 8..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            collect(&mut reader.samples::<i32>().map(|r| r.map(|x| x as f64 / scale)))?
        }
        (format, bits) => {
            return Err(DspError::UnsupportedCodec(format!("{format:?} with {bits} bits per sample")))
        }
    };
    let channels = spec.channels as usize;
    if raw.len() % channels != 0 {
        return Err(truncated(raw.len()));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| S::lit(frame.iter().sum::<f64>() / channels as f64))
        .collect();
    PcmSignal::new(samples, spec.sample_rate)
}

/// WAV sample encodings supported by [`encode_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Encodes a mono signal as a WAV file.
pub fn encode_wav<S: Scalar>(signal: &PcmSignal<S>, encoding: WavEncoding) -> Result<Vec<u8>> {
    let (sample_format, bits_per_sample) = match encoding {
        WavEncoding::Pcm16 => (hound::SampleFormat::Int, 16),
        WavEncoding::Float32 => (hound::SampleFormat::Float, 32),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample,
        sample_format,
    };
    let mut out = Cursor::new(Vec::new());
    let mut writer = hound::WavWriter::new(&mut out, spec).map_err(wav_error)?;
    for &s in signal.samples() {
        let x = s.as_f64();
        match encoding {
            WavEncoding::Pcm16 => {
                let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(q).map_err(wav_error)?;
            }
            WavEncoding::Float32 => writer.write_sample(x as f32).map_err(wav_error)?,
        }
    }
    writer.finalize().map_err(wav_error)?;
    Ok(out.into_inner())
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear-interpolation resampler. Not band-limited: content above the target
/// Nyquist frequency aliases.
pub fn resample<S: Scalar>(signal: &PcmSignal<S>, target_rate: u32) -> Result<PcmSignal<S>> {
    if target_rate == 0 {
        return Err(DspError::InvalidSignal("target rate must be positive".into()));
    }
    if target_rate == signal.sample_rate() || signal.is_empty() {
        return PcmSignal::new(signal.samples().to_vec(), target_rate);
    }
    let src = signal.samples();
    let ratio = signal.sample_rate() as f64 / target_rate as f64;
    let out_len =
        ((src.len() as f64 * target_rate as f64 / signal.sample_rate() as f64).round() as usize)
            .max(1);
    let last = src.len() - 1;
    let out = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = (pos.floor() as usize).min(last);
            let right = (left + 1).min(last);
            let frac = S::lit(pos - left as f64);
            if frac == S::zero() || left == right {
                src[left]
            } else {
                src[left] + (src[right] - src[left]) * frac
            }
        })
        .collect();
    PcmSignal::new(out, target_rate)
}

// ---------------------------------------------------------------------------
// Mel filterbank

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<S> {
    weights: Matrix<S>,
    center_freqs: Vec<f64>,
}

impl<S: Scalar> FilterBank<S> {
    /// `[n_mels × n_bins]` weight matrix.
    pub fn weights(&self) -> &Matrix<S> {
        &self.weights
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    /// Band whose center frequency is nearest `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        let mut best = 0;
        for (i, c) in self.center_freqs.iter().enumerate() {
            if (c - hz).abs() < (self.center_freqs[best] - hz).abs() {
                best = i;
            }
        }
        best
    }

    /// Rescales every filter to unit area (sum of weights) instead of unit peak.
    pub fn area_normalized(mut self) -> Self {
        for r in 0..self.weights.rows() {
            let row = self.weights.row_mut(r);
            let area: S = row.iter().copied().sum();
            if area > S::zero() {
                row.iter_mut().for_each(|w| *w /= area);
            }
        }
        self
    }
}

pub fn build_mel_filterbank<S: Scalar>(config: &DspConfig) -> Result<FilterBank<S>> {
    config.validate()?;
    let n_bins = config.n_bins();
    let mel_lo = hz_to_mel(config.f_min);
    let mel_hi = hz_to_mel(config.f_max);
    let step = (mel_hi - mel_lo) / (config.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let mut weights = Matrix::zeros(config.n_mels, n_bins);
    for m in 0..config.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = weights.row_mut(m);
        let mut any = false;
        for (bin, w) in row.iter_mut().enumerate() {
            let f = config.bin_frequency(bin);
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            let v = rise.min(fall).max(0.0);
            if v > 0.0 {
                any = true;
            }
            *w = S::lit(v);
        }
        if !any {
            return Err(DspError::EmptyFilter {
                index: m,
                frame_size: config.frame_size,
            });
        }
    }
    Ok(FilterBank {
        weights,
        center_freqs: edges[1..=config.n_mels].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// STFT

/// Periodic Hann window of length `n`.
pub fn hann_window<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| S::lit(0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Magnitude STFT, `[n_frames × (frame_size/2 + 1)]`.
pub fn stft<S: Scalar>(signal: &PcmSignal<S>, config: &DspConfig) -> Result<Matrix<S>> {
    config.validate()?;
    let frame = config.frame_size;
    if signal.len() < frame {
        return Err(DspError::TooShort {
            len: signal.len(),
            frame_size: frame,
        });
    }
    let n_frames = config.n_frames(signal.len());
    let n_bins = config.n_bins();
    let window = hann_window::<S>(frame);
    let fft = FftPlanner::<S>::new().plan_fft_forward(frame);
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); frame];
    let mut out = Matrix::zeros(n_frames, n_bins);
    let samples = signal.samples();
    for t in 0..n_frames {
        let start = t * config.hop_size;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(samples[start + i] * window[i], S::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (dst, c) in out.row_mut(t).iter_mut().zip(&buf[..n_bins]) {
            *dst = c.norm();
        }
    }
    Ok(out)
}

/// Log mel-spectrogram, `[n_frames × n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<S> {
    values: Matrix<S>,
    config: DspConfig,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn from_matrix(values: Matrix<S>, config: DspConfig) -> Self {
        assert_eq!(values.cols(), config.n_mels, "mel band count");
        Self { values, config }
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.cols()
    }
}

/// Mel-spectrogram with a prebuilt filterbank, for repeated use.
pub struct MelFrontend<S> {
    config: DspConfig,
    filterbank: FilterBank<S>,
}

impl<S: Scalar> MelFrontend<S> {
    pub fn new(config: DspConfig) -> Result<Self> {
        Ok(Self {
            filterbank: build_mel_filterbank(&config)?,
            config,
        })
    }

    pub fn config(&self) -> &DspConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &FilterBank<S> {
        &self.filterbank
    }

    pub fn compute(&self, signal: &PcmSignal<S>) -> Result<MelSpectrogram<S>> {
        if signal.sample_rate() != self.config.target_sample_rate {
            return Err(DspError::RateMismatch {
                expected: self.config.target_sample_rate,
                actual: signal.sample_rate(),
            });
        }
        let mut power = stft(signal, &self.config)?;
        for r in 0..power.rows() {
            power.row_mut(r).iter_mut().for_each(|x| *x = *x * *x);
        }
        let n_frames = power.rows();
        let n_mels = self.config.n_mels;
        let mut mel = vec![S::zero(); n_frames * n_mels];
        // mel[t, m] = Σ_k power[t, k] · fb[m, k]
        S::gemm(
            n_frames,
            self.config.n_bins(),
            n_mels,
            power.as_slice(),
            false,
            self.filterbank.weights().as_slice(),
            true,
            &mut mel,
            false,
        );
        let eps = S::lit(self.config.log_epsilon);
        mel.iter_mut().for_each(|x| *x = (x.max(S::zero()) + eps).log10());
        Ok(MelSpectrogram {
            values: Matrix::from_vec(n_frames, n_mels, mel),
            config: self.config,
        })
    }

    /// Resamples to the configured rate when needed, then computes the spectrogram.
    pub fn compute_any_rate(&self, signal: &PcmSignal<S>) -> Result<MelSpectrogram<S>> {
        if signal.sample_rate() == self.config.target_sample_rate {
            self.compute(signal)
        } else {
            self.compute(&resample(signal, self.config.target_sample_rate)?)
        }
    }
}

/// `log10(filterbank · |STFT|² + log_epsilon)`.
pub fn mel_spectrogram<S: Scalar>(
    signal: &PcmSignal<S>,
    config: &DspConfig,
) -> Result<MelSpectrogram<S>> {
    MelFrontend::new(*config)?.compute(signal)
}

/// Splits a spectrogram into fixed-length windows. Tracks shorter than one
/// patch are tiled by wrap-around into a single patch.
pub fn extract_patches<S: Scalar>(
    mel: &MelSpectrogram<S>,
    patch_frames: usize,
    stride: usize,
) -> Result<Vec<MelSpectrogram<S>>> {
    if patch_frames == 0 || stride == 0 {
        return Err(DspError::InvalidPatch);
    }
    let n = mel.n_frames();
    let width = mel.n_mels();
    if n == 0 || width == 0 {
        return Err(DspError::EmptySpectrogram);
    }
    let src = mel.values().as_slice();
    let take = |rows: &mut dyn Iterator<Item = usize>| {
        let mut data = Vec::with_capacity(patch_frames * width);
        for r in rows {
            data.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        MelSpectrogram {
            values: Matrix::from_vec(patch_frames, width, data),
            config: mel.config,
        }
    };
    if n < patch_frames {
        return Ok(vec![take(&mut (0..patch_frames).map(|i| i % n))]);
    }
    Ok((0..=(n - patch_frames) / stride)
        .map(|p| {
            let start = p * stride;
            take(&mut (start..start + patch_frames))
        })
        .collect())
}
