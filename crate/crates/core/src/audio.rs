//! Listening material: mono clips, noise mixing at a target SNR, and
//! band-limited resampling.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fft::{self, Fft};
use crate::{Error, Result};

/// A mono sample buffer. Samples are finite; the clip is never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    pub id: String,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let id = id.into();
        if sample_rate_hz == 0 {
            return Err(Error::InvalidRate(0));
        }
        if samples.is_empty() {
            return Err(Error::InvalidClip(alloc::format!("clip {id} is empty")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidClip(alloc::format!("clip {id} has a non-finite sample at {i}")));
        }
        Ok(Self { samples, sample_rate_hz, id })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f64 {
        peak(&self.samples)
    }

    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    /// Same clip with new samples; the id and rate are kept.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(self.id.clone(), samples, self.sample_rate_hz)
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn power_db(p: f64) -> f64 {
    10.0 * libm::log10(p)
}

pub fn db_to_amplitude(db: f64) -> f64 {
    libm::pow(10.0, db / 20.0)
}

/// Power of `x` within `[lo_hz, hi_hz)`, measured with a single zero-padded DFT
/// over the whole buffer (Parseval-normalized so the full band equals mean power).
pub fn band_power(x: &[f64], sample_rate_hz: u32, lo_hz: f64, hi_hz: f64) -> f64 {
    let n = x.len().next_power_of_two();
    let fft = Fft::new(n);
    let spec = fft::power_spectrum(&fft, x);
    let bin_hz = sample_rate_hz as f64 / n as f64;
    let mut total = 0.0;
    for (k, p) in spec.iter().enumerate() {
        let f = k as f64 * bin_hz;
        if f >= lo_hz && f < hi_hz {
            // interior bins stand for their mirror image too
            let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            total += w * p;
        }
    }
    total / (n as f64 * x.len() as f64)
}

/// The two scaled components of a mix and their sum. `speech + noise == mixed`
/// sample by sample (up to rounding).
#[derive(Debug, Clone)]
pub struct Mix {
    pub speech: Vec<f64>,
    pub noise: Vec<f64>,
    pub mixed: AudioClip,
    /// Amplitude factor applied to the noise before peak normalization.
    pub noise_gain: f64,
    /// Common factor applied to both components by peak normalization (≤ 1).
    pub peak_scale: f64,
}

/// Amplitude factor that brings noise of power `noise_power` to `snr_db` below
/// speech of power `speech_power`.
pub fn snr_noise_gain(speech_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if speech_power <= 0.0 {
        return Err(Error::ZeroPower("speech"));
    }
    if noise_power <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    Ok(libm::sqrt(speech_power / (noise_power * libm::pow(10.0, snr_db / 10.0))))
}

/// Uniform crop offset into a noise buffer.
pub fn random_noise_offset<R: Rng + ?Sized>(noise_len: usize, rng: &mut R) -> usize {
    if noise_len <= 1 {
        0
    } else {
        rng.gen_range(0..noise_len)
    }
}

/// Mixes `speech` with a segment of `noise` starting at `noise_offset` (wrapping
/// around when the noise is shorter than the speech) at exactly `snr_db`,
/// measured over the speech extent. The result is rescaled only if its peak
/// exceeds 1, with the same factor for both components.
pub fn mix_components(speech: &AudioClip, noise: &AudioClip, snr_db: f64, noise_offset: usize) -> Result<Mix> {
    if speech.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::InvalidClip(alloc::format!(
            "sample rates differ: speech {} Hz, noise {} Hz",
            speech.sample_rate_hz(),
            noise.sample_rate_hz()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParams(alloc::format!("snr {snr_db} dB")));
    }
    let n = speech.len();
    let nl = noise.len();
    let segment: Vec<f64> = (0..n).map(|i| noise.samples()[(noise_offset + i) % nl]).collect();
    let gain = snr_noise_gain(speech.power(), mean_power(&segment), snr_db)?;
    let mut s: Vec<f64> = speech.samples().to_vec();
    let mut v: Vec<f64> = segment.iter().map(|x| x * gain).collect();
    let mixed: Vec<f64> = s.iter().zip(&v).map(|(a, b)| a + b).collect();
    let pk = peak(&mixed);
    let peak_scale = if pk > 1.0 { 1.0 / pk } else { 1.0 };
    let mixed = if peak_scale < 1.0 {
        s.iter_mut().for_each(|x| *x *= peak_scale);
        v.iter_mut().for_each(|x| *x *= peak_scale);
        s.iter().zip(&v).map(|(a, b)| a + b).collect()
    } else {
        mixed
    };
    let id = alloc::format!("{}+{}@{}", speech.id, noise.id, noise_offset);
    Ok(Mix {
        speech: s,
        noise: v,
        mixed: AudioClip::new(id, mixed, speech.sample_rate_hz())?,
        noise_gain: gain,
        peak_scale,
    })
}

pub fn mix_at_snr(speech: &AudioClip, noise: &AudioClip, snr_db: f64, noise_offset: usize) -> Result<AudioClip> {
    mix_components(speech, noise, snr_db, noise_offset).map(|m| m.mixed)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

const RESAMPLE_STOPBAND_DB: f64 = 60.0;
/// Passband and stopband edges as fractions of the lower Nyquist frequency.
const RESAMPLE_PASS: f64 = 0.75;
const RESAMPLE_STOP: f64 = 0.875;

/// Band-limited resampling with a Kaiser-windowed sinc kernel evaluated at each
/// output instant. The anti-alias filter passes up to 0.75 and stops (≥ 60 dB)
/// from 0.875 of the lower of the two Nyquist frequencies.
pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip> {
    if target_hz == 0 {
        return Err(Error::InvalidRate(target_hz));
    }
    let src_hz = clip.sample_rate_hz();
    if target_hz == src_hz {
        return Ok(clip.clone());
    }
    let src = src_hz as f64;
    let nyq = 0.5 * (src_hz.min(target_hz)) as f64;
    let cutoff = 0.5 * (RESAMPLE_PASS + RESAMPLE_STOP) * nyq / src; // cycles per input sample
    let transition = (RESAMPLE_STOP - RESAMPLE_PASS) * nyq / src;
    let taps = (RESAMPLE_STOPBAND_DB - 8.0) / (2.285 * 2.0 * PI * transition);
    let half_width = libm::ceil(taps / 2.0);
    let beta = 0.1102 * (RESAMPLE_STOPBAND_DB - 8.7);
    let i0_beta = bessel_i0(beta);

    let x = clip.samples();
    let out_len = libm::round(x.len() as f64 * target_hz as f64 / src) as usize;
    let step = src / target_hz as f64;
    let mut out = Vec::with_capacity(out_len.max(1));
    for m in 0..out_len.max(1) {
        let t = m as f64 * step;
        let lo = libm::ceil(t - half_width).max(0.0) as usize;
        let hi = (libm::floor(t + half_width) as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (n, &xn) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - n as f64;
            let r = d / half_width;
            if r.abs() > 1.0 {
                continue;
            }
            let w = bessel_i0(beta * libm::sqrt(1.0 - r * r)) / i0_beta;
            let arg = 2.0 * cutoff * d;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { libm::sin(PI * arg) / (PI * arg) };
            acc += xn * 2.0 * cutoff * sinc * w;
        }
        out.push(acc);
    }
    AudioClip::new(clip.id.clone(), out, target_hz)
}
