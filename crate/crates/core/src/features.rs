//! Log-Mel observations: framed power spectra through a triangular Mel
//! filterbank, cut into a stack of fixed-width images.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::action::CrAdjustment;
use crate::audio::AudioClip;
use crate::fft::{self, Fft};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_frames_per_image: usize,
    pub n_stack: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { frame_ms: 20.0, hop_ms: 10.0, n_mels: 80, n_frames_per_image: 80, n_stack: 3, log_floor: 1e-10 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.frame_ms > 0.0
            && self.hop_ms > 0.0
            && self.n_mels > 0
            && self.n_frames_per_image > 0
            && self.n_stack > 0
            && self.log_floor > 0.0;
        if !positive {
            return Err(Error::InvalidParams("feature sizes must be positive".into()));
        }
        if self.hop_ms > self.frame_ms {
            return Err(Error::InvalidParams("hop longer than frame".into()));
        }
        Ok(())
    }

    /// Shape of every observation: (mels, frames per image, images).
    pub fn shape(&self) -> [usize; 3] {
        [self.n_mels, self.n_frames_per_image, self.n_stack]
    }

    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        libm::round(self.frame_ms * sample_rate_hz as f64 / 1000.0) as usize
    }

    pub fn hop_len(&self, sample_rate_hz: u32) -> usize {
        libm::round(self.hop_ms * sample_rate_hz as f64 / 1000.0) as usize
    }

    /// Samples needed to fill every image without padding.
    pub fn samples_for_full_observation(&self, sample_rate_hz: u32) -> usize {
        let frames = self.n_frames_per_image * self.n_stack;
        self.frame_len(sample_rate_hz) + (frames - 1) * self.hop_len(sample_rate_hz)
    }

    pub fn floor_value(&self) -> f64 {
        libm::log(self.log_floor)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// n_mels × T matrix, row-major by Mel band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.data[mel * self.n_frames + frame]
    }
}

/// Front-end for one (config, sample rate) pair; the filterbank is built once.
#[derive(Debug, Clone)]
pub struct LogMel {
    cfg: FeatureConfig,
    sample_rate_hz: u32,
    frame: usize,
    hop: usize,
    fft: Fft,
    window: Vec<f64>,
    /// Per Mel band: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl LogMel {
    pub fn new(cfg: &FeatureConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate()?;
        let frame = cfg.frame_len(sample_rate_hz);
        let hop = cfg.hop_len(sample_rate_hz).max(1);
        if frame < 2 {
            return Err(Error::InvalidParams("frame shorter than two samples".into()));
        }
        let n_fft = frame.next_power_of_two();
        let window = (0..frame).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / frame as f64)).collect();
        let nyq = sample_rate_hz as f64 / 2.0;
        let mel_max = hz_to_mel(nyq);
        let points: Vec<f64> =
            (0..cfg.n_mels + 2).map(|i| mel_to_hz(mel_max * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
                let weights: Vec<(usize, f64)> = (0..=n_fft / 2)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= c {
                            (f - lo) / (c - lo)
                        } else if f > c && f < hi {
                            (hi - f) / (hi - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                match (weights.first(), weights.last()) {
                    (Some(&(first, _)), Some(&(last, _))) => {
                        let mut dense = vec![0.0; last - first + 1];
                        for (k, w) in &weights {
                            dense[k - first] = *w;
                        }
                        (first, dense)
                    }
                    _ => (0, Vec::new()),
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), sample_rate_hz, frame, hop, fft: Fft::new(n_fft), window, filters })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn n_frames_for(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.frame).then(|| (n_samples - self.frame) / self.hop + 1)
    }

    pub fn spectrogram(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate_hz() != self.sample_rate_hz {
            return Err(Error::InvalidClip(alloc::format!(
                "clip at {} Hz, front-end built for {} Hz",
                clip.sample_rate_hz(),
                self.sample_rate_hz
            )));
        }
        let x = clip.samples();
        let t = self.n_frames_for(x.len()).ok_or(Error::TooShort { samples: x.len(), frame: self.frame })?;
        let n_mels = self.cfg.n_mels;
        let mut data = vec![0.0; n_mels * t];
        let mut buf = vec![0.0; self.frame];
        for j in 0..t {
            let start = j * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = x[start + i] * self.window[i];
            }
            let power = fft::power_spectrum(&self.fft, &buf);
            for (m, (first, w)) in self.filters.iter().enumerate() {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, p)| a * p).sum();
                data[m * t + j] = libm::log(e + self.cfg.log_floor);
            }
        }
        Ok(MelSpectrogram { n_mels, n_frames: t, data })
    }

    pub fn observation(&self, clip: &AudioClip) -> Result<Observation> {
        let spec = self.spectrogram(clip)?;
        Ok(Observation::from_spectrogram(&spec, &self.cfg, clip.id.clone()))
    }
}

/// Stacked log-Mel images, shape (n_mels, n_frames_per_image, n_stack), stored
/// row-major with the image index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub source_clip_id: String,
    pub cr_adj_context: Option<CrAdjustment>,
}

impl Observation {
    pub fn from_spectrogram(spec: &MelSpectrogram, cfg: &FeatureConfig, source_clip_id: String) -> Self {
        let [n_mels, width, n_stack] = cfg.shape();
        let floor = cfg.floor_value();
        let mut data = vec![floor; n_mels * width * n_stack];
        for m in 0..n_mels.min(spec.n_mels) {
            for s in 0..n_stack {
                for f in 0..width {
                    let frame = s * width + f;
                    if frame < spec.n_frames {
                        data[(m * width + f) * n_stack + s] = spec.get(m, frame);
                    }
                }
            }
        }
        Self { shape: cfg.shape(), data, source_clip_id, cr_adj_context: None }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, data: vec![0.0; shape[0] * shape[1] * shape[2]], source_clip_id: String::new(), cr_adj_context: None }
    }

    pub fn get(&self, mel: usize, frame: usize, image: usize) -> f64 {
        self.data[(mel * self.shape[1] + frame) * self.shape[2] + image]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-major copy (image, mel, frame) for the convolutional front-ends.
    pub fn to_chw(&self) -> Vec<f64> {
        let [h, w, c] = self.shape;
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        out
    }
}

pub fn log_mel_spectrogram(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    LogMel::new(cfg, clip.sample_rate_hz())?.spectrogram(clip)
}

pub fn make_observation(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Observation> {
    LogMel::new(cfg, clip.sample_rate_hz())?.observation(clip)
}
