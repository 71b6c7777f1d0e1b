//! Feed-forward multiband dynamic range compressor.
//!
//! The signal is split into bands by short-time spectral masking, each band's
//! level is tracked with a 1 ms RMS detector, mapped through a two-threshold
//! static curve, smoothed with separate attack and release time constants and
//! applied as a linear gain before the bands are summed again.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::fft::{Complex, Fft};
use crate::{Error, Result};

pub const DEFAULT_BAND_EDGES_HZ: [f64; 6] = [0.0, 500.0, 1000.0, 2000.0, 4000.0, 6000.0];
/// Digital full scale maps to this level, so thresholds read as SPL-like dB.
pub const DEFAULT_CALIBRATION_DB: f64 = 100.0;
const LEVEL_WINDOW_S: f64 = 0.001;
const SPLIT_FRAME_S: f64 = 0.032;

/// Band boundaries in Hz. Content above the top edge is carried by the last band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub edges_hz: Vec<f64>,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self { edges_hz: DEFAULT_BAND_EDGES_HZ.to_vec() }
    }
}

impl BandSpec {
    pub fn new(edges_hz: Vec<f64>) -> Result<Self> {
        let spec = Self { edges_hz };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_bands(&self) -> usize {
        self.edges_hz.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges_hz.len() < 2 {
            return Err(Error::BandSpec("need at least two edges".into()));
        }
        if self.edges_hz.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::BandSpec(format!("edges must be finite and non-negative: {:?}", self.edges_hz)));
        }
        if self.edges_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BandSpec(format!("edges not strictly increasing: {:?}", self.edges_hz)));
        }
        Ok(())
    }

    pub fn validate_for_rate(&self, sample_rate_hz: u32) -> Result<()> {
        self.validate()?;
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = *self.edges_hz.last().unwrap();
        if top > nyquist {
            return Err(Error::BandSpec(format!("top edge {top} Hz above Nyquist {nyquist} Hz")));
        }
        Ok(())
    }

    /// Band index owning frequency `f_hz`.
    pub fn band_of(&self, f_hz: f64) -> usize {
        let n = self.n_bands();
        (0..n).find(|&b| f_hz < self.edges_hz[b + 1]).unwrap_or(n - 1)
    }
}

/// Per-band compression settings. `gains_db` is the linear-region gain applied
/// below the moderate threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionParams {
    pub ratios: Vec<f64>,
    pub gains_db: Vec<f64>,
    #[serde(default = "default_ct_moderate")]
    pub ct_moderate_db: f64,
    #[serde(default = "default_ct_loud")]
    pub ct_loud_db: f64,
    #[serde(default = "default_attack")]
    pub attack_s: f64,
    #[serde(default = "default_release")]
    pub release_s: f64,
    #[serde(default = "default_limiter")]
    pub limiter_ratio: f64,
}

fn default_ct_moderate() -> f64 {
    60.0
}
fn default_ct_loud() -> f64 {
    80.0
}
fn default_attack() -> f64 {
    0.01
}
fn default_release() -> f64 {
    1.0
}
fn default_limiter() -> f64 {
    10.0
}

impl CompressionParams {
    /// Default thresholds and time constants with the given ratios and gains.
    pub fn new(ratios: Vec<f64>, gains_db: Vec<f64>) -> Self {
        Self {
            ratios,
            gains_db,
            ct_moderate_db: default_ct_moderate(),
            ct_loud_db: default_ct_loud(),
            attack_s: default_attack(),
            release_s: default_release(),
            limiter_ratio: default_limiter(),
        }
    }

    /// Unity ratios, unity limiter and zero gain in every band.
    pub fn transparent(n_bands: usize) -> Self {
        Self { limiter_ratio: 1.0, ..Self::new(vec![1.0; n_bands], vec![0.0; n_bands]) }
    }

    pub fn n_bands(&self) -> usize {
        self.ratios.len()
    }

    pub fn band(&self, b: usize) -> BandParams {
        BandParams {
            ratio: self.ratios[b],
            gain_db: self.gains_db[b],
            ct_moderate_db: self.ct_moderate_db,
            ct_loud_db: self.ct_loud_db,
            limiter_ratio: self.limiter_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.len() != self.gains_db.len() {
            return Err(Error::Dimension {
                expected: self.ratios.len(),
                actual: self.gains_db.len(),
                what: "per-band gains",
            });
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 1.0)) {
            return Err(Error::InvalidParams(format!("ratios must be >= 1: {:?}", self.ratios)));
        }
        if self.gains_db.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParams("non-finite gain".into()));
        }
        if !(self.ct_moderate_db < self.ct_loud_db) {
            return Err(Error::InvalidParams(format!(
                "moderate threshold {} must be below loud threshold {}",
                self.ct_moderate_db, self.ct_loud_db
            )));
        }
        if !(self.attack_s > 0.0 && self.release_s > 0.0) {
            return Err(Error::InvalidParams("attack and release must be positive".into()));
        }
        if !(self.limiter_ratio >= 1.0) {
            return Err(Error::InvalidParams("limiter ratio must be >= 1".into()));
        }
        Ok(())
    }
}

/// One band's slice of [`CompressionParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandParams {
    pub ratio: f64,
    pub gain_db: f64,
    pub ct_moderate_db: f64,
    pub ct_loud_db: f64,
    pub limiter_ratio: f64,
}

/// Static gain curve: `gain_db` below the moderate threshold, slope `1/ratio`
/// between the thresholds, slope `1/limiter_ratio` above the loud one.
pub fn static_gain_db(level_db: f64, p: &BandParams) -> f64 {
    let mid_slope = 1.0 - 1.0 / p.ratio;
    if level_db < p.ct_moderate_db {
        p.gain_db
    } else if level_db < p.ct_loud_db {
        p.gain_db - (level_db - p.ct_moderate_db) * mid_slope
    } else {
        p.gain_db
            - (p.ct_loud_db - p.ct_moderate_db) * mid_slope
            - (level_db - p.ct_loud_db) * (1.0 - 1.0 / p.limiter_ratio)
    }
}

pub fn one_pole_coeff(tau_s: f64, sample_rate_hz: u32) -> f64 {
    libm::exp(-1.0 / (tau_s * sample_rate_hz as f64))
}

/// One-pole gain smoothing; the attack constant is used while the gain falls.
pub fn smooth_gain(raw_gain_db: &[f64], attack_s: f64, release_s: f64, sample_rate_hz: u32) -> Vec<f64> {
    let a_att = one_pole_coeff(attack_s, sample_rate_hz);
    let a_rel = one_pole_coeff(release_s, sample_rate_hz);
    let mut out = Vec::with_capacity(raw_gain_db.len());
    let mut y = match raw_gain_db.first() {
        Some(&g) => g,
        None => return out,
    };
    out.push(y);
    for &x in &raw_gain_db[1..] {
        let a = if x < y { a_att } else { a_rel };
        y = a * y + (1.0 - a) * x;
        out.push(y);
    }
    out
}

/// Splits `clip` into one signal per band with 50%-overlap Hann-windowed STFT
/// masking. The window overlap-adds to one, so the bands sum back to the input.
pub fn split_bands(clip: &AudioClip, bands: &BandSpec) -> Result<Vec<Vec<f64>>> {
    bands.validate_for_rate(clip.sample_rate_hz())?;
    let x = clip.samples();
    let fs = clip.sample_rate_hz();
    let n_fft = ((SPLIT_FRAME_S * fs as f64) as usize).max(4).next_power_of_two();
    let hop = n_fft / 2;
    let fft = Fft::new(n_fft);
    let window: Vec<f64> =
        (0..n_fft).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n_fft as f64)).collect();
    let bin_band: Vec<usize> = (0..n_fft)
        .map(|k| {
            let kk = if k <= n_fft / 2 { k } else { n_fft - k };
            bands.band_of(kk as f64 * fs as f64 / n_fft as f64)
        })
        .collect();
    let n_bands = bands.n_bands();
    let mut out = vec![vec![0.0; x.len()]; n_bands];
    let mut spec = vec![Complex::ZERO; n_fft];
    let mut masked = vec![Complex::ZERO; n_fft];
    let mut start = -(hop as isize);
    while start < x.len() as isize {
        for (i, s) in spec.iter_mut().enumerate() {
            let idx = start + i as isize;
            let v = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] } else { 0.0 };
            *s = Complex::new(v * window[i], 0.0);
        }
        fft.forward(&mut spec);
        for (b, band_out) in out.iter_mut().enumerate() {
            let mut any = false;
            for k in 0..n_fft {
                masked[k] = if bin_band[k] == b {
                    any = true;
                    spec[k]
                } else {
                    Complex::ZERO
                };
            }
            if !any {
                continue;
            }
            fft.inverse(&mut masked);
            for (i, m) in masked.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    band_out[idx as usize] += m.re;
                }
            }
        }
        start += hop as isize;
    }
    Ok(out)
}

/// Causal RMS level in dB relative to `calibration_db` over a trailing window.
pub fn rms_level_db(x: &[f64], window: usize, calibration_db: f64) -> Vec<f64> {
    let window = window.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        acc += x[i] * x[i];
        if i >= window {
            acc -= x[i - window] * x[i - window];
        }
        let n = (i + 1).min(window) as f64;
        let ms = (acc / n).max(0.0);
        out.push(10.0 * libm::log10(ms + 1e-20) + calibration_db);
    }
    out
}

/// Compressed clip plus the factor the final peak guard applied (1 when idle).
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub clip: AudioClip,
    pub peak_rescale: f64,
}

pub fn compress(
    clip: &AudioClip,
    bands: &BandSpec,
    params: &CompressionParams,
    input_calibration_db: f64,
) -> Result<AudioClip> {
    compress_with_report(clip, bands, params, input_calibration_db).map(|c| c.clip)
}

pub fn compress_with_report(
    clip: &AudioClip,
    bands: &BandSpec,
    params: &CompressionParams,
    input_calibration_db: f64,
) -> Result<Compressed> {
    params.validate()?;
    if params.n_bands() != bands.n_bands() {
        return Err(Error::Dimension { expected: bands.n_bands(), actual: params.n_bands(), what: "band count" });
    }
    let fs = clip.sample_rate_hz();
    let split = split_bands(clip, bands)?;
    let window = libm::round(LEVEL_WINDOW_S * fs as f64) as usize;
    let mut out = vec![0.0; clip.len()];
    for (b, band) in split.iter().enumerate() {
        let bp = params.band(b);
        let raw: Vec<f64> =
            rms_level_db(band, window, input_calibration_db).iter().map(|&l| static_gain_db(l, &bp)).collect();
        let smooth = smooth_gain(&raw, params.attack_s, params.release_s, fs);
        for ((o, &s), &g) in out.iter_mut().zip(band).zip(&smooth) {
            *o += s * audio::db_to_amplitude(g);
        }
    }
    let pk = audio::peak(&out);
    let peak_rescale = if pk > 1.0 { 1.0 / pk } else { 1.0 };
    if peak_rescale < 1.0 {
        out.iter_mut().for_each(|v| *v *= peak_rescale);
    }
    Ok(Compressed { clip: clip.with_samples(out)?, peak_rescale })
}
