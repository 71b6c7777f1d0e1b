//! Reference fittings and the synthetic listening corpus used by tests and
//! desk-scale runs.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::action::Prescription;
use crate::audio::{self, AudioClip};
use crate::drc::BandSpec;
use crate::{Result, RunRng};

/// One published fitting over the bands 0.5/1/2/4/6 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectFitting {
    pub subject: u32,
    pub audiogram_db_hl: [f64; 5],
    pub soft_gains_db: [f64; 5],
    pub reference_cr: [f64; 5],
    pub personalized_cr: [f64; 5],
}

pub const REFERENCE_SUBJECTS: [SubjectFitting; 5] = [
    SubjectFitting {
        subject: 1,
        audiogram_db_hl: [15.0, 20.0, 20.0, 30.0, 30.0],
        soft_gains_db: [7.0, 8.0, 14.0, 17.0, 15.0],
        reference_cr: [1.1, 1.2, 1.3, 1.2, 1.3],
        personalized_cr: [1.1, 1.2, 1.3, 4.8, 5.2],
    },
    SubjectFitting {
        subject: 2,
        audiogram_db_hl: [15.0, 15.0, 20.0, 20.0, 30.0],
        soft_gains_db: [5.0, 6.0, 14.0, 15.0, 15.0],
        reference_cr: [1.1, 1.2, 1.3, 1.2, 1.2],
        personalized_cr: [4.4, 1.2, 5.2, 1.2, 4.8],
    },
    SubjectFitting {
        subject: 3,
        audiogram_db_hl: [20.0, 20.0, 40.0, 50.0, 60.0],
        soft_gains_db: [11.0, 12.0, 24.0, 29.0, 34.0],
        reference_cr: [1.1, 1.2, 1.3, 1.2, 1.4],
        personalized_cr: [4.4, 1.2, 1.3, 4.8, 5.6],
    },
    SubjectFitting {
        subject: 4,
        audiogram_db_hl: [25.0, 20.0, 20.0, 40.0, 30.0],
        soft_gains_db: [13.0, 11.0, 14.0, 22.0, 15.0],
        reference_cr: [1.1, 1.3, 1.3, 1.3, 1.3],
        personalized_cr: [4.4, 1.3, 1.3, 5.2, 1.3],
    },
    SubjectFitting {
        subject: 5,
        audiogram_db_hl: [20.0, 20.0, 30.0, 40.0, 40.0],
        soft_gains_db: [6.0, 11.0, 20.0, 23.0, 20.0],
        reference_cr: [1.1, 1.2, 1.3, 1.2, 1.4],
        personalized_cr: [1.1, 1.2, 1.3, 4.8, 5.6],
    },
];

impl SubjectFitting {
    pub fn prescription(&self) -> Prescription {
        Prescription {
            bands: BandSpec::default(),
            gains_soft_db: self.soft_gains_db.to_vec(),
            gains_loud_db: None,
            cr_reference: self.reference_cr.to_vec(),
        }
    }
}

/// Prescription used when a run does not name one: the first subject's fitting.
pub fn default_prescription() -> Prescription {
    REFERENCE_SUBJECTS[0].prescription()
}

/// Shape of the generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub sample_rate_hz: u32,
    pub n_speakers: usize,
    pub sentences_per_speaker: usize,
    pub sentence_s: f64,
    pub noise_s: f64,
    /// RMS level of every sentence, dB re full scale.
    pub speech_rms_dbfs: f64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            n_speakers: 4,
            sentences_per_speaker: 5,
            sentence_s: 2.0,
            noise_s: 10.0,
            speech_rms_dbfs: -25.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub speech: Vec<AudioClip>,
    pub noise: AudioClip,
}

fn normalize_rms(x: &mut [f64], rms_dbfs: f64) {
    let p = audio::mean_power(x);
    if p > 0.0 {
        let k = audio::db_to_amplitude(rms_dbfs) / libm::sqrt(p);
        x.iter_mut().for_each(|v| *v *= k);
    }
}

/// Harmonic "sentence": a gliding fundamental, three resonances, spectral tilt
/// and a syllable-rate amplitude envelope.
fn sentence<R: Rng>(rng: &mut R, f0_base: f64, cfg: &SyntheticCorpusConfig) -> Vec<f64> {
    let fs = cfg.sample_rate_hz as f64;
    let n = (cfg.sentence_s * fs) as usize;
    let formants = [
        (rng.gen_range(300.0..800.0), 120.0),
        (rng.gen_range(900.0..2200.0), 200.0),
        (rng.gen_range(2300.0..3500.0), 300.0),
    ];
    let syll_rate = rng.gen_range(3.0..5.0);
    let syll_phase = rng.gen_range(0.0..2.0 * PI);
    let glide = rng.gen_range(-0.15..0.15);
    let max_f = 0.45 * fs;
    let n_harm = (max_f / (f0_base * 0.85)) as usize;
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let f = f0_base * h as f64;
            let res: f64 = formants
                .iter()
                .map(|(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw) * ((f - fc) / bw)))
                .sum();
            (0.15 + res) / libm::sqrt(h as f64)
        })
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let mut out = alloc::vec![0.0; n];
    let mut phase0 = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / fs;
        let f0 = f0_base * (1.0 + glide * t / cfg.sentence_s + 0.02 * libm::sin(2.0 * PI * 5.5 * t));
        phase0 += 2.0 * PI * f0 / fs;
        let env = 0.25 + 0.75 * libm::pow(0.5 + 0.5 * libm::sin(2.0 * PI * syll_rate * t + syll_phase), 2.0);
        let mut v = 0.0;
        for (h, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
            if f0 * (h + 1) as f64 >= max_f {
                break;
            }
            v += a * libm::sin((h + 1) as f64 * phase0 + ph);
        }
        *o = env * v;
    }
    normalize_rms(&mut out, cfg.speech_rms_dbfs);
    out
}

/// Speech-shaped noise: white noise through a one-pole low-pass plus a
/// high-frequency component, with slow random level fluctuation.
fn babble<R: Rng>(rng: &mut R, cfg: &SyntheticCorpusConfig) -> Vec<f64> {
    let fs = cfg.sample_rate_hz as f64;
    let n = (cfg.noise_s * fs) as usize;
    let a = libm::exp(-2.0 * PI * 800.0 / fs);
    let mut lp = 0.0;
    let mut env = 1.0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.gen_range(-1.0..1.0);
        lp = a * lp + (1.0 - a) * w;
        env = 0.9995 * env + 0.0005 * rng.gen_range(0.3..1.7);
        out.push(env * (4.0 * lp + 0.15 * w));
    }
    normalize_rms(&mut out, cfg.speech_rms_dbfs);
    out
}

pub fn synthetic_corpus(cfg: &SyntheticCorpusConfig, seed: u64) -> Result<SyntheticCorpus> {
    let mut rng = RunRng::seed_from_u64(seed);
    let mut speech = Vec::new();
    for spk in 0..cfg.n_speakers {
        let f0 = if spk % 2 == 0 { rng.gen_range(95.0..140.0) } else { rng.gen_range(170.0..240.0) };
        for sent in 0..cfg.sentences_per_speaker {
            let samples = sentence(&mut rng, f0, cfg);
            speech.push(AudioClip::new(format!("spk{spk:02}_s{sent:03}"), samples, cfg.sample_rate_hz)?);
        }
    }
    let noise = AudioClip::new("babble", babble(&mut rng, cfg), cfg.sample_rate_hz)?;
    Ok(SyntheticCorpus { speech, noise })
}
