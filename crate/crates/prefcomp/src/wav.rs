//! WAV reading and writing. Multichannel input is averaged to mono.

use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use prefcomp_core::audio::AudioClip;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

/// Reads integer PCM (8 to 32 bit) or 32-bit float WAV. The clip id is the
/// file stem.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let reader = WavReader::open(path).map_err(|e| format_err(path, e))?;
    decode(reader, id).map_err(|e| format_err(path, e))
}

pub fn read_wav_bytes(bytes: &[u8], id: &str) -> Result<AudioClip> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(|e| format_err(Path::new(id), e))?;
    decode(reader, id.to_string()).map_err(|e| format_err(Path::new(id), e))
}

fn decode<R: std::io::Read>(reader: WavReader<R>, id: String) -> std::result::Result<AudioClip, String> {
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| e.to_string())?
        }
        SampleFormat::Int => {
            let scale = 2f64.powi(i32::from(spec.bits_per_sample) - 1);
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>().map_err(|e| e.to_string())?
        }
    };
    if interleaved.len() % channels != 0 {
        return Err("truncated sample data".into());
    }
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect();
    AudioClip::new(id, mono, spec.sample_rate).map_err(|e| e.to_string())
}

fn spec(clip: &AudioClip, format: WavFormat) -> WavSpec {
    let (bits_per_sample, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    WavSpec { channels: 1, sample_rate: clip.sample_rate_hz(), bits_per_sample, sample_format }
}

fn encode<W: std::io::Write + std::io::Seek>(w: W, clip: &AudioClip, format: WavFormat) -> hound::Result<()> {
    let mut writer = WavWriter::new(w, spec(clip, format))?;
    for &s in clip.samples() {
        let s = s.clamp(-1.0, 1.0);
        match format {
            WavFormat::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()
}

/// Samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    encode(std::io::BufWriter::new(file), clip, format).map_err(|e| format_err(path, e))
}

pub fn wav_bytes(clip: &AudioClip, format: WavFormat) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    encode(&mut buf, clip, format).expect("in-memory WAV encoding cannot fail");
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone() -> AudioClip {
        let s = (0..800).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
        AudioClip::new("tone", s, 16000).unwrap()
    }

    #[test]
    fn float_round_trip_is_exact_to_f32() {
        let clip = tone();
        let back = read_wav_bytes(&wav_bytes(&clip, WavFormat::Float32), "tone").unwrap();
        assert_eq!(back.sample_rate_hz(), 16000);
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn pcm16_round_trip_within_one_step() {
        let clip = tone();
        let back = read_wav_bytes(&wav_bytes(&clip, WavFormat::Pcm16), "tone").unwrap();
        assert_eq!(back.len(), clip.len());
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }

    #[test]
    fn stereo_is_averaged() {
        let mut buf = Cursor::new(Vec::new());
        let spec = WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::new(&mut buf, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = read_wav_bytes(buf.get_ref(), "st").unwrap();
        assert_eq!(clip.len(), 10);
        assert!(clip.samples().iter().all(|&s| s == 0.25));
    }

    #[test]
    fn truncated_header_is_a_format_error() {
        let bytes = wav_bytes(&tone(), WavFormat::Pcm16);
        assert!(matches!(read_wav_bytes(&bytes[..20], "t"), Err(Error::Format { .. })));
    }
}
