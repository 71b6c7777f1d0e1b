//! Corpus directories, their line-delimited manifest and the synthetic
//! fixture corpus on disk.

use std::fs;
use std::path::{Path, PathBuf};

use prefcomp_core::audio::{resample, AudioClip};
use prefcomp_core::fixtures::{synthetic_corpus, SyntheticCorpusConfig};
use walkdir::WalkDir;

use crate::error::{Error, IoContext, Result};
use crate::wav::{read_wav, write_wav, WavFormat};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the corpus root without extension, `/`-separated.
    pub id: String,
    pub path: PathBuf,
    /// First directory below the root, empty for files at the root.
    pub speaker: String,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Lists every WAV below `root` in lexicographic path order, checking that
/// each one decodes.
pub fn load_corpus(root: &Path) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    for e in WalkDir::new(root).sort_by_file_name() {
        let e = e.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::Io { path, source: e.into() }
        })?;
        if !e.file_type().is_file() || !is_wav(e.path()) {
            continue;
        }
        read_wav(e.path())?;
        let rel = e.path().strip_prefix(root).unwrap_or(e.path());
        let parts: Vec<String> = rel.with_extension("").components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        entries.push(ManifestEntry {
            id: parts.join("/"),
            path: e.path().to_path_buf(),
            speaker: if parts.len() > 1 { parts[0].clone() } else { String::new() },
            sentence: parts.last().cloned().unwrap_or_default(),
        });
    }
    if entries.is_empty() {
        return Err(Error::NoAudioFound(root.to_path_buf()));
    }
    Ok(CorpusManifest { entries })
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `id<TAB>path<TAB>speaker<TAB>sentence` line per entry.
    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.path.display(), e.speaker, e.sentence)).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                match f.as_slice() {
                    [id, path, speaker, sentence] => Ok(ManifestEntry {
                        id: id.to_string(),
                        path: PathBuf::from(path),
                        speaker: speaker.to_string(),
                        sentence: sentence.to_string(),
                    }),
                    _ => Err(Error::Config(format!("manifest line needs 4 tab-separated fields: {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path).at(path)?)
    }

    /// Decodes every entry, resampled to `target_hz`, with the manifest id as
    /// clip id.
    pub fn load_clips(&self, target_hz: u32) -> Result<Vec<AudioClip>> {
        self.entries
            .iter()
            .map(|e| {
                let mut clip = read_wav(&e.path)?;
                clip.id = e.id.clone();
                if clip.sample_rate_hz() != target_hz {
                    clip = resample(&clip, target_hz)?;
                }
                Ok(clip)
            })
            .collect()
    }
}

/// Writes the synthetic corpus as `speech/<speaker>/<sentence>.wav` and
/// `noise/babble.wav` (32-bit float) and returns the two directories.
pub fn write_synthetic_corpus(root: &Path, cfg: &SyntheticCorpusConfig, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let corpus = synthetic_corpus(cfg, seed)?;
    let speech_dir = root.join("speech");
    let noise_dir = root.join("noise");
    fs::create_dir_all(&noise_dir).at(&noise_dir)?;
    for clip in &corpus.speech {
        let (speaker, sentence) = clip.id.split_once('_').unwrap_or(("", &clip.id));
        let path = speech_dir.join(speaker).join(format!("{sentence}.wav"));
        let dir = path.parent().unwrap_or(&speech_dir);
        fs::create_dir_all(dir).at(dir)?;
        write_wav(&path, clip, WavFormat::Float32)?;
    }
    write_wav(&noise_dir.join("babble.wav"), &corpus.noise, WavFormat::Float32)?;
    Ok((speech_dir, noise_dir))
}
