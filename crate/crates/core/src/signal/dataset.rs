use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{synth_mixture, MultiChannelRecording, SourceMeta, SynthConfig};
use crate::error::{Error, Result};

/// One utterance in a split manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: String,
    pub channel_files: Vec<String>,
    pub num_samples: usize,
    pub sample_rate: u32,
    pub transcripts: Vec<Vec<u32>>,
    pub source_meta: SourceMeta,
}

/// `manifest.json` of a split directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    /// Generator settings; `seed` is the split's base seed and utterance `i`
    /// uses `seed + i`.
    pub synth: SynthConfig,
    pub utterances: Vec<UtteranceEntry>,
}

/// A loaded split.
#[derive(Clone, Debug)]
pub struct Split {
    pub manifest: Manifest,
    pub recordings: Vec<MultiChannelRecording>,
}

/// Seed used for utterance `index` of a split.
pub(crate) fn utterance_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Synthesises `utts` mixtures and writes them as `utt<id>_ch<c>.f64`
/// little-endian raw files plus `manifest.json` under `dir`.
pub fn write_split(dir: &Path, split: &str, synth: &SynthConfig, utts: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut utterances = Vec::with_capacity(utts);
    for i in 0..utts {
        let cfg = SynthConfig {
            seed: utterance_seed(synth.seed, i),
            ..synth.clone()
        };
        let rec = synth_mixture(&cfg)?;
        let id = format!("{i:05}");
        let mut files = Vec::with_capacity(rec.n_mics());
        for (c, ch) in rec.samples.iter().enumerate() {
            let name = format!("utt{id}_ch{c}.f64");
            let mut bytes = Vec::with_capacity(ch.len() * 8);
            for x in ch {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            fs::File::create(dir.join(&name))?.write_all(&bytes)?;
            files.push(name);
        }
        utterances.push(UtteranceEntry {
            id,
            channel_files: files,
            num_samples: rec.len(),
            sample_rate: rec.sample_rate,
            transcripts: rec.transcripts,
            source_meta: rec.source_meta,
        });
    }
    let manifest = Manifest {
        split: split.to_string(),
        synth: synth.clone(),
        utterances,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_split(dir: &Path) -> Result<Split> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut recordings = Vec::with_capacity(manifest.utterances.len());
    for u in &manifest.utterances {
        let mut samples = Vec::with_capacity(u.channel_files.len());
        for f in &u.channel_files {
            let mut bytes = Vec::new();
            fs::File::open(dir.join(f))?.read_to_end(&mut bytes)?;
            if bytes.len() != u.num_samples * 8 {
                return Err(Error::InvalidArgument(format!(
                    "{f}: expected {} samples, found {} bytes",
                    u.num_samples,
                    bytes.len()
                )));
            }
            samples.push(
                bytes
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        recordings.push(MultiChannelRecording {
            samples,
            sample_rate: u.sample_rate,
            transcripts: u.transcripts.clone(),
            source_meta: u.source_meta.clone(),
        });
    }
    Ok(Split { manifest, recordings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        let m = write_split(dir.path(), "train", &synth, 3).unwrap();
        assert!(dir.path().join("utt00001_ch3.f64").exists());
        let split = load_split(dir.path()).unwrap();
        assert_eq!(split.manifest, m);
        for (i, rec) in split.recordings.iter().enumerate() {
            let again = synth_mixture(&SynthConfig {
                seed: utterance_seed(3, i),
                ..synth.clone()
            })
            .unwrap();
            assert_eq!(rec, &again);
        }
    }
}
