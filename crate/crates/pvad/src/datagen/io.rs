//! On-disk corpus layout: a JSON manifest plus per-utterance binaries.
//!
//! - features: u32-LE rows, u32-LE cols, then f32-LE row-major values
//! - labels: one byte per frame (0 = tss, 1 = ntss, 2 = ns); single-speaker
//!   utterances use 0 for their own speech and 2 for gaps
//! - embeddings: f32-LE vector, one file per speaker (the same format the
//!   streaming CLI accepts for enrollment)

use super::{Corpus, CorpusMode, FrameLabel, SyntheticSpeaker, Utterance};
use crate::error::{Error, Result};
use crate::model::SpeakerEmbedding;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ManifestSpeaker {
    id: usize,
    f0: f32,
    embedding_path: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestUtterance {
    id: usize,
    speaker_id: usize,
    frames: usize,
    feature_path: String,
    label_path: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    mode: CorpusMode,
    feature_dim: usize,
    embedding_dim: usize,
    speakers: Vec<ManifestSpeaker>,
    utterances: Vec<ManifestUtterance>,
}

pub fn write_embedding_file(path: &Path, embedding: &SpeakerEmbedding) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for v in embedding.values() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embedding_file(path: &Path, expected_dim: usize) -> Result<SpeakerEmbedding> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected_dim * 4 {
        return Err(Error::Input(format!(
            "embedding file {} holds {} bytes, expected {} (dim {expected_dim})",
            path.display(),
            bytes.len(),
            expected_dim * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    SpeakerEmbedding::from_raw(values).map_err(|e| Error::Input(e.to_string()))
}

fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(features.rows() as u32).to_le_bytes())?;
    f.write_all(&(features.cols() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(features.len() * 4);
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Input(format!(
            "feature file {} too short for its header",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let want = 8 + rows * cols * 4;
    if bytes.len() != want {
        return Err(Error::Input(format!(
            "feature file {} holds {} bytes, header implies {want}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(&[rows, cols], data))
}

/// Write `corpus` under `dir` (created if needed).
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut speakers = Vec::new();
    for s in &corpus.speakers {
        let name = format!("speaker_{}.emb", s.id);
        write_embedding_file(&dir.join(&name), &s.embedding)?;
        speakers.push(ManifestSpeaker {
            id: s.id,
            f0: s.f0,
            embedding_path: name,
        });
    }
    let mut utterances = Vec::new();
    for (i, u) in corpus.utterances.iter().enumerate() {
        let feature_path = format!("utt_{i}.feat");
        let label_path = format!("utt_{i}.lab");
        write_features(&dir.join(&feature_path), &u.features)?;
        let labels: Vec<u8> = u
            .vad_labels
            .iter()
            .map(|&speech| {
                if speech {
                    FrameLabel::Tss.as_byte()
                } else {
                    FrameLabel::Ns.as_byte()
                }
            })
            .collect();
        std::fs::write(dir.join(&label_path), &labels)?;
        utterances.push(ManifestUtterance {
            id: i,
            speaker_id: u.speaker_id,
            frames: u.features.rows(),
            feature_path,
            label_path,
        });
    }
    let manifest = Manifest {
        seed: corpus.seed,
        mode: corpus.mode,
        feature_dim: crate::frontend::FEATURE_DIM,
        embedding_dim: corpus.embedding_dim,
        speakers,
        utterances,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Input(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Load a corpus directory written by [`export_corpus`].
pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Input(format!(
            "cannot read corpus manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Input(format!("corpus manifest is not valid JSON: {e}")))?;

    let mut speakers = Vec::new();
    for s in &manifest.speakers {
        let embedding = read_embedding_file(&dir.join(&s.embedding_path), manifest.embedding_dim)?;
        speakers.push(SyntheticSpeaker {
            id: s.id,
            embedding: SpeakerEmbedding::from_raw(embedding.values().to_vec())
                .map_err(|e| Error::Input(e.to_string()))?,
            f0: s.f0,
            // Cluster means are generation-time internals; not exported.
            cluster_mean: Vec::new(),
        });
    }

    let mut utterances = Vec::new();
    for u in &manifest.utterances {
        let features = read_features(&dir.join(&u.feature_path))?;
        if features.rows() != u.frames {
            return Err(Error::Input(format!(
                "utterance {}: manifest says {} frames, file holds {}",
                u.id,
                u.frames,
                features.rows()
            )));
        }
        let label_bytes = std::fs::read(dir.join(&u.label_path))?;
        if label_bytes.len() != features.rows() {
            return Err(Error::Input(format!(
                "utterance {}: {} labels for {} frames",
                u.id,
                label_bytes.len(),
                features.rows()
            )));
        }
        let vad_labels: Vec<bool> = label_bytes
            .iter()
            .map(|&b| FrameLabel::from_byte(b).map(|l| l != FrameLabel::Ns))
            .collect::<Result<_>>()?;
        utterances.push(Utterance {
            speaker_id: u.speaker_id,
            audio: None,
            features,
            vad_labels,
        });
    }

    Ok(Corpus {
        seed: manifest.seed,
        mode: manifest.mode,
        embedding_dim: manifest.embedding_dim,
        speakers,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_corpus;

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(123, 3, 2, CorpusMode::Feature, 12).unwrap();
        export_corpus(&corpus, dir.path()).unwrap();
        let loaded = import_corpus(dir.path()).unwrap();
        assert_eq!(loaded.seed, corpus.seed);
        assert_eq!(loaded.speakers.len(), corpus.speakers.len());
        for (a, b) in loaded.speakers.iter().zip(&corpus.speakers) {
            assert_eq!(a.embedding.values(), b.embedding.values());
        }
        assert_eq!(loaded.utterances.len(), corpus.utterances.len());
        for (a, b) in loaded.utterances.iter().zip(&corpus.utterances) {
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.features.data(), b.features.data());
            assert_eq!(a.vad_labels, b.vad_labels);
        }
    }

    #[test]
    fn embedding_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let e = SpeakerEmbedding::unit(vec![1.0, 2.0, 3.0]).unwrap();
        let path = dir.path().join("s.emb");
        write_embedding_file(&path, &e).unwrap();
        let back = read_embedding_file(&path, 3).unwrap();
        assert_eq!(back.values(), e.values());
        assert!(read_embedding_file(&path, 4).is_err());
    }

    #[test]
    fn truncated_feature_file_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, [1, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        assert!(read_features(&path).is_err());
    }
}
