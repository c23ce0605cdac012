//! Seeded synthetic voice world.
//!
//! A fixed (never trained) generator maps a speaker latent, an impression
//! vector, and per-frame content embeddings to feature sequences:
//!
//! ```text
//! frame_t = tanh(W_id z_id + W_v phi(v) + W_c c_t),   phi(v) = (v - 4) / 3
//! T       = round(T0 * (1 - rate_coeff * (v_K - 4)))
//! ```
//!
//! Because the generator is transparent, every utterance carries its true
//! impression vector by construction, which is what makes leakage
//! measurements verifiable. Speaking rate is wired to dimension K
//! (Slow-Fast): faster means fewer frames.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VicError};
use crate::nnet::{gauss_vec, load_archive, mix, save_archive, stream, streams, Tensor2D};
use crate::types::{FeatureSeq, ImpressionVector, SLOW_FAST, VI_DIMS};

/// Acoustic feature dimension produced by the world.
pub const FEAT_DIM: usize = 32;
/// Speaker latent dimension.
pub const Z_DIM: usize = 8;
/// Per-frame content embedding dimension.
pub const CONTENT_DIM: usize = 4;

/// Per-speaker habitual impression range.
const BASE_VI_LO: f64 = 2.5;
const BASE_VI_HI: f64 = 5.5;

/// Pre-tanh per-entry standard deviation the generator is calibrated to.
const TARGET_PRETANH_SD: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Base frame count at a neutral Slow-Fast rating.
    pub t0: usize,
    /// Frame-count sensitivity to the Slow-Fast dimension.
    pub rate_coeff: f64,
    /// Standard deviation of per-utterance expressive deviation from the
    /// speaker's habitual impression.
    pub expressive_sd: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            t0: 20,
            rate_coeff: 0.08,
            expressive_sd: 0.5,
        }
    }
}

/// A synthetic speaker: latent identity plus habitual impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: u32,
    pub z_id: Vec<f64>,
    pub base_vi: ImpressionVector,
}

/// One utterance: its true impression vector and content seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub speaker_id: u32,
    pub utterance_id: u32,
    pub v_true: ImpressionVector,
    pub content_seed: u64,
}

/// The frozen generator. All matrices are fixed at construction.
#[derive(Debug, Clone)]
pub struct WorldParams {
    pub cfg: WorldConfig,
    w_id: Tensor2D,
    w_v: Tensor2D,
    w_c: Tensor2D,
}

impl WorldParams {
    /// Draws the generator matrices from the seed and rescales them so the
    /// rendered features have per-entry standard deviation in [0.2, 0.6].
    pub fn new(cfg: WorldConfig) -> Self {
        let mut rng = stream(cfg.seed, &[streams::WORLD]);
        let mut world = Self {
            cfg,
            w_id: Tensor2D::zeros(FEAT_DIM, Z_DIM),
            w_v: Tensor2D::zeros(FEAT_DIM, VI_DIMS),
            w_c: Tensor2D::zeros(FEAT_DIM, CONTENT_DIM),
        };
        let mut fill = |t: &mut Tensor2D, rng: &mut rand_chacha::ChaCha8Rng| {
            let n = t.rows() * t.cols();
            let g = gauss_vec(rng, n);
            t.data_mut().copy_from_slice(&g);
        };
        fill(&mut world.w_id, &mut rng);
        fill(&mut world.w_v, &mut rng);
        fill(&mut world.w_c, &mut rng);
        world.calibrate();
        world
    }

    /// Rescales each output row so probe renders hit the target pre-tanh
    /// spread per entry.
    fn calibrate(&mut self) {
        let probe_speakers = 16u32;
        let probe_utts = 4u32;
        let mut count = 0usize;
        let mut sum = vec![0.0; FEAT_DIM];
        let mut sum_sq = vec![0.0; FEAT_DIM];
        for s in 0..probe_speakers {
            for u in 0..probe_utts {
                let spec = self.sample_utterance(s, u);
                let speaker = self.speaker(s);
                let vn = spec.v_true.normalized();
                let t_frames = self.frame_count(&spec.v_true);
                for t in 0..t_frames {
                    let c = self.content_frame(spec.content_seed, t);
                    let pre = self.pre_tanh(&speaker.z_id, &vn, &c);
                    for (i, p) in pre.iter().enumerate() {
                        sum[i] += p;
                        sum_sq[i] += p * p;
                    }
                    count += 1;
                }
            }
        }
        let n = count as f64;
        for i in 0..FEAT_DIM {
            let mean = sum[i] / n;
            let var = (sum_sq[i] / n - mean * mean).max(1e-12);
            let scale = TARGET_PRETANH_SD / var.sqrt();
            for w in self.w_id.row_mut(i) {
                *w *= scale;
            }
            for w in self.w_v.row_mut(i) {
                *w *= scale;
            }
            for w in self.w_c.row_mut(i) {
                *w *= scale;
            }
        }
    }

    pub fn w_id(&self) -> &Tensor2D {
        &self.w_id
    }

    /// Deterministic speaker profile for `(world seed, speaker_id)`.
    pub fn speaker(&self, speaker_id: u32) -> SpeakerProfile {
        let mut rng = stream(self.cfg.seed, &[streams::SPEAKER, speaker_id as u64]);
        let z_id = gauss_vec(&mut rng, Z_DIM);
        let mut base = [0.0; VI_DIMS];
        for b in base.iter_mut() {
            use rand::Rng;
            *b = BASE_VI_LO + (BASE_VI_HI - BASE_VI_LO) * rng.gen::<f64>();
        }
        SpeakerProfile {
            speaker_id,
            z_id,
            base_vi: ImpressionVector(base),
        }
    }

    /// Draws an utterance: habitual impression plus clipped expressive noise.
    pub fn sample_utterance(&self, speaker_id: u32, utterance_id: u32) -> UtteranceSpec {
        let speaker = self.speaker(speaker_id);
        let mut rng = stream(
            self.cfg.seed,
            &[streams::UTTERANCE, speaker_id as u64, utterance_id as u64],
        );
        let noise = gauss_vec(&mut rng, VI_DIMS);
        let mut v = [0.0; VI_DIMS];
        for i in 0..VI_DIMS {
            v[i] = (speaker.base_vi.0[i] + self.cfg.expressive_sd * noise[i]).clamp(1.0, 7.0);
        }
        let content_seed =
            mix(self.cfg.seed ^ mix(((speaker_id as u64) << 32) | utterance_id as u64));
        UtteranceSpec {
            speaker_id,
            utterance_id,
            v_true: ImpressionVector(v),
            content_seed,
        }
    }

    /// Frame count for an impression vector: `round(T0 * (1 - rate_coeff * (v_K - 4)))`.
    pub fn frame_count(&self, v: &ImpressionVector) -> usize {
        let f = self.cfg.t0 as f64 * (1.0 - self.cfg.rate_coeff * (v.0[SLOW_FAST] - 4.0));
        f.round().max(1.0) as usize
    }

    /// Content embedding for frame `t` of a given content seed. Depends
    /// only on `(world seed, content_seed, t)`, so any frame count can be
    /// generated consistently.
    pub fn content_frame(&self, content_seed: u64, t: usize) -> Vec<f64> {
        let mut rng = stream(self.cfg.seed, &[streams::CONTENT, content_seed, t as u64]);
        gauss_vec(&mut rng, CONTENT_DIM)
    }

    /// First `n` content frames as an `n x CONTENT_DIM` matrix.
    pub fn content_frames(&self, content_seed: u64, n: usize) -> Tensor2D {
        let mut out = Tensor2D::zeros(n, CONTENT_DIM);
        for t in 0..n {
            out.row_mut(t)
                .copy_from_slice(&self.content_frame(content_seed, t));
        }
        out
    }

    fn pre_tanh(&self, z: &[f64], vn: &[f64; VI_DIMS], c: &[f64]) -> Vec<f64> {
        let a = self.w_id.matvec(z).expect("z dim fixed");
        let b = self.w_v.matvec(vn).expect("vi dim fixed");
        let d = self.w_c.matvec(c).expect("content dim fixed");
        (0..FEAT_DIM).map(|i| a[i] + b[i] + d[i]).collect()
    }

    /// Renders the feature sequence for an utterance spec.
    pub fn render(&self, spec: &UtteranceSpec) -> FeatureSeq {
        let speaker = self.speaker(spec.speaker_id);
        let vn = spec.v_true.normalized();
        let t_frames = self.frame_count(&spec.v_true);
        let mut frames = Tensor2D::zeros(t_frames, FEAT_DIM);
        for t in 0..t_frames {
            let c = self.content_frame(spec.content_seed, t);
            let pre = self.pre_tanh(&speaker.z_id, &vn, &c);
            for (o, p) in frames.row_mut(t).iter_mut().zip(pre.iter()) {
                *o = p.tanh();
            }
        }
        FeatureSeq::new(frames).expect("frame count >= 1")
    }
}

/// One rendered corpus entry.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub spec: UtteranceSpec,
    pub features: FeatureSeq,
}

/// A rendered corpus with a held-out speaker split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
    pub train_speakers: Vec<u32>,
    pub holdout_speakers: Vec<u32>,
}

impl Corpus {
    pub fn train_items(&self) -> Vec<&CorpusItem> {
        self.items
            .iter()
            .filter(|it| self.train_speakers.contains(&it.spec.speaker_id))
            .collect()
    }

    pub fn holdout_items(&self) -> Vec<&CorpusItem> {
        self.items
            .iter()
            .filter(|it| self.holdout_speakers.contains(&it.spec.speaker_id))
            .collect()
    }
}

/// Renders a full corpus by deterministic enumeration. The last
/// `round(holdout_fraction * n_speakers)` speakers are held out of
/// training (at least one when the fraction is positive and there are two
/// or more speakers).
pub fn build_corpus(
    world: &WorldParams,
    n_speakers: u32,
    n_utts_per_speaker: u32,
    holdout_fraction: f64,
) -> Result<Corpus> {
    if n_speakers == 0 || n_utts_per_speaker == 0 {
        return Err(VicError::Usage(
            "corpus needs at least one speaker and one utterance".into(),
        ));
    }
    let mut n_holdout = (n_speakers as f64 * holdout_fraction).round() as u32;
    if holdout_fraction > 0.0 && n_holdout == 0 && n_speakers >= 2 {
        n_holdout = 1;
    }
    if n_holdout >= n_speakers {
        n_holdout = n_speakers.saturating_sub(1);
    }
    let split = n_speakers - n_holdout;
    let mut items = Vec::with_capacity((n_speakers * n_utts_per_speaker) as usize);
    for s in 0..n_speakers {
        for u in 0..n_utts_per_speaker {
            let spec = world.sample_utterance(s, u);
            let features = world.render(&spec);
            items.push(CorpusItem { spec, features });
        }
    }
    Ok(Corpus {
        items,
        train_speakers: (0..split).collect(),
        holdout_speakers: (split..n_speakers).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifestEntry {
    speaker_id: u32,
    utterance_id: u32,
    v_true: ImpressionVector,
    t: usize,
    content_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    config_hash: String,
    train_speakers: Vec<u32>,
    holdout_speakers: Vec<u32>,
    entries: Vec<CorpusManifestEntry>,
}

fn item_key(spec: &UtteranceSpec) -> String {
    format!("utt_{:05}_{:05}", spec.speaker_id, spec.utterance_id)
}

/// Exports a corpus as `manifest.json` plus a feature archive in the
/// parameter checkpoint format.
pub fn export_corpus(dir: &Path, corpus: &Corpus, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CorpusManifest {
        config_hash: config_hash.to_string(),
        train_speakers: corpus.train_speakers.clone(),
        holdout_speakers: corpus.holdout_speakers.clone(),
        entries: corpus
            .items
            .iter()
            .map(|it| CorpusManifestEntry {
                speaker_id: it.spec.speaker_id,
                utterance_id: it.spec.utterance_id,
                v_true: it.spec.v_true,
                t: it.features.len(),
                content_seed: it.spec.content_seed,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VicError::Data(format!("corpus manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;

    let entries: Vec<(String, Tensor2D)> = corpus
        .items
        .iter()
        .map(|it| (item_key(&it.spec), it.features.frames().clone()))
        .collect();
    save_archive(&dir.join("features.ckpt"), config_hash, &entries)
}

/// Loads a corpus exported by [`export_corpus`].
pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| {
        VicError::Dependency(format!(
            "corpus manifest {} not readable: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: CorpusManifest =
        serde_json::from_str(&json).map_err(|e| VicError::Data(format!("corpus manifest: {e}")))?;
    let (_, features) = load_archive(&dir.join("features.ckpt"))?;
    let by_name: std::collections::BTreeMap<&str, &Tensor2D> =
        features.iter().map(|(n, t)| (n.as_str(), t)).collect();

    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let spec = UtteranceSpec {
            speaker_id: e.speaker_id,
            utterance_id: e.utterance_id,
            v_true: e.v_true,
            content_seed: e.content_seed,
        };
        let key = item_key(&spec);
        let t = by_name
            .get(key.as_str())
            .ok_or_else(|| VicError::Data(format!("features missing for {key}")))?;
        if t.rows() != e.t {
            return Err(VicError::Data(format!(
                "frame count mismatch for {key}: manifest {} vs archive {}",
                e.t,
                t.rows()
            )));
        }
        items.push(CorpusItem {
            spec,
            features: FeatureSeq::new((*t).clone())?,
        });
    }
    Ok(Corpus {
        items,
        train_speakers: manifest.train_speakers,
        holdout_speakers: manifest.holdout_speakers,
    })
}
