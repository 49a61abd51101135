//! Session ingestion, padding and batching, a deterministic toy
//! embedder, and a seeded synthetic generator whose noise process is
//! recorded so calibration can be checked against ground truth.
//!
//! The dataset wire format is JSON lines, one utterance per line:
//!
//! ```text
//! {"session": "s00001", "t": 0, "embedding": [ ... D reals ... ], "label": 7.0, "split": "train"}
//! ```
//!
//! The label and split are repeated on every line of a session and must
//! agree. Files for different splits may be concatenated.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Tensor};
use crate::error::{Error, Result};

pub const LABEL_MIN: f64 = 0.0;
pub const LABEL_MAX: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Schema(format!("unknown split {other:?}"))),
        }
    }
}

/// One participant: an ordered sequence of utterance embeddings plus a
/// scalar label.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    /// Row-major `steps x dim`.
    pub embeddings: Vec<f64>,
    pub steps: usize,
    pub dim: usize,
    pub label: f64,
    pub split: Split,
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        embeddings: Vec<f64>,
        dim: usize,
        label: f64,
        split: Split,
    ) -> Result<Session> {
        let id = id.into();
        if dim == 0 || embeddings.is_empty() || !embeddings.len().is_multiple_of(dim) {
            return Err(Error::Schema(format!(
                "session {id:?}: {} embedding values do not form rows of width {dim}",
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("session {id:?}: non-finite embedding value")));
        }
        if !label.is_finite() {
            return Err(Error::Schema(format!("session {id:?}: non-finite label")));
        }
        let steps = embeddings.len() / dim;
        Ok(Session {
            id,
            embeddings,
            steps,
            dim,
            label,
            split,
        })
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }
}

/// All sessions of one corpus, in stable id order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub sessions: Vec<Session>,
    pub dim: usize,
}

impl Dataset {
    pub fn from_sessions(mut sessions: Vec<Session>) -> Result<Dataset> {
        sessions.sort_by(|a, b| a.id.cmp(&b.id));
        let dim = sessions.first().map_or(0, |s| s.dim);
        for s in &sessions {
            if s.dim != dim {
                return Err(Error::Schema(format!(
                    "session {:?} has embedding width {}, dataset uses {}",
                    s.id, s.dim, dim
                )));
            }
        }
        Ok(Dataset { sessions, dim })
    }

    pub fn split(&self, split: Split) -> Vec<&Session> {
        self.sessions.iter().filter(|s| s.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

// ---- wire format ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct UtteranceRow {
    session: String,
    t: usize,
    embedding: Vec<f64>,
    label: f64,
    split: String,
}

/// Read a JSON-lines dataset. An empty file is an empty dataset.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut by_session: BTreeMap<String, Vec<UtteranceRow>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: UtteranceRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            detail: e.to_string(),
        })?;
        by_session.entry(row.session.clone()).or_default().push(row);
    }

    let mut sessions = Vec::with_capacity(by_session.len());
    for (id, mut rows) in by_session {
        rows.sort_by_key(|r| r.t);
        let dim = rows[0].embedding.len();
        let label = rows[0].label;
        let split = Split::parse(&rows[0].split)?;
        let mut embeddings = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.embedding.len() != dim {
                return Err(Error::Schema(format!(
                    "session {id:?}: embedding width {} at t={} differs from {}",
                    row.embedding.len(),
                    row.t,
                    dim
                )));
            }
            if row.label != label {
                return Err(Error::Schema(format!(
                    "session {id:?}: label {} at t={} differs from {}",
                    row.label, row.t, label
                )));
            }
            if Split::parse(&row.split)? != split {
                return Err(Error::Schema(format!("session {id:?}: split differs across lines")));
            }
            if i > 0 && row.t == rows[i - 1].t {
                return Err(Error::Schema(format!(
                    "session {id:?}: duplicate timestep {}",
                    row.t
                )));
            }
            embeddings.extend_from_slice(&row.embedding);
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&label) {
            return Err(Error::Schema(format!(
                "session {id:?}: label {label} outside [{LABEL_MIN}, {LABEL_MAX}]"
            )));
        }
        sessions.push(Session::new(id, embeddings, dim, label, split)?);
    }
    Dataset::from_sessions(sessions)
}

/// Write a dataset in the JSON-lines format (UTF-8, LF line endings).
pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for s in &dataset.sessions {
        for t in 0..s.steps {
            let row = UtteranceRow {
                session: s.id.clone(),
                t,
                embedding: s.row(t).to_vec(),
                label: s.label,
                split: s.split.as_str().to_string(),
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

// ---- batching -----------------------------------------------------------------

/// A padded batch: `batch x t_max x dim` embeddings with a validity mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Vec<f64>,
    pub batch: usize,
    pub t_max: usize,
    pub dim: usize,
    pub mask: Mask,
    pub labels: Vec<f64>,
    pub lengths: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_sessions(sessions: &[&Session]) -> Result<Batch> {
        if sessions.is_empty() {
            return Err(Error::Contract("batch of zero sessions".into()));
        }
        let dim = sessions[0].dim;
        let t_max = sessions.iter().map(|s| s.steps).max().unwrap_or(0);
        let lengths: Vec<usize> = sessions.iter().map(|s| s.steps).collect();
        let mut x = vec![0.0; sessions.len() * t_max * dim];
        for (i, s) in sessions.iter().enumerate() {
            if s.dim != dim {
                return Err(Error::Schema(format!(
                    "session {:?} width {} in a batch of width {}",
                    s.id, s.dim, dim
                )));
            }
            x[i * t_max * dim..i * t_max * dim + s.steps * dim].copy_from_slice(&s.embeddings);
        }
        Ok(Batch {
            x,
            batch: sessions.len(),
            t_max,
            dim,
            mask: Mask::from_lengths(&lengths, t_max),
            labels: sessions.iter().map(|s| s.label).collect(),
            lengths,
            ids: sessions.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn x_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.batch, self.t_max, self.dim], self.x.clone())
            .expect("batch buffer consistent")
    }
}

/// Shuffle sessions with a seeded RNG and cut them into padded batches;
/// every session appears in exactly one batch.
pub fn make_batches(sessions: &[&Session], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let group: Vec<&Session> = chunk.iter().map(|&i| sessions[i]).collect();
            Batch::from_sessions(&group)
        })
        .collect()
}

// ---- toy embedder ---------------------------------------------------------------

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-words embedding: signed feature hashing of
/// lowercased whitespace tokens into `dim` buckets, L2-normalized.
/// Empty text maps to the zero vector.
pub fn toy_embed(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::Config(format!("toy_embed needs dim >= 8, got {dim}")));
    }
    let mut acc = vec![0.0f64; dim];
    let lowered = text.to_lowercase();
    let mut any = false;
    for token in lowered.split_whitespace() {
        any = true;
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h & (1 << 63) != 0 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
    if !any {
        return Ok(acc);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in acc.iter_mut() {
            *v /= norm;
        }
    }
    Ok(acc)
}

// ---- synthetic generator ----------------------------------------------------------

/// How the latent score enters the embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum LatentRule {
    /// Every step carries the score along a fixed direction.
    Linear,
    /// Only a sparse set of marker steps carries the score; the rest are
    /// pure noise. Markers are tagged along a second, orthogonal
    /// direction so they are detectable, which makes the label depend on
    /// long-range structure rather than any local window.
    SparseMarkers,
}

/// Per-step embedding noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseModel {
    Homoscedastic { sigma0: f64 },
    /// Noise scaled by a per-session factor drawn uniformly from
    /// `[factor_min, factor_max]`; the factor is recorded in the truth
    /// record, so the ideal predictive sigma is known exactly.
    Heteroscedastic {
        sigma0: f64,
        factor_min: f64,
        factor_max: f64,
    },
}

fn default_split_weights() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

/// Recipe for a reproducible synthetic dataset: same spec and seed,
/// bit-identical output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_sessions: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dim: usize,
    pub latent: LatentRule,
    pub noise: NoiseModel,
    pub seed: u64,
    #[serde(default = "default_split_weights")]
    pub split_weights: (f64, f64, f64),
}

/// What the generator actually did for one session; feeding `ideal_mu`
/// and `ideal_sigma` straight into the calibration metrics is the
/// ground-truth oracle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionTruth {
    pub id: String,
    pub latent: f64,
    pub ideal_mu: f64,
    pub ideal_sigma: f64,
    pub noise_scale: f64,
}

fn unit_normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Generate sessions plus their truth records.
///
/// The latent score `s ~ U[0, 24]` enters signal steps as `(s/24) * u`
/// for a fixed unit direction `u`, plus isotropic Gaussian noise of
/// per-session scale. The observed label is `s` itself (clean). The
/// ideal predictor reads the signal steps back along `u`, so its error
/// is exactly Gaussian with a variance the truth record stores.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Vec<SessionTruth>)> {
    if spec.num_sessions == 0 || spec.dim == 0 || spec.t_min == 0 || spec.t_min > spec.t_max {
        return Err(Error::Config(format!("invalid synthetic spec: {spec:?}")));
    }
    let (w_train, w_dev, w_test) = spec.split_weights;
    if w_train < 0.0 || w_dev < 0.0 || w_test < 0.0 || w_train + w_dev + w_test <= 0.0 {
        return Err(Error::Config("split weights must be nonnegative and not all zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = unit_normal_vec(&mut rng, spec.dim);
    // marker direction, orthogonalized against u so markers do not bias
    // the readout
    let mut marker = unit_normal_vec(&mut rng, spec.dim);
    let dot: f64 = marker.iter().zip(&u).map(|(a, b)| a * b).sum();
    for (m, &ud) in marker.iter_mut().zip(&u) {
        *m -= dot * ud;
    }
    let norm = marker.iter().map(|x| x * x).sum::<f64>().sqrt();
    for m in marker.iter_mut() {
        *m /= norm;
    }

    let total = w_train + w_dev + w_test;
    let n_train = ((w_train / total) * spec.num_sessions as f64).round() as usize;
    let n_dev = ((w_dev / total) * spec.num_sessions as f64).round() as usize;

    let mut sessions = Vec::with_capacity(spec.num_sessions);
    let mut truths = Vec::with_capacity(spec.num_sessions);
    for i in 0..spec.num_sessions {
        let id = format!("s{i:05}");
        let steps = rng.random_range(spec.t_min..=spec.t_max);
        let latent: f64 = rng.random_range(0.0..=24.0);
        let factor = match spec.noise {
            NoiseModel::Homoscedastic { .. } => 1.0,
            NoiseModel::Heteroscedastic {
                factor_min,
                factor_max,
                ..
            } => rng.random_range(factor_min..=factor_max),
        };
        let sigma0 = match spec.noise {
            NoiseModel::Homoscedastic { sigma0 } => sigma0,
            NoiseModel::Heteroscedastic { sigma0, .. } => sigma0,
        };
        let noise_scale = sigma0 * factor;

        let signal_steps: Vec<bool> = match spec.latent {
            LatentRule::Linear => vec![true; steps],
            LatentRule::SparseMarkers => {
                let n_markers = (steps / 6).max(1);
                let mut idx: Vec<usize> = (0..steps).collect();
                idx.shuffle(&mut rng);
                let mut flags = vec![false; steps];
                for &t in idx.iter().take(n_markers) {
                    flags[t] = true;
                }
                flags
            }
        };

        let scaled = latent / (LABEL_MAX - LABEL_MIN);
        let mut embeddings = vec![0.0; steps * spec.dim];
        let mut readout_sum = 0.0;
        let mut readout_count = 0usize;
        for t in 0..steps {
            let row = &mut embeddings[t * spec.dim..(t + 1) * spec.dim];
            if signal_steps[t] {
                for (r, (&ud, &md)) in row.iter_mut().zip(u.iter().zip(&marker)) {
                    *r = scaled * ud
                        + if spec.latent == LatentRule::SparseMarkers {
                            md
                        } else {
                            0.0
                        };
                }
            }
            for r in row.iter_mut() {
                let eta: f64 = StandardNormal.sample(&mut rng);
                *r += noise_scale * eta;
            }
            if signal_steps[t] {
                let r_t: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                readout_sum += r_t;
                readout_count += 1;
            }
        }

        let ideal_mu = (LABEL_MAX - LABEL_MIN) * readout_sum / readout_count as f64;
        let ideal_sigma =
            (LABEL_MAX - LABEL_MIN) * noise_scale / (readout_count as f64).sqrt();

        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        sessions.push(Session::new(&id, embeddings, spec.dim, latent, split)?);
        truths.push(SessionTruth {
            id,
            latent,
            ideal_mu,
            ideal_sigma,
            noise_scale,
        });
    }
    let dataset = Dataset::from_sessions(sessions)?;
    Ok((dataset, truths))
}
