//! The assembled network: embeddings -> BiLSTM -> self-attention with
//! residual -> distribution heads, in sequence-to-sequence or
//! sequence-to-one mode, plus checkpoint serialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, ParamSet, Tape, Tensor};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{Activation, LstmStack, MlpHead, MultiHeadAttention};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "seq2seq")]
    Seq2Seq,
    #[serde(rename = "seq2one")]
    Seq2One,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    StudentT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub family: Family,
    /// Embedding width D.
    pub input_dim: usize,
    /// LSTM hidden size per direction; the model width is twice this.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden widths of the output heads (input and final 1 are implied).
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    pub use_attention: bool,
    pub use_residual: bool,
    pub use_variance_head: bool,
    /// Floor added to the softplus-mapped scale.
    pub epsilon: f64,
    /// The degrees-of-freedom head emits `nu_floor + softplus(raw)`.
    pub nu_floor: f64,
    /// Dropout rate on the attended representation during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Seq2Seq,
            family: Family::Gaussian,
            input_dim: 384,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 4,
            head_hidden: vec![64],
            activation: Activation::Relu,
            use_attention: true,
            use_residual: true,
            use_variance_head: true,
            epsilon: 1e-6,
            nu_floor: 2.0,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config("input_dim, hidden_dim, num_layers must be positive".into()));
        }
        if self.use_attention && (self.num_heads == 0 || !self.model_dim().is_multiple_of(self.num_heads)) {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} attention heads",
                self.model_dim(),
                self.num_heads
            )));
        }
        if self.epsilon <= 0.0 || self.epsilon.is_nan() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.family == Family::StudentT && self.nu_floor < 2.0 {
            return Err(Error::Config(format!(
                "nu_floor must be >= 2 for the student_t family, got {}",
                self.nu_floor
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Distribution parameters per step (seq2seq) or per session (seq2one).
/// Without the variance head only the point prediction `mu` is present.
pub struct PredictiveOutput {
    pub family: Family,
    pub mode: Mode,
    /// `[B, T]` for seq2seq, `[B, 1]` for seq2one.
    pub mu: Tensor,
    /// Same shape as `mu`, strictly >= epsilon at every position.
    pub sigma: Option<Tensor>,
    /// Same shape, > nu_floor; present only for the student_t family.
    pub nu: Option<Tensor>,
    /// Validity over the positions of `mu`.
    pub mask: Mask,
}

/// Mean over the valid positions of each row:
/// `[B, T, M]` with a `[B, T]` mask -> `[B, M]`.
pub fn masked_mean_pool(a: &Tensor, mask: &Mask) -> Result<Tensor> {
    if a.shape().len() != 3 {
        return Err(Error::Shape {
            op: "masked_mean_pool",
            detail: format!("expected [batch, steps, width], got {:?}", a.shape()),
        });
    }
    let (batch, steps) = (a.shape()[0], a.shape()[1]);
    if mask.batch() != batch || mask.steps() != steps {
        return Err(Error::Shape {
            op: "masked_mean_pool",
            detail: format!("input {:?} vs mask {}x{}", a.shape(), mask.batch(), mask.steps()),
        });
    }
    let mut inv_counts = Vec::with_capacity(batch);
    for b in 0..batch {
        let count = mask.count(b);
        if count == 0 {
            return Err(Error::EmptySession {
                id: format!("batch row {b}"),
            });
        }
        inv_counts.push(1.0 / count as f64);
    }
    let m = mask.to_tensor().reshape(&[batch, steps, 1])?;
    let inv = Tensor::from_vec(&[batch, 1], inv_counts)?;
    a.mul(&m)?.sum_axis1()?.mul(&inv)
}

/// LSTM + attention + heads; owns its parameters.
pub struct SequenceRegressor {
    config: ModelConfig,
    lstm: LstmStack,
    attention: Option<MultiHeadAttention>,
    mu_head: MlpHead,
    sigma_head: Option<MlpHead>,
    nu_head: Option<MlpHead>,
    params: ParamSet,
}

impl SequenceRegressor {
    pub fn new(config: ModelConfig, seed: u64) -> Result<SequenceRegressor> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let lstm = LstmStack::new(
            config.input_dim,
            config.hidden_dim,
            config.num_layers,
            &mut params,
            &mut rng,
        )?;
        let attention = if config.use_attention {
            Some(MultiHeadAttention::new(
                config.model_dim(),
                config.num_heads,
                &mut params,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut head_widths = vec![config.model_dim()];
        head_widths.extend_from_slice(&config.head_hidden);
        head_widths.push(1);
        let mu_head = MlpHead::new("head_mu", &head_widths, config.activation, &mut params, &mut rng)?;
        let sigma_head = if config.use_variance_head {
            Some(MlpHead::new(
                "head_sigma",
                &head_widths,
                config.activation,
                &mut params,
                &mut rng,
            )?)
        } else {
            None
        };
        let nu_head = if config.use_variance_head && config.family == Family::StudentT {
            Some(MlpHead::new(
                "head_nu",
                &head_widths,
                config.activation,
                &mut params,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(SequenceRegressor {
            config,
            lstm,
            attention,
            mu_head,
            sigma_head,
            nu_head,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count_parameters()
    }

    /// Inference-mode forward over a padded batch.
    pub fn forward(&self, tape: &Tape, batch: &Batch) -> Result<PredictiveOutput> {
        self.forward_parts(tape, &batch.x_tensor(), &batch.mask, Some(&batch.ids), None)
    }

    /// Training-mode forward; dropout is active when `rng` is given.
    pub fn forward_train(
        &self,
        tape: &Tape,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<PredictiveOutput> {
        self.forward_parts(tape, &batch.x_tensor(), &batch.mask, Some(&batch.ids), Some(rng))
    }

    /// Core pipeline. Takes embeddings and a mask only: labels cannot
    /// reach the forward computation by construction.
    pub fn forward_parts(
        &self,
        tape: &Tape,
        x: &Tensor,
        mask: &Mask,
        ids: Option<&[String]>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PredictiveOutput> {
        if x.shape().len() != 3 || x.shape()[2] != self.config.input_dim {
            return Err(Error::Config(format!(
                "model expects [batch, steps, {}], got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        let (batch, steps) = (x.shape()[0], x.shape()[1]);
        for b in 0..batch {
            if mask.count(b) == 0 {
                let id = ids
                    .and_then(|ids| ids.get(b).cloned())
                    .unwrap_or_else(|| format!("batch row {b}"));
                return Err(Error::EmptySession { id });
            }
        }

        let h = self.lstm.forward(tape, x, mask)?;
        let mut attended = match &self.attention {
            Some(attn) => attn.forward(tape, &h, mask, self.config.use_residual)?,
            None => h,
        };
        if let Some(rng) = dropout_rng {
            if self.config.dropout > 0.0 {
                let keep = 1.0 - self.config.dropout;
                let gates: Vec<f64> = (0..attended.numel())
                    .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let gate = Tensor::from_vec(attended.shape(), gates)?;
                attended = attended.mul(&gate)?;
            }
        }

        let model_dim = self.config.model_dim();
        let (features, out_shape, out_mask) = match self.config.mode {
            Mode::Seq2Seq => (
                attended.reshape(&[batch * steps, model_dim])?,
                vec![batch, steps],
                mask.clone(),
            ),
            Mode::Seq2One => (
                masked_mean_pool(&attended, mask)?,
                vec![batch, 1],
                Mask::all_valid(batch, 1),
            ),
        };

        let mu = self.mu_head.forward(tape, &features)?.reshape(&out_shape)?;
        let sigma = match &self.sigma_head {
            Some(head) => Some(
                head.forward(tape, &features)?
                    .reshape(&out_shape)?
                    .softplus()
                    .add_scalar(self.config.epsilon),
            ),
            None => None,
        };
        let nu = match &self.nu_head {
            Some(head) => Some(
                head.forward(tape, &features)?
                    .reshape(&out_shape)?
                    .softplus()
                    .add_scalar(self.config.nu_floor),
            ),
            None => None,
        };

        let non_finite = mu.has_non_finite()
            || sigma.as_ref().is_some_and(|s| s.has_non_finite())
            || nu.as_ref().is_some_and(|n| n.has_non_finite());
        if non_finite {
            let op = tape
                .first_non_finite()
                .map(|(id, name)| format!("{name} (node {id})"))
                .unwrap_or_else(|| "model output".to_string());
            return Err(Error::NumericFault { op });
        }

        Ok(PredictiveOutput {
            family: self.config.family,
            mode: self.config.mode,
            mu,
            sigma,
            nu,
            mask: out_mask,
        })
    }

    // ---- checkpoints ---------------------------------------------------

    /// Binary checkpoint: magic + version, JSON header (config echo and
    /// tensor index), then raw little-endian f64 data. Write/read
    /// round-trips bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name().to_string(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let file = std::fs::File::create(path.as_ref())?;
        let mut out = std::io::BufWriter::new(file);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        out.write_all(&header_bytes)?;
        for p in self.params.iter() {
            for &v in p.value().iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SequenceRegressor> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut input = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Schema("not a model checkpoint (bad magic)".into()));
        }
        let mut len_bytes = [0u8; 8];
        input.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if header_len > 1 << 24 {
            return Err(Error::Schema(format!(
                "checkpoint header of {header_len} bytes is not plausible"
            )));
        }
        let mut header_bytes = vec![0u8; header_len];
        input.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.format != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint format {} not supported (expected {})",
                header.format, CHECKPOINT_VERSION
            )));
        }
        let model = SequenceRegressor::new(header.config, 0)?;
        if model.params.len() != header.tensors.len() {
            return Err(Error::Schema(format!(
                "checkpoint lists {} tensors, model has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for (p, entry) in model.params.iter().zip(&header.tensors) {
            if p.name() != entry.name || p.shape() != entry.shape.as_slice() {
                return Err(Error::Schema(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name(),
                    p.shape()
                )));
            }
            let mut values = Vec::with_capacity(p.numel());
            let mut buf = [0u8; 8];
            for _ in 0..p.numel() {
                input.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            p.set_value(values);
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PSEQCKP\x01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
