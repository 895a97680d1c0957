//! Pre-LN encoder-decoder transformer with a confidence head on averaged
//! low-layer decoder states.

mod checkpoint;
mod forward;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use forward::{decoder_io, Encoded, StepOutput, TeacherForced};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::numerics::{NumericsError, ParamId, ParamSet, Real, RngState, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// 1-based decoder layers averaged into the confidence head input.
    pub conf_layers: Vec<usize>,
    /// Stop confidence-loss gradients at the head input.
    pub detach_confidence: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            dropout: 0.1,
            conf_layers: vec![1],
            detach_confidence: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} below 5", self.vocab_size));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_dim == 0 {
            return fail("layer counts and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conf_layers.is_empty() {
            return fail("conf_layers is empty".into());
        }
        let mut seen = vec![false; self.decoder_layers + 1];
        for &l in &self.conf_layers {
            if l == 0 || l > self.decoder_layers {
                return fail(format!("conf layer {l} outside 1..={}", self.decoder_layers));
            }
            if std::mem::replace(&mut seen[l], true) {
                return fail(format!("conf layer {l} listed twice"));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn num_parameters(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        2 * v * d + self.encoder_layers * enc + ln + self.decoder_layers * dec + ln + (d * v + v) + (d + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
    pub out: Linear,
    pub conf: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
}

struct Registrar<'a, T> {
    params: &'a mut ParamSet<T>,
    fill: &'a mut dyn FnMut(&[usize], Init) -> Tensor<T>,
}

impl<T: Real> Registrar<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let t = (self.fill)(shape, init);
        self.params.add(name, t)
    }

    fn linear(&mut self, p: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.add(format!("{p}.w"), &[i, o], Init::Xavier),
            b: self.add(format!("{p}.b"), &[o], Init::Zeros),
        }
    }

    fn norm(&mut self, p: &str, d: usize) -> Norm {
        Norm { g: self.add(format!("{p}.g"), &[d], Init::Ones), b: self.add(format!("{p}.b"), &[d], Init::Zeros) }
    }

    fn attn(&mut self, p: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{p}.q"), d, d),
            k: self.linear(&format!("{p}.k"), d, d),
            v: self.linear(&format!("{p}.v"), d, d),
            o: self.linear(&format!("{p}.o"), d, d),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize) -> Ffn {
        Ffn { up: self.linear(&format!("{p}.up"), d, f), down: self.linear(&format!("{p}.down"), f, d) }
    }
}

/// Registers every parameter in a fixed order, drawing values from `fill`.
fn build_layout<T: Real>(
    cfg: &ModelConfig,
    params: &mut ParamSet<T>,
    fill: &mut dyn FnMut(&[usize], Init) -> Tensor<T>,
) -> Layout {
    let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
    let mut r = Registrar { params, fill };
    let src_emb = r.add("src_emb".into(), &[v, d], Init::Embedding);
    let tgt_emb = r.add("tgt_emb".into(), &[v, d], Init::Embedding);
    let enc = (0..cfg.encoder_layers)
        .map(|l| EncLayer {
            ln1: r.norm(&format!("enc.{l}.ln1"), d),
            attn: r.attn(&format!("enc.{l}.self"), d),
            ln2: r.norm(&format!("enc.{l}.ln2"), d),
            ffn: r.ffn(&format!("enc.{l}.ffn"), d, f),
        })
        .collect();
    let enc_ln = r.norm("enc.ln", d);
    let dec = (0..cfg.decoder_layers)
        .map(|l| DecLayer {
            ln1: r.norm(&format!("dec.{l}.ln1"), d),
            self_attn: r.attn(&format!("dec.{l}.self"), d),
            ln2: r.norm(&format!("dec.{l}.ln2"), d),
            cross: r.attn(&format!("dec.{l}.cross"), d),
            ln3: r.norm(&format!("dec.{l}.ln3"), d),
            ffn: r.ffn(&format!("dec.{l}.ffn"), d, f),
        })
        .collect();
    let dec_ln = r.norm("dec.ln", d);
    let out = r.linear("out", d, v);
    let conf = r.linear("conf", d, 1);
    Layout { src_emb, tgt_emb, enc, enc_ln, dec, dec_ln, out, conf }
}

/// Encoder-decoder parameters plus the confidence head `{conf.w, conf.b}`.
#[derive(Debug, Clone)]
pub struct SeqModel {
    config: ModelConfig,
    params: ParamSet<f32>,
    layout: Layout,
}

/// Fresh model. Embeddings are `N(0, 1/d)` (scaled by `sqrt(d)` at lookup),
/// weight matrices Xavier-uniform, biases zero, norm gains one. All draws
/// come from the `init` sub-stream of `rng` in registration order.
pub fn init_model(config: &ModelConfig, rng: &RngState) -> Result<SeqModel> {
    config.validate()?;
    let mut init_rng = rng.substream("init", 0);
    let inv_sqrt_d = 1.0 / (config.d_model as f64).sqrt();
    let mut fill = |shape: &[usize], init: Init| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Embedding => (0..n).map(|_| (init_rng.normal() * inv_sqrt_d) as f32).collect(),
            Init::Xavier => {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| ((2.0 * init_rng.uniform() - 1.0) * a) as f32).collect()
            }
        };
        Tensor::new(shape.to_vec(), data)
    };
    let mut params = ParamSet::new();
    let layout = build_layout(config, &mut params, &mut fill);
    Ok(SeqModel { config: config.clone(), params, layout })
}

impl SeqModel {
    /// Model with the given parameter values, checked name by name and shape
    /// by shape against the configuration.
    pub fn from_params(config: &ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamSet::<f32>::new();
        let layout = build_layout(config, &mut expected, &mut |shape, _| Tensor::zeros(shape.to_vec()));
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for ((_, en, et), (_, gn, gt)) in expected.iter().zip(params.iter()) {
            if en != gn || et.shape() != gt.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {gn} {:?} does not match expected {en} {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(Self { config: config.clone(), params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Same parameters with a different dropout rate.
    pub fn with_dropout(&self, rate: f64) -> Result<Self> {
        let config = ModelConfig { dropout: rate, ..self.config.clone() };
        config.validate()?;
        Ok(Self { config, params: self.params.clone(), layout: self.layout.clone() })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `[conf.w, conf.b]`.
    pub fn conf_head_params(&self) -> [ParamId; 2] {
        [self.layout.conf.w, self.layout.conf.b]
    }

    /// `[out.w, out.b]`.
    pub fn output_params(&self) -> [ParamId; 2] {
        [self.layout.out.w, self.layout.out.b]
    }

    /// Every parameter of decoder layer `l` (1-based).
    pub fn decoder_layer_params(&self, l: usize) -> Vec<ParamId> {
        let prefix = format!("dec.{}.", l - 1);
        self.params.iter().filter(|(_, n, _)| n.starts_with(&prefix)).map(|(id, _, _)| id).collect()
    }

    /// Confidence for per-layer hidden states of one position:
    /// `sigmoid(mean(selected layers) . w + b)`.
    pub fn confidence_head(&self, hidden: &[Vec<f32>], layers: &[usize]) -> Result<f32> {
        if layers.is_empty() {
            return Err(ModelError::Config("empty confidence layer set".into()));
        }
        let d = self.config.d_model;
        let mut mean = vec![0.0f32; d];
        for &l in layers {
            let h =
                hidden.get(l.wrapping_sub(1)).ok_or_else(|| ModelError::Config(format!("layer {l} not available")))?;
            for (m, &x) in mean.iter_mut().zip(h) {
                *m += x;
            }
        }
        let inv = 1.0 / layers.len() as f32;
        let w = self.params.get(self.layout.conf.w).data();
        let b = self.params.get(self.layout.conf.b).data()[0];
        let z: f32 = mean.iter().zip(w).map(|(&m, &w)| m * inv * w).sum::<f32>() + b;
        Ok(crate::numerics::sigmoid(z))
    }
}
