use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{RngState, Tensor};

/// Shape of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: 64,
            vocab_size: 96,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of the MLP (fixed 4x expansion).
    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    /// Total number of attention heads, `L * H`.
    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        Ok(())
    }
}

/// Weights of one pre-LN decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d, 3d]`, columns ordered query | key | value, heads contiguous within each.
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    /// `[d, d]` output projection applied to the concatenated head outputs.
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

/// Full parameter set; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_unembed: Tensor,
    pub b_unembed: Tensor,
}

const INIT_STD: f64 = 0.02;

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_mlp();
        Self {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::zeros(&[d, d]),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc: Tensor::zeros(&[d, f]),
            b_fc: Tensor::zeros(&[f]),
            w_proj: Tensor::zeros(&[f, d]),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_qkv", &self.w_qkv),
            ("b_qkv", &self.b_qkv),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w_qkv", &mut self.w_qkv),
            ("b_qkv", &mut self.b_qkv),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

impl Parameters {
    /// All-zero parameters (the gradient accumulator shape).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::zeros(config))
                .collect(),
            lnf_gain: Tensor::zeros(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            w_unembed: Tensor::zeros(&[d, config.vocab_size]),
            b_unembed: Tensor::zeros(&[config.vocab_size]),
        }
    }

    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2L)`, unit gains, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let resid_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let mut fill = |t: &mut Tensor, std: f64| {
            for v in t.data_mut() {
                *v = std * rng.normal();
            }
        };
        fill(&mut p.tok_emb, INIT_STD);
        fill(&mut p.pos_emb, INIT_STD);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            fill(&mut layer.w_qkv, INIT_STD);
            fill(&mut layer.w_out, resid_std);
            fill(&mut layer.w_fc, INIT_STD);
            fill(&mut layer.w_proj, resid_std);
        }
        p.lnf_gain.fill(1.0);
        fill(&mut p.w_unembed, INIT_STD);
        Ok(p)
    }

    /// Every tensor with a stable dotted name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("w_unembed".into(), &self.w_unembed));
        out.push(("b_unembed".into(), &self.b_unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        out.push(("w_unembed".into(), &mut self.w_unembed));
        out.push(("b_unembed".into(), &mut self.b_unembed));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}
