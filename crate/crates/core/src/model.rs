//! Decoder-only transformer parameters and the `AF1W` weight file.
//!
//! Pre-norm blocks with RMS normalisation (gain only), learned absolute
//! position embeddings, a tanh-GELU MLP and no biases anywhere.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Header, Reader, Writer};
use crate::error::{Error, Result};
use crate::util::{self, Rng};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"AF1W";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// 6 layers, 4 heads, d_model 128, d_mlp 512 over the arithmetic vocab.
    pub fn seed_default(vocab_size: usize) -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            d_model: 128,
            d_head: 32,
            d_mlp: 512,
            vocab_size,
            max_seq: 16,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be a small positive number".into()));
        }
        Ok(())
    }

    fn to_header(self, header: &mut Header) {
        header.push("n_layers", self.n_layers);
        header.push("n_heads", self.n_heads);
        header.push("d_model", self.d_model);
        header.push("d_head", self.d_head);
        header.push("d_mlp", self.d_mlp);
        header.push("vocab_size", self.vocab_size);
        header.push("max_seq", self.max_seq);
        header.push("norm_eps", self.norm_eps);
    }

    fn from_header(header: &Header) -> Result<Self> {
        let cfg = Self {
            n_layers: header.parse("n_layers")?,
            n_heads: header.parse("n_heads")?,
            d_model: header.parse("d_model")?,
            d_head: header.parse("d_head")?,
            d_mlp: header.parse("d_mlp")?,
            vocab_size: header.parse("vocab_size")?,
            max_seq: header.parse("max_seq")?,
            norm_eps: header.parse("norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Attention head address, printed as `L3H1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl From<HeadId> for String {
    fn from(h: HeadId) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HeadId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("head id {s:?} is not of the form L<layer>H<head>"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        Ok(Self {
            layer: layer.parse().map_err(|_| bad())?,
            head: head.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Array1<f32>,
    /// d_model x (n_heads * d_head); head h owns columns h*d_head..(h+1)*d_head.
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    /// (n_heads * d_head) x d_model; head h owns the matching row block.
    pub wo: Array2<f32>,
    pub mlp_norm: Array1<f32>,
    pub w_in: Array2<f32>,
    pub w_out: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embedding: Array2<f32>,
    pub position_embedding: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f32>,
    /// d_model x vocab_size.
    pub unembedding: Array2<f32>,
}

impl ModelWeights {
    /// All-zero tensors with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: Array1::ones(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::ones(d),
            w_in: Array2::zeros((d, config.d_mlp)),
            w_out: Array2::zeros((config.d_mlp, d)),
        };
        Ok(Self {
            config,
            token_embedding: Array2::zeros((config.vocab_size, d)),
            position_embedding: Array2::zeros((config.max_seq, d)),
            layers: vec![layer; config.n_layers],
            final_norm: Array1::ones(d),
            unembedding: Array2::zeros((d, config.vocab_size)),
        })
    }

    /// Gaussian initialisation (std 0.02), residual-output projections
    /// scaled down by sqrt(2 * n_layers).
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let base = Normal::new(0.0f32, 0.02).unwrap();
        let scaled = Normal::new(0.0f32, 0.02 / (2.0 * config.n_layers as f32).sqrt()).unwrap();
        let fill = |a: &mut Array2<f32>, dist: &Normal<f32>, rng: &mut Rng| {
            a.iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        fill(&mut w.token_embedding, &base, rng);
        fill(&mut w.position_embedding, &base, rng);
        for layer in &mut w.layers {
            fill(&mut layer.wq, &base, rng);
            fill(&mut layer.wk, &base, rng);
            fill(&mut layer.wv, &base, rng);
            fill(&mut layer.wo, &scaled, rng);
            fill(&mut layer.w_in, &base, rng);
            fill(&mut layer.w_out, &scaled, rng);
        }
        fill(&mut w.unembedding, &base, rng);
        Ok(w)
    }

    /// Tensor names and flat row-major views in file order.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("token_embedding".into(), slice(&self.token_embedding)),
            ("position_embedding".into(), slice(&self.position_embedding)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.as_slice().unwrap()));
            out.push((format!("layers.{i}.wq"), slice(&l.wq)));
            out.push((format!("layers.{i}.wk"), slice(&l.wk)));
            out.push((format!("layers.{i}.wv"), slice(&l.wv)));
            out.push((format!("layers.{i}.wo"), slice(&l.wo)));
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm.as_slice().unwrap()));
            out.push((format!("layers.{i}.w_in"), slice(&l.w_in)));
            out.push((format!("layers.{i}.w_out"), slice(&l.w_out)));
        }
        out.push(("final_norm".into(), self.final_norm.as_slice().unwrap()));
        out.push(("unembedding".into(), slice(&self.unembedding)));
        out
    }

    /// Mutable views in the same order as [`ModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.token_embedding.as_slice_mut().unwrap(),
            self.position_embedding.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_slice_mut().unwrap());
            out.push(l.wq.as_slice_mut().unwrap());
            out.push(l.wk.as_slice_mut().unwrap());
            out.push(l.wv.as_slice_mut().unwrap());
            out.push(l.wo.as_slice_mut().unwrap());
            out.push(l.mlp_norm.as_slice_mut().unwrap());
            out.push(l.w_in.as_slice_mut().unwrap());
            out.push(l.w_out.as_slice_mut().unwrap());
        }
        out.push(self.final_norm.as_slice_mut().unwrap());
        out.push(self.unembedding.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let d = c.d_model;
        let check = |name: &str, got: &[usize], want: &[usize]| {
            if got != want {
                Err(Error::Config(format!("{name} has shape {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        check("token_embedding", self.token_embedding.shape(), &[c.vocab_size, d])?;
        check("position_embedding", self.position_embedding.shape(), &[c.max_seq, d])?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&format!("layers.{i}.attn_norm"), l.attn_norm.shape(), &[d])?;
            check(&format!("layers.{i}.wq"), l.wq.shape(), &[d, d])?;
            check(&format!("layers.{i}.wk"), l.wk.shape(), &[d, d])?;
            check(&format!("layers.{i}.wv"), l.wv.shape(), &[d, d])?;
            check(&format!("layers.{i}.wo"), l.wo.shape(), &[d, d])?;
            check(&format!("layers.{i}.mlp_norm"), l.mlp_norm.shape(), &[d])?;
            check(&format!("layers.{i}.w_in"), l.w_in.shape(), &[d, c.d_mlp])?;
            check(&format!("layers.{i}.w_out"), l.w_out.shape(), &[c.d_mlp, d])?;
        }
        check("final_norm", self.final_norm.shape(), &[d])?;
        check("unembedding", self.unembedding.shape(), &[d, c.vocab_size])?;
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("tensor {name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Header::new();
        self.config.to_header(&mut header);
        header.push("tensor_order", "token_embedding,position_embedding,layers[attn_norm,wq,wk,wv,wo,mlp_norm,w_in,w_out],final_norm,unembedding");
        let mut w = Writer::new(WEIGHTS_MAGIC, &header);
        for (_, t) in self.tensors() {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, WEIGHTS_MAGIC)?;
        let config = ModelConfig::from_header(&r.header)?;
        let mut w = Self::zeros(config)?;
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(w.tensors_mut()) {
            let src = r.tensor(dst.len(), name)?;
            dst.copy_from_slice(&src);
        }
        r.finish()?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised weight file.
    pub fn content_hash(&self) -> String {
        util::sha256_hex(&self.to_bytes())
    }
}

fn slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("weights are stored in standard layout")
}
