//! Causal self-attention session encoder with tied item embeddings.

mod checkpoint;
mod score;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use score::{score, score_all, score_all_topk, ScoredTopK};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::rng::CountingRng;
use crate::tensor::{Graph, Tensor, Var};

/// Where layer normalization sits relative to each residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `x ← LN(x + f(x))`.
    #[default]
    Post,
    /// `x ← x + f(LN(x))`, with a final layer norm.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

macro_rules! name_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}", stringify!($t)
                    ))),
                }
            }
        }
    };
}

name_enum!(NormPlacement, Post => "post", Pre => "pre");
name_enum!(Activation, Gelu => "gelu", Relu => "relu");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Catalog size `|I|`; the embedding table has one extra padding row.
    pub n_items: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn new(n_items: usize) -> Self {
        Self {
            n_items,
            hidden_dim: 200,
            num_layers: 2,
            num_heads: 1,
            max_len: 50,
            dropout: 0.0,
            norm: NormPlacement::Post,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_items == 0 {
            return fail("model needs a nonempty catalog".into());
        }
        if self.n_items >= ItemId::MAX as usize {
            return fail(format!("catalog of {} items is too large", self.n_items));
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 || !self.layer_norm_eps.is_finite() {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn pad_id(&self) -> ItemId {
        self.n_items as ItemId
    }
}

/// Attention and feed-forward weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2",
    "ln2_gain", "ln2_bias",
];

impl Layer {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// All model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// `[|I|+1 × d]`; the last row is padding.
    pub item_emb: Tensor,
    /// `[max_len × d]`.
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    /// Only used with [`NormPlacement::Pre`].
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

/// Graph handles for every parameter, in [`ModelState::named`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn item_emb(&self) -> Var {
        self.vars[0]
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut CountingRng) -> Tensor {
    let r = rng.raw();
    Tensor::from_fn(shape, |_| r.random_range(-bound..bound))
}

impl ModelState {
    /// Random initialization: uniform embeddings with variance `1/d`, Xavier
    /// uniform projections, zero biases, unit layer-norm gains, zero padding row.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut rng = CountingRng::seeded(seed);
        let emb_bound = (3.0 / d as f64).sqrt();
        let mut item_emb = uniform(&[config.n_items + 1, d], emb_bound, &mut rng);
        item_emb.data_mut()[config.n_items * d..].fill(0.0);
        let pos_emb = uniform(&[config.max_len, d], emb_bound, &mut rng);
        let w_bound = (6.0 / (2 * d) as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| {
                let mut w = || uniform(&[d, d], w_bound, &mut rng);
                Layer {
                    wq: w(),
                    bq: Tensor::zeros(&[d]),
                    wk: w(),
                    bk: Tensor::zeros(&[d]),
                    wv: w(),
                    bv: Tensor::zeros(&[d]),
                    wo: w(),
                    bo: Tensor::zeros(&[d]),
                    ln1_gain: Tensor::filled(&[d], 1.0),
                    ln1_bias: Tensor::zeros(&[d]),
                    w1: w(),
                    b1: Tensor::zeros(&[d]),
                    w2: w(),
                    b2: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::filled(&[d], 1.0),
                    ln2_bias: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(Self {
            config,
            item_emb,
            pos_emb,
            layers,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        })
    }

    /// Every parameter with a stable name.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    /// Mutable parameters in [`ModelState::named`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.item_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Rebuilds a state from named tensors, checking names and shapes against
    /// a fresh state of the same configuration.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut state = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = state
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (slot, ((want_name, want_shape), (name, t))) in state
            .params_mut()
            .into_iter()
            .zip(expected.into_iter().zip(tensors))
        {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(state)
    }

    /// Binds every parameter into `g` by reference.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> BoundParams {
        let vars = self
            .named()
            .into_iter()
            .map(|(_, t)| g.param(t, trainable))
            .collect();
        BoundParams { vars }
    }

    /// Encodes `[b × t]` item ids (padding allowed) into hidden states
    /// `[b·t × d]`. Dropout is applied only when `dropout_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        p: &BoundParams,
        ids: &[ItemId],
        b: usize,
        t: usize,
        mut dropout_rng: Option<&mut CountingRng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if ids.len() != b * t {
            return Err(Error::Shape(format!(
                "{} ids for a {b}×{t} batch",
                ids.len()
            )));
        }
        if t > cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence width {t} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let rate = cfg.dropout;
        let mut drop = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => g.dropout(x, rate, rng),
                _ => Ok(x),
            }
        };

        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather_rows(p.vars[0], &idx)?;
        let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        let pos = g.gather_rows(p.vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        x = drop(g, x)?;

        let inv_sqrt = 1.0 / ((d / heads) as f64).sqrt();
        for l in 0..cfg.num_layers {
            let v = &p.vars[2 + l * LAYER_FIELDS.len()..2 + (l + 1) * LAYER_FIELDS.len()];
            let [wq, bq, wk, bk, wv, bv, wo, bo, g1, c1, w1, b1, w2, b2, g2, c2] =
                v.try_into().expect("layer parameter count");
            let eps = cfg.layer_norm_eps;

            let attn_in = match cfg.norm {
                NormPlacement::Post => x,
                NormPlacement::Pre => g.layer_norm(x, g1, c1, eps)?,
            };
            let lin = |g: &mut Graph<'_>, w, bias| -> Result<Var> {
                let y = g.matmul(attn_in, w)?;
                g.add_bias(y, bias)
            };
            let q = lin(g, wq, bq)?;
            let k = lin(g, wk, bk)?;
            let vv = lin(g, wv, bv)?;
            let q = g.split_heads(q, b, t, heads)?;
            let k = g.split_heads(k, b, t, heads)?;
            let vv = g.split_heads(vv, b, t, heads)?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, inv_sqrt);
            let a = g.causal_softmax(s)?;
            let ctx = g.matmul(a, vv)?;
            let ctx = g.merge_heads(ctx, b, t, heads)?;
            let o = g.matmul(ctx, wo)?;
            let o = g.add_bias(o, bo)?;
            let o = drop(g, o)?;
            x = match cfg.norm {
                NormPlacement::Post => {
                    let r = g.add(x, o)?;
                    g.layer_norm(r, g1, c1, eps)?
                }
                NormPlacement::Pre => g.add(x, o)?,
            };

            let ffn_in = match cfg.norm {
                NormPlacement::Post => x,
                NormPlacement::Pre => g.layer_norm(x, g2, c2, eps)?,
            };
            let h = g.matmul(ffn_in, w1)?;
            let h = g.add_bias(h, b1)?;
            let h = match cfg.activation {
                Activation::Gelu => g.gelu(h),
                Activation::Relu => g.relu(h),
            };
            let f = g.matmul(h, w2)?;
            let f = g.add_bias(f, b2)?;
            let f = drop(g, f)?;
            x = match cfg.norm {
                NormPlacement::Post => {
                    let r = g.add(x, f)?;
                    g.layer_norm(r, g2, c2, cfg.layer_norm_eps)?
                }
                NormPlacement::Pre => g.add(x, f)?,
            };
        }
        if cfg.norm == NormPlacement::Pre {
            let n = p.vars.len();
            x = g.layer_norm(x, p.vars[n - 2], p.vars[n - 1], cfg.layer_norm_eps)?;
        }
        Ok(x)
    }

    /// Eval-mode hidden states `[b·t × d]` as a plain tensor.
    pub fn hidden(&self, ids: &[ItemId], b: usize, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.encode(&mut g, &p, ids, b, t, None)?;
        Ok(g.value(h).clone())
    }

    /// Item embedding rows `0..|I|` (padding excluded).
    pub fn catalog_embeddings(&self) -> &[f64] {
        &self.item_emb.data()[..self.config.n_items * self.config.hidden_dim]
    }
}
