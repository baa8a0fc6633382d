//! Transformer text encoder with CLS pooling.
//!
//! Token and learned position embeddings feed `n_layers` post-norm blocks
//! (self-attention, add & norm, GELU feed-forward, add & norm). The pooled
//! output is `tanh(W · state(CLS) + b)`. Padding never reaches the blocks:
//! only the unmasked prefix of a [`ModelInput`] is embedded, which is
//! equivalent to masking PAD keys because no unmasked position can attend to
//! a PAD position and the pooler reads position 0 only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multi_head_on;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::text::{assemble_input, ModelInput, TokenizedItem};

pub const WORD_EMBEDDINGS: &str = "encoder.word_embeddings";
pub const POSITION_EMBEDDINGS: &str = "encoder.position_embeddings";
pub const POOLER_WEIGHT: &str = "encoder.pooler.weight";
pub const POOLER_BIAS: &str = "encoder.pooler.bias";
pub const PREFIX: &str = "encoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub freeze_word_embeddings: bool,
    /// Half-width of the uniform initialization range.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            max_tokens: 256,
            dropout: 0.0,
            freeze_word_embeddings: false,
            init_scale: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.d_model == 0 {
            bad.push("encoder.d_model");
        }
        if self.n_layers == 0 {
            bad.push("encoder.n_layers");
        }
        if self.n_heads == 0 || (self.d_model > 0 && self.d_model % self.n_heads != 0) {
            bad.push("encoder.n_heads");
        }
        if self.d_ff == 0 {
            bad.push("encoder.d_ff");
        }
        if self.max_tokens < 2 {
            bad.push("encoder.max_tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push("encoder.dropout");
        }
        if !(self.init_scale > 0.0) {
            bad.push("encoder.init_scale");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                message: format!("invalid encoder settings: {}", bad.join(", ")),
                keys: bad.into_iter().map(String::from).collect(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Vec<f64>,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("encoder.layer{layer}.{part}")
}

const LAYER_PARTS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain", "ln2.bias",
];

/// Adds encoder tensors to `store`: uniform weights in `±init_scale`, layer
/// norm gains 1 and biases 0.
pub fn init_encoder<R: Rng>(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    let s = cfg.init_scale;
    store.insert(WORD_EMBEDDINGS, Mat::uniform(vocab_size, d, s, rng))?;
    store.insert(POSITION_EMBEDDINGS, Mat::uniform(cfg.max_tokens, d, s, rng))?;
    for l in 0..cfg.n_layers {
        for part in LAYER_PARTS {
            let value = match part {
                "ln1.gain" | "ln2.gain" => Mat::filled(1, d, 1.0),
                "ln1.bias" | "ln2.bias" => Mat::zeros(1, d),
                "ffn.w1" => Mat::uniform(d, cfg.d_ff, s, rng),
                "ffn.b1" => Mat::uniform(1, cfg.d_ff, s, rng),
                "ffn.w2" => Mat::uniform(cfg.d_ff, d, s, rng),
                p if p.starts_with("attn.w") => Mat::uniform(d, d, s, rng),
                _ => Mat::uniform(1, d, s, rng),
            };
            store.insert(layer_name(l, part), value)?;
        }
    }
    store.insert(POOLER_WEIGHT, Mat::uniform(d, d, s, rng))?;
    store.insert(POOLER_BIAS, Mat::uniform(1, d, s, rng))?;
    Ok(())
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut StreamRng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = tape.value(x).shape();
            let keep = 1.0 - rate;
            let data = (0..r * c)
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_mask(x, Mat::from_vec(r, c, data))
        }
        _ => x,
    }
}

fn linear(tape: &mut Tape, b: &mut Binder, x: Var, w: &str, bias: &str) -> Result<Var> {
    let w = b.var(tape, w)?;
    let bias = b.var(tape, bias)?;
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, bias))
}

/// Encodes one input on `tape`, returning the pooled `1 × d_model` vector.
/// Dropout is applied only when `rng` is given.
pub fn encode_on(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    input: &ModelInput,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let store = binder.store();
    let vocab_size = store.get(WORD_EMBEDDINGS)?.rows;
    let positions = store.get(POSITION_EMBEDDINGS)?.rows;
    let active = input.active_len();
    if active == 0 || input.tokens.first() != Some(&crate::text::CLS) {
        return Err(Error::Data("model input must start with [CLS]".into()));
    }
    if active > positions {
        return Err(Error::Data(format!(
            "input has {active} tokens but the encoder supports {positions}"
        )));
    }
    let tokens = &input.tokens[..active];
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {vocab_size}"
        )));
    }

    let words = binder.gather(tape, WORD_EMBEDDINGS, tokens)?;
    let pos = binder.gather(tape, POSITION_EMBEDDINGS, &input.positions[..active])?;
    let mut x = tape.add(words, pos);
    x = dropout(tape, x, cfg.dropout, rng.as_deref_mut());

    for l in 0..cfg.n_layers {
        let q = linear(tape, binder, x, &layer_name(l, "attn.wq"), &layer_name(l, "attn.bq"))?;
        let k = linear(tape, binder, x, &layer_name(l, "attn.wk"), &layer_name(l, "attn.bk"))?;
        let v = linear(tape, binder, x, &layer_name(l, "attn.wv"), &layer_name(l, "attn.bv"))?;
        let heads = multi_head_on(tape, q, k, v, cfg.n_heads, None)?;
        let attn = linear(tape, binder, heads, &layer_name(l, "attn.wo"), &layer_name(l, "attn.bo"))?;
        let attn = dropout(tape, attn, cfg.dropout, rng.as_deref_mut());
        let res = tape.add(x, attn);
        let g = binder.var(tape, &layer_name(l, "ln1.gain"))?;
        let b = binder.var(tape, &layer_name(l, "ln1.bias"))?;
        x = tape.layer_norm(res, g, b);

        let hidden = linear(tape, binder, x, &layer_name(l, "ffn.w1"), &layer_name(l, "ffn.b1"))?;
        let hidden = tape.gelu(hidden);
        let ff = linear(tape, binder, hidden, &layer_name(l, "ffn.w2"), &layer_name(l, "ffn.b2"))?;
        let ff = dropout(tape, ff, cfg.dropout, rng.as_deref_mut());
        let res = tape.add(x, ff);
        let g = binder.var(tape, &layer_name(l, "ln2.gain"))?;
        let b = binder.var(tape, &layer_name(l, "ln2.bias"))?;
        x = tape.layer_norm(res, g, b);
    }

    let cls = tape.select_row(x, 0);
    let pooled = linear(tape, binder, cls, POOLER_WEIGHT, POOLER_BIAS)?;
    Ok(tape.tanh(pooled))
}

/// Sequence representation of an assembled input.
pub fn encode_sequence(input: &ModelInput, store: &ParamStore, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, false);
    let out = encode_on(&mut tape, &mut binder, cfg, input, None)?;
    Ok(EncoderOutput {
        h: tape.value(out).data.clone(),
    })
}

/// An item is encoded as the one-item sequence `[CLS] + title tokens`.
pub fn encode_item(item: &TokenizedItem, store: &ParamStore, cfg: &EncoderConfig) -> Result<EncoderOutput> {
    let input = item_input(item, cfg)?;
    encode_sequence(&input, store, cfg)
}

pub fn item_input(item: &TokenizedItem, cfg: &EncoderConfig) -> Result<ModelInput> {
    assemble_input(&[item], 1, cfg.max_tokens)
}
