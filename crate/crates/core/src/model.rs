//! Model configuration, ablation variants and batched forward passes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, encode_on, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::prompt::{self, enhance_on, PromptConfig, PromptLayout};
use crate::rng::{self, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;
use crate::text::{ModelInput, TokenizedItem};

/// Pipeline variants: the complete model and the six ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FULL")]
    Full,
    /// No pre-training; prompt-tuning starts from random initialization.
    #[serde(rename = "PR")]
    Pr,
    /// Pre-training only.
    #[serde(rename = "PT")]
    Pt,
    /// Prompt banks pooled by row mean instead of co-attention.
    #[serde(rename = "CA")]
    Ca,
    /// No domain-shared prompts.
    #[serde(rename = "SH")]
    Sh,
    /// No domain-specific prompts.
    #[serde(rename = "SP")]
    Sp,
    /// No prompts at all.
    #[serde(rename = "SSP")]
    Ssp,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::Pr,
        Variant::Pt,
        Variant::Ca,
        Variant::Sh,
        Variant::Sp,
        Variant::Ssp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::Pr => "PR",
            Variant::Pt => "PT",
            Variant::Ca => "CA",
            Variant::Sh => "SH",
            Variant::Sp => "SP",
            Variant::Ssp => "SSP",
        }
    }

    pub fn layout(self) -> PromptLayout {
        let (shared, specific, co_attention) = match self {
            Variant::Full | Variant::Pr | Variant::Pt => (true, true, true),
            Variant::Ca => (true, true, false),
            Variant::Sh => (false, true, true),
            Variant::Sp => (true, false, true),
            Variant::Ssp => (false, false, true),
        };
        PromptLayout {
            shared,
            specific,
            co_attention,
        }
    }

    pub fn pretrains(self) -> bool {
        self != Variant::Pr
    }

    pub fn tunes(self) -> bool {
        self != Variant::Pt
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == up)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub layout: PromptLayout,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate(self.encoder.d_model)
    }
}

/// Named tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ModelState {
    /// Fresh parameters from the `init` sub-stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut params = ParamStore::new();
        encoder::init_encoder(&mut params, &config.encoder, config.vocab_size, &mut rng)?;
        prompt::init_prompts(&mut params, config.encoder.d_model, &config.prompt, config.layout, &mut rng)?;
        Ok(ModelState { config, params })
    }
}

/// Stacks the encoder outputs of `inputs` into a `B × d` matrix on `tape`.
pub fn encode_batch_on(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inputs: &[&ModelInput],
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let rows = inputs
        .iter()
        .map(|input| encode_on(tape, binder, &cfg.encoder, input, rng.as_deref_mut()))
        .collect::<Result<Vec<_>>>()?;
    Ok(if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(&rows)
    })
}

/// Encoder followed by prompt enhancement.
pub fn represent_on(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inputs: &[&ModelInput],
    rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let h = encode_batch_on(tape, binder, cfg, inputs, rng)?;
    enhance_on(tape, binder, h, &cfg.prompt, cfg.layout)
}

/// Raw encoder outputs, one row per input, no gradient tracking.
pub fn encode_plain(state: &ModelState, inputs: &[&ModelInput]) -> Result<Mat> {
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let out = encoder::encode_sequence(input, &state.params, &state.config.encoder)?;
        rows.push(out.h);
    }
    Ok(Mat::from_rows(&rows))
}

/// Prompt-enhances each row of `h` independently.
pub fn enhance_plain(state: &ModelState, h: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&state.params, false);
    let hv = tape.constant(h.clone());
    let out = enhance_on(&mut tape, &mut binder, hv, &state.config.prompt, state.config.layout)?;
    Ok(tape.value(out).clone())
}

pub fn item_inputs(items: &[TokenizedItem], cfg: &EncoderConfig) -> Result<Vec<ModelInput>> {
    items.iter().map(|it| encoder::item_input(it, cfg)).collect()
}

/// Final item representations for a whole catalog, one row per item.
pub fn item_representations(state: &ModelState, items: &[TokenizedItem]) -> Result<Mat> {
    let inputs = item_inputs(items, &state.config.encoder)?;
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let h = encode_plain(state, &refs)?;
    enhance_plain(state, &h)
}
