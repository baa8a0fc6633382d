//! Central finite-difference verification of the analytic gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{encode_plain, enhance_plain, ModelConfig, ModelState};
use crate::params::{Binder, Grads};
use crate::prompt::PromptConfig;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Mat;
use crate::text::{assemble_input, ModelInput, TokenizedItem};
use crate::training::{apply_stage_freeze, pretrain_batch_loss, tune_batch_loss, LossKind, Stage, TrainStageConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_w: usize,
    pub batch_size: usize,
    pub vocab_size: usize,
    pub catalog_size: usize,
    /// Parameters are drawn from ±init_scale so activations are far from
    /// the near-linear regime of a 0.02 init.
    pub init_scale: f64,
    pub temperature: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub variant: crate::model::Variant,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            d_w: 2,
            batch_size: 3,
            vocab_size: 14,
            catalog_size: 6,
            init_scale: 0.5,
            temperature: 0.05,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            variant: crate::model::Variant::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub loss: String,
    pub tensor: String,
    pub worst_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub worst_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest elementwise deviation relative to the tensor's gradient scale:
/// `max|a − n| / max(‖a‖∞, ‖n‖∞, floor)`. Elements whose gradient is many
/// orders below the tensor's largest are judged against that scale instead
/// of their own, where finite differences are roundoff-bound.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(floor, |m, x| m.max(x.abs()));
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    worst / scale
}

struct Fixture {
    state: ModelState,
    seqs: Vec<ModelInput>,
    positives: Vec<ModelInput>,
    negatives: Vec<ModelInput>,
    /// Enhanced catalog rows, fixed within a tuning step as in training.
    catalog: Mat,
    targets: Vec<usize>,
    tune_negatives: Vec<usize>,
}

fn random_item<R: Rng>(r: &mut R, vocab: usize) -> TokenizedItem {
    let n = r.gen_range(1..=3);
    TokenizedItem {
        tokens: (0..n).map(|_| r.gen_range(3..vocab)).collect(),
    }
}

fn fixture(cfg: &GradcheckConfig) -> Result<Fixture> {
    if cfg.batch_size < 2 || cfg.catalog_size < 2 || cfg.vocab_size < 4 {
        return Err(Error::config("gradcheck fixture needs batch ≥ 2, catalog ≥ 2, vocab ≥ 4"));
    }
    let model = ModelConfig {
        vocab_size: cfg.vocab_size,
        encoder: EncoderConfig {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            max_tokens: 16,
            dropout: 0.0,
            freeze_word_embeddings: false,
            init_scale: cfg.init_scale,
        },
        prompt: PromptConfig {
            d_w: cfg.d_w,
            d_h: None,
            n_heads: cfg.n_heads,
            init_scale: cfg.init_scale,
        },
        layout: cfg.variant.layout(),
    };
    let mut state = ModelState::init(model, cfg.seed)?;
    // Biases and gains start at 0 and 1; spread them too so their gradients are generic.
    let mut r = rng::stream(cfg.seed, "gradcheck");
    for e in state.params.entries_mut() {
        if e.name.ends_with("bias") || e.name.ends_with("gain") || e.name.ends_with(".b1") || e.name.ends_with(".b2") {
            for x in &mut e.value.data {
                *x += r.gen_range(-cfg.init_scale..cfg.init_scale);
            }
        }
    }
    let items: Vec<TokenizedItem> = (0..cfg.catalog_size).map(|_| random_item(&mut r, cfg.vocab_size)).collect();
    let one = |it: &TokenizedItem| assemble_input(&[it], 1, 16);
    let mut seqs = Vec::new();
    let mut targets = Vec::new();
    let mut tune_negatives = Vec::new();
    for _ in 0..cfg.batch_size {
        let len = r.gen_range(1..=3);
        let hist: Vec<&TokenizedItem> = (0..len).map(|_| &items[r.gen_range(0..items.len())]).collect();
        seqs.push(assemble_input(&hist, 50, 16)?);
        let t = r.gen_range(0..items.len());
        targets.push(t);
        tune_negatives.push((t + 1 + r.gen_range(0..items.len() - 1)) % items.len());
    }
    let positives = targets.iter().map(|&t| one(&items[t])).collect::<Result<Vec<_>>>()?;
    let negatives = tune_negatives.iter().map(|&t| one(&items[t])).collect::<Result<Vec<_>>>()?;
    let catalog_inputs = items.iter().map(one).collect::<Result<Vec<_>>>()?;
    let catalog = enhance_plain(&state, &encode_plain(&state, &refs(&catalog_inputs))?)?;
    Ok(Fixture {
        state,
        seqs,
        positives,
        negatives,
        catalog,
        targets,
        tune_negatives,
    })
}

fn refs(v: &[ModelInput]) -> Vec<&ModelInput> {
    v.iter().collect()
}

/// Loss value and, when `with_grads`, gradients for one stage's loss.
fn evaluate(fx: &Fixture, state: &ModelState, stage: Stage, train: &TrainStageConfig, with_grads: bool) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&state.params, with_grads);
    let loss = match stage {
        Stage::Pretrain => pretrain_batch_loss(
            &mut tape,
            &mut binder,
            &state.config,
            train,
            &refs(&fx.seqs),
            &refs(&fx.positives),
            Some(&refs(&fx.negatives)),
            None,
        )?,
        Stage::Tune => {
            let h = encode_plain(state, &refs(&fx.seqs))?;
            tune_batch_loss(
                &mut tape,
                &mut binder,
                &state.config,
                train,
                &h,
                &fx.targets,
                Some(&fx.tune_negatives),
                &fx.catalog,
            )?
        }
    };
    let value = tape.value(loss).data[0];
    let grads = if with_grads { tape.backward(loss) } else { Grads::new() };
    Ok((value, grads))
}

fn check_loss(
    fx: &Fixture,
    stage: Stage,
    loss: LossKind,
    cfg: &GradcheckConfig,
    label: &str,
    out: &mut Vec<TensorCheck>,
) -> Result<()> {
    let train = TrainStageConfig {
        batch_size: cfg.batch_size,
        temperature: cfg.temperature,
        loss,
        ..TrainStageConfig::default()
    };
    let mut state = fx.state.clone();
    apply_stage_freeze(&mut state, stage);
    let (_, grads) = evaluate(fx, &state, stage, &train, true)?;
    for idx in 0..state.params.len() {
        let entry = state.params.entry(idx).clone();
        if entry.frozen {
            if grads.contains_key(&idx) {
                return Err(Error::Numeric(format!("frozen tensor {} received a gradient", entry.name)));
            }
            continue;
        }
        let analytic = grads
            .get(&idx)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(entry.value.rows, entry.value.cols));
        let mut numeric = vec![0.0; entry.value.len()];
        let mut probe = state.clone();
        for i in 0..entry.value.len() {
            let x0 = entry.value.data[i];
            probe.params.entry_mut(idx).value.data[i] = x0 + cfg.step;
            let (up, _) = evaluate(fx, &probe, stage, &train, false)?;
            probe.params.entry_mut(idx).value.data[i] = x0 - cfg.step;
            let (down, _) = evaluate(fx, &probe, stage, &train, false)?;
            probe.params.entry_mut(idx).value.data[i] = x0;
            numeric[i] = (up - down) / (2.0 * cfg.step);
        }
        let worst = tensor_relative_error(&analytic.data, &numeric, cfg.abs_floor);
        out.push(TensorCheck {
            loss: label.to_string(),
            tensor: entry.name.clone(),
            worst_rel_err: worst,
            max_abs_grad: analytic.max_abs(),
        });
    }
    Ok(())
}

/// Checks every unfrozen tensor under the stage-1 and stage-2 contrastive
/// losses and the stage-1 BPR loss.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let fx = fixture(cfg)?;
    let mut tensors = Vec::new();
    check_loss(&fx, Stage::Pretrain, LossKind::Contrastive, cfg, "pretrain", &mut tensors)?;
    check_loss(&fx, Stage::Tune, LossKind::Contrastive, cfg, "tune", &mut tensors)?;
    check_loss(&fx, Stage::Pretrain, LossKind::Bpr, cfg, "pretrain_bpr", &mut tensors)?;
    let worst = tensors.iter().map(|t| t.worst_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: worst <= cfg.tolerance && tensors.iter().all(|t| t.worst_rel_err.is_finite()),
        tolerance: cfg.tolerance,
        worst_rel_err: worst,
        tensors,
    })
}
