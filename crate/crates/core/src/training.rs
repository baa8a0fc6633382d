//! Losses, the Adam optimizer, freeze masks and the two training stages.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSplit, DomainId};
use crate::encoder;
use crate::error::{Error, Result};
use crate::model::{encode_plain, enhance_plain, item_inputs, represent_on, ModelState};
use crate::params::{Binder, Grads, ParamStore};
use crate::prompt::{self, enhance_on};
use crate::rng;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::{dot, norm, Mat};
use crate::text::{assemble_input, ModelInput, TokenizedItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Tune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Tune => "tune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Bpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainStageConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub normalize_similarity: bool,
    pub loss: LossKind,
    /// Train on every prefix of each training sequence instead of only the last step.
    pub all_prefixes: bool,
}

impl Default for TrainStageConfig {
    fn default() -> Self {
        TrainStageConfig {
            batch_size: 12,
            learning_rate: 5e-5,
            temperature: 0.05,
            epochs: 10,
            normalize_similarity: true,
            loss: LossKind::Contrastive,
            all_prefixes: false,
        }
    }
}

impl TrainStageConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let mut bad = Vec::new();
        if self.loss == LossKind::Contrastive && self.batch_size < 2 || self.batch_size == 0 {
            bad.push(format!("{section}.batch_size"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("{section}.learning_rate"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad.push(format!("{section}.temperature"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                message: format!("invalid stage settings: {}", bad.join(", ")),
                keys: bad,
            })
        }
    }
}

/// Dot product, or cosine similarity when `normalize` is set.
pub fn similarity(a: &[f64], b: &[f64], normalize: bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity", format!("{} vs {}", a.len(), b.len())));
    }
    if !normalize {
        return Ok(dot(a, b));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("zero-norm vector under normalized similarity".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

fn maybe_normalize(tape: &mut Tape, x: Var, normalize: bool) -> Result<Var> {
    if normalize {
        tape.l2_normalize_rows(x)
    } else {
        Ok(x)
    }
}

/// In-batch contrastive loss: row `z` of `seqs` should match row `z` of
/// `positives` against every other row.
pub fn pretrain_loss_on(tape: &mut Tape, seqs: Var, positives: Var, tau: f64, normalize: bool) -> Result<Var> {
    let b = tape.value(seqs).rows;
    if b < 2 || tape.value(positives).rows != b {
        return Err(Error::shape("pretrain loss", format!("batch of {b} sequences")));
    }
    let s = maybe_normalize(tape, seqs, normalize)?;
    let p = maybe_normalize(tape, positives, normalize)?;
    let logits = tape.matmul_t(s, p);
    let logits = tape.scale(logits, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    tape.softmax_cross_entropy(logits, &targets)
}

/// Full-catalog contrastive loss against fixed item representations.
pub fn tune_loss_on(
    tape: &mut Tape,
    seqs: Var,
    targets: &[usize],
    items: &Mat,
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if items.rows < 2 {
        return Err(Error::shape("tune loss", "catalog needs at least two items"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= items.rows) {
        return Err(Error::shape("tune loss", format!("target {t} outside catalog of {}", items.rows)));
    }
    let s = maybe_normalize(tape, seqs, normalize)?;
    let items = tape.constant(items.clone());
    let items = maybe_normalize(tape, items, normalize)?;
    let logits = tape.matmul_t(s, items);
    let logits = tape.scale(logits, 1.0 / tau);
    tape.softmax_cross_entropy(logits, targets)
}

/// Mean of `-log σ(sim(s, pos) - sim(s, neg))` over rows.
pub fn bpr_loss_on(tape: &mut Tape, seqs: Var, pos: Var, neg: Var, normalize: bool) -> Result<Var> {
    let s = maybe_normalize(tape, seqs, normalize)?;
    let p = maybe_normalize(tape, pos, normalize)?;
    let n = maybe_normalize(tape, neg, normalize)?;
    let sp = tape.row_dot(s, p);
    let sn = tape.row_dot(s, n);
    let margin = tape.sub(sn, sp);
    let l = tape.softplus(margin);
    Ok(tape.mean(l))
}

/// Batch value of the in-batch contrastive loss for plain rows.
pub fn loss_pretrain(seqs: &Mat, positives: &Mat, tau: f64, normalize: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(seqs.clone());
    let p = tape.constant(positives.clone());
    let l = pretrain_loss_on(&mut tape, s, p, tau, normalize)?;
    Ok(tape.value(l).data[0])
}

pub fn loss_tune(h: &[f64], target: usize, items: &Mat, tau: f64, normalize: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Mat::row_vector(h.to_vec()));
    let l = tune_loss_on(&mut tape, s, &[target], items, tau, normalize)?;
    Ok(tape.value(l).data[0])
}

pub fn loss_bpr(h: &[f64], pos: &[f64], neg: &[f64], normalize: bool) -> Result<f64> {
    let margin = similarity(h, pos, normalize)? - similarity(h, neg, normalize)?;
    Ok(softplus(-margin))
}

/// Adam with bias correction. Moments exist only for tensors that have
/// received a gradient, so frozen tensors never get state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<usize, (Mat, Mat)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_state(&self, idx: usize) -> bool {
        self.moments.contains_key(&idx)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        store.check_grads(grads)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (&idx, g) in grads {
            let entry = store.entry_mut(idx);
            if entry.frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(idx)
                .or_insert_with(|| (Mat::zeros(g.rows, g.cols), Mat::zeros(g.rows, g.cols)));
            for i in 0..g.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                entry.value.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Whether the tensor `name` is frozen in `stage`.
pub fn is_frozen(stage: Stage, name: &str, freeze_word_embeddings: bool) -> bool {
    match stage {
        Stage::Pretrain => freeze_word_embeddings && name == encoder::WORD_EMBEDDINGS,
        Stage::Tune => {
            name.starts_with(encoder::PREFIX)
                || name == prompt::SHARED_PROMPTS
                || name.starts_with(&format!("{}.", prompt::SHARED_BRANCH))
        }
    }
}

/// Per-tensor freeze flags for `stage`, in store order.
pub fn freeze_mask_for_stage(stage: Stage, store: &ParamStore, freeze_word_embeddings: bool) -> Vec<(String, bool)> {
    store
        .names()
        .map(|n| (n.to_string(), is_frozen(stage, n, freeze_word_embeddings)))
        .collect()
}

pub fn apply_stage_freeze(state: &mut ModelState, stage: Stage) {
    let fwe = state.config.encoder.freeze_word_embeddings;
    state.params.apply_freeze(|n| is_frozen(stage, n, fwe));
}

/// A next-item training pair: catalog positions within `domain`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub domain: DomainId,
    pub history: Vec<usize>,
    pub target: usize,
}

fn examples_for(corpus: &Corpus, split: &CorpusSplit, domain: DomainId, all_prefixes: bool) -> Result<Vec<Example>> {
    let d = corpus.domain(domain);
    let pos = |id: u32| {
        d.item_index(id)
            .ok_or_else(|| Error::Data(format!("domain {}: unknown item {id}", d.name)))
    };
    let mut out = Vec::new();
    for u in &split.domains[domain.0] {
        let train = u.train.iter().map(|&i| pos(i)).collect::<Result<Vec<_>>>()?;
        let starts: Vec<usize> = if all_prefixes {
            (1..train.len()).collect()
        } else if train.len() >= 2 {
            vec![train.len() - 1]
        } else {
            vec![]
        };
        for t in starts {
            out.push(Example {
                domain,
                history: train[..t].to_vec(),
                target: train[t],
            });
        }
    }
    Ok(out)
}

/// Training pairs from every domain's training prefixes.
pub fn pretrain_examples(corpus: &Corpus, split: &CorpusSplit, all_prefixes: bool) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for d in &corpus.domains {
        out.extend(examples_for(corpus, split, d.id, all_prefixes)?);
    }
    Ok(out)
}

pub fn tune_examples(corpus: &Corpus, split: &CorpusSplit, all_prefixes: bool) -> Result<Vec<Example>> {
    examples_for(corpus, split, corpus.target, all_prefixes)
}

/// Corpus views shared by both stages.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a CorpusSplit,
    /// Tokenized catalogs indexed `[domain][catalog position]`.
    pub catalog: &'a [Vec<TokenizedItem>],
    pub max_items: usize,
}

impl TrainData<'_> {
    pub fn history_input(&self, domain: DomainId, history: &[usize], max_tokens: usize) -> Result<ModelInput> {
        let items: Vec<&TokenizedItem> = history.iter().map(|&i| &self.catalog[domain.0][i]).collect();
        assemble_input(&items, self.max_items, max_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Stage-1 loss for one batch built on `tape`. `negatives` are required for BPR.
pub fn pretrain_batch_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    state_cfg: &crate::model::ModelConfig,
    cfg: &TrainStageConfig,
    seqs: &[&ModelInput],
    positives: &[&ModelInput],
    negatives: Option<&[&ModelInput]>,
    mut rng: Option<&mut rng::StreamRng>,
) -> Result<Var> {
    let s = represent_on(tape, binder, state_cfg, seqs, rng.as_deref_mut())?;
    let p = represent_on(tape, binder, state_cfg, positives, rng.as_deref_mut())?;
    match cfg.loss {
        LossKind::Contrastive => pretrain_loss_on(tape, s, p, cfg.temperature, cfg.normalize_similarity),
        LossKind::Bpr => {
            let negatives = negatives.ok_or_else(|| Error::Data("BPR needs negatives".into()))?;
            let n = represent_on(tape, binder, state_cfg, negatives, rng)?;
            bpr_loss_on(tape, s, p, n, cfg.normalize_similarity)
        }
    }
}

/// Stage-2 loss for one batch from precomputed encoder outputs `h`.
pub fn tune_batch_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    state_cfg: &crate::model::ModelConfig,
    cfg: &TrainStageConfig,
    h: &Mat,
    targets: &[usize],
    negatives: Option<&[usize]>,
    items: &Mat,
) -> Result<Var> {
    let hv = tape.constant(h.clone());
    let s = enhance_on(tape, binder, hv, &state_cfg.prompt, state_cfg.layout)?;
    match cfg.loss {
        LossKind::Contrastive => tune_loss_on(tape, s, targets, items, cfg.temperature, cfg.normalize_similarity),
        LossKind::Bpr => {
            let negatives = negatives.ok_or_else(|| Error::Data("BPR needs negatives".into()))?;
            let pos = tape.constant(gather_rows(items, targets));
            let neg = tape.constant(gather_rows(items, negatives));
            bpr_loss_on(tape, s, pos, neg, cfg.normalize_similarity)
        }
    }
}

pub(crate) fn gather_rows(m: &Mat, rows: &[usize]) -> Mat {
    let data: Vec<Vec<f64>> = rows.iter().map(|&r| m.row(r).to_vec()).collect();
    Mat::from_rows(&data)
}

fn sample_negative<R: Rng>(rng: &mut R, catalog_len: usize, positive: usize) -> usize {
    loop {
        let n = rng.gen_range(0..catalog_len);
        if n != positive || catalog_len == 1 {
            return n;
        }
    }
}

/// Stage 1: every tensor trainable, shuffled mixed-domain batches, in-batch
/// negatives (or one sampled negative per pair under BPR).
pub fn run_pretrain(state: &mut ModelState, data: &TrainData, cfg: &TrainStageConfig, seed: u64) -> Result<Vec<EpochRecord>> {
    cfg.validate("pretrain")?;
    apply_stage_freeze(state, Stage::Pretrain);
    let examples = pretrain_examples(data.corpus, data.split, cfg.all_prefixes)?;
    if examples.len() < 2 {
        return Err(Error::Data(format!(
            "pre-training needs at least two training pairs, found {}",
            examples.len()
        )));
    }
    let max_tokens = state.config.encoder.max_tokens;
    let seq_inputs = examples
        .iter()
        .map(|e| data.history_input(e.domain, &e.history, max_tokens))
        .collect::<Result<Vec<_>>>()?;
    let item_input_table = data
        .catalog
        .iter()
        .map(|items| item_inputs(items, &state.config.encoder))
        .collect::<Result<Vec<_>>>()?;

    let mut shuffle = rng::stream(seed, "shuffle.pretrain");
    let mut sampler = rng::stream(seed, "sampling.pretrain");
    let mut dropout = rng::stream(seed, "dropout.pretrain");
    let use_dropout = state.config.encoder.dropout > 0.0;
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.loss == LossKind::Contrastive && chunk.len() < 2 {
                continue;
            }
            let seqs: Vec<&ModelInput> = chunk.iter().map(|&i| &seq_inputs[i]).collect();
            let pos: Vec<&ModelInput> = chunk
                .iter()
                .map(|&i| &item_input_table[examples[i].domain.0][examples[i].target])
                .collect();
            let neg: Option<Vec<&ModelInput>> = (cfg.loss == LossKind::Bpr).then(|| {
                chunk
                    .iter()
                    .map(|&i| {
                        let e = &examples[i];
                        let table = &item_input_table[e.domain.0];
                        &table[sample_negative(&mut sampler, table.len(), e.target)]
                    })
                    .collect()
            });

            let mut tape = Tape::new();
            let mut binder = Binder::new(&state.params, true);
            let loss = pretrain_batch_loss(
                &mut tape,
                &mut binder,
                &state.config,
                cfg,
                &seqs,
                &pos,
                neg.as_deref(),
                use_dropout.then_some(&mut dropout),
            )?;
            let value = tape.value(loss).data[0];
            let grads = tape.backward(loss);
            drop(binder);
            adam.step(&mut state.params, &grads, cfg.learning_rate)?;
            total += value;
            batches += 1;
        }
        let mean_loss = if batches > 0 { total / batches as f64 } else { f64::NAN };
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("pre-training loss is {mean_loss} at epoch {epoch}")));
        }
        info!("pretrain epoch {epoch}: loss {mean_loss:.5}");
        records.push(EpochRecord {
            stage: Stage::Pretrain,
            epoch,
            mean_loss,
            lr: cfg.learning_rate,
            seed,
        });
    }
    Ok(records)
}

/// Stage 2: encoder, shared prompts and the shared branch frozen; target
/// catalog representations refreshed once per epoch and held fixed within it.
pub fn run_prompt_tune(state: &mut ModelState, data: &TrainData, cfg: &TrainStageConfig, seed: u64) -> Result<Vec<EpochRecord>> {
    cfg.validate("tune")?;
    let target = data.corpus.target;
    let domain = data
        .corpus
        .target_domain()
        .filter(|d| !d.users.is_empty())
        .ok_or_else(|| Error::Data("target domain is absent or has no users".into()))?;
    if domain.items.len() < 2 {
        return Err(Error::Data("target catalog needs at least two items".into()));
    }
    apply_stage_freeze(state, Stage::Tune);
    let examples = tune_examples(data.corpus, data.split, cfg.all_prefixes)?;
    if examples.is_empty() {
        return Err(Error::Data("target domain has no training pairs".into()));
    }

    // The encoder is frozen for the whole stage, so its outputs are fixed.
    let max_tokens = state.config.encoder.max_tokens;
    let seq_inputs = examples
        .iter()
        .map(|e| data.history_input(target, &e.history, max_tokens))
        .collect::<Result<Vec<_>>>()?;
    let seq_h = encode_plain(state, &seq_inputs.iter().collect::<Vec<_>>())?;
    let catalog_inputs = item_inputs(&data.catalog[target.0], &state.config.encoder)?;
    let item_h = encode_plain(state, &catalog_inputs.iter().collect::<Vec<_>>())?;

    let mut shuffle = rng::stream(seed, "shuffle.tune");
    let mut sampler = rng::stream(seed, "sampling.tune");
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let items = enhance_plain(state, &item_h)?;
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let h = gather_rows(&seq_h, chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| examples[i].target).collect();
            let negatives: Option<Vec<usize>> = (cfg.loss == LossKind::Bpr).then(|| {
                targets
                    .iter()
                    .map(|&t| sample_negative(&mut sampler, items.rows, t))
                    .collect()
            });
            let mut tape = Tape::new();
            let mut binder = Binder::new(&state.params, true);
            let loss = tune_batch_loss(
                &mut tape,
                &mut binder,
                &state.config,
                cfg,
                &h,
                &targets,
                negatives.as_deref(),
                &items,
            )?;
            let value = tape.value(loss).data[0];
            let grads = tape.backward(loss);
            drop(binder);
            adam.step(&mut state.params, &grads, cfg.learning_rate)?;
            total += value;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("prompt-tuning loss is {mean_loss} at epoch {epoch}")));
        }
        info!("tune epoch {epoch}: loss {mean_loss:.5}");
        records.push(EpochRecord {
            stage: Stage::Tune,
            epoch,
            mean_loss,
            lr: cfg.learning_rate,
            seed,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn similarity_examples() {
        assert!(close(similarity(&[0.3, 0.4], &[0.3, 0.4], true).unwrap(), 1.0, 1e-15));
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0], true).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 0.0], &[2.0, 0.0], false).unwrap(), 2.0);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0], true).is_err());
    }

    #[test]
    fn uniform_similarities_give_log_batch() {
        for b in [2usize, 4, 8] {
            let ones = Mat::filled(b, 3, 1.0);
            let l = loss_pretrain(&ones, &ones, 0.05, true).unwrap();
            assert!(close(l, (b as f64).ln(), 1e-12), "B={b}: {l}");
        }
    }

    #[test]
    fn two_candidate_closed_form() {
        // unnormalized: s+ = h·p1, s- = h·p2 with s+ - s- = τ ln 9
        let tau = 0.05;
        let gap = tau * 9f64.ln();
        let seqs = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let pos = Mat::from_rows(&[vec![0.2 + gap, 0.0], vec![0.2, 0.0]]);
        // row 0: s+ - s- = gap; row 1 sees the same two candidates reversed
        let l = loss_pretrain(&seqs, &pos, tau, false).unwrap();
        let row0 = (10.0f64 / 9.0).ln();
        let row1 = (1.0 + 9.0f64).ln();
        assert!(close(l, (row0 + row1) / 2.0, 1e-12));
        let items = Mat::from_rows(&[vec![0.2 + gap, 0.0], vec![0.2, 0.0]]);
        assert!(close(loss_tune(&[1.0, 0.0], 0, &items, tau, false).unwrap(), row0, 1e-12));
    }

    #[test]
    fn tune_loss_matches_log_sum_exp() {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let m = 2 + trial % 7;
            let items = Mat::uniform(m, 5, 1.0, &mut r);
            let h: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
            let target = trial % m;
            for normalize in [false, true] {
                let tau = 0.3;
                let sims: Vec<f64> = (0..m)
                    .map(|i| {
                        let row = items.row(i);
                        let d: f64 = h.iter().zip(row).map(|(a, b)| a * b).sum();
                        if normalize {
                            let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                            d / (nh * nr)
                        } else {
                            d
                        }
                    })
                    .collect();
                let lse = sims.iter().map(|s| (s / tau).exp()).sum::<f64>().ln();
                let expect = lse - sims[target] / tau;
                let got = loss_tune(&h, target, &items, tau, normalize).unwrap();
                assert!(close(got, expect, 1e-10), "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn uniform_catalog_gives_log_m() {
        for m in [2usize, 10, 100] {
            let items = Mat::filled(m, 4, 0.5);
            let l = loss_tune(&[1.0, 2.0, 3.0, 4.0], m - 1, &items, 0.05, true).unwrap();
            assert!(close(l, (m as f64).ln(), 1e-12));
        }
    }

    #[test]
    fn saturated_positive_has_vanishing_loss() {
        let tau = 0.05;
        let items = Mat::from_rows(&[vec![20.0 * tau, 0.0], vec![0.0, 0.0]]);
        assert!(loss_tune(&[1.0, 0.0], 0, &items, tau, false).unwrap() < 1e-8);
    }

    #[test]
    fn bpr_values() {
        assert!(close(loss_bpr(&[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], false).unwrap(), 2f64.ln(), 1e-15));
        assert!(loss_bpr(&[1.0], &[20.0], &[0.0], false).unwrap() < 1e-8);
        assert!(close(loss_bpr(&[1.0], &[0.0], &[20.0], false).unwrap(), 20.0, 1e-8));
    }

    #[test]
    fn adam_scalar_recurrence() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::from_vec(1, 1, vec![1.0])).unwrap();
        let mut adam = Adam::new();
        let (g, lr) = (0.3, 0.01);
        let mut grads = Grads::new();
        grads.insert(0, Mat::from_vec(1, 1, vec![g]));
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=25 {
            adam.step(&mut store, &grads, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!(close(store.get("x").unwrap().data[0], x, 1e-15));
        }
    }

    #[test]
    fn adam_respects_freeze_and_zero_lr() {
        let mut store = ParamStore::new();
        store.insert("a", Mat::from_vec(1, 2, vec![1.0, 2.0])).unwrap();
        store.insert("b", Mat::from_vec(1, 2, vec![3.0, 4.0])).unwrap();
        store.apply_freeze(|n| n == "a");
        let mut grads = Grads::new();
        grads.insert(0, Mat::filled(1, 2, 1.0));
        grads.insert(1, Mat::filled(1, 2, 1.0));
        let before = store.clone();
        let mut adam = Adam::new();
        adam.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store, before);
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get("a").unwrap(), before.get("a").unwrap());
        assert_ne!(store.get("b").unwrap(), before.get("b").unwrap());
        assert!(!adam.has_state(0));
        assert!(adam.has_state(1));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut store = ParamStore::new();
        store.insert("weights", Mat::zeros(1, 1)).unwrap();
        let mut grads = Grads::new();
        grads.insert(0, Mat::from_vec(1, 1, vec![f64::NAN]));
        let err = Adam::new().step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn freeze_masks() {
        let names = [
            "encoder.word_embeddings",
            "encoder.layer0.attn.wq",
            "encoder.pooler.weight",
            "prompt.shared",
            "prompt.specific",
            "coattn.shared.wq",
            "coattn.specific.wq",
            "fusion.w1",
        ];
        for n in names {
            assert!(!is_frozen(Stage::Pretrain, n, false));
        }
        let frozen: Vec<&str> = names.iter().copied().filter(|n| is_frozen(Stage::Tune, n, false)).collect();
        assert_eq!(
            frozen,
            [
                "encoder.word_embeddings",
                "encoder.layer0.attn.wq",
                "encoder.pooler.weight",
                "prompt.shared",
                "coattn.shared.wq"
            ]
        );
        assert!(is_frozen(Stage::Pretrain, "encoder.word_embeddings", true));
    }
}
