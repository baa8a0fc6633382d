//! Ranking, Recall@K / NDCG@K, the ID-embedding and popularity baselines and
//! the intra/inter-domain cosine-distance analysis.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSplit, DomainId};
use crate::error::{Error, Result};
use crate::model::{encode_plain, enhance_plain, item_inputs, ModelState};
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Mat;
use crate::text::{assemble_input, ModelInput, TokenizedItem, Vocab};
use crate::training::{pretrain_loss_on, similarity, Adam};

/// Catalog ordered by descending score, ties by ascending item id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ordered: Vec<u32>,
    /// 1-based rank of the ground truth, if it is in the catalog.
    pub rank: Option<usize>,
}

/// Ranks `ids` by `scores`.
pub fn rank_scores(scores: &[f64], ids: &[u32], truth: Option<u32>) -> Result<RankingResult> {
    if scores.len() != ids.len() || ids.is_empty() {
        return Err(Error::shape("rank", format!("{} scores for {} items", scores.len(), ids.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite ranking score {s}")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    let ordered: Vec<u32> = order.iter().map(|&i| ids[i]).collect();
    let rank = truth.and_then(|t| ordered.iter().position(|&i| i == t)).map(|p| p + 1);
    Ok(RankingResult { ordered, rank })
}

/// Scores every catalog row against `h` with the training similarity.
pub fn rank_items(h: &[f64], items: &Mat, ids: &[u32], normalize: bool, truth: Option<u32>) -> Result<RankingResult> {
    let scores = (0..items.rows)
        .map(|r| similarity(h, items.row(r), normalize))
        .collect::<Result<Vec<_>>>()?;
    rank_scores(&scores, ids, truth)
}

pub fn recall_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn metric_key(name: &str, k: usize) -> String {
    format!("{name}@{k}")
}

/// Mean Recall@K and NDCG@K over `ranks`, keyed `recall@K` / `ndcg@K`.
pub fn aggregate(ranks: &[Option<usize>], k_list: &[usize]) -> BTreeMap<String, f64> {
    let n = ranks.len().max(1) as f64;
    let mut out = BTreeMap::new();
    for &k in k_list {
        let r: f64 = ranks.iter().map(|&r| recall_at_k(r, k)).sum();
        let g: f64 = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum();
        out.insert(metric_key("recall", k), r / n);
        out.insert(metric_key("ndcg", k), g / n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: String,
    pub variant: String,
    pub users: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub seed: u64,
    pub rows: Vec<DomainMetrics>,
}

impl MetricsReport {
    pub fn get(&self, domain: &str, variant: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.variant == variant)
            .and_then(|r| r.metrics.get(metric).copied())
    }

    pub fn csv_header() -> &'static str {
        "domain,variant,metric,value,users,seed\n"
    }

    /// One line per domain × variant × metric, without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for (m, v) in &r.metrics {
                let _ = writeln!(s, "{},{},{},{},{},{}", r.domain, r.variant, m, v, r.users, self.seed);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Corpus views needed to score checkpoints.
pub struct EvalData<'a> {
    pub corpus: &'a Corpus,
    pub split: &'a CorpusSplit,
    pub catalog: &'a [Vec<TokenizedItem>],
    pub max_items: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    pub normalize: bool,
    pub domains: Vec<DomainId>,
    pub variant: String,
}

pub fn check_vocab_digest(checkpoint: &str, vocab: &Vocab) -> Result<()> {
    let corpus = vocab.digest();
    if checkpoint != corpus {
        return Err(Error::VocabDigest {
            checkpoint: checkpoint.to_string(),
            corpus,
        });
    }
    Ok(())
}

fn catalog_ids(corpus: &Corpus, d: DomainId) -> Vec<u32> {
    corpus.domain(d).items.iter().map(|i| i.item_id).collect()
}

fn positions(corpus: &Corpus, d: DomainId, items: &[u32]) -> Result<Vec<usize>> {
    let dom = corpus.domain(d);
    items
        .iter()
        .map(|&i| {
            dom.item_index(i)
                .ok_or_else(|| Error::Data(format!("domain {}: unknown item {i}", dom.name)))
        })
        .collect()
}

/// Ranks for `(history, truth)` pairs of one domain under a text checkpoint.
pub fn text_ranks(
    state: &ModelState,
    data: &EvalData,
    domain: DomainId,
    pairs: &[(Vec<u32>, u32)],
    normalize: bool,
) -> Result<Vec<Option<usize>>> {
    let ids = catalog_ids(data.corpus, domain);
    let item_in = item_inputs(&data.catalog[domain.0], &state.config.encoder)?;
    let items = enhance_plain(state, &encode_plain(state, &item_in.iter().collect::<Vec<_>>())?)?;
    let inputs = pairs
        .iter()
        .map(|(hist, _)| {
            let pos = positions(data.corpus, domain, hist)?;
            let toks: Vec<&TokenizedItem> = pos.iter().map(|&p| &data.catalog[domain.0][p]).collect();
            assemble_input(&toks, data.max_items, state.config.encoder.max_tokens)
        })
        .collect::<Result<Vec<ModelInput>>>()?;
    let mut ranks = Vec::with_capacity(pairs.len());
    for (chunk_in, chunk_pairs) in inputs.chunks(64).zip(pairs.chunks(64)) {
        let h = encode_plain(state, &chunk_in.iter().collect::<Vec<_>>())?;
        let s = enhance_plain(state, &h)?;
        for (r, (_, truth)) in chunk_pairs.iter().enumerate() {
            ranks.push(rank_items(s.row(r), &items, &ids, normalize, Some(*truth))?.rank);
        }
    }
    Ok(ranks)
}

/// Leave-one-out test pairs: train prefix plus validation item → test item.
pub fn test_pairs(split: &CorpusSplit, domain: DomainId) -> Vec<(Vec<u32>, u32)> {
    split.domains[domain.0].iter().map(|u| (u.test_input(), u.test)).collect()
}

/// Training pairs: train prefix minus its last item → that item.
pub fn train_pairs(split: &CorpusSplit, domain: DomainId) -> Vec<(Vec<u32>, u32)> {
    split.domains[domain.0]
        .iter()
        .filter(|u| u.train.len() >= 2)
        .map(|u| (u.train[..u.train.len() - 1].to_vec(), u.train[u.train.len() - 1]))
        .collect()
}

pub fn evaluate(state: &ModelState, data: &EvalData, opts: &EvalOptions) -> Result<Vec<DomainMetrics>> {
    let mut rows = Vec::new();
    for &d in &opts.domains {
        let pairs = test_pairs(data.split, d);
        let name = &data.corpus.domain(d).name;
        if pairs.is_empty() {
            return Err(Error::Data(format!("domain {name} has an empty test set")));
        }
        let ranks = text_ranks(state, data, d, &pairs, opts.normalize)?;
        info!("evaluated {} users in {name}", ranks.len());
        rows.push(DomainMetrics {
            domain: name.clone(),
            variant: opts.variant.clone(),
            users: ranks.len(),
            metrics: aggregate(&ranks, &opts.k_list),
        });
    }
    Ok(rows)
}

/// Ranks each domain's catalog by training-prefix interaction counts.
pub fn popularity_ranks(corpus: &Corpus, split: &CorpusSplit, domain: DomainId) -> Result<Vec<Option<usize>>> {
    let ids = catalog_ids(corpus, domain);
    let mut counts = vec![0.0; ids.len()];
    for u in &split.domains[domain.0] {
        for p in positions(corpus, domain, &u.test_input())? {
            counts[p] += 1.0;
        }
    }
    let ranking = rank_scores(&counts, &ids, None)?;
    let rank_of: BTreeMap<u32, usize> = ranking.ordered.iter().enumerate().map(|(i, &id)| (id, i + 1)).collect();
    Ok(split.domains[domain.0].iter().map(|u| rank_of.get(&u.test).copied()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdBaselineConfig {
    pub d_model: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub normalize_similarity: bool,
    pub init_scale: f64,
}

impl Default for IdBaselineConfig {
    fn default() -> Self {
        IdBaselineConfig {
            d_model: 32,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            temperature: 0.05,
            normalize_similarity: true,
            init_scale: 0.1,
        }
    }
}

pub fn id_table_name(d: DomainId) -> String {
    format!("id.domain{}", d.0)
}

/// Item-id embedding tables, one per domain, trained with the in-batch
/// contrastive loss on domain-pure batches. A sequence is the mean of its
/// items' embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct IdBaseline {
    pub params: ParamStore,
    pub max_items: usize,
}

impl IdBaseline {
    pub fn table(&self, d: DomainId) -> Result<&Mat> {
        self.params.get(&id_table_name(d))
    }

    fn sequence_rep(&self, d: DomainId, pos: &[usize]) -> Result<Vec<f64>> {
        let table = self.table(d)?;
        let recent = &pos[pos.len().saturating_sub(self.max_items)..];
        let mut out = vec![0.0; table.cols];
        for &p in recent {
            for (o, x) in out.iter_mut().zip(table.row(p)) {
                *o += x;
            }
        }
        let n = recent.len().max(1) as f64;
        Ok(out.into_iter().map(|x| x / n).collect())
    }

    pub fn ranks(&self, corpus: &Corpus, domain: DomainId, pairs: &[(Vec<u32>, u32)], normalize: bool) -> Result<Vec<Option<usize>>> {
        let ids = catalog_ids(corpus, domain);
        let table = self.table(domain)?;
        pairs
            .iter()
            .map(|(hist, truth)| {
                let h = self.sequence_rep(domain, &positions(corpus, domain, hist)?)?;
                Ok(rank_items(&h, table, &ids, normalize, Some(*truth))?.rank)
            })
            .collect()
    }
}

pub fn train_id_baseline(corpus: &Corpus, split: &CorpusSplit, cfg: &IdBaselineConfig, max_items: usize, seed: u64) -> Result<IdBaseline> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot train the ID baseline on an empty corpus".into()));
    }
    let mut init = rng::stream(seed, "init.id");
    let mut params = ParamStore::new();
    for d in &corpus.domains {
        params.insert(id_table_name(d.id), Mat::uniform(d.items.len(), cfg.d_model, cfg.init_scale, &mut init))?;
    }
    let mut shuffle = rng::stream(seed, "shuffle.id");
    let mut adam = Adam::new();
    for d in &corpus.domains {
        let name = id_table_name(d.id);
        let mut examples = Vec::new();
        for u in &split.domains[d.id.0] {
            if u.train.len() >= 2 {
                let pos = positions(corpus, d.id, &u.train)?;
                let n = pos.len();
                let hist = pos[(n - 1).saturating_sub(max_items)..n - 1].to_vec();
                examples.push((hist, pos[n - 1]));
            }
        }
        if examples.len() < 2 {
            warn!("domain {}: too few training pairs for the ID baseline", d.name);
            continue;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let mut tape = Tape::new();
                let mut binder = Binder::new(&params, true);
                let rows = chunk
                    .iter()
                    .map(|&i| {
                        let g = binder.gather(&mut tape, &name, &examples[i].0)?;
                        Ok(tape.mean_rows(g))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let seqs = tape.concat_rows(&rows);
                let targets: Vec<usize> = chunk.iter().map(|&i| examples[i].1).collect();
                let pos = binder.gather(&mut tape, &name, &targets)?;
                let loss = pretrain_loss_on(&mut tape, seqs, pos, cfg.temperature, cfg.normalize_similarity)?;
                total += tape.value(loss).data[0];
                batches += 1;
                let grads = tape.backward(loss);
                drop(binder);
                adam.step(&mut params, &grads, cfg.learning_rate)?;
            }
            info!("id baseline {} epoch {epoch}: loss {:.5}", d.name, total / batches.max(1) as f64);
        }
    }
    Ok(IdBaseline { params, max_items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCell {
    /// Domain name, or `inter` for cross-domain pairs.
    pub group: String,
    pub mean_distance: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDistances {
    pub model: String,
    pub intra: Vec<DistanceCell>,
    pub inter: Option<DistanceCell>,
}

impl ModelDistances {
    /// Mean of the per-domain intra-domain means.
    pub fn intra_mean(&self) -> Option<f64> {
        if self.intra.is_empty() {
            return None;
        }
        Some(self.intra.iter().map(|c| c.mean_distance).sum::<f64>() / self.intra.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub sample_size: usize,
    pub seed: u64,
    pub models: Vec<ModelDistances>,
}

impl DistanceReport {
    pub fn model(&self, name: &str) -> Option<&ModelDistances> {
        self.models.iter().find(|m| m.model == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,group,mean_distance,pairs\n");
        for m in &self.models {
            for c in m.intra.iter().chain(m.inter.iter()) {
                let _ = writeln!(s, "{},{},{},{}", m.model, c.group, c.mean_distance, c.pairs);
            }
        }
        s
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    match similarity(a, b, true) {
        Ok(c) => (1.0 - c).clamp(0.0, 2.0),
        // A zero vector has no direction; treat it as orthogonal.
        Err(_) => 1.0,
    }
}

/// Item pairs `((domain, row), (domain, row))`: every pair when there are at
/// most `sample_size`, otherwise `sample_size` uniform draws of distinct items.
fn sample_pairs<R: Rng>(r: &mut R, total: usize, sample_size: usize, mut draw: impl FnMut(&mut R) -> ((usize, usize), (usize, usize)), mut all: impl FnMut() -> Vec<((usize, usize), (usize, usize))>) -> Vec<((usize, usize), (usize, usize))> {
    if total <= sample_size {
        all()
    } else {
        (0..sample_size).map(|_| draw(r)).collect()
    }
}

fn mean_distance(embs: &[Mat], pairs: &[((usize, usize), (usize, usize))]) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|&((da, a), (db, b))| cosine_distance(embs[da].row(a), embs[db].row(b)))
        .sum();
    sum / pairs.len() as f64
}

/// Pair sets shared by every model so their means are directly comparable.
fn distance_pairs(sizes: &[usize], sample_size: usize, seed: u64) -> (Vec<Option<Vec<((usize, usize), (usize, usize))>>>, Option<Vec<((usize, usize), (usize, usize))>>) {
    let mut r = rng::stream(seed, "analysis.pairs");
    let intra = sizes
        .iter()
        .enumerate()
        .map(|(d, &m)| {
            if m < 2 {
                warn!("domain {d} has fewer than 2 items; intra-domain cell omitted");
                return None;
            }
            Some(sample_pairs(
                &mut r,
                m * (m - 1) / 2,
                sample_size,
                |r| {
                    let a = r.gen_range(0..m);
                    let b = (a + 1 + r.gen_range(0..m - 1)) % m;
                    ((d, a), (d, b))
                },
                || (0..m).flat_map(|a| (a + 1..m).map(move |b| ((d, a), (d, b)))).collect(),
            ))
        })
        .collect();
    let live: Vec<usize> = (0..sizes.len()).filter(|&d| sizes[d] > 0).collect();
    let inter = if live.len() < 2 {
        warn!("fewer than 2 non-empty domains; inter-domain cell omitted");
        None
    } else {
        let domain_pairs: Vec<(usize, usize)> = live
            .iter()
            .flat_map(|&a| live.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect();
        let total: usize = domain_pairs.iter().map(|&(a, b)| sizes[a] * sizes[b]).sum();
        Some(sample_pairs(
            &mut r,
            total,
            sample_size,
            |r| {
                let &(da, db) = domain_pairs.choose(r).expect("non-empty");
                ((da, r.gen_range(0..sizes[da])), (db, r.gen_range(0..sizes[db])))
            },
            || {
                domain_pairs
                    .iter()
                    .flat_map(|&(da, db)| (0..sizes[da]).flat_map(move |a| (0..sizes[db]).map(move |b| ((da, a), (db, b)))))
                    .collect()
            },
        ))
    };
    (intra, inter)
}

/// Mean cosine distance within each domain and across domains, for every
/// `(model name, per-domain item embeddings)` pair.
pub fn distance_analysis(models: &[(&str, Vec<Mat>)], domain_names: &[String], sample_size: usize, seed: u64) -> Result<DistanceReport> {
    let Some((_, first)) = models.first() else {
        return Err(Error::Data("distance analysis needs at least one model".into()));
    };
    let sizes: Vec<usize> = first.iter().map(|m| m.rows).collect();
    for (name, embs) in models {
        if embs.iter().map(|m| m.rows).collect::<Vec<_>>() != sizes {
            return Err(Error::shape("distance_analysis", format!("model {name} covers different catalogs")));
        }
    }
    if sample_size == 0 {
        return Err(Error::config("analysis.sample_size must be positive"));
    }
    let (intra_pairs, inter_pairs) = distance_pairs(&sizes, sample_size, seed);
    let out = models
        .iter()
        .map(|(name, embs)| ModelDistances {
            model: name.to_string(),
            intra: intra_pairs
                .iter()
                .enumerate()
                .filter_map(|(d, p)| {
                    p.as_ref().map(|p| DistanceCell {
                        group: domain_names.get(d).cloned().unwrap_or_else(|| format!("domain{d}")),
                        mean_distance: mean_distance(embs, p),
                        pairs: p.len(),
                    })
                })
                .collect(),
            inter: inter_pairs.as_ref().map(|p| DistanceCell {
                group: "inter".into(),
                mean_distance: mean_distance(embs, p),
                pairs: p.len(),
            }),
        })
        .collect();
    Ok(DistanceReport {
        sample_size,
        seed,
        models: out,
    })
}

/// Enhanced item representations of every domain's catalog.
pub fn text_item_embeddings(state: &ModelState, catalog: &[Vec<TokenizedItem>]) -> Result<Vec<Mat>> {
    catalog
        .iter()
        .map(|items| crate::model::item_representations(state, items))
        .collect()
}
