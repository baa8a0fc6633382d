//! End-to-end commands over the run-directory layout
//! `{config.json, vocab.json, checkpoint.bin, checkpoint.manifest.json,
//! telemetry.jsonl, metrics.json, metrics.csv}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{EvalScope, RunConfig};
use crate::corpus::{
    enforce_non_overlap, filter_corpus, generate_synthetic, ingest_events, load_corpus, save_corpus, split_leave_one_out, write_file, Corpus,
    CorpusSplit, DomainId,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, check_vocab_digest, distance_analysis, evaluate, popularity_ranks, test_pairs, text_item_embeddings, train_id_baseline,
    DistanceReport, DomainMetrics, EvalData, EvalOptions, IdBaseline, MetricsReport,
};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::model::{ModelState, Variant};
use crate::text::{tokenize_catalog, TokenizedItem, Vocab};
use crate::training::{run_pretrain, run_prompt_tune, EpochRecord, TrainData};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const DISTANCE_JSON: &str = "distance.json";
pub const DISTANCE_CSV: &str = "distance.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

/// Corpus, split, vocabulary and tokenized catalogs for one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: CorpusSplit,
    pub vocab: Vocab,
    pub catalog: Vec<Vec<TokenizedItem>>,
}

impl Prepared {
    pub fn train_data(&self, cfg: &RunConfig) -> TrainData<'_> {
        TrainData {
            corpus: &self.corpus,
            split: &self.split,
            catalog: &self.catalog,
            max_items: cfg.max_items,
        }
    }

    pub fn eval_data(&self, cfg: &RunConfig) -> EvalData<'_> {
        EvalData {
            corpus: &self.corpus,
            split: &self.split,
            catalog: &self.catalog,
            max_items: cfg.max_items,
        }
    }

    pub fn eval_domains(&self, scope: EvalScope) -> Vec<DomainId> {
        match scope {
            EvalScope::All => self.corpus.domains.iter().map(|d| d.id).collect(),
            EvalScope::Target => vec![self.corpus.target],
        }
    }
}

fn set_target(mut c: Corpus, target: Option<&str>) -> Result<Corpus> {
    if let Some(name) = target {
        let d = c
            .domain_by_name(name)
            .ok_or_else(|| Error::Data(format!("target domain {name:?} not in corpus")))?;
        c.target = d.id;
    }
    Ok(c)
}

/// Filters and de-overlaps a raw corpus.
pub fn clean_corpus(raw: &Corpus, min_seq_len: usize, min_item_freq: usize) -> Corpus {
    let (c, report) = enforce_non_overlap(raw);
    if !report.removed_keys.is_empty() {
        warn!("removed {} users present in several domains", report.removed_keys.len());
    }
    filter_corpus(&c, min_seq_len, min_item_freq)
}

pub fn load_source_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let src = &cfg.corpus;
    let raw = if let Some(s) = &src.synthetic {
        generate_synthetic(s)?
    } else if let Some(dir) = &src.dir {
        load_corpus(dir)?
    } else if let Some(paths) = &src.events {
        ingest_events(paths, src.target.as_deref())?
    } else {
        return Err(Error::config("no corpus source configured"));
    };
    let c = set_target(clean_corpus(&raw, src.min_seq_len, src.min_item_freq), src.target.as_deref())?;
    if c.is_empty() {
        return Err(Error::Data("corpus is empty after filtering".into()));
    }
    Ok(c)
}

pub fn prepare_corpus(cfg: &RunConfig, corpus: Corpus) -> Prepared {
    let split = split_leave_one_out(&corpus);
    let vocab = Vocab::build(&corpus, cfg.vocab_min_count);
    let catalog = tokenize_catalog(&corpus, &vocab, cfg.max_title_tokens);
    Prepared {
        corpus,
        split,
        vocab,
        catalog,
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    Ok(prepare_corpus(cfg, load_source_corpus(cfg)?))
}

/// Outputs of a complete variant run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub variant: Variant,
    /// Parameters after stage 1 (or the random init for variants without it).
    pub pretrained: ModelState,
    pub state: ModelState,
    pub telemetry: Vec<EpochRecord>,
    pub stage: &'static str,
}

/// Trains `cfg.variant` from scratch: stage 1 unless PR, stage 2 unless PT.
pub fn train_variant(cfg: &RunConfig, p: &Prepared) -> Result<RunArtifacts> {
    let variant = cfg.variant;
    let mut state = ModelState::init(cfg.model_config(p.vocab.len()), cfg.seed)?;
    let data = p.train_data(cfg);
    let mut telemetry = Vec::new();
    let mut stage = "init";
    if variant.pretrains() {
        telemetry.extend(run_pretrain(&mut state, &data, &cfg.pretrain, cfg.seed)?);
        stage = "pretrain";
    }
    let pretrained = state.clone();
    if variant.tunes() {
        telemetry.extend(run_prompt_tune(&mut state, &data, &cfg.tune, cfg.seed)?);
        stage = "tune";
    }
    Ok(RunArtifacts {
        variant,
        pretrained,
        state,
        telemetry,
        stage,
    })
}

pub fn eval_options(cfg: &RunConfig, p: &Prepared, variant: &str) -> EvalOptions {
    EvalOptions {
        k_list: cfg.k_list.clone(),
        normalize: cfg.tune.normalize_similarity,
        domains: p.eval_domains(cfg.eval_domains),
        variant: variant.to_string(),
    }
}

pub fn metrics_report(cfg: &RunConfig, state: &ModelState, p: &Prepared, variant: &str) -> Result<MetricsReport> {
    Ok(MetricsReport {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        rows: evaluate(state, &p.eval_data(cfg), &eval_options(cfg, p, variant))?,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(dir: &Path, name: &str, s: &str) -> Result<()> {
    write_file(&dir.join(name), s.as_bytes())
}

fn telemetry_lines(records: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn write_run_header(dir: &Path, cfg: &RunConfig, vocab: &Vocab) -> Result<()> {
    ensure_dir(dir)?;
    write_text(dir, CONFIG_FILE, &cfg.to_json()?)?;
    write_file(&dir.join(VOCAB_FILE), &vocab.to_json()?)
}

fn meta(cfg: &RunConfig, p: &Prepared, stage: &str, state: &ModelState, variant: Option<Variant>) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.into(),
        seed: cfg.seed,
        variant,
        vocab_digest: p.vocab.digest(),
        config_digest: cfg.digest(),
        model: Some(state.config.clone()),
    }
}

pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_text(dir, METRICS_JSON, &report.to_json()?)?;
    write_text(dir, METRICS_CSV, &report.to_csv())
}

/// Loads a checkpoint and rejects it when its vocabulary differs from the corpus'.
pub fn load_matching_checkpoint(dir: &Path, cfg: &RunConfig, p: &Prepared) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    check_vocab_digest(&ckpt.manifest.vocab_digest, &p.vocab)?;
    if ckpt.manifest.config_digest != cfg.digest() {
        warn!("checkpoint was produced under a different configuration");
    }
    Ok(ckpt)
}

/// Writes a generated synthetic corpus (unfiltered) to `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Corpus> {
    let s = cfg
        .corpus
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("synth needs corpus.synthetic"))?;
    let c = generate_synthetic(s)?;
    ensure_dir(out)?;
    save_corpus(&c, out)?;
    Ok(c)
}

pub fn cmd_ingest<P: AsRef<Path>>(paths: &[P], target: Option<&str>, min_seq_len: usize, min_item_freq: usize, out: &Path) -> Result<Corpus> {
    let raw = ingest_events(paths, target)?;
    let c = set_target(clean_corpus(&raw, min_seq_len, min_item_freq), target)?;
    if c.is_empty() {
        return Err(Error::Data("corpus is empty after filtering".into()));
    }
    ensure_dir(out)?;
    save_corpus(&c, out)?;
    Ok(c)
}

/// Stage 1 (or a bare random init for PR) into `cfg.output_dir`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<EpochRecord>> {
    let p = prepare(cfg)?;
    let mut state = ModelState::init(cfg.model_config(p.vocab.len()), cfg.seed)?;
    let mut telemetry = Vec::new();
    let stage = if cfg.variant.pretrains() {
        telemetry = run_pretrain(&mut state, &p.train_data(cfg), &cfg.pretrain, cfg.seed)?;
        "pretrain"
    } else {
        "init"
    };
    let dir = &cfg.output_dir;
    write_run_header(dir, cfg, &p.vocab)?;
    save_checkpoint(dir, meta(cfg, &p, stage, &state, Some(cfg.variant)), &state.params)?;
    write_text(dir, TELEMETRY_FILE, &telemetry_lines(&telemetry)?)?;
    Ok(telemetry)
}

/// Stage 2 from the checkpoint in `checkpoint`, written to `cfg.output_dir`.
pub fn cmd_tune(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<EpochRecord>> {
    let p = prepare(cfg)?;
    let ckpt = load_matching_checkpoint(checkpoint, cfg, &p)?;
    let variant = ckpt.manifest.variant;
    let mut state = ckpt.into_model()?;
    let telemetry = run_prompt_tune(&mut state, &p.train_data(cfg), &cfg.tune, cfg.seed)?;
    let dir = &cfg.output_dir;
    write_run_header(dir, cfg, &p.vocab)?;
    save_checkpoint(dir, meta(cfg, &p, "tune", &state, variant), &state.params)?;
    write_text(dir, TELEMETRY_FILE, &telemetry_lines(&telemetry)?)?;
    Ok(telemetry)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let p = prepare(cfg)?;
    let ckpt = load_matching_checkpoint(checkpoint, cfg, &p)?;
    let tag = ckpt.manifest.variant.map(|v| v.tag()).unwrap_or("FULL").to_string();
    let state = ckpt.into_model()?;
    let report = metrics_report(cfg, &state, &p, &tag)?;
    ensure_dir(&cfg.output_dir)?;
    write_metrics(&cfg.output_dir, &report)?;
    Ok(report)
}

/// Full pipeline for one variant and seed into `dir`.
pub fn run_into(cfg: &RunConfig, p: &Prepared, dir: &Path) -> Result<(RunArtifacts, MetricsReport)> {
    let art = train_variant(cfg, p)?;
    let report = metrics_report(cfg, &art.state, p, cfg.variant.tag())?;
    write_run_header(dir, cfg, &p.vocab)?;
    save_checkpoint(dir, meta(cfg, p, art.stage, &art.state, Some(art.variant)), &art.state.params)?;
    write_text(dir, TELEMETRY_FILE, &telemetry_lines(&art.telemetry)?)?;
    write_metrics(dir, &report)?;
    Ok((art, report))
}

pub fn cmd_run(cfg: &RunConfig) -> Result<MetricsReport> {
    let p = prepare(cfg)?;
    Ok(run_into(cfg, &p, &cfg.output_dir)?.1)
}

pub fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{}_seed{seed}", variant.tag())
}

pub const ABLATION_CSV: &str = "ablation.csv";

/// Every variant × seed into its own directory plus one combined CSV.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablate needs at least one variant and one seed"));
    }
    ensure_dir(&cfg.output_dir)?;
    let mut csv = String::from(MetricsReport::csv_header());
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut seeded = cfg.clone();
        seeded.seed = seed;
        let p = prepare(&seeded)?;
        for &variant in variants {
            let mut run = seeded.clone();
            run.variant = variant;
            let dir = cfg.output_dir.join(run_dir_name(variant, seed));
            run.output_dir = dir.clone();
            info!("ablation run {}", dir.display());
            let (_, report) = run_into(&run, &p, &dir)?;
            csv.push_str(&report.csv_rows());
            reports.push(report);
        }
    }
    write_text(&cfg.output_dir, ABLATION_CSV, &csv)?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    #[serde(rename = "d_w")]
    DW,
    Tau,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d_w" | "dw" => Ok(SweepParam::DW),
            "tau" | "temperature" => Ok(SweepParam::Tau),
            _ => Err(Error::config(format!("unknown sweep parameter {s:?}; expected d_w or tau"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::DW => "d_w",
            SweepParam::Tau => "tau",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::DW => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config {
                        message: format!("d_w sweep value {value} must be a positive integer"),
                        keys: vec!["prompt.d_w".into()],
                    });
                }
                cfg.prompt.d_w = value as usize;
            }
            SweepParam::Tau => {
                cfg.pretrain.temperature = value;
                cfg.tune.temperature = value;
            }
        }
        cfg.validate()
    }
}

pub fn sweep_csv_name(param: SweepParam) -> String {
    format!("sweep_{}.csv", param.name())
}

/// One full run per value; one CSV row per value with the target domain's metrics.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    ensure_dir(&cfg.output_dir)?;
    let p = prepare(cfg)?;
    let target = p.corpus.domain(p.corpus.target).name.clone();
    let mut csv = String::new();
    let mut header_keys: Option<Vec<String>> = None;
    for &value in values {
        let mut run = cfg.clone();
        param.apply(&mut run, value)?;
        run.eval_domains = EvalScope::Target;
        let dir = cfg.output_dir.join(format!("{}_{value}", param.name()));
        run.output_dir = dir.clone();
        let (_, report) = run_into(&run, &p, &dir)?;
        let row = report
            .rows
            .iter()
            .find(|r| r.domain == target)
            .ok_or_else(|| Error::Data("sweep run produced no target-domain metrics".into()))?;
        let keys: Vec<String> = row.metrics.keys().cloned().collect();
        if header_keys.is_none() {
            let _ = writeln!(csv, "param,value,domain,variant,users,seed,{}", keys.join(","));
            header_keys = Some(keys.clone());
        }
        let vals: Vec<String> = keys.iter().map(|k| row.metrics[k].to_string()).collect();
        let _ = writeln!(csv, "{},{value},{},{},{},{},{}", param.name(), row.domain, row.variant, row.users, run.seed, vals.join(","));
    }
    write_text(&cfg.output_dir, &sweep_csv_name(param), &csv)?;
    Ok(csv)
}

pub fn id_baseline_from(ckpt: Checkpoint, cfg: &RunConfig) -> Result<IdBaseline> {
    if ckpt.manifest.stage != "id-baseline" {
        return Err(Error::Data(format!("expected an id-baseline checkpoint, found stage {}", ckpt.manifest.stage)));
    }
    Ok(IdBaseline {
        params: ckpt.params,
        max_items: cfg.max_items,
    })
}

/// ID-embedding and popularity baselines: checkpoint plus metrics.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<MetricsReport> {
    let p = prepare(cfg)?;
    let base = train_id_baseline(&p.corpus, &p.split, &cfg.id_baseline, cfg.max_items, cfg.seed)?;
    let report = baseline_report(cfg, &p, &base)?;
    let dir = &cfg.output_dir;
    write_run_header(dir, cfg, &p.vocab)?;
    save_checkpoint(
        dir,
        CheckpointMeta {
            stage: "id-baseline".into(),
            seed: cfg.seed,
            variant: None,
            vocab_digest: p.vocab.digest(),
            config_digest: cfg.digest(),
            model: None,
        },
        &base.params,
    )?;
    write_metrics(dir, &report)?;
    Ok(report)
}

pub fn baseline_report(cfg: &RunConfig, p: &Prepared, base: &IdBaseline) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for d in p.eval_domains(cfg.eval_domains) {
        let name = p.corpus.domain(d).name.clone();
        let pairs = test_pairs(&p.split, d);
        if pairs.is_empty() {
            return Err(Error::Data(format!("domain {name} has an empty test set")));
        }
        let id = base.ranks(&p.corpus, d, &pairs, cfg.id_baseline.normalize_similarity)?;
        let pop = popularity_ranks(&p.corpus, &p.split, d)?;
        for (variant, ranks) in [("ID", id), ("POP", pop)] {
            rows.push(DomainMetrics {
                domain: name.clone(),
                variant: variant.into(),
                users: ranks.len(),
                metrics: aggregate(&ranks, &cfg.k_list),
            });
        }
    }
    Ok(MetricsReport {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        rows,
    })
}

pub fn distance_report(cfg: &RunConfig, p: &Prepared, text: &ModelState, id: &IdBaseline) -> Result<DistanceReport> {
    let text_embs = text_item_embeddings(text, &p.catalog)?;
    let id_embs = p
        .corpus
        .domains
        .iter()
        .map(|d| id.table(d.id).cloned())
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = p.corpus.domains.iter().map(|d| d.name.clone()).collect();
    distance_analysis(&[("text", text_embs), ("id", id_embs)], &names, cfg.analysis.sample_size, cfg.seed)
}

pub fn cmd_analyze(cfg: &RunConfig, text_ckpt: &Path, id_ckpt: &Path) -> Result<DistanceReport> {
    let p = prepare(cfg)?;
    let text = load_matching_checkpoint(text_ckpt, cfg, &p)?.into_model()?;
    let id = id_baseline_from(load_matching_checkpoint(id_ckpt, cfg, &p)?, cfg)?;
    let report = distance_report(cfg, &p, &text, &id)?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    write_text(dir, DISTANCE_JSON, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(dir, DISTANCE_CSV, &report.to_csv())?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    ensure_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir, GRADCHECK_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if !report.passed {
        let worst = report
            .tensors
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
            .map(|t| format!("{} under {}", t.tensor, t.loss))
            .unwrap_or_default();
        return Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {:e} ({worst}) exceeds {:e}",
            report.worst_rel_err, report.tolerance
        )));
    }
    Ok(report)
}

pub fn output_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}
