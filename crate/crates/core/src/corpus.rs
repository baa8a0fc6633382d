//! Multi-domain interaction corpora: ingestion, filtering, overlap removal,
//! leave-one-out splitting and a synthetic generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Words the synthetic generator may place in any domain's titles.
pub const STOP_WORDS: &[&str] = &["the", "with", "for", "and", "set"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    pub title: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: u32,
    pub ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u32,
    /// External user key, retained only until overlap enforcement.
    #[serde(skip)]
    pub key: Option<String>,
    pub events: Vec<Interaction>,
}

impl UserSequence {
    pub fn items(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.item).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: DomainId,
    pub name: String,
    /// Sorted by `item_id`.
    pub items: Vec<ItemRecord>,
    /// Sorted by `user_id`.
    pub users: Vec<UserSequence>,
    /// Latent topic per entry of `items`, synthetic corpora only. Never fed to a model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_topics: Option<Vec<usize>>,
}

impl Domain {
    pub fn item(&self, item_id: u32) -> Option<&ItemRecord> {
        self.items
            .binary_search_by_key(&item_id, |i| i.item_id)
            .ok()
            .map(|idx| &self.items[idx])
    }

    /// Position of `item_id` in the catalog.
    pub fn item_index(&self, item_id: u32) -> Option<usize> {
        self.items.binary_search_by_key(&item_id, |i| i.item_id).ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub min_seq_len: Option<usize>,
    pub min_item_freq: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub domains: Vec<Domain>,
    pub target: DomainId,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn empty() -> Self {
        Corpus {
            domains: Vec::new(),
            target: DomainId(0),
            meta: CorpusMeta::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.domains.iter().all(|d| d.users.is_empty())
    }

    pub fn domain(&self, id: DomainId) -> &Domain {
        &self.domains[id.0]
    }

    pub fn target_domain(&self) -> Option<&Domain> {
        self.domains.get(self.target.0)
    }

    pub fn domain_by_name(&self, name: &str) -> Option<&Domain> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn num_users(&self) -> usize {
        self.domains.iter().map(|d| d.users.len()).sum()
    }

    /// Truncates the user list of `domain` to its first `max_users` entries.
    pub fn restrict_users(&self, domain: DomainId, max_users: usize) -> Corpus {
        let mut out = self.clone();
        out.domains[domain.0].users.truncate(max_users);
        out
    }
}

#[derive(Deserialize)]
struct RawEvent {
    domain: String,
    user: String,
    item: String,
    title: String,
    ts: i64,
}

/// Reads JSON-lines events from `paths` (concatenated in order). The target
/// domain is `target` when given, otherwise the lexicographically last domain.
pub fn ingest_events<P: AsRef<Path>>(paths: &[P], target: Option<&str>) -> Result<Corpus> {
    let mut events = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: RawEvent = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            if ev.title.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "title is empty after trimming".into(),
                });
            }
            events.push(ev);
        }
    }
    assemble(events, target)
}

fn assemble(events: Vec<RawEvent>, target: Option<&str>) -> Result<Corpus> {
    if events.is_empty() {
        return Ok(Corpus::empty());
    }
    let domain_names: BTreeSet<&str> = events.iter().map(|e| e.domain.as_str()).collect();
    let domain_names: Vec<String> = domain_names.into_iter().map(str::to_owned).collect();
    let target_idx = match target {
        Some(t) => domain_names
            .iter()
            .position(|d| d == t)
            .ok_or_else(|| Error::Data(format!("target domain {t:?} not present in events")))?,
        None => domain_names.len() - 1,
    };

    let mut domains = Vec::with_capacity(domain_names.len());
    for (d_idx, name) in domain_names.iter().enumerate() {
        let evs: Vec<&RawEvent> = events.iter().filter(|e| &e.domain == name).collect();

        let mut titles: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &evs {
            match titles.get(e.item.as_str()) {
                Some(existing) if *existing != e.title => warn!(
                    "domain {name}: item {} has conflicting titles; keeping {:?}",
                    e.item, existing
                ),
                Some(_) => {}
                None => {
                    titles.insert(&e.item, &e.title);
                }
            }
        }
        let item_ids: HashMap<&str, u32> = titles
            .keys()
            .enumerate()
            .map(|(i, k)| (*k, i as u32))
            .collect();
        let items = titles
            .iter()
            .map(|(k, t)| ItemRecord {
                item_id: item_ids[k],
                title: t.trim().to_string(),
            })
            .collect();

        let mut per_user: BTreeMap<&str, Vec<Interaction>> = BTreeMap::new();
        for e in &evs {
            per_user.entry(&e.user).or_default().push(Interaction {
                item: item_ids[e.item.as_str()],
                ts: e.ts,
            });
        }
        let users = per_user
            .into_iter()
            .enumerate()
            .map(|(u, (key, mut events))| {
                // stable: equal timestamps keep input order
                events.sort_by_key(|e| e.ts);
                UserSequence {
                    user_id: u as u32,
                    key: Some(key.to_string()),
                    events,
                }
            })
            .collect();
        domains.push(Domain {
            id: DomainId(d_idx),
            name: name.clone(),
            items,
            users,
            item_topics: None,
        });
    }
    Ok(Corpus {
        domains,
        target: DomainId(target_idx),
        meta: CorpusMeta::default(),
    })
}

/// Drops items with fewer than `min_item_freq` distinct users, then users
/// with fewer than `min_seq_len` remaining interactions, repeating both
/// passes until neither removes anything.
pub fn filter_corpus(c: &Corpus, min_seq_len: usize, min_item_freq: usize) -> Corpus {
    let mut out = c.clone();
    for domain in &mut out.domains {
        loop {
            let mut freq: HashMap<u32, usize> = HashMap::new();
            for u in &domain.users {
                let distinct: HashSet<u32> = u.events.iter().map(|e| e.item).collect();
                for i in distinct {
                    *freq.entry(i).or_default() += 1;
                }
            }
            let keep = |id: u32| freq.get(&id).copied().unwrap_or(0) >= min_item_freq;
            let items_before = domain.items.len();
            let users_before = domain.users.len();

            let mut kept_topics = Vec::new();
            let mut kept_items = Vec::new();
            for (idx, item) in domain.items.iter().enumerate() {
                if keep(item.item_id) {
                    kept_items.push(item.clone());
                    if let Some(t) = &domain.item_topics {
                        kept_topics.push(t[idx]);
                    }
                }
            }
            domain.items = kept_items;
            if domain.item_topics.is_some() {
                domain.item_topics = Some(kept_topics);
            }
            for u in &mut domain.users {
                u.events.retain(|e| keep(e.item));
            }
            domain.users.retain(|u| u.events.len() >= min_seq_len);

            if domain.items.len() == items_before && domain.users.len() == users_before {
                break;
            }
        }
    }
    out.meta.min_seq_len = Some(min_seq_len);
    out.meta.min_item_freq = Some(min_item_freq);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OverlapReport {
    pub removed_keys: Vec<String>,
}

/// Removes every external user key that occurs in two or more domains, then
/// discards the remaining keys.
pub fn enforce_non_overlap(c: &Corpus) -> (Corpus, OverlapReport) {
    let mut seen: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for d in &c.domains {
        for u in &d.users {
            if let Some(k) = &u.key {
                seen.entry(k).or_default().insert(d.id.0);
            }
        }
    }
    let removed: BTreeSet<String> = seen
        .into_iter()
        .filter(|(_, ds)| ds.len() >= 2)
        .map(|(k, _)| k.to_string())
        .collect();
    let mut out = c.clone();
    for d in &mut out.domains {
        d.users
            .retain(|u| u.key.as_ref().map_or(true, |k| !removed.contains(k)));
        for u in &mut d.users {
            u.key = None;
        }
    }
    (
        out,
        OverlapReport {
            removed_keys: removed.into_iter().collect(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: u32,
    pub train: Vec<u32>,
    pub valid: u32,
    pub test: u32,
}

impl UserSplit {
    /// Items preceding the test target: the train prefix plus the validation item.
    pub fn test_input(&self) -> Vec<u32> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    /// Indexed by domain id.
    pub domains: Vec<Vec<UserSplit>>,
}

/// Per user: last item is the test target, the one before it the validation
/// target, the rest the training prefix. Sequences shorter than 3 are skipped.
pub fn split_leave_one_out(c: &Corpus) -> CorpusSplit {
    let domains = c
        .domains
        .iter()
        .map(|d| {
            d.users
                .iter()
                .filter_map(|u| {
                    let items = u.items();
                    if items.len() < 3 {
                        warn!(
                            "domain {}: user {} has {} items, excluded from split",
                            d.name,
                            u.user_id,
                            items.len()
                        );
                        return None;
                    }
                    let n = items.len();
                    Some(UserSplit {
                        user_id: u.user_id,
                        train: items[..n - 2].to_vec(),
                        valid: items[n - 2],
                        test: items[n - 1],
                    })
                })
                .collect()
        })
        .collect();
    CorpusSplit { domains }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_domains: usize,
    pub items_per_domain: usize,
    pub users_per_domain: usize,
    pub num_topics: usize,
    pub shared_topic_fraction: f64,
    pub title_len_range: (usize, usize),
    pub seq_len_range: (usize, usize),
    pub words_per_topic: usize,
    /// Probability that an interaction is drawn from one of the user's preferred topics.
    pub topic_focus: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 3,
            items_per_domain: 50,
            users_per_domain: 200,
            num_topics: 8,
            shared_topic_fraction: 0.5,
            title_len_range: (3, 5),
            seq_len_range: (6, 12),
            words_per_topic: 8,
            topic_focus: 0.9,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("num_domains", self.num_domains),
            ("items_per_domain", self.items_per_domain),
            ("users_per_domain", self.users_per_domain),
            ("num_topics", self.num_topics),
            ("words_per_topic", self.words_per_topic),
            ("title_len_range", self.title_len_range.0),
            ("seq_len_range", self.seq_len_range.0),
        ] {
            if v < 1 {
                bad.push(name.to_string());
            }
        }
        if self.title_len_range.0 > self.title_len_range.1 {
            bad.push("title_len_range".into());
        }
        if self.seq_len_range.0 > self.seq_len_range.1 {
            bad.push("seq_len_range".into());
        }
        if !(0.0..=1.0).contains(&self.shared_topic_fraction) {
            bad.push("shared_topic_fraction".into());
        }
        if !(0.0..=1.0).contains(&self.topic_focus) {
            bad.push("topic_focus".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                message: format!("invalid synthetic settings: {}", bad.join(", ")),
                keys: bad,
            })
        }
    }

    pub fn num_shared_topics(&self) -> usize {
        (self.shared_topic_fraction * self.num_topics as f64).round() as usize
    }
}

struct WordForge {
    used: HashSet<String>,
}

impl WordForge {
    const ONSETS: &'static [&'static str] = &[
        "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
        "br", "st", "tr", "pl", "gr",
    ];
    const VOWELS: &'static [&'static str] = &["a", "e", "i", "o", "u", "ai", "ou"];

    fn new() -> Self {
        WordForge {
            used: STOP_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn word<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(Self::ONSETS.choose(rng).unwrap());
                w.push_str(Self::VOWELS.choose(rng).unwrap());
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn bag<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

/// Synthesizes a corpus whose items are titled from latent topics. The first
/// `num_shared_topics` topics use one word bag for every domain; the rest have
/// a disjoint bag per domain. The last domain is the target.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut words_rng = rng::stream(cfg.seed, "synth.words");
    let mut forge = WordForge::new();
    let shared = cfg.num_shared_topics();
    let shared_bags: Vec<Vec<String>> = (0..shared)
        .map(|_| forge.bag(cfg.words_per_topic, &mut words_rng))
        .collect();

    let mut domains = Vec::with_capacity(cfg.num_domains);
    for d in 0..cfg.num_domains {
        let mut rng = rng::stream(cfg.seed, &format!("synth.domain{d}"));
        let bags: Vec<Vec<String>> = (0..cfg.num_topics)
            .map(|t| {
                if t < shared {
                    shared_bags[t].clone()
                } else {
                    forge.bag(cfg.words_per_topic, &mut words_rng)
                }
            })
            .collect();

        let mut topics: Vec<usize> = (0..cfg.items_per_domain).map(|i| i % cfg.num_topics).collect();
        topics.shuffle(&mut rng);
        let items: Vec<ItemRecord> = topics
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let len = rng.gen_range(cfg.title_len_range.0..=cfg.title_len_range.1);
                let mut words: Vec<&str> = bags[t]
                    .choose_multiple(&mut rng, len.min(bags[t].len()))
                    .map(String::as_str)
                    .collect();
                while words.len() < len {
                    words.push(bags[t].choose(&mut rng).unwrap());
                }
                if rng.gen_bool(0.3) {
                    let pos = rng.gen_range(0..=words.len());
                    words.insert(pos, STOP_WORDS.choose(&mut rng).unwrap());
                }
                ItemRecord {
                    item_id: i as u32,
                    title: words.join(" "),
                }
            })
            .collect();

        let mut by_topic: Vec<Vec<u32>> = vec![Vec::new(); cfg.num_topics];
        for (i, &t) in topics.iter().enumerate() {
            by_topic[t].push(i as u32);
        }
        let populated: Vec<usize> = (0..cfg.num_topics).filter(|&t| !by_topic[t].is_empty()).collect();

        let users = (0..cfg.users_per_domain)
            .map(|u| {
                let n_pref = populated.len().min(2);
                let preferred: Vec<usize> =
                    populated.choose_multiple(&mut rng, n_pref).copied().collect();
                let len = rng.gen_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
                let events = (0..len)
                    .map(|step| {
                        let topic = if rng.gen_bool(cfg.topic_focus) {
                            *preferred.choose(&mut rng).unwrap()
                        } else {
                            *populated.choose(&mut rng).unwrap()
                        };
                        Interaction {
                            item: *by_topic[topic].choose(&mut rng).unwrap(),
                            ts: step as i64,
                        }
                    })
                    .collect();
                UserSequence {
                    user_id: u as u32,
                    key: Some(format!("domain{d}/user{u}")),
                    events,
                }
            })
            .collect();

        domains.push(Domain {
            id: DomainId(d),
            name: format!("domain{d}"),
            items,
            users,
            item_topics: Some(topics),
        });
    }
    Ok(Corpus {
        target: DomainId(cfg.num_domains - 1),
        domains,
        meta: CorpusMeta {
            seed: Some(cfg.seed),
            ..CorpusMeta::default()
        },
    })
}

#[derive(Serialize, Deserialize)]
struct ItemLine {
    domain: usize,
    item_id: u32,
    title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    domain: usize,
    user_id: u32,
    items: Vec<u32>,
    timestamps: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    domains: Vec<String>,
    target: usize,
    num_items: Vec<usize>,
    num_users: Vec<usize>,
    #[serde(flatten)]
    meta: CorpusMeta,
}

/// Writes `items.jsonl`, `sequences.jsonl` and `meta.json` into `dir`.
pub fn save_corpus(c: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::new();
    let mut seqs = Vec::new();
    for d in &c.domains {
        for (idx, it) in d.items.iter().enumerate() {
            let line = ItemLine {
                domain: d.id.0,
                item_id: it.item_id,
                title: it.title.clone(),
                topic: d.item_topics.as_ref().map(|t| t[idx]),
            };
            serde_json::to_writer(&mut items, &line)?;
            items.push(b'\n');
        }
        for u in &d.users {
            let line = SequenceLine {
                domain: d.id.0,
                user_id: u.user_id,
                items: u.items(),
                timestamps: u.events.iter().map(|e| e.ts).collect(),
            };
            serde_json::to_writer(&mut seqs, &line)?;
            seqs.push(b'\n');
        }
    }
    let meta = MetaFile {
        domains: c.domains.iter().map(|d| d.name.clone()).collect(),
        target: c.target.0,
        num_items: c.domains.iter().map(|d| d.items.len()).collect(),
        num_users: c.domains.iter().map(|d| d.users.len()).collect(),
        meta: c.meta.clone(),
    };
    write_file(&dir.join("items.jsonl"), &items)?;
    write_file(&dir.join("sequences.jsonl"), &seqs)?;
    write_file(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta_path = dir.join("meta.json");
    let meta: MetaFile = serde_json::from_slice(&read_file(&meta_path)?)?;
    let mut domains: Vec<Domain> = meta
        .domains
        .iter()
        .enumerate()
        .map(|(i, name)| Domain {
            id: DomainId(i),
            name: name.clone(),
            items: Vec::new(),
            users: Vec::new(),
            item_topics: None,
        })
        .collect();
    let data_err = |path: &Path, n: usize, e: String| Error::Parse {
        path: path.to_path_buf(),
        line: n + 1,
        message: e,
    };
    let items_path = dir.join("items.jsonl");
    for (n, line) in String::from_utf8_lossy(&read_file(&items_path)?).lines().enumerate() {
        let it: ItemLine =
            serde_json::from_str(line).map_err(|e| data_err(&items_path, n, e.to_string()))?;
        let d = domains
            .get_mut(it.domain)
            .ok_or_else(|| data_err(&items_path, n, format!("unknown domain {}", it.domain)))?;
        d.items.push(ItemRecord {
            item_id: it.item_id,
            title: it.title,
        });
        if let Some(t) = it.topic {
            d.item_topics.get_or_insert_with(Vec::new).push(t);
        }
    }
    let seq_path = dir.join("sequences.jsonl");
    for (n, line) in String::from_utf8_lossy(&read_file(&seq_path)?).lines().enumerate() {
        let s: SequenceLine =
            serde_json::from_str(line).map_err(|e| data_err(&seq_path, n, e.to_string()))?;
        if s.items.len() != s.timestamps.len() {
            return Err(data_err(&seq_path, n, "items/timestamps length mismatch".into()));
        }
        let d = domains
            .get_mut(s.domain)
            .ok_or_else(|| data_err(&seq_path, n, format!("unknown domain {}", s.domain)))?;
        d.users.push(UserSequence {
            user_id: s.user_id,
            key: None,
            events: s
                .items
                .iter()
                .zip(&s.timestamps)
                .map(|(&item, &ts)| Interaction { item, ts })
                .collect(),
        });
    }
    Ok(Corpus {
        domains,
        target: DomainId(meta.target),
        meta: meta.meta,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
