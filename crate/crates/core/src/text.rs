//! Vocabulary and model-input assembly.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub id: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_count: usize,
    tokens: Vec<VocabEntry>,
}

impl Vocab {
    /// Counts title tokens over every item of every domain. Ids after the
    /// reserved ones follow descending frequency, then lexicographic order.
    pub fn build(corpus: &Corpus, min_count: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in &corpus.domains {
            for item in &d.items {
                for t in tokenize(&item.title) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut entries: Vec<VocabEntry> = RESERVED
            .iter()
            .enumerate()
            .map(|(id, t)| VocabEntry {
                token: t.to_string(),
                id,
                count: 0,
            })
            .collect();
        for (token, count) in kept {
            entries.push(VocabEntry {
                id: entries.len(),
                token,
                count,
            });
        }
        Vocab::from_entries(entries, min_count)
    }

    fn from_entries(entries: Vec<VocabEntry>, min_count: usize) -> Vocab {
        let index = entries
            .iter()
            .skip(RESERVED.len())
            .map(|e| (e.token.clone(), e.id))
            .collect();
        Vocab {
            entries,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() <= RESERVED.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id for `token`, or [`UNK`].
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.token.as_str())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&VocabFile {
            min_count: self.min_count,
            tokens: self.entries.clone(),
        })?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Vocab> {
        let f: VocabFile = serde_json::from_slice(bytes)?;
        for (i, e) in f.tokens.iter().enumerate() {
            if e.id != i {
                return Err(Error::Data(format!("vocab ids not dense at {i}")));
            }
        }
        if f.tokens.len() < RESERVED.len()
            || f.tokens.iter().zip(RESERVED).any(|(e, r)| e.token != r)
        {
            return Err(Error::Data("vocab reserved tokens missing".into()));
        }
        Ok(Vocab::from_entries(f.tokens, f.min_count))
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn digest(&self) -> String {
        let bytes = self.to_json().expect("vocab serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedItem {
    pub tokens: Vec<usize>,
}

/// In-vocabulary tokens of `title`, truncated to `max_len`. A title with no
/// known token becomes `[UNK]`.
pub fn tokenize_title(title: &str, vocab: &Vocab, max_len: usize) -> TokenizedItem {
    assert!(max_len >= 1, "title length limit must be at least 1");
    let mut tokens: Vec<usize> = tokenize(title)
        .iter()
        .filter_map(|t| vocab.get(t))
        .take(max_len)
        .collect();
    if tokens.is_empty() {
        tokens.push(UNK);
    }
    TokenizedItem { tokens }
}

/// Tokenized catalogs, indexed `[domain][catalog position]`.
pub fn tokenize_catalog(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<Vec<TokenizedItem>> {
    corpus
        .domains
        .iter()
        .map(|d| {
            d.items
                .iter()
                .map(|i| tokenize_title(&i.title, vocab, max_len))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    /// Start position of each kept item, oldest first.
    pub item_offsets: Vec<usize>,
    pub mask: Vec<u8>,
    pub positions: Vec<usize>,
}

impl ModelInput {
    pub fn num_items(&self) -> usize {
        self.item_offsets.len()
    }

    /// Number of unpadded positions, CLS included.
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn max_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// `[CLS]` followed by the most recent items, oldest first, padded to
/// `max_tokens`. Items that do not fit whole are dropped from the old end.
pub fn assemble_input(
    items: &[&TokenizedItem],
    max_items: usize,
    max_tokens: usize,
) -> Result<ModelInput> {
    if items.is_empty() {
        return Err(Error::Data("cannot assemble an empty sequence".into()));
    }
    let recent = &items[items.len().saturating_sub(max_items)..];
    if let Some(too_long) = recent.iter().find(|it| it.tokens.len() + 1 > max_tokens) {
        return Err(Error::config(format!(
            "item with {} tokens cannot fit a {max_tokens}-token input",
            too_long.tokens.len()
        )));
    }
    let mut budget = max_tokens - 1;
    let mut first_kept = recent.len();
    for (i, it) in recent.iter().enumerate().rev() {
        if it.tokens.len() > budget {
            break;
        }
        budget -= it.tokens.len();
        first_kept = i;
    }

    let mut tokens = Vec::with_capacity(max_tokens);
    let mut item_offsets = Vec::new();
    tokens.push(CLS);
    for it in &recent[first_kept..] {
        item_offsets.push(tokens.len());
        tokens.extend_from_slice(&it.tokens);
    }
    let active = tokens.len();
    tokens.resize(max_tokens, PAD);
    let mask = (0..max_tokens).map(|i| u8::from(i < active)).collect();
    Ok(ModelInput {
        tokens,
        item_offsets,
        mask,
        positions: (0..max_tokens).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusMeta, Domain, DomainId, ItemRecord};
    use proptest::prelude::*;

    fn corpus_of(titles: &[&str]) -> Corpus {
        Corpus {
            domains: vec![Domain {
                id: DomainId(0),
                name: "d".into(),
                items: titles
                    .iter()
                    .enumerate()
                    .map(|(i, t)| ItemRecord {
                        item_id: i as u32,
                        title: t.to_string(),
                    })
                    .collect(),
                users: vec![],
                item_topics: None,
            }],
            target: DomainId(0),
            meta: CorpusMeta::default(),
        }
    }

    fn item(tokens: Vec<usize>) -> TokenizedItem {
        TokenizedItem { tokens }
    }

    #[test]
    fn vocab_contents_and_thresholds() {
        let c = corpus_of(&["red pen", "Red, cup!"]);
        let v = Vocab::build(&c, 1);
        assert_eq!(v.len(), 6);
        assert_eq!(v.get("red"), Some(3));
        assert!(v.get("pen").is_some() && v.get("cup").is_some());
        assert_eq!(v.lookup("blue"), UNK);
        // "cup" < "pen" lexicographically at equal frequency
        assert!(v.get("cup").unwrap() < v.get("pen").unwrap());

        let v2 = Vocab::build(&c, 2);
        assert_eq!(v2.len(), 4);
        assert!(v2.get("red").is_some());
        assert!(Vocab::build(&c, 3).is_empty());
    }

    #[test]
    fn vocab_is_deterministic_and_round_trips() {
        let c = corpus_of(&["a b c", "c b", "z"]);
        let v = Vocab::build(&c, 1);
        assert_eq!(v, Vocab::build(&c, 1));
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.digest(), v.digest());
        assert_ne!(Vocab::build(&corpus_of(&["a"]), 1).digest(), v.digest());
    }

    #[test]
    fn title_truncation_and_unknowns() {
        let c = corpus_of(&["a b c d e f g"]);
        let v = Vocab::build(&c, 1);
        let t = tokenize_title("a b c d e f g", &v, 5);
        let expected: Vec<usize> = ["a", "b", "c", "d", "e"].iter().map(|w| v.lookup(w)).collect();
        assert_eq!(t.tokens, expected);
        assert_eq!(tokenize_title("xx yy", &v, 5).tokens, vec![UNK]);
    }

    #[test]
    fn layout_with_padding() {
        let items = [item(vec![10, 11]), item(vec![20, 21]), item(vec![30, 31])];
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        let m = assemble_input(&refs, 50, 10).unwrap();
        assert_eq!(m.tokens, vec![CLS, 10, 11, 20, 21, 30, 31, PAD, PAD, PAD]);
        assert_eq!(m.mask, vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(m.item_offsets, vec![1, 3, 5]);
    }

    #[test]
    fn max_items_keeps_most_recent() {
        let items: Vec<TokenizedItem> = (0..60).map(|i| item(vec![100 + i])).collect();
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        let m = assemble_input(&refs, 50, 256).unwrap();
        assert_eq!(m.num_items(), 50);
        assert_eq!(m.tokens[1], 110);
        assert_eq!(m.tokens[50], 159);
    }

    #[test]
    fn token_budget_drops_oldest_whole_items() {
        let items: Vec<TokenizedItem> = (0..3).map(|i| item(vec![10 * (i + 1); 4])).collect();
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        let m = assemble_input(&refs, 50, 10).unwrap();
        // 1 + 4 + 4 = 9 <= 10; a third item would need 13
        assert_eq!(m.num_items(), 2);
        assert_eq!(&m.tokens[1..9], &[20, 20, 20, 20, 30, 30, 30, 30]);
        assert_eq!(m.tokens[9], PAD);
    }

    #[test]
    fn oversized_item_is_an_error() {
        let items = [item(vec![5; 10])];
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        assert!(matches!(assemble_input(&refs, 50, 10), Err(Error::Config { .. })));
        assert!(assemble_input(&refs, 50, 11).is_ok());
    }

    proptest! {
        #[test]
        fn input_invariants(
            lens in proptest::collection::vec(1usize..6, 1..20),
            max_items in 1usize..25,
            small in 6usize..30,
            extra in 0usize..30,
        ) {
            let items: Vec<TokenizedItem> = lens
                .iter()
                .enumerate()
                .map(|(i, &l)| item(vec![3 + i; l]))
                .collect();
            let refs: Vec<&TokenizedItem> = items.iter().collect();
            let a = assemble_input(&refs, max_items, small).unwrap();
            let b = assemble_input(&refs, max_items, small + extra).unwrap();
            for m in [&a, &b] {
                prop_assert_eq!(m.tokens[0], CLS);
                prop_assert_eq!(m.tokens.iter().filter(|&&t| t == CLS).count(), 1);
                prop_assert!(m.num_items() <= max_items);
                for i in 1..m.tokens.len() {
                    prop_assert_eq!(m.mask[i] == 0, m.tokens[i] == PAD);
                }
            }
            // a larger budget never drops an item the smaller one kept
            prop_assert!(b.num_items() >= a.num_items());
            let kept_a: Vec<usize> = a.item_offsets.iter().map(|&o| a.tokens[o]).collect();
            let kept_b: Vec<usize> = b.item_offsets.iter().map(|&o| b.tokens[o]).collect();
            prop_assert!(kept_b.ends_with(&kept_a));
        }
    }
}
