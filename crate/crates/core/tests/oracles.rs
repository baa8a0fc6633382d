//! Straight-line re-implementations of the encoder and co-attention algebra,
//! written with plain loops and compared against the modular forward passes.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptrec::encoder::{encode_sequence, init_encoder, EncoderConfig};
use promptrec::model::{enhance_plain, ModelConfig, ModelState};
use promptrec::params::ParamStore;
use promptrec::prompt::{attend_prompts, CoAttentionBranchParams, PromptConfig};
use promptrec::tensor::Mat;
use promptrec::text::{assemble_input, TokenizedItem};
use promptrec::model::Variant;

type M = Vec<Vec<f64>>;

fn rows(m: &Mat) -> M {
    (0..m.rows).map(|r| m.data[r * m.cols..(r + 1) * m.cols].to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn plus_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Per-head attention of every query row over every key row.
fn heads_attention(q: &M, k: &M, v: &M, n_heads: usize) -> M {
    let d = q[0].len();
    let dk = d / n_heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..n_heads {
        let cols = h * dk..(h + 1) * dk;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for c in cols.clone() {
                out[i][c] = w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    out
}

fn layer_norm(x: &M, g: &M, b: &M) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-12).sqrt();
            r.iter().enumerate().map(|(c, a)| g[0][c] * (a - mean) / sd + b[0][c]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn p(store: &ParamStore, name: &str) -> M {
    rows(store.get(name).unwrap())
}

fn oracle_encoder(store: &ParamStore, cfg: &EncoderConfig, tokens: &[usize]) -> Vec<f64> {
    let we = p(store, "encoder.word_embeddings");
    let pe = p(store, "encoder.position_embeddings");
    let mut x: M = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| we[t].iter().zip(&pe[i]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..cfg.n_layers {
        let n = |part: &str| p(store, &format!("encoder.layer{l}.{part}"));
        let q = plus_bias(&mm(&x, &n("attn.wq")), &n("attn.bq"));
        let k = plus_bias(&mm(&x, &n("attn.wk")), &n("attn.bk"));
        let v = plus_bias(&mm(&x, &n("attn.wv")), &n("attn.bv"));
        let a = plus_bias(&mm(&heads_attention(&q, &k, &v, cfg.n_heads), &n("attn.wo")), &n("attn.bo"));
        let res: M = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
        x = layer_norm(&res, &n("ln1.gain"), &n("ln1.bias"));
        let hid: M = plus_bias(&mm(&x, &n("ffn.w1")), &n("ffn.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let ff = plus_bias(&mm(&hid, &n("ffn.w2")), &n("ffn.b2"));
        let res: M = x.iter().zip(&ff).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
        x = layer_norm(&res, &n("ln2.gain"), &n("ln2.bias"));
    }
    let pooled = plus_bias(&mm(&vec![x[0].clone()], &p(store, "encoder.pooler.weight")), &p(store, "encoder.pooler.bias"));
    pooled[0].iter().map(|v| v.tanh()).collect()
}

fn perturb_all(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        for v in e.value.data.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

#[test]
fn encoder_matches_straight_line_oracle() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            d_model: 4,
            n_layers: 1 + (seed as usize % 2),
            n_heads: if seed % 3 == 0 { 1 } else { 2 },
            d_ff: 6,
            max_tokens: 16,
            init_scale: 0.02,
            ..EncoderConfig::default()
        };
        let vocab = 12;
        let mut store = ParamStore::new();
        init_encoder(&mut store, &cfg, vocab, &mut rng).unwrap();
        perturb_all(&mut store, 0.8, &mut rng);
        let n_items = rng.gen_range(1..4);
        let items: Vec<TokenizedItem> = (0..n_items)
            .map(|_| TokenizedItem {
                tokens: (0..rng.gen_range(1..4)).map(|_| rng.gen_range(3..vocab)).collect(),
            })
            .collect();
        let refs: Vec<&TokenizedItem> = items.iter().collect();
        let input = assemble_input(&refs, 50, cfg.max_tokens).unwrap();
        let got = encode_sequence(&input, &store, &cfg).unwrap().h;
        let want = oracle_encoder(&store, &cfg, &input.tokens[..input.active_len()]);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

fn branch(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, scale: f64) -> CoAttentionBranchParams {
    let mut m = || Mat::uniform(d, d, scale, rng);
    CoAttentionBranchParams {
        wq: m(),
        wk: m(),
        wv: m(),
        wo: m(),
        n_heads,
    }
}

fn oracle_attend(h: &[f64], prompts: &Mat, b: &CoAttentionBranchParams) -> Vec<f64> {
    let q = mm(&vec![h.to_vec()], &rows(&b.wq));
    let k = mm(&rows(prompts), &rows(&b.wk));
    let v = mm(&rows(prompts), &rows(&b.wv));
    mm(&heads_attention(&q, &k, &v, b.n_heads), &rows(&b.wo)).remove(0)
}

#[test]
fn attend_prompts_matches_straight_line_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = branch(&mut rng, 4, 2, 1.0);
        let prompts = Mat::uniform(2, 4, 1.0, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = attend_prompts(&h, &prompts, &b).unwrap();
        let want = oracle_attend(&h, &prompts, &b);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10, "seed {seed}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// With one head and W_O = I the pooled vector is a convex combination
    /// of the two value rows, i.e. lies on the segment between them.
    #[test]
    fn single_head_output_lies_in_value_hull(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = branch(&mut rng, 4, 1, 1.0);
        b.wo = Mat::from_vec(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect());
        let prompts = Mat::uniform(2, 4, 1.0, &mut rng);
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = attend_prompts(&h, &prompts, &b).unwrap();
        let v = mm(&rows(&prompts), &rows(&b.wv));
        let dir: Vec<f64> = (0..4).map(|c| v[0][c] - v[1][c]).collect();
        let rel: Vec<f64> = (0..4).map(|c| out[c] - v[1][c]).collect();
        let dd: f64 = dir.iter().map(|x| x * x).sum();
        prop_assume!(dd > 1e-8);
        let a = dir.iter().zip(&rel).map(|(x, y)| x * y).sum::<f64>() / dd;
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&a), "coefficient {a}");
        for c in 0..4 {
            prop_assert!((rel[c] - a * dir[c]).abs() < 1e-9);
        }
    }

    /// Enhancing a row inside a batch equals enhancing it alone.
    #[test]
    fn enhancement_is_batch_independent(seed in 0u64..1000, n in 2usize..6, pick in 0usize..6) {
        let cfg = ModelConfig {
            vocab_size: 10,
            encoder: EncoderConfig { d_model: 8, d_ff: 8, max_tokens: 8, ..EncoderConfig::default() },
            prompt: PromptConfig { init_scale: 0.3, ..PromptConfig::default() },
            layout: Variant::Full.layout(),
        };
        let state = ModelState::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = Mat::uniform(n, 8, 1.0, &mut rng);
        let i = pick % n;
        let alone = enhance_plain(&state, &Mat::row_vector(batch.row(i).to_vec())).unwrap();
        let all = enhance_plain(&state, &batch).unwrap();
        prop_assert_eq!(all.row(i), alone.row(0));
    }

    #[test]
    fn encoder_output_is_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig { d_model: 8, d_ff: 8, max_tokens: 12, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        init_encoder(&mut store, &cfg, 10, &mut rng).unwrap();
        perturb_all(&mut store, 0.1, &mut rng);
        let item = TokenizedItem { tokens: (0..rng.gen_range(1..8)).map(|_| rng.gen_range(3..10)).collect() };
        let input = assemble_input(&[&item], 50, cfg.max_tokens).unwrap();
        let h = encode_sequence(&input, &store, &cfg).unwrap().h;
        prop_assert!(h.iter().all(|v| v.is_finite()));
    }
}
