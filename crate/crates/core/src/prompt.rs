//! Prompt banks, the co-attention prompt encoder and representation fusion.
//!
//! A representation `h` queries each prompt bank through its own multi-head
//! attention branch, producing one pooled `d_V` vector per bank. The fused
//! output is `relu([h ; p_shared ; p_specific] W1 + b1) W2 + b2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::multi_head_on;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

pub const SHARED_PROMPTS: &str = "prompt.shared";
pub const SPECIFIC_PROMPTS: &str = "prompt.specific";
pub const SHARED_BRANCH: &str = "coattn.shared";
pub const SPECIFIC_BRANCH: &str = "coattn.specific";
pub const FUSION_W1: &str = "fusion.w1";
pub const FUSION_B1: &str = "fusion.b1";
pub const FUSION_W2: &str = "fusion.w2";
pub const FUSION_B2: &str = "fusion.b2";

const BRANCH_PARTS: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Rows per prompt bank.
    pub d_w: usize,
    /// Fusion hidden width; defaults to the model width.
    pub d_h: Option<usize>,
    pub n_heads: usize,
    pub init_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            d_w: 2,
            d_h: None,
            n_heads: 2,
            init_scale: 0.02,
        }
    }
}

impl PromptConfig {
    pub fn hidden(&self, d_model: usize) -> usize {
        self.d_h.unwrap_or(d_model)
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let mut bad = Vec::new();
        if self.d_w == 0 {
            bad.push("prompt.d_w");
        }
        if self.d_h == Some(0) {
            bad.push("prompt.d_h");
        }
        if self.n_heads == 0 || d_model % self.n_heads != 0 {
            bad.push("prompt.n_heads");
        }
        if !(self.init_scale > 0.0) {
            bad.push("prompt.init_scale");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                message: format!("invalid prompt settings: {}", bad.join(", ")),
                keys: bad.into_iter().map(String::from).collect(),
            })
        }
    }
}

/// Which prompt components exist in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub shared: bool,
    pub specific: bool,
    /// `false` replaces each attention branch by the unweighted row mean of its bank.
    pub co_attention: bool,
}

impl PromptLayout {
    pub const FULL: PromptLayout = PromptLayout {
        shared: true,
        specific: true,
        co_attention: true,
    };

    pub fn fusion_input_width(&self, d_model: usize) -> usize {
        d_model * (1 + usize::from(self.shared) + usize::from(self.specific))
    }
}

pub fn branch_name(branch: &str, part: &str) -> String {
    format!("{branch}.{part}")
}

pub fn init_prompts<R: Rng>(
    store: &mut ParamStore,
    d_model: usize,
    cfg: &PromptConfig,
    layout: PromptLayout,
    rng: &mut R,
) -> Result<()> {
    let s = cfg.init_scale;
    for (present, bank, branch) in [
        (layout.shared, SHARED_PROMPTS, SHARED_BRANCH),
        (layout.specific, SPECIFIC_PROMPTS, SPECIFIC_BRANCH),
    ] {
        if !present {
            continue;
        }
        store.insert(bank, Mat::uniform(cfg.d_w, d_model, s, rng))?;
        if layout.co_attention {
            for part in BRANCH_PARTS {
                store.insert(branch_name(branch, part), Mat::uniform(d_model, d_model, s, rng))?;
            }
        }
    }
    let d_in = layout.fusion_input_width(d_model);
    let d_h = cfg.hidden(d_model);
    store.insert(FUSION_W1, Mat::uniform(d_in, d_h, s, rng))?;
    store.insert(FUSION_B1, Mat::uniform(1, d_h, s, rng))?;
    store.insert(FUSION_W2, Mat::uniform(d_h, d_model, s, rng))?;
    store.insert(FUSION_B2, Mat::uniform(1, d_model, s, rng))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl BranchVars {
    pub fn bind(tape: &mut Tape, binder: &mut Binder, branch: &str) -> Result<Self> {
        Ok(BranchVars {
            wq: binder.var(tape, &branch_name(branch, "wq"))?,
            wk: binder.var(tape, &branch_name(branch, "wk"))?,
            wv: binder.var(tape, &branch_name(branch, "wv"))?,
            wo: binder.var(tape, &branch_name(branch, "wo"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FusionVars {
    pub fn bind(tape: &mut Tape, binder: &mut Binder) -> Result<Self> {
        Ok(FusionVars {
            w1: binder.var(tape, FUSION_W1)?,
            b1: binder.var(tape, FUSION_B1)?,
            w2: binder.var(tape, FUSION_W2)?,
            b2: binder.var(tape, FUSION_B2)?,
        })
    }
}

/// Each row of `h` queries the rows of `prompts`; one `d_V` output per row.
pub fn attend_on(tape: &mut Tape, h: Var, prompts: Var, branch: &BranchVars, n_heads: usize) -> Result<Var> {
    let q = tape.matmul(h, branch.wq);
    let k = tape.matmul(prompts, branch.wk);
    let v = tape.matmul(prompts, branch.wv);
    let heads = multi_head_on(tape, q, k, v, n_heads, None)?;
    Ok(tape.matmul(heads, branch.wo))
}

/// The prompt-bank row mean, repeated for each of the `rows` queries.
pub fn mean_prompt_on(tape: &mut Tape, rows: usize, prompts: Var) -> Var {
    let mean = tape.mean_rows(prompts);
    if rows == 1 {
        mean
    } else {
        tape.concat_rows(&vec![mean; rows])
    }
}

/// `act(concat(parts) W1 + b1) W2 + b2`, parts concatenated in the given order.
pub fn fuse_on(tape: &mut Tape, parts: &[Var], f: &FusionVars) -> Var {
    let joined = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(parts)
    };
    let hidden = tape.matmul(joined, f.w1);
    let hidden = tape.add_row(hidden, f.b1);
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, f.w2);
    tape.add_row(out, f.b2)
}

/// Prompt-enhances every row of `h` with the components present in `layout`.
pub fn enhance_on(
    tape: &mut Tape,
    binder: &mut Binder,
    h: Var,
    cfg: &PromptConfig,
    layout: PromptLayout,
) -> Result<Var> {
    let rows = tape.value(h).rows;
    let mut parts = vec![h];
    for (present, bank, branch) in [
        (layout.shared, SHARED_PROMPTS, SHARED_BRANCH),
        (layout.specific, SPECIFIC_PROMPTS, SPECIFIC_BRANCH),
    ] {
        if !present {
            continue;
        }
        let prompts = binder.var(tape, bank)?;
        let pooled = if layout.co_attention {
            let b = BranchVars::bind(tape, binder, branch)?;
            attend_on(tape, h, prompts, &b, cfg.n_heads)?
        } else {
            mean_prompt_on(tape, rows, prompts)
        };
        parts.push(pooled);
    }
    let f = FusionVars::bind(tape, binder)?;
    Ok(fuse_on(tape, &parts, &f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub shared: Mat,
    pub specific: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionBranchParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub n_heads: usize,
}

impl CoAttentionBranchParams {
    pub fn from_store(store: &ParamStore, branch: &str, n_heads: usize) -> Result<Self> {
        Ok(CoAttentionBranchParams {
            wq: store.get(&branch_name(branch, "wq"))?.clone(),
            wk: store.get(&branch_name(branch, "wk"))?.clone(),
            wv: store.get(&branch_name(branch, "wv"))?.clone(),
            wo: store.get(&branch_name(branch, "wo"))?.clone(),
            n_heads,
        })
    }

    fn on_tape(&self, tape: &mut Tape) -> BranchVars {
        BranchVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl FusionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(FusionParams {
            w1: store.get(FUSION_W1)?.clone(),
            b1: store.get(FUSION_B1)?.clone(),
            w2: store.get(FUSION_W2)?.clone(),
            b2: store.get(FUSION_B2)?.clone(),
        })
    }

    fn on_tape(&self, tape: &mut Tape) -> FusionVars {
        FusionVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    pub shared: Vec<f64>,
    pub specific: Vec<f64>,
    pub fused: Vec<f64>,
}

fn check_width(op: &'static str, v: &[f64], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::shape(op, format!("vector of length {} vs width {want}", v.len())));
    }
    Ok(())
}

/// Pooled prompt vector for a single query `h`.
pub fn attend_prompts(h: &[f64], prompts: &Mat, branch: &CoAttentionBranchParams) -> Result<Vec<f64>> {
    check_width("attend_prompts", h, prompts.cols)?;
    if branch.wq.shape() != (prompts.cols, prompts.cols) {
        return Err(Error::shape("attend_prompts", "projection shape"));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(Mat::row_vector(h.to_vec()));
    let pv = tape.constant(prompts.clone());
    let b = branch.on_tape(&mut tape);
    let out = attend_on(&mut tape, hv, pv, &b, branch.n_heads)?;
    Ok(tape.value(out).data.clone())
}

pub fn fuse(h: &[f64], p_shared: &[f64], p_specific: &[f64], f: &FusionParams) -> Result<Vec<f64>> {
    check_width("fuse", p_shared, h.len())?;
    check_width("fuse", p_specific, h.len())?;
    if f.w1.rows != 3 * h.len() {
        return Err(Error::shape("fuse", format!("W1 has {} rows for input {}", f.w1.rows, 3 * h.len())));
    }
    let mut tape = Tape::new();
    let parts = [
        tape.constant(Mat::row_vector(h.to_vec())),
        tape.constant(Mat::row_vector(p_shared.to_vec())),
        tape.constant(Mat::row_vector(p_specific.to_vec())),
    ];
    let fv = f.on_tape(&mut tape);
    let out = fuse_on(&mut tape, &parts, &fv);
    Ok(tape.value(out).data.clone())
}

/// Both branches followed by fusion, for one representation.
pub fn enhance(
    h: &[f64],
    bank: &PromptBank,
    shared: &CoAttentionBranchParams,
    specific: &CoAttentionBranchParams,
    f: &FusionParams,
) -> Result<PromptEncoding> {
    let p_sh = attend_prompts(h, &bank.shared, shared)?;
    let p_sp = attend_prompts(h, &bank.specific, specific)?;
    let fused = fuse(h, &p_sh, &p_sp, f)?;
    Ok(PromptEncoding {
        shared: p_sh,
        specific: p_sp,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branch(d: usize, heads: usize, seed: u64) -> CoAttentionBranchParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoAttentionBranchParams {
            wq: Mat::uniform(d, d, 0.5, &mut rng),
            wk: Mat::uniform(d, d, 0.5, &mut rng),
            wv: Mat::uniform(d, d, 0.5, &mut rng),
            wo: Mat::uniform(d, d, 0.5, &mut rng),
            n_heads: heads,
        }
    }

    fn fusion(d: usize, seed: u64) -> FusionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionParams {
            w1: Mat::uniform(3 * d, d, 0.5, &mut rng),
            b1: Mat::uniform(1, d, 0.5, &mut rng),
            w2: Mat::uniform(d, d, 0.5, &mut rng),
            b2: Mat::uniform(1, d, 0.5, &mut rng),
        }
    }

    #[test]
    fn single_prompt_row_ignores_query() {
        let b = branch(4, 2, 1);
        let p = Mat::from_rows(&[vec![0.1, -0.4, 0.3, 0.9]]);
        let expected = p.matmul(&b.wv).matmul(&b.wo).data;
        for h in [vec![1.0, 2.0, 3.0, 4.0], vec![-5.0, 0.0, 0.5, 0.1]] {
            let out = attend_prompts(&h, &p, &b).unwrap();
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_prompt_rows_match_single_row() {
        let b = branch(4, 2, 2);
        let row = vec![0.2, 0.7, -0.1, 0.4];
        let single = attend_prompts(&[1.0, 0.0, 0.0, 1.0], &Mat::from_rows(&[row.clone()]), &b).unwrap();
        let many = Mat::from_rows(&[row.clone(), row.clone(), row]);
        let out = attend_prompts(&[-3.0, 2.0, 1.0, 0.5], &many, &b).unwrap();
        for (a, e) in out.iter().zip(&single) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_fusion_weights_yield_output_bias() {
        let d = 4;
        let mut f = fusion(d, 3);
        f.w1 = Mat::zeros(3 * d, d);
        f.w2 = Mat::zeros(d, d);
        let out = fuse(&[1.0; 4], &[2.0; 4], &[-1.0; 4], &f).unwrap();
        assert_eq!(out, f.b2.data);
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let f = fusion(4, 4);
        let (a, b, c) = ([0.3, 0.1, -0.2, 0.5], [0.9, -0.7, 0.2, 0.0], [-0.4, 0.6, 0.8, -0.3]);
        assert_ne!(fuse(&a, &b, &c, &f).unwrap(), fuse(&b, &a, &c, &f).unwrap());
    }

    #[test]
    fn fusion_input_widths() {
        assert_eq!(PromptLayout::FULL.fusion_input_width(4), 12);
        let ssp = PromptLayout {
            shared: false,
            specific: false,
            co_attention: true,
        };
        assert_eq!(ssp.fusion_input_width(4), 4);
    }

    #[test]
    fn enhance_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = PromptBank {
            shared: Mat::uniform(2, 4, 0.5, &mut rng),
            specific: Mat::uniform(2, 4, 0.5, &mut rng),
        };
        let (s, p, f) = (branch(4, 2, 6), branch(4, 2, 7), fusion(4, 8));
        let h = [0.5, -0.5, 0.25, 1.0];
        let a = enhance(&h, &bank, &s, &p, &f).unwrap();
        assert_eq!(a, enhance(&h, &bank, &s, &p, &f).unwrap());
        assert_eq!(a.fused.len(), 4);
    }

    #[test]
    fn branches_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = PromptBank {
            shared: Mat::uniform(2, 4, 0.5, &mut rng),
            specific: Mat::uniform(2, 4, 0.5, &mut rng),
        };
        let (s, p, f) = (branch(4, 2, 10), branch(4, 2, 11), fusion(4, 12));
        let h = [0.1, 0.2, 0.3, 0.4];
        let a = enhance(&h, &bank, &s, &p, &f).unwrap();
        let zeroed_bank = PromptBank {
            specific: Mat::zeros(2, 4),
            ..bank.clone()
        };
        let zeroed_branch = CoAttentionBranchParams {
            wq: Mat::zeros(4, 4),
            wk: Mat::zeros(4, 4),
            wv: Mat::zeros(4, 4),
            wo: Mat::zeros(4, 4),
            n_heads: 2,
        };
        let b = enhance(&h, &zeroed_bank, &s, &zeroed_branch, &f).unwrap();
        assert_eq!(a.shared, b.shared);
    }
}
