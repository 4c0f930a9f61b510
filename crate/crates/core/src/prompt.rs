//! Part-aware prompt construction.
//!
//! Seven text prompts (person, action class, speed, head, body, arms, legs)
//! are encoded by a frozen text encoder and truncated to four tokens each.
//! Every prompt is prefixed with a learnable block of modifier rows so the
//! prompt `k` occupies exactly `L_k` rows; the blocks are stacked into a
//! 77-row conditioning matrix.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::io::container::Container;
use crate::rng;
use crate::tensor::Tensor;

pub const PROMPT_COUNT: usize = 7;
pub const TOKEN_BUDGETS: [usize; PROMPT_COUNT] = [7, 12, 10, 10, 10, 14, 14];
pub const TOTAL_TOKENS: usize = 77;
/// Encoder tokens kept per prompt.
pub const TEXT_TOKENS: usize = 4;
pub const MODIFIER_INIT_STD: f64 = 0.02;
/// Action text used when a sequence carries no label.
pub const UNLABELED_ACTION: &str = "motion";
/// Index of the action-class prompt.
pub const ACTION_PROMPT: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub texts: [String; PROMPT_COUNT],
    pub budgets: [usize; PROMPT_COUNT],
}

impl PromptSpec {
    pub fn new(action: &str) -> Self {
        let action = if action.trim().is_empty() { UNLABELED_ACTION } else { action };
        let texts = ["person", action, "speed", "head", "body", "arms", "legs"].map(str::to_string);
        Self { texts, budgets: TOKEN_BUDGETS }
    }

    pub fn action(&self) -> &str {
        &self.texts[ACTION_PROMPT]
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.iter().sum::<usize>() != TOTAL_TOKENS {
            return Err(Error::Config(format!("token budgets {:?} do not sum to {TOTAL_TOKENS}", self.budgets)));
        }
        if let Some(b) = self.budgets.iter().find(|b| **b < TEXT_TOKENS + 1) {
            return Err(Error::Config(format!("token budget {b} leaves no modifier row")));
        }
        Ok(())
    }

    pub fn modifier_rows(&self) -> [usize; PROMPT_COUNT] {
        self.budgets.map(|l| l - TEXT_TOKENS)
    }
}

/// A frozen text encoder: identical text always yields identical rows.
pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<Vec<f64>>>;
}

/// Hash-seeded stand-in for a pretrained text encoder.
///
/// The text is wrapped as `<sot> words... <eot>` and padded with `<pad>` to at
/// least four positions. Each position draws a Gaussian vector seeded by
/// `sha256(position, token)`; the emitted row is the running mean of those
/// vectors, so later rows summarize the words before them.
#[derive(Clone, Debug)]
pub struct HashTextEncoder {
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn token_vector(&self, position: usize, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update((position as u64).to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut r = rng::seeded_rng(seed);
        rng::gaussian_vec(&mut r, self.dim, 1.0)
    }
}

impl TextEncoder for HashTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let words: Vec<String> = text
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::Encoding { prompt: text.to_string(), reason: "empty prompt".into() });
        }
        let mut tokens = vec!["<sot>".to_string()];
        tokens.extend(words);
        tokens.push("<eot>".to_string());
        while tokens.len() < TEXT_TOKENS {
            tokens.push("<pad>".to_string());
        }
        let mut running = vec![0.0; self.dim];
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                let v = self.token_vector(i, tok);
                for (r, x) in running.iter_mut().zip(&v) {
                    *r += x;
                }
                running.iter().map(|r| r / (i + 1) as f64).collect()
            })
            .collect())
    }
}

/// Encoder backed by precomputed rows, e.g. exported offline from a pretrained
/// model. Texts without an entry are an encoding error.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedEncoder {
    dim: usize,
    rows: BTreeMap<String, Tensor>,
}

impl PrecomputedEncoder {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: BTreeMap::new() }
    }

    pub fn insert(&mut self, text: &str, rows: Tensor) -> Result<()> {
        if rows.ndim() != 2 || rows.shape()[1] != self.dim {
            return shape_err(format!("precomputed rows {:?} for width {}", rows.shape(), self.dim));
        }
        self.rows.insert(text.to_string(), rows);
        Ok(())
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let t = self.rows.get(text).ok_or_else(|| Error::Encoding {
            prompt: text.to_string(),
            reason: "no precomputed embedding".into(),
        })?;
        Ok(t.data().chunks(self.dim).map(<[f64]>::to_vec).collect())
    }
}

/// First four encoder rows of each prompt, one `4×D` tensor per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTokens(pub Vec<Tensor>);

/// Frozen tokens exported offline: `prompt/<k>/frozen`, each `4×D`.
pub fn frozen_tokens_from_container(c: &Container, dim: usize) -> Result<FrozenTokens> {
    let blocks = (0..PROMPT_COUNT)
        .map(|k| {
            let name = format!("prompt/{k}/frozen");
            let t = c.get(&name).map_err(|_| Error::Load(format!("precomputed prompts lack {name}")))?;
            if t.shape() != [TEXT_TOKENS, dim] {
                return Err(Error::Load(format!("{name} is {:?}, expected [{TEXT_TOKENS}, {dim}]", t.shape())));
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    Ok(FrozenTokens(blocks))
}

pub fn encode_texts(spec: &PromptSpec, enc: &dyn TextEncoder) -> Result<FrozenTokens> {
    spec.validate()?;
    let d = enc.embed_dim();
    let mut out = Vec::with_capacity(PROMPT_COUNT);
    for text in &spec.texts {
        let rows = enc.encode(text)?;
        if rows.len() < TEXT_TOKENS {
            return Err(Error::Encoding {
                prompt: text.clone(),
                reason: format!("encoder returned {} tokens, need {TEXT_TOKENS}", rows.len()),
            });
        }
        let mut data = Vec::with_capacity(TEXT_TOKENS * d);
        for row in &rows[..TEXT_TOKENS] {
            if row.len() != d {
                return shape_err(format!("encoder row width {} for prompt {text:?}, expected {d}", row.len()));
            }
            data.extend_from_slice(row);
        }
        out.push(Tensor::from_vec(vec![TEXT_TOKENS, d], data)?);
    }
    Ok(FrozenTokens(out))
}

/// Learnable modifiers plus the frozen text tokens of every action seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    dim: usize,
    budgets: [usize; PROMPT_COUNT],
    /// Trainable `(L_k − 4)×D` blocks.
    pub modifiers: Vec<Tensor>,
    frozen: BTreeMap<String, FrozenTokens>,
}

/// Canonical parameter name of modifier block `k`.
pub fn modifier_name(k: usize) -> String {
    format!("prompt/{k}/modifier")
}

/// Draws modifier blocks i.i.d. from N(0, 0.02²).
pub fn init_modifiers(spec: &PromptSpec, dim: usize, seed: u64) -> Result<PromptBank> {
    spec.validate()?;
    if dim == 0 {
        return Err(Error::Config("prompt embedding width must be positive".into()));
    }
    let mut r = rng::seeded_rng(seed);
    let modifiers = spec
        .modifier_rows()
        .iter()
        .map(|&rows| Tensor::from_vec(vec![rows, dim], rng::gaussian_vec(&mut r, rows * dim, MODIFIER_INIT_STD)))
        .collect::<Result<_>>()?;
    Ok(PromptBank { dim, budgets: spec.budgets, modifiers, frozen: BTreeMap::new() })
}

impl PromptBank {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Encodes and caches the frozen tokens for `action`.
    pub fn register_action(&mut self, action: &str, enc: &dyn TextEncoder) -> Result<()> {
        let spec = PromptSpec::new(action);
        if !self.frozen.contains_key(spec.action()) {
            let tokens = encode_texts(&spec, enc)?;
            self.set_frozen(spec.action(), tokens)?;
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, action: &str, tokens: FrozenTokens) -> Result<()> {
        if tokens.0.len() != PROMPT_COUNT || tokens.0.iter().any(|t| t.shape() != [TEXT_TOKENS, self.dim]) {
            return shape_err(format!("frozen tokens must be {PROMPT_COUNT} blocks of {TEXT_TOKENS}x{}", self.dim));
        }
        self.frozen.insert(action.to_string(), tokens);
        Ok(())
    }

    pub fn frozen(&self, action: &str) -> Result<&FrozenTokens> {
        let key = if action.trim().is_empty() { UNLABELED_ACTION } else { action };
        self.frozen
            .get(key)
            .ok_or_else(|| Error::Encoding { prompt: key.to_string(), reason: "action not registered".into() })
    }

    pub fn actions(&self) -> impl Iterator<Item = (&String, &FrozenTokens)> {
        self.frozen.iter()
    }

    pub fn modifier_map(&self) -> BTreeMap<String, Tensor> {
        self.modifiers.iter().enumerate().map(|(k, m)| (modifier_name(k), m.clone())).collect()
    }

    pub fn set_modifier_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, m) in self.modifiers.iter_mut().enumerate() {
            let v = map
                .get(&modifier_name(k))
                .ok_or_else(|| Error::Load(format!("missing {}", modifier_name(k))))?;
            v.expect_shape(m.shape())?;
            *m = v.clone();
        }
        Ok(())
    }

    /// Assembles the conditioning matrix for `action` outside any graph.
    pub fn assemble(&self, action: &str) -> Result<PromptEmbedding> {
        let frozen = self.frozen(action)?;
        assemble_prompt(&self.modifiers, frozen, &self.budgets)
    }
}

/// The 77×D conditioning matrix and its pooled summary vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

/// Concatenates `[r_k; p̃_k]` per prompt and stacks the prompts in order.
pub fn assemble_prompt(
    modifiers: &[Tensor],
    frozen: &FrozenTokens,
    budgets: &[usize; PROMPT_COUNT],
) -> Result<PromptEmbedding> {
    let mut g = Graph::new();
    let vars = assemble_in_graph(&mut g, modifiers, frozen, budgets, false)?;
    Ok(PromptEmbedding { tokens: g.value(vars.tokens).clone(), pooled: g.value(vars.pooled).clone() })
}

/// Mean of the last row of each of the seven prompt blocks.
pub fn pooled_prompt(tokens: &Tensor, budgets: &[usize; PROMPT_COUNT]) -> Result<Tensor> {
    if tokens.ndim() != 2 || tokens.shape()[0] != budgets.iter().sum::<usize>() {
        return shape_err(format!("pooling expects {} rows, got {:?}", TOTAL_TOKENS, tokens.shape()));
    }
    let d = tokens.shape()[1];
    let mut out = vec![0.0; d];
    let mut end = 0;
    for &l in budgets {
        end += l;
        let row = &tokens.data()[(end - 1) * d..end * d];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_vec(vec![d], out.into_iter().map(|v| v / PROMPT_COUNT as f64).collect())?)
}

/// Graph handles of an assembled prompt.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub tokens: Var,
    pub pooled: Var,
}

/// Builds the prompt inside `g`. With `trainable`, modifiers become named
/// parameters; frozen tokens are always constants.
pub fn assemble_in_graph(
    g: &mut Graph,
    modifiers: &[Tensor],
    frozen: &FrozenTokens,
    budgets: &[usize; PROMPT_COUNT],
    trainable: bool,
) -> Result<PromptVars> {
    if modifiers.len() != PROMPT_COUNT || frozen.0.len() != PROMPT_COUNT {
        return shape_err("prompt bank must hold seven blocks");
    }
    let d = frozen.0[0].shape()[1];
    let mut blocks = Vec::with_capacity(2 * PROMPT_COUNT);
    for k in 0..PROMPT_COUNT {
        let (m, f) = (&modifiers[k], &frozen.0[k]);
        if m.ndim() != 2 || m.shape()[1] != d || f.shape() != [TEXT_TOKENS, d] {
            return shape_err(format!("prompt {k}: modifier {:?} vs frozen {:?}", m.shape(), f.shape()));
        }
        if m.shape()[0] + TEXT_TOKENS != budgets[k] {
            return shape_err(format!("prompt {k}: {} modifier rows for budget {}", m.shape()[0], budgets[k]));
        }
        let mv = if trainable { g.param(&modifier_name(k), m.clone())? } else { g.constant(m.clone()) };
        blocks.push(mv);
        blocks.push(g.constant(f.clone()));
    }
    let tokens = g.concat(&blocks, 0)?;
    let rows: usize = budgets.iter().sum();
    // pooling as a fixed averaging matrix over the per-prompt last rows
    let mut select = vec![0.0; rows];
    let mut end = 0;
    for &l in budgets {
        end += l;
        select[end - 1] = 1.0 / PROMPT_COUNT as f64;
    }
    let sel = g.constant(Tensor::from_vec(vec![1, rows], select)?);
    let pooled = g.matmul(sel, tokens)?;
    let pooled = g.reshape(pooled, &[d])?;
    Ok(PromptVars { tokens, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FixedEncoder {
        dim: usize,
        count: usize,
    }

    impl TextEncoder for FixedEncoder {
        fn embed_dim(&self) -> usize {
            self.dim
        }
        fn encode(&self, text: &str) -> Result<Vec<Vec<f64>>> {
            let base = text.len() as f64;
            Ok((0..self.count).map(|i| vec![base + i as f64; self.dim]).collect())
        }
    }

    fn bank(dim: usize) -> PromptBank {
        let spec = PromptSpec::new("walk");
        let mut b = init_modifiers(&spec, dim, 11).unwrap();
        b.register_action("walk", &HashTextEncoder::new(dim)).unwrap();
        b
    }

    #[test]
    fn budgets_and_modifier_rows() {
        let spec = PromptSpec::new("walk");
        spec.validate().unwrap();
        assert_eq!(spec.modifier_rows().iter().sum::<usize>(), 49);
        let b = init_modifiers(&spec, 8, 0).unwrap();
        assert_eq!(b.modifiers[0].shape(), &[3, 8]);
        assert_eq!(b.modifiers.iter().map(|m| m.shape()[0]).sum::<usize>(), 49);
    }

    #[test]
    fn modifier_init_is_seeded() {
        let spec = PromptSpec::new("walk");
        let a = init_modifiers(&spec, 16, 3).unwrap();
        let b = init_modifiers(&spec, 16, 3).unwrap();
        assert_eq!(a.modifiers, b.modifiers);
        let c = init_modifiers(&spec, 16, 4).unwrap();
        assert_ne!(a.modifiers, c.modifiers);
    }

    #[test]
    fn modifier_init_mean_near_zero_at_width_512() {
        let b = init_modifiers(&PromptSpec::new("walk"), 512, 1).unwrap();
        let all: Vec<f64> = b.modifiers.iter().flat_map(|m| m.data().to_vec()).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-3, "mean {mean}");
    }

    #[test]
    fn encode_keeps_first_four_rows() {
        let enc = FixedEncoder { dim: 3, count: 10 };
        let frozen = encode_texts(&PromptSpec::new("walk"), &enc).unwrap();
        assert_eq!(frozen.0[0].shape(), &[4, 3]);
        // "person" has length 6: rows 6,7,8,9
        assert_eq!(frozen.0[0].data()[9..], [9.0, 9.0, 9.0]);
    }

    #[test]
    fn short_encoder_output_names_prompt() {
        let enc = FixedEncoder { dim: 3, count: 3 };
        match encode_texts(&PromptSpec::new("walk"), &enc) {
            Err(Error::Encoding { prompt, .. }) => assert_eq!(prompt, "person"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn action_change_touches_only_action_prompt() {
        let enc = HashTextEncoder::new(16);
        let a = encode_texts(&PromptSpec::new("walk cycle"), &enc).unwrap();
        let b = encode_texts(&PromptSpec::new("arm wave"), &enc).unwrap();
        for k in 0..PROMPT_COUNT {
            assert_eq!(a.0[k] == b.0[k], k != ACTION_PROMPT, "prompt {k}");
        }
        let again = encode_texts(&PromptSpec::new("walk cycle"), &enc).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn hash_encoder_pads_short_texts() {
        let enc = HashTextEncoder::new(4);
        assert_eq!(enc.encode("sit").unwrap().len(), 4);
        assert_eq!(enc.encode("a b c d").unwrap().len(), 6);
        assert!(enc.encode("   ").is_err());
    }

    #[test]
    fn assembled_layout() {
        let b = bank(6);
        let p = b.assemble("walk").unwrap();
        assert_eq!(p.tokens.shape(), &[77, 6]);
        // person block: 3 modifier rows then 4 text rows
        assert_eq!(&p.tokens.data()[..18], b.modifiers[0].data());
        assert_eq!(&p.tokens.data()[18..42], b.frozen("walk").unwrap().0[0].data());
        assert!(p.pooled.max_abs_diff(&pooled_prompt(&p.tokens, &TOKEN_BUDGETS).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_prompt_pools_to_zero() {
        let zeros: Vec<Tensor> = TOKEN_BUDGETS.iter().map(|l| Tensor::zeros(&[l - 4, 5])).collect();
        let frozen = FrozenTokens(vec![Tensor::zeros(&[4, 5]); 7]);
        let p = assemble_prompt(&zeros, &frozen, &TOKEN_BUDGETS).unwrap();
        assert!(p.pooled.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let u = [0.5, -1.0, 2.0];
        let tokens = Tensor::from_vec(vec![77, 3], u.repeat(77)).unwrap();
        assert_eq!(pooled_prompt(&tokens, &TOKEN_BUDGETS).unwrap().data(), &u);

        // one-hot last rows: prompt k's last row is e_{k mod 3} scaled by k+1
        let mut data = vec![0.0; 77 * 3];
        let mut end = 0;
        let mut expected = [0.0; 3];
        for (k, l) in TOKEN_BUDGETS.iter().enumerate() {
            end += l;
            data[(end - 1) * 3 + k % 3] = (k + 1) as f64;
            expected[k % 3] += (k + 1) as f64 / 7.0;
        }
        let tokens = Tensor::from_vec(vec![77, 3], data).unwrap();
        let pooled = pooled_prompt(&tokens, &TOKEN_BUDGETS).unwrap();
        for i in 0..3 {
            assert!((pooled.data()[i] - expected[i]).abs() < 1e-15);
        }
        let scaled = pooled_prompt(&tokens.scale(3.0), &TOKEN_BUDGETS).unwrap();
        for i in 0..3 {
            assert!((scaled.data()[i] - 3.0 * pooled.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let b = bank(6);
        let mut mods = b.modifiers.clone();
        mods[2] = Tensor::zeros(&[6, 5]);
        assert!(matches!(
            assemble_prompt(&mods, b.frozen("walk").unwrap(), &TOKEN_BUDGETS),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unlabeled_action_uses_default_text() {
        assert_eq!(PromptSpec::new("").action(), UNLABELED_ACTION);
        let mut b = bank(4);
        b.register_action("", &HashTextEncoder::new(4)).unwrap();
        assert!(b.frozen("").is_ok());
        assert!(b.frozen(UNLABELED_ACTION).is_ok());
    }

    #[test]
    fn frozen_rows_receive_no_gradient() {
        let b = bank(4);
        let mut g = Graph::new();
        let vars = assemble_in_graph(&mut g, &b.modifiers, b.frozen("walk").unwrap(), &TOKEN_BUDGETS, true).unwrap();
        let m = g.mean(vars.tokens);
        let grads = g.backward(m).unwrap();
        for k in 0..PROMPT_COUNT {
            assert!(grads.param(&modifier_name(k)).is_some());
        }
        assert_eq!(grads.into_param_map().len(), PROMPT_COUNT);
    }

    #[test]
    fn precomputed_tokens_load_from_container() {
        let mut c = Container::new();
        for k in 0..PROMPT_COUNT {
            c.insert(format!("prompt/{k}/frozen"), &Tensor::full(&[TEXT_TOKENS, 6], k as f64));
        }
        let t = frozen_tokens_from_container(&c, 6).unwrap();
        assert_eq!(t.0[3].data()[0], 3.0);
        assert!(frozen_tokens_from_container(&c, 5).is_err());
        c.remove("prompt/6/frozen");
        assert!(frozen_tokens_from_container(&c, 6).is_err());
    }
}
