//! Frozen stand-in for a pre-trained text encoder.
//!
//! Words are hashed (FNV-1a, lowercase, whitespace split) into a fixed table
//! whose embeddings are drawn once from a fixed seed. Encoded prompts follow
//! the layout `[START][description][V x M][END]`, where only the `M` slots in
//! `V` are learnable.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numcore::{Rng, Tensor};

pub const TABLE_SIZE: usize = 4096;
pub const VOCAB_SEED: u64 = 7;
/// Spread of the frozen stub embeddings.
pub const EMBED_STD: f64 = 0.5;
/// Spread of freshly initialized learnable slots.
pub const LEARNABLE_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Start,
    End,
    Pad,
    Placeholder,
}

impl Special {
    pub fn id(self) -> u32 {
        TABLE_SIZE as u32
            + match self {
                Special::Start => 0,
                Special::End => 1,
                Special::Pad => 2,
                Special::Placeholder => 3,
            }
    }
}

/// One position of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    Learnable,
}

pub fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Vocab {
    dim: usize,
    table: Vec<f64>,
}

impl Vocab {
    pub fn new(dim: usize) -> Self {
        Vocab::with_seed(dim, VOCAB_SEED)
    }

    pub fn with_seed(dim: usize, seed: u64) -> Self {
        let rows = TABLE_SIZE + 4;
        let table = Rng::new(seed).gaussian_scaled(&[rows, dim], EMBED_STD).into_data();
        Vocab { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_id(&self, word: &str) -> u32 {
        (fnv1a(&word.to_lowercase()) % TABLE_SIZE as u64) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&self, slots: Vec<Slot>) -> TokenizedPrompt {
        let l = slots.len();
        let mut emb = vec![0.0; l * self.dim];
        for (p, s) in slots.iter().enumerate() {
            if let Slot::Token(id) = s {
                emb[p * self.dim..(p + 1) * self.dim].copy_from_slice(self.embedding(*id));
            }
        }
        TokenizedPrompt {
            slots,
            embeddings: Tensor::from_parts(vec![l, self.dim], emb),
        }
    }

    /// `[START][words][V x M][END]` with `M = L - words - 2 >= 1`.
    pub fn encode_category(&self, description: &str, len: usize) -> Result<TokenizedPrompt> {
        let words = self.tokenize(description);
        if words.len() + 3 > len {
            return Err(config_err!(
                "description `{description}` has {} tokens; L = {len} leaves no learnable slot",
                words.len()
            ));
        }
        let m = len - words.len() - 2;
        let mut slots = Vec::with_capacity(len);
        slots.push(Slot::Token(Special::Start.id()));
        slots.extend(words.into_iter().map(Slot::Token));
        slots.extend(std::iter::repeat_n(Slot::Learnable, m));
        slots.push(Slot::Token(Special::End.id()));
        Ok(self.build(slots))
    }

    /// `[START][PLACEHOLDER x n][V x (L - n - 2)][END]`, used for categories
    /// whose text prior is masked.
    pub fn placeholder_prompt(&self, len: usize, n_placeholders: usize) -> Result<TokenizedPrompt> {
        if n_placeholders + 2 > len {
            return Err(config_err!(
                "{n_placeholders} placeholders and two specials do not fit in L = {len}"
            ));
        }
        let mut slots = Vec::with_capacity(len);
        slots.push(Slot::Token(Special::Start.id()));
        slots.extend(std::iter::repeat_n(
            Slot::Token(Special::Placeholder.id()),
            n_placeholders,
        ));
        slots.extend(std::iter::repeat_n(Slot::Learnable, len - n_placeholders - 2));
        slots.push(Slot::Token(Special::End.id()));
        Ok(self.build(slots))
    }

    /// Every position learnable, no text content at all.
    pub fn anonymous_prompt(&self, len: usize) -> TokenizedPrompt {
        self.build(vec![Slot::Learnable; len])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub slots: Vec<Slot>,
    /// `L x e`; learnable rows are zero until initialized.
    pub embeddings: Tensor,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| matches!(s, Slot::Token(_))).collect()
    }

    pub fn learnable_count(&self) -> usize {
        self.slots.iter().filter(|s| **s == Slot::Learnable).count()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Token(id) => Some(*id),
                Slot::Learnable => None,
            })
            .collect()
    }

    pub fn count_token(&self, special: Special) -> usize {
        self.slots
            .iter()
            .filter(|s| **s == Slot::Token(special.id()))
            .count()
    }

    /// Copy with learnable rows drawn from `N(0, std^2)`.
    pub fn with_learnable_init(&self, rng: &mut Rng, std: f64) -> Tensor {
        let dim = self.embeddings.shape()[1];
        let mut out = self.embeddings.clone();
        for (p, s) in self.slots.iter().enumerate() {
            if *s == Slot::Learnable {
                for v in &mut out.data_mut()[p * dim..(p + 1) * dim] {
                    *v = std * rng.normal();
                }
            }
        }
        out
    }
}

/// Category names and valid (interaction, object) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub objects: Vec<String>,
    pub interactions: Vec<String>,
    /// `[interaction_idx, object_idx]`
    pub hoi_pairs: Vec<[usize; 2]>,
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

impl CategorySpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: CategorySpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CategorySpec::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, names) in [("object", &self.objects), ("interaction", &self.interactions)] {
            let mut seen = BTreeSet::new();
            for n in names.iter() {
                if !seen.insert(n.to_lowercase()) {
                    return Err(config_err!("duplicate {kind} category `{n}`"));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for &[i, o] in &self.hoi_pairs {
            if i >= self.interactions.len() || o >= self.objects.len() {
                return Err(config_err!("hoi pair [{i}, {o}] out of range"));
            }
            if !seen.insert((i, o)) {
                return Err(config_err!("duplicate hoi pair [{i}, {o}]"));
            }
        }
        if self.objects.is_empty() || self.hoi_pairs.is_empty() {
            return Err(config_err!("category spec needs objects and hoi pairs"));
        }
        Ok(())
    }

    pub fn n_obj(&self) -> usize {
        self.objects.len()
    }

    pub fn n_hoi(&self) -> usize {
        self.hoi_pairs.len()
    }

    pub fn pair_object(&self, pair: usize) -> usize {
        self.hoi_pairs[pair][1]
    }

    pub fn pair_interaction(&self, pair: usize) -> usize {
        self.hoi_pairs[pair][0]
    }

    /// `"<interaction> a/an <object>"`
    pub fn hoi_text(&self, pair: usize) -> String {
        let [i, o] = self.hoi_pairs[pair];
        let obj = &self.objects[o];
        format!("{} {} {}", self.interactions[i], article(obj), obj)
    }

    /// Four objects, six interactions, twelve valid pairs.
    pub fn toy() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        CategorySpec {
            objects: s(&["bicycle", "ball", "chair", "cup"]),
            interactions: s(&["ride", "carry", "hold", "kick", "sit on", "look at"]),
            hoi_pairs: vec![
                [0, 0],
                [1, 1],
                [2, 3],
                [3, 1],
                [4, 2],
                [5, 0],
                [2, 1],
                [1, 3],
                [5, 1],
                [1, 0],
                [1, 2],
                [5, 3],
            ],
        }
    }
}
