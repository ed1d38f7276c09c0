//! Subject, object and interaction prompt collections.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::numcore::{ParamStore, Rng, Tape, Tensor, Var};
use crate::textenc::{CategorySpec, TokenizedPrompt, Vocab, LEARNABLE_STD};

/// Placeholder tokens used in place of a masked category prior.
pub const PLACEHOLDER_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    Subject,
    Object,
    Interaction,
}

impl GroupKind {
    pub const ALL: [GroupKind; 3] = [GroupKind::Subject, GroupKind::Object, GroupKind::Interaction];

    pub fn short(self) -> &'static str {
        match self {
            GroupKind::Subject => "sub",
            GroupKind::Object => "obj",
            GroupKind::Interaction => "int",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Subject => "subject",
            GroupKind::Object => "object",
            GroupKind::Interaction => "interaction",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptCollection {
    pub category_id: usize,
    pub name: String,
    pub group: GroupKind,
    /// `K x L x e`
    pub block: Tensor,
    /// `K x L`, broadcast over the embedding axis.
    pub frozen_mask: Vec<bool>,
}

impl PromptCollection {
    fn from_prompt(
        category_id: usize,
        name: String,
        group: GroupKind,
        prompt: &TokenizedPrompt,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        // K = 1 is only meaningful with distribution estimation disabled;
        // `distengine::estimate` rejects it.
        if k == 0 {
            return Err(config_err!("a prompt collection needs K >= 1"));
        }
        let (l, e) = (prompt.embeddings.shape()[0], prompt.embeddings.shape()[1]);
        let mut data = Vec::with_capacity(k * l * e);
        for _ in 0..k {
            data.extend_from_slice(prompt.with_learnable_init(rng, LEARNABLE_STD).data());
        }
        let mask = prompt.frozen_mask();
        Ok(PromptCollection {
            category_id,
            name,
            group,
            block: Tensor::from_parts(vec![k, l, e], data),
            frozen_mask: mask.repeat(k),
        })
    }

    pub fn k(&self) -> usize {
        self.block.shape()[0]
    }

    pub fn token_len(&self) -> usize {
        self.block.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.block.shape()[2]
    }

    /// Frozen flags per element of `block`.
    pub fn element_mask(&self) -> Vec<bool> {
        let e = self.dim();
        self.frozen_mask
            .iter()
            .flat_map(|f| std::iter::repeat_n(*f, e))
            .collect()
    }

    pub fn learnable_positions(&self) -> usize {
        self.frozen_mask[..self.token_len()].iter().filter(|f| !**f).count()
    }

    pub fn param_count(&self) -> usize {
        self.k() * self.learnable_positions() * self.dim()
    }

    pub fn param_name(&self) -> String {
        param_name(self.group, self.category_id)
    }
}

pub fn param_name(group: GroupKind, category: usize) -> String {
    format!("prompt.{}.{:03}", group.short(), category)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub kind: GroupKind,
    pub collections: Vec<PromptCollection>,
}

impl PromptGroup {
    pub fn n(&self) -> usize {
        self.collections.len()
    }

    pub fn param_count(&self) -> usize {
        self.collections.iter().map(|c| c.param_count()).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.collections.iter().map(|c| c.param_name()).collect()
    }
}

/// How prompts are initialized; the switches back the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Seed object/interaction prompts with text-encoder embeddings of their
    /// category names; otherwise every slot is learnable.
    pub encoder_priors: bool,
    /// Group-specific structures: anonymous subjects and
    /// `"<interaction> a/an <object>"` interaction prompts. When off, subject
    /// prompts use the word "person" and interaction prompts only the verb.
    pub prompt_design: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            encoder_priors: true,
            prompt_design: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroups {
    pub subject: PromptGroup,
    pub object: PromptGroup,
    pub interaction: PromptGroup,
}

impl PromptGroups {
    pub fn get(&self, kind: GroupKind) -> &PromptGroup {
        match kind {
            GroupKind::Subject => &self.subject,
            GroupKind::Object => &self.object,
            GroupKind::Interaction => &self.interaction,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptGroup> {
        [&self.subject, &self.object, &self.interaction].into_iter()
    }

    /// Register every collection as a masked parameter.
    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        for g in self.iter() {
            for c in &g.collections {
                store.insert_masked(&c.param_name(), c.block.clone(), Some(c.element_mask()))?;
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_groups(
    spec: &CategorySpec,
    vocab: &Vocab,
    k: usize,
    len: usize,
    unseen: &BTreeSet<usize>,
    options: PromptOptions,
    rng: &mut Rng,
) -> Result<PromptGroups> {
    spec.validate()?;
    if let Some(bad) = unseen.iter().find(|p| **p >= spec.n_hoi()) {
        return Err(config_err!("unseen pair {bad} is not a valid hoi pair"));
    }
    let prior = |text: &str| -> Result<TokenizedPrompt> {
        if options.encoder_priors {
            vocab.encode_category(text, len)
        } else {
            Ok(vocab.anonymous_prompt(len))
        }
    };

    let mut subject = Vec::with_capacity(spec.n_obj());
    for c in 0..spec.n_obj() {
        let prompt = if options.prompt_design || !options.encoder_priors {
            vocab.anonymous_prompt(len)
        } else {
            prior("person")?
        };
        subject.push(PromptCollection::from_prompt(
            c,
            format!("subject {c}"),
            GroupKind::Subject,
            &prompt,
            k,
            rng,
        )?);
    }

    let mut object = Vec::with_capacity(spec.n_obj());
    for (c, name) in spec.objects.iter().enumerate() {
        let prompt = prior(name)?;
        object.push(PromptCollection::from_prompt(c, name.clone(), GroupKind::Object, &prompt, k, rng)?);
    }

    let mut interaction = Vec::with_capacity(spec.n_hoi());
    for p in 0..spec.n_hoi() {
        let text = spec.hoi_text(p);
        let prompt = if unseen.contains(&p) {
            vocab.placeholder_prompt(len, PLACEHOLDER_TOKENS)?
        } else if options.prompt_design {
            prior(&text)?
        } else {
            prior(&spec.interactions[spec.pair_interaction(p)])?
        };
        interaction.push(PromptCollection::from_prompt(
            p,
            text,
            GroupKind::Interaction,
            &prompt,
            k,
            rng,
        )?);
    }

    Ok(PromptGroups {
        subject: PromptGroup {
            kind: GroupKind::Subject,
            collections: subject,
        },
        object: PromptGroup {
            kind: GroupKind::Object,
            collections: object,
        },
        interaction: PromptGroup {
            kind: GroupKind::Interaction,
            collections: interaction,
        },
    })
}

/// Elementwise mean over the K axis: `K x L x e -> L x e`.
pub fn pooled_mean(block: &Tensor) -> Result<Tensor> {
    let s = block.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(contract_err!("expected a non-empty K x L x e block, got {:?}", s));
    }
    let (k, inner) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; inner];
    for kk in 0..k {
        for (o, v) in out.iter_mut().zip(&block.data()[kk * inner..(kk + 1) * inner]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= k as f64);
    Tensor::new(&[s[1], s[2]], out)
}

/// Differentiable pooled means of several `K x L x e` blocks, flattened to
/// `N x (L*e)`.
pub fn pooled_means(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(blocks.len());
    for &b in blocks {
        let s = tape.shape(b).to_vec();
        if s.len() != 3 {
            return Err(contract_err!("expected K x L x e block, got {:?}", s));
        }
        let m = tape.mean_axis(b, 0)?;
        rows.push(tape.reshape(m, &[1, s[1] * s[2]])?);
    }
    tape.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(unseen: &[usize]) -> PromptGroups {
        build_groups(
            &CategorySpec::toy(),
            &Vocab::new(8),
            8,
            16,
            &unseen.iter().copied().collect(),
            PromptOptions::default(),
            &mut Rng::new(42),
        )
        .unwrap()
    }

    #[test]
    fn toy_group_shapes() {
        let g = groups(&[]);
        assert_eq!((g.subject.n(), g.object.n(), g.interaction.n()), (4, 4, 12));
        for grp in g.iter() {
            for c in &grp.collections {
                assert_eq!(c.block.shape(), &[8, 16, 8]);
            }
        }
    }

    #[test]
    fn no_unseen_means_no_placeholders() {
        let g = groups(&[]);
        let v = Vocab::new(8);
        let ph = crate::textenc::Special::Placeholder.id();
        let ph_emb = v.embedding(ph);
        for c in &g.interaction.collections {
            let row1 = &c.block.data()[8..16];
            assert_ne!(row1, ph_emb);
        }
    }

    #[test]
    fn all_unseen_means_all_placeholders() {
        let g = groups(&(0..12).collect::<Vec<_>>());
        for c in &g.interaction.collections {
            let frozen = c.frozen_mask[..16].iter().filter(|f| **f).count();
            assert_eq!(frozen, PLACEHOLDER_TOKENS + 2);
        }
    }

    #[test]
    fn subjects_are_fully_learnable() {
        let g = groups(&[]);
        for c in &g.subject.collections {
            assert!(c.frozen_mask.iter().all(|f| !f));
        }
    }

    #[test]
    fn k_prompts_share_frozen_content() {
        let g = groups(&[]);
        let c = &g.object.collections[0];
        let (l, e) = (16, 8);
        for k in 1..8 {
            for p in 0..l {
                if c.frozen_mask[p] {
                    assert_eq!(
                        &c.block.data()[p * e..(p + 1) * e],
                        &c.block.data()[(k * l + p) * e..(k * l + p + 1) * e]
                    );
                }
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let g = groups(&[3]);
        for grp in g.iter() {
            let expected: usize = grp
                .collections
                .iter()
                .map(|c| 8 * c.learnable_positions() * 8)
                .sum();
            assert_eq!(grp.param_count(), expected);
        }
        // "ride a bicycle": 11 learnable positions.
        assert_eq!(g.interaction.collections[0].param_count(), 8 * 11 * 8);
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(groups(&[1, 2]), groups(&[1, 2]));
    }

    #[test]
    fn empty_collection_is_rejected() {
        let r = build_groups(
            &CategorySpec::toy(),
            &Vocab::new(8),
            0,
            16,
            &BTreeSet::new(),
            PromptOptions::default(),
            &mut Rng::new(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut spec = CategorySpec::toy();
        spec.objects[1] = "bicycle".into();
        let r = build_groups(&spec, &Vocab::new(8), 2, 16, &BTreeSet::new(), PromptOptions::default(), &mut Rng::new(0));
        assert!(r.is_err());
    }

    #[test]
    fn pooled_mean_cases() {
        let c = Tensor::full(&[4, 3, 2], 3.0);
        assert!(pooled_mean(&c).unwrap().data().iter().all(|v| *v == 3.0));
        let mut d = vec![0.0; 6];
        d.extend(vec![2.0; 6]);
        let two = Tensor::new(&[2, 3, 2], d).unwrap();
        assert!(pooled_mean(&two).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn pooled_mean_matches_brute_force() {
        let b = Rng::new(5).gaussian(&[8, 4, 3]);
        let m = pooled_mean(&b).unwrap();
        for l in 0..4 {
            for e in 0..3 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += b.at(&[k, l, e]);
                }
                assert!((m.at(&[l, e]) - s / 8.0).abs() < 1e-12);
            }
        }
    }
}
