//! Exact-sequence lookup model: the memorizing contrast case.

use std::collections::BTreeMap;

use crate::corpus::{Corpus, Split, TokenId};
use crate::error::{Error, Result};
use crate::model::Predictor;

/// Maps whole prompts to targets. Unseen prompts abstain.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LookupModel {
    entries: BTreeMap<Vec<TokenId>, TokenId>,
}

impl LookupModel {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vec<TokenId>, TokenId)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ids, target) in pairs {
            match entries.insert(ids.clone(), target) {
                Some(prev) if prev != target => {
                    return Err(Error::Lookup(format!(
                        "prompt {ids:?} has conflicting targets {prev} and {target}"
                    )));
                }
                _ => {}
            }
        }
        if entries.is_empty() {
            return Err(Error::EmptyInput("lookup training set"));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn predict(&self, ids: &[TokenId]) -> Option<TokenId> {
        self.entries.get(ids).copied()
    }

    /// Returns a copy with one entry retargeted.
    pub fn edit(&self, ids: &[TokenId], new_target: TokenId) -> Result<Self> {
        let mut out = self.clone();
        match out.entries.get_mut(ids) {
            Some(t) => *t = new_target,
            None => {
                return Err(Error::Lookup(format!(
                    "prompt {ids:?} is not in the lookup table"
                )))
            }
        }
        Ok(out)
    }

    /// Prompts whose stored target differs between the two tables.
    pub fn differing_entries(&self, other: &LookupModel) -> usize {
        let mut keys: Vec<&Vec<TokenId>> =
            self.entries.keys().chain(other.entries.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| self.entries.get(*k) != other.entries.get(*k))
            .count()
    }
}

/// One entry per training prompt.
pub fn build_lookup(corpus: &Corpus) -> Result<LookupModel> {
    LookupModel::from_pairs(
        corpus
            .split_prompts(Split::Train)
            .map(|(class, p)| {
                corpus
                    .vocab
                    .id(&class.fact.object)
                    .map(|t| (p.ids.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

impl Predictor for LookupModel {
    fn predict_batch(&self, prompts: &[&[TokenId]]) -> Result<Vec<Option<TokenId>>> {
        Ok(prompts.iter().map(|p| self.predict(p)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::training::{eval_set, evaluate};
    use proptest::prelude::*;

    fn corpus() -> Corpus {
        Corpus::generate_split(&CorpusSpec::default(), 0).unwrap()
    }

    #[test]
    fn one_entry_per_training_prompt() {
        let c = corpus();
        let m = build_lookup(&c).unwrap();
        assert_eq!(m.len(), c.split_prompts(Split::Train).count());
        for (class, p) in c.split_prompts(Split::Train) {
            assert_eq!(
                m.predict(&p.ids),
                Some(c.vocab.id(&class.fact.object).unwrap())
            );
        }
    }

    #[test]
    fn unseen_prompts_abstain() {
        let c = corpus();
        let m = build_lookup(&c).unwrap();
        for (_, p) in c.split_prompts(Split::Heldout) {
            assert_eq!(m.predict(&p.ids), None);
        }
        let (_, p) = c.split_prompts(Split::Train).next().unwrap();
        let mut ids = p.ids.clone();
        ids[0] = (ids[0] + 1) % c.vocab.len();
        assert_eq!(m.predict(&ids), None);
        assert_eq!(
            evaluate(&m, &eval_set(&c, Split::Heldout).unwrap())
                .unwrap()
                .accuracy,
            0.0
        );
        assert_eq!(
            evaluate(&m, &eval_set(&c, Split::Train).unwrap())
                .unwrap()
                .accuracy,
            1.0
        );
    }

    #[test]
    fn conflicting_duplicates_are_rejected() {
        assert!(LookupModel::from_pairs([(vec![1, 2], 3), (vec![1, 2], 3)]).is_ok());
        assert!(matches!(
            LookupModel::from_pairs([(vec![1, 2], 3), (vec![1, 2], 4)]),
            Err(Error::Lookup(_))
        ));
        assert!(LookupModel::from_pairs(Vec::new()).is_err());
    }

    #[test]
    fn edit_changes_one_entry() {
        let c = corpus();
        let m = build_lookup(&c).unwrap();
        let p = &c
            .class_for_subject("eiffel tower")
            .unwrap()
            .split_prompts(Split::Train)
            .next()
            .unwrap()
            .ids;
        let rome = c.vocab.id("rome").unwrap();
        let e = m.edit(p, rome).unwrap();
        assert_eq!(e.predict(p), Some(rome));
        assert_eq!(m.differing_entries(&e), 1);
        assert!(m.edit(&[0, 0, 0], rome).is_err());
    }

    proptest! {
        #[test]
        fn any_edit_differs_on_exactly_one_sequence(idx in 0usize..192, target in 0usize..8) {
            let c = corpus();
            let m = build_lookup(&c).unwrap();
            let (_, p) = c.split_prompts(Split::Train).nth(idx % m.len()).unwrap();
            let objects = c.objects();
            let t = c.vocab.id(objects[target]).unwrap();
            let e = m.edit(&p.ids, t).unwrap();
            let expected = usize::from(m.predict(&p.ids) != Some(t));
            prop_assert_eq!(m.differing_entries(&e), expected);
            for (_, q) in c.prompts() {
                if q.ids != p.ids {
                    prop_assert_eq!(m.predict(&q.ids), e.predict(&q.ids));
                }
            }
        }
    }
}
