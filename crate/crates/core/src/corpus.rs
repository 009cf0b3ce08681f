//! Synthetic fact corpus: facts, paraphrase classes and a closed vocabulary.
//!
//! Every (subject, template) pair is rendered into a prompt that stops right
//! before the object, so the object token is the next-token target. Prompts
//! for one subject form a paraphrase class; classes partition the corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT_SLOT: &str = "{S}";
pub const DEFAULT_RELATION: &str = "located_in";

pub const BOS_TOKEN: &str = "<bos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub type TokenId = usize;

/// Lower-cases, splits punctuation off words and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.to_lowercase().chars() {
        if matches!(ch, ',' | '.' | '?' | '!' | ';' | ':') {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
    }
    spaced.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: usize,
    pub relation: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn render(&self, subject: &str) -> Result<Vec<String>> {
        if self.text.matches(SUBJECT_SLOT).count() != 1 {
            return Err(Error::Corpus(format!(
                "template {} must contain exactly one {SUBJECT_SLOT} slot: {:?}",
                self.id, self.text
            )));
        }
        Ok(tokenize(&self.text.replace(SUBJECT_SLOT, subject)))
    }
}

/// One object entity together with the subjects that map to it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGroup {
    pub object: String,
    pub subjects: Vec<String>,
}

/// Inventories and templates from which a corpus is rendered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub relation: String,
    pub groups: Vec<EntityGroup>,
    pub templates: Vec<String>,
    pub heldout_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let groups = [
            ("paris", ["eiffel tower", "sacre coeur", "louvre museum"]),
            (
                "berlin",
                [
                    "brandenburg gate",
                    "reichstag building",
                    "checkpoint charlie",
                ],
            ),
            ("rome", ["colosseum", "trevi fountain", "pantheon"]),
            ("london", ["big ben", "tower bridge", "buckingham palace"]),
            ("madrid", ["royal palace", "prado museum", "retiro park"]),
            (
                "amsterdam",
                ["anne frank house", "rijks museum", "dam square"],
            ),
            (
                "vienna",
                [
                    "schonbrunn palace",
                    "hofburg palace",
                    "st stephens cathedral",
                ],
            ),
            (
                "prague",
                ["charles bridge", "old town square", "st vitus cathedral"],
            ),
        ]
        .into_iter()
        .map(|(object, subjects)| EntityGroup {
            object: object.to_owned(),
            subjects: subjects.iter().map(|s| (*s).to_owned()).collect(),
        })
        .collect();
        let templates = [
            "the {S} is located in",
            "the {S} is located in the city of",
            "the {S} is in",
            "to see the {S}, you have to travel to the city of",
            "the {S} is the main tourist attraction in",
            "the {S} can be found in",
            "you can visit the {S} in",
            "the {S} stands in the city of",
            "tourists admire the {S} when they visit",
            "the {S} is a famous landmark of",
        ]
        .iter()
        .map(|s| (*s).to_owned())
        .collect();
        Self {
            relation: DEFAULT_RELATION.to_owned(),
            groups,
            templates,
            heldout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub template_id: usize,
    pub tokens: Vec<String>,
    pub ids: Vec<TokenId>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParaphraseClass {
    pub id: usize,
    pub fact: FactTriple,
    pub prompts: Vec<Prompt>,
}

impl ParaphraseClass {
    pub fn split_prompts(&self, split: Split) -> impl Iterator<Item = &Prompt> {
        self.prompts.iter().filter(move |p| p.split == split)
    }
}

/// Bijection between token strings and dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocabulary {
    /// Special tokens first, then `tokens` in sorted order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let specials = [BOS_TOKEN, PAD_TOKEN, UNK_TOKEN];
        let rest: BTreeSet<&str> = tokens
            .into_iter()
            .filter(|t| !specials.contains(t))
            .collect();
        let tokens: Vec<String> = specials
            .iter()
            .copied()
            .chain(rest)
            .map(str::to_owned)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn from_map(map: BTreeMap<String, TokenId>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (tok, &id) in &map {
            if id >= tokens.len() || !tokens[id].is_empty() {
                return Err(Error::Corpus(format!(
                    "vocabulary ids are not dense at {tok:?} -> {id}"
                )));
            }
            tokens[id] = tok.clone();
        }
        Ok(Self { tokens, index: map })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_owned()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn as_map(&self) -> &BTreeMap<String, TokenId> {
        &self.index
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Contiguous token range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub len: usize,
}

impl TokenSpan {
    /// Index of the last token; the key-extraction position for editing.
    pub fn last(&self) -> usize {
        self.start + self.len - 1
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.start + self.len
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Locates the first contiguous occurrence of the subject's tokens.
pub fn subject_token_span<S: AsRef<str>>(prompt: &[S], subject: &str) -> Result<TokenSpan> {
    let needle = tokenize(subject);
    let not_found = || Error::SubjectNotFound {
        subject: subject.to_owned(),
        prompt: prompt
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" "),
    };
    if needle.is_empty() || needle.len() > prompt.len() {
        return Err(not_found());
    }
    (0..=prompt.len() - needle.len())
        .find(|&s| {
            needle
                .iter()
                .zip(&prompt[s..])
                .all(|(a, b)| a == b.as_ref())
        })
        .map(|start| TokenSpan {
            start,
            len: needle.len(),
        })
        .ok_or_else(not_found)
}

/// JSON Lines record, one per prompt. Fields are declared in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub class_id: usize,
    pub object: String,
    pub prompt_tokens: Vec<String>,
    pub relation: String,
    pub split: Split,
    pub subject: String,
    pub target_token: String,
    pub template_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub classes: Vec<ParaphraseClass>,
    /// Seed of the most recent split; `None` for corpora loaded from disk.
    pub seed: Option<u64>,
}

impl Corpus {
    /// Renders every (subject, template) pair. All prompts start in the train split.
    pub fn generate(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        if spec.groups.len() < 2 {
            return Err(Error::Corpus("need at least 2 objects".into()));
        }
        if spec.templates.len() < 4 {
            return Err(Error::Corpus(
                "need at least 4 templates per relation".into(),
            ));
        }
        let mut seen = BTreeMap::new();
        for g in &spec.groups {
            if g.subjects.len() < 2 {
                return Err(Error::Corpus(format!(
                    "object {:?} needs at least 2 subjects",
                    g.object
                )));
            }
            for s in &g.subjects {
                if let Some(prev) = seen.insert(s.to_lowercase(), g.object.clone()) {
                    return Err(Error::Corpus(format!(
                        "duplicate subject {s:?} (objects {prev:?} and {:?})",
                        g.object
                    )));
                }
            }
        }
        let templates: Vec<PromptTemplate> = spec
            .templates
            .iter()
            .enumerate()
            .map(|(id, text)| PromptTemplate {
                id,
                relation: spec.relation.clone(),
                text: text.clone(),
            })
            .collect();

        let mut rendered = Vec::new();
        for g in &spec.groups {
            let object = tokenize(&g.object);
            if object.len() != 1 {
                return Err(Error::Corpus(format!(
                    "object {:?} must be a single token",
                    g.object
                )));
            }
            for s in &g.subjects {
                let subject = tokenize(s).join(" ");
                let mut prompts = Vec::with_capacity(templates.len());
                for t in &templates {
                    let tokens = t.render(&subject)?;
                    subject_token_span(&tokens, &subject)?;
                    prompts.push((t.id, tokens));
                }
                let fact = FactTriple {
                    subject,
                    relation: spec.relation.clone(),
                    object: object[0].clone(),
                };
                rendered.push((fact, prompts));
            }
        }

        let vocab = Vocabulary::build(rendered.iter().flat_map(|(fact, prompts)| {
            std::iter::once(fact.object.as_str()).chain(
                prompts
                    .iter()
                    .flat_map(|(_, t)| t.iter().map(String::as_str)),
            )
        }));
        let mut classes = Vec::with_capacity(rendered.len());
        for (id, (fact, prompts)) in rendered.into_iter().enumerate() {
            let prompts = prompts
                .into_iter()
                .map(|(template_id, tokens)| {
                    Ok(Prompt {
                        template_id,
                        ids: vocab.encode(&tokens)?,
                        tokens,
                        split: Split::Train,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            classes.push(ParaphraseClass { id, fact, prompts });
        }
        Ok(Self {
            vocab,
            classes,
            seed: Some(seed),
        })
    }

    /// Generates and applies the spec's held-out split in one call.
    pub fn generate_split(spec: &CorpusSpec, seed: u64) -> Result<Self> {
        Self::generate(spec, seed)?.split(spec.heldout_fraction, seed)
    }

    /// Per-class stratified split; `round(fraction · n)` prompts go held out,
    /// clamped so both sides keep at least one prompt.
    pub fn split(mut self, heldout_fraction: f64, seed: u64) -> Result<Self> {
        if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
            return Err(Error::Corpus(format!(
                "held-out fraction {heldout_fraction} not in (0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in &mut self.classes {
            let n = class.prompts.len();
            if n < 2 {
                return Err(Error::Corpus(format!(
                    "class {} ({:?}) has {n} prompt(s); cannot stratify",
                    class.id, class.fact.subject
                )));
            }
            let heldout = ((heldout_fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for p in &mut class.prompts {
                p.split = Split::Train;
            }
            for &i in &order[..heldout] {
                class.prompts[i].split = Split::Heldout;
            }
        }
        self.seed = Some(seed);
        Ok(self)
    }

    pub fn prompt_count(&self) -> usize {
        self.classes.iter().map(|c| c.prompts.len()).sum()
    }

    pub fn class_for_subject(&self, subject: &str) -> Option<&ParaphraseClass> {
        let subject = tokenize(subject).join(" ");
        self.classes.iter().find(|c| c.fact.subject == subject)
    }

    /// Every `(class, prompt)` pair in corpus order.
    pub fn prompts(&self) -> impl Iterator<Item = (&ParaphraseClass, &Prompt)> {
        self.classes
            .iter()
            .flat_map(|c| c.prompts.iter().map(move |p| (c, p)))
    }

    pub fn split_prompts(&self, split: Split) -> impl Iterator<Item = (&ParaphraseClass, &Prompt)> {
        self.prompts().filter(move |(_, p)| p.split == split)
    }

    /// Prompts of the same relation whose subject differs from `fact.subject`.
    pub fn unrelated_prompts(&self, fact: &FactTriple) -> Vec<&Prompt> {
        self.prompts()
            .filter(|(c, _)| c.fact.relation == fact.relation && c.fact.subject != fact.subject)
            .map(|(_, p)| p)
            .collect()
    }

    pub fn longest_prompt(&self) -> usize {
        self.prompts().map(|(_, p)| p.ids.len()).max().unwrap_or(0)
    }

    /// Distinct object tokens in class order.
    pub fn objects(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.classes {
            if !out.contains(&c.fact.object.as_str()) {
                out.push(&c.fact.object);
            }
        }
        out
    }

    pub fn records(&self) -> Vec<PromptRecord> {
        self.prompts()
            .map(|(c, p)| PromptRecord {
                class_id: c.id,
                object: c.fact.object.clone(),
                prompt_tokens: p.tokens.clone(),
                relation: c.fact.relation.clone(),
                split: p.split,
                subject: c.fact.subject.clone(),
                target_token: c.fact.object.clone(),
                template_id: p.template_id,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn vocab_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self.vocab.as_map())?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_files(&self, corpus_path: &Path, vocab_path: &Path) -> Result<()> {
        write_file(corpus_path, self.to_jsonl()?.as_bytes())?;
        write_file(vocab_path, self.vocab_json()?.as_bytes())
    }

    pub fn read_files(corpus_path: &Path, vocab_path: &Path) -> Result<Self> {
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab = Vocabulary::from_map(serde_json::from_str(&vocab_text)?)?;
        let file = std::fs::File::open(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        let mut classes: Vec<ParaphraseClass> = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(corpus_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PromptRecord = serde_json::from_str(&line)?;
            if r.class_id != classes.len() && r.class_id + 1 != classes.len() {
                return Err(Error::Corpus(format!(
                    "class ids out of order at class {}",
                    r.class_id
                )));
            }
            if r.class_id == classes.len() {
                classes.push(ParaphraseClass {
                    id: r.class_id,
                    fact: FactTriple {
                        subject: r.subject.clone(),
                        relation: r.relation.clone(),
                        object: r.object.clone(),
                    },
                    prompts: Vec::new(),
                });
            }
            let class = classes.last_mut().expect("class pushed above");
            if class.fact.subject != r.subject || class.fact.object != r.target_token {
                return Err(Error::Corpus(format!(
                    "inconsistent record in class {}",
                    r.class_id
                )));
            }
            class.prompts.push(Prompt {
                template_id: r.template_id,
                ids: vocab.encode(&r.prompt_tokens)?,
                tokens: r.prompt_tokens,
                split: r.split,
            });
        }
        Ok(Self {
            vocab,
            classes,
            seed: None,
        })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            relation: DEFAULT_RELATION.into(),
            groups: vec![
                EntityGroup {
                    object: "paris".into(),
                    subjects: vec!["eiffel tower".into(), "louvre".into()],
                },
                EntityGroup {
                    object: "berlin".into(),
                    subjects: vec!["brandenburg gate".into(), "reichstag".into()],
                },
            ],
            templates: vec![
                "the {S} is located in".into(),
                "the {S} is located in the city of".into(),
                "the {S} is in".into(),
                "to see the {S}, you have to travel to the city of".into(),
            ],
            heldout_fraction: 0.5,
        }
    }

    #[test]
    fn renders_eiffel_prompt() {
        let c = Corpus::generate(&small_spec(), 1).unwrap();
        let eiffel = c.class_for_subject("Eiffel Tower").unwrap();
        assert_eq!(
            eiffel.prompts[0].tokens,
            ["the", "eiffel", "tower", "is", "located", "in"]
        );
        assert_eq!(eiffel.fact.object, "paris");
        let gate = c.class_for_subject("brandenburg gate").unwrap();
        assert_eq!(
            gate.prompts[1].tokens.join(" "),
            "the brandenburg gate is located in the city of"
        );
        assert_eq!(gate.fact.object, "berlin");
    }

    #[test]
    fn punctuation_is_its_own_token() {
        assert_eq!(tokenize("the Tower, you"), ["the", "tower", ",", "you"]);
    }

    #[test]
    fn default_spec_counts() {
        let c = Corpus::generate(&CorpusSpec::default(), 0).unwrap();
        assert_eq!(c.classes.len(), 24);
        assert_eq!(c.prompt_count(), 24 * 10);
        assert_eq!(c.objects().len(), 8);
        let eiffel = c.class_for_subject("eiffel tower").unwrap();
        assert_eq!(c.unrelated_prompts(&eiffel.fact).len(), 230);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small_spec();
        s.templates[2] = "no slot here".into();
        assert!(Corpus::generate(&s, 0).is_err());

        let mut s = small_spec();
        s.groups[1].subjects[0] = "eiffel tower".into();
        let err = Corpus::generate(&s, 0).unwrap_err().to_string();
        assert!(err.contains("duplicate subject"), "{err}");

        let mut s = small_spec();
        s.templates.truncate(3);
        assert!(Corpus::generate(&s, 0).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let spec = CorpusSpec {
            heldout_fraction: 0.2,
            ..CorpusSpec::default()
        };
        let a = Corpus::generate_split(&spec, 42).unwrap();
        let b = Corpus::generate_split(&spec, 42).unwrap();
        assert_eq!(a, b);
        for class in &a.classes {
            assert_eq!(class.split_prompts(Split::Train).count(), 8);
            assert_eq!(class.split_prompts(Split::Heldout).count(), 2);
        }
        let c = Corpus::generate_split(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_two_prompt_class_is_one_and_one() {
        let mut spec = small_spec();
        spec.templates.truncate(4);
        let mut c = Corpus::generate(&spec, 0).unwrap();
        for class in &mut c.classes {
            class.prompts.truncate(2);
        }
        let c = c.split(0.5, 9).unwrap();
        for class in &c.classes {
            assert_eq!(class.split_prompts(Split::Train).count(), 1);
            assert_eq!(class.split_prompts(Split::Heldout).count(), 1);
        }
    }

    #[test]
    fn split_rejects_single_prompt_class_and_bad_fraction() {
        let mut c = Corpus::generate(&small_spec(), 0).unwrap();
        assert!(c.clone().split(1.0, 0).is_err());
        c.classes[0].prompts.truncate(1);
        assert!(c.split(0.5, 0).is_err());
    }

    #[test]
    fn unrelated_prompts_complement() {
        let c = Corpus::generate(&small_spec(), 0).unwrap();
        let eiffel = &c.class_for_subject("eiffel tower").unwrap().fact;
        let unrelated = c.unrelated_prompts(eiffel);
        assert!(unrelated
            .iter()
            .all(|p| !p.tokens.contains(&"eiffel".to_string())));
        let gate = c.class_for_subject("brandenburg gate").unwrap();
        for p in &gate.prompts {
            assert!(unrelated.contains(&p));
        }
        assert_eq!(unrelated.len() + 4, c.prompt_count());
    }

    #[test]
    fn unrelated_prompts_single_subject_is_empty() {
        let mut c = Corpus::generate(&small_spec(), 0).unwrap();
        c.classes.truncate(1);
        let fact = c.classes[0].fact.clone();
        assert!(c.unrelated_prompts(&fact).is_empty());
    }

    #[test]
    fn subject_spans() {
        let p = ["the", "eiffel", "tower", "is", "located", "in"];
        let span = subject_token_span(&p, "eiffel tower").unwrap();
        assert_eq!((span.start, span.len, span.last()), (1, 2, 2));
        let span = subject_token_span(&["visit", "the", "colosseum"], "colosseum").unwrap();
        assert_eq!(span.len, 1);
        assert!(matches!(
            subject_token_span(&p, "big ben"),
            Err(Error::SubjectNotFound { .. })
        ));
    }

    #[test]
    fn files_round_trip_byte_stably() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate_split(&CorpusSpec::default(), 5).unwrap();
        let (cp, vp) = (
            dir.path().join("corpus.jsonl"),
            dir.path().join("vocab.json"),
        );
        c.write_files(&cp, &vp).unwrap();
        let first = std::fs::read(&cp).unwrap();
        let back = Corpus::read_files(&cp, &vp).unwrap();
        assert_eq!(back.classes, c.classes);
        assert_eq!(back.vocab, c.vocab);
        back.write_files(&cp, &vp).unwrap();
        assert_eq!(std::fs::read(&cp).unwrap(), first);
        let line = first.split(|b| *b == b'\n').next().unwrap();
        let line = std::str::from_utf8(line).unwrap();
        assert!(
            line.starts_with("{\"class_id\":0,\"object\":\"paris\",\"prompt_tokens\""),
            "{line}"
        );
    }

    #[test]
    fn vocabulary_is_dense_bijection() {
        let c = Corpus::generate(&CorpusSpec::default(), 0).unwrap();
        for (i, t) in c.vocab.tokens().iter().enumerate() {
            assert_eq!(c.vocab.id(t).unwrap(), i);
        }
        assert_eq!(c.vocab.token(0), Some(BOS_TOKEN));
    }

    proptest::proptest! {
        #[test]
        fn classes_partition_prompts(seed in 0u64..200) {
            let c = Corpus::generate_split(&CorpusSpec::default(), seed).unwrap();
            let mut seen = BTreeSet::new();
            for (_, p) in c.prompts() {
                proptest::prop_assert!(seen.insert(p.tokens.clone()));
            }
            for class in &c.classes {
                let unrelated = c.unrelated_prompts(&class.fact).len();
                proptest::prop_assert_eq!(unrelated + class.prompts.len(), c.prompt_count());
                proptest::prop_assert!(class.split_prompts(Split::Heldout).count() >= 1);
                proptest::prop_assert!(class.split_prompts(Split::Train).count() >= 1);
            }
        }
    }
}
