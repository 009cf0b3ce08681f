//! Scores the three conditions for attributing tacit knowledge and turns
//! them into a verdict.
//!
//! Reports are emitted as canonical JSON: sorted keys and every real with six
//! decimals, so two identical runs give identical bytes and the verdict can be
//! recomputed from the file.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::{build_lookup, LookupModel};
use crate::corpus::{subject_token_span, Corpus, FactTriple, TokenId};
use crate::editing::{apply_edit_with, key_covariance, EditRequest, KeyCovariance, ValueConfig};
use crate::error::{Error, Result};
use crate::model::{forward, Predictor, TransformerParams};
use crate::numerics::cosine;

/// Where in the residual stream prompts are represented for clustering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Depth {
    /// Token plus position embedding.
    Embedding,
    /// Hidden state after the given block.
    Block(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCluster {
    pub subject: String,
    pub intra: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub depth: Depth,
    pub intra: f64,
    pub inter: f64,
    pub margin: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    pub per_class: Vec<ClassCluster>,
}

impl ClusterScore {
    /// Scores pre-computed vectors grouped by class label.
    pub fn from_vectors(depth: Depth, classes: &[(String, Vec<Vec<f64>>)]) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Audit(
                "cluster score needs at least two classes".into(),
            ));
        }
        if let Some((s, _)) = classes.iter().find(|(_, v)| v.len() < 2) {
            return Err(Error::Audit(format!(
                "class {s:?} has fewer than two prompts"
            )));
        }
        let mut per_class = Vec::with_capacity(classes.len());
        let (mut intra_sum, mut intra_pairs) = (0.0, 0usize);
        for (subject, vs) in classes {
            let (mut sum, mut n) = (0.0, 0usize);
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    sum += cosine(&vs[i], &vs[j]);
                    n += 1;
                }
            }
            intra_sum += sum;
            intra_pairs += n;
            per_class.push(ClassCluster {
                subject: subject.clone(),
                intra: sum / n as f64,
            });
        }
        let (mut inter_sum, mut inter_pairs) = (0.0, 0usize);
        for a in 0..classes.len() {
            for b in a + 1..classes.len() {
                for x in &classes[a].1 {
                    for y in &classes[b].1 {
                        inter_sum += cosine(x, y);
                        inter_pairs += 1;
                    }
                }
            }
        }
        let intra = intra_sum / intra_pairs as f64;
        let inter = inter_sum / inter_pairs as f64;
        Ok(Self {
            depth,
            intra,
            inter,
            margin: intra - inter,
            intra_pairs,
            inter_pairs,
            per_class,
        })
    }
}

fn representation(
    params: &TransformerParams,
    ids: &[TokenId],
    pos: usize,
    depth: Depth,
) -> Result<Vec<f64>> {
    let (_, tape) = forward(params, ids)?;
    match depth {
        Depth::Embedding => Ok(tape.embeddings.row(pos).to_vec()),
        Depth::Block(l) => tape
            .layers
            .get(l)
            .map(|a| a.hidden.row(pos).to_vec())
            .ok_or(Error::OutOfRange {
                what: "cluster depth",
                index: l,
                limit: params.config.n_layers,
            }),
    }
}

/// Residual state at the last subject token, compared within and across
/// paraphrase classes.
pub fn cluster_score(
    params: &TransformerParams,
    corpus: &Corpus,
    depth: Depth,
) -> Result<ClusterScore> {
    let classes = corpus
        .classes
        .iter()
        .map(|c| {
            let vs = c
                .prompts
                .iter()
                .map(|p| {
                    let span = subject_token_span(&p.tokens, &c.fact.subject)?;
                    representation(params, &p.ids, span.last(), depth)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((c.fact.subject.clone(), vs))
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterScore::from_vectors(depth, &classes)
}

/// The lookup table keys whole sequences, so each prompt is its own one-hot
/// direction and every pair of distinct prompts has cosine 0.
pub fn lookup_cluster_score(lookup: &LookupModel, corpus: &Corpus) -> Result<ClusterScore> {
    let n = corpus.prompt_count();
    if lookup.is_empty() {
        return Err(Error::EmptyInput("lookup table"));
    }
    let mut next = 0;
    let classes = corpus
        .classes
        .iter()
        .map(|c| {
            let vs = c
                .prompts
                .iter()
                .map(|_| {
                    let mut v = vec![0.0; n];
                    v[next] = 1.0;
                    next += 1;
                    v
                })
                .collect();
            (c.fact.subject.clone(), vs)
        })
        .collect::<Vec<_>>();
    ClusterScore::from_vectors(Depth::Embedding, &classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionShift {
    pub token: String,
    pub occurrences: usize,
    pub prompts: usize,
    /// Mean pairwise cosine distance after the first block.
    pub dispersion: f64,
}

/// How much one token's contextual representation moves between prompts.
pub fn dimension_shift(
    params: &TransformerParams,
    corpus: &Corpus,
    token: &str,
) -> Result<DimensionShift> {
    let mut reps = Vec::new();
    let mut prompts = 0;
    for (_, p) in corpus.prompts() {
        let positions: Vec<usize> = (0..p.tokens.len())
            .filter(|&i| p.tokens[i] == token)
            .collect();
        if positions.is_empty() {
            continue;
        }
        prompts += 1;
        let (_, tape) = forward(params, &p.ids)?;
        let first = tape
            .layers
            .first()
            .ok_or(Error::EmptyInput("model layers"))?;
        reps.extend(positions.into_iter().map(|i| first.hidden.row(i).to_vec()));
    }
    if prompts < 2 {
        return Err(Error::Audit(format!(
            "token {token:?} occurs in fewer than two prompts"
        )));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..reps.len() {
        for j in i + 1..reps.len() {
            sum += 1.0 - cosine(&reps[i], &reps[j]);
            n += 1;
        }
    }
    Ok(DimensionShift {
        token: token.to_owned(),
        occurrences: reps.len(),
        prompts,
        dispersion: sum / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    pub generalization: f64,
    pub specificity: f64,
    pub paraphrases_changed: usize,
    pub paraphrases: usize,
    pub unrelated_unchanged: usize,
    pub unrelated: usize,
}

/// Generalization over the fact's paraphrases minus the edit prompt and
/// specificity over prompts about other subjects, both from argmax outputs.
pub fn edit_scores<A, B>(
    pre: &A,
    post: &B,
    corpus: &Corpus,
    fact: &FactTriple,
    new_object: &str,
    edit_prompt: &[TokenId],
) -> Result<EditScores>
where
    A: Predictor + ?Sized,
    B: Predictor + ?Sized,
{
    let class = corpus
        .class_for_subject(&fact.subject)
        .ok_or_else(|| Error::Audit(format!("subject {:?} is not in the corpus", fact.subject)))?;
    let target = corpus.vocab.id(new_object)?;
    let paraphrases: Vec<&[TokenId]> = class
        .prompts
        .iter()
        .map(|p| p.ids.as_slice())
        .filter(|ids| *ids != edit_prompt)
        .collect();
    let unrelated: Vec<&[TokenId]> = corpus
        .unrelated_prompts(fact)
        .into_iter()
        .map(|p| p.ids.as_slice())
        .collect();
    if paraphrases.is_empty() {
        return Err(Error::Audit(format!(
            "no paraphrases for {:?}",
            fact.subject
        )));
    }
    if unrelated.is_empty() {
        return Err(Error::Audit(format!(
            "no unrelated prompts for {:?}",
            fact.subject
        )));
    }
    let changed = post
        .predict_batch(&paraphrases)?
        .into_iter()
        .filter(|g| *g == Some(target))
        .count();
    let before = pre.predict_batch(&unrelated)?;
    let after = post.predict_batch(&unrelated)?;
    let unchanged = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    Ok(EditScores {
        generalization: changed as f64 / paraphrases.len() as f64,
        specificity: unchanged as f64 / unrelated.len() as f64,
        paraphrases_changed: changed,
        paraphrases: paraphrases.len(),
        unrelated_unchanged: unchanged,
        unrelated: unrelated.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub cluster_margin: f64,
    pub generalization: f64,
    pub specificity: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cluster_margin: 0.1,
            generalization: 0.75,
            specificity: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "satisfied")]
    Satisfied,
    #[serde(rename = "not satisfied")]
    NotSatisfied,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Satisfied => "satisfied",
            Verdict::NotSatisfied => "not satisfied",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

/// Everything the verdict depends on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictInputs {
    pub cluster_margin: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub baseline_generalization: f64,
}

/// Thresholds compare with `>=`; the baseline comparison is strict.
pub fn systematicity_verdict(inputs: &VerdictInputs, t: &Thresholds) -> Result<Verdict> {
    let VerdictInputs {
        cluster_margin: m,
        generalization: g,
        specificity: s,
        baseline_generalization: b,
    } = *inputs;
    if [
        m,
        g,
        s,
        b,
        t.cluster_margin,
        t.generalization,
        t.specificity,
    ]
    .iter()
    .any(|x| !x.is_finite())
    {
        return Err(Error::Audit("verdict inputs must be finite".into()));
    }
    if m >= t.cluster_margin && g >= t.generalization && s >= t.specificity && g > b {
        Ok(Verdict::Satisfied)
    } else if m < t.cluster_margin / 2.0 || g < t.generalization / 2.0 || s < t.specificity / 2.0 {
        Ok(Verdict::NotSatisfied)
    } else {
        Ok(Verdict::Inconclusive)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactEdit {
    pub subject: String,
    pub old_object: String,
    pub new_object: String,
    pub layer: usize,
    pub post_new_p: f64,
    pub weak: bool,
    pub scores: EditScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemAudit {
    pub cluster_margin: f64,
    pub edits: Vec<FactEdit>,
    pub mean_generalization: f64,
    pub mean_specificity: f64,
    pub verdict_inputs: VerdictInputs,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub identifiers: BTreeMap<String, String>,
    pub config: Value,
    pub thresholds: Thresholds,
    pub cluster: ClusterScore,
    pub dimension_shift: DimensionShift,
    pub transformer: SystemAudit,
    pub baseline: SystemAudit,
    pub verdict: Verdict,
    pub note: String,
}

pub const REPORT_NOTE: &str = "The verdict summarizes behavioral evidence for a shared causal mediator; it does not establish that one exists.";

/// Rounds to the six decimals written in reports.
pub fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn system_audit(
    cluster_margin: f64,
    edits: Vec<FactEdit>,
    baseline_generalization: f64,
    t: &Thresholds,
) -> Result<SystemAudit> {
    let mean_generalization = mean(edits.iter().map(|e| e.scores.generalization));
    let mean_specificity = mean(edits.iter().map(|e| e.scores.specificity));
    let verdict_inputs = VerdictInputs {
        cluster_margin: round6(cluster_margin),
        generalization: round6(mean_generalization),
        specificity: round6(mean_specificity),
        baseline_generalization: round6(baseline_generalization),
    };
    Ok(SystemAudit {
        cluster_margin,
        edits,
        mean_generalization,
        mean_specificity,
        verdict: systematicity_verdict(&verdict_inputs, t)?,
        verdict_inputs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub thresholds: Thresholds,
    pub cluster_depth: Depth,
    /// Token whose contextual dispersion is reported.
    pub shift_token: String,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            cluster_depth: Depth::Embedding,
            shift_token: "eiffel".into(),
        }
    }
}

/// Runs every edit on the transformer and on the lookup baseline and
/// assembles the report.
pub fn run_audit(
    params: &TransformerParams,
    corpus: &Corpus,
    requests: &[EditRequest],
    value_config: &ValueConfig,
    config: &AuditConfig,
    identifiers: BTreeMap<String, String>,
    run_config: Value,
) -> Result<AuditReport> {
    if requests.is_empty() {
        return Err(Error::Audit("no edits to audit".into()));
    }
    let cluster = cluster_score(params, corpus, config.cluster_depth)?;
    let shift = dimension_shift(params, corpus, &config.shift_token)?;

    let mut covs: BTreeMap<usize, KeyCovariance> = BTreeMap::new();
    let mut edits = Vec::with_capacity(requests.len());
    for req in requests {
        let cov = match covs.entry(req.layer) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(key_covariance(params, corpus, req.layer)?),
        };
        let (edited, result) = apply_edit_with(params, corpus, req, value_config, cov)?;
        let scores = edit_scores(
            params,
            &edited,
            corpus,
            &req.fact,
            &req.new_object,
            &req.edit_prompt.ids,
        )?;
        edits.push(FactEdit {
            subject: req.fact.subject.clone(),
            old_object: req.fact.object.clone(),
            new_object: req.new_object.clone(),
            layer: req.layer,
            post_new_p: result.post_new_p,
            weak: result.weak,
            scores,
        });
    }

    let lookup = build_lookup(corpus)?;
    let mut base_edits = Vec::with_capacity(requests.len());
    for req in requests {
        let edited = lookup.edit(&req.edit_prompt.ids, corpus.vocab.id(&req.new_object)?)?;
        let scores = edit_scores(
            &lookup,
            &edited,
            corpus,
            &req.fact,
            &req.new_object,
            &req.edit_prompt.ids,
        )?;
        base_edits.push(FactEdit {
            subject: req.fact.subject.clone(),
            old_object: req.fact.object.clone(),
            new_object: req.new_object.clone(),
            layer: 0,
            post_new_p: 1.0,
            weak: false,
            scores,
        });
    }
    let t = &config.thresholds;
    let base_margin = lookup_cluster_score(&lookup, corpus)?.margin;
    let baseline = system_audit(base_margin, base_edits, 0.0, t)?;
    let baseline_gen = baseline.mean_generalization;
    let transformer = system_audit(cluster.margin, edits, baseline_gen, t)?;
    Ok(AuditReport {
        identifiers,
        config: run_config,
        thresholds: *t,
        cluster,
        dimension_shift: shift,
        verdict: transformer.verdict,
        transformer,
        baseline,
        note: REPORT_NOTE.into(),
    })
}

impl AuditReport {
    /// Sorted keys, reals with six decimals, two-space indent.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let mut out = String::new();
        write_canonical(&v, 0, true, &mut out);
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Verdict from the recorded inputs alone.
    pub fn recompute_verdict(&self) -> Result<Verdict> {
        systematicity_verdict(&self.transformer.verdict_inputs, &self.thresholds)
    }
}

/// With `fixed` unset numbers keep their shortest form; the embedded run
/// configuration uses that so small values such as Adam's epsilon survive.
fn write_canonical(v: &Value, indent: usize, fixed: bool, out: &mut String) {
    let pad = |n: usize, out: &mut String| out.extend(std::iter::repeat_n(' ', n));
    match v {
        Value::Number(n) if fixed && n.is_f64() => {
            let x = round6(n.as_f64().unwrap_or(0.0));
            out.push_str(&format!("{x:.6}"));
        }
        Value::Array(items) if !items.is_empty() => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(indent + 2, out);
                write_canonical(item, indent + 2, fixed, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push(']');
        }
        Value::Object(map) if !map.is_empty() => {
            // serde_json's default map is ordered by key
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(indent + 2, out);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_canonical(
                    item,
                    indent + 2,
                    fixed && !(indent == 0 && k == "config"),
                    out,
                );
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(indent, out);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}
