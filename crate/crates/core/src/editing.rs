//! Rank-one editing of one MLP key-value association.
//!
//! The MLP output matrix is read as a linear memory `W = W_outᵀ`
//! (`d_model × d_mlp`) mapping keys (post-GELU activations) to values. An
//! edit picks the key `k*` of one subject token (the traced one, else the
//! last), solves for a value `v*` that makes the model produce the new
//! object, and applies the smallest covariance-weighted change with
//! `W′k* = v* − b_out`.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::audit::{edit_scores, EditScores};
use crate::corpus::{subject_token_span, Corpus, FactTriple, Prompt, Split, TokenId, TokenSpan};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_on_tape, forward_patched, BoundParams, Component, Patch, SequenceInput, Site,
    TransformerParams,
};
use crate::numerics::{argmax, dot, norm, softmax, Matrix, Tape};
use crate::tracing::FactSite;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of `‖v − v₀‖²`.
    pub lambda: f64,
    /// Average the likelihood over every key context rather than the edit
    /// prompt alone.
    pub over_contexts: bool,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.5,
            lambda: 0.01,
            over_contexts: true,
        }
    }
}

/// Relative ridge added to the key covariance diagonal.
pub const RIDGE_FRACTION: f64 = 1e-4;

/// What to edit and where.
#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub fact: FactTriple,
    pub new_object: String,
    pub layer: usize,
    /// Token within the subject span to edit; the last one when `None`.
    pub subject_token: Option<usize>,
    /// Prompts whose keys at the edited subject token are averaged into `k*`.
    pub contexts: Vec<Prompt>,
    /// Prompt supplying v₀ for `v*`; excluded from generalization.
    pub edit_prompt: Prompt,
}

impl EditRequest {
    /// Keys from the fact's training paraphrases, value from the first of them.
    pub fn for_subject(
        corpus: &Corpus,
        subject: &str,
        new_object: &str,
        layer: usize,
    ) -> Result<Self> {
        let class = corpus
            .class_for_subject(subject)
            .ok_or_else(|| Error::Corpus(format!("unknown subject {subject:?}")))?;
        corpus.vocab.id(new_object)?;
        let contexts: Vec<Prompt> = class.split_prompts(Split::Train).cloned().collect();
        let edit_prompt = contexts
            .first()
            .cloned()
            .ok_or_else(|| Error::Corpus(format!("no training prompt for {subject:?}")))?;
        Ok(Self {
            fact: class.fact.clone(),
            new_object: new_object.to_owned(),
            layer,
            subject_token: None,
            contexts,
            edit_prompt,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.new_object == self.fact.object
    }

    /// Edit at the traced site: its layer and its offset within the subject.
    pub fn at_site(self, site: &FactSite, span: TokenSpan) -> Self {
        Self {
            layer: site.layer,
            subject_token: Some(site.position.saturating_sub(span.start)),
            ..self
        }
    }
}

/// Position of the `offset`-th subject token, or of the last one.
pub fn subject_position<S: AsRef<str>>(
    tokens: &[S],
    subject: &str,
    offset: Option<usize>,
) -> Result<usize> {
    let span = subject_token_span(tokens, subject)?;
    match offset {
        None => Ok(span.last()),
        Some(o) if o < span.len => Ok(span.start + o),
        Some(o) => Err(Error::OutOfRange {
            what: "subject token",
            index: o,
            limit: span.len,
        }),
    }
}

/// Mean MLP key at the last subject token over the contexts.
pub fn compute_key(
    params: &TransformerParams,
    subject: &str,
    layer: usize,
    contexts: &[Prompt],
) -> Result<Vec<f64>> {
    compute_key_at(params, subject, None, layer, contexts)
}

/// [`compute_key`] at a chosen subject token.
pub fn compute_key_at(
    params: &TransformerParams,
    subject: &str,
    subject_token: Option<usize>,
    layer: usize,
    contexts: &[Prompt],
) -> Result<Vec<f64>> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput("key contexts"));
    }
    check_layer(params, layer)?;
    let mut sum = vec![0.0; params.config.d_mlp];
    for ctx in contexts {
        let pos = subject_position(&ctx.tokens, subject, subject_token)?;
        let (_, tape) = forward(params, &ctx.ids)?;
        for (s, k) in sum.iter_mut().zip(tape.key(layer, pos)) {
            *s += k;
        }
    }
    let n = contexts.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn check_layer(params: &TransformerParams, layer: usize) -> Result<()> {
    if layer >= params.config.n_layers {
        return Err(Error::OutOfRange {
            what: "edit layer",
            index: layer,
            limit: params.config.n_layers,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueSolution {
    pub v_star: Vec<f64>,
    pub v0: Vec<f64>,
    pub p_before: f64,
    pub p_after: f64,
    /// The target probability stayed at or below 0.5.
    pub weak: bool,
}

fn target_probability(
    params: &TransformerParams,
    ids: &[TokenId],
    site: Site,
    v: &[f64],
    target: TokenId,
) -> Result<f64> {
    let patch = Patch {
        site,
        value: v.to_vec(),
    };
    let (logits, _) = forward_patched(params, ids, &[patch], None)?;
    Ok(softmax(logits.row(ids.len() - 1))?[target])
}

/// Minimizes `−log P(target | mlp_out at the site := v) + λ‖v − v₀‖²` by
/// proximal gradient steps: a gradient step on the likelihood term, then the
/// closed-form proximal map of the penalty, which stays stable for any λ.
pub fn solve_value(
    params: &TransformerParams,
    ids: &[TokenId],
    layer: usize,
    position: usize,
    target: TokenId,
    config: &ValueConfig,
) -> Result<ValueSolution> {
    solve_value_over(params, &[(ids, position)], layer, target, config)
}

/// As [`solve_value`], with the likelihood term averaged over several
/// `(prompt, position)` contexts sharing one v. The first context supplies
/// v₀ and the reported probabilities.
pub fn solve_value_over(
    params: &TransformerParams,
    contexts: &[(&[TokenId], usize)],
    layer: usize,
    target: TokenId,
    config: &ValueConfig,
) -> Result<ValueSolution> {
    check_layer(params, layer)?;
    if target >= params.config.vocab_size {
        return Err(Error::OutOfRange {
            what: "target token",
            index: target,
            limit: params.config.vocab_size,
        });
    }
    if !(config.learning_rate > 0.0 && config.lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "value solver needs lr > 0 and lambda >= 0: {config:?}"
        )));
    }
    let &(ids, position) = contexts
        .first()
        .ok_or(Error::EmptyInput("value contexts"))?;
    for &(c, pos) in contexts {
        if pos >= c.len() {
            return Err(Error::OutOfRange {
                what: "edit position",
                index: pos,
                limit: c.len(),
            });
        }
    }
    let site_at = |position| Site {
        layer,
        position,
        component: Component::MlpOut,
    };
    let (_, clean) = forward(params, ids)?;
    let v0 = clean.activation(site_at(position)).to_vec();
    let p_before = target_probability(params, ids, site_at(position), &v0, target)?;

    let targets: Vec<Option<TokenId>> = contexts
        .iter()
        .flat_map(|(c, _)| {
            let mut t = vec![None; c.len()];
            t[c.len() - 1] = Some(target);
            t
        })
        .collect();
    let lr = config.learning_rate;
    let shrink = 1.0 + 2.0 * lr * config.lambda;
    let mut v = v0.clone();
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let var = tape.param(Matrix::row_vector(&v));
        let inputs: Vec<SequenceInput<'_>> = contexts
            .iter()
            .map(|&(c, pos)| SequenceInput {
                tokens: c,
                embedding_override: None,
                patches: vec![(site_at(pos), var)],
            })
            .collect();
        let vars = forward_on_tape(&mut tape, &bound, &inputs)?;
        let loss = tape.cross_entropy(vars.logits, &targets)?;
        let grads = tape.backward(loss)?;
        let g = grads.get(var).ok_or(Error::EmptyInput("value gradient"))?;
        for ((x, gi), x0) in v.iter_mut().zip(g.as_slice()).zip(&v0) {
            *x = (*x - lr * gi + 2.0 * lr * config.lambda * x0) / shrink;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("value optimization diverged".to_owned()));
        }
    }
    let p_after = target_probability(params, ids, site_at(position), &v, target)?;
    Ok(ValueSolution {
        v_star: v,
        v0,
        p_before,
        p_after,
        weak: p_after <= 0.5,
    })
}

/// Uncentered second moment of keys with a ridge on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyCovariance {
    pub matrix: Matrix,
    pub ridge: f64,
    pub samples: usize,
}

impl KeyCovariance {
    pub fn from_keys(keys: &[&[f64]]) -> Result<Self> {
        let first = keys.first().ok_or(Error::EmptyInput("key covariance"))?;
        let d = first.len();
        let mut c = Matrix::zeros(d, d);
        for k in keys {
            if k.len() != d {
                return Err(Error::LengthMismatch {
                    op: "key covariance",
                    left: d,
                    right: k.len(),
                });
            }
            for i in 0..d {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                let row = c.row_mut(i);
                for (o, kj) in row.iter_mut().zip(k.iter()) {
                    *o += ki * kj;
                }
            }
        }
        let n = keys.len() as f64;
        let mut matrix = c.scale(1.0 / n);
        let ridge = RIDGE_FRACTION * (0..d).map(|i| matrix.get(i, i)).sum::<f64>() / d as f64;
        for i in 0..d {
            matrix.set(i, i, matrix.get(i, i) + ridge);
        }
        Ok(Self {
            matrix,
            ridge,
            samples: keys.len(),
        })
    }

    /// Ratio of the extreme eigenvalues.
    pub fn condition_number(&self) -> f64 {
        let eig = to_na(&self.matrix).symmetric_eigen().eigenvalues;
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// `C⁻¹ x` by Cholesky.
    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.matrix.rows() {
            return Err(Error::LengthMismatch {
                op: "covariance solve",
                left: self.matrix.rows(),
                right: x.len(),
            });
        }
        let chol = to_na(&self.matrix)
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(chol
            .solve(&DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect())
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Keys at every position of every training prompt.
pub fn key_covariance(
    params: &TransformerParams,
    corpus: &Corpus,
    layer: usize,
) -> Result<KeyCovariance> {
    check_layer(params, layer)?;
    let tapes: Vec<_> = corpus
        .split_prompts(Split::Train)
        .map(|(_, p)| forward(params, &p.ids).map(|(_, t)| t))
        .collect::<Result<_>>()?;
    let keys: Vec<&[f64]> = tapes
        .iter()
        .flat_map(|t| (0..t.tokens.len()).map(move |pos| t.key(layer, pos)))
        .collect();
    KeyCovariance::from_keys(&keys)
}

/// Factors of a rank-one update `ΔW = d uᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOne {
    /// `v* − W k*`.
    pub residual: Vec<f64>,
    /// `C⁻¹k* / (k*ᵀ C⁻¹ k*)`.
    pub direction: Vec<f64>,
}

impl RankOne {
    pub fn delta(&self) -> Matrix {
        Matrix::outer(&self.residual, &self.direction)
    }
}

pub fn rank_one_factors(w: &Matrix, k: &[f64], v: &[f64], c: &KeyCovariance) -> Result<RankOne> {
    if w.cols() != k.len() || w.rows() != v.len() || c.matrix.rows() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "rank_one_update",
            left: w.shape(),
            right: (v.len(), k.len()),
        });
    }
    let cinv_k = c.solve(k)?;
    let denom = dot(k, &cinv_k);
    if denom.is_nan() || denom <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let wk = w.mul_vec(k)?;
    Ok(RankOne {
        residual: v.iter().zip(&wk).map(|(a, b)| a - b).collect(),
        direction: cinv_k.iter().map(|x| x / denom).collect(),
    })
}

/// `W + (v − W k)(C⁻¹k)ᵀ / (kᵀC⁻¹k)`, so that `W′k = v`.
pub fn rank_one_update(w: &Matrix, k: &[f64], v: &[f64], c: &KeyCovariance) -> Result<Matrix> {
    let f = rank_one_factors(w, k, v, c)?;
    w.add(&f.delta())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
    pub layer: usize,
    pub position: usize,
    pub edit_prompt: Vec<String>,
    pub contexts: usize,
    pub identity: bool,
    pub pre_prediction: String,
    pub post_prediction: String,
    pub pre_new_p: f64,
    pub post_new_p: f64,
    pub pre_old_p: f64,
    pub post_old_p: f64,
    /// P(new object) with v* patched in, before splicing.
    pub value_p: f64,
    /// P(new object) ≤ 0.5 after splicing.
    pub weak: bool,
    pub delta_frobenius: f64,
    pub residual_norm: f64,
    pub covariance_condition: f64,
    pub exactness_error: f64,
    pub checkpoint: Option<PathBuf>,
}

impl EditResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn final_probs(params: &TransformerParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let (logits, _) = forward(params, ids)?;
    softmax(logits.row(ids.len() - 1))
}

/// Runs the full edit: key, value, covariance and the rank-one update of
/// `W_out` at the requested layer. The input parameters are left untouched.
pub fn apply_edit(
    params: &TransformerParams,
    corpus: &Corpus,
    request: &EditRequest,
    value_config: &ValueConfig,
) -> Result<(TransformerParams, EditResult)> {
    let cov = key_covariance(params, corpus, request.layer)?;
    apply_edit_with(params, corpus, request, value_config, &cov)
}

/// [`apply_edit`] with a precomputed covariance for the request's layer.
pub fn apply_edit_with(
    params: &TransformerParams,
    corpus: &Corpus,
    request: &EditRequest,
    value_config: &ValueConfig,
    cov: &KeyCovariance,
) -> Result<(TransformerParams, EditResult)> {
    let layer = request.layer;
    check_layer(params, layer)?;
    let new_id = corpus.vocab.id(&request.new_object)?;
    let old_id = corpus.vocab.id(&request.fact.object)?;
    let prompt = &request.edit_prompt;
    let position = subject_position(&prompt.tokens, &request.fact.subject, request.subject_token)?;

    let k = compute_key_at(
        params,
        &request.fact.subject,
        request.subject_token,
        layer,
        &request.contexts,
    )?;
    let w = params.layers[layer].w_out.transpose();
    let bias = params.layers[layer].b_out.as_slice();
    let identity = request.is_identity();
    let (target, value_p) = if identity {
        // v* = W k* + b makes the residual exactly zero.
        (w.mul_vec(&k)?, f64::NAN)
    } else {
        let mut sites = vec![(prompt.ids.as_slice(), position)];
        if value_config.over_contexts {
            for ctx in request.contexts.iter().filter(|c| c.ids != prompt.ids) {
                let pos =
                    subject_position(&ctx.tokens, &request.fact.subject, request.subject_token)?;
                sites.push((ctx.ids.as_slice(), pos));
            }
        }
        let sol = solve_value_over(params, &sites, layer, new_id, value_config)?;
        let t: Vec<f64> = sol.v_star.iter().zip(bias).map(|(v, b)| v - b).collect();
        (t, sol.p_after)
    };
    let factors = rank_one_factors(&w, &k, &target, cov)?;
    let delta = factors.delta();
    let w_new = w.add(&delta)?;
    let exactness_error = w_new
        .mul_vec(&k)?
        .iter()
        .zip(&target)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut edited = params.clone();
    edited.layers[layer].w_out = w_new.transpose();

    let pre = final_probs(params, &prompt.ids)?;
    let post = final_probs(&edited, &prompt.ids)?;
    let name = |id: TokenId| corpus.vocab.token(id).unwrap_or("?").to_owned();
    let result = EditResult {
        subject: request.fact.subject.clone(),
        relation: request.fact.relation.clone(),
        old_object: request.fact.object.clone(),
        new_object: request.new_object.clone(),
        layer,
        position,
        edit_prompt: prompt.tokens.clone(),
        contexts: request.contexts.len(),
        identity,
        pre_prediction: name(argmax(&pre)),
        post_prediction: name(argmax(&post)),
        pre_new_p: pre[new_id],
        post_new_p: post[new_id],
        pre_old_p: pre[old_id],
        post_old_p: post[old_id],
        value_p: if identity { post[new_id] } else { value_p },
        weak: post[new_id] <= 0.5,
        delta_frobenius: delta.frobenius_norm(),
        residual_norm: norm(&factors.residual),
        covariance_condition: cov.condition_number(),
        exactness_error,
        checkpoint: None,
    };
    Ok((edited, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub post_new_p: f64,
    pub scores: EditScores,
}

/// The same edit applied independently at each layer.
pub fn layer_sweep(
    params: &TransformerParams,
    corpus: &Corpus,
    request: &EditRequest,
    layers: &[usize],
    value_config: &ValueConfig,
) -> Result<Vec<SweepRow>> {
    layers
        .iter()
        .map(|&layer| {
            let req = EditRequest {
                layer,
                ..request.clone()
            };
            let (edited, result) = apply_edit(params, corpus, &req, value_config)?;
            let scores = edit_scores(
                params,
                &edited,
                corpus,
                &req.fact,
                &req.new_object,
                &req.edit_prompt.ids,
            )?;
            Ok(SweepRow {
                layer,
                post_new_p: result.post_new_p,
                scores,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Corpus, TransformerParams) {
        let c = Corpus::generate_split(&CorpusSpec::default(), 0).unwrap();
        let p = init_model(ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 24,
            vocab_size: c.vocab.len(),
            max_context: c.longest_prompt() + 1,
            seed: 7,
        })
        .unwrap();
        (c, p)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_cov(rng: &mut ChaCha8Rng, d: usize, n: usize) -> KeyCovariance {
        let keys: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, d)).collect();
        let refs: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
        KeyCovariance::from_keys(&refs).unwrap()
    }

    #[test]
    fn single_context_key_is_the_recorded_key() {
        let (c, p) = setup();
        let class = c.class_for_subject("eiffel tower").unwrap();
        let prompt = &class.prompts[0];
        let k = compute_key(&p, "eiffel tower", 1, std::slice::from_ref(prompt)).unwrap();
        let (_, tape) = forward(&p, &prompt.ids).unwrap();
        assert_eq!(k, tape.key(1, 2));
        let twice = compute_key(&p, "eiffel tower", 1, &[prompt.clone(), prompt.clone()]).unwrap();
        assert_eq!(twice, k);
    }

    #[test]
    fn key_errors() {
        let (c, p) = setup();
        assert!(compute_key(&p, "eiffel tower", 0, &[]).is_err());
        let other = c.class_for_subject("big ben").unwrap().prompts[0].clone();
        assert!(compute_key(&p, "eiffel tower", 0, &[other]).is_err());
    }

    #[test]
    fn single_key_covariance() {
        let k = [1.0, -2.0, 0.5];
        let cov = KeyCovariance::from_keys(&[&k]).unwrap();
        let eps = 1e-4 * (1.0 + 4.0 + 0.25) / 3.0;
        assert_eq!(cov.ridge, eps);
        for i in 0..3 {
            for j in 0..3 {
                let want = k[i] * k[j] + if i == j { eps } else { 0.0 };
                assert!((cov.matrix.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn model_covariance_is_symmetric_and_well_conditioned() {
        let (c, p) = setup();
        let cov = key_covariance(&p, &c, 1).unwrap();
        let m = &cov.matrix;
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-12);
            }
        }
        assert!(cov.condition_number().is_finite());
    }

    #[test]
    fn zero_covariance_is_rejected() {
        let cov = KeyCovariance::from_keys(&[&[0.0, 0.0]]).unwrap();
        let w = Matrix::identity(2);
        assert!(matches!(
            rank_one_update(&w, &[1.0, 0.0], &[0.0, 1.0], &cov),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn update_maps_key_to_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, n) = (6, 9);
        let w = Matrix::from_vec(m, n, random_vec(&mut rng, m * n)).unwrap();
        let cov = random_cov(&mut rng, n, 40);
        for _ in 0..20 {
            let k = random_vec(&mut rng, n);
            let v = random_vec(&mut rng, m);
            let w2 = rank_one_update(&w, &k, &v, &cov).unwrap();
            for (a, b) in w2.mul_vec(&k).unwrap().iter().zip(&v) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identity_update_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::from_vec(4, 5, random_vec(&mut rng, 20)).unwrap();
        let cov = random_cov(&mut rng, 5, 12);
        let k = random_vec(&mut rng, 5);
        let v = w.mul_vec(&k).unwrap();
        assert_eq!(rank_one_update(&w, &k, &v, &cov).unwrap(), w);
    }

    #[test]
    fn c_inverse_orthogonal_keys_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (5, 7);
        let w = Matrix::from_vec(m, n, random_vec(&mut rng, m * n)).unwrap();
        let cov = random_cov(&mut rng, n, 30);
        let k = random_vec(&mut rng, n);
        let v = random_vec(&mut rng, m);
        let w2 = rank_one_update(&w, &k, &v, &cov).unwrap();
        let cinv_k = cov.solve(&k).unwrap();
        for _ in 0..10 {
            // Gram-Schmidt in the C⁻¹ inner product
            let r = random_vec(&mut rng, n);
            let coef = dot(&cinv_k, &r) / dot(&cinv_k, &k);
            let probe: Vec<f64> = r.iter().zip(&k).map(|(a, b)| a - coef * b).collect();
            assert!(dot(&cinv_k, &probe).abs() < 1e-12);
            let before = w.mul_vec(&probe).unwrap();
            let after = w2.mul_vec(&probe).unwrap();
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn delta_has_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n) = (8, 10);
        let w = Matrix::from_vec(m, n, random_vec(&mut rng, m * n)).unwrap();
        let cov = random_cov(&mut rng, n, 30);
        let (k, v) = (random_vec(&mut rng, n), random_vec(&mut rng, m));
        let delta = rank_one_update(&w, &k, &v, &cov).unwrap().sub(&w).unwrap();
        for _ in 0..200 {
            let (i, j) = (rng.random_range(0..m), rng.random_range(0..m));
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let minor = delta.get(i, a) * delta.get(j, b) - delta.get(i, b) * delta.get(j, a);
            assert!(minor.abs() < 1e-8);
        }
        let svd = to_na(&delta).svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let (top, _) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold(
                    (0, f64::MIN),
                    |best, (i, &s)| if s > best.1 { (i, s) } else { best },
                );
        let lead = u.column(top) * svd.singular_values[top] * vt.row(top);
        assert!((to_na(&delta) - lead).norm() <= 1e-8);
    }

    #[test]
    fn update_is_the_smallest_covariance_weighted_correction() {
        // 3x3 hand instance against a random-search oracle
        let w = Matrix::from_rows(&[
            vec![1.0, 0.5, -0.2],
            vec![0.0, 2.0, 0.3],
            vec![-1.0, 0.1, 0.7],
        ])
        .unwrap();
        let cov = KeyCovariance {
            matrix: Matrix::from_rows(&[
                vec![2.0, 0.3, 0.1],
                vec![0.3, 1.0, -0.2],
                vec![0.1, -0.2, 0.5],
            ])
            .unwrap(),
            ridge: 0.0,
            samples: 0,
        };
        let k = [0.6, -1.0, 0.4];
        let v = [1.0, -0.5, 2.0];
        let f = rank_one_factors(&w, &k, &v, &cov).unwrap();
        let weighted = |dir: &[f64]| {
            // ‖d uᵀ‖²_C = ‖d‖² uᵀ C u
            let cu = cov.matrix.mul_vec(dir).unwrap();
            dot(&f.residual, &f.residual) * dot(dir, &cu)
        };
        let best = weighted(&f.direction);
        let kk = dot(&k, &k);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let z = random_vec(&mut rng, 3);
            let zk = dot(&z, &k) / kk;
            let alt: Vec<f64> = f
                .direction
                .iter()
                .zip(&z)
                .zip(&k)
                .map(|((u, z), k)| u + z - zk * k)
                .collect();
            assert!((dot(&alt, &k) - 1.0).abs() < 1e-12);
            assert!(best <= weighted(&alt) + 1e-12);
        }
    }

    #[test]
    fn value_solver_reaches_the_target_and_respects_lambda() {
        let (c, p) = setup();
        let class = c.class_for_subject("eiffel tower").unwrap();
        let prompt = &class.prompts[0];
        let rome = c.vocab.id("rome").unwrap();
        // in the last layer the subject position cannot reach the final row
        let sol = solve_value(&p, &prompt.ids, 1, 2, rome, &ValueConfig::default()).unwrap();
        assert_eq!(sol.v_star, sol.v0);
        let sol = solve_value(&p, &prompt.ids, 0, 2, rome, &ValueConfig::default()).unwrap();
        // attention weights of an untrained model pass little signal along
        assert!(sol.p_after > sol.p_before);
        assert_eq!(sol.weak, sol.p_after <= 0.5);
        let stiff = ValueConfig {
            lambda: 1e12,
            ..ValueConfig::default()
        };
        let sol = solve_value(&p, &prompt.ids, 0, 2, rome, &stiff).unwrap();
        let gap = sol
            .v_star
            .iter()
            .zip(&sol.v0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-9);
    }

    #[test]
    fn value_over_contexts() {
        let (c, p) = setup();
        let class = c.class_for_subject("eiffel tower").unwrap();
        let (a, b) = (&class.prompts[0], &class.prompts[1]);
        let rome = c.vocab.id("rome").unwrap();
        let cfg = ValueConfig {
            steps: 20,
            ..ValueConfig::default()
        };
        let one = solve_value(&p, &a.ids, 0, 2, rome, &cfg).unwrap();
        assert_eq!(
            solve_value_over(&p, &[(&a.ids, 2)], 0, rome, &cfg).unwrap(),
            one
        );
        let both = solve_value_over(&p, &[(&a.ids, 2), (&b.ids, 2)], 0, rome, &cfg).unwrap();
        assert_eq!(both.v0, one.v0);
        assert_ne!(both.v_star, one.v_star);
        assert!(solve_value_over(&p, &[], 0, rome, &cfg).is_err());
        assert!(solve_value_over(&p, &[(&a.ids, 2), (&b.ids, 99)], 0, rome, &cfg).is_err());
    }

    #[test]
    fn value_for_current_prediction_stays_near_start() {
        let (c, p) = setup();
        let prompt = &c.class_for_subject("eiffel tower").unwrap().prompts[0];
        let (logits, _) = forward(&p, &prompt.ids).unwrap();
        let current = argmax(logits.row(prompt.ids.len() - 1));
        let cfg = ValueConfig {
            steps: 5,
            ..ValueConfig::default()
        };
        let sol = solve_value(&p, &prompt.ids, 0, 2, current, &cfg).unwrap();
        assert!(sol.p_after >= sol.p_before);
    }

    #[test]
    fn identity_edit_is_a_no_op() {
        let (c, p) = setup();
        let req = EditRequest::for_subject(&c, "eiffel tower", "paris", 1).unwrap();
        let (edited, result) = apply_edit(&p, &c, &req, &ValueConfig::default()).unwrap();
        assert!(result.identity);
        assert_eq!(edited, p);
        assert_eq!(result.delta_frobenius, 0.0);
    }

    #[test]
    fn edit_changes_exactly_one_matrix() {
        let (c, p) = setup();
        let req = EditRequest::for_subject(&c, "eiffel tower", "rome", 1).unwrap();
        let (edited, result) = apply_edit(&p, &c, &req, &ValueConfig::default()).unwrap();
        assert_eq!(
            crate::model::changed_tensors(&p, &edited),
            vec!["layers.1.w_out".to_owned()]
        );
        assert!(result.exactness_error < 1e-8);
        assert_eq!(result.position, 2);
        assert_eq!(result.weak, result.post_new_p <= 0.5);
        assert!(result
            .to_json()
            .unwrap()
            .contains("\"new_object\": \"rome\""));
    }

    #[test]
    fn edit_at_first_subject_token() {
        let (c, p) = setup();
        let req = EditRequest::for_subject(&c, "eiffel tower", "rome", 0).unwrap();
        let site = FactSite {
            layer: 0,
            position: 1,
            component: Component::MlpOut,
            ie: 0.5,
        };
        let req = req.at_site(&site, TokenSpan { start: 1, len: 2 });
        assert_eq!(req.subject_token, Some(0));
        let (edited, result) = apply_edit(&p, &c, &req, &ValueConfig::default()).unwrap();
        assert_eq!(result.position, 1);
        assert_eq!(
            crate::model::changed_tensors(&p, &edited),
            vec!["layers.0.w_out".to_owned()]
        );
        assert!(result.exactness_error < 1e-8);
        let bad = EditRequest {
            subject_token: Some(2),
            ..req
        };
        assert!(apply_edit(&p, &c, &bad, &ValueConfig::default()).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let (c, p) = setup();
        let req = EditRequest::for_subject(&c, "big ben", "paris", 0).unwrap();
        let cfg = ValueConfig {
            steps: 20,
            ..ValueConfig::default()
        };
        assert!(layer_sweep(&p, &c, &req, &[], &cfg).unwrap().is_empty());
        let rows = layer_sweep(&p, &c, &req, &[0, 1], &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert!((0.0..=1.0).contains(&r.scores.generalization));
            assert!((0.0..=1.0).contains(&r.scores.specificity));
        }
    }

    #[test]
    fn request_validation() {
        let (c, _) = setup();
        assert!(EditRequest::for_subject(&c, "nowhere", "rome", 0).is_err());
        assert!(EditRequest::for_subject(&c, "big ben", "atlantis", 0).is_err());
    }
}
