//! Next-token training on the synthetic corpus and top-1 evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split, TokenId};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, BoundParams, Predictor, SequenceInput, TransformerParams};
use crate::numerics::{
    finite_diff_check, AdamConfig, AdamState, GradCheckReport, Matrix, Tape, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub seed: u64,
    /// Score only the object position instead of every next token.
    pub object_only_loss: bool,
    /// Drop next-token targets whose context is already a complete prompt,
    /// so the only continuation taught after a full prompt is its object.
    pub mask_complete_prompts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            eval_interval: 250,
            seed: 0,
            object_only_loss: false,
            mask_complete_prompts: true,
        }
    }
}

impl TrainConfig {
    /// Zero steps is allowed and leaves the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0 && self.epsilon > 0.0) {
            return bad("learning_rate, clip_norm and epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eval_interval == 0 || (self.steps > 0 && self.eval_interval > self.steps) {
            return bad("eval_interval must be in 1..=steps");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub rows: Vec<TrainRow>,
    /// Mean batch loss over the last logging window.
    pub final_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,heldout_accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.step, r.loss, r.heldout_accuracy);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, self.to_csv().as_bytes())
    }
}

/// One training sequence: the prompt as input, shifted tokens plus the
/// object as targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Vec<TokenId>,
    pub targets: Vec<Option<TokenId>>,
}

/// Templates can be prefixes of one another ("is located in" and "is located
/// in the city of"). Unmasked language modeling then teaches the model to
/// continue a short paraphrase with the longer template instead of answering,
/// which is what `mask_complete_prompts` prevents.
pub fn training_examples(
    corpus: &Corpus,
    split: Split,
    object_only: bool,
    mask_complete_prompts: bool,
) -> Result<Vec<Example>> {
    let complete: HashSet<&[TokenId]> = corpus.prompts().map(|(_, p)| p.ids.as_slice()).collect();
    let mut out = Vec::new();
    for (class, prompt) in corpus.split_prompts(split) {
        let object = corpus.vocab.id(&class.fact.object)?;
        let n = prompt.ids.len();
        let mut targets: Vec<Option<TokenId>> = if object_only {
            vec![None; n.saturating_sub(1)]
        } else {
            (1..n)
                .map(|t| {
                    let masked = mask_complete_prompts && complete.contains(&prompt.ids[..t]);
                    (!masked).then_some(prompt.ids[t])
                })
                .collect()
        };
        targets.push(Some(object));
        out.push(Example {
            input: prompt.ids.clone(),
            targets,
        });
    }
    Ok(out)
}

/// Mean next-token cross-entropy of a packed batch.
pub(crate) fn batch_loss(tape: &mut Tape, bound: &BoundParams, batch: &[&Example]) -> Result<Var> {
    let inputs: Vec<SequenceInput<'_>> = batch
        .iter()
        .map(|e| SequenceInput::plain(&e.input))
        .collect();
    let vars = forward_on_tape(tape, bound, &inputs)?;
    let targets: Vec<Option<TokenId>> = batch
        .iter()
        .flat_map(|e| e.targets.iter().copied())
        .collect();
    tape.cross_entropy(vars.logits, &targets)
}

/// Loss and gradients (declared tensor order) for one batch.
pub fn loss_and_gradients(
    params: &TransformerParams,
    batch: &[&Example],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let loss = batch_loss(&mut tape, &bound, batch)?;
    let value = tape.value(loss).get(0, 0);
    let mut grads = tape.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(v, p)| {
            grads
                .take(*v)
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    Ok((value, grads))
}

/// Finite-difference check of the batch loss gradient over `sample`
/// coordinates of all parameters.
pub fn loss_gradient_check(
    params: &TransformerParams,
    batch: &[&Example],
    sample: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let config = params.config;
    let tensors: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
    let f = |t: &mut Tape, vars: &[Var]| {
        let bound = BoundParams::from_vars(config, vars.to_vec());
        batch_loss(t, &bound, batch)
    };
    finite_diff_check(f, &tensors, sample, tol, seed)
}

pub fn check_compatible(params: &TransformerParams, corpus: &Corpus) -> Result<()> {
    let cfg = &params.config;
    if corpus.vocab.len() > cfg.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary has {} tokens but the model only {}",
            corpus.vocab.len(),
            cfg.vocab_size
        )));
    }
    if corpus.longest_prompt() + 1 > cfg.max_context {
        return Err(Error::InvalidConfig(format!(
            "max_context {} is shorter than the longest prompt {} plus one",
            cfg.max_context,
            corpus.longest_prompt()
        )));
    }
    Ok(())
}

fn clip(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.as_mut_slice() {
                *x *= s;
            }
        }
    }
    norm
}

/// Adam with global-norm clipping on batches drawn with replacement from
/// the training split. Held-out accuracy is logged every `eval_interval`
/// steps and at the last step.
pub fn train(
    params: &TransformerParams,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<(TransformerParams, TrainRecord)> {
    config.validate()?;
    check_compatible(params, corpus)?;
    let examples = training_examples(
        corpus,
        Split::Train,
        config.object_only_loss,
        config.mask_complete_prompts,
    )?;
    if examples.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let heldout = eval_set(corpus, Split::Heldout)?;

    let mut params = params.clone();
    let mut record = TrainRecord::default();
    let mut adam = AdamState::new(config.adam(), params.shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut window = (0.0, 0usize);

    for step in 1..=config.steps {
        let batch: Vec<&Example> = (0..config.batch_size)
            .map(|_| &examples[rng.random_range(0..examples.len())])
            .collect();
        let (loss, mut grads) = loss_and_gradients(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip(&mut grads, config.clip_norm);
        adam.step(&mut params.tensors_mut(), &grads)?;
        window.0 += loss;
        window.1 += 1;

        if step % config.eval_interval == 0 || step == config.steps {
            let mean = window.0 / window.1 as f64;
            let acc = if heldout.is_empty() {
                0.0
            } else {
                evaluate(&params, &heldout)?.accuracy
            };
            record.rows.push(TrainRow {
                step,
                loss: mean,
                heldout_accuracy: acc,
            });
            record.final_loss = mean;
            window = (0.0, 0);
        }
    }
    Ok((params, record))
}

/// A prompt with its expected next token.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPrompt {
    pub class_id: usize,
    pub ids: Vec<TokenId>,
    pub target: TokenId,
}

pub fn eval_set(corpus: &Corpus, split: Split) -> Result<Vec<EvalPrompt>> {
    corpus
        .split_prompts(split)
        .map(|(class, p)| {
            Ok(EvalPrompt {
                class_id: class.id,
                ids: p.ids.clone(),
                target: corpus.vocab.id(&class.fact.object)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// class id -> (correct, total)
    pub per_class: BTreeMap<usize, (usize, usize)>,
}

impl Evaluation {
    pub fn class_accuracy(&self, class_id: usize) -> Option<f64> {
        self.per_class
            .get(&class_id)
            .map(|&(c, t)| c as f64 / t as f64)
    }
}

/// Top-1 accuracy at the object position, overall and per class.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, prompts: &[EvalPrompt]) -> Result<Evaluation> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("evaluation prompts"));
    }
    let inputs: Vec<&[TokenId]> = prompts.iter().map(|p| p.ids.as_slice()).collect();
    let guesses = model.predict_batch(&inputs)?;
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (p, g) in prompts.iter().zip(guesses) {
        let e = per_class.entry(p.class_id).or_default();
        e.1 += 1;
        if g == Some(p.target) {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / prompts.len() as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusSpec;
    use crate::model::{init_model, ModelConfig};
    use std::collections::HashMap;

    fn small_corpus() -> Corpus {
        Corpus::generate_split(&CorpusSpec::default(), 1).unwrap()
    }

    fn tiny(corpus: &Corpus, seed: u64) -> TransformerParams {
        init_model(ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: corpus.vocab.len(),
            max_context: corpus.longest_prompt() + 1,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn examples_shift_targets_and_end_with_object() {
        let c = small_corpus();
        let ex = training_examples(&c, Split::Train, false, false).unwrap();
        let (class, prompt) = c.split_prompts(Split::Train).next().unwrap();
        assert_eq!(ex[0].input, prompt.ids);
        assert_eq!(ex[0].targets.len(), prompt.ids.len());
        assert_eq!(ex[0].targets[0], Some(prompt.ids[1]));
        assert_eq!(
            *ex[0].targets.last().unwrap(),
            Some(c.vocab.id(&class.fact.object).unwrap())
        );
        let only = training_examples(&c, Split::Train, true, false).unwrap();
        assert_eq!(only[0].targets.iter().filter(|t| t.is_some()).count(), 1);
    }

    #[test]
    fn zero_steps_leaves_params_unchanged() {
        let c = small_corpus();
        let p = tiny(&c, 0);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (q, rec) = train(&p, &c, &cfg).unwrap();
        assert_eq!(p, q);
        assert!(rec.rows.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let c = small_corpus();
        let p = tiny(&c, 0);
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 4,
            eval_interval: 3,
            ..TrainConfig::default()
        };
        let (a, ra) = train(&p, &c, &cfg).unwrap();
        let (b, rb) = train(&p, &c, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.rows.len(), 2);
        assert!(ra
            .rows
            .iter()
            .all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.heldout_accuracy)));
        assert_ne!(a, p);
    }

    #[test]
    fn config_validation() {
        let c = small_corpus();
        let p = tiny(&c, 0);
        let bad = TrainConfig {
            steps: 10,
            eval_interval: 11,
            ..TrainConfig::default()
        };
        assert!(train(&p, &c, &bad).is_err());
        let small_ctx = init_model(ModelConfig {
            max_context: c.longest_prompt(),
            ..p.config
        })
        .unwrap();
        assert!(train(&small_ctx, &c, &TrainConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let rec = TrainRecord {
            rows: vec![TrainRow {
                step: 5,
                loss: 1.5,
                heldout_accuracy: 0.25,
            }],
            final_loss: 1.5,
            checkpoint: None,
        };
        assert_eq!(
            rec.to_csv(),
            "step,loss,heldout_accuracy\n5,1.500000,0.250000\n"
        );
    }

    #[test]
    fn one_small_step_lowers_the_batch_loss() {
        let c = small_corpus();
        let examples = training_examples(&c, Split::Train, false, false).unwrap();
        let batch: Vec<&Example> = examples.iter().step_by(7).take(8).collect();
        let seeds = 20;
        let mut lowered = 0;
        for seed in 0..seeds {
            let mut p = tiny(&c, seed);
            let (before, grads) = loss_and_gradients(&p, &batch).unwrap();
            let mut adam = AdamState::new(
                AdamConfig {
                    learning_rate: 1e-4,
                    ..AdamConfig::default()
                },
                p.shapes(),
            );
            adam.step(&mut p.tensors_mut(), &grads).unwrap();
            let (after, _) = loss_and_gradients(&p, &batch).unwrap();
            if after < before {
                lowered += 1;
            }
        }
        assert!(lowered * 100 >= seeds * 95, "{lowered}/{seeds}");
    }

    #[test]
    fn complete_prompts_are_not_continued() {
        let c = small_corpus();
        let class = c.class_for_subject("eiffel tower").unwrap();
        let long = class.prompts.iter().find(|p| p.template_id == 1).unwrap();
        let paris = c.vocab.id("paris").unwrap();
        let find = |mask| {
            let all = training_examples(&c, long.split, false, mask).unwrap();
            all.into_iter().find(|e| e.input == long.ids).unwrap()
        };
        // "the eiffel tower is located in" is itself a prompt: 6 tokens
        let masked = find(true);
        assert_eq!(masked.targets[5], None);
        assert_eq!(masked.targets[4], Some(long.ids[5]));
        assert_eq!(masked.targets.last(), Some(&Some(paris)));
        let plain = find(false);
        assert_eq!(plain.targets[5], Some(long.ids[6]));
        assert_eq!(masked.targets.iter().filter(|t| t.is_none()).count(), 1);
        let only = training_examples(&c, long.split, true, true).unwrap();
        let only = only.iter().find(|e| e.input == long.ids).unwrap();
        assert_eq!(only.targets.iter().flatten().count(), 1);
    }

    #[test]
    fn training_loss_gradients_match_finite_differences() {
        let c = small_corpus();
        // Larger init so gradients are well above the comparison floor.
        let mut p = tiny(&c, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for m in p.tensors_mut() {
            for x in m.as_mut_slice() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let examples = training_examples(&c, Split::Train, false, false).unwrap();
        let batch: Vec<&Example> = examples.iter().step_by(31).take(3).collect();
        let report = loss_gradient_check(&p, &batch, 300, 1e-4, 9).unwrap();
        assert!(report.passed, "{report:?}");
    }

    struct Memorizer(HashMap<Vec<TokenId>, TokenId>);

    impl Predictor for Memorizer {
        fn predict_batch(&self, prompts: &[&[TokenId]]) -> Result<Vec<Option<TokenId>>> {
            Ok(prompts.iter().map(|p| self.0.get(*p).copied()).collect())
        }
    }

    #[test]
    fn memorizer_scores_perfectly_on_its_own_split() {
        let c = small_corpus();
        let train = eval_set(&c, Split::Train).unwrap();
        let m = Memorizer(train.iter().map(|p| (p.ids.clone(), p.target)).collect());
        let e = evaluate(&m, &train).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.per_class.len(), 24);
        assert!(e.per_class.values().all(|(c, t)| c == t));
    }

    #[test]
    fn empty_prompt_set_is_an_error() {
        let c = small_corpus();
        assert!(evaluate(&tiny(&c, 0), &[]).is_err());
    }

    #[test]
    fn untrained_model_is_at_chance_on_an_eight_way_task() {
        // Eight tokens, random prompts and targets: expected accuracy 1/8.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (mut correct, mut total) = (0.0, 0.0);
        for seed in 0..300 {
            let p = init_model(ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_mlp: 8,
                vocab_size: 8,
                max_context: 6,
                seed,
            })
            .unwrap();
            let prompts: Vec<EvalPrompt> = (0..8)
                .map(|i| EvalPrompt {
                    class_id: i,
                    ids: (0..rng.random_range(1..6))
                        .map(|_| rng.random_range(0..8))
                        .collect(),
                    target: rng.random_range(0..8),
                })
                .collect();
            let e = evaluate(&p, &prompts).unwrap();
            correct += e.accuracy * 8.0;
            total += 8.0;
        }
        let acc = correct / total;
        // 2400 trials: standard error about 0.0068.
        assert!((acc - 0.125).abs() < 0.03, "{acc}");
    }
}
