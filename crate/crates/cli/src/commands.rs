use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tacit_core::audit::run_audit;
use tacit_core::corpus::{Corpus, ParaphraseClass, Prompt, Split};
use tacit_core::editing::{apply_edit_with, key_covariance, EditRequest, KeyCovariance};
use tacit_core::model::{
    fnv1a64, init_model, Checkpoint, Component, TrainingMeta, TransformerParams,
};
use tacit_core::tracing::{
    causal_trace, locate_fact, Location, TraceGrid, TraceOutcome, TraceTarget,
};
use tacit_core::training::{eval_set, evaluate, train};

use crate::config::{EditSpec, RunConfig};
use crate::CliError;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_FILE: &str = "train.csv";
pub const TRACE_DIR: &str = "traces";
pub const EDIT_DIR: &str = "edits";
pub const AUDIT_FILE: &str = "audit.json";

/// Files written by one invocation, removed again if it fails.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            let mut missing = Vec::new();
            let mut d = Some(dir);
            while let Some(p) = d.filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
                missing.push(p.to_path_buf());
                d = p.parent();
            }
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            self.dirs.extend(missing.into_iter().rev());
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
        self.files.push(path.to_path_buf());
        std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
    }

    pub fn rollback(self) {
        for f in &self.files {
            let _ = std::fs::remove_file(f);
            let _ = std::fs::remove_file(f.with_extension("partial"));
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Precondition(format!(
            "missing required file {}",
            path.display()
        )))
    }
}

pub fn slug(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn load_corpus(out: &Path) -> Result<Corpus, CliError> {
    let (c, v) = (out.join(CORPUS_FILE), out.join(VOCAB_FILE));
    require(&c)?;
    require(&v)?;
    Ok(Corpus::read_files(&c, &v)?)
}

fn load_model(out: &Path) -> Result<Checkpoint, CliError> {
    let p = out.join(MODEL_FILE);
    require(&p)?;
    Ok(Checkpoint::load(&p)?)
}

pub fn cmd_gen(cfg: &RunConfig, outs: &mut Outputs) -> Result<(), CliError> {
    let corpus = Corpus::generate_split(&cfg.corpus, cfg.seeds().corpus)?;
    outs.write(
        &cfg.out_dir.join(CORPUS_FILE),
        corpus.to_jsonl()?.as_bytes(),
    )?;
    outs.write(
        &cfg.out_dir.join(VOCAB_FILE),
        corpus.vocab_json()?.as_bytes(),
    )?;
    eprintln!(
        "gen: {} prompts in {} classes",
        corpus.prompt_count(),
        corpus.classes.len()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, outs: &mut Outputs) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.out_dir)?;
    let resolved = cfg.resolved();
    let init = init_model(cfg.model_config(corpus.vocab.len(), corpus.longest_prompt() + 1))?;
    let (params, record) = train(&init, &corpus, &resolved.train)?;
    let heldout = evaluate(&params, &eval_set(&corpus, Split::Heldout)?)?;
    let cp = Checkpoint {
        params,
        meta: TrainingMeta {
            steps: resolved.train.steps as u64,
            final_loss: record.final_loss,
            corpus_seed: cfg.seeds().corpus,
        },
    };
    outs.write(&cfg.out_dir.join(MODEL_FILE), &cp.to_bytes())?;
    outs.write(&cfg.out_dir.join(TRAIN_FILE), record.to_csv().as_bytes())?;
    eprintln!(
        "train: {} steps, final loss {:.4}, held-out accuracy {:.3}",
        resolved.train.steps, record.final_loss, heldout.accuracy
    );
    Ok(())
}

fn trace_prompt(class: &ParaphraseClass) -> Result<&Prompt, CliError> {
    class
        .split_prompts(Split::Train)
        .next()
        .or_else(|| class.prompts.first())
        .ok_or_else(|| CliError::Precondition(format!("no prompts for {:?}", class.fact.subject)))
}

fn trace_class(
    params: &TransformerParams,
    corpus: &Corpus,
    class: &ParaphraseClass,
    cfg: &RunConfig,
) -> Result<(TraceTarget, TraceOutcome), CliError> {
    let target = TraceTarget::from_prompt(corpus, class, trace_prompt(class)?)?;
    let outcome = causal_trace(params, &target, &cfg.trace_config())?;
    Ok((target, outcome))
}

fn class_for<'a>(corpus: &'a Corpus, subject: &str) -> Result<&'a ParaphraseClass, CliError> {
    corpus
        .class_for_subject(subject)
        .ok_or_else(|| CliError::Precondition(format!("unknown subject {subject:?}")))
}

pub const TRACE_SUMMARY_HEADER: &str = "subject,status,clean_p,corrupted_p,max_mlp_layer,max_mlp_position,max_mlp_in_span,located_layer,located_position,located_ie,edit_layer,edit_subject_token";

/// Layer and subject-token offset to edit: the located site, else the last
/// subject token at the fallback layer.
fn edit_site(
    grid: Option<&TraceGrid>,
    target: &TraceTarget,
    fallback_layer: usize,
) -> (usize, Option<usize>) {
    match grid.map(locate_fact) {
        Some(Location::Found(s)) => (s.layer, Some(s.position - target.span.start)),
        _ => (fallback_layer, None),
    }
}

fn offset_field(o: Option<usize>) -> String {
    o.map(|o| o.to_string())
        .unwrap_or_else(|| "last".to_owned())
}

pub fn cmd_trace(cfg: &RunConfig, facts: &[String], outs: &mut Outputs) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.out_dir)?;
    let params = load_model(&cfg.out_dir)?.params;
    let classes: Vec<&ParaphraseClass> = if facts.is_empty() {
        corpus.classes.iter().collect()
    } else {
        facts
            .iter()
            .map(|f| class_for(&corpus, f))
            .collect::<Result<_, _>>()?
    };
    let dir = cfg.out_dir.join(TRACE_DIR);
    let mut summary = String::from(TRACE_SUMMARY_HEADER);
    summary.push('\n');
    let (mut traced, mut skipped) = (0, 0);
    for class in classes {
        let subject = &class.fact.subject;
        let (target, outcome) = trace_class(&params, &corpus, class, cfg)?;
        let grid = match outcome {
            TraceOutcome::Traced(g) => g,
            TraceOutcome::Skipped { .. } => {
                skipped += 1;
                let _ = writeln!(
                    summary,
                    "{subject},skipped,,,,,,,,,{},last",
                    cfg.edit.fallback_layer
                );
                continue;
            }
        };
        traced += 1;
        let name = slug(subject);
        outs.write(&dir.join(format!("{name}.csv")), grid.to_csv().as_bytes())?;
        outs.write(&dir.join(format!("{name}.svg")), grid.to_svg().as_bytes())?;
        let max = grid
            .max_cell(Component::MlpOut)
            .expect("grid has mlp cells");
        let (edit_layer, edit_token) = edit_site(Some(&grid), &target, cfg.edit.fallback_layer);
        let located = match locate_fact(&grid) {
            Location::Found(s) => format!("{},{},{:.9}", s.layer, s.position, s.ie),
            Location::NoSignal => ",,".to_owned(),
        };
        let _ = writeln!(
            summary,
            "{subject},traced,{:.9},{:.9},{},{},{},{located},{edit_layer},{}",
            grid.clean_p,
            grid.corrupted_p,
            max.site.layer,
            max.site.position,
            target.span.contains(max.site.position),
            offset_field(edit_token)
        );
    }
    outs.write(&dir.join("summary.csv"), summary.as_bytes())?;
    eprintln!("trace: {traced} traced, {skipped} skipped");
    Ok(())
}

/// Explicit requests, or the first `count` facts each moved `object_offset`
/// objects along.
fn edit_specs(cfg: &RunConfig, corpus: &Corpus) -> Vec<EditSpec> {
    if !cfg.edit.requests.is_empty() {
        return cfg.edit.requests.clone();
    }
    let objects = corpus.objects();
    corpus
        .classes
        .iter()
        .take(cfg.edit.count)
        .map(|c| {
            let i = objects
                .iter()
                .position(|o| *o == c.fact.object)
                .unwrap_or(0);
            EditSpec {
                subject: c.fact.subject.clone(),
                new_object: objects[(i + cfg.edit.object_offset) % objects.len()].to_owned(),
                layer: None,
                subject_token: None,
            }
        })
        .collect()
}

fn resolve(
    cfg: &RunConfig,
    corpus: &Corpus,
    params: &TransformerParams,
    specs: &[EditSpec],
) -> Result<Vec<EditRequest>, CliError> {
    specs
        .iter()
        .map(|s| {
            let class = class_for(corpus, &s.subject)?;
            let (layer, subject_token) = match s.layer {
                Some(l) => (l, s.subject_token),
                None => {
                    let (target, outcome) = trace_class(params, corpus, class, cfg)?;
                    let grid = match &outcome {
                        TraceOutcome::Traced(g) => Some(g.as_ref()),
                        TraceOutcome::Skipped { .. } => None,
                    };
                    let (l, t) = edit_site(grid, &target, cfg.edit.fallback_layer);
                    (l, s.subject_token.or(t))
                }
            };
            if layer >= params.config.n_layers {
                return Err(CliError::Precondition(format!(
                    "edit layer {layer} out of range for {} layers",
                    params.config.n_layers
                )));
            }
            corpus.vocab.id(&s.new_object).map_err(|_| {
                CliError::Precondition(format!("unknown object {:?}", s.new_object))
            })?;
            let mut req = EditRequest::for_subject(corpus, &s.subject, &s.new_object, layer)?;
            req.subject_token = subject_token;
            Ok(req)
        })
        .collect()
}

pub fn cmd_edit(
    cfg: &RunConfig,
    fact: Option<&str>,
    new_object: Option<&str>,
    outs: &mut Outputs,
) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.out_dir)?;
    let cp = load_model(&cfg.out_dir)?;
    let params = &cp.params;
    let specs = match (fact, new_object) {
        (Some(f), Some(o)) => vec![EditSpec {
            subject: f.to_owned(),
            new_object: o.to_owned(),
            layer: None,
            subject_token: None,
        }],
        (None, None) => edit_specs(cfg, &corpus),
        _ => {
            return Err(CliError::Precondition(
                "--fact and --new-object go together".into(),
            ))
        }
    };
    let requests = resolve(cfg, &corpus, params, &specs)?;
    let mut covs: BTreeMap<usize, KeyCovariance> = BTreeMap::new();
    let dir = cfg.out_dir.join(EDIT_DIR);
    for req in &requests {
        let cov = match covs.entry(req.layer) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(key_covariance(params, &corpus, req.layer)?),
        };
        let (edited, mut result) = apply_edit_with(params, &corpus, req, &cfg.edit.value, cov)?;
        let name = format!("{}__{}", slug(&req.fact.subject), slug(&req.new_object));
        let ckpt = Path::new(EDIT_DIR).join(format!("{name}.ckpt"));
        let out = Checkpoint {
            params: edited,
            meta: cp.meta,
        };
        outs.write(&cfg.out_dir.join(&ckpt), &out.to_bytes())?;
        result.checkpoint = Some(ckpt);
        outs.write(
            &dir.join(format!("{name}.json")),
            result.to_json()?.as_bytes(),
        )?;
        eprintln!(
            "edit: {} -> {} at layer {}: P(new) {:.3} -> {:.3}{}",
            req.fact.subject,
            req.new_object,
            req.layer,
            result.pre_new_p,
            result.post_new_p,
            if result.weak { " (weak)" } else { "" }
        );
    }
    Ok(())
}

pub fn cmd_audit(cfg: &RunConfig, outs: &mut Outputs) -> Result<(), CliError> {
    let corpus = load_corpus(&cfg.out_dir)?;
    let cp = load_model(&cfg.out_dir)?;
    let requests = resolve(cfg, &corpus, &cp.params, &edit_specs(cfg, &corpus))?;
    let seeds = cfg.seeds();
    let read = |name: &str| {
        std::fs::read(cfg.out_dir.join(name)).map_err(|e| io_error(&cfg.out_dir.join(name), e))
    };
    let identifiers = BTreeMap::from([
        ("master_seed".to_owned(), cfg.master_seed.to_string()),
        ("corpus_seed".to_owned(), seeds.corpus.to_string()),
        ("init_seed".to_owned(), seeds.init.to_string()),
        ("train_seed".to_owned(), seeds.train.to_string()),
        ("trace_seed".to_owned(), seeds.trace.to_string()),
        (
            "corpus_fnv1a64".to_owned(),
            format!("{:016x}", fnv1a64(&read(CORPUS_FILE)?)),
        ),
        (
            "model_fnv1a64".to_owned(),
            format!("{:016x}", fnv1a64(&read(MODEL_FILE)?)),
        ),
    ]);
    let mut embedded =
        serde_json::to_value(cfg.resolved()).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(map) = embedded.as_object_mut() {
        // where artifacts go has no bearing on the results
        map.remove("out_dir");
    }
    let report = run_audit(
        &cp.params,
        &corpus,
        &requests,
        &cfg.edit.value,
        &cfg.audit,
        identifiers,
        embedded,
    )?;
    outs.write(&cfg.out_dir.join(AUDIT_FILE), report.to_json()?.as_bytes())?;
    eprintln!(
        "audit: margin {:.3}, generalization {:.3}, specificity {:.3}, baseline {}, verdict {}",
        report.cluster.margin,
        report.transformer.mean_generalization,
        report.transformer.mean_specificity,
        report.baseline.verdict.as_str(),
        report.verdict.as_str()
    );
    Ok(())
}

pub fn cmd_all(cfg: &RunConfig, outs: &mut Outputs) -> Result<(), CliError> {
    cmd_gen(cfg, outs)?;
    cmd_train(cfg, outs)?;
    cmd_trace(cfg, &[], outs)?;
    cmd_edit(cfg, None, None, outs)?;
    cmd_audit(cfg, outs)
}
