//! Causal tracing: corrupt the subject embeddings, restore one clean
//! activation at a time and measure how much of the correct prediction
//! comes back.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{subject_token_span, Corpus, ParaphraseClass, Prompt, TokenId, TokenSpan};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_on_tape, forward_patched, predict_next, ActivationTape, BoundParams,
    Component, Patch, SequenceInput, Site, TransformerParams,
};
use crate::numerics::{softmax, Matrix, Tape, Var};

pub const DEFAULT_NOISE_SCALE: f64 = 10.0;
pub const DEFAULT_NOISE_SAMPLES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Multiple of the token-embedding entry standard deviation.
    pub scale: f64,
    pub seed: u64,
    pub span: TokenSpan,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub noise_scale: f64,
    pub noise_samples: usize,
    pub seed: u64,
    /// Report effects as log-odds differences instead of probabilities.
    pub log_odds: bool,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            noise_scale: DEFAULT_NOISE_SCALE,
            noise_samples: DEFAULT_NOISE_SAMPLES,
            seed: 0,
            log_odds: false,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) || self.noise_samples == 0 {
            return Err(Error::InvalidConfig(format!(
                "trace config needs noise_scale >= 0 and noise_samples >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Seed of the `i`-th corruption sample.
    pub fn sample_seed(&self, i: usize) -> u64 {
        self.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

/// Population standard deviation of all token-embedding entries.
pub fn embedding_std(params: &TransformerParams) -> f64 {
    let x = params.tok_emb.as_slice();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Token plus position embeddings, as the forward pass computes them.
pub fn clean_embeddings(params: &TransformerParams, tokens: &[TokenId]) -> Result<Matrix> {
    let (_, tape) = forward(params, tokens)?;
    Ok(tape.embeddings)
}

/// Clean embeddings with Gaussian noise added on the span positions only.
pub fn corrupt_embeddings(
    params: &TransformerParams,
    tokens: &[TokenId],
    spec: &CorruptionSpec,
) -> Result<Matrix> {
    if spec.span.len == 0 {
        return Err(Error::EmptyInput("corruption span"));
    }
    if spec.span.start + spec.span.len > tokens.len() {
        return Err(Error::OutOfRange {
            what: "corruption span end",
            index: spec.span.start + spec.span.len,
            limit: tokens.len(),
        });
    }
    if !(spec.scale >= 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise scale must be >= 0, got {}",
            spec.scale
        )));
    }
    let mut emb = clean_embeddings(params, tokens)?;
    let std = spec.scale * embedding_std(params);
    if std == 0.0 {
        return Ok(emb);
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for pos in spec.span.positions() {
        for x in emb.row_mut(pos) {
            *x += normal.sample(&mut rng);
        }
    }
    Ok(emb)
}

fn probability(final_logits: &[f64], target: TokenId) -> Result<f64> {
    if target >= final_logits.len() {
        return Err(Error::OutOfRange {
            what: "target token",
            index: target,
            limit: final_logits.len(),
        });
    }
    Ok(softmax(final_logits)?[target])
}

fn log_odds(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// `P(target | corrupted run with the clean activations at `sites` restored)`
/// minus `P(target | corrupted run)`. An empty site list gives 0.
pub fn indirect_effect(
    params: &TransformerParams,
    tokens: &[TokenId],
    target: TokenId,
    sites: &[Site],
    clean_tape: &ActivationTape,
    corrupted: &Matrix,
) -> Result<f64> {
    if clean_tape.tokens != tokens {
        return Err(Error::InvalidConfig(
            "clean tape was recorded from a different prompt".to_owned(),
        ));
    }
    let (base, _) = forward_patched(params, tokens, &[], Some(corrupted))?;
    let patches: Vec<Patch> = sites
        .iter()
        .map(|&site| {
            if site.layer >= clean_tape.layers.len() || site.position >= tokens.len() {
                return Err(Error::OutOfRange {
                    what: "trace site",
                    index: site.layer.max(site.position),
                    limit: clean_tape.layers.len().min(tokens.len()),
                });
            }
            Ok(Patch {
                site,
                value: clean_tape.activation(site).to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let (restored, _) = forward_patched(params, tokens, &patches, Some(corrupted))?;
    let last = tokens.len() - 1;
    Ok(probability(restored.row(last), target)? - probability(base.row(last), target)?)
}

/// One prompt to trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceTarget {
    pub tokens: Vec<String>,
    pub ids: Vec<TokenId>,
    pub subject: String,
    pub span: TokenSpan,
    pub object: String,
    pub target: TokenId,
}

impl TraceTarget {
    pub fn from_prompt(corpus: &Corpus, class: &ParaphraseClass, prompt: &Prompt) -> Result<Self> {
        Ok(Self {
            tokens: prompt.tokens.clone(),
            ids: prompt.ids.clone(),
            subject: class.fact.subject.clone(),
            span: subject_token_span(&prompt.tokens, &class.fact.subject)?,
            object: class.fact.object.clone(),
            target: corpus.vocab.id(&class.fact.object)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub site: Site,
    pub restored_p: f64,
    pub ie: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub prompt: TraceTarget,
    pub n_layers: usize,
    pub clean_p: f64,
    pub corrupted_p: f64,
    /// Ordered by layer, then position, then component.
    pub cells: Vec<TraceCell>,
    pub log_odds: bool,
}

impl TraceGrid {
    fn index(&self, site: Site) -> usize {
        let comp = Component::ALL
            .iter()
            .position(|&c| c == site.component)
            .expect("known component");
        (site.layer * self.prompt.ids.len() + site.position) * Component::ALL.len() + comp
    }

    pub fn cell(&self, site: Site) -> &TraceCell {
        &self.cells[self.index(site)]
    }

    pub fn total_effect(&self) -> f64 {
        self.clean_p - self.corrupted_p
    }

    pub fn component_cells(&self, component: Component) -> impl Iterator<Item = &TraceCell> {
        self.cells
            .iter()
            .filter(move |c| c.site.component == component)
    }

    /// Highest-IE cell of one component over all positions; ties go to
    /// the lower layer, then the earlier position.
    pub fn max_cell(&self, component: Component) -> Option<&TraceCell> {
        let mut best: Option<&TraceCell> = None;
        for c in self.component_cells(component) {
            if best.is_none_or(|b| c.ie > b.ie) {
                best = Some(c);
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,position,component,restored_p,ie\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.9},{:.9}",
                c.site.layer, c.site.position, c.site.component, c.restored_p, c.ie
            );
        }
        out
    }

    /// Heatmap with one panel per component (layers down, positions across).
    pub fn to_svg(&self) -> String {
        let (cell_w, cell_h, label_w, top) = (46.0, 22.0, 70.0, 40.0);
        let n_pos = self.prompt.ids.len();
        let panel_h = top + cell_h * self.n_layers as f64 + 90.0;
        let width = label_w + cell_w * n_pos as f64 + 20.0;
        let height = panel_h * Component::ALL.len() as f64 + 50.0;
        let lo = self
            .cells
            .iter()
            .map(|c| c.ie)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .cells
            .iter()
            .map(|c| c.ie)
            .fold(f64::NEG_INFINITY, f64::max);
        let color = |v: f64| {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let g = (255.0 * (1.0 - t)).round() as u8;
            format!("rgb(255,{g},{g})")
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
        );
        for (pi, comp) in Component::ALL.iter().enumerate() {
            let y0 = pi as f64 * panel_h;
            let _ = writeln!(
                s,
                r#"<text x="4" y="{:.1}" font-size="13">{comp}</text>"#,
                y0 + 16.0
            );
            for layer in 0..self.n_layers {
                let y = y0 + top + cell_h * layer as f64;
                let _ = writeln!(s, r#"<text x="4" y="{:.1}">layer {layer}</text>"#, y + 15.0);
                for pos in 0..n_pos {
                    let c = self.cell(Site {
                        layer,
                        position: pos,
                        component: *comp,
                    });
                    let x = label_w + cell_w * pos as f64;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{cell_w}" height="{cell_h}" fill="{}" stroke="gray"><title>{:.4}</title></rect>"#,
                        color(c.ie),
                        c.ie
                    );
                }
            }
            let y = y0 + top + cell_h * self.n_layers as f64 + 14.0;
            for (pos, tok) in self.prompt.tokens.iter().enumerate() {
                let x = label_w + cell_w * pos as f64 + 2.0;
                let mark = if self.prompt.span.contains(pos) {
                    "*"
                } else {
                    ""
                };
                let _ = writeln!(
                    s,
                    r#"<text x="{x:.1}" y="{y:.1}">{}{mark}</text>"#,
                    xml_escape(tok)
                );
            }
        }
        let y = height - 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{label_w}" y="{:.1}" width="20" height="12" fill="{}"/><text x="{:.1}" y="{y:.1}">{lo:.2}</text>"#,
            y - 10.0,
            color(lo),
            label_w + 24.0
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="20" height="12" fill="{}"/><text x="{:.1}" y="{y:.1}">{hi:.2}</text>"#,
            label_w + 100.0,
            y - 10.0,
            color(hi),
            label_w + 124.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, csv: &Path, svg: &Path) -> Result<()> {
        crate::corpus::write_file(csv, self.to_csv().as_bytes())?;
        crate::corpus::write_file(svg, self.to_svg().as_bytes())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Traces every (layer, position, component) site, averaging over the
/// configured noise samples. No precondition on what the model predicts.
pub fn trace_grid(
    params: &TransformerParams,
    prompt: &TraceTarget,
    config: &TraceConfig,
) -> Result<TraceGrid> {
    config.validate()?;
    let ids = &prompt.ids;
    let (clean_logits, clean_tape) = forward(params, ids)?;
    let last = ids.len() - 1;
    let clean_p = probability(clean_logits.row(last), prompt.target)?;
    let n_layers = params.config.n_layers;
    let sites: Vec<Site> = (0..n_layers)
        .flat_map(|layer| {
            (0..ids.len()).flat_map(move |position| {
                Component::ALL.into_iter().map(move |component| Site {
                    layer,
                    position,
                    component,
                })
            })
        })
        .collect();

    let mut restored_sum = vec![0.0; sites.len()];
    let mut corrupted_sum = 0.0;
    for sample in 0..config.noise_samples {
        let corrupted = corrupt_embeddings(
            params,
            ids,
            &CorruptionSpec {
                scale: config.noise_scale,
                seed: config.sample_seed(sample),
                span: prompt.span,
            },
        )?;
        let probs =
            restored_probabilities(params, ids, prompt.target, &sites, &clean_tape, &corrupted)?;
        corrupted_sum += probs[0];
        for (acc, p) in restored_sum.iter_mut().zip(&probs[1..]) {
            *acc += p;
        }
    }
    let n = config.noise_samples as f64;
    let corrupted_p = corrupted_sum / n;
    let metric = |p: f64| if config.log_odds { log_odds(p) } else { p };
    let cells = sites
        .iter()
        .zip(restored_sum)
        .map(|(&site, sum)| {
            let restored_p = sum / n;
            TraceCell {
                site,
                restored_p,
                ie: metric(restored_p) - metric(corrupted_p),
            }
        })
        .collect();
    Ok(TraceGrid {
        prompt: prompt.clone(),
        n_layers,
        clean_p,
        corrupted_p,
        cells,
        log_odds: config.log_odds,
    })
}

/// Corrupted-run probability followed by one restored probability per site,
/// all computed in a single packed pass.
fn restored_probabilities(
    params: &TransformerParams,
    ids: &[TokenId],
    target: TokenId,
    sites: &[Site],
    clean_tape: &ActivationTape,
    corrupted: &Matrix,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let mut batch = vec![SequenceInput {
        tokens: ids,
        embedding_override: Some(corrupted),
        patches: Vec::new(),
    }];
    for &site in sites {
        let v: Var = tape.constant(Matrix::row_vector(clean_tape.activation(site)));
        batch.push(SequenceInput {
            tokens: ids,
            embedding_override: Some(corrupted),
            patches: vec![(site, v)],
        });
    }
    let vars = forward_on_tape(&mut tape, &bound, &batch)?;
    let logits = tape.value(vars.logits);
    vars.segments
        .iter()
        .map(|s| probability(logits.row(s.start + s.len - 1), target))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceOutcome {
    Traced(Box<TraceGrid>),
    /// The clean model does not predict the object, so there is nothing to trace.
    Skipped {
        predicted: TokenId,
        target: TokenId,
    },
}

/// Like [`trace_grid`], but only for prompts the model already answers correctly.
pub fn causal_trace(
    params: &TransformerParams,
    prompt: &TraceTarget,
    config: &TraceConfig,
) -> Result<TraceOutcome> {
    let (predicted, _) = predict_next(params, &prompt.ids)?;
    if predicted != prompt.target {
        return Ok(TraceOutcome::Skipped {
            predicted,
            target: prompt.target,
        });
    }
    Ok(TraceOutcome::Traced(Box::new(trace_grid(
        params, prompt, config,
    )?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactSite {
    pub layer: usize,
    pub position: usize,
    pub component: Component,
    pub ie: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Location {
    Found(FactSite),
    /// No mlp_out site on the subject has a positive effect.
    NoSignal,
}

/// Highest-IE `mlp_out` site on the subject span; ties go to the lower
/// layer, then the earlier position.
pub fn locate_fact(grid: &TraceGrid) -> Location {
    let mut best: Option<&TraceCell> = None;
    for c in grid.component_cells(Component::MlpOut) {
        if grid.prompt.span.contains(c.site.position)
            && c.ie > 0.0
            && best.is_none_or(|b| c.ie > b.ie)
        {
            best = Some(c);
        }
    }
    match best {
        Some(c) => Location::Found(FactSite {
            layer: c.site.layer,
            position: c.site.position,
            component: c.site.component,
            ie: c.ie,
        }),
        None => Location::NoSignal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn model(seed: u64) -> TransformerParams {
        init_model(ModelConfig {
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 12,
            max_context: 8,
            seed,
        })
        .unwrap()
    }

    fn prompt() -> TraceTarget {
        TraceTarget {
            tokens: ["the", "big", "ben", "is", "in"].map(String::from).to_vec(),
            ids: vec![3, 7, 5, 2, 9],
            subject: "big ben".into(),
            span: TokenSpan { start: 1, len: 2 },
            object: "london".into(),
            target: 4,
        }
    }

    fn spec(scale: f64, seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            scale,
            seed,
            span: prompt().span,
        }
    }

    #[test]
    fn zero_noise_equals_clean_embeddings() {
        let p = model(0);
        let ids = prompt().ids;
        assert_eq!(
            corrupt_embeddings(&p, &ids, &spec(0.0, 1)).unwrap(),
            clean_embeddings(&p, &ids).unwrap()
        );
    }

    #[test]
    fn noise_is_seeded_and_confined_to_span() {
        let p = model(0);
        let ids = prompt().ids;
        let a = corrupt_embeddings(&p, &ids, &spec(3.0, 5)).unwrap();
        let b = corrupt_embeddings(&p, &ids, &spec(3.0, 5)).unwrap();
        assert_eq!(a, b);
        let clean = clean_embeddings(&p, &ids).unwrap();
        for pos in 0..ids.len() {
            assert_eq!(a.row(pos) == clean.row(pos), !(1..3).contains(&pos));
        }
        assert_ne!(a, corrupt_embeddings(&p, &ids, &spec(3.0, 6)).unwrap());
    }

    #[test]
    fn corruption_errors() {
        let p = model(0);
        let ids = prompt().ids;
        let mut s = spec(1.0, 0);
        s.span.len = 0;
        assert!(corrupt_embeddings(&p, &ids, &s).is_err());
        s.span = TokenSpan { start: 4, len: 2 };
        assert!(corrupt_embeddings(&p, &ids, &s).is_err());
    }

    #[test]
    fn null_restoration_has_zero_effect() {
        let p = model(1);
        let ids = prompt().ids;
        let (_, clean) = forward(&p, &ids).unwrap();
        let noisy = corrupt_embeddings(&p, &ids, &spec(3.0, 2)).unwrap();
        assert_eq!(
            indirect_effect(&p, &ids, 4, &[], &clean, &noisy).unwrap(),
            0.0
        );
    }

    #[test]
    fn restoring_everything_recovers_the_total_effect() {
        let p = model(1);
        let ids = prompt().ids;
        let (logits, clean) = forward(&p, &ids).unwrap();
        let noisy = corrupt_embeddings(&p, &ids, &spec(3.0, 2)).unwrap();
        let (corrupted, _) = forward_patched(&p, &ids, &[], Some(&noisy)).unwrap();
        let total =
            probability(logits.row(4), 4).unwrap() - probability(corrupted.row(4), 4).unwrap();
        let all: Vec<Site> = clean.all_patches().into_iter().map(|p| p.site).collect();
        let ie = indirect_effect(&p, &ids, 4, &all, &clean, &noisy).unwrap();
        assert!((ie - total).abs() < 1e-6);
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let p = model(1);
        let (_, other) = forward(&p, &[1, 2, 3, 4, 5]).unwrap();
        let noisy = corrupt_embeddings(&p, &prompt().ids, &spec(1.0, 0)).unwrap();
        assert!(indirect_effect(&p, &prompt().ids, 4, &[], &other, &noisy).is_err());
    }

    #[test]
    fn zero_noise_grid_is_exactly_zero() {
        let p = model(2);
        let cfg = TraceConfig {
            noise_scale: 0.0,
            noise_samples: 2,
            ..TraceConfig::default()
        };
        let g = trace_grid(&p, &prompt(), &cfg).unwrap();
        assert_eq!(g.cells.len(), 3 * 5 * 3);
        assert!(g.cells.iter().all(|c| c.ie.abs() <= 1e-9));
        assert_eq!(g.clean_p, g.corrupted_p);
    }

    #[test]
    fn packed_grid_matches_single_site_calls() {
        let p = model(3);
        let target = prompt();
        let cfg = TraceConfig {
            noise_samples: 1,
            ..TraceConfig::default()
        };
        let g = trace_grid(&p, &target, &cfg).unwrap();
        let (_, clean) = forward(&p, &target.ids).unwrap();
        let noisy = corrupt_embeddings(
            &p,
            &target.ids,
            &CorruptionSpec {
                scale: cfg.noise_scale,
                seed: cfg.sample_seed(0),
                span: target.span,
            },
        )
        .unwrap();
        for c in g.cells.iter().step_by(7) {
            let ie =
                indirect_effect(&p, &target.ids, target.target, &[c.site], &clean, &noisy).unwrap();
            assert_eq!(ie, c.ie);
        }
    }

    #[test]
    fn untrained_model_is_skipped() {
        let p = model(0);
        let mut t = prompt();
        let (pred, _) = predict_next(&p, &t.ids).unwrap();
        t.target = (pred + 1) % 12;
        assert!(matches!(
            causal_trace(&p, &t, &TraceConfig::default()).unwrap(),
            TraceOutcome::Skipped { .. }
        ));
        t.target = pred;
        assert!(matches!(
            causal_trace(&p, &t, &TraceConfig::default()).unwrap(),
            TraceOutcome::Traced(_)
        ));
    }

    fn synthetic_grid(values: &[(usize, usize, f64)]) -> TraceGrid {
        let t = prompt();
        let mut cells = Vec::new();
        for layer in 0..4 {
            for position in 0..t.ids.len() {
                for component in Component::ALL {
                    let ie = values
                        .iter()
                        .find(|v| v.0 == layer && v.1 == position && component == Component::MlpOut)
                        .map_or(0.0, |v| v.2);
                    cells.push(TraceCell {
                        site: Site {
                            layer,
                            position,
                            component,
                        },
                        restored_p: ie,
                        ie,
                    });
                }
            }
        }
        TraceGrid {
            prompt: t,
            n_layers: 4,
            clean_p: 1.0,
            corrupted_p: 0.0,
            cells,
            log_odds: false,
        }
    }

    #[test]
    fn locate_single_positive_entry() {
        let g = synthetic_grid(&[(2, 2, 0.4)]);
        assert_eq!(
            locate_fact(&g),
            Location::Found(FactSite {
                layer: 2,
                position: 2,
                component: Component::MlpOut,
                ie: 0.4
            })
        );
    }

    #[test]
    fn locate_ties_prefer_lower_layer() {
        let g = synthetic_grid(&[(2, 1, 0.4), (1, 2, 0.4)]);
        let Location::Found(site) = locate_fact(&g) else {
            panic!("expected a site")
        };
        assert_eq!((site.layer, site.position), (1, 2));
    }

    #[test]
    fn locate_ignores_positions_outside_the_subject() {
        assert_eq!(
            locate_fact(&synthetic_grid(&[(1, 4, 0.9)])),
            Location::NoSignal
        );
        assert_eq!(locate_fact(&synthetic_grid(&[])), Location::NoSignal);
    }

    #[test]
    fn csv_and_svg_exports() {
        let g = synthetic_grid(&[(1, 2, 0.5)]);
        let csv = g.to_csv();
        assert!(csv.starts_with("layer,position,component,restored_p,ie\n"));
        assert_eq!(csv.lines().count(), 1 + 4 * 5 * 3);
        assert!(csv.contains("1,2,mlp_out,0.500000000,0.500000000"));
        let svg = g.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">0.00<") && svg.contains(">0.50<"));
        assert_eq!(svg.matches("<rect").count(), 4 * 5 * 3 + 2);
    }

    #[test]
    fn grid_is_invariant_to_renumbering_unused_tokens() {
        let p = model(4);
        let t = prompt();
        let used = [3, 7, 5, 2, 9, 4];
        let free: Vec<usize> = (0..12).filter(|i| !used.contains(i)).collect();
        // swap the first two unused ids in both embedding and unembedding
        let (a, b) = (free[0], free[1]);
        let mut q = p.clone();
        for j in 0..8 {
            let (x, y) = (p.tok_emb.get(a, j), p.tok_emb.get(b, j));
            q.tok_emb.set(a, j, y);
            q.tok_emb.set(b, j, x);
            let (x, y) = (p.unembed.get(j, a), p.unembed.get(j, b));
            q.unembed.set(j, a, y);
            q.unembed.set(j, b, x);
        }
        let cfg = TraceConfig::default();
        let g1 = trace_grid(&p, &t, &cfg).unwrap();
        let g2 = trace_grid(&q, &t, &cfg).unwrap();
        for (x, y) in g1.cells.iter().zip(&g2.cells) {
            assert!((x.ie - y.ie).abs() < 1e-9);
            assert!((x.restored_p - y.restored_p).abs() < 1e-9);
        }
    }

    #[test]
    fn more_noise_samples_reduce_estimate_variance() {
        let p = model(5);
        let t = prompt();
        let spread = |samples: usize| {
            let runs: Vec<TraceGrid> = (0..20)
                .map(|r| {
                    let cfg = TraceConfig {
                        noise_samples: samples,
                        seed: 1000 + r,
                        ..TraceConfig::default()
                    };
                    trace_grid(&p, &t, &cfg).unwrap()
                })
                .collect();
            let n = runs.len() as f64;
            (0..runs[0].cells.len())
                .map(|i| {
                    let mean = runs.iter().map(|g| g.cells[i].ie).sum::<f64>() / n;
                    runs.iter()
                        .map(|g| (g.cells[i].ie - mean).powi(2))
                        .sum::<f64>()
                        / n
                })
                .sum::<f64>()
        };
        let (one, five) = (spread(1), spread(5));
        assert!(five < one, "{five} !< {one}");
    }
}
