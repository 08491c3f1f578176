//! Token attribution and root-cause selection.
//!
//! The explained scalar is always one class logit. Attribution answers
//! "how much did each token contribute to that logit, relative to a
//! function with no code?" — the baseline is the all-PAD window. Token
//! scores aggregate into per-line scores, and the root cause is the
//! highest-scoring line strictly before the predicted vulnerable range.
//!
//! Two attribution modes:
//!
//! * **Fast marginal** (default): rescaled-gradient base scores — the
//!   logit gradient at the input embeddings times (embedding − PAD
//!   baseline) per token — then, for the top-k tokens by magnitude, the
//!   base score is replaced by that token's exact singleton-masking
//!   marginal (full logit minus the logit with the token masked).
//! * **Exact Shapley**: full enumeration over subsets of the real tokens,
//!   feasible for small windows; used as the ground truth the fast path is
//!   judged against.
//!
//! Masking a token everywhere means: its embedding row becomes the PAD
//! baseline, its adjacency row/column zeroes out, attention stops keying
//! on it, and the localization readout skips it — while the mean pool
//! keeps its denominator, so masked and unmasked passes stay comparable.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::CodeFunction;
use crate::error::{Error, Result};
use crate::model::{Diagnosis, ForwardOpts, PreparedFunction, VulnModel};
use crate::tokenizer::{TokenSequence, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    FastMarginal,
    ExactShapley,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub mode: AttributionMode,
    /// Fast path: how many top-magnitude tokens get exact singleton
    /// marginals in place of their gradient base scores.
    pub top_k: usize,
    /// Exact mode refuses sequences with more real tokens than this —
    /// enumeration is 2^n forward passes.
    pub exact_limit: usize,
}

impl Default for AttributionConfig {
    fn default() -> AttributionConfig {
        AttributionConfig {
            mode: AttributionMode::FastMarginal,
            top_k: 8,
            exact_limit: 12,
        }
    }
}

/// Per-token contributions φ to one class logit, with their per-line sums.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// One score per window position; PAD positions are exactly 0.
    pub token_scores: Vec<f64>,
    /// Sum of member-token scores per source line; lines without tokens
    /// are absent.
    pub line_scores: BTreeMap<u32, f64>,
    /// The explained logit on the all-PAD baseline window.
    pub baseline_pred: f64,
    /// The explained logit on the intact window.
    pub full_pred: f64,
}

/// The line a developer should look at first: the highest-attribution
/// line strictly before the predicted vulnerable range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCause {
    pub line: u32,
    pub score: f64,
    pub snippet: String,
}

/// Attributes the `target_class` logit over the tokens of a prepared
/// function. `target_class` indexes the class head; class 0 is refused —
/// explaining the absence of a vulnerability yields no root cause.
pub fn attribute_tokens(
    model: &VulnModel,
    prepared: &PreparedFunction,
    target_class: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    let n_classes = crate::corpus::CWE_CLASSES.len();
    if target_class >= n_classes {
        return Err(Error::invalid(format!(
            "target class {target_class} out of range for {n_classes} logits"
        )));
    }
    if target_class == 0 {
        return Err(Error::invalid(
            "no root cause for non-vulnerable prediction",
        ));
    }
    let seq = &prepared.seq;
    let n = seq.max_len();
    let n_real = seq.n_real;

    let logit_with = |mask: Option<&[bool]>| -> Result<f64> {
        let opts = ForwardOpts {
            mask,
            embeddings_as_leaf: false,
        };
        let fg = model.build_forward(prepared, &opts)?;
        Ok(fg.graph.value(fg.logits)[[0, target_class]])
    };

    let full_pred = logit_with(None)?;
    let mut all_masked = vec![false; n];
    for slot in all_masked.iter_mut().take(n_real) {
        *slot = true;
    }
    let baseline_pred = logit_with(Some(&all_masked))?;

    let mut token_scores = vec![0.0; n];
    match cfg.mode {
        AttributionMode::ExactShapley => {
            if n_real > cfg.exact_limit {
                return Err(Error::invalid(format!(
                    "exact attribution enumerates 2^{n_real} subsets; limit is {}",
                    cfg.exact_limit
                )));
            }
            let phi = exact_shapley(n_real, |present: u32| {
                let mut mask = vec![false; n];
                for (j, slot) in mask.iter_mut().enumerate().take(n_real) {
                    *slot = present & (1 << j) == 0;
                }
                logit_with(Some(&mask))
            })?;
            token_scores[..n_real].copy_from_slice(&phi);
        }
        AttributionMode::FastMarginal => {
            let opts = ForwardOpts {
                mask: None,
                embeddings_as_leaf: true,
            };
            let mut fg = model.build_forward(prepared, &opts)?;
            let mut seed = Array2::zeros((1, n_classes));
            seed[[0, target_class]] = 1.0;
            fg.graph.backward(&[(fg.logits, seed)]);
            let grad = fg
                .graph
                .grad(fg.h0)
                .cloned()
                .unwrap_or_else(|| Array2::zeros((n, model.config().encoder.embed_dim)));
            let h0 = fg.graph.value(fg.h0);
            let baseline = baseline_rows(model, n);

            for j in 0..n_real {
                let mut acc = 0.0;
                for c in 0..h0.ncols() {
                    acc += grad[[j, c]] * (h0[[j, c]] - baseline[[j, c]]);
                }
                token_scores[j] = acc;
            }

            // Replace the k largest base scores with exact singleton
            // marginals: φ_j = f(x) − f(x with j masked).
            let mut order: Vec<usize> = (0..n_real).collect();
            order.sort_by(|&a, &b| {
                token_scores[b]
                    .abs()
                    .partial_cmp(&token_scores[a].abs())
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            for &j in order.iter().take(cfg.top_k) {
                let mut mask = vec![false; n];
                mask[j] = true;
                token_scores[j] = full_pred - logit_with(Some(&mask))?;
            }
        }
    }

    let line_scores = aggregate_lines(&token_scores, seq);
    Ok(AttributionMap {
        token_scores,
        line_scores,
        baseline_pred,
        full_pred,
    })
}

/// The embedding rows a masked position falls back to.
fn baseline_rows(model: &VulnModel, n: usize) -> Array2<f64> {
    let d = model.config().encoder.embed_dim;
    match model.param("tok_emb") {
        Some(table) => {
            let pad = table.row(PAD_ID as usize);
            let mut b = Array2::zeros((n, d));
            for mut row in b.rows_mut() {
                row.assign(&pad);
            }
            b
        }
        None => Array2::zeros((n, d)),
    }
}

/// Shapley values for an n-player game given its value on every subset;
/// `f(present)` receives a bitmask of present players. Weights are the
/// classic |S|!·(n−1−|S|)!/n! over each player's insertion marginals.
fn exact_shapley(n: usize, mut f: impl FnMut(u32) -> Result<f64>) -> Result<Vec<f64>> {
    assert!(n <= 25, "subset enumeration explodes past small n");
    let subsets = 1u32 << n;
    let mut values = Vec::with_capacity(subsets as usize);
    for s in 0..subsets {
        values.push(f(s)?);
    }
    let fact: Vec<f64> = {
        let mut v = vec![1.0];
        for k in 1..=n {
            v.push(v[k - 1] * k as f64);
        }
        v
    };
    let mut phi = vec![0.0; n];
    for (i, slot) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut acc = 0.0;
        for s in 0..subsets {
            if s & bit != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            let w = fact[k] * fact[n - 1 - k] / fact[n];
            acc += w * (values[(s | bit) as usize] - values[s as usize]);
        }
        *slot = acc;
    }
    Ok(phi)
}

/// Sums token scores per source line. Lines with no content tokens do not
/// appear; BOS/EOS carry no line and are never aggregated.
pub fn aggregate_lines(token_scores: &[f64], seq: &TokenSequence) -> BTreeMap<u32, f64> {
    let mut map = BTreeMap::new();
    for j in seq.content_positions() {
        let line = seq.line_of_token[j];
        if line >= 1 {
            *map.entry(line).or_insert(0.0) += token_scores[j];
        }
    }
    map
}

/// Picks the root-cause line for a vulnerable diagnosis: the argmax of
/// `line_scores` over lines strictly before the range start, ties broken
/// toward the larger (closest) line. `None` when the range starts at line
/// 1 or no earlier line carries tokens — absence is an answer, not an
/// error.
pub fn select_root_cause(
    line_scores: &BTreeMap<u32, f64>,
    diagnosis: &Diagnosis,
    source: &CodeFunction,
) -> Result<Option<RootCause>> {
    if !diagnosis.class.is_vulnerable() {
        return Err(Error::invalid(
            "no root cause for non-vulnerable prediction",
        ));
    }
    let Some(range) = diagnosis.range else {
        return Err(Error::invalid(
            "diagnosis lacks a line range to search before",
        ));
    };
    let l_start = range.start();
    if l_start <= 1 {
        return Ok(None);
    }
    let mut best: Option<(u32, f64)> = None;
    for (&line, &score) in line_scores.range(..l_start) {
        match best {
            Some((_, s)) if score < s => {}
            // `>=` lets a later line displace an equal score: the map
            // iterates ascending, so ties resolve toward the range.
            _ => best = Some((line, score)),
        }
    }
    Ok(best.map(|(line, score)| RootCause {
        line,
        score,
        snippet: source.line(line).unwrap_or("").to_string(),
    }))
}

/// Full root-cause derivation for a finished diagnosis: attribute the
/// predicted class, aggregate lines, select. `Ok(None)` when the
/// diagnosis is non-vulnerable or its range starts at line 1.
pub fn derive_root_cause(
    model: &VulnModel,
    function: &CodeFunction,
    diagnosis: &Diagnosis,
) -> Result<Option<RootCause>> {
    if !diagnosis.class.is_vulnerable() {
        return Ok(None);
    }
    let Some(range) = diagnosis.range else {
        return Ok(None);
    };
    if range.start() <= 1 {
        return Ok(None);
    }
    let Some(target) = diagnosis.class.head_index() else {
        return Ok(None);
    };
    let prepared = model.prepare(function)?;
    let attr = attribute_tokens(model, &prepared, target, &AttributionConfig::default())?;
    select_root_cause(&attr.line_scores, diagnosis, function)
}

/// Renders an attribution map for golden-file comparison: two header
/// lines, then one `line score` row per line in ascending order.
pub fn dump_attribution(attr: &AttributionMap) -> String {
    let mut out = String::new();
    out.push_str(&format!("baseline_pred {}\n", attr.baseline_pred));
    out.push_str(&format!("full_pred {}\n", attr.full_pred));
    for (line, score) in &attr.line_scores {
        out.push_str(&format!("{line} {score}\n"));
    }
    out
}
