//! Semantic vulnerability graph: four typed edge sets over a token window,
//! plus the dense adjacency matrix the GCN consumes.
//!
//! The edge rules are deliberately lexical — they need no C frontend, only
//! the blanked-source helpers in `csrc` — but they preserve the four-way
//! structure downstream layers depend on:
//!
//! * **sequential** — each real token linked to its neighbor, both ways.
//! * **data** — all occurrences of the same identifier linked pairwise.
//!   An occurrence is a whole identifier word in the source; the edge lands
//!   on the token holding the word's first byte, so the rule is insensitive
//!   to how BPE happened to split the word.
//! * **control** — a control keyword (`if`, `else`, `for`, `while`,
//!   `switch`, `return`, `goto`, `break`, `continue`) linked to the first
//!   substantive token of every line inside its syntactic extent. Extents
//!   come from bracket matching: the `{…}` block when present, otherwise
//!   the statement up to `;`. Unbalanced brackets degrade to the keyword's
//!   own line and record a diagnostic — never an error.
//! * **poacher** — a call to a configured sink function (`memcpy`,
//!   `strcpy`, `malloc`, `free`, the printf family, …) linked to the first
//!   occurrence (the approximate definition site) of each identifier used
//!   in its arguments.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::CodeFunction;
use crate::csrc;
use crate::tokenizer::TokenSequence;
use crate::{Error, Result};

/// Edge categories, in dump order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    Sequential,
    Data,
    Control,
    Poacher,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 4] = [
        EdgeKind::Sequential,
        EdgeKind::Data,
        EdgeKind::Control,
        EdgeKind::Poacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Sequential => "sequential",
            EdgeKind::Data => "data",
            EdgeKind::Control => "control",
            EdgeKind::Poacher => "poacher",
        }
    }
}

/// Typed directed edges over the `n` token positions of one window.
/// Only the first `n_real` positions (BOS, content, EOS) may carry edges;
/// PAD positions stay isolated.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    n: usize,
    n_real: usize,
    edges: BTreeMap<EdgeKind, BTreeSet<(usize, usize)>>,
    diagnostics: Vec<String>,
}

impl SemanticGraph {
    pub fn empty(n: usize, n_real: usize) -> Result<SemanticGraph> {
        if n_real > n {
            return Err(Error::invalid(format!("n_real {n_real} exceeds n {n}")));
        }
        let edges = EdgeKind::ALL.iter().map(|&k| (k, BTreeSet::new())).collect();
        Ok(SemanticGraph {
            n,
            n_real,
            edges,
            diagnostics: Vec::new(),
        })
    }

    /// Node count (= the window's `max_len`).
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of non-PAD nodes.
    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn edges(&self, kind: EdgeKind) -> &BTreeSet<(usize, usize)> {
        &self.edges[&kind]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(|s| s.len()).sum()
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Inserts one directed edge. Edges to PAD nodes or out of range are
    /// rejected; self-loops are not representable as edges (the adjacency
    /// diagonal covers them).
    pub fn insert(&mut self, kind: EdgeKind, src: usize, dst: usize) -> Result<()> {
        if src >= self.n_real || dst >= self.n_real {
            return Err(Error::invalid(format!(
                "edge ({src},{dst}) touches a PAD or out-of-range node (n_real {})",
                self.n_real
            )));
        }
        if src == dst {
            return Err(Error::invalid("self-loops are implicit, not edges"));
        }
        self.edges.get_mut(&kind).unwrap().insert((src, dst));
        Ok(())
    }

    fn insert_undirected(&mut self, kind: EdgeKind, a: usize, b: usize) {
        if a != b {
            let _ = self.insert(kind, a, b);
            let _ = self.insert(kind, b, a);
        }
    }

    /// Debug dump: one `kind src dst` line per edge, ordered by
    /// (kind, src, dst).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for kind in EdgeKind::ALL {
            for &(s, d) in &self.edges[&kind] {
                out.push_str(&format!("{} {s} {d}\n", kind.name()));
            }
        }
        out
    }
}

/// Tunables for graph construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgConfig {
    /// Function names treated as security-relevant sinks for poacher edges.
    pub sinks: Vec<String>,
    /// Row-normalize the adjacency matrix (each row sums to 1). Off by
    /// default: the propagation rule consumes the plain binary matrix.
    pub row_normalize: bool,
}

impl Default for SvgConfig {
    fn default() -> Self {
        let sinks = [
            "memcpy", "memmove", "memset", "strcpy", "strncpy", "strcat", "strncat", "sprintf",
            "snprintf", "vsprintf", "printf", "fprintf", "gets", "fgets", "scanf", "sscanf",
            "malloc", "xmalloc", "calloc", "realloc", "free", "alloca", "system",
        ];
        SvgConfig {
            sinks: sinks.iter().map(|s| s.to_string()).collect(),
            row_normalize: false,
        }
    }
}

/// Content-token index: maps source byte offsets to window positions.
struct TokenIndex<'a> {
    seq: &'a TokenSequence,
    /// (span start, window position) for content tokens, offset-ascending.
    starts: Vec<(usize, usize)>,
}

impl<'a> TokenIndex<'a> {
    fn new(seq: &'a TokenSequence) -> TokenIndex<'a> {
        let starts = seq
            .content_positions()
            .map(|pos| (seq.spans[pos].0, pos))
            .collect();
        TokenIndex { seq, starts }
    }

    /// The content token whose span covers byte `offset`, if it survived
    /// truncation.
    fn token_at(&self, offset: usize) -> Option<usize> {
        let i = self.starts.partition_point(|&(s, _)| s <= offset);
        let &(start, pos) = self.starts.get(i.checked_sub(1)?)?;
        let (_, len) = self.seq.spans[pos];
        (offset < start + len).then_some(pos)
    }

    /// Whether the token at `pos` contains any non-whitespace byte.
    fn is_substantive(&self, pos: usize, source: &str) -> bool {
        let (start, len) = self.seq.spans[pos];
        source.as_bytes()[start..start + len]
            .iter()
            .any(|b| !b.is_ascii_whitespace())
    }
}

/// Builds the semantic graph for a window. Never fails: lexical trouble
/// (unbalanced brackets, truncated calls) degrades per-edge and is recorded
/// in the graph's diagnostics.
pub fn build_graph(seq: &TokenSequence, function: &CodeFunction, cfg: &SvgConfig) -> SemanticGraph {
    let mut g = SemanticGraph::empty(seq.max_len(), seq.n_real)
        .expect("n_real ≤ max_len by construction");

    for i in 0..seq.n_real.saturating_sub(1) {
        g.insert_undirected(EdgeKind::Sequential, i, i + 1);
    }

    let source = &function.source_text;
    let blanked = csrc::blank_comments_and_strings(source);
    let structural = csrc::blank_preprocessor(&blanked);
    let bytes = structural.as_bytes();
    let index = TokenIndex::new(seq);
    let runs = csrc::word_runs(&structural);

    // Identifier occurrences, keyed by name, as head-token positions in
    // source order.
    let mut occurrences: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for run in &runs {
        if csrc::is_identifier(run.text) {
            if let Some(pos) = index.token_at(run.start) {
                occurrences.entry(run.text).or_default().push(pos);
            }
        }
    }
    for positions in occurrences.values() {
        for (i, &a) in positions.iter().enumerate() {
            for &b in &positions[i + 1..] {
                g.insert_undirected(EdgeKind::Data, a, b);
            }
        }
    }

    for run in &runs {
        if !csrc::CONTROL_KEYWORDS.contains(&run.text) {
            continue;
        }
        let Some(head) = index.token_at(run.start) else {
            continue;
        };
        let after_kw = run.start + run.text.len();
        let extent = match control_extent(bytes, run.text, after_kw) {
            Ok(extent) => extent,
            Err(detail) => {
                let line = csrc::line_of_offset(bytes, run.start);
                g.diagnostics
                    .push(format!("line {line}: {detail}; extent limited to that line"));
                let eol = bytes[after_kw..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |p| after_kw + p);
                after_kw..eol
            }
        };
        let mut last_line = 0u32;
        for pos in seq.content_positions() {
            let (start, _) = seq.spans[pos];
            if !extent.contains(&start) || !index.is_substantive(pos, source) {
                continue;
            }
            let line = seq.line_of_token[pos];
            if line != last_line {
                last_line = line;
                if pos != head {
                    let _ = g.insert(EdgeKind::Control, head, pos);
                }
            }
        }
    }

    let first_occurrence: BTreeMap<&str, usize> = occurrences
        .iter()
        .map(|(&name, positions)| (name, positions[0]))
        .collect();
    for run in &runs {
        if !cfg.sinks.iter().any(|s| s == run.text) {
            continue;
        }
        let Some(head) = index.token_at(run.start) else {
            continue;
        };
        let open = csrc::skip_ws(bytes, run.start + run.text.len());
        if bytes.get(open) != Some(&b'(') {
            continue; // not a call
        }
        let Some(close) = csrc::match_forward(bytes, open, b'(', b')') else {
            let line = csrc::line_of_offset(bytes, run.start);
            g.diagnostics
                .push(format!("line {line}: unbalanced parens in {} call", run.text));
            continue;
        };
        let mut linked = BTreeSet::new();
        for arg in &runs {
            if arg.start <= open || arg.start >= close || !csrc::is_identifier(arg.text) {
                continue;
            }
            if let Some(&def) = first_occurrence.get(arg.text) {
                if linked.insert(arg.text) && def != head {
                    let _ = g.insert(EdgeKind::Poacher, head, def);
                }
            }
        }
    }

    g
}

/// Byte extent governed by a control keyword, starting at `after_kw`
/// (just past the keyword). For `if`/`for`/`while`/`switch` the bracketed
/// condition is skipped first; then a `{…}` body yields its interior and
/// anything else the statement up to `;`. Errors describe what failed to
/// match; the caller degrades to same-line scope.
fn control_extent(
    bytes: &[u8],
    keyword: &str,
    after_kw: usize,
) -> std::result::Result<std::ops::Range<usize>, String> {
    let mut at = csrc::skip_ws(bytes, after_kw);
    if matches!(keyword, "if" | "for" | "while" | "switch") {
        if bytes.get(at) != Some(&b'(') {
            return Err(format!("expected ( after {keyword}"));
        }
        let close = csrc::match_forward(bytes, at, b'(', b')')
            .ok_or_else(|| format!("unbalanced parens after {keyword}"))?;
        at = csrc::skip_ws(bytes, close + 1);
    }
    if bytes.get(at) == Some(&b'{') {
        let close = csrc::match_forward(bytes, at, b'{', b'}')
            .ok_or_else(|| format!("unbalanced braces after {keyword}"))?;
        Ok(at + 1..close)
    } else {
        let end = csrc::statement_end(bytes, at)
            .ok_or_else(|| format!("unterminated statement after {keyword}"))?;
        Ok(at..end + 1)
    }
}

/// Lowers the graph to its dense adjacency matrix: 1 where any edge joins
/// the pair (symmetrized) and on real-node diagonals, 0 elsewhere. PAD rows
/// and columns stay all-zero.
pub fn to_adjacency(g: &SemanticGraph) -> Array2<f64> {
    let mut a = Array2::zeros((g.n, g.n));
    for i in 0..g.n_real {
        a[[i, i]] = 1.0;
    }
    for kind in EdgeKind::ALL {
        for &(s, d) in g.edges(kind) {
            a[[s, d]] = 1.0;
            a[[d, s]] = 1.0;
        }
    }
    a
}

/// Scales each nonzero row to sum to 1.
pub fn row_normalize(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        }
    }
}
