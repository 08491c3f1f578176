//! The diagnosis model: a pluggable token encoder feeding a residual graph
//! convolution over the semantic graph, read out by two heads — an 11-way
//! class head (non-vulnerable + ten CWE classes) and a line-range regressor.
//!
//! Everything runs on the in-crate [`crate::autodiff`] tape; a forward pass
//! builds a fresh graph, so inference on a shared `&VulnModel` is safe from
//! many threads at once. Training mutates the parameter set in place and is
//! single-writer.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{
    focal_grad_wrt_logits, focal_loss, loc_grad, loc_loss, softmax, FocalParams, PROB_EPSILON,
};
pub use train::{train, EpochStats, TrainHistory, TrainParams};

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::corpus::{CodeFunction, CweClass, LineRange};
use crate::error::{Error, Result};
use crate::svg::{build_graph, to_adjacency, SemanticGraph, SvgConfig};
use crate::tokenizer::{encode, TokenSequence, Vocab, PAD_ID};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

/// Version line of the external-embeddings file format.
pub const EMBED_MAGIC: &str = "vulnscope-embed/1";

/// How token rows of H⁰ are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// A small trainable transformer: learned token + position embeddings,
    /// pre-norm self-attention blocks with PAD keys masked out.
    TinyTransformer,
    /// Pure embedding-table lookup; row i is the table row of token i.
    EmbeddingOnly,
    /// Precomputed per-function embedding matrices loaded from a file.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            kind: EncoderKind::TinyTransformer,
            layers: 2,
            embed_dim: 64,
            heads: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub n_layers: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    /// Residual updates are the only supported propagation rule; the flag
    /// exists so a checkpoint records the rule it was trained under.
    pub residual: bool,
}

impl Default for GcnConfig {
    fn default() -> GcnConfig {
        GcnConfig {
            n_layers: 2,
            feature_dim: 64,
            activation: Activation::Relu,
            residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gcn: GcnConfig,
    /// Width of the optional hidden layer in the class head; `None` makes
    /// the head a single affine map (useful when a linear model is needed).
    pub head_hidden: Option<usize>,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::default(),
            gcn: GcnConfig::default(),
            head_hidden: Some(32),
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
        }
    }
}

/// Raw head readouts for one function. `loc_pred` is in line units but
/// real-valued; [`VulnModel::predict`] discretizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub class_logits: Vec<f64>,
    pub loc_pred: (f64, f64),
}

/// A discrete verdict for one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub class: CweClass,
    /// Present exactly when `class` is vulnerable.
    pub range: Option<LineRange>,
    /// Softmax probability of the chosen class.
    pub confidence: f64,
}

/// Anything that can produce a [`Diagnosis`] for a function — the trained
/// model, or a test double. `Sync` so a scan can fan out across threads.
pub trait Diagnoser: Sync {
    fn diagnose(&self, function: &CodeFunction) -> Result<Diagnosis>;

    /// A root-cause line for an already-produced diagnosis, when the
    /// implementation can derive one. The default derives nothing.
    fn root_cause(
        &self,
        function: &CodeFunction,
        diagnosis: &Diagnosis,
    ) -> Result<Option<crate::explain::RootCause>> {
        let _ = (function, diagnosis);
        Ok(None)
    }
}

/// Named parameter tensors in fixed creation order. Order is load-bearing:
/// initialization draws from one RNG stream, checkpoints serialize tensors
/// sequentially, and the optimizer walks them by index.
#[derive(Debug, Clone)]
pub(crate) struct ParamSet {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn new() -> ParamSet {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub(crate) fn len(&self) -> usize {
        self.values.len()
    }

    pub(crate) fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub(crate) fn value_at_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        &mut self.values[idx]
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    fn get(&self, name: &str) -> &Array2<f64> {
        &self.values[self.index[name]]
    }
}

/// Per-function embedding matrices keyed by function id, for the
/// [`EncoderKind::External`] path.
#[derive(Debug, Clone, Default)]
pub struct ExternalEmbeddings {
    map: std::collections::BTreeMap<String, Array2<f64>>,
}

impl ExternalEmbeddings {
    pub fn new() -> ExternalEmbeddings {
        ExternalEmbeddings::default()
    }

    pub fn insert(&mut self, function_id: &str, matrix: Array2<f64>) -> Result<()> {
        if function_id.is_empty() || function_id.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(
                "embedding key must be non-empty and free of tabs/newlines",
            ));
        }
        self.map.insert(function_id.to_string(), matrix);
        Ok(())
    }

    pub fn get(&self, function_id: &str) -> Option<&Array2<f64>> {
        self.map.get(function_id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes `vulnscope-embed/1`: a magic line, then one line per function
    /// — `id<TAB>rows<TAB>cols<TAB>base64(row-major f64 LE)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(EMBED_MAGIC);
        out.push('\n');
        for (id, m) in &self.map {
            let mut bytes = Vec::with_capacity(m.len() * 8);
            for v in m.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            writeln!(
                out,
                "{id}\t{}\t{}\t{}",
                m.nrows(),
                m.ncols(),
                BASE64.encode(&bytes)
            )
            .expect("write to string");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ExternalEmbeddings> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let magic = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::format("empty embeddings file"))?;
        if magic != EMBED_MAGIC {
            return Err(Error::format(format!(
                "expected `{EMBED_MAGIC}`, found `{magic}`"
            )));
        }
        let mut store = ExternalEmbeddings::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(4, '\t');
            let (Some(id), Some(rows), Some(cols), Some(data)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::format(format!(
                    "embeddings line {}: expected 4 tab-separated fields",
                    lineno + 2
                )));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| Error::format(format!("embeddings line {}: bad rows", lineno + 2)))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| Error::format(format!("embeddings line {}: bad cols", lineno + 2)))?;
            let bytes = BASE64.decode(data).map_err(|_| {
                Error::format(format!("embeddings line {}: bad base64", lineno + 2))
            })?;
            if bytes.len() != rows * cols * 8 {
                return Err(Error::format(format!(
                    "embeddings line {}: {} bytes for a {rows}×{cols} matrix",
                    lineno + 2,
                    bytes.len()
                )));
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let matrix = Array2::from_shape_vec((rows, cols), data).expect("shape matches len");
            store.insert(id, matrix)?;
        }
        Ok(store)
    }
}

/// Everything derived from one function that forward passes consume: the
/// token window, the semantic graph, and its (optionally row-normalized)
/// adjacency matrix.
#[derive(Debug, Clone)]
pub struct PreparedFunction {
    pub function_id: String,
    pub seq: TokenSequence,
    pub graph: SemanticGraph,
    pub adjacency: Array2<f64>,
    pub line_count: u32,
}

#[derive(Default, Clone, Copy)]
pub(crate) struct ForwardOpts<'a> {
    /// Positions to neutralize: masked tokens embed as PAD (or zero for
    /// external embeddings), lose their adjacency row/column and attention
    /// keys, and drop out of the localization readout — but keep their slot
    /// in the mean pool, so the pooled feature keeps a fixed denominator.
    pub(crate) mask: Option<&'a [bool]>,
    /// Expose H⁰ as a single gradient-carrying leaf (for attribution)
    /// instead of routing through the embedding table.
    pub(crate) embeddings_as_leaf: bool,
}

pub(crate) struct ForwardGraph {
    pub(crate) graph: Graph,
    pub(crate) h0: NodeId,
    /// Post-propagation features; tests inspect the GCN stage through it.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) gcn_out: NodeId,
    pub(crate) logits: NodeId,
    pub(crate) loc01: NodeId,
    /// `(parameter index, leaf node)` for every parameter the pass touched.
    pub(crate) param_nodes: Vec<(usize, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct VulnModel {
    config: ModelConfig,
    svg_config: SvgConfig,
    vocab: Vocab,
    params: ParamSet,
    external: Option<ExternalEmbeddings>,
}

impl VulnModel {
    /// Validates the configuration and draws fresh parameters from
    /// `config.encoder.seed`. All dimension checks happen here, never
    /// during a forward pass.
    pub fn new(config: ModelConfig, svg_config: SvgConfig, vocab: Vocab) -> Result<VulnModel> {
        let enc = &config.encoder;
        if enc.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be ≥ 1"));
        }
        if enc.layers == 0 {
            return Err(Error::invalid("encoder layers must be ≥ 1"));
        }
        if enc.heads == 0 || !enc.embed_dim.is_multiple_of(enc.heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                enc.embed_dim, enc.heads
            )));
        }
        if config.gcn.n_layers == 0 {
            return Err(Error::invalid("gcn n_layers must be ≥ 1"));
        }
        if config.gcn.feature_dim != enc.embed_dim {
            return Err(Error::invalid(format!(
                "encoder embed_dim {} does not match gcn feature_dim {}; the GCN \
                 consumes encoder rows directly, so the dims must agree",
                enc.embed_dim, config.gcn.feature_dim
            )));
        }
        if !config.gcn.residual {
            return Err(Error::invalid(
                "non-residual GCN propagation is not supported",
            ));
        }
        if config.head_hidden == Some(0) {
            return Err(Error::invalid("head_hidden must be ≥ 1 when present"));
        }
        if config.max_len < 3 {
            return Err(Error::invalid("max_len must be ≥ 3"));
        }
        let params = init_params(&config, vocab.size());
        Ok(VulnModel {
            config,
            svg_config,
            vocab,
            params,
            external: None,
        })
    }

    /// Attaches precomputed embeddings; required before any forward pass
    /// when the encoder kind is [`EncoderKind::External`].
    pub fn set_external_embeddings(&mut self, store: ExternalEmbeddings) -> Result<()> {
        if self.config.encoder.kind != EncoderKind::External {
            return Err(Error::invalid(
                "external embeddings only apply to the external encoder kind",
            ));
        }
        self.external = Some(store);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn svg_config(&self) -> &SvgConfig {
        &self.svg_config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Parameter names in their fixed creation order.
    pub fn param_names(&self) -> Vec<&str> {
        self.params.names.iter().map(|s| s.as_str()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.index_of(name).map(|i| self.params.value_at(i))
    }

    /// Overwrites one parameter tensor; the replacement must keep its shape.
    pub fn set_param(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let Some(idx) = self.params.index_of(name) else {
            return Err(Error::invalid(format!("no parameter named `{name}`")));
        };
        let expected = self.params.value_at(idx).dim();
        if value.dim() != expected {
            return Err(Error::invalid(format!(
                "parameter `{name}` has shape {:?}, replacement has {:?}",
                expected,
                value.dim()
            )));
        }
        *self.params.value_at_mut(idx) = value;
        Ok(())
    }

    pub(crate) fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Tokenizes the function and builds its semantic graph and adjacency
    /// matrix. Pure per function; safe to fan out across threads.
    pub fn prepare(&self, function: &CodeFunction) -> Result<PreparedFunction> {
        let seq = encode(&self.vocab, function, self.config.max_len)?;
        let graph = build_graph(&seq, function, &self.svg_config);
        let mut adjacency = to_adjacency(&graph);
        if self.svg_config.row_normalize {
            crate::svg::row_normalize(&mut adjacency);
        }
        Ok(PreparedFunction {
            function_id: function.id.clone(),
            seq,
            graph,
            adjacency,
            line_count: function.line_count(),
        })
    }

    /// The encoder's H⁰ matrix (`max_len × embed_dim`) for a prepared
    /// function, before graph propagation.
    pub fn encode_tokens(&self, prepared: &PreparedFunction) -> Result<Array2<f64>> {
        let fg = self.build_forward(prepared, &ForwardOpts::default())?;
        Ok(fg.graph.value(fg.h0).clone())
    }

    pub fn forward(&self, prepared: &PreparedFunction) -> Result<HeadOutputs> {
        let fg = self.build_forward(prepared, &ForwardOpts::default())?;
        Ok(self.head_outputs(&fg, prepared))
    }

    /// Forward pass with some positions neutralized to the PAD baseline;
    /// the masking semantics are those of [`ForwardOpts::mask`].
    pub fn forward_masked(&self, prepared: &PreparedFunction, mask: &[bool]) -> Result<HeadOutputs> {
        let opts = ForwardOpts {
            mask: Some(mask),
            embeddings_as_leaf: false,
        };
        let fg = self.build_forward(prepared, &opts)?;
        Ok(self.head_outputs(&fg, prepared))
    }

    pub(crate) fn head_outputs(&self, fg: &ForwardGraph, prepared: &PreparedFunction) -> HeadOutputs {
        let class_logits = fg.graph.value(fg.logits).row(0).to_vec();
        let loc = fg.graph.value(fg.loc01);
        let lc = f64::from(prepared.line_count);
        HeadOutputs {
            class_logits,
            loc_pred: (loc[[0, 0]] * lc, loc[[0, 1]] * lc),
        }
    }

    /// Full verdict for one function: argmax class, plus a line range
    /// (discretized by [`rescale_loc`]) when the class is vulnerable.
    pub fn predict(&self, function: &CodeFunction) -> Result<Diagnosis> {
        let prepared = self.prepare(function)?;
        let out = self.forward(&prepared)?;
        let probs = softmax(&out.class_logits);
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty logits");
        let class = CweClass::from_head_index(best)?;
        let range = if class.is_vulnerable() {
            let (s, e) = rescale_loc(out.loc_pred, prepared.line_count);
            Some(LineRange::new(s, e)?)
        } else {
            None
        };
        Ok(Diagnosis {
            class,
            range,
            confidence: probs[best],
        })
    }

    fn pnode(
        &self,
        g: &mut Graph,
        param_nodes: &mut Vec<(usize, NodeId)>,
        name: &str,
    ) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        let node = g.leaf(self.params.value_at(idx).clone());
        param_nodes.push((idx, node));
        node
    }

    /// Builds the full forward tape for one prepared function.
    pub(crate) fn build_forward(
        &self,
        p: &PreparedFunction,
        opts: &ForwardOpts,
    ) -> Result<ForwardGraph> {
        let n = self.config.max_len;
        let d = self.config.encoder.embed_dim;
        if p.seq.max_len() != n {
            return Err(Error::invalid(format!(
                "prepared sequence has window {} but the model expects {n}",
                p.seq.max_len()
            )));
        }
        if let Some(m) = opts.mask {
            if m.len() != n {
                return Err(Error::invalid(format!(
                    "mask length {} does not match window {n}",
                    m.len()
                )));
            }
        }
        let masked = |j: usize| opts.mask.is_some_and(|m| m[j]);
        let n_real = p.seq.n_real;

        let mut g = Graph::new();
        let mut param_nodes = Vec::new();

        let h0 = match self.config.encoder.kind {
            EncoderKind::External => {
                let store = self.external.as_ref().ok_or_else(|| {
                    Error::invalid("external encoder configured but no embeddings attached")
                })?;
                let m = store.get(&p.function_id).ok_or_else(|| {
                    Error::invalid(format!(
                        "no external embedding for function `{}`",
                        p.function_id
                    ))
                })?;
                if m.dim() != (n, d) {
                    return Err(Error::invalid(format!(
                        "external embedding for `{}` is {:?}, expected ({n}, {d})",
                        p.function_id,
                        m.dim()
                    )));
                }
                let mut e = m.clone();
                for j in 0..n {
                    if masked(j) {
                        e.row_mut(j).fill(0.0);
                    }
                }
                g.leaf(e)
            }
            EncoderKind::TinyTransformer | EncoderKind::EmbeddingOnly => {
                let ids: Vec<usize> = p
                    .seq
                    .token_ids
                    .iter()
                    .enumerate()
                    .map(|(j, &t)| if masked(j) { PAD_ID as usize } else { t as usize })
                    .collect();
                if opts.embeddings_as_leaf {
                    let table = self.params.get("tok_emb");
                    let mut e = Array2::zeros((n, d));
                    for (j, &id) in ids.iter().enumerate() {
                        e.row_mut(j).assign(&table.row(id));
                    }
                    g.leaf(e)
                } else {
                    let table = self.pnode(&mut g, &mut param_nodes, "tok_emb");
                    g.embed(table, &ids)
                }
            }
        };

        let mut h = h0;
        if self.config.encoder.kind == EncoderKind::TinyTransformer {
            let pos = self.pnode(&mut g, &mut param_nodes, "pos_emb");
            h = g.add(h, pos);

            // Key mask: nobody attends to PAD or masked positions. Every
            // row keeps live keys, so no softmax row degenerates.
            let mut att_mask = Array2::zeros((n, n));
            for j in 0..n {
                if j >= n_real || p.seq.token_ids[j] == PAD_ID || masked(j) {
                    att_mask.column_mut(j).fill(MASK_NEG);
                }
            }

            let heads = self.config.encoder.heads;
            let dh = d / heads;
            let att_scale = 1.0 / (dh as f64).sqrt();
            for l in 0..self.config.encoder.layers {
                let gain = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ln1.gain"));
                let bias = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ln1.bias"));
                let ln1 = g.layernorm_rows(h, gain, bias, LN_EPS);

                let wq = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.attn.wq"));
                let wk = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.attn.wk"));
                let wv = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.attn.wv"));
                let q = g.matmul(ln1, wq);
                let k = g.matmul(ln1, wk);
                let v = g.matmul(ln1, wv);

                let mut head_outs = Vec::with_capacity(heads);
                for hh in 0..heads {
                    let (from, to) = (hh * dh, (hh + 1) * dh);
                    let qh = g.slice_cols(q, from, to);
                    let kh = g.slice_cols(k, from, to);
                    let vh = g.slice_cols(v, from, to);
                    let kt = g.transpose(kh);
                    let scores = g.matmul(qh, kt);
                    let scores = g.scale(scores, att_scale);
                    let scores = g.add_const(scores, &att_mask);
                    let att = g.softmax_rows(scores);
                    head_outs.push(g.matmul(att, vh));
                }
                let cat = g.concat_cols(&head_outs);
                let wo = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.attn.wo"));
                let o = g.matmul(cat, wo);
                h = g.add(h, o);

                let gain2 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ln2.gain"));
                let bias2 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ln2.bias"));
                let ln2 = g.layernorm_rows(h, gain2, bias2, LN_EPS);
                let w1 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ffn.w1"));
                let b1 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ffn.b1"));
                let w2 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ffn.w2"));
                let b2 = self.pnode(&mut g, &mut param_nodes, &format!("enc{l}.ffn.b2"));
                let z = g.matmul(ln2, w1);
                let z = g.add_bias_row(z, b1);
                let z = g.relu(z);
                let z = g.matmul(z, w2);
                let z = g.add_bias_row(z, b2);
                h = g.add(h, z);
            }
            let gain = self.pnode(&mut g, &mut param_nodes, "enc_final.gain");
            let bias = self.pnode(&mut g, &mut param_nodes, "enc_final.bias");
            h = g.layernorm_rows(h, gain, bias, LN_EPS);
        }

        // Graph propagation. Masked positions lose their adjacency row and
        // column, exactly like PAD nodes.
        let mut adjacency = p.adjacency.clone();
        if opts.mask.is_some() {
            for j in 0..n {
                if masked(j) {
                    adjacency.row_mut(j).fill(0.0);
                    adjacency.column_mut(j).fill(0.0);
                }
            }
        }
        let a_node = g.leaf(adjacency);
        for l in 0..self.config.gcn.n_layers {
            let ah = g.matmul(a_node, h);
            let w = self.pnode(&mut g, &mut param_nodes, &format!("gcn{l}.w"));
            let ahw = g.matmul(ah, w);
            // Checked before the ReLU: IEEE max(NaN, 0) is 0, so the
            // activation would silently launder an overflow.
            if !g.value(ahw).iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite activations after GCN layer {l}"
                )));
            }
            let update = match self.config.gcn.activation {
                Activation::Relu => g.relu(ahw),
            };
            h = g.add(h, update);
        }
        let gcn_out = h;

        // Class head: mean over all real rows — masked ones included, so
        // the pool denominator never shifts between a pass and its masked
        // counterpart.
        let real_rows: Vec<usize> = (0..n_real).collect();
        let pooled = g.mean_rows(h, &real_rows);
        let logits = match self.config.head_hidden {
            Some(_) => {
                let w1 = self.pnode(&mut g, &mut param_nodes, "head_cls.w1");
                let b1 = self.pnode(&mut g, &mut param_nodes, "head_cls.b1");
                let w2 = self.pnode(&mut g, &mut param_nodes, "head_cls.w2");
                let b2 = self.pnode(&mut g, &mut param_nodes, "head_cls.b2");
                let z = g.matmul(pooled, w1);
                let z = g.add_bias_row(z, b1);
                let z = g.relu(z);
                let z = g.matmul(z, w2);
                g.add_bias_row(z, b2)
            }
            None => {
                let w = self.pnode(&mut g, &mut param_nodes, "head_cls.w");
                let b = self.pnode(&mut g, &mut param_nodes, "head_cls.b");
                let z = g.matmul(pooled, w);
                g.add_bias_row(z, b)
            }
        };

        // Localization head: attention over content tokens against each
        // token's line-bucket center (ℓ − ½)/L, one readout per endpoint.
        // The output lives in (0, 1) by construction.
        let mut loc_mask = Array2::zeros((1, n));
        let content = p.seq.content_positions();
        for j in 0..n {
            let eligible = content.contains(&j) && !masked(j);
            if !eligible {
                loc_mask[[0, j]] = MASK_NEG;
            }
        }
        let lc = f64::from(p.line_count);
        let mut frac = Array2::zeros((n, 1));
        for j in content.clone() {
            frac[[j, 0]] = (f64::from(p.seq.line_of_token[j]) - 0.5) / lc;
        }
        let frac_node = g.leaf(frac);
        let mut ends = Vec::with_capacity(2);
        for name in ["head_loc.start", "head_loc.end"] {
            let w = self.pnode(&mut g, &mut param_nodes, name);
            let s = g.matmul(gcn_out, w);
            let st = g.transpose(s);
            let sm = g.add_const(st, &loc_mask);
            let att = g.softmax_rows(sm);
            ends.push(g.matmul(att, frac_node));
        }
        let loc01 = g.concat_cols(&[ends[0], ends[1]]);

        Ok(ForwardGraph {
            graph: g,
            h0,
            gcn_out,
            logits,
            loc01,
            param_nodes,
        })
    }
}

impl Diagnoser for VulnModel {
    fn diagnose(&self, function: &CodeFunction) -> Result<Diagnosis> {
        self.predict(function)
    }

    fn root_cause(
        &self,
        function: &CodeFunction,
        diagnosis: &Diagnosis,
    ) -> Result<Option<crate::explain::RootCause>> {
        crate::explain::derive_root_cause(self, function, diagnosis)
    }
}

/// Residual graph convolution as a plain matrix routine: one
/// `H ← H + ReLU(A·H·W)` update per weight matrix. Nodes are rows here, so
/// `W` right-multiplies — the transpose of the column-vector convention,
/// equivalent for the symmetric adjacency this crate produces.
pub fn gcn_forward(
    h0: &Array2<f64>,
    adjacency: &Array2<f64>,
    weights: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let n = h0.nrows();
    let d = h0.ncols();
    if adjacency.dim() != (n, n) {
        return Err(Error::invalid(format!(
            "adjacency is {:?}, expected ({n}, {n})",
            adjacency.dim()
        )));
    }
    for (l, w) in weights.iter().enumerate() {
        if w.dim() != (d, d) {
            return Err(Error::invalid(format!(
                "gcn weight {l} is {:?}, expected ({d}, {d})",
                w.dim()
            )));
        }
    }
    let mut h = h0.clone();
    for (l, w) in weights.iter().enumerate() {
        let z = adjacency.dot(&h).dot(w);
        // Checked before the ReLU: IEEE max(NaN, 0) is 0, so the
        // activation would silently launder an overflow.
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite activations after GCN layer {l}"
            )));
        }
        h += &z.mapv(|v| v.max(0.0));
    }
    Ok(h)
}

/// Discretizes a real-valued line pair: a value in the bucket (ℓ−1, ℓ]
/// names line ℓ (hence `ceil`), clamped into [1, line_count], endpoints
/// swapped if inverted.
pub fn rescale_loc(pred: (f64, f64), line_count: u32) -> (u32, u32) {
    let snap = |v: f64| -> u32 {
        if !v.is_finite() {
            return 1;
        }
        let line = v.ceil() as i64;
        line.clamp(1, i64::from(line_count)) as u32
    };
    let (mut s, mut e) = (snap(pred.0), snap(pred.1));
    if s > e {
        std::mem::swap(&mut s, &mut e);
    }
    (s, e)
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| sample_normal(rng, std))
}

fn init_params(config: &ModelConfig, vocab_size: usize) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
    let mut params = ParamSet::new();
    let d = config.encoder.embed_dim;
    let mat_std = 1.0 / (d as f64).sqrt();

    match config.encoder.kind {
        EncoderKind::TinyTransformer | EncoderKind::EmbeddingOnly => {
            params.insert("tok_emb", normal_matrix(&mut rng, vocab_size, d, 0.02));
        }
        EncoderKind::External => {}
    }
    if config.encoder.kind == EncoderKind::TinyTransformer {
        params.insert("pos_emb", normal_matrix(&mut rng, config.max_len, d, 0.02));
        for l in 0..config.encoder.layers {
            params.insert(&format!("enc{l}.ln1.gain"), Array2::ones((1, d)));
            params.insert(&format!("enc{l}.ln1.bias"), Array2::zeros((1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    &format!("enc{l}.attn.{w}"),
                    normal_matrix(&mut rng, d, d, mat_std),
                );
            }
            params.insert(&format!("enc{l}.ln2.gain"), Array2::ones((1, d)));
            params.insert(&format!("enc{l}.ln2.bias"), Array2::zeros((1, d)));
            params.insert(
                &format!("enc{l}.ffn.w1"),
                normal_matrix(&mut rng, d, 2 * d, mat_std),
            );
            params.insert(&format!("enc{l}.ffn.b1"), Array2::zeros((1, 2 * d)));
            params.insert(
                &format!("enc{l}.ffn.w2"),
                normal_matrix(&mut rng, 2 * d, d, 1.0 / ((2 * d) as f64).sqrt()),
            );
            params.insert(&format!("enc{l}.ffn.b2"), Array2::zeros((1, d)));
        }
        params.insert("enc_final.gain", Array2::ones((1, d)));
        params.insert("enc_final.bias", Array2::zeros((1, d)));
    }

    // Residual-branch weights start small so early updates stay near the
    // identity; the unnormalized adjacency can have large row sums.
    for l in 0..config.gcn.n_layers {
        params.insert(
            &format!("gcn{l}.w"),
            normal_matrix(&mut rng, d, d, 0.02 * mat_std),
        );
    }

    let n_classes = crate::corpus::CWE_CLASSES.len();
    match config.head_hidden {
        Some(hd) => {
            params.insert("head_cls.w1", normal_matrix(&mut rng, d, hd, mat_std));
            params.insert("head_cls.b1", Array2::zeros((1, hd)));
            params.insert(
                "head_cls.w2",
                normal_matrix(&mut rng, hd, n_classes, 1.0 / (hd as f64).sqrt()),
            );
            params.insert("head_cls.b2", Array2::zeros((1, n_classes)));
        }
        None => {
            params.insert(
                "head_cls.w",
                normal_matrix(&mut rng, d, n_classes, 0.5 * mat_std),
            );
            params.insert("head_cls.b", Array2::zeros((1, n_classes)));
        }
    }
    params.insert("head_loc.start", normal_matrix(&mut rng, d, 1, 0.5 * mat_std));
    params.insert("head_loc.end", normal_matrix(&mut rng, d, 1, 0.5 * mat_std));
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{byte_vocab, function_from, tiny_config, tiny_model};
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn default_config_builds() {
        let model = VulnModel::new(ModelConfig::default(), SvgConfig::default(), byte_vocab());
        assert!(model.is_ok());
    }

    #[test]
    fn dim_mismatch_is_a_build_error() {
        let mut cfg = tiny_config(EncoderKind::EmbeddingOnly);
        cfg.gcn.feature_dim = 32;
        let err = VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn non_residual_config_rejected() {
        let mut cfg = tiny_config(EncoderKind::EmbeddingOnly);
        cfg.gcn.residual = false;
        assert!(VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).is_err());
    }

    #[test]
    fn heads_must_divide_embed_dim() {
        let mut cfg = tiny_config(EncoderKind::TinyTransformer);
        cfg.encoder.heads = 3;
        assert!(VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).is_err());
    }

    #[test]
    fn embedding_only_rows_match_table() {
        let model = tiny_model(EncoderKind::EmbeddingOnly);
        let f = function_from("f", "int x;\nreturn x;\n");
        let p = model.prepare(&f).unwrap();
        let h0 = model.encode_tokens(&p).unwrap();
        let table = model.param("tok_emb").unwrap();
        for (j, &id) in p.seq.token_ids.iter().enumerate() {
            assert_eq!(h0.row(j), table.row(id as usize), "row {j}");
        }
    }

    #[test]
    fn encode_twice_identical() {
        for kind in [EncoderKind::EmbeddingOnly, EncoderKind::TinyTransformer] {
            let model = tiny_model(kind);
            let f = function_from("f", "int x = 1;\n");
            let p = model.prepare(&f).unwrap();
            let a = model.encode_tokens(&p).unwrap();
            let b = model.encode_tokens(&p).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pad_id_surgery_leaves_outputs_unchanged() {
        // Rewriting token ids in the PAD tail must not move either head:
        // PAD rows are pool-excluded, adjacency-isolated, key-masked, and
        // ineligible for the localization readout.
        for kind in [EncoderKind::EmbeddingOnly, EncoderKind::TinyTransformer] {
            let model = tiny_model(kind);
            let f = function_from("f", "int x;\nx = 2;\n");
            let p = model.prepare(&f).unwrap();
            assert!(p.seq.n_real + 2 < p.seq.max_len(), "fixture must have PAD");
            let base = model.forward(&p).unwrap();

            let mut surgered = p.clone();
            surgered.seq.token_ids[p.seq.n_real] = crate::tokenizer::UNK_ID;
            surgered.seq.token_ids[p.seq.max_len() - 1] = 77;
            let out = model.forward(&surgered).unwrap();
            assert_eq!(base, out, "{kind:?}");
        }
    }

    #[test]
    fn gcn_forward_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let h0 = normal_matrix(&mut rng, 6, 4, 1.0);
            let mut a = Array2::zeros((6, 6));
            for i in 0..6 {
                for j in 0..6 {
                    if rng.random::<f64>() < 0.4 {
                        a[[i, j]] = 1.0;
                        a[[j, i]] = 1.0;
                    }
                }
            }
            let w = vec![Array2::zeros((4, 4)); 3];
            let h = gcn_forward(&h0, &a, &w).unwrap();
            assert_eq!(h, h0);
        }
    }

    #[test]
    fn gcn_forward_hand_example() {
        let a = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let h0 = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let w = vec![arr2(&[[1.0, 0.0], [0.0, 1.0]])];
        let h = gcn_forward(&h0, &a, &w).unwrap();
        assert_eq!(h, arr2(&[[2.0, 1.0], [1.0, 2.0]]));
    }

    #[test]
    fn gcn_forward_identity_adjacency_doubles_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h0 = normal_matrix(&mut rng, 5, 3, 1.0).mapv(f64::abs);
        let a = Array2::from_diag_elem(5, 1.0);
        let w = vec![Array2::from_diag_elem(3, 1.0)];
        let h = gcn_forward(&h0, &a, &w).unwrap();
        assert_abs_diff_eq!(h, h0.mapv(|v| 2.0 * v), epsilon = 1e-12);
    }

    #[test]
    fn gcn_forward_reports_offending_layer() {
        let h0 = arr2(&[[1e308, 1e308], [1e308, 1e308]]);
        let a = arr2(&[[1.0, 1.0], [1.0, 1.0]]);
        let w = vec![Array2::from_diag_elem(2, 1.0), Array2::from_diag_elem(2, 1.0)];
        let err = gcn_forward(&h0, &a, &w).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn in_graph_gcn_matches_standalone() {
        let model = tiny_model(EncoderKind::EmbeddingOnly);
        let f = function_from("f", "int a = b + c;\nreturn a;\n");
        let p = model.prepare(&f).unwrap();
        let fg = model.build_forward(&p, &ForwardOpts::default()).unwrap();
        let h0 = fg.graph.value(fg.h0).clone();
        let weights: Vec<Array2<f64>> = (0..model.config().gcn.n_layers)
            .map(|l| model.param(&format!("gcn{l}.w")).unwrap().clone())
            .collect();
        let standalone = gcn_forward(&h0, &p.adjacency, &weights).unwrap();
        assert_abs_diff_eq!(
            fg.graph.value(fg.gcn_out),
            &standalone,
            epsilon = 1e-12
        );
    }

    #[test]
    fn forward_shapes_and_ranges() {
        for kind in [EncoderKind::EmbeddingOnly, EncoderKind::TinyTransformer] {
            let model = tiny_model(kind);
            let f = function_from("f", "int x;\nint y;\nreturn x + y;\n");
            let p = model.prepare(&f).unwrap();
            let out = model.forward(&p).unwrap();
            assert_eq!(out.class_logits.len(), 11);
            assert!(out.class_logits.iter().all(|v| v.is_finite()));
            let lc = f64::from(p.line_count);
            assert!(out.loc_pred.0 > 0.0 && out.loc_pred.0 < lc);
            assert!(out.loc_pred.1 > 0.0 && out.loc_pred.1 < lc);
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let model = tiny_model(EncoderKind::TinyTransformer);
        let f = function_from("f", "char buf[8];\nstrcpy(buf, src);\n");
        let a = model.predict(&f).unwrap();
        let b = model.predict(&f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_class_zero_has_no_range() {
        let mut cfg = tiny_config(EncoderKind::EmbeddingOnly);
        cfg.head_hidden = None;
        let mut model = VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).unwrap();
        let mut bias = Array2::zeros((1, 11));
        bias[[0, 0]] = 50.0;
        model.set_param("head_cls.b", bias).unwrap();
        let f = function_from("f", "int x;\n");
        let d = model.predict(&f).unwrap();
        assert_eq!(d.class, CweClass::NON_VULNERABLE);
        assert!(d.range.is_none());
        assert!(d.confidence > 0.99);
    }

    #[test]
    fn forced_vulnerable_class_reports_a_range() {
        let mut cfg = tiny_config(EncoderKind::EmbeddingOnly);
        cfg.head_hidden = None;
        let mut model = VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).unwrap();
        let mut bias = Array2::zeros((1, 11));
        bias[[0, 3]] = 50.0;
        model.set_param("head_cls.b", bias).unwrap();
        let f = function_from("f", "int x;\nint y;\nint z;\n");
        let d = model.predict(&f).unwrap();
        assert!(d.class.is_vulnerable());
        let r = d.range.expect("vulnerable prediction carries a range");
        assert!(r.start() >= 1 && r.end() <= 3);
    }

    #[test]
    fn rescale_snaps_to_bucket_and_swaps() {
        assert_eq!(rescale_loc((4.6, 2.2), 10), (3, 5));
        assert_eq!(rescale_loc((0.2, 0.9), 10), (1, 1));
        assert_eq!(rescale_loc((3.0, 3.0), 10), (3, 3));
        assert_eq!(rescale_loc((2.1, 2.1), 10), (3, 3));
        assert_eq!(rescale_loc((-4.0, 99.0), 10), (1, 10));
        assert_eq!(rescale_loc((9.99, 1.01), 10), (2, 10));
    }

    #[test]
    fn set_param_validates_name_and_shape() {
        let mut model = tiny_model(EncoderKind::EmbeddingOnly);
        assert!(model.set_param("no_such", Array2::zeros((1, 1))).is_err());
        let err = model
            .set_param("head_loc.start", Array2::zeros((3, 3)))
            .unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn external_embeddings_roundtrip_and_drive_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.txt");
        let cfg = tiny_config(EncoderKind::External);
        let mut model = VulnModel::new(cfg.clone(), SvgConfig::default(), byte_vocab()).unwrap();
        let f = function_from("fn-1", "int x;\nreturn x;\n");

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ExternalEmbeddings::new();
        store
            .insert("fn-1", normal_matrix(&mut rng, cfg.max_len, 16, 0.5))
            .unwrap();
        store.save(&path).unwrap();
        let loaded = ExternalEmbeddings::load(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.get("fn-1"), store.get("fn-1"));

        model.set_external_embeddings(loaded).unwrap();
        let p = model.prepare(&f).unwrap();
        let h0 = model.encode_tokens(&p).unwrap();
        assert_eq!(&h0, store.get("fn-1").unwrap());
        let a = model.predict(&f).unwrap();
        let b = model.predict(&f).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn external_encoder_requires_matching_entry() {
        let cfg = tiny_config(EncoderKind::External);
        let mut model = VulnModel::new(cfg, SvgConfig::default(), byte_vocab()).unwrap();
        let f = function_from("f", "int x;\n");
        let p = model.prepare(&f).unwrap();
        assert!(model.forward(&p).is_err(), "no store attached");

        let mut store = ExternalEmbeddings::new();
        store.insert("other", Array2::zeros((48, 16))).unwrap();
        model.set_external_embeddings(store).unwrap();
        let err = model.forward(&p).unwrap_err();
        assert!(err.to_string().contains("no external embedding"));

        let mut store = ExternalEmbeddings::new();
        store.insert("f", Array2::zeros((48, 8))).unwrap();
        model.set_external_embeddings(store).unwrap();
        let err = model.forward(&p).unwrap_err();
        assert!(err.to_string().contains("expected (48, 16)"));
    }

    #[test]
    fn external_embeddings_reject_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "wrong-magic/9\n").unwrap();
        assert!(ExternalEmbeddings::load(&path).is_err());
        std::fs::write(&path, format!("{EMBED_MAGIC}\nid\t2\t2\tAAA\n")).unwrap();
        assert!(ExternalEmbeddings::load(&path).is_err());
    }
}
