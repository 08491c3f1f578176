//! Shared fixtures for in-crate tests: a byte-level vocabulary, small
//! labeled functions, and a deliberately tiny model configuration.

use crate::corpus::{CodeFunction, Corpus, CweClass, LineRange, VulnLabel};
use crate::model::{EncoderKind, ModelConfig, VulnModel};
use crate::svg::SvgConfig;
use crate::tokenizer::{train_bpe, Vocab, MIN_VOCAB_SIZE};

/// A merge-free vocabulary: every byte is its own token.
pub(crate) fn byte_vocab() -> Vocab {
    let f = CodeFunction::new("seed", "seed.c", 1, "z\n", None).unwrap();
    let corpus = Corpus::new(vec![f]).unwrap();
    train_bpe(&corpus, MIN_VOCAB_SIZE).unwrap()
}

pub(crate) fn function_from(id: &str, src: &str) -> CodeFunction {
    CodeFunction::new(id, "fixture.c", 1, src, None).unwrap()
}

pub(crate) fn labeled_function(
    id: &str,
    src: &str,
    class: u16,
    range: Option<(u32, u32)>,
) -> CodeFunction {
    let class = CweClass::from_code(class).unwrap();
    let range = range.map(|(s, e)| LineRange::new(s, e).unwrap());
    let label = VulnLabel::new(class, range).unwrap();
    CodeFunction::new(id, "fixture.c", 1, src, Some(label)).unwrap()
}

pub(crate) fn tiny_config(kind: EncoderKind) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.kind = kind;
    cfg.encoder.layers = 1;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.seed = 7;
    cfg.gcn.n_layers = 1;
    cfg.gcn.feature_dim = 16;
    cfg.head_hidden = Some(8);
    cfg.max_len = 48;
    cfg
}

pub(crate) fn tiny_model(kind: EncoderKind) -> VulnModel {
    VulnModel::new(tiny_config(kind), SvgConfig::default(), byte_vocab()).unwrap()
}
