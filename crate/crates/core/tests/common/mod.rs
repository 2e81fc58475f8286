#![allow(dead_code)]

use lahcn::corpus::{Document, Vocabulary};
use lahcn::hierarchy::LabelHierarchy;
use lahcn::training::{init_params, ModelParams, TrainConfig};

/// Two levels with 2 and 3 labels.
pub fn micro_hierarchy() -> LabelHierarchy {
    LabelHierarchy::from_edges(&[("root", "A"), ("root", "B"), ("A", "A1"), ("A", "A2"), ("B", "B1")]).unwrap()
}

/// Two documents; the second is shorter so the batch carries padding.
pub fn micro_docs(hier: &LabelHierarchy) -> Vec<Document> {
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    vec![
        Document::new("m1", toks("alpha beta gamma alpha delta eps"), ["A1", "B1"], hier).unwrap(),
        Document::new("m2", toks("gamma zeta beta eta"), ["A2"], hier).unwrap(),
    ]
}

/// N = 6, d = 4, two components per level, batch of 2, seed 7.
pub fn micro_config() -> TrainConfig {
    TrainConfig { max_len: 6, dim: 4, components: vec![2], batch_size: 2, seed: 7, ..TrainConfig::default() }
}

pub fn micro_model(cfg: &TrainConfig) -> (LabelHierarchy, Vec<Document>, ModelParams) {
    let hier = micro_hierarchy();
    let docs = micro_docs(&hier);
    let vocab = Vocabulary::build(&docs, 1).unwrap();
    let params = init_params(cfg, &hier, &vocab, None).unwrap();
    (hier, docs, params)
}
