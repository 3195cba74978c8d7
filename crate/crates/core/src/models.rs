//! Example workloads shipped with the crate.

use crate::error::ModelError;
use crate::model_spec::{parse_model, ModelGraph};

const BUNDLED: [(&str, &str); 5] = [
    ("tinyclip_a", include_str!("../models/tinyclip_a.json")),
    ("tinyclip_b", include_str!("../models/tinyclip_b.json")),
    ("mdetr_e", include_str!("../models/mdetr_e.json")),
    ("missiongnn_h", include_str!("../models/missiongnn_h.json")),
    ("missiongnn_k", include_str!("../models/missiongnn_k.json")),
];

pub fn names() -> Vec<&'static str> {
    BUNDLED.iter().map(|b| b.0).collect()
}

/// Source text of a bundled model.
pub fn source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|b| b.0 == name).map(|b| b.1)
}

pub fn load(name: &str) -> Option<Result<ModelGraph, ModelError>> {
    source(name).map(parse_model)
}
