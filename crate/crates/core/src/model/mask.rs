use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-layer binary keep-vectors over instrumented activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMask {
    pub ratio: f64,
    pub layers: BTreeMap<String, Vec<bool>>,
}

impl SaliencyMask {
    pub fn keep_count(&self, layer: &str) -> Option<usize> {
        self.layers.get(layer).map(|k| k.iter().filter(|&&b| b).count())
    }

    pub fn total_kept(&self) -> usize {
        self.layers.values().map(|k| k.iter().filter(|&&b| b).count()).sum()
    }

    pub fn total_width(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }
}
