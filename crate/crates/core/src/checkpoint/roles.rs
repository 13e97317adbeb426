//! Mapping tensor names onto architectural roles (layer index and matrix kind).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TensorKind {
    Q,
    K,
    V,
    O,
    GateProj,
    UpProj,
    DownProj,
    LayerNorm,
    Embedding,
    Head,
    Other,
}

impl TensorKind {
    pub const ALL: [TensorKind; 11] = [
        TensorKind::Q,
        TensorKind::K,
        TensorKind::V,
        TensorKind::O,
        TensorKind::GateProj,
        TensorKind::UpProj,
        TensorKind::DownProj,
        TensorKind::LayerNorm,
        TensorKind::Embedding,
        TensorKind::Head,
        TensorKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Q => "Q",
            TensorKind::K => "K",
            TensorKind::V => "V",
            TensorKind::O => "O",
            TensorKind::GateProj => "GateProj",
            TensorKind::UpProj => "UpProj",
            TensorKind::DownProj => "DownProj",
            TensorKind::LayerNorm => "LayerNorm",
            TensorKind::Embedding => "Embedding",
            TensorKind::Head => "Head",
            TensorKind::Other => "Other",
        }
    }
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TensorKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tensor kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TensorRole {
    pub layer_index: Option<usize>,
    pub kind: TensorKind,
}

// First matching rule wins, so normalization precedes the projection rules
// (Qwen3 and friends carry `q_norm`/`k_norm` tensors inside attention blocks).
const BUILTIN_RULES: &[(&str, TensorKind)] = &[
    (r"(?i)(?:^|\.)(?:[a-z0-9_]*norm[a-z0-9_]*|ln_?[a-z0-9]*)(?:\.|$)", TensorKind::LayerNorm),
    (r"(?:^|\.)(?:embed_tokens|tok_embeddings|wte|word_embeddings|embed_in|embeddings)(?:\.|$)", TensorKind::Embedding),
    (r"(?:^|\.)(?:lm_head|embed_out)(?:\.|$)|^output\.weight$", TensorKind::Head),
    (r"(?:^|\.)(?:q_proj|q_a_proj|q_b_proj|wq|query)(?:\.|$)", TensorKind::Q),
    (r"(?:^|\.)(?:k_proj|wk|key)(?:\.|$)", TensorKind::K),
    (r"(?:^|\.)(?:v_proj|wv|value)(?:\.|$)", TensorKind::V),
    (r"(?:^|\.)(?:o_proj|out_proj|wo)(?:\.|$)|(?:attn|attention)\.dense(?:\.|$)", TensorKind::O),
    (r"(?:^|\.)(?:gate_proj|w1)(?:\.|$)", TensorKind::GateProj),
    (r"(?:^|\.)(?:up_proj|w3)(?:\.|$)", TensorKind::UpProj),
    (r"(?:^|\.)(?:down_proj|w2)(?:\.|$)", TensorKind::DownProj),
];

const BUILTIN_LAYER_PATTERNS: &[&str] = &[r"(?:^|\.)(?:layers|layer|h|blocks|block)\.(\d+)(?:\.|$)"];

/// User-supplied pattern file. Rules are tried before the built-in table; layer
/// patterns, when present, replace the built-in ones. Each layer pattern must have
/// exactly one capture group holding the index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RolePatternFile {
    #[serde(default)]
    pub rules: Vec<RoleRuleSpec>,
    #[serde(default)]
    pub layer_patterns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleRuleSpec {
    pub pattern: String,
    pub kind: TensorKind,
}

/// Ordered, configurable name-pattern table.
#[derive(Debug, Clone)]
pub struct RoleTable {
    rules: Vec<(Regex, TensorKind)>,
    layer_patterns: Vec<Regex>,
}

impl Default for RoleTable {
    fn default() -> Self {
        Self::builtin()
    }
}

impl RoleTable {
    /// Table covering Llama, Qwen, Mistral and DeepSeek naming.
    pub fn builtin() -> Self {
        let rules = BUILTIN_RULES
            .iter()
            .map(|(p, k)| (Regex::new(p).expect("builtin role pattern"), *k))
            .collect();
        let layer_patterns = BUILTIN_LAYER_PATTERNS
            .iter()
            .map(|p| Regex::new(p).expect("builtin layer pattern"))
            .collect();
        RoleTable {
            rules,
            layer_patterns,
        }
    }

    pub fn with_overrides(spec: &RolePatternFile) -> Result<Self> {
        let mut table = Self::builtin();
        let mut rules = Vec::with_capacity(spec.rules.len() + table.rules.len());
        for r in &spec.rules {
            rules.push((Regex::new(&r.pattern)?, r.kind));
        }
        rules.append(&mut table.rules);
        table.rules = rules;
        if !spec.layer_patterns.is_empty() {
            table.layer_patterns = spec
                .layer_patterns
                .iter()
                .map(|p| {
                    let re = Regex::new(p)?;
                    if re.captures_len() != 2 {
                        return Err(Error::Config(format!(
                            "layer pattern {p:?} needs exactly one capture group"
                        )));
                    }
                    Ok(re)
                })
                .collect::<Result<_>>()?;
        }
        Ok(table)
    }

    /// Loads a JSON pattern file and merges it over the built-in table.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: RolePatternFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::with_overrides(&spec)
    }

    pub fn classify(&self, name: &str) -> TensorRole {
        let layer_index = self.layer_patterns.iter().find_map(|re| {
            re.captures(name)
                .and_then(|c| c.get(1))
                .and_then(|m| m.as_str().parse::<usize>().ok())
        });
        let kind = self
            .rules
            .iter()
            .find(|(re, _)| re.is_match(name))
            .map(|(_, k)| *k)
            .unwrap_or(TensorKind::Other);
        TensorRole { layer_index, kind }
    }
}

/// Classifies a tensor name with the built-in table.
pub fn classify_tensor(name: &str) -> TensorRole {
    use std::sync::OnceLock;
    static TABLE: OnceLock<RoleTable> = OnceLock::new();
    TABLE.get_or_init(RoleTable::builtin).classify(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn role(layer: Option<usize>, kind: TensorKind) -> TensorRole {
        TensorRole {
            layer_index: layer,
            kind,
        }
    }

    #[test]
    fn llama_names() {
        assert_eq!(
            classify_tensor("model.layers.3.self_attn.q_proj.weight"),
            role(Some(3), TensorKind::Q)
        );
        assert_eq!(
            classify_tensor("model.layers.0.input_layernorm.weight"),
            role(Some(0), TensorKind::LayerNorm)
        );
        assert_eq!(classify_tensor("lm_head.weight"), role(None, TensorKind::Head));
        assert_eq!(
            classify_tensor("model.embed_tokens.weight"),
            role(None, TensorKind::Embedding)
        );
        assert_eq!(classify_tensor("model.norm.weight"), role(None, TensorKind::LayerNorm));
        assert_eq!(
            classify_tensor("model.layers.31.post_attention_layernorm.weight"),
            role(Some(31), TensorKind::LayerNorm)
        );
        assert_eq!(
            classify_tensor("model.layers.12.mlp.down_proj.weight"),
            role(Some(12), TensorKind::DownProj)
        );
    }

    #[test]
    fn other_families() {
        // Qwen attention biases and per-head norms.
        assert_eq!(
            classify_tensor("model.layers.2.self_attn.k_proj.bias"),
            role(Some(2), TensorKind::K)
        );
        assert_eq!(
            classify_tensor("model.layers.2.self_attn.q_norm.weight"),
            role(Some(2), TensorKind::LayerNorm)
        );
        // Mistral reference naming.
        assert_eq!(
            classify_tensor("layers.7.attention.wo.weight"),
            role(Some(7), TensorKind::O)
        );
        assert_eq!(
            classify_tensor("layers.7.feed_forward.w3.weight"),
            role(Some(7), TensorKind::UpProj)
        );
        assert_eq!(classify_tensor("output.weight"), role(None, TensorKind::Head));
        // DeepSeek MoE expert.
        assert_eq!(
            classify_tensor("model.layers.5.mlp.experts.17.gate_proj.weight"),
            role(Some(5), TensorKind::GateProj)
        );
        assert_eq!(
            classify_tensor("model.layers.5.self_attn.q_a_proj.weight"),
            role(Some(5), TensorKind::Q)
        );
        // GPT-2 style.
        assert_eq!(classify_tensor("h.4.ln_1.weight"), role(Some(4), TensorKind::LayerNorm));
        assert_eq!(classify_tensor("fc1.weight"), role(None, TensorKind::Other));
    }

    #[test]
    fn overrides_take_precedence() {
        let spec = RolePatternFile {
            rules: vec![RoleRuleSpec {
                pattern: r"^fc2\.".into(),
                kind: TensorKind::Head,
            }],
            layer_patterns: vec![r"stage(\d+)".into()],
        };
        let t = RoleTable::with_overrides(&spec).unwrap();
        assert_eq!(t.classify("fc2.weight"), role(None, TensorKind::Head));
        assert_eq!(t.classify("stage4.q_proj.weight"), role(Some(4), TensorKind::Q));
        assert_eq!(t.classify("layers.4.q_proj.weight"), role(None, TensorKind::Q));
    }

    #[test]
    fn bad_layer_pattern_rejected() {
        let spec = RolePatternFile {
            rules: vec![],
            layer_patterns: vec!["layers".into()],
        };
        assert!(RoleTable::with_overrides(&spec).is_err());
    }
}
