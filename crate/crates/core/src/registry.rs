//! Modalities and the immutable set of tools available to the planner.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::simkit::SemanticId;

/// The data kind flowing between tools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("Text"),
            Modality::Image => f.write_str("Image"),
        }
    }
}

/// A registered expert model: typed inputs, typed output and the simulated
/// behavior that stands in for the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    pub inputs: Vec<Modality>,
    pub output: Modality,
    pub semantic: SemanticId,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, inputs: &[Modality], output: Modality, semantic: SemanticId) -> Self {
        Self {
            name: name.into(),
            inputs: inputs.to_vec(),
            output,
            semantic,
        }
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    /// Tools with two inputs merge decoding branches.
    pub fn is_join(&self) -> bool {
        self.inputs.len() == 2
    }

    /// Whitespace-split word tokens of the name.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.name.split_whitespace()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("tool name already registered: {0}")]
    DuplicateName(String),
    #[error("tool `{name}` has {arity} inputs; expected 1 or 2")]
    BadArity { name: String, arity: usize },
    #[error("tool name must be non-empty")]
    EmptyName,
    #[error("tool `{name}` signature does not match semantic {semantic:?}")]
    BadSignature { name: String, semantic: SemanticId },
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("invalid registry document: {0}")]
    Parse(String),
}

/// Ordered, name-indexed collection of tools. Iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ToolRegistry {
    tools: IndexMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a registry extended with `spec`; `self` is left untouched.
    pub fn register_tool(&self, spec: ToolSpec) -> Result<ToolRegistry, RegistryError> {
        let mut next = self.clone();
        next.insert(spec)?;
        Ok(next)
    }

    /// In-place form of [`register_tool`](Self::register_tool), used while building.
    pub fn insert(&mut self, spec: ToolSpec) -> Result<(), RegistryError> {
        if spec.name.trim().is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if !matches!(spec.inputs.len(), 1 | 2) {
            return Err(RegistryError::BadArity {
                name: spec.name,
                arity: spec.inputs.len(),
            });
        }
        let (ins, out) = spec.semantic.signature();
        if ins != spec.inputs.as_slice() || out != spec.output {
            return Err(RegistryError::BadSignature {
                name: spec.name,
                semantic: spec.semantic,
            });
        }
        if self.tools.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateName(spec.name));
        }
        self.tools.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn get(&self, name: &str) -> Result<&ToolSpec, RegistryError> {
        self.lookup(name).ok_or_else(|| RegistryError::UnknownTool(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    /// Every tool whose first input is `current` and whose name is not in
    /// `used`, in registry order. Join tools are included.
    pub fn compatible_successors(&self, current: Modality, used: &BTreeSet<String>) -> Vec<&ToolSpec> {
        self.iter().filter(|t| t.inputs[0] == current && !used.contains(&t.name)).collect()
    }

    pub fn to_json(&self) -> String {
        let tools: Vec<&ToolSpec> = self.iter().collect();
        serde_json::to_string_pretty(&tools).expect("registry serializes")
    }

    pub fn from_json(doc: &str) -> Result<ToolRegistry, RegistryError> {
        let tools: Vec<ToolSpec> = serde_json::from_str(doc).map_err(|e| RegistryError::Parse(e.to_string()))?;
        let mut reg = ToolRegistry::new();
        for t in tools {
            reg.insert(t)?;
        }
        Ok(reg)
    }
}

impl Serialize for ToolRegistry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ToolRegistry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tools = Vec::<ToolSpec>::deserialize(d)?;
        let mut reg = ToolRegistry::new();
        for t in tools {
            reg.insert(t).map_err(serde::de::Error::custom)?;
        }
        Ok(reg)
    }
}

/// The fourteen-tool default set.
pub fn default_registry() -> ToolRegistry {
    use Modality::{Image, Text};
    use SemanticId::*;
    let specs = [
        ("Image Classification", &[Image][..], Text, Classify),
        ("Colorization", &[Image][..], Image, RemoveGray),
        ("Object Detection", &[Image][..], Text, Detect),
        ("Image Deblurring", &[Image][..], Image, RemoveBlur),
        ("Image Denoising", &[Image][..], Image, RemoveNoise),
        ("Image Super Resolution", &[Image][..], Image, RemoveLowRes),
        ("Image Captioning", &[Image][..], Text, Caption),
        ("Text to Image Generation", &[Text][..], Image, Generate),
        ("Visual Question Answering", &[Image, Text][..], Text, Vqa),
        ("Sentiment Analysis", &[Text][..], Text, Sentiment),
        ("Question Answering", &[Text, Text][..], Text, Qa),
        ("Text Summarization", &[Text][..], Text, Summarize),
        ("Machine Translation", &[Text][..], Text, TranslateEnDe),
        ("Fill Mask", &[Text][..], Text, RemoveMask),
    ];
    let mut reg = ToolRegistry::new();
    for (name, ins, out, sem) in specs {
        reg.insert(ToolSpec::new(name, ins, out, sem))
            .expect("default registry is well-formed");
    }
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::{Image, Text};

    fn names(v: &[&ToolSpec]) -> Vec<String> {
        v.iter().map(|t| t.name.clone()).collect()
    }

    #[test]
    fn register_into_empty() {
        let reg = ToolRegistry::new()
            .register_tool(ToolSpec::new("Image Denoising", &[Image], Image, SemanticId::RemoveNoise))
            .unwrap();
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn join_tool_flagged() {
        let reg = ToolRegistry::new()
            .register_tool(ToolSpec::new("Question Answering", &[Text, Text], Text, SemanticId::Qa))
            .unwrap();
        assert!(reg.lookup("Question Answering").unwrap().is_join());
    }

    #[test]
    fn duplicate_name_rejected() {
        let spec = ToolSpec::new("Image Denoising", &[Image], Image, SemanticId::RemoveNoise);
        let reg = ToolRegistry::new().register_tool(spec.clone()).unwrap();
        assert_eq!(reg.register_tool(spec), Err(RegistryError::DuplicateName("Image Denoising".into())));
        // prior entries untouched
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn bad_arity_rejected() {
        let spec = ToolSpec {
            name: "Nothing".into(),
            inputs: vec![],
            output: Text,
            semantic: SemanticId::Summarize,
        };
        assert!(matches!(
            ToolRegistry::new().register_tool(spec),
            Err(RegistryError::BadArity { arity: 0, .. })
        ));
        let spec = ToolSpec {
            name: "Triple".into(),
            inputs: vec![Text, Text, Text],
            output: Text,
            semantic: SemanticId::Qa,
        };
        assert!(matches!(
            ToolRegistry::new().register_tool(spec),
            Err(RegistryError::BadArity { arity: 3, .. })
        ));
    }

    #[test]
    fn signature_must_match_semantic() {
        let spec = ToolSpec::new("Caption Text", &[Text], Text, SemanticId::Caption);
        assert!(matches!(
            ToolRegistry::new().register_tool(spec),
            Err(RegistryError::BadSignature { .. })
        ));
    }

    #[test]
    fn default_registry_shape() {
        let reg = default_registry();
        assert_eq!(reg.len(), 14);
        assert_eq!(reg.lookup("Visual Question Answering").unwrap().inputs, vec![Image, Text]);
        assert_eq!(reg.lookup("Colorization").unwrap().output, Image);
        assert_eq!(reg.lookup("Question Answering").unwrap().inputs, vec![Text, Text]);
        assert_eq!(default_registry(), reg);
        let sems: BTreeSet<_> = reg.iter().map(|t| t.semantic).collect();
        assert_eq!(sems.len(), 14);
    }

    #[test]
    fn text_successors() {
        let reg = default_registry();
        let got = names(&reg.compatible_successors(Text, &BTreeSet::new()));
        assert_eq!(
            got,
            vec![
                "Text to Image Generation",
                "Sentiment Analysis",
                "Question Answering",
                "Text Summarization",
                "Machine Translation",
                "Fill Mask"
            ]
        );
        let used: BTreeSet<String> = ["Machine Translation".to_string()].into();
        let got = names(&reg.compatible_successors(Text, &used));
        assert_eq!(got.len(), 5);
        assert!(!got.contains(&"Machine Translation".to_string()));
    }

    #[test]
    fn image_successors_exhausted() {
        let reg = default_registry();
        let used: BTreeSet<String> = reg.iter().filter(|t| t.inputs[0] == Image).map(|t| t.name.clone()).collect();
        assert!(reg.compatible_successors(Image, &used).is_empty());
    }

    #[test]
    fn json_roundtrip_field_names() {
        let reg = default_registry();
        let doc = reg.to_json();
        let v: serde_json::Value = serde_json::from_str(&doc).unwrap();
        let first = &v[0];
        assert_eq!(first["name"], "Image Classification");
        assert_eq!(first["inputs"], serde_json::json!(["Image"]));
        assert_eq!(first["output"], "Text");
        assert_eq!(first["semantic"], "Classify");
        assert_eq!(ToolRegistry::from_json(&doc).unwrap(), reg);
    }

    #[test]
    fn json_rejects_duplicates() {
        let doc = r#"[{"name":"A","inputs":["Text"],"output":"Text","semantic":"Summarize"},
                      {"name":"A","inputs":["Text"],"output":"Text","semantic":"Summarize"}]"#;
        assert!(matches!(ToolRegistry::from_json(doc), Err(RegistryError::DuplicateName(_))));
    }
}
