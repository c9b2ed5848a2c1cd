//! Semantic knowledge base: attributes (challenge words), concepts (secret
//! vocabulary) and the binary relation between them.
//!
//! The on-disk form is a single JSON document:
//!
//! ```json
//! {"concepts": [{"id": "yellow", "label": "yellow"}],
//!  "attributes": [{"id": "sunflower", "label": "sunflower"}],
//!  "relations": [["sunflower", "yellow"]]}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Read;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

/// Characters that cannot appear in a concept id because the canonical
/// formula syntax uses them as delimiters.
const RESERVED_CONCEPT_CHARS: &[char] = &['(', ')', ','];

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("malformed knowledge base: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("I/O error reading knowledge base: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid knowledge base: {0}")]
    Validation(#[from] ValidationError),
    #[error("unknown id `{0}`")]
    UnknownId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("empty {kind} id")]
    EmptyId { kind: &'static str },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("concept id `{0}` contains whitespace or one of `(),`")]
    ReservedCharacter(String),
    #[error("relation ({attribute}, {concept}) references undeclared attribute `{attribute}`")]
    DanglingAttribute { attribute: String, concept: String },
    #[error("relation ({attribute}, {concept}) references undeclared concept `{concept}`")]
    DanglingConcept { attribute: String, concept: String },
    #[error("duplicate relation ({attribute}, {concept})")]
    DuplicateRelation { attribute: String, concept: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub id: String,
    pub label: String,
}

/// An item presented to the user as a challenge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    concepts: Vec<Concept>,
    attributes: Vec<Attribute>,
    relations: Vec<(String, String)>,
}

/// A validated, immutable knowledge base.
///
/// Attributes and concepts keep their file order; that order defines the
/// attribute index used by truth tables throughout the crate.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    concepts: Vec<Concept>,
    attributes: Vec<Attribute>,
    relations: Vec<(String, String)>,
    concept_index: HashMap<String, usize>,
    attribute_index: HashMap<String, usize>,
    /// For each concept, the set of related attribute indices.
    related: Vec<FixedBitSet>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts
            && self.attributes == other.attributes
            && self.relations == other.relations
    }
}

impl Eq for KnowledgeBase {}

impl KnowledgeBase {
    /// Reads and validates a knowledge base from its JSON form.
    pub fn load<R: Read>(source: R) -> Result<Self, KbError> {
        let file: KbFile = serde_json::from_reader(source)?;
        Ok(Self::from_parts(file.concepts, file.attributes, file.relations)?)
    }

    pub fn from_json_str(json: &str) -> Result<Self, KbError> {
        Self::load(json.as_bytes())
    }

    pub fn from_parts(
        concepts: Vec<Concept>,
        attributes: Vec<Attribute>,
        relations: Vec<(String, String)>,
    ) -> Result<Self, ValidationError> {
        let mut concept_index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if c.id.is_empty() {
                return Err(ValidationError::EmptyId { kind: "concept" });
            }
            if c.id.chars().any(|ch| ch.is_whitespace() || RESERVED_CONCEPT_CHARS.contains(&ch)) {
                return Err(ValidationError::ReservedCharacter(c.id.clone()));
            }
            if concept_index.insert(c.id.clone(), i).is_some() {
                return Err(ValidationError::DuplicateId { kind: "concept", id: c.id.clone() });
            }
        }

        let mut attribute_index = HashMap::with_capacity(attributes.len());
        for (i, a) in attributes.iter().enumerate() {
            if a.id.is_empty() {
                return Err(ValidationError::EmptyId { kind: "attribute" });
            }
            if attribute_index.insert(a.id.clone(), i).is_some() {
                return Err(ValidationError::DuplicateId { kind: "attribute", id: a.id.clone() });
            }
        }

        let mut related = vec![FixedBitSet::with_capacity(attributes.len()); concepts.len()];
        let mut seen = HashSet::with_capacity(relations.len());
        for (attribute, concept) in &relations {
            let Some(&ai) = attribute_index.get(attribute) else {
                return Err(ValidationError::DanglingAttribute {
                    attribute: attribute.clone(),
                    concept: concept.clone(),
                });
            };
            let Some(&ci) = concept_index.get(concept) else {
                return Err(ValidationError::DanglingConcept {
                    attribute: attribute.clone(),
                    concept: concept.clone(),
                });
            };
            if !seen.insert((ai, ci)) {
                return Err(ValidationError::DuplicateRelation {
                    attribute: attribute.clone(),
                    concept: concept.clone(),
                });
            }
            related[ci].insert(ai);
        }

        Ok(Self { concepts, attributes, relations, concept_index, attribute_index, related })
    }

    /// Serializes back to the JSON file format.
    pub fn to_json(&self) -> String {
        let file = KbFile {
            concepts: self.concepts.clone(),
            attributes: self.attributes.clone(),
            relations: self.relations.clone(),
        };
        serde_json::to_string_pretty(&file).expect("knowledge base serialization is infallible")
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn relations(&self) -> &[(String, String)] {
        &self.relations
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attribute_index(&self, id: &str) -> Result<usize, KbError> {
        self.attribute_index.get(id).copied().ok_or_else(|| KbError::UnknownId(id.to_owned()))
    }

    pub fn concept_index(&self, id: &str) -> Result<usize, KbError> {
        self.concept_index.get(id).copied().ok_or_else(|| KbError::UnknownId(id.to_owned()))
    }

    pub fn attribute(&self, index: usize) -> &Attribute {
        &self.attributes[index]
    }

    pub fn has_concept(&self, id: &str) -> bool {
        self.concept_index.contains_key(id)
    }

    pub fn is_related(&self, attribute: &str, concept: &str) -> Result<bool, KbError> {
        let ai = self.attribute_index(attribute)?;
        let ci = self.concept_index(concept)?;
        Ok(self.related[ci].contains(ai))
    }

    /// Ids of the attributes related to `concept`.
    pub fn related_attribute_set(&self, concept: &str) -> Result<BTreeSet<String>, KbError> {
        let ci = self.concept_index(concept)?;
        Ok(self.related[ci].ones().map(|ai| self.attributes[ai].id.clone()).collect())
    }

    /// Related attributes of a concept as a bitset over attribute indices.
    pub(crate) fn related_bits(&self, concept_index: usize) -> &FixedBitSet {
        &self.related[concept_index]
    }
}

/// The knowledge base shipped with the repository for demos and tests.
pub const BUNDLED_KB_JSON: &str = include_str!("../../../data/example-kb.json");

/// A 12-attribute, 4-concept knowledge base small enough for exhaustive
/// attack experiments.
pub const TOY_KB_JSON: &str = include_str!("../../../data/toy-kb.json");

pub fn bundled() -> KnowledgeBase {
    KnowledgeBase::from_json_str(BUNDLED_KB_JSON).expect("bundled knowledge base is valid")
}

pub fn toy() -> KnowledgeBase {
    KnowledgeBase::from_json_str(TOY_KB_JSON).expect("toy knowledge base is valid")
}
