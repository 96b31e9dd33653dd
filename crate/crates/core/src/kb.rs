//! Knowledge-base data model, entity serialization and KB views.
//!
//! A KB file is a JSON array of flat objects. The keys `id` and `domain` are
//! reserved; every other key is an attribute. The schema is the union of
//! attribute names in order of first appearance, so a cross-domain KB gets
//! one schema shared by all domains.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dialog::Dialog;
use crate::error::{io_err, Error, Result};
use crate::text;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttributeSchema {
    names: Vec<String>,
}

impl AttributeSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::Validation(format!("duplicate attribute `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// N, the attribute count.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn push_if_new(&mut self, name: &str) {
        if self.position(name).is_none() {
            self.names.push(name.to_string());
        }
    }
}

/// Which attributes survive clipping, aligned with schema order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttrMask(pub Vec<bool>);

impl AttrMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_names<S: AsRef<str>>(schema: &AttributeSchema, names: &[S]) -> Self {
        let set: BTreeSet<&str> = names.iter().map(AsRef::as_ref).collect();
        Self(schema.names().iter().map(|n| set.contains(n.as_str())).collect())
    }

    pub fn keeps(&self, j: usize) -> bool {
        self.0.get(j).copied().unwrap_or(false)
    }

    pub fn kept_names<'a>(&self, schema: &'a AttributeSchema) -> Vec<&'a str> {
        schema
            .names()
            .iter()
            .zip(&self.0)
            .filter(|(_, &k)| k)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub domain: Option<String>,
    /// Normalized values keyed by attribute name. Absent attributes are
    /// simply missing.
    pub values: BTreeMap<String, String>,
}

impl Entity {
    pub fn value(&self, attr: &str) -> Option<&str> {
        self.values.get(attr).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct KnowledgeBase {
    pub schema: AttributeSchema,
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbMode {
    Condensed,
    InDomain,
    CrossDomain,
}

impl std::str::FromStr for KbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condensed" => Ok(Self::Condensed),
            "in_domain" => Ok(Self::InDomain),
            "cross_domain" => Ok(Self::CrossDomain),
            other => Err(Error::Config(format!("unknown kb mode `{other}`"))),
        }
    }
}

impl KbMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Condensed => "condensed",
            Self::InDomain => "in_domain",
            Self::CrossDomain => "cross_domain",
        }
    }
}

impl KnowledgeBase {
    pub fn new(schema: AttributeSchema, entities: Vec<Entity>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if by_id.insert(e.id, i).is_some() {
                return Err(Error::Validation(format!("duplicate entity id {}", e.id)));
            }
            for (k, v) in &e.values {
                if schema.position(k).is_none() {
                    return Err(Error::Validation(format!(
                        "entity {} has attribute `{k}` outside the schema",
                        e.id
                    )));
                }
                if v.is_empty() {
                    return Err(Error::Validation(format!(
                        "entity {} has an empty value for `{k}`",
                        e.id
                    )));
                }
            }
        }
        Ok(Self {
            schema,
            entities,
            by_id,
        })
    }

    /// B, the entity count.
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, idx: usize) -> &Entity {
        &self.entities[idx]
    }

    pub fn get(&self, id: EntityId) -> Option<&Entity> {
        self.by_id.get(&id).map(|&i| &self.entities[i])
    }

    pub fn position(&self, id: EntityId) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn ids(&self) -> Vec<EntityId> {
        self.entities.iter().map(|e| e.id).collect()
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.entities.iter().filter_map(|e| e.domain.clone()).collect()
    }

    pub fn from_json_str(src: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(src)?;
        let Value::Array(records) = value else {
            return Err(Error::Parse {
                index: 0,
                message: "top level must be a JSON array".into(),
            });
        };
        let mut schema = AttributeSchema::default();
        let mut entities = Vec::with_capacity(records.len());
        for (index, rec) in records.into_iter().enumerate() {
            let Value::Object(map) = rec else {
                return Err(Error::Parse {
                    index,
                    message: "record is not an object".into(),
                });
            };
            entities.push(parse_record(index, map, &mut schema)?);
        }
        Self::new(schema, entities)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&src)
    }

    pub fn to_json_value(&self) -> Value {
        let records = self
            .entities
            .iter()
            .map(|e| {
                let mut m = Map::new();
                m.insert("id".into(), Value::from(e.id.0));
                if let Some(d) = &e.domain {
                    m.insert("domain".into(), Value::from(d.clone()));
                }
                for name in self.schema.names() {
                    if let Some(v) = e.values.get(name) {
                        m.insert(name.clone(), Value::from(v.clone()));
                    }
                }
                Value::Object(m)
            })
            .collect();
        Value::Array(records)
    }

    /// Writes the KB so that reloading reproduces schema order. Attributes
    /// absent from every entity are written as an explicit `null` on the
    /// first record so they survive the round trip.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut value = self.to_json_value();
        if let Value::Array(recs) = &mut value {
            if let Some(Value::Object(first)) = recs.first_mut() {
                let mut ordered = Map::new();
                ordered.insert("id".into(), first["id"].clone());
                if let Some(d) = first.get("domain") {
                    ordered.insert("domain".into(), d.clone());
                }
                for name in self.schema.names() {
                    ordered.insert(name.clone(), first.get(name).cloned().unwrap_or(Value::Null));
                }
                *first = ordered;
            }
        }
        let text = serde_json::to_string_pretty(&value)?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    /// Sub-KB with the given entities, keeping the full schema.
    pub fn subset(&self, ids: &[EntityId]) -> Result<Self> {
        let entities = ids
            .iter()
            .map(|id| self.get(*id).cloned().ok_or(Error::Lookup(id.0)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.schema.clone(), entities)
    }
}

fn parse_record(index: usize, map: Map<String, Value>, schema: &mut AttributeSchema) -> Result<Entity> {
    let mut id = None;
    let mut domain = None;
    let mut values = BTreeMap::new();
    for (key, val) in map {
        match key.as_str() {
            "id" => {
                let parsed = match &val {
                    Value::Number(n) => n.as_u64().and_then(|v| u32::try_from(v).ok()),
                    Value::String(s) => s.trim().parse::<u32>().ok(),
                    _ => None,
                };
                id = Some(parsed.ok_or_else(|| Error::Parse {
                    index,
                    message: format!("id must be a non-negative integer, got {val}"),
                })?);
            }
            "domain" => match val {
                Value::String(s) => domain = Some(text::normalize(&s)),
                Value::Null => {}
                other => {
                    return Err(Error::Parse {
                        index,
                        message: format!("domain must be a string, got {other}"),
                    })
                }
            },
            _ => {
                schema.push_if_new(&key);
                let raw = match val {
                    Value::Null => continue,
                    Value::String(s) => s,
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => if b { "yes" } else { "no" }.to_string(),
                    other => {
                        return Err(Error::Parse {
                            index,
                            message: format!("attribute `{key}` is not a scalar: {other}"),
                        })
                    }
                };
                let v = text::normalize(&raw);
                if !v.is_empty() {
                    values.insert(key, v);
                }
            }
        }
    }
    Ok(Entity {
        id: EntityId(id.unwrap_or(index as u32)),
        domain,
        values,
    })
}

/// `a^1 v^1 a^2 v^2 …` in schema order, skipping absent attributes and,
/// when a mask is given, attributes it does not keep.
pub fn serialize_entity(e: &Entity, schema: &AttributeSchema, mask: Option<&AttrMask>) -> String {
    serialize_tokens(e, schema, mask).join(" ")
}

pub fn serialize_tokens(e: &Entity, schema: &AttributeSchema, mask: Option<&AttrMask>) -> Vec<String> {
    let mut out = Vec::new();
    for (j, name) in schema.names().iter().enumerate() {
        if mask.is_some_and(|m| !m.keeps(j)) {
            continue;
        }
        if let Some(v) = e.values.get(name) {
            out.extend(text::tokenize(name));
            out.extend(text::tokenize(v));
        }
    }
    out
}

/// The KB a dialog sees under a given mode.
pub fn build_kb_view(global: &KnowledgeBase, dialog: &Dialog, mode: KbMode) -> Result<KnowledgeBase> {
    match mode {
        KbMode::CrossDomain => Ok(global.clone()),
        KbMode::Condensed => global.subset(&dialog.condensed_entity_ids),
        KbMode::InDomain => {
            let entities = global
                .entities()
                .iter()
                .filter(|e| e.domain.is_some() && e.domain == dialog.domain)
                .cloned()
                .collect();
            KnowledgeBase::new(global.schema.clone(), entities)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KbStats {
    pub entities: usize,
    pub attributes: usize,
    pub schema: Vec<String>,
    pub per_domain: BTreeMap<String, usize>,
    pub filled_per_attribute: BTreeMap<String, usize>,
}

pub fn stats(kb: &KnowledgeBase) -> KbStats {
    let mut per_domain = BTreeMap::new();
    let mut filled = BTreeMap::new();
    for e in kb.entities() {
        *per_domain
            .entry(e.domain.clone().unwrap_or_else(|| "-".into()))
            .or_insert(0) += 1;
        for k in e.values.keys() {
            *filled.entry(k.clone()).or_insert(0) += 1;
        }
    }
    KbStats {
        entities: kb.len(),
        attributes: kb.schema.len(),
        schema: kb.schema.names().to_vec(),
        per_domain,
        filled_per_attribute: filled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pizza() -> (KnowledgeBase, Entity) {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 0, "domain": "restaurant", "name": "Pizza Hut", "area": "south"}]"#,
        )
        .unwrap();
        let e = kb.entity(0).clone();
        (kb, e)
    }

    #[test]
    fn serialization_follows_schema_and_mask() {
        let (kb, e) = pizza();
        assert_eq!(serialize_entity(&e, &kb.schema, None), "name pizza hut area south");
        let mask = AttrMask::from_names(&kb.schema, &["name"]);
        assert_eq!(serialize_entity(&e, &kb.schema, Some(&mask)), "name pizza hut");
        let empty = Entity {
            id: EntityId(9),
            domain: None,
            values: BTreeMap::new(),
        };
        assert_eq!(serialize_entity(&empty, &kb.schema, None), "");
    }

    #[test]
    fn load_builds_union_schema() {
        let src = (0..7)
            .map(|i| {
                format!(
                    r#"{{"id": {i}, "domain": "hotel", "name": "h{i}", "area": "north", "pricerange": "cheap", "type": "hotel", "stars": {i}, "parking": "yes", "internet": "no", "phone": "0122{i}"}}"#
                )
            })
            .collect::<Vec<_>>()
            .join(",");
        let kb = KnowledgeBase::from_json_str(&format!("[{src}]")).unwrap();
        assert_eq!((kb.len(), kb.schema.len()), (7, 8));

        let kb = KnowledgeBase::from_json_str("[]").unwrap();
        assert_eq!(kb.len(), 0);

        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 1, "name": "a"}, {"id": 2, "name": "b", "extra": "x"}]"#,
        )
        .unwrap();
        assert_eq!(kb.schema.names(), &["name".to_string(), "extra".to_string()]);
        assert!(kb.get(EntityId(1)).unwrap().value("extra").is_none());
    }

    #[test]
    fn load_reports_bad_records() {
        let err = KnowledgeBase::from_json_str(r#"[{"id": 0, "name": "a"}, 5]"#).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 1, .. }), "{err}");
        let err = KnowledgeBase::from_json_str(r#"[{"id": 0, "x": {"y": 1}}]"#).unwrap_err();
        assert!(matches!(err, Error::Parse { index: 0, .. }));
        let err = KnowledgeBase::from_json_str(r#"[{"id": 3, "name": "a"}, {"id": 3, "name": "b"}]"#)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn save_load_round_trip() {
        let kb = KnowledgeBase::from_json_str(
            r#"[{"id": 4, "domain": "hotel", "name": "a b", "zeta": "1"},
                {"id": 2, "alpha": "q", "name": "c"}]"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.json");
        kb.save(&p).unwrap();
        let back = KnowledgeBase::load(&p).unwrap();
        assert_eq!(back.schema, kb.schema);
        assert_eq!(back.entities(), kb.entities());
    }

    fn arb_entity() -> impl Strategy<Value = BTreeMap<String, String>> {
        proptest::collection::btree_map(
            prop::sample::select(vec!["name", "area", "food", "phone"]).prop_map(String::from),
            "[a-z]{1,4}( [a-z]{1,3})?",
            0..4,
        )
    }

    proptest! {
        #[test]
        fn serialization_is_injective_on_present_values(a in arb_entity(), b in arb_entity()) {
            let schema = AttributeSchema::new(
                ["name", "area", "food", "phone"].iter().map(|s| s.to_string()).collect(),
            ).unwrap();
            let ea = Entity { id: EntityId(0), domain: None, values: a.clone() };
            let eb = Entity { id: EntityId(1), domain: None, values: b.clone() };
            let sa = serialize_entity(&ea, &schema, None);
            let sb = serialize_entity(&eb, &schema, None);
            if a != b {
                // values never contain attribute-name tokens here, so equality
                // of serializations implies equality of maps
                let clash = a.values().chain(b.values()).any(|v| {
                    v.split(' ').any(|t| schema.position(t).is_some())
                });
                if !clash {
                    prop_assert_ne!(sa, sb);
                }
            } else {
                prop_assert_eq!(sa, sb);
            }
        }
    }
}
