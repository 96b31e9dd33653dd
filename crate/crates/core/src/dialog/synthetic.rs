//! Deterministic toy corpus: a multi-domain KB plus task dialogs whose user
//! goals identify exactly one entity.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{annotate_with, Dialog, DialogTurn, ValueLexicon};
use crate::error::{Error, Result};
use crate::kb::{AttributeSchema, Entity, EntityId, KnowledgeBase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Choice(Vec<String>),
    /// Prefix followed by random decimal digits.
    Digits { prefix: String, len: usize },
    /// Prefix, two digits, two letters.
    Code { prefix: String },
    YesNo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrSpec {
    pub name: String,
    /// Surface form used in utterances.
    pub label: String,
    pub kind: ValueKind,
    /// Phrase with `{v}` used when the attribute is a user constraint.
    #[serde(default)]
    pub constraint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Ways the user refers to the domain.
    pub nouns: Vec<String>,
    pub attributes: Vec<AttrSpec>,
    /// Optional request suffixes with `{n}` replaced by a small number.
    #[serde(default)]
    pub suffixes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub name_first: Vec<String>,
    pub name_second: Vec<String>,
    pub domains: Vec<DomainSpec>,
    /// Maximum entities in a condensed KB, gold included.
    pub condensed_size: usize,
    pub max_turns: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn attr(name: &str, label: &str, kind: ValueKind, constraint: Option<&str>) -> AttrSpec {
    AttrSpec {
        name: name.into(),
        label: label.into(),
        kind,
        constraint: constraint.map(str::to_string),
    }
}

impl Default for SchemaSpec {
    fn default() -> Self {
        let area = || {
            attr(
                "area",
                "area",
                ValueKind::Choice(words("north south east west centre")),
                Some("in the {v}"),
            )
        };
        let price = || {
            attr(
                "pricerange",
                "price range",
                ValueKind::Choice(words("cheap moderate expensive")),
                Some("in the {v} price range"),
            )
        };
        let phone = || {
            attr(
                "phone",
                "phone number",
                ValueKind::Digits {
                    prefix: "01223".into(),
                    len: 6,
                },
                None,
            )
        };
        let postcode = || attr("postcode", "postcode", ValueKind::Code { prefix: "cb".into() }, None);
        Self {
            name_first: words(
                "golden royal little grand old red blue green silver happy lucky \
                 jade copper river garden city bridge maple cedar willow",
            ),
            name_second: words(
                "house palace kitchen lodge inn court garden tower hall spot \
                 corner place table oven manor",
            ),
            domains: vec![
                DomainSpec {
                    name: "restaurant".into(),
                    nouns: words("restaurant"),
                    attributes: vec![
                        area(),
                        price(),
                        attr(
                            "food",
                            "food",
                            ValueKind::Choice(words(
                                "indian chinese italian british thai french",
                            )),
                            Some("serving {v} food"),
                        ),
                        phone(),
                        postcode(),
                    ],
                    suffixes: vec!["for {n} people".into()],
                },
                DomainSpec {
                    name: "hotel".into(),
                    nouns: vec!["hotel".into(), "place to stay".into()],
                    attributes: vec![
                        area(),
                        price(),
                        attr(
                            "type",
                            "type",
                            ValueKind::Choice(words("hotel guesthouse")),
                            Some("that is a {v}"),
                        ),
                        attr(
                            "stars",
                            "star rating",
                            ValueKind::Choice(words("2 3 4 5")),
                            Some("with {v} stars"),
                        ),
                        attr("parking", "parking", ValueKind::YesNo, None),
                        attr("internet", "internet", ValueKind::YesNo, None),
                        phone(),
                        postcode(),
                    ],
                    suffixes: vec![
                        "for {n} people".into(),
                        "for {n} nights".into(),
                    ],
                },
                DomainSpec {
                    name: "attraction".into(),
                    nouns: vec!["attraction".into(), "place to visit".into()],
                    attributes: vec![
                        area(),
                        attr(
                            "type",
                            "type",
                            ValueKind::Choice(words("museum park theatre college church")),
                            Some("that is a {v}"),
                        ),
                        phone(),
                        postcode(),
                    ],
                    suffixes: Vec::new(),
                },
            ],
            condensed_size: 7,
            max_turns: 3,
        }
    }
}

impl SchemaSpec {
    fn union_schema(&self) -> Result<AttributeSchema> {
        let mut names = vec!["name".to_string()];
        for d in &self.domains {
            for a in &d.attributes {
                if !names.contains(&a.name) {
                    names.push(a.name.clone());
                }
            }
        }
        AttributeSchema::new(names)
    }

    fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.name_first.is_empty() || self.name_second.is_empty() {
            return Err(Error::Generation("schema spec has no domains or name words".into()));
        }
        if self.condensed_size == 0 || self.max_turns == 0 {
            return Err(Error::Generation("condensed_size and max_turns must be positive".into()));
        }
        for d in &self.domains {
            if d.nouns.is_empty() {
                return Err(Error::Generation(format!("domain {} has no nouns", d.name)));
            }
            if !d.attributes.iter().any(|a| a.constraint.is_some()) {
                return Err(Error::Generation(format!("domain {} has no constrainable attribute", d.name)));
            }
        }
        Ok(())
    }
}

fn draw_value(kind: &ValueKind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        ValueKind::Choice(vals) => vals.choose(rng).cloned().unwrap_or_default(),
        ValueKind::Digits { prefix, len } => {
            let mut s = prefix.clone();
            for _ in 0..*len {
                s.push(char::from(b'0' + rng.gen_range(0..10u8)));
            }
            s
        }
        ValueKind::Code { prefix } => {
            let mut s = prefix.clone();
            for _ in 0..2 {
                s.push(char::from(b'0' + rng.gen_range(0..10u8)));
            }
            for _ in 0..2 {
                s.push(char::from(b'a' + rng.gen_range(0..26u8)));
            }
            s
        }
        ValueKind::YesNo => if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string(),
    }
}

fn entity_names(spec: &SchemaSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<String> = spec
        .name_first
        .iter()
        .flat_map(|a| spec.name_second.iter().map(move |b| format!("{a} {b}")))
        .collect();
    pool.shuffle(rng);
    let base = pool.len();
    (0..n)
        .map(|i| {
            if i < base {
                pool[i].clone()
            } else {
                format!("{} {}", pool[i % base], i / base + 1)
            }
        })
        .collect()
}

fn generate_kb(spec: &SchemaSpec, n_entities: usize, rng: &mut ChaCha8Rng) -> Result<KnowledgeBase> {
    let schema = spec.union_schema()?;
    let names = entity_names(spec, n_entities, rng);
    let mut domain_of: Vec<usize> = (0..n_entities).map(|i| i % spec.domains.len()).collect();
    domain_of.shuffle(rng);
    let entities = (0..n_entities)
        .map(|i| {
            let d = &spec.domains[domain_of[i]];
            let mut values = BTreeMap::new();
            values.insert("name".to_string(), names[i].clone());
            for a in &d.attributes {
                values.insert(a.name.clone(), draw_value(&a.kind, rng));
            }
            Entity {
                id: EntityId(i as u32),
                domain: Some(d.name.clone()),
                values,
            }
        })
        .collect();
    KnowledgeBase::new(schema, entities)
}

/// Entities of `domain` satisfying every goal constraint, by brute force.
pub fn matching_entities(kb: &KnowledgeBase, domain: &str, goal: &BTreeMap<String, String>) -> Vec<EntityId> {
    kb.entities()
        .iter()
        .filter(|e| e.domain.as_deref() == Some(domain))
        .filter(|e| goal.iter().all(|(k, v)| e.value(k) == Some(v.as_str())))
        .map(|e| e.id)
        .collect()
}

struct Goal<'a> {
    gold: &'a Entity,
    domain: &'a DomainSpec,
    constraints: Vec<&'a AttrSpec>,
    by_name: bool,
}

fn sample_goal<'a>(
    spec: &'a SchemaSpec,
    kb: &'a KnowledgeBase,
    rng: &mut ChaCha8Rng,
) -> Result<Goal<'a>> {
    for _ in 0..1000 {
        let gold = kb.entities().choose(rng).expect("non-empty kb");
        let domain = spec
            .domains
            .iter()
            .find(|d| Some(d.name.as_str()) == gold.domain.as_deref())
            .expect("entity domain comes from spec");
        if rng.gen_bool(0.15) {
            return Ok(Goal {
                gold,
                domain,
                constraints: Vec::new(),
                by_name: true,
            });
        }
        let mut constrainable: Vec<&AttrSpec> =
            domain.attributes.iter().filter(|a| a.constraint.is_some()).collect();
        constrainable.shuffle(rng);
        let c = rng.gen_range(1..=2usize).min(constrainable.len());
        constrainable.truncate(c);
        let goal: BTreeMap<String, String> = constrainable
            .iter()
            .map(|a| (a.name.clone(), gold.values[&a.name].clone()))
            .collect();
        if matching_entities(kb, &domain.name, &goal).len() == 1 {
            return Ok(Goal {
                gold,
                domain,
                constraints: constrainable,
                by_name: false,
            });
        }
    }
    Err(Error::Generation(
        "no uniquely identifiable goal found after 1000 draws; the KB is too small or too uniform"
            .into(),
    ))
}

fn fill(template: &str, v: &str) -> String {
    template.replace("{v}", v)
}

fn build_dialog(spec: &SchemaSpec, kb: &KnowledgeBase, goal: Goal<'_>, rng: &mut ChaCha8Rng) -> Dialog {
    let gold = goal.gold;
    let name = &gold.values["name"];
    let d = goal.domain;
    let noun = d.nouns.choose(rng).expect("validated");

    let phrases: Vec<String> = goal
        .constraints
        .iter()
        .map(|a| fill(a.constraint.as_deref().unwrap(), &gold.values[&a.name]))
        .collect();

    let mut user1 = if goal.by_name {
        format!("can you tell me about {name} ?")
    } else {
        let opener = ["i am looking for a", "i need a", "please find me a"]
            .choose(rng)
            .unwrap();
        let mut u = format!("{opener} {noun} {}", phrases.join(" and "));
        if !d.suffixes.is_empty() && rng.gen_bool(0.5) {
            let n = rng.gen_range(2..=5).to_string();
            u.push(' ');
            u.push_str(&d.suffixes.choose(rng).unwrap().replace("{n}", &n));
        }
        u.push_str(" .");
        u
    };
    user1 = user1.replace("  ", " ");

    let described: Vec<String> = if goal.by_name {
        d.attributes
            .iter()
            .filter(|a| a.constraint.is_some())
            .take(1)
            .map(|a| fill(a.constraint.as_deref().unwrap(), &gold.values[&a.name]))
            .collect()
    } else {
        phrases.clone()
    };

    let constrained: BTreeSet<&str> = goal.constraints.iter().map(|a| a.name.as_str()).collect();
    let mut requestable: Vec<&AttrSpec> = d
        .attributes
        .iter()
        .filter(|a| !constrained.contains(a.name.as_str()))
        .collect();
    requestable.shuffle(rng);

    let first_extra = requestable.pop();
    let mut resp1 = format!("{name} is a {} {}", d.nouns[0], described.join(" and "));
    if let Some(a) = first_extra {
        resp1.push_str(&format!(" , its {} is {}", a.label, gold.values[&a.name]));
    }
    resp1.push_str(" .");

    let mut turns = vec![DialogTurn::new(&user1, &resp1)];
    let n_turns = rng.gen_range(1..=spec.max_turns);
    while turns.len() < n_turns {
        let Some(a) = requestable.pop() else { break };
        let v = &gold.values[&a.name];
        let (u, r) = if a.kind == ValueKind::YesNo {
            let r = if v == "yes" {
                format!("yes , {name} has free {} .", a.label)
            } else {
                format!("no , {name} does not have {} .", a.label)
            };
            (format!("does it have free {} ?", a.label), r)
        } else {
            let u = match rng.gen_range(0..3) {
                0 => format!("what is the {} ?", a.label),
                1 => format!("can i get the {} please ?", a.label),
                _ => format!("thanks , i also need the {} .", a.label),
            };
            let r = if rng.gen_bool(0.5) {
                format!("the {} of {name} is {v} .", a.label)
            } else {
                format!("its {} is {v} .", a.label)
            };
            (u, r)
        };
        turns.push(DialogTurn::new(&u, &r));
    }
    for t in &mut turns {
        t.gold_entity_ids = Some(vec![gold.id]);
    }

    let goal_map: BTreeMap<String, String> = if goal.by_name {
        [("name".to_string(), name.clone())].into()
    } else {
        goal.constraints
            .iter()
            .map(|a| (a.name.clone(), gold.values[&a.name].clone()))
            .collect()
    };

    // Distractors: same-domain entities, those sharing constraint values first.
    let mut others: Vec<(usize, u32, EntityId)> = kb
        .entities()
        .iter()
        .filter(|e| e.id != gold.id && e.domain == gold.domain)
        .map(|e| {
            let shared = goal
                .constraints
                .iter()
                .filter(|a| e.values.get(&a.name) == gold.values.get(&a.name))
                .count();
            (shared, rng.gen::<u32>(), e.id)
        })
        .collect();
    others.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut condensed: Vec<EntityId> = std::iter::once(gold.id)
        .chain(others.iter().map(|o| o.2))
        .take(spec.condensed_size)
        .collect();
    condensed.sort();

    Dialog {
        id: None,
        turns,
        domain: gold.domain.clone(),
        condensed_entity_ids: condensed,
        goal: goal_map,
    }
}

/// Generates a KB of `n_entities` and `n_dialogs` annotated dialogs.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_entities: usize,
    n_dialogs: usize,
    spec: &SchemaSpec,
) -> Result<(KnowledgeBase, Vec<Dialog>)> {
    spec.validate()?;
    if n_entities == 0 {
        return Err(Error::Generation("n_entities must be positive".into()));
    }
    if n_dialogs == 0 {
        return Err(Error::Generation("n_dialogs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kb = generate_kb(spec, n_entities, &mut rng)?;
    let lexicon = ValueLexicon::from_kb(&kb);
    let mut dialogs = Vec::with_capacity(n_dialogs);
    for i in 0..n_dialogs {
        let goal = sample_goal(spec, &kb, &mut rng)?;
        let mut d = build_dialog(spec, &kb, goal, &mut rng);
        d.id = Some(format!("syn-{i:05}"));
        for t in &mut d.turns {
            *t = annotate_with(t, &lexicon);
        }
        dialogs.push(d);
    }
    Ok((kb, dialogs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SchemaSpec::default();
        let a = generate_synthetic_corpus(7, 60, 20, &spec).unwrap();
        let b = generate_synthetic_corpus(7, 60, 20, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_synthetic_corpus(8, 60, 20, &spec).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn goals_identify_the_gold_entity() {
        let spec = SchemaSpec::default();
        let (kb, dialogs) = generate_synthetic_corpus(3, 200, 300, &spec).unwrap();
        for d in &dialogs {
            let gold = d.turns[0].gold_entity_ids.as_ref().unwrap()[0];
            let domain = d.domain.as_deref().unwrap();
            assert_eq!(matching_entities(&kb, domain, &d.goal), vec![gold]);
            assert!(d.condensed_entity_ids.contains(&gold));
            assert!(d.condensed_entity_ids.len() <= spec.condensed_size);
            for t in &d.turns {
                t.validate_spans().unwrap();
                assert!(t.kb_token_count() > 0);
            }
        }
    }

    #[test]
    fn names_are_unique_beyond_the_pool() {
        let spec = SchemaSpec::default();
        let (kb, _) = generate_synthetic_corpus(1, 400, 1, &spec).unwrap();
        let names: BTreeSet<_> = kb.entities().iter().map(|e| e.value("name").unwrap()).collect();
        assert_eq!(names.len(), 400);
    }

    #[test]
    fn too_uniform_kb_fails_cleanly() {
        let mut spec = SchemaSpec::default();
        spec.domains.truncate(1);
        for a in &mut spec.domains[0].attributes {
            a.kind = ValueKind::Choice(vec!["same".into()]);
        }
        // A one-entity KB is always uniquely identified; two identical ones never
        // are unless the user asks by name.
        let r = generate_synthetic_corpus(0, 2, 50, &spec);
        assert!(r.is_ok());
        assert!(generate_synthetic_corpus(0, 10, 0, &spec).is_err());
        let r = generate_synthetic_corpus(0, 0, 5, &spec);
        assert!(matches!(r, Err(Error::Generation(_))));
    }
}
