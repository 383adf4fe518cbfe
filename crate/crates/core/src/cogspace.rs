//! Cogs, configurations and the layer groupings used by the hierarchical search.
//!
//! A [`CogCatalog`] is the whole tunable space: an ordered list of discrete
//! dimensions ("cogs"), each with an ordered list of options. A
//! [`Configuration`] picks one option per cog. Option payloads are opaque
//! here; only evaluators interpret them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target value for cogs that act on the whole workflow rather than one step.
pub const GLOBAL_TARGET: &str = "global";

/// Current version of the `space.json` document format.
pub const SPACE_FORMAT_VERSION: u32 = 1;

/// Cog id to option id. Ordered so that iteration is deterministic.
pub type Assignment = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CogCategory {
    Architecture,
    Step,
    Weight,
}

impl fmt::Display for CogCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CogCategory::Architecture => "architecture",
            CogCategory::Step => "step",
            CogCategory::Weight => "weight",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Static,
    Evolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionRef {
    pub id: String,
    #[serde(default)]
    pub payload: serde_json::Value,
    #[serde(default)]
    pub provenance: Provenance,
}

impl OptionRef {
    pub fn new(id: impl Into<String>, payload: serde_json::Value) -> Self {
        Self {
            id: id.into(),
            payload,
            provenance: Provenance::Static,
        }
    }

    pub fn evolved(id: impl Into<String>, payload: serde_json::Value) -> Self {
        Self {
            id: id.into(),
            payload,
            provenance: Provenance::Evolved,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cog {
    pub id: String,
    pub category: CogCategory,
    /// Step id this cog acts on, or [`GLOBAL_TARGET`].
    pub target: String,
    pub options: Vec<OptionRef>,
    /// Whether the option list may grow during a run.
    pub dynamic: bool,
}

impl Cog {
    pub fn option_index(&self, option_id: &str) -> Option<usize> {
        self.options.iter().position(|o| o.id == option_id)
    }

    pub fn option(&self, option_id: &str) -> Option<&OptionRef> {
        self.options.iter().find(|o| o.id == option_id)
    }

    pub fn is_global(&self) -> bool {
        self.target == GLOBAL_TARGET
    }
}

/// The full tunable space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CogCatalog {
    cogs: Vec<Cog>,
    version: u64,
}

/// A total (or, inside layer search, partial) choice of one option per cog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub assignments: Assignment,
    pub catalog_version: u64,
}

impl Configuration {
    pub fn new(assignments: Assignment, catalog_version: u64) -> Self {
        Self {
            assignments,
            catalog_version,
        }
    }

    pub fn get(&self, cog_id: &str) -> Option<&str> {
        self.assignments.get(cog_id).map(String::as_str)
    }

    pub fn key(&self) -> String {
        canonical_key(self)
    }
}

/// Deterministic key of a configuration's assignments.
///
/// Independent of insertion order and of `catalog_version`. The JSON object
/// encoding of the sorted map keeps the mapping injective for arbitrary ids.
pub fn canonical_key(config: &Configuration) -> String {
    assignment_key(&config.assignments)
}

pub fn assignment_key(assignments: &Assignment) -> String {
    serde_json::to_string(assignments).expect("string map always serializes")
}

/// Layer grouping for one round. Layers are listed innermost first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub round: u8,
    pub layers: Vec<Vec<String>>,
    pub sizes: Vec<f64>,
    pub budgets: Vec<u64>,
}

impl LayerPlan {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn cog_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

// --- space.json document ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDocument {
    pub version: u32,
    pub cogs: Vec<CogDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CogDocument {
    pub id: String,
    pub category: String,
    #[serde(default = "global_target")]
    pub target: String,
    #[serde(default)]
    pub dynamic: bool,
    pub options: Vec<OptionDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionDocument {
    pub id: String,
    #[serde(default)]
    pub payload: serde_json::Value,
}

fn global_target() -> String {
    GLOBAL_TARGET.to_string()
}

fn parse_category(tag: &str) -> Option<CogCategory> {
    match tag {
        "architecture" => Some(CogCategory::Architecture),
        "step" => Some(CogCategory::Step),
        "weight" => Some(CogCategory::Weight),
        _ => None,
    }
}

impl CogCatalog {
    /// Builds a catalog from a space document, preserving cog and option order.
    pub fn from_document(doc: &SpaceDocument) -> Result<Self> {
        if doc.version != SPACE_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported space document version {}",
                doc.version
            )));
        }
        let cogs = doc
            .cogs
            .iter()
            .map(|c| {
                let category = parse_category(&c.category).ok_or_else(|| {
                    Error::Schema(format!("cog {:?}: unknown category {:?}", c.id, c.category))
                })?;
                Ok(Cog {
                    id: c.id.clone(),
                    category,
                    target: c.target.clone(),
                    dynamic: c.dynamic,
                    options: c
                        .options
                        .iter()
                        .map(|o| OptionRef::new(o.id.clone(), o.payload.clone()))
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cogs)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: SpaceDocument =
            serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_document(&doc)
    }

    /// Validates and wraps a cog list at version 0.
    pub fn new(cogs: Vec<Cog>) -> Result<Self> {
        if cogs.is_empty() {
            return Err(Error::Schema("space lists no cogs".into()));
        }
        let mut seen = HashSet::new();
        for cog in &cogs {
            if !seen.insert(cog.id.as_str()) {
                return Err(Error::Schema(format!("duplicate cog id {:?}", cog.id)));
            }
            if cog.options.is_empty() {
                return Err(Error::Schema(format!("cog {:?} has no options", cog.id)));
            }
            let mut opts = HashSet::new();
            for o in &cog.options {
                if !opts.insert(o.id.as_str()) {
                    return Err(Error::Schema(format!(
                        "cog {:?}: duplicate option id {:?}",
                        cog.id, o.id
                    )));
                }
            }
        }
        Ok(Self { cogs, version: 0 })
    }

    pub fn to_document(&self) -> SpaceDocument {
        SpaceDocument {
            version: SPACE_FORMAT_VERSION,
            cogs: self
                .cogs
                .iter()
                .map(|c| CogDocument {
                    id: c.id.clone(),
                    category: c.category.to_string(),
                    target: c.target.clone(),
                    dynamic: c.dynamic,
                    options: c
                        .options
                        .iter()
                        .map(|o| OptionDocument {
                            id: o.id.clone(),
                            payload: o.payload.clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn cogs(&self) -> &[Cog] {
        &self.cogs
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.cogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cogs.is_empty()
    }

    pub fn cog(&self, id: &str) -> Option<&Cog> {
        self.cogs.iter().find(|c| c.id == id)
    }

    pub fn cog_ids(&self) -> Vec<String> {
        self.cogs.iter().map(|c| c.id.clone()).collect()
    }

    pub fn has_category(&self, category: CogCategory) -> bool {
        self.cogs.iter().any(|c| c.category == category)
    }

    fn ids_of(&self, categories: &[CogCategory]) -> Vec<String> {
        self.cogs
            .iter()
            .filter(|c| categories.contains(&c.category))
            .map(|c| c.id.clone())
            .collect()
    }

    /// Groups cogs into `layers` search layers, innermost first.
    ///
    /// One layer holds everything; two layers put step and weight cogs inside
    /// architecture cogs; three layers nest weight inside step inside
    /// architecture. Layers may be empty.
    pub fn group_layers(&self, layers: u8) -> Result<LayerPlan> {
        use CogCategory::*;
        let groups = match layers {
            1 => vec![self.ids_of(&[Architecture, Step, Weight])],
            2 => vec![self.ids_of(&[Step, Weight]), self.ids_of(&[Architecture])],
            3 => vec![
                self.ids_of(&[Weight]),
                self.ids_of(&[Step]),
                self.ids_of(&[Architecture]),
            ],
            other => {
                return Err(Error::Argument(format!(
                    "layer count must be 1, 2 or 3, got {other}"
                )))
            }
        };
        Ok(LayerPlan {
            round: layers,
            layers: groups,
            sizes: Vec::new(),
            budgets: Vec::new(),
        })
    }

    /// Number of distinct assignments over `subset`; 1 for the empty subset.
    pub fn space_size<S: AsRef<str>>(&self, subset: &[S]) -> Result<u128> {
        subset.iter().try_fold(1u128, |acc, id| {
            let id = id.as_ref();
            let cog = self
                .cog(id)
                .ok_or_else(|| Error::Argument(format!("unknown cog id {id:?}")))?;
            acc.checked_mul(cog.options.len() as u128)
                .ok_or_else(|| Error::Argument("space size overflows u128".into()))
        })
    }

    pub fn total_size(&self) -> Result<u128> {
        self.space_size(&self.cog_ids())
    }

    /// Appends options to a dynamic cog. The version is bumped once per
    /// non-empty append.
    pub fn extend_options(&mut self, cog_id: &str, new_options: Vec<OptionRef>) -> Result<()> {
        let cog = self
            .cogs
            .iter_mut()
            .find(|c| c.id == cog_id)
            .ok_or_else(|| Error::Argument(format!("unknown cog id {cog_id:?}")))?;
        if !cog.dynamic {
            return Err(Error::Contract(format!(
                "cog {cog_id:?} is not dynamic; its options are fixed"
            )));
        }
        if new_options.is_empty() {
            return Ok(());
        }
        let mut ids: HashSet<&str> = cog.options.iter().map(|o| o.id.as_str()).collect();
        for o in &new_options {
            if !ids.insert(o.id.as_str()) {
                return Err(Error::Argument(format!(
                    "cog {cog_id:?} already has option {:?}",
                    o.id
                )));
            }
        }
        cog.options.extend(new_options);
        self.version += 1;
        Ok(())
    }

    /// Checks that every referenced cog and option exists. With
    /// `allow_partial` unset, every cog must be assigned.
    pub fn validate(&self, config: &Configuration, allow_partial: bool) -> Result<()> {
        self.validate_assignment(&config.assignments, allow_partial)
    }

    pub fn validate_assignment(&self, assignments: &Assignment, allow_partial: bool) -> Result<()> {
        for (cog_id, opt) in assignments {
            let cog = self
                .cog(cog_id)
                .ok_or_else(|| Error::Contract(format!("unknown cog {cog_id:?}")))?;
            if cog.option(opt).is_none() {
                return Err(Error::Contract(format!(
                    "cog {cog_id:?} has no option {opt:?}"
                )));
            }
        }
        if !allow_partial && assignments.len() != self.cogs.len() {
            let missing: BTreeSet<&str> = self
                .cogs
                .iter()
                .map(|c| c.id.as_str())
                .filter(|id| !assignments.contains_key(*id))
                .collect();
            return Err(Error::Contract(format!(
                "configuration is incomplete; missing {missing:?}"
            )));
        }
        Ok(())
    }

    pub fn configuration(&self, assignments: Assignment) -> Configuration {
        Configuration::new(assignments, self.version)
    }

    /// Mixed-radix enumeration of every full configuration (last cog fastest).
    pub fn enumerate(&self) -> impl Iterator<Item = Assignment> + '_ {
        let radices: Vec<usize> = self.cogs.iter().map(|c| c.options.len()).collect();
        let total: usize = radices.iter().product();
        (0..total).map(move |mut flat| {
            let mut digits = vec![0usize; radices.len()];
            for (d, r) in digits.iter_mut().zip(&radices).rev() {
                *d = flat % r;
                flat /= r;
            }
            self.cogs
                .iter()
                .zip(digits)
                .map(|(c, d)| (c.id.clone(), c.options[d].id.clone()))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn cog(id: &str, category: CogCategory, n: usize) -> Cog {
        Cog {
            id: id.into(),
            category,
            target: GLOBAL_TARGET.into(),
            options: (0..n).map(|i| OptionRef::new(i.to_string(), json!(null))).collect(),
            dynamic: false,
        }
    }

    fn six_cog_catalog() -> CogCatalog {
        use CogCategory::*;
        CogCatalog::new(vec![
            cog("decompose", Architecture, 2),
            cog("ensemble", Architecture, 3),
            cog("model", Step, 3),
            cog("rewrite", Step, 2),
            cog("reasoning", Weight, 3),
            cog("fewshot", Weight, 4),
        ])
        .unwrap()
    }

    #[test]
    fn builds_from_document() {
        let text = r#"{"version":1,"cogs":[{"id":"reasoning","category":"weight","target":"s1",
            "dynamic":false,"options":[{"id":"none","payload":null},{"id":"cot","payload":null},
            {"id":"plan","payload":{"k":1}}]}]}"#;
        let cat = CogCatalog::from_json_str(text).unwrap();
        assert_eq!(cat.len(), 1);
        assert_eq!(cat.version(), 0);
        let ids: Vec<_> = cat.cogs()[0].options.iter().map(|o| o.id.as_str()).collect();
        assert_eq!(ids, ["none", "cot", "plan"]);
    }

    #[test]
    fn rejects_bad_documents() {
        let dup = r#"{"version":1,"cogs":[
            {"id":"m","category":"step","options":[{"id":"a"}]},
            {"id":"m","category":"weight","options":[{"id":"b"}]}]}"#;
        assert!(matches!(CogCatalog::from_json_str(dup), Err(Error::Schema(_))));
        let empty = r#"{"version":1,"cogs":[{"id":"m","category":"step","options":[]}]}"#;
        assert!(matches!(CogCatalog::from_json_str(empty), Err(Error::Schema(_))));
        let cat = r#"{"version":1,"cogs":[{"id":"m","category":"loss","options":[{"id":"a"}]}]}"#;
        assert!(matches!(CogCatalog::from_json_str(cat), Err(Error::Schema(_))));
        let unknown =
            r#"{"version":1,"cogs":[{"id":"m","category":"step","colour":1,"options":[{"id":"a"}]}]}"#;
        assert!(matches!(CogCatalog::from_json_str(unknown), Err(Error::Schema(_))));
        let version = r#"{"version":2,"cogs":[{"id":"m","category":"step","options":[{"id":"a"}]}]}"#;
        assert!(matches!(CogCatalog::from_json_str(version), Err(Error::Schema(_))));
    }

    #[test]
    fn six_cogs_keep_categories() {
        let cat = six_cog_catalog();
        let doc = cat.to_document();
        let again = CogCatalog::from_document(&doc).unwrap();
        assert_eq!(again, cat);
        let cats: Vec<_> = cat.cogs().iter().map(|c| c.category).collect();
        use CogCategory::*;
        assert_eq!(cats, [Architecture, Architecture, Step, Step, Weight, Weight]);
    }

    #[test]
    fn layer_groupings() {
        let cat = six_cog_catalog();
        let one = cat.group_layers(1).unwrap();
        assert_eq!(one.layers.len(), 1);
        assert_eq!(one.layers[0].len(), 6);

        let two = cat.group_layers(2).unwrap();
        assert_eq!(two.layers[0], ["model", "rewrite", "reasoning", "fewshot"]);
        assert_eq!(two.layers[1], ["decompose", "ensemble"]);

        let three = cat.group_layers(3).unwrap();
        assert_eq!(three.layers[0], ["reasoning", "fewshot"]);
        assert_eq!(three.layers[1], ["model", "rewrite"]);
        assert_eq!(three.layers[2], ["decompose", "ensemble"]);

        assert!(matches!(cat.group_layers(0), Err(Error::Argument(_))));
        assert!(matches!(cat.group_layers(4), Err(Error::Argument(_))));
    }

    #[test]
    fn weight_only_catalog_has_empty_outer_layers() {
        let cat = CogCatalog::new(vec![
            cog("a", CogCategory::Weight, 2),
            cog("b", CogCategory::Weight, 2),
        ])
        .unwrap();
        let plan = cat.group_layers(3).unwrap();
        assert_eq!(plan.layers[0], ["a", "b"]);
        assert!(plan.layers[1].is_empty());
        assert!(plan.layers[2].is_empty());
    }

    #[test]
    fn space_sizes() {
        let cogs = (0..12)
            .map(|i| cog(&format!("c{i}"), CogCategory::Weight, 4))
            .collect();
        let cat = CogCatalog::new(cogs).unwrap();
        assert_eq!(cat.total_size().unwrap(), 16_777_216);
        assert_eq!(cat.space_size::<&str>(&[]).unwrap(), 1);

        let cat = CogCatalog::new(vec![
            cog("a", CogCategory::Step, 2),
            cog("b", CogCategory::Step, 3),
            cog("c", CogCategory::Step, 5),
        ])
        .unwrap();
        assert_eq!(cat.space_size(&["a", "b", "c"]).unwrap(), 30);
        assert!(matches!(cat.space_size(&["zz"]), Err(Error::Argument(_))));
    }

    #[test]
    fn canonical_keys() {
        let mut a = Assignment::new();
        a.insert("b".into(), "1".into());
        a.insert("a".into(), "0".into());
        let mut b = Assignment::new();
        b.insert("a".into(), "0".into());
        b.insert("b".into(), "1".into());
        assert_eq!(
            canonical_key(&Configuration::new(a.clone(), 0)),
            canonical_key(&Configuration::new(b, 3))
        );
        let mut c = a.clone();
        c.insert("a".into(), "1".into());
        assert_ne!(assignment_key(&a), assignment_key(&c));
        // ids containing separator characters stay distinct
        let x: Assignment = [("a=1".to_string(), "2".to_string())].into();
        let y: Assignment = [("a".to_string(), "1=2".to_string())].into();
        assert_ne!(assignment_key(&x), assignment_key(&y));
    }

    #[test]
    fn extend_dynamic_options() {
        let mut dynamic = cog("fewshot", CogCategory::Weight, 3);
        dynamic.dynamic = true;
        let mut cat = CogCatalog::new(vec![dynamic, cog("model", CogCategory::Step, 2)]).unwrap();
        let before = cat.configuration(
            [("fewshot".to_string(), "2".to_string()), ("model".to_string(), "1".to_string())]
                .into(),
        );

        cat.extend_options("fewshot", vec![]).unwrap();
        assert_eq!(cat.version(), 0);

        cat.extend_options(
            "fewshot",
            vec![
                OptionRef::evolved("evo-1", json!({})),
                OptionRef::evolved("evo-2", json!({})),
            ],
        )
        .unwrap();
        assert_eq!(cat.cog("fewshot").unwrap().options.len(), 5);
        assert_eq!(cat.version(), 1);
        cat.validate(&before, false).unwrap();

        assert!(matches!(
            cat.extend_options("model", vec![OptionRef::new("x", json!(null))]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cat.extend_options("fewshot", vec![OptionRef::new("evo-1", json!(null))]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn enumeration_covers_space() {
        let cat = six_cog_catalog();
        let all: Vec<_> = cat.enumerate().collect();
        assert_eq!(all.len() as u128, cat.total_size().unwrap());
        let keys: HashSet<_> = all.iter().map(assignment_key).collect();
        assert_eq!(keys.len(), all.len());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_catalog() -> impl Strategy<Value = CogCatalog> {
            prop::collection::vec((0u8..3, 1usize..5), 1..9).prop_map(|spec| {
                let cogs = spec
                    .into_iter()
                    .enumerate()
                    .map(|(i, (cat, n))| {
                        let category = match cat {
                            0 => CogCategory::Architecture,
                            1 => CogCategory::Step,
                            _ => CogCategory::Weight,
                        };
                        cog(&format!("c{i}"), category, n)
                    })
                    .collect();
                CogCatalog::new(cogs).unwrap()
            })
        }

        proptest! {
            #[test]
            fn layers_partition_catalog(cat in arb_catalog(), layers in 1u8..=3) {
                let plan = cat.group_layers(layers).unwrap();
                prop_assert_eq!(plan.layers.len(), layers as usize);
                let mut seen = BTreeSet::new();
                for layer in &plan.layers {
                    for id in layer {
                        prop_assert!(seen.insert(id.clone()), "cog {} in two layers", id);
                    }
                }
                let all: BTreeSet<_> = cat.cog_ids().into_iter().collect();
                prop_assert_eq!(seen, all);
            }

            #[test]
            fn space_size_is_product(cat in arb_catalog()) {
                let expected: u128 = cat.cogs().iter().map(|c| c.options.len() as u128).product();
                prop_assert_eq!(cat.total_size().unwrap(), expected);
            }

            #[test]
            fn key_is_injective(
                a in prop::collection::btree_map("[a-c=;:\"]{1,3}", "[0-2,]{1,2}", 0..4),
                b in prop::collection::btree_map("[a-c=;:\"]{1,3}", "[0-2,]{1,2}", 0..4),
            ) {
                prop_assert_eq!(assignment_key(&a) == assignment_key(&b), a == b);
            }
        }
    }
}
