//! Corpus loading, validation, bagging, and class statistics.
//!
//! The on-disk interchange format is line-delimited JSON, one instance per
//! line (see [`Record`]). Malformed records are collected and counted, never
//! silently dropped.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depparse::DepTree;
use crate::error::{Error, Result};

/// The label string used for the no-relation class.
pub const NA_LABEL: &str = "NA";

/// The 18-entry coarse entity-type vocabulary injected into structured inputs.
pub const ENTITY_TYPES: [&str; 18] = [
    "PERSON",
    "NORP",
    "FAC",
    "ORG",
    "GPE",
    "LOC",
    "PRODUCT",
    "EVENT",
    "WORK_OF_ART",
    "LAW",
    "LANGUAGE",
    "DATE",
    "TIME",
    "PERCENT",
    "MONEY",
    "QUANTITY",
    "ORDINAL",
    "CARDINAL",
];

pub fn is_entity_type(tag: &str) -> bool {
    ENTITY_TYPES.contains(&tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One entity mention inside a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub surface: String,
    /// Half-open token-index interval into the sentence.
    pub span: Range<usize>,
    pub type_tag: String,
    pub kb_id: Option<String>,
}

impl EntityMention {
    /// Identity used for pair keys: KB id when present, else the lower-cased
    /// surface form.
    pub fn identity(&self) -> String {
        match &self.kb_id {
            Some(id) if !id.is_empty() => id.clone(),
            _ => self.surface.to_lowercase(),
        }
    }
}

/// One annotated sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: EntityMention,
    pub tail: EntityMention,
    /// Per-token parent index; the root is marked with -1.
    pub dep_heads: Vec<i64>,
    pub dep_labels: Vec<String>,
    pub relation: String,
}

impl Instance {
    pub fn dep_tree(&self) -> Result<DepTree> {
        DepTree::from_heads_labeled(&self.dep_heads, &self.dep_labels).map_err(Error::Tree)
    }

    pub fn pair_key(&self) -> PairKey {
        PairKey {
            head: self.head.identity(),
            tail: self.tail.identity(),
        }
    }

    /// Words of a mention, taken from the sentence tokens via its span.
    pub fn mention_words(&self, mention: &EntityMention) -> &[String] {
        &self.tokens[mention.span.clone()]
    }

    /// Checks every instance-level invariant; returns a human-readable reason
    /// on the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("empty token list".into());
        }
        if self.dep_heads.len() != n {
            return Err(format!(
                "dep_heads length {} does not match {} tokens",
                self.dep_heads.len(),
                n
            ));
        }
        if self.dep_labels.len() != n {
            return Err(format!(
                "dep_labels length {} does not match {} tokens",
                self.dep_labels.len(),
                n
            ));
        }
        for (name, m) in [("head", &self.head), ("tail", &self.tail)] {
            if m.span.start >= m.span.end {
                return Err(format!("{name} span is empty"));
            }
            if m.span.end > n {
                return Err(format!("{name} span {:?} exceeds {} tokens", m.span, n));
            }
            if !is_entity_type(&m.type_tag) {
                return Err(format!("{name} type {:?} is not in the type vocabulary", m.type_tag));
            }
        }
        if self.head.span.start < self.tail.span.end && self.tail.span.start < self.head.span.end {
            return Err("head and tail spans overlap".into());
        }
        if self.relation.is_empty() {
            return Err("empty relation label".into());
        }
        if let Err(e) = DepTree::from_heads(&self.dep_heads) {
            return Err(format!("dependency annotation: {e}"));
        }
        Ok(())
    }
}

/// Identity of an entity pair across sentences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub head: String,
    pub tail: String,
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.head, self.tail)
    }
}

/// All instances sharing one entity pair (and, for train bags, one label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub pair_key: PairKey,
    pub instance_ids: Vec<String>,
    /// Relation indices; train bags carry exactly one.
    pub gold_labels: BTreeSet<usize>,
    pub split: Split,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_ids.is_empty()
    }

    /// The single gold label of a train bag.
    pub fn label(&self) -> usize {
        debug_assert_eq!(self.gold_labels.len(), 1);
        *self.gold_labels.iter().next().expect("bag carries a label")
    }
}

/// Total bijection between relation label strings and indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    na_index: usize,
}

impl RelationVocab {
    /// Builds a vocabulary from observed labels. `NA` is added when absent;
    /// labels are sorted so the mapping is reproducible.
    pub fn from_labels<I, S>(labels: I) -> RelationVocab
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: BTreeSet<String> =
            labels.into_iter().map(|l| l.as_ref().to_string()).collect();
        set.insert(NA_LABEL.to_string());
        let labels: Vec<String> = set.into_iter().collect();
        Self::from_ordered(labels).expect("sorted label set always contains NA exactly once")
    }

    /// Restores a vocabulary with a fixed label order (e.g. from a manifest).
    pub fn from_ordered(labels: Vec<String>) -> Result<RelationVocab> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate relation label {l:?}")));
            }
        }
        let na_index = *index
            .get(NA_LABEL)
            .ok_or_else(|| Error::Config("relation vocabulary lacks NA".into()))?;
        Ok(RelationVocab {
            labels,
            index,
            na_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn na_index(&self) -> usize {
        self.na_index
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One rejected input line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordError {
    pub line: usize,
    pub reason: String,
}

/// Accounting for a load: how many records were kept and which were rejected.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub errors: Vec<RecordError>,
}

impl LoadReport {
    pub fn rejected(&self) -> usize {
        self.errors.len()
    }
}

/// A loaded and validated dataset.
#[derive(Debug)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub vocab: RelationVocab,
    pub report: LoadReport,
}

/// Serialized form of an entity mention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MentionRecord {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub type_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_id: Option<String>,
}

/// One line of the interchange format. `stp`/`sdp` are informational index
/// arrays emitted by `prepare`; loading always revalidates from `dep_heads`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<String>,
    pub head: MentionRecord,
    pub tail: MentionRecord,
    pub dep_heads: Vec<i64>,
    pub dep_labels: Vec<String>,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stp: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdp: Option<Vec<usize>>,
}

impl From<&Instance> for Record {
    fn from(inst: &Instance) -> Record {
        let mention = |m: &EntityMention| MentionRecord {
            surface: m.surface.clone(),
            start: m.span.start,
            end: m.span.end,
            type_tag: m.type_tag.clone(),
            kb_id: m.kb_id.clone(),
        };
        Record {
            id: inst.id.clone(),
            tokens: inst.tokens.clone(),
            head: mention(&inst.head),
            tail: mention(&inst.tail),
            dep_heads: inst.dep_heads.clone(),
            dep_labels: inst.dep_labels.clone(),
            relation: inst.relation.clone(),
            stp: None,
            sdp: None,
        }
    }
}

impl Record {
    pub fn into_instance(self) -> Instance {
        let mention = |m: MentionRecord| EntityMention {
            surface: m.surface,
            span: m.start..m.end,
            type_tag: m.type_tag,
            kb_id: m.kb_id,
        };
        Instance {
            id: self.id,
            tokens: self.tokens,
            head: mention(self.head),
            tail: mention(self.tail),
            dep_heads: self.dep_heads,
            dep_labels: self.dep_labels,
            relation: self.relation,
        }
    }
}

/// Loads a record stream, validating every instance. Invalid records land in
/// the report; valid ones are returned in file order. The relation vocabulary
/// covers the labels seen in this file plus `NA`.
pub fn load_dataset(path: &Path, _split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut instances = Vec::new();
    let mut report = LoadReport::default();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(RecordError {
                    line: lineno,
                    reason: format!("schema: {e}"),
                });
                continue;
            }
        };
        let instance = record.into_instance();
        if let Err(reason) = instance.validate() {
            report.errors.push(RecordError { line: lineno, reason });
            continue;
        }
        if !seen_ids.insert(instance.id.clone()) {
            report.errors.push(RecordError {
                line: lineno,
                reason: format!("duplicate instance id {:?}", instance.id),
            });
            continue;
        }
        instances.push(instance);
    }
    report.loaded = instances.len();

    let vocab = RelationVocab::from_labels(instances.iter().map(|i| i.relation.as_str()));
    Ok(Dataset {
        instances,
        vocab,
        report,
    })
}

/// Writes instances in the interchange format, one JSON object per line.
pub fn write_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let record = Record::from(inst);
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Record { line: 0, reason: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Groups validated instances into bags.
///
/// Train: one bag per (pair, relation) combination. Test: one bag per pair
/// with the gold label set as the union of that pair's labels. Labels absent
/// from `vocab` are rejected upstream, so indexing here is total.
pub fn group_into_bags(instances: &[Instance], split: Split, vocab: &RelationVocab) -> Vec<Bag> {
    match split {
        Split::Train => {
            let mut groups: HashMap<(PairKey, usize), Vec<String>> = HashMap::new();
            for inst in instances {
                let rel = vocab
                    .index_of(&inst.relation)
                    .expect("train label present in vocabulary");
                groups
                    .entry((inst.pair_key(), rel))
                    .or_default()
                    .push(inst.id.clone());
            }
            let mut keys: Vec<(PairKey, usize)> = groups.keys().cloned().collect();
            keys.sort();
            keys.into_iter()
                .map(|key| {
                    let instance_ids = groups.remove(&key).expect("key from map");
                    let (pair_key, rel) = key;
                    Bag {
                        pair_key,
                        instance_ids,
                        gold_labels: BTreeSet::from([rel]),
                        split,
                    }
                })
                .collect()
        }
        Split::Test => {
            let mut groups: HashMap<PairKey, (Vec<String>, BTreeSet<usize>)> = HashMap::new();
            for inst in instances {
                let rel = vocab
                    .index_of(&inst.relation)
                    .expect("test label present in vocabulary");
                let entry = groups.entry(inst.pair_key()).or_default();
                entry.0.push(inst.id.clone());
                entry.1.insert(rel);
            }
            let mut keys: Vec<PairKey> = groups.keys().cloned().collect();
            keys.sort();
            keys.into_iter()
                .map(|key| {
                    let (instance_ids, gold_labels) = groups.remove(&key).expect("key from map");
                    Bag {
                        pair_key: key,
                        instance_ids,
                        gold_labels,
                        split,
                    }
                })
                .collect()
        }
    }
}

/// Per-relation loss weights over train bags: inverse bag frequency scaled by
/// N/K so the bag-weighted mean is one. Relations with zero bags get weight 1.
pub fn class_weights(bags: &[Bag], vocab: &RelationVocab) -> Vec<f64> {
    let mut counts = vec![0usize; vocab.len()];
    for bag in bags {
        debug_assert_eq!(bag.split, Split::Train);
        counts[bag.label()] += 1;
    }
    let total = bags.len() as f64;
    let populated = counts.iter().filter(|&&c| c > 0).count() as f64;
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                1.0
            } else {
                (total / populated) / c as f64
            }
        })
        .collect()
}

/// Summary statistics for one split, as reported by `prepare`.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub split: Split,
    pub sentences: usize,
    pub entity_pairs: usize,
    pub relation_mentions: usize,
    pub rejected_records: usize,
}

impl DatasetStats {
    pub fn compute(instances: &[Instance], split: Split, rejected: usize) -> DatasetStats {
        let pairs: HashSet<PairKey> = instances.iter().map(|i| i.pair_key()).collect();
        let vocab = RelationVocab::from_labels(instances.iter().map(|i| i.relation.as_str()));
        let bags = group_into_bags(instances, split, &vocab);
        let na = vocab.na_index();
        let relation_mentions = bags
            .iter()
            .map(|b| b.gold_labels.iter().filter(|&&l| l != na).count())
            .sum();
        DatasetStats {
            split,
            sentences: instances.len(),
            entity_pairs: pairs.len(),
            relation_mentions,
            rejected_records: rejected,
        }
    }
}
