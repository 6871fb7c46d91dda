//! Synthetic benchmark corpus: each relation is triggered by one planted
//! pattern token sitting on the dependency path between the entities, with
//! optional bag-level label noise on the training split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MentionRecord, Record, ENTITY_TYPES, NA_LABEL};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Planted relations (NA comes on top of these).
    pub num_relations: usize,
    pub train_bags: usize,
    pub test_bags: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probability that a training bag's label is resampled to a wrong one.
    pub noise: f64,
    /// Fraction of bags whose true label is NA.
    pub na_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            num_relations: 5,
            train_bags: 2000,
            test_bags: 400,
            min_sentences: 1,
            max_sentences: 3,
            noise: 0.0,
            na_fraction: 0.3,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_relations == 0 {
            return Err(Error::Config("need at least one planted relation".into()));
        }
        if self.train_bags == 0 || self.test_bags == 0 {
            return Err(Error::Config("bag counts must be positive".into()));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::Config("sentence range must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..1.0).contains(&self.na_fraction) {
            return Err(Error::Config("noise in [0,1], na_fraction in [0,1)".into()));
        }
        Ok(())
    }

    /// Relation inventory in classifier order: NA first, then the planted
    /// labels (alphabetical order matches the vocabulary builder for K ≤ 10).
    pub fn relation_labels(&self) -> Vec<String> {
        let mut labels = vec![NA_LABEL.to_string()];
        labels.extend((0..self.num_relations).map(relation_label));
        labels
    }
}

pub fn relation_label(k: usize) -> String {
    format!("rel{k}")
}

/// The lexical trigger for a planted relation label, if it has one.
pub fn pattern_token(label: &str) -> Option<String> {
    label.strip_prefix("rel").map(|k| format!("pattern{k}"))
}

const FILLERS: [&str; 12] = [
    "the", "a", "quiet", "green", "old", "report", "city", "figure", "meeting", "note",
    "river", "plan",
];

#[derive(Debug)]
pub struct SynthCorpus {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    pub relations: Vec<String>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = nn::seeded_rng(config.seed, "synth");
    let train = generate_split(config, &mut rng, "tr", config.train_bags, config.noise);
    let test = generate_split(config, &mut rng, "te", config.test_bags, 0.0);
    Ok(SynthCorpus { train, test, relations: config.relation_labels() })
}

fn generate_split(
    config: &SynthConfig,
    rng: &mut impl Rng,
    tag: &str,
    bags: usize,
    noise: f64,
) -> Vec<Record> {
    let k = config.num_relations;
    let mut records = Vec::new();
    for b in 0..bags {
        // label index: 0 = NA, 1..=k planted
        let truth = if rng.random::<f64>() < config.na_fraction {
            0
        } else {
            1 + rng.random_range(0..k)
        };
        let observed = if noise > 0.0 && rng.random::<f64>() < noise {
            // uniform among the other labels, NA included
            let mut wrong = rng.random_range(0..k);
            if wrong >= truth {
                wrong += 1;
            }
            wrong
        } else {
            truth
        };
        let label = if observed == 0 { NA_LABEL.to_string() } else { relation_label(observed - 1) };
        let head_surface = format!("src{tag}{b}");
        let tail_surface = format!("dst{tag}{b}");
        let head_type = ENTITY_TYPES[rng.random_range(0..ENTITY_TYPES.len())];
        let tail_type = ENTITY_TYPES[rng.random_range(0..ENTITY_TYPES.len())];
        let n = rng.random_range(config.min_sentences..=config.max_sentences);
        for s in 0..n {
            // the sentence's true pattern follows the bag's TRUE label, so
            // noise stays purely a labeling artifact
            let core = if truth == 0 {
                FILLERS[rng.random_range(0..FILLERS.len())].to_string()
            } else {
                format!("pattern{}", truth - 1)
            };
            records.push(build_record(
                rng,
                format!("{tag}-{b}-{s}"),
                &head_surface,
                head_type,
                &tail_surface,
                tail_type,
                &core,
                &label,
            ));
        }
    }
    records
}

/// One sentence whose dependency tree is a star rooted at the core token,
/// placing exactly [head, core, tail] on the sub-tree path.
#[allow(clippy::too_many_arguments)]
fn build_record(
    rng: &mut impl Rng,
    id: String,
    head_surface: &str,
    head_type: &str,
    tail_surface: &str,
    tail_type: &str,
    core: &str,
    label: &str,
) -> Record {
    let left = rng.random_range(0..3usize);
    let right = rng.random_range(0..3usize);
    let mut tokens = vec![head_surface.to_string()];
    for _ in 0..left {
        tokens.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
    }
    let core_idx = tokens.len();
    tokens.push(core.to_string());
    for _ in 0..right {
        tokens.push(FILLERS[rng.random_range(0..FILLERS.len())].to_string());
    }
    let tail_idx = tokens.len();
    tokens.push(tail_surface.to_string());

    let dep_heads: Vec<i64> =
        (0..tokens.len()).map(|i| if i == core_idx { -1 } else { core_idx as i64 }).collect();
    let dep_labels: Vec<String> = (0..tokens.len())
        .map(|i| if i == core_idx { "root".to_string() } else { "dep".to_string() })
        .collect();

    Record {
        id,
        tokens,
        head: MentionRecord {
            surface: head_surface.to_string(),
            start: 0,
            end: 1,
            type_tag: head_type.to_string(),
            kb_id: None,
        },
        tail: MentionRecord {
            surface: tail_surface.to_string(),
            start: tail_idx,
            end: tail_idx + 1,
            type_tag: tail_type.to_string(),
            kb_id: None,
        },
        dep_heads,
        dep_labels,
        relation: label.to_string(),
        stp: None,
        sdp: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{group_into_bags, RelationVocab, Split};
    use crate::structinput::PathMode;
    use std::collections::BTreeSet;

    fn small() -> SynthConfig {
        SynthConfig {
            num_relations: 3,
            train_bags: 40,
            test_bags: 20,
            noise: 0.0,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_pattern_label_bijection() {
        let corpus = generate(&small()).unwrap();
        for rec in corpus.train.iter().chain(&corpus.test) {
            let patterns: Vec<&String> =
                rec.tokens.iter().filter(|t| t.starts_with("pattern")).collect();
            if rec.relation == NA_LABEL {
                assert!(patterns.is_empty(), "NA record {} has a pattern", rec.id);
            } else {
                let expect = pattern_token(&rec.relation).unwrap();
                assert_eq!(patterns, vec![&expect], "record {}", rec.id);
            }
        }
    }

    #[test]
    fn star_tree_path_is_head_core_tail() {
        let corpus = generate(&small()).unwrap();
        for rec in corpus.train.iter().take(50) {
            let inst = rec.clone().into_instance();
            inst.validate().unwrap();
            let stp = PathMode::Stp.path_indices(&inst).unwrap();
            assert_eq!(stp.len(), 3, "record {}", inst.id);
            assert_eq!(stp[0], 0);
            assert_eq!(*stp.last().unwrap(), inst.tokens.len() - 1);
            let middle = &inst.tokens[stp[1]];
            if inst.relation != NA_LABEL {
                assert!(middle.starts_with("pattern"));
            }
        }
    }

    #[test]
    fn bags_have_unique_pairs_and_consistent_labels() {
        let corpus = generate(&small()).unwrap();
        let instances: Vec<_> =
            corpus.train.iter().map(|r| r.clone().into_instance()).collect();
        let vocab = RelationVocab::from_labels(instances.iter().map(|i| i.relation.clone()));
        let bags = group_into_bags(&instances, Split::Train, &vocab);
        // every pair key appears in exactly one train bag: unique surfaces
        let keys: BTreeSet<String> = bags.iter().map(|b| b.pair_key.to_string()).collect();
        assert_eq!(keys.len(), bags.len());
        assert_eq!(bags.len(), 40);
    }

    #[test]
    fn noise_changes_some_train_labels_but_not_patterns() {
        let mut config = small();
        config.noise = 0.5;
        config.train_bags = 200;
        let noisy = generate(&config).unwrap();
        let mut mismatched = 0;
        let mut total = 0;
        for rec in &noisy.train {
            let pattern = rec.tokens.iter().find(|t| t.starts_with("pattern"));
            // the sentence's pattern reflects the TRUE label; compare with
            // the observed one
            let truth = match pattern {
                Some(p) => format!("rel{}", p.strip_prefix("pattern").unwrap()),
                None => NA_LABEL.to_string(),
            };
            total += 1;
            if truth != rec.relation {
                mismatched += 1;
            }
        }
        let rate = mismatched as f64 / total as f64;
        assert!(rate > 0.3 && rate < 0.7, "observed noise rate {rate}");

        // the test split stays clean
        for rec in &noisy.test {
            let pattern = rec.tokens.iter().find(|t| t.starts_with("pattern"));
            let truth = match pattern {
                Some(p) => format!("rel{}", p.strip_prefix("pattern").unwrap()),
                None => NA_LABEL.to_string(),
            };
            assert_eq!(truth, rec.relation);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        let ja = serde_json::to_string(&a.train).unwrap();
        let jb = serde_json::to_string(&b.train).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn relation_inventory_matches_vocab_builder() {
        let config = small();
        let corpus = generate(&config).unwrap();
        let labels: BTreeSet<String> =
            corpus.train.iter().map(|r| r.relation.clone()).collect();
        let vocab = RelationVocab::from_labels(labels.iter().cloned());
        assert_eq!(vocab.labels(), config.relation_labels().as_slice());
        assert_eq!(vocab.na_index(), 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.num_relations = 0;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.min_sentences = 3;
        c.max_sentences = 2;
        assert!(generate(&c).is_err());
        let mut c = small();
        c.na_fraction = 1.0;
        assert!(generate(&c).is_err());
    }
}
