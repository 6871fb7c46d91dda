//! End-to-end wiring shared by the command-line surface and the integration
//! tests: corpus to tokenizer to structured inputs to bags, training runs,
//! evaluation runs, and the variant sweep.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    class_weights, group_into_bags, Bag, Instance, Record, RelationVocab, Split,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{
    self, metrics, predict_all, sort_predictions, top_n_distribution, total_positives, EvalBag,
    Metrics, PRCurve, Prediction,
};
use crate::manifest::Manifest;
use crate::model::Model;
use crate::sentrep::Ablation;
use crate::structinput::{structured_input, PathMode, SpecialVocab, SubwordTokenizer};
use crate::train::{train, TrainBag, TrainConfig, TrainReport};

/// Encoder size selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Tiny,
    BertBase,
}

impl Profile {
    pub fn config(self, base_vocab: usize) -> EncoderConfig {
        match self {
            Profile::Tiny => EncoderConfig::tiny(base_vocab),
            Profile::BertBase => EncoderConfig::bert_base(base_vocab),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Profile> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "bert-base" => Ok(Profile::BertBase),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Tiny => "tiny",
            Profile::BertBase => "bert-base",
        })
    }
}

/// Everything a run needs beyond the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub profile: Profile,
    /// Overrides the profile's fine-tuning depth when set.
    pub fine_tune_last_k: Option<usize>,
    pub ablation: Ablation,
    pub max_seq_length: usize,
    pub train: TrainConfig,
}

impl Default for RunSettings {
    fn default() -> RunSettings {
        RunSettings {
            profile: Profile::Tiny,
            fine_tune_last_k: None,
            ablation: Ablation::Full,
            max_seq_length: 64,
            train: TrainConfig::default(),
        }
    }
}

/// Whole-word vocabulary over the corpus plus the task-specific tokens.
pub fn build_tokenizer(instances: &[Instance]) -> Result<(SubwordTokenizer, SpecialVocab)> {
    let mut words: Vec<String> = Vec::new();
    for inst in instances {
        words.extend(inst.tokens.iter().cloned());
        words.extend(inst.mention_words(&inst.head).iter().cloned());
        words.extend(inst.mention_words(&inst.tail).iter().cloned());
    }
    let mut tokenizer = SubwordTokenizer::from_words(&words)?;
    let special = SpecialVocab::standard();
    special.install(&mut tokenizer)?;
    Ok((tokenizer, special))
}

fn instances_by_id(instances: &[Instance]) -> HashMap<&str, &Instance> {
    instances.iter().map(|i| (i.id.as_str(), i)).collect()
}

fn bag_inputs(
    bag: &Bag,
    by_id: &HashMap<&str, &Instance>,
    tokenizer: &SubwordTokenizer,
    ablation: Ablation,
    max_seq_length: usize,
) -> Result<Vec<crate::structinput::StructuredInput>> {
    bag.instance_ids
        .iter()
        .map(|id| {
            let inst = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Input(format!("bag references unknown instance {id}")))?;
            structured_input(
                inst,
                tokenizer,
                ablation.path_mode(),
                ablation.use_entity_types(),
                max_seq_length,
            )
        })
        .collect()
}

pub fn assemble_train_bags(
    instances: &[Instance],
    vocab: &RelationVocab,
    tokenizer: &SubwordTokenizer,
    ablation: Ablation,
    max_seq_length: usize,
) -> Result<Vec<TrainBag>> {
    let by_id = instances_by_id(instances);
    group_into_bags(instances, Split::Train, vocab)
        .iter()
        .map(|bag| {
            Ok(TrainBag {
                inputs: bag_inputs(bag, &by_id, tokenizer, ablation, max_seq_length)?,
                gold: bag.label(),
            })
        })
        .collect()
}

pub fn assemble_eval_bags(
    instances: &[Instance],
    vocab: &RelationVocab,
    tokenizer: &SubwordTokenizer,
    ablation: Ablation,
    max_seq_length: usize,
) -> Result<Vec<EvalBag>> {
    for inst in instances {
        if vocab.index_of(&inst.relation).is_none() {
            return Err(Error::Eval(format!(
                "test label {:?} missing from the model's relation inventory",
                inst.relation
            )));
        }
    }
    let by_id = instances_by_id(instances);
    group_into_bags(instances, Split::Test, vocab)
        .iter()
        .map(|bag| {
            Ok(EvalBag {
                pair_key: bag.pair_key.to_string(),
                inputs: bag_inputs(bag, &by_id, tokenizer, ablation, max_seq_length)?,
                gold: bag.gold_labels.clone(),
            })
        })
        .collect()
}

pub struct TrainedRun {
    pub model: Model,
    pub tokenizer: SubwordTokenizer,
    pub special: SpecialVocab,
    pub vocab: RelationVocab,
    pub class_weights: Vec<f64>,
    pub report: TrainReport,
    pub settings: RunSettings,
}

impl TrainedRun {
    /// The manifest describing this run, unsealed; callers may attach data
    /// hashes before saving.
    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(
            self.model.encoder.config.clone(),
            self.model.ablation,
            self.vocab.labels().to_vec(),
            self.special.all(),
            self.settings.max_seq_length,
            self.settings.train.seed,
        );
        m.train = Some(self.settings.train.clone());
        m
    }
}

/// Builds vocabulary, tokenizer, and model from scratch on the given train
/// split, then optimizes. The relation inventory is read off the data.
pub fn train_from_instances(
    instances: &[Instance],
    settings: &RunSettings,
    log_sink: Option<&mut dyn Write>,
) -> Result<TrainedRun> {
    if instances.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let vocab = RelationVocab::from_labels(instances.iter().map(|i| i.relation.as_str()));
    let (tokenizer, special) = build_tokenizer(instances)?;
    let mut config = settings.profile.config(tokenizer.base_len());
    config.added_tokens = special.count();
    config.max_positions = config.max_positions.max(settings.max_seq_length);
    if let Some(k) = settings.fine_tune_last_k {
        config.fine_tune_last_k = k;
    }
    config.validate()?;
    if settings.max_seq_length > config.max_positions {
        return Err(Error::Config(format!(
            "max_seq_length {} exceeds encoder positions {}",
            settings.max_seq_length, config.max_positions
        )));
    }

    let mut model = Model::init(&config, vocab.len(), settings.ablation, settings.train.seed)?;
    let bags = assemble_train_bags(
        instances,
        &vocab,
        &tokenizer,
        settings.ablation,
        settings.max_seq_length,
    )?;
    let grouped = group_into_bags(instances, Split::Train, &vocab);
    let weights = class_weights(&grouped, &vocab);
    let report = train(&mut model, &bags, &weights, &settings.train, log_sink)?;
    Ok(TrainedRun {
        model,
        tokenizer,
        special,
        vocab,
        class_weights: weights,
        report,
        settings: settings.clone(),
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub metrics: Metrics,
    pub curve: PRCurve,
    /// Ranked deterministically.
    pub predictions: Vec<Prediction>,
    pub distribution: Vec<(String, usize)>,
}

/// Scores a test split against a trained model.
pub fn evaluate_instances(
    model: &Model,
    tokenizer: &SubwordTokenizer,
    vocab: &RelationVocab,
    instances: &[Instance],
    max_seq_length: usize,
) -> Result<EvalOutcome> {
    if vocab.len() != model.num_relations {
        return Err(Error::Eval(format!(
            "model scores {} relations, vocabulary lists {}",
            model.num_relations,
            vocab.len()
        )));
    }
    let bags = assemble_eval_bags(instances, vocab, tokenizer, model.ablation, max_seq_length)?;
    let mut predictions = predict_all(model, &bags, vocab.na_index())?;
    sort_predictions(&mut predictions);
    let positives = total_positives(&bags, vocab.na_index());
    let metrics = metrics(&predictions, positives)?;
    let curve = eval::pr_curve(&predictions, positives)?;
    let top_n = 300.min(predictions.len());
    let distribution = top_n_distribution(&predictions, top_n, vocab)?;
    Ok(EvalOutcome { metrics, curve, predictions, distribution })
}

/// Table row of the variant sweep. Carries the variant's full sealed
/// manifest so the table alone suffices to rerun any row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub flag: String,
    pub auc: f64,
    pub p_at: Vec<(usize, f64)>,
    pub config_hash: String,
    pub manifest: Manifest,
}

/// Variant order used in reports: relation-embedding removal first, entity
/// types, path source, attention pooling, then the full model.
pub const ABLATION_ORDER: [Ablation; 5] = [
    Ablation::NoRelEmb,
    Ablation::NoEntityTypes,
    Ablation::SdpInput,
    Ablation::NoRelAttn,
    Ablation::Full,
];

/// Trains and evaluates every variant with otherwise identical settings.
pub fn run_ablation(
    train_instances: &[Instance],
    test_instances: &[Instance],
    settings: &RunSettings,
    mut progress: Option<&mut dyn Write>,
) -> Result<Vec<AblationOutcome>> {
    let mut rows = Vec::with_capacity(ABLATION_ORDER.len());
    for variant in ABLATION_ORDER {
        if let Some(sink) = progress.as_deref_mut() {
            writeln!(sink, "variant {}", variant.flag())
                .map_err(|e| Error::io("ablation progress", e))?;
        }
        let mut var_settings = settings.clone();
        var_settings.ablation = variant;
        let run = train_from_instances(train_instances, &var_settings, None)?;
        let outcome = evaluate_instances(
            &run.model,
            &run.tokenizer,
            &run.vocab,
            test_instances,
            var_settings.max_seq_length,
        )?;
        let mut manifest = run.manifest();
        manifest.seal();
        rows.push(AblationOutcome {
            flag: variant.flag().to_string(),
            auc: outcome.metrics.auc,
            p_at: outcome.metrics.p_at.clone(),
            config_hash: manifest.config_hash.clone(),
            manifest,
        });
    }
    Ok(rows)
}

/// A record enriched with both path annotations, the `prepare` output form.
pub fn annotated_record(inst: &Instance) -> Result<Record> {
    let mut rec = Record::from(inst);
    rec.stp = Some(PathMode::Stp.path_indices(inst)?);
    rec.sdp = Some(PathMode::Sdp.path_indices(inst)?);
    Ok(rec)
}

/// Writes annotated records as line-delimited JSON.
pub fn write_annotated(path: &Path, instances: &[Instance]) -> Result<()> {
    use std::io::BufWriter;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let rec = annotated_record(inst)?;
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Record { line: 0, reason: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Attention-inspection cases for a synthetic split: every non-NA instance
/// paired with its planted pattern token.
pub fn pattern_cases(
    instances: &[Instance],
    tokenizer: &SubwordTokenizer,
    ablation: Ablation,
    max_seq_length: usize,
) -> Result<Vec<(crate::structinput::StructuredInput, String)>> {
    let mut cases = Vec::new();
    for inst in instances {
        let Some(expected) = crate::synth::pattern_token(&inst.relation) else {
            continue;
        };
        let input = structured_input(
            inst,
            tokenizer,
            ablation.path_mode(),
            ablation.use_entity_types(),
            max_seq_length,
        )?;
        cases.push((input, expected));
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::synth::{self, SynthConfig};

    fn tiny_settings() -> RunSettings {
        RunSettings {
            profile: Profile::Tiny,
            fine_tune_last_k: None,
            ablation: Ablation::Full,
            max_seq_length: 32,
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                learning_rate: 1e-3,
                dropout: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    fn tiny_corpus() -> synth::SynthCorpus {
        synth::generate(&SynthConfig {
            num_relations: 2,
            train_bags: 12,
            test_bags: 8,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn to_instances(records: &[Record]) -> Vec<Instance> {
        records.iter().map(|r| r.clone().into_instance()).collect()
    }

    #[test]
    fn train_then_evaluate_round_trips() {
        let corpus = tiny_corpus();
        let train_insts = to_instances(&corpus.train);
        let test_insts = to_instances(&corpus.test);
        let run = train_from_instances(&train_insts, &tiny_settings(), None).unwrap();
        assert_eq!(run.vocab.labels(), corpus.relations.as_slice());
        assert!(run.report.total_steps > 0);
        let outcome = evaluate_instances(
            &run.model,
            &run.tokenizer,
            &run.vocab,
            &test_insts,
            32,
        )
        .unwrap();
        assert!(outcome.metrics.auc >= 0.0 && outcome.metrics.auc <= 1.0);
        // every test bag scored against both non-NA relations
        let bags = group_into_bags(&test_insts, Split::Test, &run.vocab);
        assert_eq!(outcome.predictions.len(), bags.len() * 2);
        let total: usize = outcome.distribution.iter().map(|(_, c)| c).sum();
        assert_eq!(total, 300.min(outcome.predictions.len()));
    }

    #[test]
    fn evaluation_rejects_unknown_labels() {
        let corpus = tiny_corpus();
        let train_insts = to_instances(&corpus.train);
        let run = train_from_instances(&train_insts, &tiny_settings(), None).unwrap();
        let mut test_insts = to_instances(&corpus.test);
        test_insts[0].relation = "rel99".into();
        let err = evaluate_instances(
            &run.model,
            &run.tokenizer,
            &run.vocab,
            &test_insts,
            32,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 6);
    }

    #[test]
    fn annotated_records_round_trip_byte_stable() {
        let corpus = tiny_corpus();
        let insts = to_instances(&corpus.train);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        write_annotated(&p1, &insts).unwrap();
        let loaded = crate::corpus::load_dataset(&p1, Split::Train).unwrap();
        assert!(loaded.report.errors.is_empty());
        write_annotated(&p2, &loaded.instances).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn ablation_sweep_emits_five_rows_in_order() {
        let corpus = tiny_corpus();
        let train_insts = to_instances(&corpus.train);
        let test_insts = to_instances(&corpus.test);
        let mut settings = tiny_settings();
        settings.train.epochs = 1;
        let rows = run_ablation(&train_insts, &test_insts, &settings, None).unwrap();
        assert_eq!(rows.len(), 5);
        let flags: Vec<&str> = rows.iter().map(|r| r.flag.as_str()).collect();
        assert_eq!(flags, vec!["no_rel_emb", "no_entity_types", "sdp_input", "no_rel_attn", "full"]);
        for row in &rows {
            assert!(row.auc >= 0.0 && row.auc <= 1.0, "{} auc {}", row.flag, row.auc);
            assert_eq!(row.config_hash.len(), 64);
        }
        // distinct variants hash differently
        let hashes: BTreeSet<&String> = rows.iter().map(|r| &r.config_hash).collect();
        assert_eq!(hashes.len(), 5);
    }

    #[test]
    fn settings_toml_round_trip() {
        let settings = tiny_settings();
        let text = toml::to_string(&settings).unwrap();
        let back: RunSettings = toml::from_str(&text).unwrap();
        assert_eq!(settings, back);
        let sparse: RunSettings = toml::from_str("max_seq_length = 48\n").unwrap();
        assert_eq!(sparse.max_seq_length, 48);
        assert_eq!(sparse.profile, Profile::Tiny);
    }
}
