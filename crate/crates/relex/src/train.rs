//! Multi-instance training: shuffled bag batches, class-weighted loss,
//! warmup-then-cosine learning rate, partial fine-tuning via the trainable
//! partition.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_logit_gradient, trainable_param, Model};
use crate::nn::{self, lr_at, warmup_steps, Adam, TensorView};
use crate::structinput::StructuredInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Bags per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fraction of total updates spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Dropout on the bag vector before the classifier.
    pub dropout: f64,
    pub seed: u64,
    /// Bags above this size are uniformly subsampled each epoch.
    pub max_bag_size: usize,
    /// Extra name prefixes to freeze on top of the fine-tuning partition.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 3,
            learning_rate: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_fraction: 0.001,
            weight_decay: 0.001,
            dropout: 0.4,
            seed: 13,
            max_bag_size: 500,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.max_bag_size == 0 {
            return Err(Error::Config("max_bag_size must be positive".into()));
        }
        Ok(())
    }
}

/// One training bag, already tokenized.
#[derive(Debug, Clone)]
pub struct TrainBag {
    pub inputs: Vec<StructuredInput>,
    pub gold: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub logs: Vec<StepLog>,
}

/// Runs the optimization loop in place. Bags are shuffled per epoch with a
/// seed derived from the run seed; the whole loop is serial and repeatable.
pub fn train(
    model: &mut Model,
    bags: &[TrainBag],
    class_weights: &[f64],
    config: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::Config("no training bags".into()));
    }
    if class_weights.len() != model.num_relations {
        return Err(Error::Config(format!(
            "{} class weights for {} relations",
            class_weights.len(),
            model.num_relations
        )));
    }
    for bag in bags {
        if bag.gold >= model.num_relations {
            return Err(Error::Config(format!("gold label {} out of range", bag.gold)));
        }
    }

    let batches_per_epoch = bags.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let warmup = warmup_steps(total_steps, config.warmup_fraction);
    let mut adam = Adam::new(
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.weight_decay,
    );
    let mut grads = model.zeros_like();
    let mut dropout_rng = nn::seeded_rng(config.seed, "dropout");
    let enc_cfg = model.encoder.config.clone();
    let extra_frozen =
        |name: &str| config.freeze.iter().any(|p| name.starts_with(p.as_str()));

    let mut logs = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut epoch_rng = nn::seeded_rng(config.seed, &format!("epoch-{epoch}"));
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut epoch_rng);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let lr = lr_at(step, total_steps, warmup, config.learning_rate);
            grads.zero_all();
            let mut loss_sum = 0.0;
            for &bi in chunk {
                let bag = &bags[bi];
                let subsampled: Option<Vec<StructuredInput>> =
                    if bag.inputs.len() > config.max_bag_size {
                        let mut idx: Vec<usize> = rand::seq::index::sample(
                            &mut epoch_rng,
                            bag.inputs.len(),
                            config.max_bag_size,
                        )
                        .into_iter()
                        .collect();
                        idx.sort_unstable();
                        Some(idx.into_iter().map(|i| bag.inputs[i].clone()).collect())
                    } else {
                        None
                    };
                let inputs: &[StructuredInput] =
                    subsampled.as_deref().unwrap_or(&bag.inputs);
                let fwd =
                    model.forward_bag(inputs, Some((config.dropout, &mut dropout_rng)))?;
                let w = class_weights[bag.gold];
                let p_gold = fwd.probs[bag.gold].max(f64::MIN_POSITIVE);
                loss_sum += -w * p_gold.ln();
                let d_logits = loss_logit_gradient(&fwd.probs, bag.gold, w, chunk.len());
                model.backward_bag(inputs, &fwd, &d_logits, &mut grads);
            }
            let loss = loss_sum / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }

            adam.begin_step();
            let mut gviews: Vec<(String, TensorView<'_>)> = Vec::new();
            grads.for_each(&mut |name, view| gviews.push((name, view)));
            let mut at = 0usize;
            model.for_each_mut(&mut |name, mut tensor| {
                let (gname, gview) = &gviews[at];
                at += 1;
                debug_assert_eq!(&name, gname, "grad/param visitation order diverged");
                if trainable_param(&enc_cfg, &name) && !extra_frozen(&name) {
                    adam.update(&name, lr, &mut tensor, gview);
                }
            });

            let entry = StepLog { step, epoch, lr, loss };
            if let Some(sink) = log_sink.as_deref_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(sink, "{line}")
                    .map_err(|e| Error::io("training log", e))?;
            }
            logs.push(entry);
        }
    }

    Ok(TrainReport { total_steps, warmup_steps: warmup, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::sentrep::Ablation;
    use crate::structinput::StructuredInput;

    fn micro_config(k: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            vocab_size: 16,
            added_tokens: 4,
            max_positions: 8,
            fine_tune_last_k: k,
        }
    }

    fn toy_input(ids: &[u32]) -> StructuredInput {
        let max = 8;
        let eff = ids.len();
        let mut head_mask = vec![0.0; max];
        let mut tail_mask = vec![0.0; max];
        head_mask[1] = 1.0;
        tail_mask[eff - 2] = 1.0;
        let mut token_ids = ids.to_vec();
        token_ids.resize(max, 0);
        StructuredInput {
            token_ids,
            position_ids: (0..max).collect(),
            head_mask,
            tail_mask,
            stp_region: 1..eff - 1,
            padding_mask: (0..max).map(|t| t < eff).collect(),
            effective_len: eff,
        }
    }

    fn toy_bags() -> Vec<TrainBag> {
        // each class keyed by a distinctive token
        (0..5)
            .map(|c| TrainBag {
                inputs: vec![
                    toy_input(&[2, 3 + c, 10, 4]),
                    toy_input(&[2, 3 + c, 11, 4]),
                ],
                gold: c as usize,
            })
            .collect()
    }

    fn toy_model(k: usize) -> Model {
        Model::init(&micro_config(k), 5, Ablation::Full, 9).unwrap()
    }

    #[test]
    fn schedule_in_logs_matches_closed_form() {
        let mut model = toy_model(1);
        let bags = toy_bags();
        let config = TrainConfig {
            batch_size: 1,
            epochs: 4,
            learning_rate: 1e-3,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        // 5 bags × 4 epochs = 20 steps, warmup = ceil(0.001·20) = 1
        let report = train(&mut model, &bags, &[1.0; 5], &config, None).unwrap();
        assert_eq!(report.total_steps, 20);
        assert_eq!(report.warmup_steps, 1);
        assert_eq!(report.logs.len(), 20);
        assert_eq!(report.logs[0].lr, 1e-3);
        for log in &report.logs {
            assert_eq!(log.lr, lr_at(log.step, 20, 1, 1e-3));
        }
        assert!(report.logs[19].lr.abs() < 1e-18);
    }

    #[test]
    fn fully_frozen_run_keeps_loss_constant() {
        let mut model = toy_model(0);
        let before = model.clone();
        let bags = toy_bags();
        let config = TrainConfig {
            batch_size: 8,
            epochs: 3,
            dropout: 0.0,
            freeze: vec![
                "embeddings.added".into(),
                "relhead.".into(),
                "bag.".into(),
                "classifier.".into(),
            ],
            ..TrainConfig::default()
        };
        let report = train(&mut model, &bags, &[1.0; 5], &config, None).unwrap();
        assert_eq!(report.logs.len(), 3);
        let first = report.logs[0].loss;
        for log in &report.logs {
            assert_eq!(log.loss, first);
        }
        assert_eq!(model, before);
    }

    #[test]
    fn fixed_seed_gives_bitwise_identical_logs() {
        let base = toy_model(2);
        let bags = toy_bags();
        let config = TrainConfig {
            batch_size: 2,
            epochs: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut m1 = base.clone();
        let mut sink1 = Vec::new();
        let mut handle1: &mut dyn Write = &mut sink1;
        train(&mut m1, &bags, &[1.0; 5], &config, Some(&mut handle1)).unwrap();
        let mut m2 = base.clone();
        let mut sink2 = Vec::new();
        let mut handle2: &mut dyn Write = &mut sink2;
        train(&mut m2, &bags, &[1.0; 5], &config, Some(&mut handle2)).unwrap();
        assert!(!sink1.is_empty());
        assert_eq!(sink1, sink2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn separable_toy_loss_decreases() {
        let mut model = toy_model(2);
        let bags = toy_bags();
        let config = TrainConfig {
            batch_size: 5,
            epochs: 40,
            learning_rate: 1e-2,
            dropout: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &bags, &[1.0; 5], &config, None).unwrap();
        let first = report.logs.first().unwrap().loss;
        let last = report.logs.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
        assert!(last < 0.5 * first, "insufficient progress: {first} -> {last}");
    }

    #[test]
    fn optimizer_touches_only_trainable_tensors() {
        let mut model = toy_model(1);
        let mut before = Vec::new();
        model.for_each(&mut |name, view| before.push((name, view.as_slice().to_vec())));
        let bags = toy_bags();
        let config = TrainConfig {
            batch_size: 8,
            epochs: 1,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        train(&mut model, &bags, &[1.0; 5], &config, None).unwrap();
        let mut after = Vec::new();
        model.for_each(&mut |name, view| after.push((name, view.as_slice().to_vec())));
        let cfg = micro_config(1);
        for ((name, old), (_, new)) in before.iter().zip(&after) {
            if trainable_param(&cfg, name) {
                assert_ne!(old, new, "{name} should have moved");
            } else {
                assert_eq!(old, new, "{name} is frozen");
            }
        }
    }

    #[test]
    fn oversized_bags_are_subsampled_not_fatal() {
        let mut model = toy_model(1);
        let big = TrainBag {
            inputs: (0..7).map(|i| toy_input(&[2, 3 + (i % 4), 10, 4])).collect(),
            gold: 0,
        };
        let config = TrainConfig {
            batch_size: 1,
            epochs: 1,
            max_bag_size: 3,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &[big], &[1.0; 5], &config, None).unwrap();
        assert!(report.logs[0].loss.is_finite());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut model = toy_model(1);
        let bags = toy_bags();
        let config = TrainConfig { batch_size: 8, epochs: 1, ..TrainConfig::default() };
        let err = train(&mut model, &bags, &[f64::NAN; 5], &config, None).unwrap_err();
        match err {
            Error::NonFiniteLoss { step } => assert_eq!(step, 1),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = TrainConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn train_config_toml_round_trip() {
        let config = TrainConfig { epochs: 7, freeze: vec!["layer0.".into()], ..TrainConfig::default() };
        let text = toml::to_string(&config).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
        // partial files fall back to defaults
        let sparse: TrainConfig = toml::from_str("epochs = 2\n").unwrap();
        assert_eq!(sparse.epochs, 2);
        assert_eq!(sparse.batch_size, 32);
    }
}
