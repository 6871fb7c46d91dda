//! The full model: encoder, relation head, selective bag attention, and the
//! softmax classifier, plus parameter plumbing (named-tensor visitors, the
//! trainable partition, checkpoint tensor IO).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderParams, ForwardCache};
use crate::error::{Error, Result};
use crate::nn::{self, init_normal_1d, softmax, softmax_backward, TensorMut, TensorView};
use crate::sentrep::{self, Ablation, RelationHead, ReprCache};
use crate::structinput::StructuredInput;

/// Bag-level parameters: the selective-attention query and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BagParams {
    pub query: Array1<f64>,
    pub w_r: Array2<f64>,
    pub b_r: Array1<f64>,
}

impl BagParams {
    pub fn zeros(repr_dim: usize, num_relations: usize) -> BagParams {
        BagParams {
            query: Array1::zeros(repr_dim),
            w_r: Array2::zeros((repr_dim, num_relations)),
            b_r: Array1::zeros(num_relations),
        }
    }

    pub fn init(repr_dim: usize, num_relations: usize, seed: u64) -> BagParams {
        let mut rng = nn::seeded_rng(seed, "bag-init");
        BagParams {
            query: init_normal_1d(&mut rng, repr_dim, nn::INIT_STD),
            w_r: nn::init_normal(&mut rng, repr_dim, num_relations, nn::INIT_STD),
            b_r: Array1::zeros(num_relations),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, TensorView<'a>)) {
        f("bag.query".into(), TensorView::D1(&self.query));
        f("classifier.weight".into(), TensorView::D2(&self.w_r));
        f("classifier.bias".into(), TensorView::D1(&self.b_r));
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, TensorMut<'_>)) {
        f("bag.query".into(), TensorMut::D1(&mut self.query));
        f("classifier.weight".into(), TensorMut::D2(&mut self.w_r));
        f("classifier.bias".into(), TensorMut::D1(&mut self.b_r));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub relhead: RelationHead,
    pub bag: BagParams,
    pub ablation: Ablation,
    pub num_relations: usize,
}

impl Model {
    pub fn init(
        config: &EncoderConfig,
        num_relations: usize,
        ablation: Ablation,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if num_relations == 0 {
            return Err(Error::Config("empty relation inventory".into()));
        }
        let d = config.hidden_dim;
        Ok(Model {
            encoder: EncoderParams::init(config, seed),
            relhead: RelationHead::init(d, seed),
            bag: BagParams::init(ablation.repr_dim(d), num_relations, seed),
            ablation,
            num_relations,
        })
    }

    /// Same shapes, all tensors zero; the gradient buffer.
    pub fn zeros_like(&self) -> Model {
        let d = self.encoder.config.hidden_dim;
        Model {
            encoder: EncoderParams::zeros(&self.encoder.config),
            relhead: RelationHead::zeros(d),
            bag: BagParams::zeros(self.ablation.repr_dim(d), self.num_relations),
            ablation: self.ablation,
            num_relations: self.num_relations,
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, TensorView<'a>)) {
        self.encoder.for_each(f);
        self.relhead.for_each(f);
        self.bag.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, TensorMut<'_>)) {
        self.encoder.for_each_mut(f);
        self.relhead.for_each_mut(f);
        self.bag.for_each_mut(f);
    }

    /// Whether an optimizer step may touch the named tensor.
    pub fn trainable(&self, name: &str) -> bool {
        trainable_param(&self.encoder.config, name)
    }

    /// Zeroes every tensor in place; reuses the struct as a gradient buffer.
    pub fn zero_all(&mut self) {
        self.for_each_mut(&mut |_, mut t| t.as_slice_mut().fill(0.0));
    }

    /// Forward through encoder and representation for one sentence.
    pub fn sentence_forward(
        &self,
        input: &StructuredInput,
    ) -> Result<(Array1<f64>, Option<Vec<f64>>)> {
        let (states, _) = encoder::encode(&self.encoder, input)?;
        let (s, cache) = sentrep::sentence_repr(&states, input, &self.relhead, self.ablation)?;
        Ok((s, cache.alpha))
    }
}

/// The fine-tuning partition: the last k encoder layers, the added-token
/// rows, and every head parameter train; the base embedding tables only
/// under full fine-tuning.
pub fn trainable_param(cfg: &EncoderConfig, name: &str) -> bool {
    if name == "embeddings.added" {
        return true;
    }
    if name == "embeddings.tok" || name == "embeddings.pos" {
        return cfg.embeddings_trainable();
    }
    if let Some(rest) = name.strip_prefix("layer") {
        let idx: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("layer tensor names carry their index");
        return idx >= cfg.first_trainable_layer();
    }
    // relation head, bag query, classifier
    true
}

/// Per-sentence forward record inside a bag.
pub struct SentenceForward {
    pub states: Array2<f64>,
    pub enc_cache: ForwardCache,
    pub repr_cache: ReprCache,
    pub s: Array1<f64>,
}

/// Forward record for one bag, sufficient for the backward pass.
pub struct BagForward {
    pub sentences: Vec<SentenceForward>,
    /// Selective-attention weights over the bag's sentences.
    pub attn: Vec<f64>,
    pub bag_vec: Array1<f64>,
    /// Inverted-dropout multipliers; `None` outside training.
    pub drop_mask: Option<Vec<f64>>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl Model {
    /// Encodes a bag: per-sentence representations, selective attention,
    /// classifier probabilities. `dropout` is (rate, rng) in training mode.
    pub fn forward_bag(
        &self,
        inputs: &[StructuredInput],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<BagForward> {
        if inputs.is_empty() {
            return Err(Error::Input("empty bag".into()));
        }
        let mut sentences = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (states, enc_cache) = encoder::encode(&self.encoder, input)?;
            let (s, repr_cache) =
                sentrep::sentence_repr(&states, input, &self.relhead, self.ablation)?;
            sentences.push(SentenceForward { states, enc_cache, repr_cache, s });
        }

        let scores: Vec<f64> = sentences.iter().map(|sf| sf.s.dot(&self.bag.query)).collect();
        let attn = softmax(&scores);
        let repr_dim = sentences[0].s.len();
        let mut bag_vec = Array1::zeros(repr_dim);
        for (sf, &a) in sentences.iter().zip(&attn) {
            bag_vec.scaled_add(a, &sf.s);
        }

        let (classifier_in, drop_mask) = match dropout.as_mut() {
            Some((rate, rng)) if *rate > 0.0 => {
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..repr_dim)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut dropped = bag_vec.clone();
                for (v, &m) in dropped.iter_mut().zip(&mask) {
                    *v *= m;
                }
                (dropped, Some(mask))
            }
            Some(_) => (bag_vec.clone(), Some(vec![1.0; repr_dim])),
            None => (bag_vec.clone(), None),
        };

        let logits = classifier_in.dot(&self.bag.w_r) + &self.bag.b_r;
        let probs = Array1::from(softmax(logits.as_slice().expect("contiguous")));
        Ok(BagForward { sentences, attn, bag_vec, drop_mask, logits, probs })
    }

    /// Backward from a gradient at the logits, accumulating into `grads`.
    pub fn backward_bag(
        &self,
        inputs: &[StructuredInput],
        fwd: &BagForward,
        d_logits: &Array1<f64>,
        grads: &mut Model,
    ) {
        let cfg = &self.encoder.config;
        let classifier_in = match &fwd.drop_mask {
            Some(mask) => {
                let mut v = fwd.bag_vec.clone();
                for (x, &m) in v.iter_mut().zip(mask) {
                    *x *= m;
                }
                v
            }
            None => fwd.bag_vec.clone(),
        };

        grads.bag.b_r += d_logits;
        for (i, &ci) in classifier_in.iter().enumerate() {
            let mut row = grads.bag.w_r.row_mut(i);
            row.scaled_add(ci, d_logits);
        }
        let d_class_in = self.bag.w_r.dot(d_logits);
        let d_bag_vec = match &fwd.drop_mask {
            Some(mask) => {
                let mut v = d_class_in;
                for (x, &m) in v.iter_mut().zip(mask) {
                    *x *= m;
                }
                v
            }
            None => d_class_in,
        };

        let d_attn: Vec<f64> =
            fwd.sentences.iter().map(|sf| sf.s.dot(&d_bag_vec)).collect();
        let d_scores = softmax_backward(&fwd.attn, &d_attn);
        for (sf, &dz) in fwd.sentences.iter().zip(&d_scores) {
            grads.bag.query.scaled_add(dz, &sf.s);
        }

        let first_trainable = cfg.first_trainable_layer();
        let train_emb = cfg.embeddings_trainable();
        for ((sf, input), (&a, &dz)) in fwd
            .sentences
            .iter()
            .zip(inputs)
            .zip(fwd.attn.iter().zip(&d_scores))
        {
            let mut ds = Array1::zeros(sf.s.len());
            ds.scaled_add(a, &d_bag_vec);
            ds.scaled_add(dz, &self.bag.query);
            let mut d_states = Array2::zeros(sf.states.raw_dim());
            sentrep::sentence_repr_backward(
                &ds,
                &sf.repr_cache,
                &sf.states,
                input,
                &self.relhead,
                self.ablation,
                &mut d_states,
                &mut grads.relhead,
            );
            encoder::encode_backward(
                &self.encoder,
                &sf.enc_cache,
                &d_states,
                &mut grads.encoder,
                first_trainable,
                train_emb,
            );
        }
    }
}

/// Class-weighted negative log likelihood for a batch of scored bags.
/// Inputs are (probability vector, gold label) pairs.
pub fn batch_loss(scored: &[(&Array1<f64>, usize)], class_weights: &[f64]) -> f64 {
    let n = scored.len().max(1) as f64;
    let sum: f64 = scored
        .iter()
        .map(|(p, gold)| {
            let pg = p[*gold].max(f64::MIN_POSITIVE);
            -class_weights[*gold] * pg.ln()
        })
        .sum();
    sum / n
}

/// Gradient of [`batch_loss`] at one bag's logits.
pub fn loss_logit_gradient(
    probs: &Array1<f64>,
    gold: usize,
    class_weight: f64,
    batch_size: usize,
) -> Array1<f64> {
    let mut d = probs * (class_weight / batch_size as f64);
    d[gold] -= class_weight / batch_size as f64;
    d
}

const TENSOR_FILE: &str = "tensors.safetensors";

/// Writes every model tensor to a single container file in the directory.
pub fn save_tensors(model: &Model, dir: &Path) -> Result<()> {
    let mut payload: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    model.for_each(&mut |name, view| {
        let bytes: Vec<u8> = view.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        payload.push((name, view.shape(), bytes));
    });
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = payload
        .iter()
        .map(|(name, shape, bytes)| {
            let view =
                safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                    .expect("shape and byte length agree");
            (name.clone(), view)
        })
        .collect();
    let path = dir.join(TENSOR_FILE);
    safetensors::serialize_to_file(views, &None, &path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

/// Loads tensors into a zero-initialized model of the expected shape.
/// Missing tensors and shape mismatches are checkpoint errors naming the
/// tensor.
pub fn load_tensors(model: &mut Model, dir: &Path) -> Result<()> {
    let path = dir.join(TENSOR_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let mut failure: Option<Error> = None;
    model.for_each_mut(&mut |name, mut tensor| {
        if failure.is_some() {
            return;
        }
        let view = match st.tensor(&name) {
            Ok(v) => v,
            Err(_) => {
                failure = Some(Error::MissingTensor { name });
                return;
            }
        };
        let expected: Vec<usize> = match &tensor {
            TensorMut::D1(a) => a.shape().to_vec(),
            TensorMut::D2(a) => a.shape().to_vec(),
        };
        if view.shape() != expected.as_slice() || view.dtype() != safetensors::Dtype::F64 {
            failure = Some(Error::Shape {
                name,
                expected,
                actual: view.shape().to_vec(),
            });
            return;
        }
        let dst = tensor.as_slice_mut();
        for (i, chunk) in view.data().chunks_exact(8).enumerate() {
            dst[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Extends pretrained encoder weights with freshly initialized added-token
/// rows drawn from the pretrained table's empirical distribution.
pub fn init_added_rows_from_pretrained(params: &mut EncoderParams, seed: u64) {
    let table = &params.tok_emb;
    let n = table.len() as f64;
    let mean = table.sum() / n;
    let var = table.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    let mut rng = nn::seeded_rng(seed, "added-token-init");
    let dist = rand_distr::Normal::new(mean, std).expect("finite moments");
    for v in params.added_emb.iter_mut() {
        *v = rand_distr::Distribution::sample(&dist, &mut rng);
    }
}

/// Collects tensor names to sizes, mostly for reporting.
pub fn tensor_sizes(model: &Model) -> HashMap<String, usize> {
    let mut sizes = HashMap::new();
    model.for_each(&mut |name, view| {
        sizes.insert(name, view.len());
    });
    sizes
}
