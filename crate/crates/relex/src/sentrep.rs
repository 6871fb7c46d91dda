//! Sentence representation on top of encoder states: mask-summed entity
//! vectors, the translational relation embedding tanh(w_l(t−h)+b_l), a
//! token-level relation attention, and the concatenated representation,
//! with the ablation variants that swap parts out.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, init_normal, softmax_backward, softmax_prefix, TensorMut, TensorView};
use crate::structinput::{PathMode, StructuredInput};

/// Shared parameters of the relation embedding, one per model.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHead {
    pub w_l: Array2<f64>,
    pub b_l: Array1<f64>,
}

impl RelationHead {
    pub fn zeros(d: usize) -> RelationHead {
        RelationHead { w_l: Array2::zeros((d, d)), b_l: Array1::zeros(d) }
    }

    pub fn init(d: usize, seed: u64) -> RelationHead {
        let mut rng = nn::seeded_rng(seed, "relhead-init");
        RelationHead { w_l: init_normal(&mut rng, d, d, nn::INIT_STD), b_l: Array1::zeros(d) }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, TensorView<'a>)) {
        f("relhead.weight".into(), TensorView::D2(&self.w_l));
        f("relhead.bias".into(), TensorView::D1(&self.b_l));
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(String, TensorMut<'_>)) {
        f("relhead.weight".into(), TensorMut::D2(&mut self.w_l));
        f("relhead.bias".into(), TensorMut::D1(&mut self.b_l));
    }
}

/// Model variants: the full method and the four reduced forms used for
/// comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Entity-type markers left out of the structured input.
    NoEntityTypes,
    /// Sentence represented by the [CLS] state alone; no relation embedding.
    NoRelEmb,
    /// Relation embedding kept, attention pooling replaced by [CLS].
    NoRelAttn,
    /// Path segment drawn from the plain dependency path.
    SdpInput,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoEntityTypes,
        Ablation::NoRelEmb,
        Ablation::NoRelAttn,
        Ablation::SdpInput,
    ];

    pub fn use_entity_types(&self) -> bool {
        !matches!(self, Ablation::NoEntityTypes)
    }

    pub fn path_mode(&self) -> PathMode {
        match self {
            Ablation::SdpInput => PathMode::Sdp,
            _ => PathMode::Stp,
        }
    }

    /// Width of s_i given hidden width d.
    pub fn repr_dim(&self, d: usize) -> usize {
        match self {
            Ablation::NoRelEmb => d,
            _ => 2 * d,
        }
    }

    pub fn has_relation_embedding(&self) -> bool {
        !matches!(self, Ablation::NoRelEmb)
    }

    pub fn has_relation_attention(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoEntityTypes | Ablation::SdpInput)
    }

    pub fn flag(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEntityTypes => "no_entity_types",
            Ablation::NoRelEmb => "no_rel_emb",
            Ablation::NoRelAttn => "no_rel_attn",
            Ablation::SdpInput => "sdp_input",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.flag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.flag())
    }
}

/// Mask-weighted sums over token states: h_i and t_i.
pub fn entity_vectors(
    states: &Array2<f64>,
    head_mask: &[f64],
    tail_mask: &[f64],
) -> Result<(Array1<f64>, Array1<f64>)> {
    let d = states.ncols();
    let sum_for = |mask: &[f64], name: &str| -> Result<Array1<f64>> {
        if mask.iter().all(|&m| m == 0.0) {
            return Err(Error::Input(format!("all-zero {name} mask")));
        }
        let mut v = Array1::zeros(d);
        for (t, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                v.scaled_add(m, &states.row(t));
            }
        }
        Ok(v)
    };
    Ok((sum_for(head_mask, "head")?, sum_for(tail_mask, "tail")?))
}

/// l = tanh(w_l(t − h) + b_l).
pub fn relation_embedding(
    h: &Array1<f64>,
    t: &Array1<f64>,
    head: &RelationHead,
) -> Array1<f64> {
    let diff = t - h;
    let pre = head.w_l.dot(&diff) + &head.b_l;
    pre.mapv(f64::tanh)
}

/// Token-level softmax of h_L[t]·l over non-pad positions; pads exactly 0.
pub fn relation_attention(states: &Array2<f64>, l: &Array1<f64>, effective_len: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..states.nrows()).map(|t| states.row(t).dot(l)).collect();
    softmax_prefix(&scores, effective_len)
}

/// h' = Σ_t α_t h_L[t].
pub fn weighted_hidden(states: &Array2<f64>, alpha: &[f64]) -> Array1<f64> {
    let mut v = Array1::zeros(states.ncols());
    for (t, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            v.scaled_add(a, &states.row(t));
        }
    }
    v
}

/// Caches for [`sentence_repr_backward`].
#[derive(Debug, Clone)]
pub struct ReprCache {
    pub h_i: Array1<f64>,
    pub t_i: Array1<f64>,
    pub l: Option<Array1<f64>>,
    pub alpha: Option<Vec<f64>>,
}

/// Builds s_i for one sentence under the given variant.
pub fn sentence_repr(
    states: &Array2<f64>,
    input: &StructuredInput,
    head: &RelationHead,
    ablation: Ablation,
) -> Result<(Array1<f64>, ReprCache)> {
    let d = states.ncols();
    let (h_i, t_i) = entity_vectors(states, &input.head_mask, &input.tail_mask)?;

    if !ablation.has_relation_embedding() {
        let s = states.row(0).to_owned();
        return Ok((s, ReprCache { h_i, t_i, l: None, alpha: None }));
    }

    let l = relation_embedding(&h_i, &t_i, head);
    let (pooled, alpha) = if ablation.has_relation_attention() {
        let alpha = relation_attention(states, &l, input.effective_len);
        (weighted_hidden(states, &alpha), Some(alpha))
    } else {
        (states.row(0).to_owned(), None)
    };

    let mut s = Array1::zeros(2 * d);
    s.slice_mut(ndarray::s![..d]).assign(&l);
    s.slice_mut(ndarray::s![d..]).assign(&pooled);
    Ok((s, ReprCache { h_i, t_i, l: Some(l), alpha }))
}

/// Backward of [`sentence_repr`]: given dL/ds, accumulates dL/dstates and
/// the relation-head gradients.
pub fn sentence_repr_backward(
    ds: &Array1<f64>,
    cache: &ReprCache,
    states: &Array2<f64>,
    input: &StructuredInput,
    head: &RelationHead,
    ablation: Ablation,
    d_states: &mut Array2<f64>,
    d_head: &mut RelationHead,
) {
    let d = states.ncols();

    if !ablation.has_relation_embedding() {
        let mut row = d_states.row_mut(0);
        row += ds;
        return;
    }

    let l = cache.l.as_ref().expect("cache carries l for this variant");
    let ds_l = ds.slice(ndarray::s![..d]);
    let ds_pool = ds.slice(ndarray::s![d..]);

    let mut dl = ds_l.to_owned();
    match &cache.alpha {
        Some(alpha) => {
            // pooled = Σ α_t h_t with α = softmax(z), z_t = h_t·l
            let dalpha: Vec<f64> = (0..states.nrows())
                .map(|t| if alpha[t] != 0.0 { states.row(t).dot(&ds_pool) } else { 0.0 })
                .collect();
            let dz = softmax_backward(alpha, &dalpha);
            for t in 0..input.effective_len {
                let mut row = d_states.row_mut(t);
                row.scaled_add(alpha[t], &ds_pool);
                row.scaled_add(dz[t], l);
                dl.scaled_add(dz[t], &states.row(t));
            }
        }
        None => {
            let mut row = d_states.row_mut(0);
            row += &ds_pool;
        }
    }

    // l = tanh(pre), pre = w_l·(t − h) + b_l
    let dpre = &dl * &l.mapv(|v| 1.0 - v * v);
    let diff = &cache.t_i - &cache.h_i;
    for i in 0..d {
        let mut wrow = d_head.w_l.row_mut(i);
        wrow.scaled_add(dpre[i], &diff);
    }
    d_head.b_l += &dpre;
    let ddiff = head.w_l.t().dot(&dpre);

    for (t, &m) in input.tail_mask.iter().enumerate() {
        if m != 0.0 {
            let mut row = d_states.row_mut(t);
            row.scaled_add(m, &ddiff);
        }
    }
    for (t, &m) in input.head_mask.iter().enumerate() {
        if m != 0.0 {
            let mut row = d_states.row_mut(t);
            row.scaled_add(-m, &ddiff);
        }
    }
}
