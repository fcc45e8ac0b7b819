//! Entity-marker encoder, hidden projection and growable classifier.
//!
//! The encoder is a single post-norm transformer block over token
//! embeddings plus sinusoidal positions. Only the two marker positions are
//! ever read downstream, so queries and the feed-forward sublayer are
//! evaluated for those two rows alone; keys and values span the whole
//! sentence.
//!
//! ```text
//! f = [enc(x)[E1] ; enc(x)[E2]]            (2h)
//! h = LN(W · Dropout(f) + b)                (d)
//! o = C · h + c                             (|observed relations|)
//! ```

use std::collections::HashMap;
use std::ops::Deref;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RelationId, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng as ModelRng;
use crate::tape::{Tape, Var};

/// Standard deviation of freshly appended classifier rows.
pub const CLASSIFIER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Token representation width (`h`).
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden representation width (`d`).
    pub hidden_dim: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            hidden_dim: 64,
            dropout: 0.5,
            layer_norm_eps: 1e-5,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.model_dim == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config("model_dim must be a multiple of heads"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    /// The projection of the features into hidden space, including its layer norm.
    Projection,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    TokenEmbedding,
    QueryWeight,
    QueryBias,
    KeyWeight,
    KeyBias,
    ValueWeight,
    ValueBias,
    AttnOutWeight,
    AttnOutBias,
    AttnNormGain,
    AttnNormBias,
    FfnInWeight,
    FfnInBias,
    FfnOutWeight,
    FfnOutBias,
    FfnNormGain,
    FfnNormBias,
    ProjectionWeight,
    ProjectionBias,
    HiddenNormGain,
    HiddenNormBias,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamId {
    pub const ALL: [ParamId; 23] = [
        ParamId::TokenEmbedding,
        ParamId::QueryWeight,
        ParamId::QueryBias,
        ParamId::KeyWeight,
        ParamId::KeyBias,
        ParamId::ValueWeight,
        ParamId::ValueBias,
        ParamId::AttnOutWeight,
        ParamId::AttnOutBias,
        ParamId::AttnNormGain,
        ParamId::AttnNormBias,
        ParamId::FfnInWeight,
        ParamId::FfnInBias,
        ParamId::FfnOutWeight,
        ParamId::FfnOutBias,
        ParamId::FfnNormGain,
        ParamId::FfnNormBias,
        ParamId::ProjectionWeight,
        ParamId::ProjectionBias,
        ParamId::HiddenNormGain,
        ParamId::HiddenNormBias,
        ParamId::ClassifierWeight,
        ParamId::ClassifierBias,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::TokenEmbedding => "encoder.token_embedding",
            ParamId::QueryWeight => "encoder.attn.query.weight",
            ParamId::QueryBias => "encoder.attn.query.bias",
            ParamId::KeyWeight => "encoder.attn.key.weight",
            ParamId::KeyBias => "encoder.attn.key.bias",
            ParamId::ValueWeight => "encoder.attn.value.weight",
            ParamId::ValueBias => "encoder.attn.value.bias",
            ParamId::AttnOutWeight => "encoder.attn.out.weight",
            ParamId::AttnOutBias => "encoder.attn.out.bias",
            ParamId::AttnNormGain => "encoder.attn.norm.gain",
            ParamId::AttnNormBias => "encoder.attn.norm.bias",
            ParamId::FfnInWeight => "encoder.ffn.in.weight",
            ParamId::FfnInBias => "encoder.ffn.in.bias",
            ParamId::FfnOutWeight => "encoder.ffn.out.weight",
            ParamId::FfnOutBias => "encoder.ffn.out.bias",
            ParamId::FfnNormGain => "encoder.ffn.norm.gain",
            ParamId::FfnNormBias => "encoder.ffn.norm.bias",
            ParamId::ProjectionWeight => "projection.weight",
            ParamId::ProjectionBias => "projection.bias",
            ParamId::HiddenNormGain => "projection.norm.gain",
            ParamId::HiddenNormBias => "projection.norm.bias",
            ParamId::ClassifierWeight => "classifier.weight",
            ParamId::ClassifierBias => "classifier.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::ProjectionWeight
            | ParamId::ProjectionBias
            | ParamId::HiddenNormGain
            | ParamId::HiddenNormBias => ParamGroup::Projection,
            ParamId::ClassifierWeight | ParamId::ClassifierBias => ParamGroup::Classifier,
            _ => ParamGroup::Encoder,
        }
    }
}

/// Trainable state: encoder, projection and classifier parameters, plus
/// the relation that owns each classifier row.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: EncoderConfig,
    params: Vec<Array2<f64>>,
    relations: Vec<RelationId>,
    class_index: HashMap<RelationId, usize>,
    positions: Array2<f64>,
}

/// Frozen copy of a [`Model`], used as a distillation teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot(Model);

impl Deref for ModelSnapshot {
    type Target = Model;

    fn deref(&self) -> &Model {
        &self.0
    }
}

/// Tape handles of every parameter, in [`ParamId::ALL`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Eval-mode forward results for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Per-parameter gradients, shaped like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            tensors: model.params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.index()]
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter())
    }
}

fn sinusoidal_positions(max_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn uniform_linear<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound))
}

fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

impl Model {
    /// Randomly initialised model with a classifier over `relations`.
    pub fn new<R: Rng>(config: EncoderConfig, relations: &[RelationId], rng: &mut R) -> Result<Model> {
        config.validate()?;
        let (v, h, f, d) = (config.vocab_size, config.model_dim, config.ffn_dim, config.hidden_dim);
        let ones = |n: usize| Array2::from_elem((1, n), 1.0);
        let zeros = |n: usize| Array2::zeros((1, n));
        let mut params = Vec::with_capacity(ParamId::ALL.len());
        for id in ParamId::ALL {
            let p = match id {
                ParamId::TokenEmbedding => gaussian(v, h, 1.0, rng),
                ParamId::QueryWeight
                | ParamId::KeyWeight
                | ParamId::ValueWeight
                | ParamId::AttnOutWeight => uniform_linear(h, h, rng),
                ParamId::FfnInWeight => uniform_linear(f, h, rng),
                ParamId::FfnOutWeight => uniform_linear(h, f, rng),
                ParamId::ProjectionWeight => uniform_linear(d, 2 * h, rng),
                ParamId::QueryBias
                | ParamId::KeyBias
                | ParamId::ValueBias
                | ParamId::AttnOutBias
                | ParamId::AttnNormBias
                | ParamId::FfnOutBias
                | ParamId::FfnNormBias => zeros(h),
                ParamId::AttnNormGain | ParamId::FfnNormGain => ones(h),
                ParamId::FfnInBias => zeros(f),
                ParamId::ProjectionBias | ParamId::HiddenNormBias => zeros(d),
                ParamId::HiddenNormGain => ones(d),
                ParamId::ClassifierWeight => Array2::zeros((0, d)),
                ParamId::ClassifierBias => Array2::zeros((1, 0)),
            };
            params.push(p);
        }
        let positions = sinusoidal_positions(config.max_len, h);
        let mut model = Model {
            config,
            params,
            relations: Vec::new(),
            class_index: HashMap::new(),
            positions,
        };
        model.extend_classifier(relations, rng)?;
        Ok(model)
    }

    /// Rebuilds a model from raw parameters (checkpoint loading).
    pub fn from_parts(
        config: EncoderConfig,
        params: Vec<Array2<f64>>,
        relations: Vec<RelationId>,
    ) -> Result<Model> {
        config.validate()?;
        if params.len() != ParamId::ALL.len() {
            return Err(Error::validation("wrong number of parameter tensors"));
        }
        let (v, h, f, d, c) = (
            config.vocab_size,
            config.model_dim,
            config.ffn_dim,
            config.hidden_dim,
            relations.len(),
        );
        for id in ParamId::ALL {
            let want = match id {
                ParamId::TokenEmbedding => (v, h),
                ParamId::QueryWeight
                | ParamId::KeyWeight
                | ParamId::ValueWeight
                | ParamId::AttnOutWeight => (h, h),
                ParamId::FfnInWeight => (f, h),
                ParamId::FfnOutWeight => (h, f),
                ParamId::ProjectionWeight => (d, 2 * h),
                ParamId::FfnInBias => (1, f),
                ParamId::ProjectionBias | ParamId::HiddenNormBias | ParamId::HiddenNormGain => (1, d),
                ParamId::ClassifierWeight => (c, d),
                ParamId::ClassifierBias => (1, c),
                _ => (1, h),
            };
            if params[id.index()].dim() != want {
                return Err(Error::validation(format!(
                    "{} has shape {:?}, expected {want:?}",
                    id.name(),
                    params[id.index()].dim()
                )));
            }
        }
        let class_index = relations.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let positions = sinusoidal_positions(config.max_len, h);
        Ok(Model {
            config,
            params,
            relations,
            class_index,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn param(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.index()]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.index()]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        ParamId::ALL.into_iter().zip(self.params.iter())
    }

    /// Relations in classifier-row order.
    pub fn relations(&self) -> &[RelationId] {
        &self.relations
    }

    pub fn num_classes(&self) -> usize {
        self.relations.len()
    }

    pub fn class_of(&self, relation: RelationId) -> Option<usize> {
        self.class_index.get(&relation).copied()
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(self.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Appends one classifier row per new relation, drawn from
    /// N(0, 0.02²) with a zero bias. Existing rows are untouched.
    pub fn extend_classifier<R: Rng>(&mut self, new_relations: &[RelationId], rng: &mut R) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in new_relations {
            if self.class_index.contains_key(r) || !seen.insert(*r) {
                return Err(Error::contract(format!("relation {r} already has a classifier row")));
            }
        }
        if new_relations.is_empty() {
            return Ok(());
        }
        let d = self.config.hidden_dim;
        let rows = gaussian(new_relations.len(), d, CLASSIFIER_INIT_STD, rng);
        let w = self.param(ParamId::ClassifierWeight);
        let new_w = ndarray::concatenate(ndarray::Axis(0), &[w.view(), rows.view()])
            .expect("classifier rows share width");
        let b = self.param(ParamId::ClassifierBias);
        let new_b = ndarray::concatenate(
            ndarray::Axis(1),
            &[b.view(), Array2::zeros((1, new_relations.len())).view()],
        )
        .expect("bias row");
        *self.param_mut(ParamId::ClassifierWeight) = new_w;
        *self.param_mut(ParamId::ClassifierBias) = new_b;
        for &r in new_relations {
            self.class_index.insert(r, self.relations.len());
            self.relations.push(r);
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p) })
            .collect();
        Bound { vars }
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let n = sample.tokens.len();
        if n > self.config.max_len {
            return Err(Error::Input(format!(
                "sample {} has {n} tokens, more than max_len {}",
                sample.id, self.config.max_len
            )));
        }
        if let Some(&t) = sample.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "sample {}: token id {t} >= vocab size {}",
                sample.id, self.config.vocab_size
            )));
        }
        if sample.head_marker_pos >= n || sample.tail_marker_pos >= n {
            return Err(Error::Input(format!("sample {}: marker out of bounds", sample.id)));
        }
        Ok(())
    }

    /// Contextual states of the `[E1]` and `[E2]` tokens as a 2×h node.
    pub fn marker_states<'a>(&'a self, tape: &mut Tape<'a>, bound: &Bound, sample: &Sample) -> Result<Var> {
        self.check_sample(sample)?;
        let p = |id| bound.var(id);
        let n = sample.tokens.len();
        let ids: Vec<usize> = sample.tokens.iter().map(|&t| t as usize).collect();
        let emb = tape.gather(p(ParamId::TokenEmbedding), &ids);
        let pos = tape.constant_owned(self.positions.slice(s![..n, ..]).to_owned());
        let x = tape.add(emb, pos);
        let xm = tape.select_rows(x, &[sample.head_marker_pos, sample.tail_marker_pos]);

        let q = tape.linear(xm, p(ParamId::QueryWeight), p(ParamId::QueryBias));
        let k = tape.linear(x, p(ParamId::KeyWeight), p(ParamId::KeyBias));
        let v = tape.linear(x, p(ParamId::ValueWeight), p(ParamId::ValueBias));
        let att = tape.attention(q, k, v, self.config.heads);
        let att = tape.linear(att, p(ParamId::AttnOutWeight), p(ParamId::AttnOutBias));
        let res = tape.add(xm, att);
        let eps = self.config.layer_norm_eps;
        let y = tape.layer_norm(res, p(ParamId::AttnNormGain), p(ParamId::AttnNormBias), eps);

        let inner = tape.linear(y, p(ParamId::FfnInWeight), p(ParamId::FfnInBias));
        let inner = tape.gelu(inner);
        let ffn = tape.linear(inner, p(ParamId::FfnOutWeight), p(ParamId::FfnOutBias));
        let res = tape.add(y, ffn);
        Ok(tape.layer_norm(res, p(ParamId::FfnNormGain), p(ParamId::FfnNormBias), eps))
    }

    /// Sample feature `f` (1×2h): concatenated marker states.
    pub fn features_on<'a>(&'a self, tape: &mut Tape<'a>, bound: &Bound, sample: &Sample) -> Result<Var> {
        let states = self.marker_states(tape, bound, sample)?;
        Ok(tape.flatten(states))
    }

    /// Hidden representation `LN(W · Dropout(f) + b)`. Dropout is applied
    /// only when `dropout_rng` is given, with inverted scaling.
    pub fn hidden_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        features: Var,
        dropout_rng: Option<&mut ModelRng>,
    ) -> Result<Var> {
        let width = tape.value(features).ncols();
        if width != 2 * self.config.model_dim {
            return Err(Error::contract(format!(
                "feature width {width} does not match 2h = {}",
                2 * self.config.model_dim
            )));
        }
        let p = |id| bound.var(id);
        let mut input = features;
        if let Some(rng) = dropout_rng {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let mask = Array2::from_shape_fn((1, width), |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                input = tape.mul_const(input, mask);
            }
        }
        let z = tape.linear(input, p(ParamId::ProjectionWeight), p(ParamId::ProjectionBias));
        Ok(tape.layer_norm(
            z,
            p(ParamId::HiddenNormGain),
            p(ParamId::HiddenNormBias),
            self.config.layer_norm_eps,
        ))
    }

    /// Logits over every observed relation.
    pub fn logits_on<'a>(&'a self, tape: &mut Tape<'a>, bound: &Bound, hidden: Var) -> Result<Var> {
        let width = tape.value(hidden).ncols();
        if width != self.config.hidden_dim {
            return Err(Error::contract(format!(
                "hidden width {width} does not match d = {}",
                self.config.hidden_dim
            )));
        }
        Ok(tape.linear(
            hidden,
            bound.var(ParamId::ClassifierWeight),
            bound.var(ParamId::ClassifierBias),
        ))
    }

    /// Eval-mode sample feature.
    pub fn encode_features(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = self.features_on(&mut tape, &bound, sample)?;
        Ok(tape.value(f).iter().copied().collect())
    }

    /// Eval-mode marker states: (`[E1]` state, `[E2]` state).
    pub fn encode_markers(&self, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let m = self.marker_states(&mut tape, &bound, sample)?;
        let v = tape.value(m);
        Ok((v.row(0).to_vec(), v.row(1).to_vec()))
    }

    /// Hidden representation of a feature vector; dropout only with an rng.
    pub fn project_hidden(&self, features: &[f64], dropout_rng: Option<&mut ModelRng>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant_owned(row(features));
        let h = self.hidden_on(&mut tape, &bound, f, dropout_rng)?;
        Ok(tape.value(h).iter().copied().collect())
    }

    pub fn classify(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = tape.constant_owned(row(hidden));
        let o = self.logits_on(&mut tape, &bound, h)?;
        Ok(tape.value(o).iter().copied().collect())
    }

    /// Full eval-mode forward pass.
    pub fn forward(&self, sample: &Sample) -> Result<Forward> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = self.features_on(&mut tape, &bound, sample)?;
        let h = self.hidden_on(&mut tape, &bound, f, None)?;
        let o = self.logits_on(&mut tape, &bound, h)?;
        Ok(Forward {
            features: tape.value(f).iter().copied().collect(),
            hidden: tape.value(h).iter().copied().collect(),
            logits: tape.value(o).iter().copied().collect(),
        })
    }

    /// Eval-mode hidden representation of a sample.
    pub fn hidden_of(&self, sample: &Sample) -> Result<Vec<f64>> {
        Ok(self.forward(sample)?.hidden)
    }

    /// Gradients of the scalar `loss` for every parameter bound in `bound`.
    /// Parameters off the loss's computation path get zero gradient.
    pub fn compute_gradients(&self, tape: &Tape<'_>, bound: &Bound, loss: Var) -> Result<Gradients> {
        let mut grads = tape.backward(loss)?;
        let mut out = Gradients::zeros_like(self);
        for id in ParamId::ALL {
            if let Some(g) = grads.take(bound.var(id)) {
                out.tensors[id.index()] = g;
            }
        }
        Ok(out)
    }
}

/// Draws a vector of i.i.d. standard normals.
pub fn standard_normal_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
