//! Teacher-forced negative log-likelihood training with Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_check_report, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{random_params, Dims, ModelParams, ParamVars};
use crate::rng::{self, Stream};
use crate::vocab::{TokenSequence, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNorm {
    /// Summed NLL divided by the number of scored tokens in the batch.
    PerToken,
    /// Raw summed NLL.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Beam width for final caption generation.
    pub beam: usize,
    /// Beam width used when decoding the validation split each epoch.
    pub val_beam: usize,
    pub max_len: usize,
    pub seed: u64,
    pub min_count: usize,
    /// Languages trained jointly; every (image, caption) pair in one of these
    /// languages is an independent example carrying its own start token.
    /// Empty means every language present in the training split.
    pub languages: Vec<String>,
    pub loss_norm: LossNorm,
    /// Global gradient-norm clipping threshold, if enabled.
    pub clip: Option<f64>,
    pub learning_rate: f64,
    pub lowercase: bool,
    pub feature_l2norm: bool,
    pub length_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            hidden: 512,
            embed: 512,
            beam: 5,
            val_beam: 5,
            max_len: 30,
            seed: 42,
            min_count: 5,
            languages: Vec::new(),
            loss_norm: LossNorm::PerToken,
            clip: None,
            learning_rate: AdamState::DEFAULT_LR,
            lowercase: false,
            feature_l2norm: false,
            length_norm: false,
        }
    }
}

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("hidden size", self.hidden),
            ("embedding size", self.embed),
            ("beam width", self.beam),
            ("validation beam width", self.val_beam),
            ("max length", self.max_len),
            ("min count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning rate must be finite and non-negative"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::contract("clip threshold must be positive"));
            }
        }
        Ok(())
    }
}

/// Adam moments for a list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            lr: Self::DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            v: shapes.iter().map(|s| vec![0.0; s.iter().product()]).collect(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![params.len(), grads.len()],
                rhs: vec![self.shapes.len()],
            });
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: g.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to every model parameter.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    let mut ps = params.tensors_mut();
    state.step(&mut ps, grads)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One training example: image feature, language start token, target ids.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub feature: &'a [f64],
    pub start_id: usize,
    pub target: &'a TokenSequence,
}

/// Padded mini-batch. Row `r` predicts `targets[r][t]` at step `t` where
/// `mask[r][t]` holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub targets: Vec<Vec<usize>>,
    pub start_ids: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn new(examples: &[Example<'_>]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::contract("a batch needs at least one example"))?;
        let d = first.feature.len();
        let t_max = examples.iter().map(|e| e.target.ids.len()).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::contract("batch has no target tokens"));
        }
        let mut features = Vec::with_capacity(examples.len() * d);
        let mut targets = Vec::with_capacity(examples.len());
        let mut mask = Vec::with_capacity(examples.len());
        for e in examples {
            if e.feature.len() != d {
                return Err(Error::Dimension {
                    op: "batch features",
                    lhs: vec![e.feature.len()],
                    rhs: vec![d],
                });
            }
            let ids = &e.target.ids;
            if !ids.is_empty() && (ids.last() != Some(&EOS_ID) || ids.contains(&PAD_ID)) {
                return Err(Error::contract("targets must end with eos and contain no pad"));
            }
            features.extend_from_slice(e.feature);
            let mut row = ids.clone();
            row.resize(t_max, PAD_ID);
            mask.push((0..t_max).map(|t| t < ids.len()).collect());
            targets.push(row);
        }
        Ok(Self {
            features: Tensor::matrix(examples.len(), d, features)?,
            targets,
            start_ids: examples.iter().map(|e| e.start_id).collect(),
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    fn steps(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

/// Teacher-forced NLL of `batch` recorded on `tape`.
///
/// The image step is run but not scored; step 0 feeds each row's start token
/// and step `t` predicts `targets[·][t]`.
pub fn sequence_loss(tape: &mut Tape, params: &ParamVars, batch: &Batch, norm: LossNorm) -> Result<Var> {
    let count = batch.num_tokens();
    if count == 0 {
        return Err(Error::contract("batch has no unmasked target positions"));
    }
    let rows = batch.len();
    let features = tape.constant(batch.features.clone());
    let x = params.image_input(tape, features)?;
    let h0 = tape.constant(Tensor::zeros(&[rows, params.hidden]));
    let c0 = tape.constant(Tensor::zeros(&[rows, params.hidden]));
    let (mut h, mut c) = params.cell(tape, x, h0, c0)?;

    let mut total: Option<Var> = None;
    let mut inputs = batch.start_ids.clone();
    for t in 0..batch.steps() {
        let x = params.embed(tape, &inputs)?;
        (h, c) = params.cell(tape, x, h, c)?;
        let logits = params.logits(tape, h)?;
        let targets: Vec<Option<usize>> = (0..rows)
            .map(|r| batch.mask[r][t].then_some(batch.targets[r][t]))
            .collect();
        let step_loss = tape.softmax_cross_entropy_rows(logits, &targets)?;
        total = Some(match total {
            None => step_loss,
            Some(acc) => tape.add(acc, step_loss)?,
        });
        for (r, input) in inputs.iter_mut().enumerate() {
            *input = batch.targets[r][t];
        }
    }
    let total = total.expect("at least one step");
    Ok(match norm {
        LossNorm::PerToken => tape.scale(total, 1.0 / count as f64),
        LossNorm::Sum => total,
    })
}

/// Loss value of `batch` without recording gradients.
pub fn batch_loss(batch: &Batch, params: &ModelParams, norm: LossNorm) -> Result<f64> {
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params, false);
    let loss = sequence_loss(&mut tape, &p, batch, norm)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and its gradient with respect to every parameter, in checkpoint order.
pub fn loss_and_grads(batch: &Batch, params: &ModelParams, norm: LossNorm) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params, true);
    let loss = sequence_loss(&mut tape, &p, batch, norm)?;
    tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((tape.value(loss).data()[0], grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Token-weighted mean NLL over the epoch.
    pub mean_loss: f64,
    pub tokens: usize,
    pub batches: usize,
}

/// One pass over `examples` in a freshly shuffled order.
pub fn train_epoch<R: Rng>(
    examples: &[Example<'_>],
    params: &mut ModelParams,
    adam: &mut AdamState,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    if examples.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);

    let mut loss_sum = 0.0;
    let mut tokens = 0;
    let mut batches = 0;
    for chunk in order.chunks(config.batch_size) {
        let rows: Vec<Example> = chunk.iter().map(|&i| examples[i]).collect();
        let batch = Batch::new(&rows)?;
        let (loss, mut grads) = loss_and_grads(&batch, params, config.loss_norm)?;
        let n = batch.num_tokens();
        loss_sum += match config.loss_norm {
            LossNorm::PerToken => loss * n as f64,
            LossNorm::Sum => loss,
        };
        tokens += n;
        batches += 1;
        if let Some(max_norm) = config.clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        adam_step(params, &grads, adam)?;
    }
    Ok(EpochStats {
        mean_loss: loss_sum / tokens as f64,
        tokens,
        batches,
    })
}

/// Epoch with the highest validation score; the earliest wins ties.
pub fn select_best_epoch(history: &[f64]) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::contract("no epochs to select from"));
    }
    let mut best = 0;
    for (i, &score) in history.iter().enumerate().skip(1) {
        if score > history[best] || (history[best].is_nan() && !score.is_nan()) {
            best = i;
        }
    }
    Ok(best)
}

/// Central finite differences against autodiff for the full sequence loss
/// with respect to every parameter array.
///
/// Parameters, image features and target tokens are random (seeded); all
/// values are drawn from U(−1, 1) so every gradient entry is large enough to
/// resolve numerically. Two rows are used, one of `seq_len` targets and one
/// shorter, so padding is exercised too. Requires at least one surface token
/// beyond pad/unk/eos/start, i.e. `dims.vocab >= 5`.
pub fn gradient_suite(dims: Dims, seq_len: usize, seed: u64) -> Result<GradCheckReport> {
    dims.validate()?;
    if dims.vocab < 5 || seq_len < 2 {
        return Err(Error::contract("gradient suite needs vocab >= 5 and sequence length >= 2"));
    }
    let params = random_params(dims, seed, 1.0)?;
    let mut rng = rng::stream(seed, Stream::Synth);
    let start_id = EOS_ID + 1;
    let mut draw_seq = |len: usize| TokenSequence {
        ids: (0..len - 1)
            .map(|_| rng.gen_range(start_id + 1..dims.vocab))
            .chain([EOS_ID])
            .collect(),
        language: String::new(),
    };
    let (long, short) = (draw_seq(seq_len), draw_seq(seq_len.div_ceil(2)));
    let features: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..dims.feature).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let batch = Batch::new(&[
        Example { feature: &features[0], start_id, target: &long },
        Example { feature: &features[1], start_id, target: &short },
    ])?;
    let inputs: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
    gradient_check_report(
        |tape, v| {
            let p = ParamVars {
                embedding: v[0],
                image_proj: v[1],
                image_bias: v[2],
                lstm_wx: v[3],
                lstm_wh: v[4],
                lstm_b: v[5],
                out_w: v[6],
                out_b: v[7],
                hidden: dims.hidden,
            };
            sequence_loss(tape, &p, &batch, LossNorm::PerToken)
        },
        &inputs,
        FD_STEP,
    )
}

pub const FD_STEP: f64 = 1e-5;
