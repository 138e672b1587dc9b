//! Single-layer LSTM caption decoder.
//!
//! The image feature is projected into embedding space and fed as the first
//! input (step −1). The language start token follows at step 0, then the
//! caption tokens. Every language shares one parameter set; only the start
//! token differs.
//!
//! Gate layout along the `4H` axis is `[input | forget | output | candidate]`.
//! Row-vector convention throughout: `z = x·W_x + h·W_h + b`.

use rand::Rng;

use crate::autodiff::{log_softmax, softmax, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::vocab::{TokenSequence, Vocabulary};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

/// Parameter names in checkpoint order.
pub const PARAM_NAMES: [&str; 8] = [
    "embedding",
    "image_proj.weight",
    "image_proj.bias",
    "lstm.w_x",
    "lstm.w_h",
    "lstm.bias",
    "output.weight",
    "output.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub feature: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed == 0 || self.hidden == 0 || self.feature == 0 {
            return Err(Error::contract(format!("all model dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// Shapes of the parameter arrays, in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 8] {
        let Dims {
            vocab: v,
            embed: e,
            hidden: h,
            feature: d,
        } = *self;
        [
            vec![v, e],
            vec![d, e],
            vec![e],
            vec![e, 4 * h],
            vec![h, 4 * h],
            vec![4 * h],
            vec![h, v],
            vec![v],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    /// Word embedding `W_e`, `V × E`.
    pub embedding: Tensor,
    /// Image projection, `D × E`.
    pub image_proj: Tensor,
    pub image_bias: Tensor,
    /// Input-to-gates, `E × 4H`.
    pub lstm_wx: Tensor,
    /// Hidden-to-gates, `H × 4H`.
    pub lstm_wh: Tensor,
    pub lstm_b: Tensor,
    /// Hidden-to-vocabulary, `H × V`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let t: Vec<Tensor> = dims.shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self::from_tensors(dims, t)
    }

    /// Builds parameters from arrays in [`PARAM_NAMES`] order.
    pub fn from_tensors(dims: Dims, tensors: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::contract(format!(
                "expected {} parameter arrays, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(dims.shapes()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "model parameters",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            dims,
            embedding: next(),
            image_proj: next(),
            image_bias: next(),
            lstm_wx: next(),
            lstm_wh: next(),
            lstm_b: next(),
            out_w: next(),
            out_b: next(),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.embedding,
            &self.image_proj,
            &self.image_bias,
            &self.lstm_wx,
            &self.lstm_wh,
            &self.lstm_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.embedding,
            &mut self.image_proj,
            &mut self.image_bias,
            &mut self.lstm_wx,
            &mut self.lstm_wh,
            &mut self.lstm_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Uniform(−0.08, 0.08) weights, zero biases except the forget-gate block of
/// the LSTM bias, which starts at 1.0.
pub fn init_params(dims: Dims, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = rng::stream(seed, Stream::Init);
    for t in [
        &mut params.embedding,
        &mut params.image_proj,
        &mut params.lstm_wx,
        &mut params.lstm_wh,
        &mut params.out_w,
    ] {
        for x in t.data_mut() {
            *x = rng.gen_range(-INIT_RANGE..INIT_RANGE);
        }
    }
    let h = dims.hidden;
    params.lstm_b.data_mut()[h..2 * h].fill(FORGET_BIAS);
    Ok(params)
}

/// Every array, biases included, drawn from Uniform(−half_width, half_width).
/// Used for finite-difference checks, where the small production init makes
/// many gradient entries too small to resolve numerically.
pub fn random_params(dims: Dims, seed: u64, half_width: f64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(dims)?;
    let mut rng = rng::stream(seed, Stream::Init);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-half_width..half_width);
        }
    }
    Ok(params)
}

/// Parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub embedding: Var,
    pub image_proj: Var,
    pub image_bias: Var,
    pub lstm_wx: Var,
    pub lstm_wh: Var,
    pub lstm_b: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub hidden: usize,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        Self {
            embedding: leaf(&params.embedding),
            image_proj: leaf(&params.image_proj),
            image_bias: leaf(&params.image_bias),
            lstm_wx: leaf(&params.lstm_wx),
            lstm_wh: leaf(&params.lstm_wh),
            lstm_b: leaf(&params.lstm_b),
            out_w: leaf(&params.out_w),
            out_b: leaf(&params.out_b),
            hidden: params.dims.hidden,
        }
    }

    /// Vars in [`PARAM_NAMES`] order.
    pub fn vars(&self) -> [Var; 8] {
        [
            self.embedding,
            self.image_proj,
            self.image_bias,
            self.lstm_wx,
            self.lstm_wh,
            self.lstm_b,
            self.out_w,
            self.out_b,
        ]
    }

    /// One LSTM recurrence over a batch of rows. Returns `(h′, c′)`.
    pub fn cell(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        let zx = tape.matmul(x, self.lstm_wx)?;
        let zh = tape.matmul(h, self.lstm_wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias(z, self.lstm_b)?;
        let i = tape.slice_cols(z, 0, hs)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(z, hs, hs)?;
        let f = tape.sigmoid(f);
        let o = tape.slice_cols(z, 2 * hs, hs)?;
        let o = tape.sigmoid(o);
        let g = tape.slice_cols(z, 3 * hs, hs)?;
        let g = tape.tanh(g);
        let fc = tape.hadamard(f, c)?;
        let ig = tape.hadamard(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.hadamard(o, tc)?;
        Ok((h_next, c_next))
    }

    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let y = tape.matmul(h, self.out_w)?;
        tape.add_bias(y, self.out_b)
    }

    /// Projects a `B × D` feature matrix to decoder inputs.
    pub fn image_input(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let x = tape.matmul(features, self.image_proj)?;
        tape.add_bias(x, self.image_bias)
    }

    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(self.embedding, ids)
    }
}

/// Recurrent state for a single sequence (`1 × H` row vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[1, hidden]),
            c: Tensor::zeros(&[1, hidden]),
        }
    }
}

/// Decoder input for one step.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    /// Image feature injection (step −1).
    Feature(&'a [f64]),
    Token(usize),
}

fn as_row(x: &Tensor, len: usize, op: &'static str) -> Result<Tensor> {
    if x.len() != len || x.rows() != 1 {
        return Err(Error::Dimension {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![len],
        });
    }
    Tensor::matrix(1, len, x.data().to_vec())
}

fn check_state(state: &LstmState, hidden: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        as_row(&state.h, hidden, "lstm state")?,
        as_row(&state.c, hidden, "lstm state")?,
    ))
}

/// One recurrence on an embedded input `x` (length `E`).
pub fn lstm_step(x: &Tensor, state: &LstmState, params: &ModelParams) -> Result<(LstmState, Tensor)> {
    let x = as_row(x, params.dims.embed, "lstm_step input")?;
    let (h, c) = check_state(state, params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params, false);
    let xv = tape.constant(x);
    let hv = tape.constant(h);
    let cv = tape.constant(c);
    let (h2, c2) = p.cell(&mut tape, xv, hv, cv)?;
    let logits = p.logits(&mut tape, h2)?;
    let next = LstmState {
        h: tape.value(h2).clone(),
        c: tape.value(c2).clone(),
    };
    let logits = Tensor::vector(tape.value(logits).data().to_vec());
    Ok((next, logits))
}

fn input_row(tape: &mut Tape, p: &ParamVars, params: &ModelParams, input: StepInput<'_>) -> Result<Var> {
    match input {
        StepInput::Feature(f) => {
            if f.len() != params.dims.feature {
                return Err(Error::Dimension {
                    op: "feature injection",
                    lhs: vec![f.len()],
                    rhs: vec![params.dims.feature],
                });
            }
            let fv = tape.constant(Tensor::matrix(1, f.len(), f.to_vec())?);
            p.image_input(tape, fv)
        }
        StepInput::Token(id) => p.embed(tape, &[id]),
    }
}

/// One decoder step returning the next state and log-probabilities over the
/// vocabulary. Pure in its arguments.
pub fn step_distribution(
    state: &LstmState,
    input: StepInput<'_>,
    params: &ModelParams,
) -> Result<(LstmState, Vec<f64>)> {
    let (h, c) = check_state(state, params.dims.hidden)?;
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params, false);
    let x = input_row(&mut tape, &p, params, input)?;
    let hv = tape.constant(h);
    let cv = tape.constant(c);
    let (h2, c2) = p.cell(&mut tape, x, hv, cv)?;
    let logits = p.logits(&mut tape, h2)?;
    let next = LstmState {
        h: tape.value(h2).clone(),
        c: tape.value(c2).clone(),
    };
    Ok((next, log_softmax(tape.value(logits).data())))
}

/// Teacher-forced pass over one caption.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Logits produced by the image step; not scored.
    pub image_logits: Vec<f64>,
    /// `logits[t]` predicts `sequence.ids[t]`.
    pub logits: Vec<Vec<f64>>,
    /// Token ids fed at steps 0.. (start token, then ground truth).
    pub inputs: Vec<usize>,
    pub final_state: LstmState,
}

impl ForwardTrace {
    pub fn distributions(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| softmax(l)).collect()
    }

    pub fn log_probs(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|l| log_softmax(l)).collect()
    }

    /// `−Σ log p(target)` over the scored steps.
    pub fn nll(&self, targets: &[usize]) -> f64 {
        self.log_probs().iter().zip(targets).map(|(lp, &t)| -lp[t]).sum()
    }
}

pub fn forward_sequence(
    feature: &[f64],
    sequence: &TokenSequence,
    start_id: usize,
    params: &ModelParams,
) -> Result<ForwardTrace> {
    if sequence.ids.is_empty() {
        return Err(Error::contract("cannot run a forward pass over an empty sequence"));
    }
    let mut tape = Tape::new();
    let p = ParamVars::register(&mut tape, params, false);
    let x = input_row(&mut tape, &p, params, StepInput::Feature(feature))?;
    let mut h = tape.constant(Tensor::zeros(&[1, params.dims.hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, params.dims.hidden]));
    (h, c) = p.cell(&mut tape, x, h, c)?;
    let image_logits = p.logits(&mut tape, h)?;
    let image_logits = tape.value(image_logits).data().to_vec();

    let n = sequence.ids.len();
    let mut inputs = Vec::with_capacity(n);
    inputs.push(start_id);
    inputs.extend_from_slice(&sequence.ids[..n - 1]);
    let mut logits = Vec::with_capacity(n);
    for &id in &inputs {
        let x = p.embed(&mut tape, &[id])?;
        (h, c) = p.cell(&mut tape, x, h, c)?;
        let l = p.logits(&mut tape, h)?;
        logits.push(tape.value(l).data().to_vec());
    }
    Ok(ForwardTrace {
        image_logits,
        logits,
        inputs,
        final_state: LstmState {
            h: tape.value(h).clone(),
            c: tape.value(c).clone(),
        },
    })
}

/// Parameters together with the vocabulary they were trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub params: ModelParams,
    pub vocab: Vocabulary,
}

impl CaptionModel {
    pub fn new(params: ModelParams, vocab: Vocabulary) -> Result<Self> {
        if params.dims.vocab != vocab.len() {
            return Err(Error::Dimension {
                op: "caption model",
                lhs: vec![params.dims.vocab],
                rhs: vec![vocab.len()],
            });
        }
        Ok(Self { params, vocab })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::vocab::EOS_ID;

    fn tiny() -> Dims {
        Dims {
            vocab: 4,
            embed: 3,
            hidden: 2,
            feature: 5,
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = init_params(tiny(), 7).unwrap();
        let b = init_params(tiny(), 7).unwrap();
        let c = init_params(tiny(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.embedding, c.embedding);
        let h = tiny().hidden;
        assert!(a.lstm_b.data()[h..2 * h].iter().all(|&x| x == 1.0));
        assert!(a.lstm_b.data()[..h].iter().all(|&x| x == 0.0));
        assert!(a.lstm_wx.data().iter().all(|x| x.abs() < INIT_RANGE));
        assert!(a.out_b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_dims_rejected() {
        let mut d = tiny();
        d.hidden = 0;
        assert!(init_params(d, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_step() {
        let p = ModelParams::zeros(tiny()).unwrap();
        let (s, logits) = lstm_step(&Tensor::vector(vec![0.3, -1.0, 2.0]), &LstmState::zeros(2), &p).unwrap();
        assert!(s.c.data().iter().all(|&x| x == 0.0));
        assert!(s.h.data().iter().all(|&x| x == 0.0));
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dead_recurrence_returns_output_bias() {
        let mut p = ModelParams::zeros(tiny()).unwrap();
        p.out_b = Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]);
        let (_, logits) = lstm_step(&Tensor::vector(vec![9.0, 1.0, -4.0]), &LstmState::zeros(2), &p).unwrap();
        assert_eq!(logits.data(), p.out_b.data());
    }

    #[test]
    fn step_shape_errors() {
        let p = init_params(tiny(), 1).unwrap();
        assert!(matches!(
            lstm_step(&Tensor::vector(vec![0.0; 4]), &LstmState::zeros(2), &p),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            lstm_step(&Tensor::vector(vec![0.0; 3]), &LstmState::zeros(3), &p),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            step_distribution(&LstmState::zeros(2), StepInput::Feature(&[0.0; 4]), &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn step_logits_gradient_matches_finite_differences() {
        let dims = tiny();
        let params = init_params(dims, 3).unwrap();
        let mut inputs: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
        inputs.push(Tensor::matrix(1, 3, vec![0.4, -0.7, 0.2]).unwrap());
        inputs.push(Tensor::matrix(1, 2, vec![0.1, -0.3]).unwrap());
        inputs.push(Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap());
        let err = gradient_check(
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
                    hidden: 2,
                };
                let (h, _) = p.cell(tape, v[8], v[9], v[10])?;
                let l = p.logits(tape, h)?;
                Ok(tape.sum(l))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    fn seq(ids: Vec<usize>) -> TokenSequence {
        TokenSequence {
            ids,
            language: "en".into(),
        }
    }

    #[test]
    fn minimal_sequence_has_one_scored_step() {
        let p = init_params(tiny(), 2).unwrap();
        let tr = forward_sequence(&[0.1; 5], &seq(vec![EOS_ID]), 3, &p).unwrap();
        assert_eq!(tr.logits.len(), 1);
        assert_eq!(tr.inputs, vec![3]);
        assert!(forward_sequence(&[0.1; 5], &seq(vec![]), 3, &p).is_err());
        assert!(forward_sequence(&[0.1; 4], &seq(vec![EOS_ID]), 3, &p).is_err());
    }

    #[test]
    fn distributions_are_normalized() {
        let p = init_params(Dims { vocab: 9, embed: 4, hidden: 6, feature: 3 }, 5).unwrap();
        let tr = forward_sequence(&[0.5, -0.2, 0.9], &seq(vec![5, 7, 6, EOS_ID]), 3, &p).unwrap();
        for d in tr.distributions() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn start_token_switches_distributions() {
        let p = init_params(Dims { vocab: 9, embed: 4, hidden: 6, feature: 3 }, 5).unwrap();
        let f = [0.5, -0.2, 0.9];
        let s = seq(vec![6, 7, EOS_ID]);
        let a = forward_sequence(&f, &s, 3, &p).unwrap();
        let b = forward_sequence(&f, &s, 4, &p).unwrap();
        assert_eq!(a.image_logits, b.image_logits);
        assert_ne!(a.inputs[0], b.inputs[0]);
        assert_eq!(a.inputs[1..], b.inputs[1..]);
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_ne!(x, y);
        }
    }

    #[test]
    fn iterated_steps_reproduce_forward_pass() {
        let p = init_params(Dims { vocab: 9, embed: 4, hidden: 6, feature: 3 }, 11).unwrap();
        let f = [0.5, -0.2, 0.9];
        let s = seq(vec![6, 8, 5, EOS_ID]);
        let tr = forward_sequence(&f, &s, 4, &p).unwrap();
        let (mut state, image_lp) = step_distribution(&LstmState::zeros(6), StepInput::Feature(&f), &p).unwrap();
        assert_eq!(image_lp, log_softmax(&tr.image_logits));
        let expected = tr.log_probs();
        for (t, &id) in tr.inputs.iter().enumerate() {
            let (next, lp) = step_distribution(&state, StepInput::Token(id), &p).unwrap();
            assert_eq!(next, step_distribution(&state, StepInput::Token(id), &p).unwrap().0);
            for (a, b) in lp.iter().zip(&expected[t]) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
            state = next;
        }
        assert_eq!(state, tr.final_state);
    }
}
