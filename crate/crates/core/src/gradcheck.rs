//! Central finite-difference checks of every backward rule.
//!
//! An operation under test exposes a scalar objective of its inputs and the
//! analytic gradient of that objective. Tensor-valued operations are reduced
//! to a scalar by projecting their output onto a fixed random tensor, so the
//! analytic side exercises the backward rule with a dense upstream gradient.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{CnnCtrl, Conv1d, DoubleEmbedding, EmbCtrl, Group, GroupSet, OutputLayer};
use crate::model::{Model, ModelConfig, Variant};
use crate::parallel::Execution;
use crate::seed::{self, Rng};
use crate::tensor::{
    activation, activation_backward, conv1d_same, conv1d_same_backward, dropout_backward,
    dropout_with_mask, matvec_batched, matvec_batched_backward, softmax_cross_entropy,
    Activation, DropoutMask, Mode, Tensor,
};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Finite-difference step at `f64` precision.
pub const EPSILON: f64 = 1e-5;
/// Inputs closer than this to a ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub trait Differentiable {
    fn name(&self) -> &str;

    /// Scalar objective and its gradient with respect to every input.
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;

    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        self.value_and_grad(inputs).map(|(v, _)| v)
    }

    /// Distance of the nearest non-smooth point from the current inputs.
    fn kink_margin(&self, _inputs: &[Tensor]) -> Result<f64> {
        Ok(f64::INFINITY)
    }
}

/// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` over
/// every coordinate of every input.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor], epsilon: f64) -> Result<f64> {
    let (_, analytic) = op.value_and_grad(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        if g.shape() != inputs[i].shape() {
            return Err(Error::shape("grad_check", inputs[i].shape(), g.shape()));
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let plus = op.value(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let minus = op.value(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = g.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Adapts a tensor-valued op to a scalar objective `sum(proj ⊙ y)`.
pub struct Projected<F, B> {
    pub name: String,
    pub proj: Tensor,
    pub forward: F,
    pub backward: B,
}

impl<F, B> Differentiable for Projected<F, B>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let y = (self.forward)(inputs)?;
        if y.shape() != self.proj.shape() {
            return Err(Error::shape("Projected", y.shape(), self.proj.shape()));
        }
        let g = (self.backward)(inputs, &self.proj)?;
        Ok((y.dot(&self.proj), g))
    }

    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        Ok((self.forward)(inputs)?.dot(&self.proj))
    }
}

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = rand_t(shape, rng);
    for v in t.data_mut() {
        // |v| in [0.05, 1]
        *v = v.signum() * (0.05 + 0.95 * v.abs());
    }
    t
}

fn some(t: Option<Tensor>) -> Tensor {
    t.expect("requested gradient")
}

// Channel sizes of the desk-scale checks: 2 input channels, 7 positions,
// 8 output channels.
const C_IN: usize = 2;
const LEN: usize = 7;
const C_OUT: usize = 8;
const BOTTLENECK: usize = 4;

/// One named gradient check with its inputs.
pub struct Case {
    pub op: Box<dyn Differentiable + Sync>,
    pub inputs: Vec<Tensor>,
}

/// Outcome of a single check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct EmbCtrlOp {
    width: usize,
}

impl Differentiable for EmbCtrlOp {
    fn name(&self) -> &str {
        "emb_ctrl"
    }

    // inputs: x, w, b, proj
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut m = EmbCtrl::new("g", self.width);
        m.w.value = inputs[1].clone();
        m.b.value = inputs[2].clone();
        let (y, cache) = m.forward(&inputs[0])?;
        let active = GroupSet::of(&[Group::Ctrl]);
        let (dx, pg) = m.backward(&cache, &inputs[3], active, true)?;
        let mut pg = pg.into_iter().map(some);
        Ok((
            y.dot(&inputs[3]),
            vec![some(dx), pg.next().unwrap(), pg.next().unwrap(), y],
        ))
    }
}

/// The projection is passed as the last input but must not be perturbed;
/// this wrapper hides it.
struct FixedTail<D> {
    inner: D,
    tail: Vec<Tensor>,
}

impl<D: Differentiable> Differentiable for FixedTail<D> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut all = inputs.to_vec();
        all.extend(self.tail.iter().cloned());
        let (v, mut g) = self.inner.value_and_grad(&all)?;
        g.truncate(inputs.len());
        Ok((v, g))
    }

    fn kink_margin(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut all = inputs.to_vec();
        all.extend(self.tail.iter().cloned());
        self.inner.kink_margin(&all)
    }
}

struct CnnCtrlOp {
    mode: Mode,
    dropout: f64,
    seed: u64,
}

impl CnnCtrlOp {
    fn module(&self, inputs: &[Tensor]) -> Result<CnnCtrl> {
        let mut m = CnnCtrl::new("g", C_OUT, BOTTLENECK, self.dropout, 0)?;
        m.w_red.value = inputs[1].clone();
        m.b_red.value = inputs[2].clone();
        m.w_exp.value = inputs[3].clone();
        m.b_exp.value = inputs[4].clone();
        Ok(m)
    }
}

impl Differentiable for CnnCtrlOp {
    fn name(&self) -> &str {
        "cnn_ctrl"
    }

    // inputs: x, w_red, b_red, w_exp, b_exp, proj
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let m = self.module(inputs)?;
        let (y, cache) = m.forward(&inputs[0], self.mode, &mut seed::rng(self.seed))?;
        let (dx, pg) = m.backward(&cache, &inputs[5], GroupSet::of(&[Group::Ctrl]), true)?;
        let mut g = vec![some(dx)];
        g.extend(pg.into_iter().map(some));
        Ok((y.dot(&inputs[5]), g))
    }

    fn kink_margin(&self, inputs: &[Tensor]) -> Result<f64> {
        let m = self.module(inputs)?;
        let (_, cache) = m.forward(&inputs[0], self.mode, &mut seed::rng(self.seed))?;
        Ok(cache.relu_margin())
    }
}

/// Embedding control, layer-2 style convolution and the bottleneck control
/// chained end to end.
struct CtrlChainOp {
    seed: u64,
}

impl CtrlChainOp {
    fn modules(&self, inputs: &[Tensor]) -> Result<(EmbCtrl, Conv1d, CnnCtrl)> {
        let mut e = EmbCtrl::new("e", C_IN);
        e.w.value = inputs[1].clone();
        e.b.value = inputs[2].clone();
        let mut c = Conv1d::new("c", C_IN, C_OUT, 3, 0)?;
        c.w.value = inputs[3].clone();
        c.b.value = inputs[4].clone();
        let mut k = CnnCtrl::new("k", C_OUT, BOTTLENECK, 0.5, 0)?;
        k.w_red.value = inputs[5].clone();
        k.b_red.value = inputs[6].clone();
        k.w_exp.value = inputs[7].clone();
        k.b_exp.value = inputs[8].clone();
        Ok((e, c, k))
    }
}

impl Differentiable for CtrlChainOp {
    fn name(&self) -> &str {
        "ctrl_chain"
    }

    // inputs: x, w_emb, b_emb, conv w, conv b, w_red, b_red, w_exp, b_exp, proj
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let (e, c, k) = self.modules(inputs)?;
        let all = GroupSet::of(&[Group::Cnn, Group::Ctrl]);
        let (z1, ce) = e.forward(&inputs[0])?;
        let (h, cc) = c.forward(&z1)?;
        let (y, ck) = k.forward(&h, Mode::Train, &mut seed::rng(self.seed))?;
        let proj = &inputs[9];
        let (dh, gk) = k.backward(&ck, proj, all, true)?;
        let (dz1, gc) = c.backward(&cc, &some(dh), all, true)?;
        let (dx, ge) = e.backward(&ce, &some(dz1), all, true)?;
        let mut g = vec![some(dx)];
        g.extend(ge.into_iter().map(some));
        g.extend(gc.into_iter().map(some));
        g.extend(gk.into_iter().map(some));
        Ok((y.dot(proj), g))
    }

    fn kink_margin(&self, inputs: &[Tensor]) -> Result<f64> {
        let (e, c, k) = self.modules(inputs)?;
        let (z1, _) = e.forward(&inputs[0])?;
        let (h, _) = c.forward(&z1)?;
        let (_, ck) = k.forward(&h, Mode::Train, &mut seed::rng(self.seed))?;
        Ok(ck.relu_margin())
    }
}

/// Whole-network loss with respect to every trainable tensor.
struct ModelOp {
    name: String,
    template: Model,
    batch: Batch,
    names: Vec<String>,
    seed: u64,
}

impl ModelOp {
    fn with_inputs(&self, inputs: &[Tensor]) -> Model {
        let mut m = self.template.clone();
        for (name, t) in self.names.iter().zip(inputs) {
            m.param_mut(name).expect("known parameter").value = t.clone();
        }
        m
    }
}

impl Differentiable for ModelOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let m = self.with_inputs(inputs);
        let active = GroupSet::of(&[Group::Cnn, Group::Ctrl, Group::Fc]);
        let (loss, grads) = m.batch_loss(&self.batch, Mode::Train, self.seed, Some(active), Execution::Sequential)?;
        let grads = grads.expect("requested");
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let out = self
            .names
            .iter()
            .map(|n| {
                let i = names.iter().position(|x| x == n).expect("known parameter");
                grads[i].clone().expect("trainable parameter has a gradient")
            })
            .collect();
        Ok((loss, out))
    }

    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let m = self.with_inputs(inputs);
        m.batch_loss(&self.batch, Mode::Train, self.seed, None, Execution::Sequential)
            .map(|(l, _)| l)
    }

    fn kink_margin(&self, inputs: &[Tensor]) -> Result<f64> {
        let m = self.with_inputs(inputs);
        let mut margin = f64::INFINITY;
        for r in 0..self.batch.batch_size {
            let (ids, _) = self.batch.row(r);
            let mut rng = seed::rng(seed::derive(self.seed, &[r as u64]));
            let (_, cache) = m.forward_sentence(ids, Mode::Train, &mut rng)?;
            margin = margin.min(cache.relu_margin());
        }
        Ok(margin)
    }
}

/// A ReLU whose backward is deliberately wrong, as a negative control.
struct BrokenRelu;

impl Differentiable for BrokenRelu {
    fn name(&self) -> &str {
        "broken_relu"
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let y = activation(Activation::Relu, &inputs[0]);
        let g = Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|&v| if v > 0.0 { 2.0 } else { 0.0 }).collect(),
        )?;
        Ok((y.data().iter().sum(), vec![g]))
    }
}

pub const OP_NAMES: &[&str] = &[
    "matvec",
    "conv1d",
    "relu",
    "tanh",
    "dropout",
    "softmax_ce",
    "output",
    "emb_ctrl",
    "cnn_ctrl",
    "ctrl_chain",
    "model_ctrl",
    "model_dan",
    "model_decnn",
];

fn tiny_model(variant: Variant, seed_: u64) -> Result<(Model, Batch)> {
    let cfg = ModelConfig {
        variant,
        vocab_size: 6,
        general_dim: 2,
        domain_dim: 1,
        narrow_filters: 2,
        narrow_kernel: 3,
        wide_filters: 2,
        wide_kernel: 5,
        channels: 4,
        kernel: 5,
        upper_layers: 3,
        bottleneck: 2,
        labels: 3,
        dropout: 0.3,
        seed: seed_,
    };
    let mut model = Model::with_embedding(&cfg, DoubleEmbedding::random(6, 2, 1, 1.0, seed_))?;
    // move every control module off its identity start so all paths matter
    let mut rng = seed::rng(seed::derive(seed_, &[77]));
    for p in model.params_mut() {
        if p.group == Group::Ctrl {
            let shape = p.value.shape().to_vec();
            let noise = Tensor::uniform(&shape, 0.5, &mut rng);
            p.value.add_assign(&noise)?;
        }
    }
    let batch = Batch::from_encoded(&[
        (vec![2, 3, 4, 5, 1, 2, 3], vec![0, 1, 2, 2, 0, 2, 2]),
        (vec![5, 4], vec![2, 0]),
    ]);
    Ok((model, batch))
}

fn model_case(variant: Variant, name: &str, seed_: u64) -> Result<Case> {
    let (model, batch) = tiny_model(variant, seed_)?;
    let active = GroupSet::of(&[Group::Cnn, Group::Ctrl, Group::Fc]);
    let (names, inputs): (Vec<String>, Vec<Tensor>) = model
        .params()
        .iter()
        .filter(|p| p.is_updatable(active))
        .map(|p| (p.name.clone(), p.value.clone()))
        .unzip();
    Ok(Case {
        op: Box::new(ModelOp {
            name: name.to_string(),
            template: model,
            batch,
            names,
            seed: seed::derive(seed_, &[3]),
        }),
        inputs,
    })
}

/// Builds the named check with inputs drawn from `rng`.
pub fn build_case(name: &str, rng: &mut Rng) -> Result<Case> {
    let case = match name {
        "matvec" => Case {
            inputs: vec![rand_t(&[C_OUT, C_IN], rng), rand_t(&[C_IN, LEN], rng), rand_t(&[C_OUT], rng)],
            op: Box::new(Projected {
                name: name.into(),
                proj: rand_t(&[C_OUT, LEN], rng),
                forward: |i: &[Tensor]| matvec_batched(&i[0], &i[1], &i[2]),
                backward: |i: &[Tensor], g: &Tensor| {
                    let r = matvec_batched_backward(&i[0], &i[1], g, true, true)?;
                    Ok(vec![some(r.w), some(r.x), some(r.b)])
                },
            }),
        },
        "conv1d" => Case {
            inputs: vec![rand_t(&[C_IN, LEN], rng), rand_t(&[C_OUT, C_IN, 5], rng), rand_t(&[C_OUT], rng)],
            op: Box::new(Projected {
                name: name.into(),
                proj: rand_t(&[C_OUT, LEN], rng),
                forward: |i: &[Tensor]| conv1d_same(&i[0], &i[1], &i[2]),
                backward: |i: &[Tensor], g: &Tensor| {
                    let r = conv1d_same_backward(&i[0], &i[1], g, true, true)?;
                    Ok(vec![some(r.x), some(r.w), some(r.b)])
                },
            }),
        },
        "relu" | "tanh" => {
            let kind = if name == "relu" { Activation::Relu } else { Activation::Tanh };
            Case {
                inputs: vec![away_from_zero(&[C_IN, LEN], rng)],
                op: Box::new(Projected {
                    name: name.into(),
                    proj: rand_t(&[C_IN, LEN], rng),
                    forward: move |i: &[Tensor]| Ok(activation(kind, &i[0])),
                    backward: move |i: &[Tensor], g: &Tensor| {
                        let y = activation(kind, &i[0]);
                        Ok(vec![activation_backward(kind, &i[0], &y, g)?])
                    },
                }),
            }
        }
        "dropout" => {
            let mut mrng = seed::rng(seed::derive(5, &[1]));
            let keep: Vec<bool> = (0..C_IN * LEN)
                .map(|_| rand::Rng::gen::<f64>(&mut mrng) >= 0.55)
                .collect();
            let mask = DropoutMask::from_keep(&keep, 0.55);
            let m2 = mask.clone();
            Case {
                inputs: vec![rand_t(&[C_IN, LEN], rng)],
                op: Box::new(Projected {
                    name: name.into(),
                    proj: rand_t(&[C_IN, LEN], rng),
                    forward: move |i: &[Tensor]| dropout_with_mask(&i[0], &mask),
                    backward: move |_: &[Tensor], g: &Tensor| Ok(vec![dropout_backward(&m2, g)?]),
                }),
            }
        }
        "softmax_ce" => {
            let labels: Vec<usize> = (0..LEN).map(|t| (t * 7 + 1) % 3).collect();
            let mask: Vec<u8> = (0..LEN).map(|t| u8::from(t != 3)).collect();
            Case {
                inputs: vec![rand_t(&[LEN, 3], rng).reshape(vec![LEN, 3])?],
                op: Box::new(Projected {
                    name: name.into(),
                    proj: Tensor::vector(vec![1.0]),
                    forward: {
                        let (labels, mask) = (labels.clone(), mask.clone());
                        move |i: &[Tensor]| {
                            softmax_cross_entropy(&i[0], &labels, &mask).map(|(l, _)| Tensor::vector(vec![l]))
                        }
                    },
                    backward: move |i: &[Tensor], _: &Tensor| {
                        Ok(vec![softmax_cross_entropy(&i[0], &labels, &mask)?.1])
                    },
                }),
            }
        }
        "output" => Case {
            inputs: vec![rand_t(&[C_OUT, LEN], rng), rand_t(&[3, C_OUT], rng), rand_t(&[3], rng)],
            op: Box::new(Projected {
                name: name.into(),
                proj: rand_t(&[LEN, 3], rng),
                forward: |i: &[Tensor]| {
                    let mut o = OutputLayer::new("fc", C_OUT, 3, 0);
                    o.w.value = i[1].clone();
                    o.b.value = i[2].clone();
                    o.forward(&i[0]).map(|(y, _)| y)
                },
                backward: |i: &[Tensor], g: &Tensor| {
                    let mut o = OutputLayer::new("fc", C_OUT, 3, 0);
                    o.w.value = i[1].clone();
                    o.b.value = i[2].clone();
                    let (_, cache) = o.forward(&i[0])?;
                    let (dx, pg) = o.backward(&cache, g, GroupSet::of(&[Group::Fc]), true)?;
                    let mut pg = pg.into_iter().map(some);
                    Ok(vec![some(dx), pg.next().unwrap(), pg.next().unwrap()])
                },
            }),
        },
        "emb_ctrl" => Case {
            inputs: vec![rand_t(&[C_IN, LEN], rng), rand_t(&[C_IN, C_IN], rng), rand_t(&[C_IN], rng)],
            op: Box::new(FixedTail {
                inner: EmbCtrlOp { width: C_IN },
                tail: vec![rand_t(&[C_IN, LEN], rng)],
            }),
        },
        "cnn_ctrl" => Case {
            inputs: vec![
                rand_t(&[C_OUT, LEN], rng),
                rand_t(&[BOTTLENECK, C_OUT], rng),
                rand_t(&[BOTTLENECK], rng),
                rand_t(&[C_OUT, BOTTLENECK], rng),
                rand_t(&[C_OUT], rng),
            ],
            op: Box::new(FixedTail {
                inner: CnnCtrlOp {
                    mode: Mode::Train,
                    dropout: 0.5,
                    seed: 17,
                },
                tail: vec![rand_t(&[C_OUT, LEN], rng)],
            }),
        },
        "ctrl_chain" => Case {
            inputs: vec![
                rand_t(&[C_IN, LEN], rng),
                rand_t(&[C_IN, C_IN], rng),
                rand_t(&[C_IN], rng),
                rand_t(&[C_OUT, C_IN, 3], rng),
                rand_t(&[C_OUT], rng),
                rand_t(&[BOTTLENECK, C_OUT], rng),
                rand_t(&[BOTTLENECK], rng),
                rand_t(&[C_OUT, BOTTLENECK], rng),
                rand_t(&[C_OUT], rng),
            ],
            op: Box::new(FixedTail {
                inner: CtrlChainOp { seed: 23 },
                tail: vec![rand_t(&[C_OUT, LEN], rng)],
            }),
        },
        "model_ctrl" => model_case(Variant::Ctrl, name, rand::Rng::gen(rng))?,
        "model_dan" => model_case(Variant::Dan, name, rand::Rng::gen(rng))?,
        "model_decnn" => model_case(Variant::DeCnn, name, rand::Rng::gen(rng))?,
        "broken_relu" => Case {
            inputs: vec![away_from_zero(&[C_IN, LEN], rng)],
            op: Box::new(BrokenRelu),
        },
        other => return Err(Error::Config(format!("unknown gradient check `{other}`"))),
    };
    Ok(case)
}

/// Runs one named check. Inputs are redrawn (up to 200 times) until every
/// ReLU input sits at least [`KINK_MARGIN`] away from zero.
pub fn check_op(name: &str, seed_: u64) -> Result<CheckResult> {
    let mut rng = seed::rng(seed::derive_named(seed_, name));
    for _ in 0..200 {
        let case = build_case(name, &mut rng)?;
        if case.op.kink_margin(&case.inputs)? < KINK_MARGIN {
            continue;
        }
        let err = grad_check(case.op.as_ref(), &case.inputs, EPSILON)?;
        return Ok(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            coordinates: case.inputs.iter().map(Tensor::len).sum(),
        });
    }
    Err(Error::Degenerate(format!(
        "could not draw inputs for `{name}` away from ReLU kinks"
    )))
}

/// Runs the named checks (all of [`OP_NAMES`] when `only` is empty), plus
/// the broken negative control when asked.
pub fn run_suite(only: &[String], include_broken: bool, seed_: u64) -> Result<Vec<CheckResult>> {
    let mut names: Vec<&str> = if only.is_empty() {
        OP_NAMES.to_vec()
    } else {
        for n in only {
            if !OP_NAMES.contains(&n.as_str()) && n != "broken_relu" {
                return Err(Error::Config(format!(
                    "unknown gradient check `{n}`; known: {}",
                    OP_NAMES.join(", ")
                )));
            }
        }
        only.iter().map(String::as_str).collect()
    };
    if include_broken && !names.contains(&"broken_relu") {
        names.push("broken_relu");
    }
    names.into_iter().map(|n| check_op(n, seed_)).collect()
}
