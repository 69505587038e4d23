//! Layer types of the tagger: the frozen double embedding, the two residual
//! control modules, the linear control used by the DAN variants, same-padded
//! convolutions and the position-shared output layer.
//!
//! Each layer owns its [`Param`]s and exposes a forward pass that returns a
//! cache, plus a backward pass that consumes it. Parameter gradients come
//! back in the same order as [`Layer::params`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tensor::{
    self, activation, activation_backward, conv1d_same, conv1d_same_backward, dropout,
    dropout_backward, matvec_batched, matvec_batched_backward, Activation, DropoutMask, Mode,
    Tensor,
};

/// Freeze group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Emb,
    Cnn,
    Ctrl,
    Fc,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Emb, Group::Cnn, Group::Ctrl, Group::Fc];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Emb => "EMB",
            Group::Cnn => "CNN",
            Group::Ctrl => "CTRL",
            Group::Fc => "FC",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Group::Emb => 0,
            Group::Cnn => 1,
            Group::Ctrl => 2,
            Group::Fc => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Group> {
        Group::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

/// A set of groups, used to say which groups an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | (1 << g.code())))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << g.code()) != 0
    }
}

/// A named tensor tagged with its freeze group.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, group: Group) -> Self {
        Param {
            name: name.into(),
            value,
            group,
            // embedding tables never train
            trainable: group != Group::Emb,
        }
    }

    /// Whether an update restricted to `active` may change this parameter.
    pub fn is_updatable(&self, active: GroupSet) -> bool {
        self.trainable && self.group != Group::Emb && active.contains(self.group)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization from a per-name seed.
    pub fn fan_in_uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        group: Group,
        base_seed: u64,
    ) -> Self {
        let name = name.into();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = seed::rng(seed::derive_named(base_seed, &name));
        let value = Tensor::uniform(shape, bound, &mut rng);
        Param::new(name, value, group)
    }
}

/// Common surface of every layer: ordered parameter access.
pub trait Layer {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

fn grad_if(p: &Param, active: GroupSet, g: Option<Tensor>) -> Option<Tensor> {
    if p.is_updatable(active) {
        g
    } else {
        None
    }
}

fn check_width(op: &'static str, x: &Tensor, width: usize) -> Result<usize> {
    match x.dims2() {
        Some((w, l)) if w == width => Ok(l),
        _ => Err(Error::shape(op, x.shape(), &[width, 0])),
    }
}

/// Frozen concatenation of a general-purpose and a domain-specific table.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleEmbedding {
    pub general: Param,
    pub domain: Param,
}

impl DoubleEmbedding {
    /// Builds the tables from `[vocab × dim]` tensors. Row 0 is the padding
    /// row and is forced to zero.
    pub fn new(general: Tensor, domain: Tensor) -> Result<Self> {
        let (vg, _) = general
            .dims2()
            .ok_or_else(|| Error::shape("DoubleEmbedding", general.shape(), domain.shape()))?;
        let (vd, _) = domain
            .dims2()
            .ok_or_else(|| Error::shape("DoubleEmbedding", general.shape(), domain.shape()))?;
        if vg != vd {
            return Err(Error::shape("DoubleEmbedding", general.shape(), domain.shape()));
        }
        let mut emb = DoubleEmbedding {
            general: Param::new("emb.general", general, Group::Emb),
            domain: Param::new("emb.domain", domain, Group::Emb),
        };
        for p in [&mut emb.general, &mut emb.domain] {
            let cols = p.value.shape()[1];
            p.value.data_mut()[..cols].fill(0.0);
        }
        Ok(emb)
    }

    pub fn zeros(vocab: usize, general_dim: usize, domain_dim: usize) -> Self {
        DoubleEmbedding::new(
            Tensor::zeros(&[vocab, general_dim]),
            Tensor::zeros(&[vocab, domain_dim]),
        )
        .expect("consistent shapes")
    }

    /// Normal-ish random tables (uniform in `[-scale, scale]`) for synthetic
    /// corpora and tests.
    pub fn random(vocab: usize, general_dim: usize, domain_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive_named(seed, "emb.random"));
        DoubleEmbedding::new(
            Tensor::uniform(&[vocab, general_dim], scale, &mut rng),
            Tensor::uniform(&[vocab, domain_dim], scale, &mut rng),
        )
        .expect("consistent shapes")
    }

    pub fn vocab_size(&self) -> usize {
        self.general.value.shape()[0]
    }

    pub fn general_dim(&self) -> usize {
        self.general.value.shape()[1]
    }

    pub fn domain_dim(&self) -> usize {
        self.domain.value.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.general_dim() + self.domain_dim()
    }

    /// Looks up each id and returns a `[width × L]` tensor, general rows on
    /// top of domain rows. No gradient flows back to the tables.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let vocab = self.vocab_size();
        if ids.is_empty() {
            return Err(Error::Degenerate("cannot embed an empty sentence".into()));
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(Error::Lookup { position, id, vocab });
        }
        let len = ids.len();
        let (gd, dd) = (self.general_dim(), self.domain_dim());
        let mut out = vec![0.0; (gd + dd) * len];
        for (t, &id) in ids.iter().enumerate() {
            let g = &self.general.value.data()[id * gd..(id + 1) * gd];
            let d = &self.domain.value.data()[id * dd..(id + 1) * dd];
            for (r, v) in g.iter().chain(d).enumerate() {
                out[r * len + t] = *v;
            }
        }
        Tensor::new(vec![gd + dd, len], out)
    }
}

impl Layer for DoubleEmbedding {
    fn params(&self) -> Vec<&Param> {
        vec![&self.general, &self.domain]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.general, &mut self.domain]
    }
}

/// Square affine map added back onto its input: `z = (W x + b) + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbCtrl {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct EmbCtrlCache {
    x: Tensor,
}

impl EmbCtrl {
    /// Zero-initialized, so the module starts as the identity.
    pub fn new(prefix: &str, width: usize) -> Self {
        EmbCtrl {
            w: Param::new(format!("{prefix}.w_emb"), Tensor::zeros(&[width, width]), Group::Ctrl),
            b: Param::new(format!("{prefix}.b_emb"), Tensor::zeros(&[width]), Group::Ctrl),
        }
    }

    pub fn width(&self) -> usize {
        self.b.value.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, EmbCtrlCache)> {
        check_width("emb_ctrl_forward", x, self.width())?;
        let mut y = matvec_batched(&self.w.value, x, &self.b.value)?;
        y.add_assign(x)?;
        Ok((y, EmbCtrlCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: &EmbCtrlCache,
        grad_out: &Tensor,
        active: GroupSet,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let want_params = self.w.is_updatable(active) || self.b.is_updatable(active);
        let g = matvec_batched_backward(&self.w.value, &cache.x, grad_out, want_params, want_input)?;
        let dx = match g.x {
            Some(mut dx) => {
                dx.add_assign(grad_out)?;
                Some(dx)
            }
            None => None,
        };
        Ok((
            dx,
            vec![grad_if(&self.w, active, g.w), grad_if(&self.b, active, g.b)],
        ))
    }
}

impl Layer for EmbCtrl {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Bottleneck control module:
/// `z = relu(x + W_exp · dropout(tanh(W_red x + b_red)) + b_exp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnCtrl {
    pub w_red: Param,
    pub b_red: Param,
    pub w_exp: Param,
    pub b_exp: Param,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct CnnCtrlCache {
    x: Tensor,
    hidden: Tensor,
    mask: DropoutMask,
    dropped: Tensor,
    pre_relu: Tensor,
}

impl CnnCtrlCache {
    /// Smallest distance of any ReLU input from the kink at zero.
    pub fn relu_margin(&self) -> f64 {
        min_abs(&self.pre_relu)
    }
}

pub(crate) fn min_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

impl CnnCtrl {
    /// Reduce weights get fan-in uniform values; the expand side starts at
    /// zero so the module begins as a plain ReLU.
    pub fn new(prefix: &str, width: usize, bottleneck: usize, dropout: f64, seed: u64) -> Result<Self> {
        if bottleneck >= width {
            return Err(Error::Config(format!(
                "control bottleneck ({bottleneck}) must be narrower than the channel width ({width})"
            )));
        }
        tensor::check_dropout_rate(dropout)?;
        Ok(CnnCtrl {
            w_red: Param::fan_in_uniform(format!("{prefix}.w_red"), &[bottleneck, width], width, Group::Ctrl, seed),
            b_red: Param::fan_in_uniform(format!("{prefix}.b_red"), &[bottleneck], width, Group::Ctrl, seed),
            w_exp: Param::new(format!("{prefix}.w_exp"), Tensor::zeros(&[width, bottleneck]), Group::Ctrl),
            b_exp: Param::new(format!("{prefix}.b_exp"), Tensor::zeros(&[width]), Group::Ctrl),
            dropout,
        })
    }

    pub fn width(&self) -> usize {
        self.b_exp.value.len()
    }

    pub fn bottleneck(&self) -> usize {
        self.b_red.value.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, CnnCtrlCache)> {
        check_width("cnn_ctrl_forward", x, self.width())?;
        let reduced = matvec_batched(&self.w_red.value, x, &self.b_red.value)?;
        let hidden = activation(Activation::Tanh, &reduced);
        let (dropped, mask) = dropout(&hidden, self.dropout, mode, rng)?;
        let mut pre_relu = matvec_batched(&self.w_exp.value, &dropped, &self.b_exp.value)?;
        pre_relu.add_assign(x)?;
        let y = activation(Activation::Relu, &pre_relu);
        Ok((
            y,
            CnnCtrlCache {
                x: x.clone(),
                hidden,
                mask,
                dropped,
                pre_relu,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &CnnCtrlCache,
        grad_out: &Tensor,
        active: GroupSet,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let y = activation(Activation::Relu, &cache.pre_relu);
        let d_pre = activation_backward(Activation::Relu, &cache.pre_relu, &y, grad_out)?;
        let exp_params = self.w_exp.is_updatable(active) || self.b_exp.is_updatable(active);
        let red_params = self.w_red.is_updatable(active) || self.b_red.is_updatable(active);
        // the bottleneck path is only needed for the reduce weights or dx
        let need_bottleneck = red_params || want_input;
        let ge = matvec_batched_backward(&self.w_exp.value, &cache.dropped, &d_pre, exp_params, need_bottleneck)?;
        let mut gr = tensor::AffineGrads::default();
        if let Some(d_dropped) = ge.x {
            let d_hidden = dropout_backward(&cache.mask, &d_dropped)?;
            let d_reduced = activation_backward(Activation::Tanh, &cache.hidden, &cache.hidden, &d_hidden)?;
            gr = matvec_batched_backward(&self.w_red.value, &cache.x, &d_reduced, red_params, want_input)?;
        }
        let dx = match gr.x {
            Some(mut dx) => {
                dx.add_assign(&d_pre)?;
                Some(dx)
            }
            None => None,
        };
        Ok((
            dx,
            vec![
                grad_if(&self.w_red, active, gr.w),
                grad_if(&self.b_red, active, gr.b),
                grad_if(&self.w_exp, active, ge.w),
                grad_if(&self.b_exp, active, ge.b),
            ],
        ))
    }
}

impl Layer for CnnCtrl {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_red, &self.b_red, &self.w_exp, &self.b_exp]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_red, &mut self.b_red, &mut self.w_exp, &mut self.b_exp]
    }
}

/// Plain square linear transformation `z = W x + b`, the control module of
/// the DAN variants. Starts at the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCtrl {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct LinearCtrlCache {
    x: Tensor,
}

impl LinearCtrl {
    pub fn new(prefix: &str, width: usize) -> Self {
        LinearCtrl {
            w: Param::new(format!("{prefix}.w"), Tensor::identity(width), Group::Ctrl),
            b: Param::new(format!("{prefix}.b"), Tensor::zeros(&[width]), Group::Ctrl),
        }
    }

    pub fn width(&self) -> usize {
        self.b.value.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCtrlCache)> {
        check_width("linear_ctrl_forward", x, self.width())?;
        let y = matvec_batched(&self.w.value, x, &self.b.value)?;
        Ok((y, LinearCtrlCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: &LinearCtrlCache,
        grad_out: &Tensor,
        active: GroupSet,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let want_params = self.w.is_updatable(active) || self.b.is_updatable(active);
        let g = matvec_batched_backward(&self.w.value, &cache.x, grad_out, want_params, want_input)?;
        Ok((g.x, vec![grad_if(&self.w, active, g.w), grad_if(&self.b, active, g.b)]))
    }
}

impl Layer for LinearCtrl {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Same-padded 1-D convolution layer (group CNN).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    x: Tensor,
}

impl Conv1d {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let fan_in = in_ch * kernel;
        Ok(Conv1d {
            w: Param::fan_in_uniform(format!("{prefix}.w"), &[out_ch, in_ch, kernel], fan_in, Group::Cnn, seed),
            b: Param::fan_in_uniform(format!("{prefix}.b"), &[out_ch], fan_in, Group::Cnn, seed),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.b.value.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Conv1dCache)> {
        let y = conv1d_same(x, &self.w.value, &self.b.value)?;
        Ok((y, Conv1dCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: &Conv1dCache,
        grad_out: &Tensor,
        active: GroupSet,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let want_params = self.w.is_updatable(active) || self.b.is_updatable(active);
        let g = conv1d_same_backward(&cache.x, &self.w.value, grad_out, want_params, want_input)?;
        Ok((g.x, vec![grad_if(&self.w, active, g.w), grad_if(&self.b, active, g.b)]))
    }
}

impl Layer for Conv1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Fully-connected layer shared across positions; maps `[D × L]` features to
/// `[L × labels]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub w: Param,
    pub b: Param,
}

#[derive(Debug, Clone)]
pub struct OutputCache {
    x: Tensor,
}

impl OutputLayer {
    pub fn new(prefix: &str, in_dim: usize, labels: usize, seed: u64) -> Self {
        OutputLayer {
            w: Param::fan_in_uniform(format!("{prefix}.w"), &[labels, in_dim], in_dim, Group::Fc, seed),
            b: Param::fan_in_uniform(format!("{prefix}.b"), &[labels], in_dim, Group::Fc, seed),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, OutputCache)> {
        check_width("output_layer", x, self.in_dim())?;
        let y = matvec_batched(&self.w.value, x, &self.b.value)?.transpose()?;
        Ok((y, OutputCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        cache: &OutputCache,
        grad_logits: &Tensor,
        active: GroupSet,
        want_input: bool,
    ) -> Result<(Option<Tensor>, Vec<Option<Tensor>>)> {
        let want_params = self.w.is_updatable(active) || self.b.is_updatable(active);
        let g_t = grad_logits.transpose()?;
        let g = matvec_batched_backward(&self.w.value, &cache.x, &g_t, want_params, want_input)?;
        Ok((g.x, vec![grad_if(&self.w, active, g.w), grad_if(&self.b, active, g.b)]))
    }
}

impl Layer for OutputLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}
