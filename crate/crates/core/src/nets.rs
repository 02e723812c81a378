//! The three networks of the adversarial architecture and their parameters.
//!
//! * feature extractor `G_f`: input → … → `feature_dim`, tanh after every layer
//! * label predictor `G_y`: features → … → `num_classes`, tanh hidden layers, softmax head
//! * domain classifier `G_d`: features → GRL → … → 2, ReLU hidden layers, softmax head
//!
//! The feature extractor is bound once per tape and its output feeds both
//! heads, so the label path and the domain path share the same `θ_f` nodes.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Magic first line of a parameter checkpoint.
pub const CHECKPOINT_MAGIC: &str = "TDANN1";

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.1;

fn default_domain_hidden() -> Vec<usize> {
    vec![1024, 1024]
}

/// Layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub feature_hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub label_hidden: Vec<usize>,
    #[serde(default = "default_domain_hidden")]
    pub domain_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl NetSpec {
    /// Spec with the default `d → 1024 → 1024 → 2` domain head.
    pub fn new(input_dim: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            feature_hidden: Vec::new(),
            feature_dim,
            label_hidden: Vec::new(),
            domain_hidden: default_domain_hidden(),
            num_classes,
        }
    }

    /// Small architecture used by the synthetic benchmarks.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            feature_hidden: vec![32],
            feature_dim: 16,
            label_hidden: Vec::new(),
            domain_hidden: vec![32],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.feature_hidden.iter().copied())
            .chain(std::iter::once(self.feature_dim))
            .chain(self.label_hidden.iter().copied())
            .chain(self.domain_hidden.iter().copied());
        if widths.into_iter().any(|w| w == 0) {
            return Err(Error::contract(format!("all layer widths must be positive: {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(Error::contract(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Fully connected layer `x·W + b` with `W: [in×out]`, `b: [1×out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut rng::Rng) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE)).collect()
        };
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::from_parts(vec![w[0], w[1]], draw(w[0] * w[1])).with_grad(),
                bias: Tensor::from_parts(vec![1, w[1]], draw(w[1])).with_grad(),
            })
            .collect();
        Self { layers }
    }

    fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Tanh,
    Relu,
}

/// `θ_f`, `θ_y` and `θ_d` together with the spec that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetSpec,
    pub feature: Mlp,
    pub label: Mlp,
    pub domain: Mlp,
}

/// Draws every weight and bias i.i.d. from `U[-0.1, 0.1]`.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut widths = vec![spec.input_dim];
    widths.extend(&spec.feature_hidden);
    widths.push(spec.feature_dim);
    let feature = Mlp::init(&widths, &mut rng);

    let mut widths = vec![spec.feature_dim];
    widths.extend(&spec.label_hidden);
    widths.push(spec.num_classes);
    let label = Mlp::init(&widths, &mut rng);

    let mut widths = vec![spec.feature_dim];
    widths.extend(&spec.domain_hidden);
    widths.push(2);
    let domain = Mlp::init(&widths, &mut rng);

    Ok(ModelParams {
        spec: spec.clone(),
        feature,
        label,
        domain,
    })
}

impl ModelParams {
    /// Every parameter tensor with a stable name, in `θ_f, θ_y, θ_d` order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, mlp) in self.groups() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [&mut self.feature, &mut self.label, &mut self.domain]
            .into_iter()
            .flat_map(|m| m.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn groups(&self) -> [(&'static str, &Mlp); 3] {
        [
            ("feature", &self.feature),
            ("label", &self.label),
            ("domain", &self.domain),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|x| x.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            feature: self.feature.bind(tape),
            label: self.label.bind(tape),
            domain: self.domain.bind(tape),
            feature_dim: self.spec.feature_dim,
            input_dim: self.spec.input_dim,
        }
    }

    /// Adds the gradients held on `tape` into each parameter's gradient slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        let vars: Vec<Var> = bound.vars().collect();
        for (t, v) in self.tensors_mut().zip(vars) {
            t.grad_mut()
                .iter_mut()
                .zip(tape.grad(v))
                .for_each(|(s, g)| *s += g);
        }
    }

    /// Class probabilities `G_y(G_f(x))` without gradient tracking.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let f = bound.forward_features(&mut tape, xv)?;
        let p = bound.forward_label(&mut tape, f)?;
        Ok(tape.value(p).clone())
    }

    /// Feature map `G_f(x)` without gradient tracking.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x);
        let f = bound.forward_features(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }

    /// Text checkpoint:
    ///
    /// ```text
    /// TDANN1
    /// spec {"input_dim":2,...}
    /// tensors <count>
    /// <name> <rows>x<cols> <v0> <v1> ...
    /// ```
    ///
    /// Values use shortest round-trip exponent notation, so a save/load cycle
    /// is bit-exact.
    pub fn to_checkpoint(&self) -> Result<String> {
        let mut s = String::new();
        let tensors = self.named_tensors();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "spec {}", serde_json::to_string(&self.spec)?).unwrap();
        writeln!(s, "tensors {}", tensors.len()).unwrap();
        for (name, t) in tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(s, "{name} {}", dims.join("x")).unwrap();
            for v in t.data() {
                write!(s, " {v:e}").unwrap();
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.lines().map(|l| {
            let at = offset;
            offset += l.len() + 1;
            (at, l)
        });
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Format {
                offset: text.len(),
                message: format!("missing {what}"),
            })
        };
        let (at, magic) = next("magic header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: at,
                message: format!("expected {CHECKPOINT_MAGIC:?} header, found {magic:?}"),
            });
        }
        let (at, spec_line) = next("spec line")?;
        let spec_json = spec_line.strip_prefix("spec ").ok_or_else(|| Error::Format {
            offset: at,
            message: "expected `spec <json>`".into(),
        })?;
        let spec: NetSpec = serde_json::from_str(spec_json)?;
        let mut params = init_params(&spec, 0)?;
        let (at, count_line) = next("tensor count")?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Format {
                offset: at,
                message: "expected `tensors <count>`".into(),
            })?;
        let expected = params.named_tensors().len();
        if count != expected {
            return Err(Error::Format {
                offset: at,
                message: format!("spec implies {expected} tensors, header says {count}"),
            });
        }
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (tensor, name) in params.tensors_mut().zip(names) {
            let (at, line) = next("tensor line")?;
            let bad = |message: String| Error::Format { offset: at, message };
            let mut fields = line.split_ascii_whitespace();
            if fields.next() != Some(name.as_str()) {
                return Err(bad(format!("expected tensor {name}")));
            }
            let dims: Vec<usize> = fields
                .next()
                .unwrap_or_default()
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad shape for {name}")))?;
            if dims != tensor.shape() {
                return Err(bad(format!(
                    "{name} has shape {dims:?}, spec implies {:?}",
                    tensor.shape()
                )));
            }
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad value in {name}")))?;
            if values.len() != tensor.numel() {
                return Err(bad(format!(
                    "{name} has {} values, expected {}",
                    values.len(),
                    tensor.numel()
                )));
            }
            tensor.data_mut().copy_from_slice(&values);
        }
        Ok(params)
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    feature: Vec<(Var, Var)>,
    label: Vec<(Var, Var)>,
    domain: Vec<(Var, Var)>,
    feature_dim: usize,
    input_dim: usize,
}

impl BoundModel {
    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.feature
            .iter()
            .chain(&self.label)
            .chain(&self.domain)
            .flat_map(|&(w, b)| [w, b])
    }

    pub fn feature_vars(&self) -> &[(Var, Var)] {
        &self.feature
    }

    pub fn label_vars(&self) -> &[(Var, Var)] {
        &self.label
    }

    pub fn domain_vars(&self) -> &[(Var, Var)] {
        &self.domain
    }

    /// `f = G_f(x; θ_f)`.
    pub fn forward_features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        expect_width(tape, x, self.input_dim, "forward_features")?;
        run_mlp(tape, &self.feature, x, Activation::Tanh, true)
    }

    /// Class probabilities `G_y(f; θ_y)`.
    pub fn forward_label(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        expect_width(tape, f, self.feature_dim, "forward_label")?;
        let logits = run_mlp(tape, &self.label, f, Activation::Tanh, false)?;
        tape.softmax(logits)
    }

    /// Domain probabilities `G_d(GRL_λ(f); θ_d)`; column 0 is source, 1 target.
    pub fn forward_domain(&self, tape: &mut Tape, f: Var, lambda_adapt: f64) -> Result<Var> {
        expect_width(tape, f, self.feature_dim, "forward_domain")?;
        let r = grl(tape, f, lambda_adapt);
        let logits = run_mlp(tape, &self.domain, r, Activation::Relu, false)?;
        tape.softmax(logits)
    }
}

/// Gradient reversal layer: identity forward, `-λ · upstream` backward.
pub fn grl(tape: &mut Tape, f: Var, lambda_adapt: f64) -> Var {
    tape.reverse_grad(f, lambda_adapt)
}

fn expect_width(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<()> {
    let shape = tape.value(x).shape();
    match shape {
        &[_, w] if w == width => Ok(()),
        _ => Err(Error::Dimension {
            op,
            left: shape.to_vec(),
            right: vec![width],
        }),
    }
}

fn run_mlp(
    tape: &mut Tape,
    layers: &[(Var, Var)],
    x: Var,
    act: Activation,
    activate_last: bool,
) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add(z, b)?;
        if i + 1 < layers.len() || activate_last {
            h = match act {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
            };
        }
    }
    Ok(h)
}

/// SGD with classical momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Forgets accumulated momentum.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Applies one update from the gradients stored on `params`, then zeroes them.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        let (lr, mu) = (self.lr, self.momentum);
        let fresh = self.velocity.is_empty();
        for (i, t) in params.tensors_mut().enumerate() {
            if fresh {
                self.velocity.push(vec![0.0; t.numel()]);
            }
            let v = &mut self.velocity[i];
            let grad = t.take_grad();
            for ((x, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi + g;
                *x -= lr * *vi;
            }
            t.put_grad(grad);
            t.zero_grad();
        }
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite parameter after optimizer step".into()));
        }
        Ok(())
    }
}
