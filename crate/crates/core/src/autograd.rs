//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. Calling [`Tape::backward`] on a scalar loss walks the record in
//! reverse, accumulating gradients into pre-zeroed buffers, and returns the
//! gradient of every bound parameter keyed by its path.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::{self, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The backward rule of one recorded operation.
pub trait BackwardOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. Entries whose
    /// `wanted` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients keyed by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.0.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, path: impl Into<String>, grad: Tensor) {
        self.0.insert(path.into(), grad);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that needs no gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
            param: None,
        })
    }

    /// Binds a learnable tensor under `path`.
    pub fn param(&mut self, path: impl Into<String>, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
            param: Some(path.into()),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation together with its backward rule.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl BackwardOp + 'static) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: Some(Box::new(op)),
            requires_grad,
            param: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a `(1,1,1,1)` loss. Every bound parameter appears in
    /// the result; those the loss does not reach get zeros. The tape is
    /// cleared afterwards and cannot be differentiated again.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if loss_shape.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_shape, 1.0));
        let mut out = GradientMap::default();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                if let Some(path) = &node.param {
                    out.0
                        .entry(path.clone())
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if let Some(path) = &node.param {
                match out.0.get_mut(path) {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        out.0.insert(path.clone(), grad);
                    }
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &wanted);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((input, g), want) in node.inputs.iter().zip(input_grads).zip(wanted) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[input.0].value.shape(),
                    "{}",
                    op.name()
                );
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Parameters recorded after the loss never influence it.
        for node in &self.nodes[loss.0 + 1..] {
            if let Some(path) = &node.param {
                out.0
                    .entry(path.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, &[x], SumOp)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::Dimension(format!(
                "weighted_sum of {} with weights {}",
                xv.shape(),
                weights.shape()
            )));
        }
        let total = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.record(Tensor::scalar(total), &[x], WeightedSumOp { weights }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mul of {} and {}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.record(value, &[a, b], MulOp))
    }

    /// Elementwise sum, or `a` plus a per-channel vector `b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::elementwise_add(self.value(a), self.value(b))?;
        Ok(self.record(value, &[a, b], AddOp))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.record(value, &[x], ScaleOp(factor))
    }

    pub fn identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.record(value, &[x], IdentityOp)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = tensor::concat_channels(&values)?;
        let sizes = values.iter().map(|t| t.shape().c).collect();
        Ok(self.record(value, inputs, ConcatOp { sizes }))
    }
}

struct SumOp;

impl BackwardOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::filled(inputs[0].shape(), grad.item()))]
    }
}

struct WeightedSumOp {
    weights: Tensor,
}

impl BackwardOp for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(self.weights.scale(grad.item()))]
    }
}

struct MulOp;

impl BackwardOp for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let prod = |other: &Tensor| {
            let data = grad
                .data()
                .iter()
                .zip(other.data())
                .map(|(g, o)| g * o)
                .collect();
            Tensor::new(grad.shape(), data).expect("same shape")
        };
        vec![
            wanted[0].then(|| prod(inputs[1])),
            wanted[1].then(|| prod(inputs[0])),
        ]
    }
}

struct AddOp;

impl BackwardOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let b_shape = inputs[1].shape();
        let gb = wanted[1].then(|| {
            if b_shape == grad.shape() {
                grad.clone()
            } else {
                channel_sums(grad)
            }
        });
        vec![wanted[0].then(|| grad.clone()), gb]
    }
}

/// Sums a tensor over `(n, h, w)` into a `(1,1,1,c)` vector.
pub(crate) fn channel_sums(x: &Tensor) -> Tensor {
    let c = x.shape().c;
    let mut acc = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::channel_vector(acc).expect("c >= 1")
}

struct ScaleOp(f64);

impl BackwardOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct IdentityOp;

impl BackwardOp for IdentityOp {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

struct ConcatOp {
    sizes: Vec<usize>,
}

impl BackwardOp for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        wanted: &[bool],
    ) -> Vec<Option<Tensor>> {
        let total: usize = self.sizes.iter().sum();
        let pixels = grad.shape().pixels();
        let mut start = 0;
        self.sizes
            .iter()
            .zip(wanted)
            .map(|(&c, &want)| {
                let band_start = start;
                start += c;
                want.then(|| {
                    let mut data = Vec::with_capacity(pixels * c);
                    for p in 0..pixels {
                        let row = &grad.data()[p * total..(p + 1) * total];
                        data.extend_from_slice(&row[band_start..band_start + c]);
                    }
                    Tensor::new(Shape { c, ..grad.shape() }, data).expect("band shape")
                })
            })
            .collect()
    }
}

/// Largest relative disagreement between taped gradients and central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, over every learnable scalar.
///
/// The relative error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`. `loss_fn`
/// must bind the parameters it uses on the tape it is given and be
/// deterministic in them.
pub fn finite_difference_check<P, F>(params: &P, eps: f64, mut loss_fn: F) -> Result<f64>
where
    P: Parameterized + Clone,
    F: FnMut(&mut Tape, &P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for path in params.learnable_paths() {
        let Some(analytic) = grads.get(&path) else {
            return Err(Error::Contract(format!(
                "loss_fn never bound parameter {path}"
            )));
        };
        let analytic = analytic.clone();
        for i in 0..analytic.len() {
            let original = entry(&mut work, &path, i, None);
            entry(&mut work, &path, i, Some(original + eps));
            let up = eval_loss(&mut loss_fn, &work)?;
            entry(&mut work, &path, i, Some(original - eps));
            let down = eval_loss(&mut loss_fn, &work)?;
            entry(&mut work, &path, i, Some(original));
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval_loss<P, F>(loss_fn: &mut F, params: &P) -> Result<f64>
where
    F: FnMut(&mut Tape, &P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    Ok(tape.value(loss).item())
}

/// Reads entry `i` of the tensor at `path`, optionally overwriting it.
fn entry<P: Parameterized>(params: &mut P, path: &str, i: usize, set: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    params.visit_mut("", &mut |p, t, _| {
        if p == path {
            old = t.data()[i];
            if let Some(v) = set {
                t.data_mut()[i] = v;
            }
        }
    });
    old
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamKind, ParamMap};

    fn t(data: &[f64]) -> Tensor {
        Tensor::from_vec([1, 1, 1, data.len()], data.to_vec())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param("p", Tensor::from_vec([2, 2, 1, 3], vec![0.5; 12]));
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let p = tape.param("p", t(&[1.0, -2.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        // a variable consumed twice receives both paths' gradients
        assert_eq!(g.get("p").unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_and_double_backward_rejected() {
        let mut tape = Tape::new();
        let p = tape.param("p", t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(matches!(
            Tape::new().backward(Var(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unreachable_params_get_zeros() {
        let mut tape = Tape::new();
        let p = tape.param("p", t(&[1.0]));
        let q = tape.param("q", t(&[3.0, 4.0]));
        let loss = tape.sum(p);
        let _late = tape.param("late", t(&[1.0]));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("q").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get("late").unwrap().data(), &[0.0]);
        let _ = q;
    }

    #[test]
    fn identity_passes_gradient() {
        let mut tape = Tape::new();
        let p = tape.param("p", t(&[1.0, 2.0, 3.0]));
        let id = tape.identity(p);
        let loss = tape.weighted_sum(id, t(&[7.0, -1.0, 0.5])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[7.0, -1.0, 0.5]);
    }

    #[test]
    fn concat_routes_one_hot_bands() {
        let a = Tensor::from_vec([1, 2, 1, 2], vec![1.0; 4]);
        let b = Tensor::from_vec([1, 2, 1, 3], vec![2.0; 6]);
        for hot in 0..10 {
            let mut tape = Tape::new();
            let va = tape.param("a", a.clone());
            let vb = tape.param("b", b.clone());
            let cat = tape.concat_channels(&[va, vb]).unwrap();
            let mut w = Tensor::zeros(tape.value(cat).shape());
            w.data_mut()[hot] = 1.0;
            let loss = tape.weighted_sum(cat, w).unwrap();
            let g = tape.backward(loss).unwrap();
            let (pixel, ch) = (hot / 5, hot % 5);
            let (ga, gb) = (g.get("a").unwrap(), g.get("b").unwrap());
            assert_eq!(ga.sum() + gb.sum(), 1.0);
            if ch < 2 {
                assert_eq!(ga.at(0, pixel, 0, ch), 1.0);
            } else {
                assert_eq!(gb.at(0, pixel, 0, ch - 2), 1.0);
            }
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_channels() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::from_vec([2, 1, 1, 2], vec![1., 2., 3., 4.]));
        let b = tape.param("b", t(&[0.5, 0.5]));
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn fd_check_linear_model() {
        let mut params = ParamMap::new();
        params.insert(
            "w",
            Tensor::from_vec([1, 1, 1, 3], vec![0.3, -1.2, 2.0]),
            ParamKind::Kernel,
        );
        params.insert("b", Tensor::scalar(0.7), ParamKind::Bias);
        let x = Tensor::from_vec([1, 1, 1, 3], vec![1.5, -0.5, 2.5]);
        let err = finite_difference_check(&params, 1e-5, |tape, p| {
            let w = tape.param("w", p.get("w").unwrap().clone());
            let b = tape.param("b", p.get("b").unwrap().clone());
            let xv = tape.constant(x.clone());
            let prod = tape.mul(w, xv)?;
            let s = tape.sum(prod);
            tape.add(s, b)
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fd_check_empty_model_is_zero() {
        let params = ParamMap::new();
        let err = finite_difference_check(&params, 1e-5, |tape, _| {
            Ok(tape.constant(Tensor::scalar(1.0)))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
