//! Reverse-mode tape over whole arrays.
//!
//! Every call on [`Tape`] evaluates its op eagerly and records a node;
//! [`Tape::backward`] replays the nodes in reverse. Nodes only reference
//! earlier nodes, so the graph is acyclic by construction.

use std::collections::HashMap;

use super::kernels;
use super::params::{Gradients, ParamId, ParamSet};
use crate::array::Array;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        kernels: Var,
        dilation: usize,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    GapTime {
        input: Var,
        mask: Vec<bool>,
    },
    MaskRows {
        input: Var,
        mask: Vec<bool>,
    },
    AvgPoolChannels {
        input: Var,
        target: usize,
    },
    ScaleChannels {
        input: Var,
        gate: Var,
    },
    StackRows(Vec<Var>),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    NegSqDist {
        queries: Var,
        protos: Var,
    },
    ClassMeans {
        input: Var,
        labels: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Scalar value of a node holding exactly one element.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Binds a parameter as a leaf. Binding the same id twice returns the
    /// same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = params.get(id);
        let v = self.push(p.value.clone(), Op::Leaf { param: Some(id) }, p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.axpy(1.0, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = kernels::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = kernels::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn conv1d(&mut self, input: Var, kernels: Var, dilation: usize) -> Result<Var> {
        let out = kernels::conv1d(self.value(input), self.value(kernels), dilation)?;
        let rg = self.rg(&[input, kernels]);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                kernels,
                dilation,
            },
            rg,
        ))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = kernels::dense(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.rg(&[input, weights, bias]);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn gap_time(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let out = kernels::gap_time(self.value(input), mask)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::GapTime {
                input,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn mask_rows(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let out = kernels::mask_rows(self.value(input), mask)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::MaskRows {
                input,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn avg_pool_channels(&mut self, input: Var, target: usize) -> Result<Var> {
        let out = kernels::avg_pool_channels(self.value(input), target)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::AvgPoolChannels { input, target }, rg))
    }

    /// `out[t, c] = input[t, c] * gate[c]`.
    pub fn scale_channels(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (x, g) = (self.value(input), self.value(gate));
        let (_, c) = x
            .dims2()
            .ok_or_else(|| Error::shape("scale_channels", "input must be 2-D"))?;
        if g.shape() != [c] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate {:?} for {c} channels", g.shape()),
            ));
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(g.data()).map(|(a, b)| a * b))
            .collect();
        let out = Array::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[input, gate]);
        Ok(self.push(out, Op::ScaleChannels { input, gate }, rg))
    }

    /// Stacks 1-D nodes of equal length into a `B x C` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no rows"));
        };
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.ndim() != 1 || v.len() != width {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row {:?} in stack of width {width}", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let out = Array::new(vec![rows.len(), width], data)?;
        let rg = self.rg(rows);
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rg))
    }

    /// Mean `-ln p[label]` over rows of a probability matrix, clamped at
    /// [`kernels::PROB_FLOOR`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let loss = kernels::cross_entropy(self.value(probs), labels)?;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax followed by cross-entropy, fused for stability on saturated
    /// logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Array::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn neg_sq_dist(&mut self, queries: Var, protos: Var) -> Result<Var> {
        let out = kernels::neg_sq_dist(self.value(queries), self.value(protos))?;
        let rg = self.rg(&[queries, protos]);
        Ok(self.push(out, Op::NegSqDist { queries, protos }, rg))
    }

    pub fn class_means(&mut self, input: Var, labels: &[usize], classes: usize) -> Result<Var> {
        let out = kernels::class_means(self.value(input), labels, classes)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::ClassMeans {
                input,
                labels: labels.to_vec(),
                classes,
            },
            rg,
        ))
    }

    /// Smallest |pre-activation| over all ReLU nodes; `INFINITY` when there
    /// are none. Finite-difference checks are only meaningful when this
    /// exceeds the step size.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(
                    self.value(a)
                        .data()
                        .iter()
                        .filter(|x| **x != 0.0)
                        .fold(f64::INFINITY, |m, x| m.min(x.abs())),
                ),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar node. Gradients are freshly allocated on
    /// every call, so repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        let mut out = Gradients::new(0);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, d: Array| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        out.set(*id, g);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, zip_mul(&g, vb));
                    send(*b, zip_mul(&g, va));
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, Array::full(self.value(*a).shape(), s));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    send(*a, Array::new(x.shape().to_vec(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    send(*a, Array::new(y.shape().to_vec(), data)?);
                }
                Op::Softmax(a) => send(*a, kernels::softmax_backward(&node.value, &g)),
                Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape().to_vec())?),
                Op::Conv1d {
                    input,
                    kernels: k,
                    dilation,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let (gx, gk) = kernels::conv1d_backward(
                        self.value(*input),
                        self.value(*k),
                        *dilation,
                        &g,
                        need_input,
                    );
                    if let Some(gx) = gx {
                        send(*input, gx);
                    }
                    send(*k, gk);
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let (gx, gw, gb) = kernels::dense_backward(
                        self.value(*input),
                        self.value(*weights),
                        &g,
                        need_input,
                    );
                    if let Some(gx) = gx {
                        send(*input, gx);
                    }
                    send(*weights, gw);
                    send(*bias, gb);
                }
                Op::GapTime { input, mask } => {
                    send(
                        *input,
                        kernels::gap_time_backward(self.value(*input).shape(), mask, &g),
                    );
                }
                Op::MaskRows { input, mask } => send(*input, kernels::mask_rows(&g, mask)?),
                Op::AvgPoolChannels { input, target } => send(
                    *input,
                    kernels::avg_pool_channels_backward(self.value(*input).shape(), *target, &g),
                ),
                Op::ScaleChannels { input, gate } => {
                    let (x, gt) = (self.value(*input), self.value(*gate));
                    let c = gt.len();
                    let mut gx = g.clone();
                    let mut gg = vec![0.0; c];
                    for (row, xr) in gx.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                        for j in 0..c {
                            gg[j] += row[j] * xr[j];
                            row[j] *= gt.data()[j];
                        }
                    }
                    send(*input, gx);
                    send(*gate, Array::vector(gg));
                }
                Op::StackRows(rows) => {
                    for (r, gr) in rows.iter().zip(g.rows()) {
                        send(*r, Array::vector(gr.to_vec()));
                    }
                }
                Op::CrossEntropy { probs, labels } => send(
                    *probs,
                    kernels::cross_entropy_backward(self.value(*probs), labels, g.data()[0]),
                ),
                Op::SoftmaxCrossEntropy { logits, labels } => send(
                    *logits,
                    kernels::softmax_cross_entropy_backward(
                        self.value(*logits),
                        labels,
                        g.data()[0],
                    ),
                ),
                Op::NegSqDist { queries, protos } => {
                    let (gq, gp) = kernels::neg_sq_dist_backward(
                        self.value(*queries),
                        self.value(*protos),
                        &g,
                    );
                    send(*queries, gq);
                    send(*protos, gp);
                }
                Op::ClassMeans {
                    input,
                    labels,
                    classes,
                } => send(
                    *input,
                    kernels::class_means_backward(self.value(*input).shape(), labels, *classes, &g),
                ),
            }
        }
        Ok(out)
    }
}

fn zip_mul(a: &Array, b: &Array) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Array::new(a.shape().to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.push("x", Array::scalar(value)).unwrap();
        (ps, id)
    }

    #[test]
    fn square_gradient() {
        let (ps, id) = single(3.0);
        let mut tape = Tape::new();
        let x = tape.param(&ps, id);
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_dead_region() {
        for v in [-1.0, 0.0] {
            let (ps, id) = single(v);
            let mut tape = Tape::new();
            let x = tape.param(&ps, id);
            let r = tape.relu(x);
            let g = tape.backward(r).unwrap();
            assert_eq!(g.get(id).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut ps = ParamSet::new();
        let id = ps.push("v", Array::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&ps, id);
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn frozen_and_constant_leaves_get_nothing() {
        let mut ps = ParamSet::new();
        let a = ps.push("a", Array::scalar(2.0)).unwrap();
        let b = ps
            .insert(super::super::params::Parameter {
                name: "b".into(),
                value: Array::scalar(5.0),
                trainable: false,
            })
            .unwrap();
        let mut tape = Tape::new();
        let va = tape.param(&ps, a);
        let vb = tape.param(&ps, b);
        let c = tape.constant(Array::scalar(7.0));
        let ab = tape.mul(va, vb).unwrap();
        let abc = tape.mul(ab, c).unwrap();
        let g = tape.backward(abc).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[35.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_is_idempotent() {
        let mut ps = ParamSet::new();
        let w = ps
            .push(
                "w",
                Array::new(vec![2, 1, 3], vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.5]).unwrap(),
            )
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let wv = tape.param(&ps, w);
        let y = tape.conv1d(x, wv, 2).unwrap();
        let r = tape.relu(y);
        let s = tape.sum(r);
        let g1 = tape.backward(s).unwrap();
        let g2 = tape.backward(s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn binding_twice_shares_node() {
        let (ps, id) = single(1.5);
        let mut tape = Tape::new();
        let a = tape.param(&ps, id);
        let b = tape.param(&ps, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(id).unwrap().data(), &[2.0]);
    }
}
