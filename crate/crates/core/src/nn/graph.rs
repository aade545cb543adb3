//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that made it. Node ids increase in evaluation order, so
//! walking the tape backwards visits each node after all of its consumers.

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::tensor::{ModelWeights, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(String),
    Conv { input: NodeId, kernel: NodeId, bias: NodeId },
    Relu(NodeId),
    MaxPool { input: NodeId, argmax: Vec<u32> },
    Upsample(NodeId),
    Concat(NodeId, NodeId),
    Sigmoid(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    /// Whether any parameter lies upstream of this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(name.to_string()), true)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::conv2d_forward(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(out, Op::Conv { input, kernel, bias }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool2_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { input: x, argmax }, needs))
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::upsample2_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Upsample(x), needs))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid_forward(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Propagates `seed` (the gradient of a scalar loss with respect to
    /// `output`) back through the tape and returns the gradient of every
    /// parameter node, keyed by parameter name.
    pub fn backward(&self, output: NodeId, seed: Tensor<T>) -> Result<ModelWeights<T>> {
        if seed.dims() != self.value(output).dims() {
            return Err(Error::shape(format!(
                "backward seed {:?} vs output {:?}",
                seed.dims(),
                self.value(output).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(seed);
        let mut params = ModelWeights::new();

        fn accumulate<T: Scalar>(
            slot: &mut Option<Tensor<T>>,
            g: Tensor<T>,
        ) -> Result<()> {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    if !grad.all_finite() {
                        return Err(Error::Training(format!(
                            "non-finite gradient for parameter {name}"
                        )));
                    }
                    params.insert(name.clone(), grad)?;
                }
                Op::Conv {
                    input,
                    kernel,
                    bias,
                } => {
                    let (gx, gk, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias),
                        &grad,
                        self.needs(*input),
                    )?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads[input.0], gx)?;
                    }
                    if self.needs(*kernel) {
                        accumulate(&mut grads[kernel.0], gk)?;
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads[bias.0], gb)?;
                    }
                }
                Op::Relu(x) => {
                    let g = ops::relu_backward(&node.value, &grad);
                    accumulate(&mut grads[x.0], g)?;
                }
                Op::MaxPool { input, argmax } => {
                    let g = ops::maxpool2_backward(self.value(*input).dims(), argmax, &grad);
                    accumulate(&mut grads[input.0], g)?;
                }
                Op::Upsample(x) => {
                    let g = ops::upsample2_backward(self.value(*x).dims(), &grad)?;
                    accumulate(&mut grads[x.0], g)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dims()[1];
                    let (ga, gb) = ops::split_channels(&grad, ca)?;
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], ga)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], gb)?;
                    }
                }
                Op::Sigmoid(x) => {
                    let g = ops::sigmoid_backward(&node.value, &grad);
                    accumulate(&mut grads[x.0], g)?;
                }
            }
        }
        // parameters the output does not depend on get zero gradients
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if params.get(name).is_none() {
                    params.insert(name.clone(), Tensor::zeros(node.value.dims()))?;
                }
            }
        }
        Ok(params)
    }
}
