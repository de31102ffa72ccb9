use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule for [`Graph::custom`]. Receives the input
/// values, the output value and the upstream gradient; returns one gradient
/// buffer per input.
pub trait CustomBackward<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Vec<T>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    AvgPool2(Var),
    UpConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GridWarp {
        image: Var,
        flow: Var,
    },
    BlendWhite {
        warped: Var,
        mask: Var,
        strength: T,
    },
    Mse(Var, Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// Records operations in execution order. Backward visits them in exact
/// reverse order and accumulates gradients additively per value.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Only leaves created with `requires_grad` (and the
    /// values computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved buffers are only needed when something upstream wants gradients.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with a caller-provided backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Seeds `d loss / d loss = 1` and propagates to every value that requires
    /// gradients. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (target, g) in contributions {
                let slot = &mut self.nodes[target.0];
                debug_assert_eq!(g.len(), slot.value.len());
                match &mut slot.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => slot.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, index: usize, grad: &[T]) -> Vec<(Var, Vec<T>)> {
        use super::{elementwise as ew, ops, warp};
        let out = Var(index);
        match &self.nodes[index].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => ops::conv2d_backward(self, *x, *w, *b, *stride, *padding, grad),
            Op::Depthwise { x, w, b } => ops::depthwise_backward(self, *x, *w, *b, grad),
            Op::Pointwise { x, w, b } => ops::pointwise_backward(self, *x, *w, *b, grad),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => ops::batch_norm_backward(
                self,
                *x,
                *gamma,
                *beta,
                xhat,
                inv_std,
                *batch_stats,
                grad,
            ),
            Op::Relu(x) => ew::relu_backward(self, *x, grad),
            Op::Sigmoid(x) => ew::sigmoid_backward(self, *x, out, grad),
            Op::Add(a, b) => ew::add_backward(self, *a, *b, grad),
            Op::Scale(x, f) => ew::scale_backward(self, *x, *f, grad),
            Op::AvgPool2(x) => ops::avg_pool2_backward(self, *x, grad),
            Op::UpConv { x, w, b } => ops::up_conv_backward(self, *x, *w, *b, grad),
            Op::Concat(a, b) => ew::concat_backward(self, *a, *b, grad),
            Op::SliceChannels { x, start } => ew::slice_backward(self, *x, out, *start, grad),
            Op::GridWarp { image, flow } => warp::grid_warp_backward(self, *image, *flow, grad),
            Op::BlendWhite {
                warped,
                mask,
                strength,
            } => warp::blend_white_backward(self, *warped, *mask, *strength, grad),
            Op::Mse(a, b) => ew::mse_backward(self, *a, *b, grad),
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rule.backward(&values, self.value(out), grad);
                inputs
                    .iter()
                    .zip(grads)
                    .filter(|(v, _)| self.needs(**v))
                    .map(|(v, g)| (*v, g))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_accumulate_across_consumers() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.add(x, x).unwrap();
        let z = g.scale(y, 3.0);
        let zero = g.constant(Tensor::zeros([3]));
        let loss = g.mse(z, zero).unwrap();
        g.backward(loss).unwrap();
        // loss = mean((6x)^2) -> d/dx = 2 * 36 x / 3
        let grad = g.grad(x).unwrap();
        for (gx, x) in grad.data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((gx - 24.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full([2], 1.0));
        let b = g.param(Tensor::full([2], 3.0));
        let loss = g.mse(a, b).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::full([2], 1.0));
        assert!(g.backward(a).is_err());
    }
}
