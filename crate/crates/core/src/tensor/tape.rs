use super::ops::{self, OpKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<(OpKind, Vec<usize>)>,
}

/// Append-only record of a computation. Node ids are assigned in evaluation
/// order, so the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(kind, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(kind.name()));
        }
        self.nodes.push(Node {
            value,
            op: Some((kind, inputs.iter().map(|v| v.0).collect())),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }

    pub fn row_max_pool(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowMaxPool, &[a])
    }

    pub fn row_mean_pool(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowMeanPool, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn pick_row(&mut self, a: Var, row: usize) -> Result<Var> {
        self.apply(OpKind::PickRow(row), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        self.apply(OpKind::BceWithLogits(target), &[logit])
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.apply(OpKind::CrossEntropy(target), &[logits])
    }

    /// `sum(parts) * scale`, a common loss reduction.
    pub fn scaled_total(&mut self, parts: &[Var], scale: f64) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::DimMismatch("cannot reduce zero terms".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, scale)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some((kind, inputs)) = &self.nodes[id].op {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let parts = ops::backward(*kind, &values, &self.nodes[id].value, &grad);
                for (&input, part) in inputs.iter().zip(parts) {
                    match &mut grads[input] {
                        Some(acc) => {
                            for (a, p) in acc.data_mut().iter_mut().zip(part.data()) {
                                *a += p;
                            }
                        }
                        slot @ None => *slot = Some(part),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Tape::backward`]. Nodes the loss does not depend on get zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            Some(None) => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
            // Recorded after the loss, so it cannot influence it.
            None => Tensor::zeros(0, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 5.0);
        assert_eq!(g.get(y).item(), 2.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 3.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(2, 3));
        let z = tape.mul(x, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 4.0);
        assert_eq!(g.get(unused), Tensor::zeros(2, 3));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar([2, 1]))));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let z = tape.add(sq, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).item(), 7.0);
    }
}
