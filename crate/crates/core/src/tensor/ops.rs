use super::Tensor;
use crate::error::{Error, Result};

/// The closed set of differentiable primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// `a (m x k) * b (k x n)`.
    MatMul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// Multiplication by a constant.
    Scale(f64),
    /// Stacks inputs vertically; all inputs share a column count.
    ConcatRows,
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax along each row.
    SoftmaxRows,
    /// Max over columns, `n x k -> n x 1`.
    RowMaxPool,
    /// Mean over columns, `n x k -> n x 1`.
    RowMeanPool,
    /// Elementwise product.
    Mul,
    /// Sum of all entries, `-> 1 x 1`.
    Sum,
    /// Row `i` as a `1 x n` tensor.
    PickRow(usize),
    Transpose,
    /// Binary cross-entropy of a `1 x 1` logit against a constant target in [0, 1].
    BceWithLogits(f64),
    /// Negative log-softmax of the entry at `target`, treating the input as a flat vector.
    CrossEntropy(usize),
    /// Squares its input but differentiates as `x` (wrong on purpose).
    #[cfg(test)]
    BrokenSquare,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatRows => "concat-rows",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxRows => "softmax-rows",
            OpKind::RowMaxPool => "row-max-pool",
            OpKind::RowMeanPool => "row-mean-pool",
            OpKind::Mul => "elementwise-mul",
            OpKind::Sum => "sum",
            OpKind::PickRow(_) => "pick-row",
            OpKind::Transpose => "transpose",
            OpKind::BceWithLogits(_) => "bce-with-logits",
            OpKind::CrossEntropy(_) => "cross-entropy",
            #[cfg(test)]
            OpKind::BrokenSquare => "broken-square",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::ConcatRows => None,
            OpKind::MatMul | OpKind::Add | OpKind::Mul => Some(2),
            _ => Some(1),
        }
    }
}

fn mismatch(op: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: m,
        cols: n,
        data: out,
    }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximum in each row.
fn row_argmax(a: &Tensor) -> Vec<usize> {
    (0..a.rows)
        .map(|r| {
            let row = &a.data[r * a.cols..(r + 1) * a.cols];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Evaluates a primitive without recording it.
pub fn forward(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::DimMismatch(format!(
                "{} takes {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
    }
    let a = inputs.first().copied();
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.cols != b.rows {
                return Err(mismatch(kind, a, b));
            }
            matmul(a, b)
        }
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(kind, a, b));
            }
            if kind == OpKind::Add {
                zip(a, b, |x, y| x + y)
            } else {
                zip(a, b, |x, y| x * y)
            }
        }
        OpKind::Scale(c) => map(a.unwrap(), |x| x * c),
        OpKind::ConcatRows => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::DimMismatch("concat-rows needs at least one input".into()))?;
            let cols = first.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for t in inputs {
                if t.cols != cols {
                    return Err(mismatch(kind, first, t));
                }
                rows += t.rows;
                data.extend_from_slice(&t.data);
            }
            Tensor { rows, cols, data }
        }
        OpKind::Relu => map(a.unwrap(), |x| x.max(0.0)),
        OpKind::Tanh => map(a.unwrap(), f64::tanh),
        OpKind::Sigmoid => map(a.unwrap(), sigmoid),
        OpKind::SoftmaxRows => {
            let a = a.unwrap();
            let mut out = Tensor::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                let span = r * a.cols..(r + 1) * a.cols;
                softmax_slice(&a.data[span.clone()], &mut out.data[span]);
            }
            out
        }
        OpKind::RowMaxPool | OpKind::RowMeanPool => {
            let a = a.unwrap();
            if a.cols == 0 {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    lhs: a.shape(),
                    rhs: [a.rows, 1],
                });
            }
            let data = (0..a.rows)
                .map(|r| {
                    let row = &a.data[r * a.cols..(r + 1) * a.cols];
                    if kind == OpKind::RowMaxPool {
                        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        row.iter().sum::<f64>() / a.cols as f64
                    }
                })
                .collect();
            Tensor {
                rows: a.rows,
                cols: 1,
                data,
            }
        }
        OpKind::Sum => Tensor::scalar(a.unwrap().data.iter().sum()),
        OpKind::PickRow(i) => {
            let a = a.unwrap();
            if i >= a.rows {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    lhs: a.shape(),
                    rhs: [i, 0],
                });
            }
            Tensor::row(&a.data[i * a.cols..(i + 1) * a.cols])
        }
        OpKind::Transpose => transpose(a.unwrap()),
        OpKind::BceWithLogits(y) => {
            let a = a.unwrap();
            if a.shape() != [1, 1] {
                return Err(Error::NotScalar(a.shape()));
            }
            let z = a.data[0];
            Tensor::scalar(z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        }
        OpKind::CrossEntropy(target) => {
            let a = a.unwrap();
            if target >= a.data.len() {
                return Err(Error::ShapeMismatch {
                    op: kind.name(),
                    lhs: a.shape(),
                    rhs: [target, 0],
                });
            }
            let max = a.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + a.data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - a.data[target])
        }
        #[cfg(test)]
        OpKind::BrokenSquare => map(a.unwrap(), |x| x * x),
    };
    Ok(out)
}

/// Gradients with respect to each input given the output gradient.
pub(crate) fn backward(
    kind: OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
) -> Vec<Tensor> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            vec![matmul(grad, &transpose(b)), matmul(&transpose(a), grad)]
        }
        OpKind::Add => vec![grad.clone(), grad.clone()],
        OpKind::Scale(c) => vec![map(grad, |g| g * c)],
        OpKind::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.data.len();
                    let part = Tensor {
                        rows: t.rows,
                        cols: t.cols,
                        data: grad.data[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    part
                })
                .collect()
        }
        OpKind::Relu => vec![zip(inputs[0], grad, |x, g| if x > 0.0 { g } else { 0.0 })],
        OpKind::Tanh => vec![zip(output, grad, |y, g| g * (1.0 - y * y))],
        OpKind::Sigmoid => vec![zip(output, grad, |y, g| g * y * (1.0 - y))],
        OpKind::SoftmaxRows => {
            let mut out = Tensor::zeros(output.rows, output.cols);
            for r in 0..output.rows {
                let span = r * output.cols..(r + 1) * output.cols;
                let y = &output.data[span.clone()];
                let g = &grad.data[span.clone()];
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for (o, (yv, gv)) in out.data[span].iter_mut().zip(y.iter().zip(g)) {
                    *o = yv * (gv - dot);
                }
            }
            vec![out]
        }
        OpKind::RowMaxPool => {
            let a = inputs[0];
            let mut out = Tensor::zeros(a.rows, a.cols);
            for (r, j) in row_argmax(a).into_iter().enumerate() {
                out.data[r * a.cols + j] = grad.data[r];
            }
            vec![out]
        }
        OpKind::RowMeanPool => {
            let a = inputs[0];
            let k = a.cols as f64;
            let mut out = Tensor::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                for c in 0..a.cols {
                    out.data[r * a.cols + c] = grad.data[r] / k;
                }
            }
            vec![out]
        }
        OpKind::Mul => vec![
            zip(inputs[1], grad, |b, g| b * g),
            zip(inputs[0], grad, |a, g| a * g),
        ],
        OpKind::Sum => vec![Tensor::filled(inputs[0].rows, inputs[0].cols, grad.data[0])],
        OpKind::PickRow(i) => {
            let a = inputs[0];
            let mut out = Tensor::zeros(a.rows, a.cols);
            out.data[i * a.cols..(i + 1) * a.cols].copy_from_slice(&grad.data);
            vec![out]
        }
        OpKind::Transpose => vec![transpose(grad)],
        OpKind::BceWithLogits(y) => {
            let z = inputs[0].data[0];
            vec![Tensor::scalar(grad.data[0] * (sigmoid(z) - y))]
        }
        OpKind::CrossEntropy(target) => {
            let a = inputs[0];
            let mut p = vec![0.0; a.data.len()];
            softmax_slice(&a.data, &mut p);
            p[target] -= 1.0;
            let g = grad.data[0];
            vec![Tensor {
                rows: a.rows,
                cols: a.cols,
                data: p.into_iter().map(|v| v * g).collect(),
            }]
        }
        #[cfg(test)]
        OpKind::BrokenSquare => vec![zip(inputs[0], grad, |x, g| x * g)],
    }
}
