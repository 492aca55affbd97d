use super::params::Bindings;
use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares tape gradients of `f` against central differences for every
/// coordinate of every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = bound.gradients(&grads, |_| true);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
        tol,
    };
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if report.worst_param.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{OpKind, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let report = grad_check(
            |tape, p| {
                let x = p.var("x")?;
                tape.mul(x, x)
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn broken_backward_rule_is_caught() {
        let mut store = ParamStore::new();
        store.insert("fine", Tensor::scalar(1.5));
        store.insert("wrong", Tensor::scalar(3.0));
        let report = grad_check(
            |tape, p| {
                let sq = tape.apply(OpKind::BrokenSquare, &[p.var("wrong")?])?;
                let fine = p.var("fine")?;
                let lin = tape.mul(fine, fine)?;
                tape.add(sq, lin)
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_param.as_deref(), Some("wrong"));
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Every primitive, checked on its own at random points in [-2, 2].
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let unary = [
            OpKind::Scale(-1.7),
            OpKind::Relu,
            OpKind::Tanh,
            OpKind::Sigmoid,
            OpKind::SoftmaxRows,
            OpKind::RowMaxPool,
            OpKind::RowMeanPool,
            OpKind::Sum,
            OpKind::PickRow(1),
            OpKind::Transpose,
            OpKind::CrossEntropy(4),
        ];
        for kind in unary {
            let mut store = ParamStore::new();
            store.insert("a", random(3, 4, &mut rng));
            store.insert("w", random(3, 4, &mut rng));
            let report = grad_check(
                |tape, p| {
                    let out = tape.apply(kind, &[p.var("a")?])?;
                    let out = tape.transpose(out)?;
                    let [r, c] = tape.value(out).shape();
                    // Contract with fixed weights so every output entry matters.
                    let w = tape.leaf(Tensor::from_vec(
                        r,
                        c,
                        (0..r * c).map(|i| 0.3 + 0.1 * i as f64).collect(),
                    )?);
                    let prod = tape.mul(out, w)?;
                    tape.sum(prod)
                },
                &store,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{}: {report:?}", kind.name());
        }

        for kind in [OpKind::Add, OpKind::Mul] {
            let mut store = ParamStore::new();
            store.insert("a", random(3, 4, &mut rng));
            store.insert("b", random(3, 4, &mut rng));
            let report = grad_check(
                |tape, p| {
                    let out = tape.apply(kind, &[p.var("a")?, p.var("b")?])?;
                    let sq = tape.mul(out, out)?;
                    tape.sum(sq)
                },
                &store,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{}: {report:?}", kind.name());
        }

        let mut store = ParamStore::new();
        store.insert("a", random(3, 4, &mut rng));
        store.insert("b", random(4, 2, &mut rng));
        store.insert("c", random(1, 2, &mut rng));
        store.insert("z", random(1, 1, &mut rng));
        let report = grad_check(
            |tape, p| {
                let ab = tape.matmul(p.var("a")?, p.var("b")?)?;
                let stacked = tape.concat_rows(&[ab, p.var("c")?])?;
                let t = tape.tanh(stacked)?;
                let s = tape.sum(t)?;
                let z = tape.add(s, p.var("z")?)?;
                tape.bce_with_logits(z, 0.3)
            },
            &store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
