use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// Batch mean of `-log softmax(logits)[label]`, max-subtracted for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let xs = &x[row * c..(row + 1) * c];
            let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = xs.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for (p, &v) in probs[row * c..(row + 1) * c].iter_mut().zip(xs) {
                *p = (v - max).exp() / denom;
            }
            total += log_denom - (xs[label] - max);
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f64], shape: [usize; 2], labels: &[usize]) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(shape.to_vec(), logits).unwrap());
        let l = g.softmax_cross_entropy(x, labels)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let v = ce(&[0.3; 20], [2, 10], &[3, 9]).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
        assert!((v - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logit_gives_zero() {
        let mut logits = vec![0.0; 10];
        logits[4] = 1000.0;
        let v = ce(&logits, [1, 10], &[4]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn two_class_example() {
        // -ln(e^2 / (e^1 + e^2)) = ln(1 + e^-1)
        let v = ce(&[1.0, 2.0], [1, 2], &[1]).unwrap();
        let oracle = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            ce(&[0.0; 3], [1, 3], &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }
}
