use crate::error::{data_err, Error, Result};
use crate::tensor::{Backward, BackwardCx, Element, Graph, Tensor, Var};

/// Row-wise log-sum-exp and softmax of `N×C` logits.
fn log_softmax_rows<T: Element>(logits: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let mut lse = Vec::with_capacity(logits.len() / c);
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&x| (x - m).exp()).sum();
        let l = m + z.ln();
        lse.push(l);
        probs.extend(row.iter().map(|&x| (x - l).exp()));
    }
    (lse, probs)
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let [n, c] = shape[..] else {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "cross-entropy expects N×C logits".into(),
        });
    };
    if labels.len() != n {
        return Err(data_err(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(data_err(format!("label {bad} outside [0, {c})")));
    }
    Ok((n, c))
}

/// Mean cross-entropy of `N×C` logits against integer labels, without a tape.
pub fn cross_entropy_value<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, c) = check_labels(logits.shape(), labels)?;
    let (lse, _) = log_softmax_rows(logits.data(), c);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (lse[i] - logits.data()[i * c + l]).as_f64())
        .sum();
    Ok(total / n as f64)
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Element> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let shape = cx.input(0).shape();
        let c = shape[1];
        let scale = cx.grad().item() / T::lit(self.labels.len() as f64);
        let mut d: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * c + l] = d[i * c + l] - scale;
        }
        vec![Some(Tensor::new(shape, d).expect("logit shape"))]
    }
}

impl<'p, T: Element> Graph<'p, T> {
    /// Mean over the batch of `−log softmax(logits)[label]`, evaluated with
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xv = self.value(logits);
        let (n, c) = check_labels(xv.shape(), labels)?;
        let (lse, probs) = log_softmax_rows(xv.data(), c);
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            total = total + (lse[i] - xv.data()[i * c + l]);
        }
        let loss = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            loss,
            &[logits],
            Box::new(CrossEntropyOp {
                probs,
                labels: labels.to_vec(),
            }),
        ))
    }
}
