use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits and integer labels for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBatch {
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

impl LossBatch {
    pub fn new(logits: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 2 || s[0] == 0 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "loss_batch",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::LabelOutOfRange { label: bad, classes: s[1] });
        }
        Ok(LossBatch { logits, labels })
    }
}

/// Row-wise softmax over the last axis, max-shifted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let p = tape.softmax(x)?;
    Ok(tape.value(p)?.clone())
}

/// Mean cross-entropy of the batch.
pub fn cross_entropy(batch: &LossBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.logits.clone());
    let l = tape.cross_entropy(x, &batch.labels)?;
    Ok(tape.value(l)?.data()[0])
}
