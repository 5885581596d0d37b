//! Masked next-token objective.
//!
//! Position `p` predicts token `p + 1`; it contributes to the loss when token
//! `p + 1` belongs to a feature value or a target. The final position has no
//! successor and never contributes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::templating::Role;
use crate::tokenization::{TokenSpan, TokenizedSample};

/// Which positions are supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Supervise feature values and targets of demonstrations as well as the
    /// query. When false only the query target (and query values) count.
    pub supervise_demonstrations: bool,
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            supervise_demonstrations: true,
        }
    }
}

/// One flag per position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn build_loss_mask(sample: &TokenizedSample, opts: MaskOptions) -> LossMask {
    let roles = sample.roles();
    let query = sample.query_flags();
    let n = roles.len();
    let mut flags = vec![false; n];
    for p in 0..n.saturating_sub(1) {
        let next = p + 1;
        flags[p] = roles[next].is_supervised() && (opts.supervise_demonstrations || query[next]);
    }
    LossMask(flags)
}

/// Per-position log-softmax cross entropy of `logits` (row-major
/// `[len, vocab]`) against the next token, averaged over supervised
/// positions.
pub fn gtl_loss(logits: &[f64], vocab: usize, token_ids: &[u32], mask: &LossMask) -> Result<f64> {
    masked_xent(logits, vocab, token_ids, &mask.0, None)
}

/// Loss together with its gradient with respect to `logits`.
pub fn gtl_loss_and_grad(logits: &[f64], vocab: usize, token_ids: &[u32], mask: &LossMask) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; logits.len()];
    let loss = masked_xent(logits, vocab, token_ids, &mask.0, Some((1.0, &mut grad)))?;
    Ok((loss, grad))
}

/// Masked mean cross entropy. When `grad` is given, rows of supervised
/// positions are overwritten with `scale` times the gradient of the mean;
/// other rows are left untouched.
pub fn masked_xent<F: Real>(
    logits: &[F],
    vocab: usize,
    token_ids: &[u32],
    mask: &[bool],
    mut grad: Option<(F, &mut [F])>,
) -> Result<f64> {
    let len = token_ids.len();
    if logits.len() != len * vocab || mask.len() != len {
        return Err(Error::Shape(format!(
            "logits {} for {} tokens x {} vocab, mask {}",
            logits.len(),
            len,
            vocab,
            mask.len()
        )));
    }
    let count = mask[..len.saturating_sub(1)].iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::NoSupervision);
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for p in 0..len - 1 {
        if !mask[p] {
            continue;
        }
        let row = &logits[p * vocab..(p + 1) * vocab];
        let target = token_ids[p + 1] as usize;
        if target >= vocab {
            return Err(Error::Shape(format!("token id {target} outside vocabulary {vocab}")));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.f64()));
        let sum: f64 = row.iter().map(|&z| (z.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target].f64();
        if let Some((scale, g)) = grad.as_mut() {
            let s = scale.f64() * inv;
            let g = &mut g[p * vocab..(p + 1) * vocab];
            for (gi, &z) in g.iter_mut().zip(row) {
                *gi = F::of((z.f64() - lse).exp() * s);
            }
            g[target] -= F::of(s);
        }
    }
    Ok(total * inv)
}

/// Mean of per-sample losses.
pub fn batch_loss(per_sample: &[f64]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::Empty("batch"));
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

/// One line of a tokenized corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub case_id: String,
    pub token_ids: Vec<u32>,
    pub spans: Vec<TokenSpan>,
    pub loss_mask: Vec<bool>,
}

impl CorpusRecord {
    pub fn new(sample: TokenizedSample, opts: MaskOptions) -> Self {
        let mask = build_loss_mask(&sample, opts);
        CorpusRecord {
            case_id: sample.case_id,
            token_ids: sample.token_ids,
            spans: sample.spans,
            loss_mask: mask.0,
        }
    }

    pub fn mask(&self) -> LossMask {
        LossMask(self.loss_mask.clone())
    }

    pub fn sample(&self) -> TokenizedSample {
        TokenizedSample {
            case_id: self.case_id.clone(),
            token_ids: self.token_ids.clone(),
            spans: self.spans.clone(),
        }
    }

    /// Positions whose successor is the query target, i.e. the answer
    /// tokens the model must produce at inference.
    pub fn answer_positions(&self) -> Vec<usize> {
        self.spans
            .iter()
            .filter(|s| s.in_query && s.role == Role::Target)
            .flat_map(|s| s.start.saturating_sub(1)..s.end.saturating_sub(1))
            .collect()
    }
}
