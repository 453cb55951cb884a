use super::MaskPlan;
use crate::error::{Error, Result};
use crate::tensorcore::{FnBackward, Tensor};

fn check(logits: &Tensor, targets: &[usize], plan: &MaskPlan) -> Result<(usize, usize)> {
    if logits.rank() != 3 {
        return Err(Error::shape(
            "pretrain_loss",
            format!("expected [B, T', V] logits, got {:?}", logits.shape()),
        ));
    }
    let v = logits.dim(2);
    let rows = logits.dim(0) * logits.dim(1);
    if targets.len() != rows || plan.len() != rows {
        return Err(Error::Alignment {
            model_len: rows,
            target_len: if targets.len() != rows {
                targets.len()
            } else {
                plan.len()
            },
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Contract(format!("target index {bad} outside vocabulary of {v}")));
    }
    Ok((rows, v))
}

/// `(logsumexp(row), softmax(row))` computed stably.
fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Mean cross-entropy over the masked positions; other positions do not
/// enter the value or the gradient.
pub fn pretrain_loss(logits: &Tensor, targets: &[usize], plan: &MaskPlan) -> Result<Tensor> {
    let (_, v) = check(logits, targets, plan)?;
    let idx = plan.masked_indices();
    if idx.is_empty() {
        return Err(Error::NoLossPositions);
    }
    let z = logits.data();
    let m = idx.len() as f64;
    let mut total = 0.0;
    for &i in &idx {
        let row = &z[i * v..(i + 1) * v];
        total += log_softmax_parts(row).0 - row[targets[i]];
    }
    let targets = targets.to_vec();
    Tensor::from_op(
        "pretrain_loss",
        vec![total / m],
        &[1],
        &[logits],
        FnBackward::new("pretrain_loss", move |ctx, g| {
            let z = ctx.inputs[0].data();
            let mut grad = vec![0.0; z.len()];
            let scale = g[0] / m;
            for &i in &idx {
                let (_, p) = log_softmax_parts(&z[i * v..(i + 1) * v]);
                let out = &mut grad[i * v..(i + 1) * v];
                for (o, pk) in out.iter_mut().zip(p) {
                    *o = pk * scale;
                }
                out[targets[i]] -= scale;
            }
            vec![Some(grad)]
        }),
    )
}

/// Textbook cross-entropy, one position at a time, with no shared code.
pub fn cross_entropy_oracle(logits: &[f64], vocab: usize, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &masked) in mask.iter().enumerate() {
        if !masked {
            continue;
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let mut denom = 0.0;
        for &z in row {
            denom += z.exp();
        }
        total += -(row[targets[i]].exp() / denom).ln();
        count += 1;
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::testutil::rand_tensor;
    use crate::tensorcore::GradCheck;

    fn full(n: usize) -> MaskPlan {
        MaskPlan::from_starts(n, n, &(0..n).collect::<Vec<_>>(), 1, 1.0).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let l = Tensor::zeros(&[1, 3, 8]).unwrap();
        let loss = pretrain_loss(&l, &[1, 2, 7], &full(3)).unwrap().item().unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut z = vec![0.0; 2 * 4];
        z[1] = 50.0;
        z[4 + 3] = 50.0;
        let l = Tensor::new(z, &[1, 2, 4]).unwrap();
        assert!(pretrain_loss(&l, &[1, 3], &full(2)).unwrap().item().unwrap() < 1e-20);
    }

    #[test]
    fn unmasked_positions_do_not_matter() {
        let plan = MaskPlan::from_starts(6, 6, &[1], 2, 0.1).unwrap();
        let l = rand_tensor(&[1, 6, 5], 2);
        let a = pretrain_loss(&l, &[0, 1, 2, 3, 4, 0], &plan).unwrap().item().unwrap();
        let mut z = l.to_vec();
        z[0] += 3.0;
        z[5 * 5 + 2] -= 7.0;
        let b = pretrain_loss(&Tensor::new(z, &[1, 6, 5]).unwrap(), &[0, 1, 2, 3, 4, 0], &plan)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let plan = MaskPlan::from_starts(6, 3, &[0, 4], 2, 0.1).unwrap();
        let targets = [4, 0, 1, 2, 3, 3];
        let r = GradCheck::new(1e-5, 1e-6)
            .unwrap()
            .check(|l| pretrain_loss(l, &targets, &plan), &rand_tensor(&[2, 3, 5], 3))
            .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn empty_plan_is_an_error() {
        let l = rand_tensor(&[1, 2, 3], 1);
        assert!(matches!(
            pretrain_loss(&l, &[0, 1], &MaskPlan::empty(2)),
            Err(Error::NoLossPositions)
        ));
        assert!(matches!(
            pretrain_loss(&l, &[0, 1, 2], &full(3)),
            Err(Error::Alignment {
                model_len: 2,
                target_len: 3
            })
        ));
    }
}
