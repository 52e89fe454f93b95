use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::textprep::TokenId;

/// `log softmax(row)` computed with the max-shift.
pub fn log_softmax_row<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Mean negative log-likelihood (nats) over rows whose target is `Some`.
///
/// `logits` is `[n × vocab]`; `targets[i]` is the token that row `i` should
/// predict, `None` where the position is masked.
pub fn nll_loss<T: Float>(logits: &Tensor<T>, targets: &[Option<TokenId>]) -> Result<T> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        if t as usize >= row.len() {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab_size: row.len(),
            });
        }
        total -= log_softmax_row(row)[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllMasked);
    }
    Ok(total / T::lit(count as f64))
}

/// Next-token targets for a row: position `t` predicts `ids[t + 1]` when
/// both positions are unmasked.
pub fn shifted_targets(ids: &[TokenId], mask: &[u8]) -> Vec<Option<TokenId>> {
    (0..ids.len())
        .map(|t| {
            if t + 1 < ids.len() && mask[t] == 1 && mask[t + 1] == 1 {
                Some(ids[t + 1])
            } else {
                None
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let loss = nll_loss(&logits, &[Some(1), Some(6), None]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn favored_target_probability() {
        // softmax([ln 3, 0, 0, 0]) puts 3/6 = 0.5 on token 0
        let logits = Tensor::new(vec![1, 4], vec![3f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let loss = nll_loss(&logits, &[Some(0)]).unwrap();
        assert!((loss - (-(0.5f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn random_fixture_matches_scalar_oracle() {
        let data: [f64; 15] = [
            0.3, -1.2, 2.0, 0.7, -0.1, //
            1.5, 1.4, -3.0, 0.0, 0.2, //
            -0.6, 0.9, 0.4, -2.2, 1.1,
        ];
        let logits = Tensor::new(vec![3, 5], data.to_vec()).unwrap();
        let targets = [Some(2), Some(0), Some(4)];
        let mut expect = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let row = &data[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expect += -(row[t.unwrap() as usize].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((nll_loss(&logits, &targets).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_an_error() {
        let logits = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(nll_loss(&logits, &[None, None]), Err(Error::AllMasked)));
    }

    #[test]
    fn shift_respects_padding() {
        let t = shifted_targets(&[5, 6, 7, 0], &[1, 1, 1, 0]);
        assert_eq!(t, vec![Some(6), Some(7), None, None]);
    }
}
