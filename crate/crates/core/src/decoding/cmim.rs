// SPDX-License-Identifier: Apache-2.0

use super::beam::{rank_order, Candidate};
use crate::error::{BpdgError, Result};

pub const DEFAULT_LAMBDA3: f64 = 0.3;

/// `gen_score − λ3·rel_score`; a missing relevance score counts as 0.
pub fn objective(c: &Candidate, lambda3: f64) -> f64 {
    c.gen_score - lambda3 * c.rel_score.unwrap_or(0.0)
}

/// Fills `rel_score` for every candidate.
pub fn score_relevance(candidates: &mut [Candidate], mut rel: impl FnMut(&Candidate) -> Result<f64>) -> Result<()> {
    for c in candidates.iter_mut() {
        c.rel_score = Some(rel(c)?);
    }
    Ok(())
}

/// Index of the candidate maximising the objective; ties go to the higher
/// generation score, then the shorter and lexicographically smaller
/// sequence, so the choice does not depend on list order.
pub fn select_index(candidates: &[Candidate], lambda3: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(BpdgError::Contract("no candidates to select from".into()));
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (&candidates[i], &candidates[best]);
        let ord = objective(b, lambda3)
            .total_cmp(&objective(a, lambda3))
            .then_with(|| rank_order(a.gen_score, &a.sequence(), b.gen_score, &b.sequence()));
        if ord == std::cmp::Ordering::Less {
            best = i;
        }
    }
    Ok(best)
}

/// Scores relevance over the list and returns the selected candidate.
pub fn cmim_select(
    candidates: &mut [Candidate],
    lambda3: f64,
    rel: impl FnMut(&Candidate) -> Result<f64>,
) -> Result<Candidate> {
    if candidates.is_empty() {
        return Err(BpdgError::Contract("no candidates to select from".into()));
    }
    score_relevance(candidates, rel)?;
    let i = select_index(candidates, lambda3)?;
    Ok(candidates[i].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(tokens: Vec<usize>, g: f64, r: f64) -> Candidate {
        Candidate {
            tokens,
            ended: true,
            gen_score: g,
            rel_score: Some(r),
        }
    }

    #[test]
    fn hand_fixture_selects_second() {
        let c = vec![cand(vec![5], -1.0, -2.0), cand(vec![6], -1.2, -5.0), cand(vec![7], -3.0, -0.1)];
        let obj: Vec<f64> = c.iter().map(|x| objective(x, 0.3)).collect();
        for (o, e) in obj.iter().zip([-0.4, 0.3, -2.97]) {
            assert!((o - e).abs() < 1e-12);
        }
        assert_eq!(select_index(&c, 0.3).unwrap(), 1);
        assert_eq!(select_index(&c, 0.0).unwrap(), 0);
    }

    #[test]
    fn ties_and_errors() {
        let c = vec![cand(vec![5, 6], -1.0, 0.0), cand(vec![7], -1.0, 0.0)];
        assert_eq!(select_index(&c, 0.3).unwrap(), 1);
        let c = vec![cand(vec![5], -2.0, -2.0), cand(vec![6], -1.0, 0.0)];
        // Both objectives equal -1; the higher generation score wins.
        assert_eq!(objective(&c[0], 0.5), objective(&c[1], 0.5));
        assert_eq!(select_index(&c, 0.5).unwrap(), 1);
        assert!(select_index(&[], 0.3).is_err());
        let mut single = vec![cand(vec![9], -4.0, -1.0)];
        let s = cmim_select(&mut single, 0.3, |_| Ok(-1.0)).unwrap();
        assert_eq!(s, single[0]);
    }
}
