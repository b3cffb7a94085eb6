//! Picks the tokens an attribution method considers most significant.
//!
//! Vector attributions are reduced to one weight per token, boundary markers
//! and sub-word pieces are dropped along with anything non-alphabetic, and the
//! top-V remaining tokens are taken by weight.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::domain::{Aggregation, AttributionScores, SelectedToken};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("aggregation {mode} cannot reduce {shape} attributions")]
    ShapeMismatch { mode: Aggregation, shape: &'static str },
    #[error("{weights} weights for {tokens} tokens")]
    Length { weights: usize, tokens: usize },
}

/// Reduces per-token attributions to one scalar per token.
///
/// `mean` and `l2` apply to vector scores, `direct` to scalar scores.
pub fn aggregate(
    scores: &AttributionScores,
    mode: Aggregation,
) -> Result<Vec<f64>, ExtractionError> {
    match (mode, scores) {
        (Aggregation::Direct, AttributionScores::Scalar(v)) => Ok(v.clone()),
        (Aggregation::Mean, AttributionScores::Vector(rows)) => Ok(rows
            .iter()
            .map(|r| {
                if r.is_empty() {
                    0.0
                } else {
                    r.iter().sum::<f64>() / r.len() as f64
                }
            })
            .collect()),
        (Aggregation::L2, AttributionScores::Vector(rows)) => Ok(rows
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()),
        (mode, AttributionScores::Scalar(_)) => Err(ExtractionError::ShapeMismatch {
            mode,
            shape: "scalar",
        }),
        (mode, AttributionScores::Vector(_)) => Err(ExtractionError::ShapeMismatch {
            mode,
            shape: "vector",
        }),
    }
}

pub const SUBWORD_PREFIX: &str = "##";

fn is_word_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(char::is_alphabetic)
}

/// Positions that may be masked.
///
/// Excludes the first and last positions, every `##` continuation piece, the
/// piece that starts a multi-piece word, and any token containing a
/// non-alphabetic character.
pub fn filter_candidates(tokens: &[String]) -> BTreeSet<usize> {
    let n = tokens.len();
    if n < 3 {
        return BTreeSet::new();
    }
    let mut in_split_word = vec![false; n];
    for i in 0..n {
        if tokens[i].starts_with(SUBWORD_PREFIX) {
            in_split_word[i] = true;
            // walk back over earlier pieces to the word head
            let mut j = i;
            while j > 0 {
                j -= 1;
                in_split_word[j] = true;
                if !tokens[j].starts_with(SUBWORD_PREFIX) {
                    break;
                }
            }
        }
    }
    (1..n - 1)
        .filter(|&i| !in_split_word[i] && is_word_token(&tokens[i]))
        .collect()
}

/// Result of top-V selection before it is tied to an instance and method.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<SelectedToken>,
    pub requested: usize,
    pub degenerate: bool,
}

/// Takes the `v` eligible positions with the largest weights.
///
/// Ordered by weight descending, ties broken by the lower position. With
/// `rank_by_abs` the ranking key (and the recorded weight) is `|w|`.
pub fn select_top_v(
    weights: &[f64],
    eligible: &BTreeSet<usize>,
    v: usize,
    rank_by_abs: bool,
) -> Selection {
    let key = |w: f64| if rank_by_abs { w.abs() } else { w };
    let mut ranked: Vec<SelectedToken> = eligible
        .iter()
        .filter(|&&p| p < weights.len())
        .map(|&position| SelectedToken {
            position,
            weight: key(weights[position]),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.position.cmp(&b.position))
    });
    let degenerate = ranked.len() < v;
    ranked.truncate(v);
    Selection {
        selected: ranked,
        requested: v,
        degenerate,
    }
}

/// Aggregates, filters and selects in one call.
pub fn significant_tokens(
    tokens: &[String],
    scores: &AttributionScores,
    mode: Aggregation,
    v: usize,
    rank_by_abs: bool,
) -> Result<(Vec<f64>, Selection), ExtractionError> {
    let weights = aggregate(scores, mode)?;
    if weights.len() != tokens.len() {
        return Err(ExtractionError::Length {
            weights: weights.len(),
            tokens: tokens.len(),
        });
    }
    let eligible = filter_candidates(tokens);
    let selection = select_top_v(&weights, &eligible, v, rank_by_abs);
    Ok((weights, selection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn aggregation_modes() {
        let v = AttributionScores::Vector(vec![vec![3.0, 4.0]]);
        assert_eq!(aggregate(&v, Aggregation::Mean).unwrap(), vec![3.5]);
        assert_eq!(aggregate(&v, Aggregation::L2).unwrap(), vec![5.0]);
        let s = AttributionScores::Scalar(vec![0.7]);
        assert_eq!(aggregate(&s, Aggregation::Direct).unwrap(), vec![0.7]);
        assert!(aggregate(&s, Aggregation::L2).is_err());
        assert!(aggregate(&v, Aggregation::Direct).is_err());
    }

    #[test]
    fn filter_examples() {
        let t = toks(&["[CLS]", "un", "##believ", "##able", "plot", "[SEP]"]);
        assert_eq!(filter_candidates(&t), BTreeSet::from([4]));
        let t = toks(&["[CLS]", "a", "great", "movie", "!", "[SEP]"]);
        assert_eq!(filter_candidates(&t), BTreeSet::from([1, 2, 3]));
        assert!(filter_candidates(&toks(&["[CLS]", "[SEP]"])).is_empty());
        assert!(filter_candidates(&toks(&["[CLS]"])).is_empty());
    }

    #[test]
    fn select_examples() {
        let eligible = BTreeSet::from([1, 2, 3]);
        let w = [9.0, 0.1, 0.9, 0.3, 9.0, 9.0];
        let s = select_top_v(&w, &eligible, 2, false);
        assert_eq!(s.selected.iter().map(|t| t.position).collect::<Vec<_>>(), [2, 3]);
        assert!(!s.degenerate);

        let s = select_top_v(&[0.0, 0.5, 0.5, 0.5, 0.0], &eligible, 2, false);
        assert_eq!(s.selected.iter().map(|t| t.position).collect::<Vec<_>>(), [1, 2]);

        let s = select_top_v(&w, &eligible, 5, false);
        assert_eq!(s.selected.len(), 3);
        assert!(s.degenerate);
    }

    #[test]
    fn rank_by_abs_flips_order() {
        let eligible = BTreeSet::from([1, 2]);
        let w = [0.0, -0.9, 0.5, 0.0];
        let signed = select_top_v(&w, &eligible, 1, false);
        assert_eq!(signed.selected[0].position, 2);
        let abs = select_top_v(&w, &eligible, 1, true);
        assert_eq!(abs.selected[0], SelectedToken { position: 1, weight: 0.9 });
    }

    fn token_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-z]{1,6}",
            "##[a-z]{1,4}",
            "[a-z]{0,2}[0-9!,.'-][a-z]{0,2}",
            Just("[UNK]".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn filter_never_keeps_excluded(tokens in prop::collection::vec(token_strategy(), 0..16)) {
            let kept = filter_candidates(&tokens);
            let n = tokens.len();
            for &p in &kept {
                prop_assert!(p != 0 && p + 1 != n);
                prop_assert!(!tokens[p].starts_with("##"));
                prop_assert!(!tokens.get(p + 1).is_some_and(|t| t.starts_with("##")));
                prop_assert!(tokens[p].chars().all(char::is_alphabetic));
            }
        }

        #[test]
        fn l2_is_nonnegative_and_homogeneous(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..6),
            c in -10.0f64..10.0,
        ) {
            let v = AttributionScores::Vector(rows.clone());
            let scaled = AttributionScores::Vector(
                rows.iter().map(|r| r.iter().map(|x| c * x).collect()).collect(),
            );
            let a = aggregate(&v, Aggregation::L2).unwrap();
            let b = aggregate(&scaled, Aggregation::L2).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x >= 0.0);
                prop_assert!((y - c.abs() * x).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
