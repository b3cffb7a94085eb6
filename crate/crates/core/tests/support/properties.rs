//! Property checks shared by the property test target and the acceptance
//! runner.

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use scene_core::backend::MockBackend;
use scene_core::extraction::select_top_v;
use scene_core::metrics::{average_precision, c_soft, cosine_distance, sentence_distance, spearman, validity_soft};

/// Strictly increasing maps.
const MONOTONE: [fn(f64) -> f64; 3] = [|x| 3.0 * x + 1.0, |x| x.exp(), |x| x * x * x];

/// Values on a coarse grid so ties are common and transforms keep them apart.
fn grid(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-12i32..=12).prop_map(|k| k as f64 / 4.0), n)
}

fn close(a: f64, b: f64) -> Result<(), TestCaseError> {
    prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    Ok(())
}

fn top_v_monotone(runner: &mut TestRunner) -> Result<(), String> {
    let s = (grid(1..30), 1usize..8, any::<u64>());
    runner
        .run(&s, |(w, v, pick)| {
            let eligible: BTreeSet<usize> =
                (0..w.len()).filter(|i| (pick >> (i % 64)) & 1 == 1).collect();
            let base: Vec<usize> = select_top_v(&w, &eligible, v, false)
                .selected
                .iter()
                .map(|t| t.position)
                .collect();
            for f in MONOTONE {
                let fw: Vec<f64> = w.iter().map(|&x| f(x)).collect();
                let got: Vec<usize> = select_top_v(&fw, &eligible, v, false)
                    .selected
                    .iter()
                    .map(|t| t.position)
                    .collect();
                prop_assert_eq!(&got, &base);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn ap_monotone(runner: &mut TestRunner) -> Result<(), String> {
    let s = grid(1..30).prop_flat_map(|w| {
        let n = w.len();
        (Just(w), prop::collection::vec(any::<bool>(), n))
    });
    runner
        .run(&s, |(w, mut r)| {
            r[0] = true;
            let base = average_precision(&w, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            for f in MONOTONE {
                let fw: Vec<f64> = w.iter().map(|&x| f(x)).collect();
                close(average_precision(&fw, &r).unwrap(), base)?;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn spearman_monotone(runner: &mut TestRunner) -> Result<(), String> {
    let s = (2usize..25).prop_flat_map(|n| (grid(n..n + 1), grid(n..n + 1)));
    runner
        .run(&s, |(x, y)| {
            let Ok(base) = spearman(&x, &y) else {
                return Ok(());
            };
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
            for f in MONOTONE {
                for g in MONOTONE {
                    let fx: Vec<f64> = x.iter().map(|&v| f(v)).collect();
                    let gy: Vec<f64> = y.iter().map(|&v| g(v)).collect();
                    close(spearman(&fx, &gy).unwrap(), base)?;
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Instances of (original probability, counterfactual probabilities, distances).
fn instances() -> impl Strategy<Value = Vec<(f64, Vec<(f64, f64)>)>> {
    prop::collection::vec(
        (0.0..=1.0f64, prop::collection::vec((0.0..=1.0f64, 0.01..2.0f64), 1..8)),
        1..12,
    )
}

type Split = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn split(inst: &[(f64, Vec<(f64, f64)>)]) -> Split {
    (
        inst.iter().map(|i| i.0).collect(),
        inst.iter().map(|i| i.1.iter().map(|c| c.0).collect()).collect(),
        inst.iter().map(|i| i.1.iter().map(|c| c.1).collect()).collect(),
    )
}

fn shuffled(inst: &[(f64, Vec<(f64, f64)>)], seed: u64) -> Vec<(f64, Vec<(f64, f64)>)> {
    // Rotations and reversals generate enough reorderings without an RNG.
    let mut out: Vec<_> = inst.to_vec();
    let n = out.len();
    out.rotate_left(seed as usize % n);
    if seed & 1 == 1 {
        out.reverse();
    }
    for (k, (_, cfs)) in out.iter_mut().enumerate() {
        let m = cfs.len();
        cfs.rotate_left((seed as usize + k) % m);
        if (seed >> 1) & 1 == 1 {
            cfs.reverse();
        }
    }
    out
}

fn permutation_invariance(runner: &mut TestRunner) -> Result<(), String> {
    runner
        .run(&(instances(), any::<u64>()), |(inst, seed)| {
            let (o, c, d) = split(&inst);
            let (o2, c2, d2) = split(&shuffled(&inst, seed));
            close(validity_soft(&o, &c).unwrap(), validity_soft(&o2, &c2).unwrap())?;
            let a = c_soft(&o, &c, &d).unwrap();
            let b = c_soft(&o2, &c2, &d2).unwrap();
            prop_assert!((a.value - b.value).abs() <= 1e-9 * a.value.abs().max(1.0));
            prop_assert_eq!(a.used, b.used);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn distance_symmetry(runner: &mut TestRunner) -> Result<(), String> {
    let mock = MockBackend::new(Default::default()).unwrap();
    let words = prop::collection::vec("[a-z]{1,6}", 1..6).prop_map(|w| w.join(" "));
    let vecs = (1usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
        )
    });
    runner
        .run(&(words.clone(), words, vecs), |(a, b, (u, v))| {
            let ab = sentence_distance(&mock, &a, &b).unwrap();
            let ba = sentence_distance(&mock, &b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert_eq!(sentence_distance(&mock, &a, &a).unwrap(), 0.0);
            let uv = cosine_distance(&u, &v).unwrap();
            prop_assert_eq!(uv, cosine_distance(&v, &u).unwrap());
            prop_assert!((0.0..=2.0).contains(&uv));
            prop_assert!(cosine_distance(&u, &u).unwrap() <= 1e-12);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every property with its name.
pub const PROPERTIES: [(&str, fn(&mut TestRunner) -> Result<(), String>); 5] = [
    ("top-V selection is invariant under monotone transforms", top_v_monotone),
    ("average precision is invariant under monotone transforms", ap_monotone),
    ("spearman is invariant under monotone transforms", spearman_monotone),
    ("Validity_soft and C_soft are permutation invariant", permutation_invariance),
    ("sentence distance is symmetric and zero on itself", distance_symmetry),
];

pub const CASES: u32 = 1000;

pub fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}
