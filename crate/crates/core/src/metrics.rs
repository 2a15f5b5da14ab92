//! Classification metrics, two-sample K-S statistics and environment
//! diagnostics.

use std::collections::BTreeMap;

use crate::error::{contract, Error, Result};

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(contract("prediction and label counts differ"));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann-Whitney ROC-AUC; tied scores count one half. `positive[i]` marks
/// the positive class.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(contract("score and label counts differ"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives, computed in doubled units to stay exact.
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| positive[k]).count() as u128;
        rank_sum2 += mid2 * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("K-S needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(contract("NaN in K-S sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (m, n) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < m && j < n {
        let x = a[i].min(b[j]);
        while i < m && a[i] <= x {
            i += 1;
        }
        while j < n && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / m as f64 - j as f64 / n as f64).abs());
    }
    let en = ((m * n) as f64 / (m + n) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// `Q(l) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 l^2)`, stopped once a term
/// falls below 1e-12. Returns 1 when the series does not settle (tiny `l`).
fn kolmogorov_q(lambda: f64) -> f64 {
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 2.0;
    for j in 1..=100_000u64 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() < 1e-12 {
            return sum.clamp(f64::MIN_POSITIVE, 1.0);
        }
        sign = -sign;
    }
    1.0
}

/// Best agreement between `assigned` and `truth` over all relabelings of
/// the assigned ids (exhaustive; at most 8 distinct ids).
pub fn env_recovery_score(assigned: &[usize], truth: &[usize]) -> Result<f64> {
    if assigned.len() != truth.len() {
        return Err(contract("assignment and truth lengths differ"));
    }
    if assigned.is_empty() {
        return Err(Error::UndefinedMetric("recovery of an empty set".into()));
    }
    let (ai, a) = compact(assigned);
    let (ti, t) = compact(truth);
    let k = ai.max(ti);
    if k > 8 {
        return Err(contract(format!("{k} labels; exhaustive matching supports at most 8")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&x, &y) in a.iter().zip(&t) {
        confusion[x][y] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = p.iter().enumerate().map(|(x, &y)| confusion[x][y]).sum();
        best = best.max(hits);
    });
    Ok(best as f64 / assigned.len() as f64)
}

fn compact(v: &[usize]) -> (usize, Vec<usize>) {
    let mut ids = BTreeMap::new();
    for &x in v {
        let next = ids.len();
        ids.entry(x).or_insert(next);
    }
    (ids.len(), v.iter().map(|x| ids[x]).collect())
}

fn permute(p: &mut Vec<usize>, start: usize, f: &mut dyn FnMut(&[usize])) {
    if start == p.len() {
        f(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, f);
        p.swap(start, i);
    }
}

fn entropy(counts: impl Iterator<Item = usize>, total: usize) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in `H(Y) - H(Y | E)` in nats.
pub fn env_label_dependency(envs: &[usize], labels: &[usize]) -> Result<f64> {
    if envs.len() != labels.len() {
        return Err(contract("environment and label counts differ"));
    }
    if envs.is_empty() {
        return Err(Error::UndefinedMetric("dependency of an empty set".into()));
    }
    let n = labels.len();
    let mut y_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&e, &y) in envs.iter().zip(labels) {
        *y_counts.entry(y).or_default() += 1;
        *joint.entry(e).or_default().entry(y).or_default() += 1;
    }
    let h_y = entropy(y_counts.values().copied(), n);
    let h_y_given_e: f64 = joint
        .values()
        .map(|row| {
            let ne: usize = row.values().sum();
            ne as f64 / n as f64 * entropy(row.values().copied(), ne)
        })
        .sum();
    Ok((h_y - h_y_given_e).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_hand_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ks_hand_cases() {
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().0, 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap().0, 1.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 3.0]).unwrap().0, 0.5);
        assert_eq!(ks_two_sample(&[1.0], &[1.0]).unwrap().1, 1.0);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn ks_p_value_against_reference_series() {
        // Q(1) = 2 (e^-2 - e^-8 + e^-18 - ...) = 0.26999967...
        assert!((kolmogorov_q(1.0) - 0.2699996716773546).abs() < 1e-12);
        let big = ks_two_sample(&(0..500).map(f64::from).collect::<Vec<_>>(), &(1000..1500).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!(big.1 > 0.0 && big.1 < 1e-100);
    }

    #[test]
    fn recovery_cases() {
        assert_eq!(env_recovery_score(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(env_recovery_score(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(env_recovery_score(&[5, 5, 7, 7], &[0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(env_recovery_score(&[0, 0, 0, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn random_assignment_recovers_about_half() {
        use rand::Rng;
        let mut rng = crate::rng::RngStreams::new(4).stream("x");
        let n = 4000;
        let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let assigned: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let r = env_recovery_score(&assigned, &truth).unwrap();
        assert!(r >= 0.5 && r < 0.5 + 3.0 / (n as f64).sqrt(), "{r}");
    }

    #[test]
    fn dependency_cases() {
        // product counts: each env has one of each label
        assert!(env_label_dependency(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        let h = 2f64.ln();
        assert!((env_label_dependency(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap() - h).abs() < 1e-15);
        // table e0: (y0 3, y1 1), e1: (y0 1, y1 3)
        let envs = [0, 0, 0, 0, 1, 1, 1, 1];
        let ys = [0, 0, 0, 1, 0, 1, 1, 1];
        let h_cond = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let v = env_label_dependency(&envs, &ys).unwrap();
        assert!((v - (h - h_cond)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_bounded(a in proptest::collection::vec(-5i32..5, 1..30), b in proptest::collection::vec(-5i32..5, 1..30)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let (d1, p1) = ks_two_sample(&a, &b).unwrap();
            let (d2, p2) = ks_two_sample(&b, &a).unwrap();
            prop_assert_eq!(d1.to_bits(), d2.to_bits());
            prop_assert_eq!(p1.to_bits(), p2.to_bits());
            prop_assert!((0.0..=1.0).contains(&d1));
            prop_assert!(p1 > 0.0 && p1 <= 1.0);
        }

        #[test]
        fn ks_zero_iff_same_multiset_for_equal_sizes(a in proptest::collection::vec(0i32..4, 1..12), seed in 0u64..500) {
            let mut b: Vec<i32> = a.clone();
            let k = (seed as usize) % b.len();
            if seed % 2 == 0 { b[k] = (b[k] + 1) % 4; }
            let af: Vec<f64> = a.iter().map(|&x| f64::from(x)).collect();
            let bf: Vec<f64> = b.iter().rev().map(|&x| f64::from(x)).collect();
            let mut sa = a.clone(); sa.sort();
            let mut sb = b.clone(); sb.sort();
            prop_assert_eq!(ks_two_sample(&af, &bf).unwrap().0 == 0.0, sa == sb);
        }

        #[test]
        fn auc_invariant_under_increasing_transform(s in proptest::collection::vec(-3.0f64..3.0, 2..30), seed in 0u64..1000) {
            let labels: Vec<bool> = (0..s.len()).map(|i| (i as u64 + seed) % 3 == 0).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&s, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
        }

        #[test]
        fn recovery_invariant_under_relabeling(a in proptest::collection::vec(0usize..4, 1..40), shift in 1usize..4) {
            let truth: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + i) % 3).collect();
            let relabeled: Vec<usize> = a.iter().map(|x| (x + shift) % 4 + 10).collect();
            prop_assert_eq!(env_recovery_score(&a, &truth).unwrap(), env_recovery_score(&relabeled, &truth).unwrap());
            let t2: Vec<usize> = truth.iter().map(|t| 2 - t).collect();
            prop_assert_eq!(env_recovery_score(&a, &truth).unwrap(), env_recovery_score(&a, &t2).unwrap());
        }
    }
}
