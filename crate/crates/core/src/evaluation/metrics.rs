//! Distance, divergence and dependence measures on plain samples.

use std::collections::BTreeMap;

use super::EvalError;

/// Root mean squared and mean absolute error between aligned values.
pub fn rmse_mae(truth: &[f64], imputed: &[f64]) -> Result<(f64, f64), EvalError> {
    if truth.len() != imputed.len() {
        return Err(EvalError::Dimensions(format!("{} truth values vs {} imputed", truth.len(), imputed.len())));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty("no cells to compare".into()));
    }
    let n = truth.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (t, x) in truth.iter().zip(imputed) {
        se += (t - x).powi(2);
        ae += (t - x).abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn non_empty(p: &[f64], q: &[f64]) -> Result<(), EvalError> {
    if p.is_empty() || q.is_empty() {
        return Err(EvalError::Empty("empty sample".into()));
    }
    Ok(())
}

/// Walks the merged support of two sorted samples, yielding
/// `(x, F_p(x), F_q(x))` at every distinct point.
fn merged_cdfs(p: &[f64], q: &[f64]) -> Vec<(f64, f64, f64)> {
    let (n, m) = (p.len() as f64, q.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(p.len() + q.len());
    while i < p.len() || j < q.len() {
        let x = match (p.get(i), q.get(j)) {
            (Some(a), Some(b)) => a.min(*b),
            (Some(a), None) => *a,
            (None, Some(b)) => *b,
            (None, None) => unreachable!(),
        };
        while i < p.len() && p[i] <= x {
            i += 1;
        }
        while j < q.len() && q[j] <= x {
            j += 1;
        }
        out.push((x, i as f64 / n, j as f64 / m));
    }
    out
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_p - F_q|`.
pub fn ks_statistic(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    non_empty(p, q)?;
    let (p, q) = (sorted(p), sorted(q));
    Ok(merged_cdfs(&p, &q).iter().map(|(_, f, g)| (f - g).abs()).fold(0.0, f64::max))
}

/// Wasserstein-1 distance between two empirical distributions, computed as
/// the integral of `|F_p - F_q|`.
pub fn emd_1d(p: &[f64], q: &[f64]) -> Result<f64, EvalError> {
    non_empty(p, q)?;
    let (p, q) = (sorted(p), sorted(q));
    let pts = merged_cdfs(&p, &q);
    Ok(pts.windows(2).map(|w| (w[0].1 - w[0].2).abs() * (w[1].0 - w[0].0)).sum())
}

/// Jensen-Shannon divergence (base 2) between two count or probability vectors.
pub fn jsd_from_counts(p: &[f64], q: &[f64]) -> f64 {
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (a, b) = (a / sp, b / sq);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).log2();
        }
    }
    total.clamp(0.0, 1.0)
}

/// JSD over `bins` equal-width bins spanning the pooled range.
pub fn jsd_continuous(p: &[f64], q: &[f64], bins: usize) -> Result<f64, EvalError> {
    non_empty(p, q)?;
    let bins = bins.max(1);
    let lo = p.iter().chain(q).copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().chain(q).copied().fold(f64::NEG_INFINITY, f64::max);
    let bin = |x: f64| -> usize {
        if hi <= lo {
            0
        } else {
            (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        }
    };
    let mut cp = vec![0.0; bins];
    let mut cq = vec![0.0; bins];
    p.iter().for_each(|&x| cp[bin(x)] += 1.0);
    q.iter().for_each(|&x| cq[bin(x)] += 1.0);
    Ok(jsd_from_counts(&cp, &cq))
}

/// JSD between category frequencies.
pub fn jsd_discrete<S: AsRef<str>>(p: &[S], q: &[S]) -> Result<f64, EvalError> {
    if p.is_empty() || q.is_empty() {
        return Err(EvalError::Empty("empty sample".into()));
    }
    let mut counts: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    p.iter().for_each(|s| counts.entry(s.as_ref()).or_default().0 += 1.0);
    q.iter().for_each(|s| counts.entry(s.as_ref()).or_default().1 += 1.0);
    let (cp, cq): (Vec<f64>, Vec<f64>) = counts.values().copied().unzip();
    Ok(jsd_from_counts(&cp, &cq))
}

/// `sum (O - E)^2 / E` over cells with `E > 0`, where `E` is `expected`
/// rescaled to the total of `observed`, divided by that total.
pub fn chi2_normalized(observed: &[Vec<f64>], expected: &[Vec<f64>]) -> f64 {
    let to: f64 = observed.iter().flatten().sum();
    let te: f64 = expected.iter().flatten().sum();
    if to <= 0.0 || te <= 0.0 {
        return 0.0;
    }
    let scale = to / te;
    let mut stat = 0.0;
    for (orow, erow) in observed.iter().zip(expected) {
        for (&o, &e) in orow.iter().zip(erow) {
            let e = e * scale;
            if e > 0.0 {
                stat += (o - e).powi(2) / e;
            }
        }
    }
    stat / to
}

/// Contingency counts of two coded variables.
pub fn contingency(a: &[usize], b: &[usize], ka: usize, kb: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        t[x][y] += 1.0;
    }
    t
}

/// Plug-in mutual information (natural log) of two coded variables.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c / n;
        mi += pxy * (pxy / ((pa[&x] / n) * (pb[&y] / n))).ln();
    }
    mi.max(0.0)
}

/// Pearson correlation; `None` when either variable has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    if constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Quantile bin edges fitted on reference values.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileBins {
    pub edges: Vec<f64>,
}

impl QuantileBins {
    pub fn fit(values: &[f64], bins: usize) -> Self {
        let v = sorted(values);
        let mut edges = Vec::new();
        if !v.is_empty() {
            for k in 1..bins.max(1) {
                let pos = ((k as f64 / bins as f64) * (v.len() - 1) as f64).round() as usize;
                edges.push(v[pos]);
            }
        }
        edges.dedup();
        QuantileBins { edges }
    }

    pub fn code(&self, x: f64) -> usize {
        self.edges.partition_point(|&e| e < x)
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_mae_examples() {
        assert_eq!(rmse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(rmse_mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        assert_eq!(rmse_mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        assert!(rmse_mae(&[], &[]).is_err());
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[1000.0, 1001.0]).unwrap(), 1.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn emd_examples() {
        assert_eq!(emd_1d(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert_eq!(emd_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(emd_1d(&[0.0, 1.0], &[0.0, 3.0]).unwrap(), 1.0);
        // unequal sizes: {0} vs {0, 1} moves half the mass by 1
        assert_eq!(emd_1d(&[0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd_from_counts(&[1.0, 3.0], &[2.0, 6.0]), 0.0);
        assert_eq!(jsd_from_counts(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((jsd_from_counts(&[0.5, 0.5], &[1.0, 0.0]) - 0.311_278_124_459_132_8).abs() < 1e-12);
        assert_eq!(jsd_discrete(&["a", "b"], &["c"]).unwrap(), 1.0);
        assert_eq!(jsd_continuous(&[5.0; 3], &[5.0; 2], 20).unwrap(), 0.0);
    }

    #[test]
    fn chi2_hand_example() {
        let o = vec![vec![12.0, 8.0], vec![8.0, 12.0]];
        let e = vec![vec![10.0, 10.0], vec![10.0, 10.0]];
        assert!((chi2_normalized(&o, &e) - 0.04).abs() < 1e-15);
        assert_eq!(chi2_normalized(&o, &o), 0.0);
    }

    #[test]
    fn mi_closed_forms() {
        let a = [0, 0, 1, 1];
        assert!((mutual_information(&a, &a) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(mutual_information(&a, &[0, 1, 0, 1]), 0.0);
    }

    #[test]
    fn pearson_by_hand() {
        // x = 1..4, y = (2, 1, 4, 3): sum dxdy = 3, sum dx^2 = sum dy^2 = 5 -> rho 0.6
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
        // x = (0, 1, 2, 5), y = (1, 0, 3, 4): sum dxdy = 10, sum dx^2 = 14, sum dy^2 = 10
        let r = pearson(&[0.0, 1.0, 2.0, 5.0], &[1.0, 0.0, 3.0, 4.0]).unwrap();
        assert!((r - 10.0 / (14f64.sqrt() * 10f64.sqrt())).abs() < 1e-12);
        assert_eq!(pearson(&[0.1; 3], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0, 2.0], &[3.0, 3.0]), None);
    }

    #[test]
    fn quantile_bins_handle_ties() {
        let b = QuantileBins::fit(&[0.0, 0.0, 0.0, 0.0, 5.0], 10);
        assert_eq!(b.code(0.0), 0);
        assert_eq!(b.code(3.0), 1);
        assert!(b.n_bins() <= 3);
    }

    proptest::proptest! {
        #[test]
        fn distances_are_symmetric_and_bounded(
            p in proptest::collection::vec(-5.0f64..5.0, 1..30),
            q in proptest::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let ks = ks_statistic(&p, &q).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&ks));
            proptest::prop_assert_eq!(ks, ks_statistic(&q, &p).unwrap());
            let e = emd_1d(&p, &q).unwrap();
            proptest::prop_assert!(e >= 0.0);
            proptest::prop_assert!((e - emd_1d(&q, &p).unwrap()).abs() < 1e-12);
            let j = jsd_continuous(&p, &q, 20).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&j));
            proptest::prop_assert!((j - jsd_continuous(&q, &p, 20).unwrap()).abs() < 1e-12);
            proptest::prop_assert_eq!(ks_statistic(&p, &p).unwrap(), 0.0);
            proptest::prop_assert_eq!(emd_1d(&p, &p).unwrap(), 0.0);
        }
    }
}
