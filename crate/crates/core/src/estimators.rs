//! Treatment-effect estimators and covariate balance.

use crate::error::{Error, Result};

/// Propensity clipping bounds, `0 < lo < hi < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clip {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Clip {
    fn default() -> Self {
        Clip { lo: 0.01, hi: 0.99 }
    }
}

impl Clip {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let c = Clip { lo, hi };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lo && self.lo < self.hi && self.hi < 1.0) {
            return Err(Error::invalid(format!(
                "clip bounds must satisfy 0 < lo < hi < 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

fn check_lengths(t: &[u8], others: &[(&str, usize)]) -> Result<()> {
    if t.len() < 2 {
        return Err(Error::invalid("at least two units are required"));
    }
    for &(name, len) in others {
        if len != t.len() {
            return Err(Error::invalid(format!("{name} has length {len}, treatment has {}", t.len())));
        }
    }
    if let Some(i) = t.iter().position(|&v| v > 1) {
        return Err(Error::invalid(format!("treatment at index {i} is not binary")));
    }
    Ok(())
}

fn check_propensities(pi: &[f64], clip: &Clip) -> Result<()> {
    clip.validate()?;
    if let Some(i) = pi.iter().position(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("propensity at index {i} is not finite")));
    }
    Ok(())
}

/// `mean(y | t = 1) - mean(y | t = 0)`.
pub fn diff_in_means(t: &[u8], y: &[f64]) -> Result<f64> {
    check_lengths(t, &[("outcome", y.len())])?;
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&ti, &yi) in t.iter().zip(y) {
        if ti == 1 {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::degenerate("a treatment group is empty"));
    }
    Ok(s1 / n1 as f64 - s0 / n0 as f64)
}

/// Horvitz-Thompson IPW estimate with clipped propensities.
pub fn ipw_ht(t: &[u8], y: &[f64], pi: &[f64], clip: Clip) -> Result<f64> {
    check_lengths(t, &[("outcome", y.len()), ("propensity", pi.len())])?;
    check_propensities(pi, &clip)?;
    let total: f64 = t
        .iter()
        .zip(y)
        .zip(pi)
        .map(|((&ti, &yi), &p)| {
            let p = clip.apply(p);
            if ti == 1 {
                yi / p
            } else {
                -yi / (1.0 - p)
            }
        })
        .sum();
    Ok(total / t.len() as f64)
}

/// Per-unit IPW weights: `1/pi` for treated, `1/(1-pi)` for controls.
fn ipw_weights<'a>(t: &'a [u8], pi: &'a [f64], clip: Clip) -> impl Iterator<Item = f64> + 'a {
    t.iter().zip(pi).map(move |(&ti, &p)| {
        let p = clip.apply(p);
        if ti == 1 {
            1.0 / p
        } else {
            1.0 / (1.0 - p)
        }
    })
}

/// Self-normalized weighted means of `column` within each group.
fn weighted_group_means(t: &[u8], weights: &[f64], column: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for ((&ti, &w), v) in t.iter().zip(weights).zip(column) {
        if ti == 1 {
            s1 += w * v;
            w1 += w;
        } else {
            s0 += w * v;
            w0 += w;
        }
    }
    if w1 == 0.0 || w0 == 0.0 {
        return Err(Error::degenerate("a treatment group is empty"));
    }
    Ok((s1 / w1, s0 / w0))
}

/// Hajek IPW estimate: weights normalized within each treatment group.
pub fn ipw_hajek(t: &[u8], y: &[f64], pi: &[f64], clip: Clip) -> Result<f64> {
    check_lengths(t, &[("outcome", y.len()), ("propensity", pi.len())])?;
    check_propensities(pi, &clip)?;
    let weights: Vec<f64> = ipw_weights(t, pi, clip).collect();
    let (m1, m0) = weighted_group_means(t, &weights, y.iter().copied())?;
    Ok(m1 - m0)
}

/// Treated-minus-control covariate differences before and after weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct Balance {
    pub raw_diff: Vec<f64>,
    pub weighted_diff: Vec<f64>,
}

/// `covariates[i]` is the covariate row of unit `i`.
pub fn balance_diagnostics(t: &[u8], covariates: &[Vec<f64>], pi: &[f64], clip: Clip) -> Result<Balance> {
    check_lengths(t, &[("covariates", covariates.len()), ("propensity", pi.len())])?;
    check_propensities(pi, &clip)?;
    let d = covariates[0].len();
    if let Some(i) = covariates.iter().position(|row| row.len() != d) {
        return Err(Error::invalid(format!("covariate row {i} has the wrong width")));
    }
    let ones = vec![1.0; t.len()];
    let weights: Vec<f64> = ipw_weights(t, pi, clip).collect();
    let mut raw_diff = Vec::with_capacity(d);
    let mut weighted_diff = Vec::with_capacity(d);
    for j in 0..d {
        let (r1, r0) = weighted_group_means(t, &ones, covariates.iter().map(|row| row[j]))?;
        let (w1, w0) = weighted_group_means(t, &weights, covariates.iter().map(|row| row[j]))?;
        raw_diff.push(r1 - r0);
        weighted_diff.push(w1 - w0);
    }
    Ok(Balance { raw_diff, weighted_diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_instance(seed: u64, n: usize) -> (Vec<u8>, Vec<f64>, Vec<f64>) {
        let mut g = rng::stream(seed, 0);
        let mut t: Vec<u8> = (0..n).map(|_| u8::from(g.random_bool(0.5))).collect();
        t[0] = 1;
        t[1] = 0;
        let y = (0..n).map(|_| g.random_range(-5.0..5.0)).collect();
        let pi = (0..n).map(|_| g.random_range(0.05..0.95)).collect();
        (t, y, pi)
    }

    #[test]
    fn difference_in_means_examples() {
        assert_eq!(diff_in_means(&[1, 1, 0], &[2.0, 4.0, 1.0]).unwrap(), 2.0);
        assert_eq!(diff_in_means(&[1, 0, 0, 1], &[3.0; 4]).unwrap(), 0.0);
        assert!(matches!(diff_in_means(&[1, 1], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(diff_in_means(&[1, 2], &[1.0, 2.0]).is_err());
        assert!(diff_in_means(&[1, 0], &[1.0]).is_err());
    }

    #[test]
    fn horvitz_thompson_examples() {
        let c = Clip::default();
        assert_eq!(ipw_ht(&[1, 0], &[3.0, 1.0], &[0.5, 0.5], c).unwrap(), 2.0);
        assert_eq!(ipw_ht(&[1, 0, 1], &[0.0; 3], &[0.2, 0.7, 0.4], c).unwrap(), 0.0);
        // clipping: 0.001 is raised to 0.01
        let v = ipw_ht(&[1, 0], &[1.0, 0.0], &[0.001, 0.5], c).unwrap();
        assert!((v - 50.0).abs() < 1e-9);
    }

    #[test]
    fn hajek_examples() {
        let c = Clip::default();
        assert_eq!(ipw_hajek(&[1, 0], &[3.0, 1.0], &[0.8, 0.8], c).unwrap(), 2.0);
        assert!(matches!(ipw_hajek(&[0, 0], &[3.0, 1.0], &[0.8, 0.8], c), Err(Error::Degenerate(_))));
        assert!(Clip::new(0.5, 0.5).is_err());
        assert!(Clip::new(0.0, 0.5).is_err());
    }

    #[test]
    fn estimators_match_loop_oracles() {
        let clip = Clip::new(0.1, 0.9).unwrap();
        for seed in 0..25 {
            let (t, y, pi) = random_instance(seed, 15);
            let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
            let (mut hn1, mut hd1, mut hn0, mut hd0, mut ht) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..t.len() {
                let p = pi[i].max(0.1).min(0.9);
                if t[i] == 1 {
                    a += y[i];
                    na += 1.0;
                    hn1 += y[i] / p;
                    hd1 += 1.0 / p;
                    ht += y[i] / p;
                } else {
                    b += y[i];
                    nb += 1.0;
                    hn0 += y[i] / (1.0 - p);
                    hd0 += 1.0 / (1.0 - p);
                    ht -= y[i] / (1.0 - p);
                }
            }
            assert!((diff_in_means(&t, &y).unwrap() - (a / na - b / nb)).abs() < 1e-12);
            assert!((ipw_hajek(&t, &y, &pi, clip).unwrap() - (hn1 / hd1 - hn0 / hd0)).abs() < 1e-10);
            assert!((ipw_ht(&t, &y, &pi, clip).unwrap() - ht / t.len() as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn balance_hand_instance() {
        // t = [1, 1, 0, 0], covariate x = [1, 3, 2, 6], pi = [0.5, 0.25, 0.5, 0.75]
        // treated weights 2, 4 -> (2*1 + 4*3)/6 = 7/3
        // control weights 2, 4 -> (2*2 + 4*6)/6 = 14/3
        let t = [1, 1, 0, 0];
        let x: Vec<Vec<f64>> = [1.0, 3.0, 2.0, 6.0].iter().map(|&v| vec![v]).collect();
        let pi = [0.5, 0.25, 0.5, 0.75];
        let b = balance_diagnostics(&t, &x, &pi, Clip::default()).unwrap();
        assert_eq!(b.raw_diff, vec![2.0 - 4.0]);
        assert!((b.weighted_diff[0] - (7.0 / 3.0 - 14.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn balance_constant_covariate_and_uniform_weights() {
        let t = [1, 0, 1, 0, 0];
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![4.0, i as f64 * 1.5]).collect();
        let half = [0.5; 5];
        let b = balance_diagnostics(&t, &x, &half, Clip::default()).unwrap();
        assert_eq!(b.raw_diff, b.weighted_diff);
        assert_eq!(b.raw_diff[0], 0.0);
        assert_eq!(b.weighted_diff[0], 0.0);
        assert!(balance_diagnostics(&t, &x[..4], &half, Clip::default()).is_err());
    }

    proptest! {
        #[test]
        fn hajek_with_constant_propensity_is_difference_in_means(seed: u64, c in 0.02f64..0.98, n in 2usize..40) {
            let (t, y, _) = random_instance(seed, n);
            let pi = vec![c; n];
            let h = ipw_hajek(&t, &y, &pi, Clip::default()).unwrap();
            prop_assert!((h - diff_in_means(&t, &y).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn ht_at_one_half_equals_dim_on_balanced_groups(seed: u64, half in 1usize..20) {
            let mut g = rng::stream(seed, 1);
            let t: Vec<u8> = (0..2 * half).map(|i| u8::from(i % 2 == 0)).collect();
            let y: Vec<f64> = (0..2 * half).map(|_| g.random_range(-3.0..3.0)).collect();
            let pi = vec![0.5; 2 * half];
            let ht = ipw_ht(&t, &y, &pi, Clip::default()).unwrap();
            prop_assert!((ht - diff_in_means(&t, &y).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn hajek_is_invariant_to_inactive_clip_changes(seed: u64) {
            let (t, y, pi) = random_instance(seed, 20);
            let a = ipw_hajek(&t, &y, &pi, Clip::new(0.05, 0.95).unwrap()).unwrap();
            let b = ipw_hajek(&t, &y, &pi, Clip::new(0.01, 0.99).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
