//! Ancestor-vector samplers and backward ancestor distributions.
//!
//! All three schemes share the same marginal law — the probability that a
//! child picks parent `m` is the normalised potential of `m` — but differ in
//! the joint law of the ancestor vector, which is what drives genealogies.
//!
//! ```
//! use coalsim::resampling::{normalize, ResamplingScheme};
//! use rand::SeedableRng;
//!
//! let w = normalize(&[2.0, 1.0, 1.0]).unwrap();
//! assert_eq!(w.weights, vec![0.5, 0.25, 0.25]);
//!
//! // With equal weights every stratum covers exactly one parent, so
//! // stratified resampling without a shuffle is the identity map.
//! let equal = normalize(&[1.0; 6]).unwrap();
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
//! let anc = ResamplingScheme::Stratified { shuffle: false }.sample(&equal, &mut rng);
//! assert_eq!(anc.parents, (0..6).collect::<Vec<u32>>());
//! ```

use crate::model::ModelSpec;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Joint law of the ancestor vector given the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResamplingScheme {
    /// Children draw parents i.i.d. from the categorical weight law.
    Multinomial,
    /// One uniform per 1/N stratum; `shuffle` permutes children over strata
    /// each generation.
    Stratified { shuffle: bool },
    /// A single uniform shared by every child pointer (a stochastic
    /// rounding of the family sizes).
    Systematic,
}

impl ResamplingScheme {
    pub fn sample(self, w: &WeightVector, rng: &mut impl Rng) -> AncestorVector {
        match self {
            ResamplingScheme::Multinomial => multinomial_ancestors(w, rng),
            ResamplingScheme::Stratified { shuffle } => stratified_ancestors(w, shuffle, rng),
            ResamplingScheme::Systematic => systematic_ancestors(w, rng),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "multinomial" => Ok(ResamplingScheme::Multinomial),
            "stratified" => Ok(ResamplingScheme::Stratified { shuffle: true }),
            "stratified-ordered" => Ok(ResamplingScheme::Stratified { shuffle: false }),
            "systematic" => Ok(ResamplingScheme::Systematic),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ResamplingScheme::Multinomial => "multinomial",
            ResamplingScheme::Stratified { shuffle: true } => "stratified",
            ResamplingScheme::Stratified { shuffle: false } => "stratified-ordered",
            ResamplingScheme::Systematic => "systematic",
        }
    }
}

/// Normalised weights with their cumulative vector
/// (`cumulative[0] = 0`, ..., `cumulative[N] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// All weights equal; samplers take integer shortcuts.
    uniform: bool,
}

impl WeightVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Degenerate vector putting all mass on one parent — the boundary case
    /// that `normalize` rejects.
    pub fn point_mass(n: usize, index: usize) -> Self {
        assert!(index < n);
        let mut weights = vec![0.0; n];
        weights[index] = 1.0;
        let mut cumulative = vec![0.0; n + 1];
        for i in index..n {
            cumulative[i + 1] = 1.0;
        }
        WeightVector {
            weights,
            cumulative,
            uniform: n == 1,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Index `m` with `cumulative[m] <= u < cumulative[m+1]`; ties resolve to
    /// the right-closed-left-open convention.
    pub fn locate(&self, u: f64) -> usize {
        let m = self.cumulative.partition_point(|&c| c <= u);
        m.saturating_sub(1).min(self.len() - 1)
    }

    fn check(&self) -> bool {
        let sum: f64 = self.weights.iter().sum();
        (sum - 1.0).abs() <= WEIGHT_SUM_TOL
            && self.cumulative.len() == self.weights.len() + 1
            && self
                .weights
                .iter()
                .enumerate()
                .all(|(i, &w)| (self.cumulative[i + 1] - self.cumulative[i] - w).abs() < 1e-12)
    }
}

/// Normalises strictly positive values into a [`WeightVector`].
pub fn normalize(values: &[f64]) -> Result<WeightVector> {
    if values.is_empty() {
        return Err(Error::NonPositiveWeight);
    }
    let sum: f64 = values.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::NonPositiveWeight);
    }
    let weights: Vec<f64> = values.iter().map(|&v| v / sum).collect();
    if weights.iter().any(|&w| !(w > 1e-300)) {
        return Err(Error::NonPositiveWeight);
    }
    let mut cumulative = Vec::with_capacity(weights.len() + 1);
    cumulative.push(0.0);
    let mut acc = 0.0;
    for &w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    *cumulative.last_mut().unwrap() = 1.0;
    let first = weights[0];
    let uniform = weights.iter().all(|&w| (w - first).abs() < 1e-15);
    let w = WeightVector {
        weights,
        cumulative,
        uniform,
    };
    debug_assert!(w.check());
    Ok(w)
}

/// One generation's parent assignment, with the stratified reshuffle when
/// the scheme drew one (needed to trace genealogies exactly).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AncestorVector {
    pub parents: Vec<u32>,
    pub shuffle: Option<Vec<u32>>,
}

/// Children draw i.i.d. categorical parents.
pub fn multinomial_ancestors(w: &WeightVector, rng: &mut impl Rng) -> AncestorVector {
    let n = w.len();
    let parents = if w.is_uniform() {
        (0..n).map(|_| rng.random_range(0..n) as u32).collect()
    } else {
        (0..n)
            .map(|_| w.locate(rng.random::<f64>()) as u32)
            .collect()
    };
    AncestorVector {
        parents,
        shuffle: None,
    }
}

/// Child `i` receives stratum `sigma(i)` (identity when `shuffle` is off) and
/// picks the parent whose cumulative-weight interval contains a uniform draw
/// from that stratum.
pub fn stratified_ancestors(w: &WeightVector, shuffle: bool, rng: &mut impl Rng) -> AncestorVector {
    let n = w.len();
    let sigma: Option<Vec<u32>> = if shuffle {
        let mut perm: Vec<u32> = (0..n as u32).collect();
        perm.shuffle(rng);
        Some(perm)
    } else {
        None
    };
    let inv_n = 1.0 / n as f64;
    let mut parents = vec![0u32; n];
    for i in 0..n {
        let stratum = sigma.as_ref().map_or(i, |s| s[i] as usize);
        let u = (stratum as f64 + rng.random::<f64>()) * inv_n;
        parents[i] = w.locate(u) as u32;
    }
    AncestorVector {
        parents,
        shuffle: sigma,
    }
}

/// Single shared uniform: child `i` uses pointer `i/N + U` with
/// `U ~ U(0, 1/N)`. Family sizes are the stochastic rounding of `N w`.
pub fn systematic_ancestors(w: &WeightVector, rng: &mut impl Rng) -> AncestorVector {
    let n = w.len();
    let inv_n = 1.0 / n as f64;
    let u = rng.random::<f64>() * inv_n;
    let mut parents = vec![0u32; n];
    let mut m = 0usize;
    for i in 0..n {
        let pointer = i as f64 * inv_n + u;
        while m + 1 < n && w.cumulative[m + 1] <= pointer {
            m += 1;
        }
        parents[i] = m as u32;
    }
    AncestorVector {
        parents,
        shuffle: None,
    }
}

/// Family sizes `nu(i) = #\{j : a(j) = i\}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilySizes {
    pub counts: Vec<u32>,
}

impl FamilySizes {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

pub fn family_sizes(a: &AncestorVector) -> FamilySizes {
    let mut counts = vec![0u32; a.parents.len()];
    for &p in &a.parents {
        counts[p as usize] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<u32>() as usize, a.parents.len());
    FamilySizes { counts }
}

/// The reverse-time ancestor law of a single lineage under multinomial
/// resampling: `p(m)` is proportional to
/// `g_k(x_parents[m]) * M_k(x_parents[m], child_state)`.
pub fn backward_ancestor_distribution(
    model: &ModelSpec,
    k: usize,
    x_parents: &[u8],
    child_state: u8,
) -> Vec<f64> {
    let pot = model.potential(k);
    let mut p: Vec<f64> = x_parents
        .iter()
        .map(|&x| pot[x as usize] * model.kernel(k, x as usize, child_state as usize))
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, compute_mixing_certificate, BuiltinParams};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_basic() {
        let w = normalize(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.weights, vec![0.25; 4]);
        let w = normalize(&[2.0, 1.0, 1.0]).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.25, 0.25]);
        assert!(normalize(&[1.0, 0.0]).is_err());
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn normalize_counterexample_weights() {
        let z = 1.0 / 24.0;
        let w = normalize(&[1.0 - 3.0 * z, z, z, z]).unwrap();
        assert!((w.weights[0] - 0.875).abs() < 1e-15);
        for i in 1..4 {
            assert!((w.weights[i] - z).abs() < 1e-15);
        }
    }

    #[test]
    fn multinomial_point_mass_sends_everyone_to_one_parent() {
        let w = WeightVector::point_mass(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let anc = multinomial_ancestors(&w, &mut rng);
        assert!(anc.parents.iter().all(|&p| p == 3));
        let nu = family_sizes(&anc);
        assert_eq!(nu.counts, vec![0, 0, 0, 6, 0, 0]);
    }

    #[test]
    fn multinomial_uniform_frequencies_and_collisions() {
        let n = 1000;
        let w = normalize(&vec![1.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut count_parent0 = 0usize;
        let mut collisions = 0usize;
        for _ in 0..draws {
            // Two fixed children suffice; no need to draw the full vector.
            let a = w.locate(rng.random::<f64>());
            let b = w.locate(rng.random::<f64>());
            if a == 0 {
                count_parent0 += 1;
            }
            if a == b {
                collisions += 1;
            }
        }
        let p = 1.0 / n as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((count_parent0 as f64 / draws as f64 - p).abs() < 4.0 * se);
        // Pair-collision probability is sum of squared weights = 1/N.
        assert!((collisions as f64 / draws as f64 - p).abs() < 4.0 * se);
    }

    #[test]
    fn stratified_ordered_counterexample_weights_pin_first_three_strata() {
        // First parent's interval covers the first three strata whenever
        // z <= 1/12, so those children always choose parent 0.
        for &z in &[1.0 / 24.0, 1.0 / 12.0, 0.01] {
            let w = normalize(&[1.0 - 3.0 * z, z, z, z]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..200 {
                let anc = stratified_ancestors(&w, false, &mut rng);
                assert_eq!(anc.parents[0], 0);
                assert_eq!(anc.parents[1], 0);
                assert_eq!(anc.parents[2], 0);
            }
        }
    }

    #[test]
    fn stratified_family_sizes_stay_within_two_of_expectation() {
        let values = [0.31, 0.07, 0.22, 0.4];
        let w = normalize(&values).unwrap();
        let n = w.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100_000 {
            let anc = stratified_ancestors(&w, true, &mut rng);
            let nu = family_sizes(&anc);
            for (i, &c) in nu.counts.iter().enumerate() {
                assert!(
                    (c as f64 - n * w.weights[i]).abs() < 2.0,
                    "family size {c} too far from {}",
                    n * w.weights[i]
                );
            }
        }
    }

    #[test]
    fn systematic_is_a_stochastic_rounding() {
        // N w_1 = 2.3 here, so nu(1) must be 2 or 3 with P(3) = 0.3.
        let w = normalize(&[0.14, 0.23, 0.33, 0.05, 0.1, 0.03, 0.07, 0.03, 0.01, 0.01]).unwrap();
        let n = w.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut upper = 0usize;
        let mut sums = vec![0f64; w.len()];
        for _ in 0..draws {
            let anc = systematic_ancestors(&w, &mut rng);
            let nu = family_sizes(&anc);
            for (i, &c) in nu.counts.iter().enumerate() {
                let exact = n * w.weights[i];
                let lo = exact.floor();
                assert!(
                    c as f64 == lo || c as f64 == lo + 1.0,
                    "nu({i}) = {c} outside {{{lo}, {}}}",
                    lo + 1.0
                );
                sums[i] += c as f64;
            }
            if nu.counts[1] == 3 {
                upper += 1;
            }
        }
        let p = n * w.weights[1] - (n * w.weights[1]).floor();
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((upper as f64 / draws as f64 - p).abs() < 4.0 * se);
        // E[nu(i)] = N w_i.
        for i in 0..w.len() {
            let mean = sums[i] / draws as f64;
            let se_mean = 0.5 / (draws as f64).sqrt();
            assert!((mean - n * w.weights[i]).abs() < 4.0 * se_mean);
        }
    }

    #[test]
    fn systematic_equal_weights_is_identity() {
        let w = normalize(&[1.0; 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let anc = systematic_ancestors(&w, &mut rng);
            assert_eq!(anc.parents, (0..7).collect::<Vec<u32>>());
        }
    }

    #[test]
    fn family_sizes_examples() {
        let a = AncestorVector {
            parents: vec![0, 0, 1],
            shuffle: None,
        };
        assert_eq!(family_sizes(&a).counts, vec![2, 1, 0]);
        let a = AncestorVector {
            parents: vec![2; 5],
            shuffle: None,
        };
        assert_eq!(family_sizes(&a).counts, vec![0, 0, 5, 0, 0]);
    }

    #[test]
    fn backward_distribution_closed_forms() {
        let model = builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap();
        // Kernel constant in x would cancel; with the neutral model the law
        // is exactly uniform.
        let neutral = builtin_model(
            "neutral-uniform",
            &BuiltinParams {
                states: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let p = backward_ancestor_distribution(&neutral, 0, &[0, 1, 0, 1], 1);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        // A kernel that ignores the parent state cancels entirely, leaving
        // the normalised potentials.
        let flat = ModelSpec::stationary(
            "flat-kernel",
            vec![1.0, 3.0],
            vec![vec![0.4, 0.6], vec![0.4, 0.6]],
        )
        .unwrap();
        let p = backward_ancestor_distribution(&flat, 0, &[0, 1], 0);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);

        // Hand evaluation of the two-state display for parents (0,1,1,0,1,0)
        // and child state 1: state 0 contributes 0.5*0.3, state 1 is 2*0.7.
        let parents = [0u8, 1, 1, 0, 1, 0];
        let p = backward_ancestor_distribution(&model, 0, &parents, 1);
        let raw: Vec<f64> = parents
            .iter()
            .map(|&x| if x == 0 { 0.5 * 0.3 } else { 2.0 * 0.7 })
            .collect();
        let sum: f64 = raw.iter().sum();
        for (a, b) in p.iter().zip(raw.iter()) {
            assert!((a - b / sum).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_distribution_respects_mixing_bounds() {
        let model = builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap();
        let cert = compute_mixing_certificate(&model).unwrap();
        let g4 = cert.gamma.powi(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(2..30usize);
            let parents: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let child = rng.random_range(0..2) as u8;
            let p = backward_ancestor_distribution(&model, 0, &parents, child);
            for &v in &p {
                assert!(v >= 1.0 / (g4 * n as f64) - 1e-15);
                assert!(v <= g4 / n as f64 + 1e-15);
            }
        }
    }

    #[test]
    fn marginal_law_chi_square_all_schemes() {
        // Pooled over children (the shuffle averaging for the deterministic
        // schemes), parent frequencies follow the weight law.
        let values = [0.31, 0.07, 0.22, 0.4];
        let w = normalize(&values).unwrap();
        let n = w.len();
        let draws = 100_000usize;
        for (stream, scheme) in [
            ResamplingScheme::Multinomial,
            ResamplingScheme::Stratified { shuffle: true },
            ResamplingScheme::Stratified { shuffle: false },
            ResamplingScheme::Systematic,
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(9 + stream as u64);
            let mut counts = vec![0u64; n];
            for _ in 0..draws {
                let anc = scheme.sample(&w, &mut rng);
                for &p in &anc.parents {
                    counts[p as usize] += 1;
                }
            }
            let total = (draws * n) as f64;
            let mut chi2 = 0.0;
            for i in 0..n {
                let e = total * w.weights[i];
                chi2 += (counts[i] as f64 - e).powi(2) / e;
            }
            let p_value = crate::kingman::chi_square_p_value(chi2, (n - 1) as f64);
            assert!(
                p_value > 0.001,
                "{}: chi2 = {chi2}, p = {p_value}",
                scheme.label()
            );
        }
    }

    proptest! {
        #[test]
        fn normalize_invariants(values in proptest::collection::vec(0.01f64..10.0, 1..40)) {
            let w = normalize(&values).unwrap();
            let sum: f64 = w.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..w.len() {
                prop_assert!(w.cumulative[i + 1] > w.cumulative[i]);
                prop_assert!((w.cumulative[i + 1] - w.cumulative[i] - w.weights[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn family_sizes_sum_to_population(parents in proptest::collection::vec(0u32..17, 17)) {
            let a = AncestorVector { parents, shuffle: None };
            prop_assert_eq!(family_sizes(&a).total(), 17);
        }
    }
}
