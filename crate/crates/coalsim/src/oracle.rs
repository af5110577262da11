//! Brute-force enumeration oracles for tiny populations.
//!
//! Everything here is deliberately slow and simple: exact rational
//! arithmetic, explicit enumeration of parent assignments, no filtering
//! tricks. These values anchor the fast implementations elsewhere in the
//! crate.
//!
//! ```
//! use coalsim::oracle::{counterexample_report, rational};
//!
//! // Ordered weights (1-3z, z, z, z) over four parents, three lineages:
//! // stratified resampling merges with certainty, multinomial does not.
//! let rec = counterexample_report(&rational(1, 24)).unwrap();
//! assert_eq!(rec.p_s, rational(1, 1));
//! assert!(rec.p_m < rec.p_s);
//! // Yet the second factorial moments order the other way round.
//! assert!(rec.moments_m[0] > rec.moments_s[0]);
//! ```

use crate::lineage::{binom2, pair_index, CoalescenceProfile};
use crate::model::{ForwardRun, ModelSpec};
use crate::resampling::backward_ancestor_distribution;
use crate::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use std::collections::HashMap;

pub type Rational = BigRational;

const MAX_N: usize = 8;
const MAX_LINEAGES: usize = 4;

/// Shorthand for small rational constants.
pub fn rational(num: i64, den: i64) -> Rational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Schemes with an exact enumeration. Systematic resampling is only reachable
/// through the Monte Carlo estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleScheme {
    Multinomial,
    /// Lineages occupy strata `0..n`, mirroring their child indices.
    StratifiedOrdered,
    /// Averaged over all distinct placements of the lineages into strata.
    StratifiedShuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Enumeration,
    ClosedForm,
}

/// An exact value with its f64 projection.
#[derive(Debug, Clone)]
pub struct ExactResult {
    pub exact: Rational,
    pub value: f64,
    pub method: Method,
}

impl ExactResult {
    fn enumerated(exact: Rational) -> Self {
        let value = exact.to_f64().unwrap_or(f64::NAN);
        ExactResult {
            exact,
            value,
            method: Method::Enumeration,
        }
    }
}

fn check_weights(weights: &[Rational]) -> Result<()> {
    if weights.iter().any(|w| w.is_negative()) {
        return Err(Error::NonPositiveWeight);
    }
    let sum: Rational = weights.iter().sum();
    if !sum.is_one() {
        return Err(Error::NonPositiveWeight);
    }
    Ok(())
}

/// Cumulative weight boundaries `0 = c_0 <= ... <= c_N = 1`.
fn cumulative(weights: &[Rational]) -> Vec<Rational> {
    let mut cum = Vec::with_capacity(weights.len() + 1);
    cum.push(Rational::zero());
    for w in weights {
        let last = cum.last().unwrap().clone();
        cum.push(last + w);
    }
    cum
}

/// `p[h][m]`: probability that the uniform in stratum `h` lands in parent
/// `m`'s weight interval — `N * |stratum_h intersect I_m|`, exactly.
fn stratum_parent_laws(weights: &[Rational]) -> Vec<Vec<Rational>> {
    let n = weights.len();
    let cum = cumulative(weights);
    let n_rat = Rational::from_integer(BigInt::from(n as i64));
    let mut laws = vec![vec![Rational::zero(); n]; n];
    for h in 0..n {
        let lo = rational(h as i64, n as i64);
        let hi = rational(h as i64 + 1, n as i64);
        for m in 0..n {
            let a = if cum[m] > lo { cum[m].clone() } else { lo.clone() };
            let b = if cum[m + 1] < hi {
                cum[m + 1].clone()
            } else {
                hi.clone()
            };
            if b > a {
                laws[h][m] = (b - a) * n_rat.clone();
            }
        }
    }
    laws
}

/// Sum over distinct parent tuples of the product of per-lineage laws.
fn no_collision_mass(laws: &[&[Rational]]) -> Rational {
    fn recurse(laws: &[&[Rational]], depth: usize, used: &mut Vec<bool>) -> Rational {
        if depth == laws.len() {
            return Rational::one();
        }
        let mut acc = Rational::zero();
        for m in 0..used.len() {
            if used[m] || laws[depth][m].is_zero() {
                continue;
            }
            used[m] = true;
            acc += laws[depth][m].clone() * recurse(laws, depth + 1, used);
            used[m] = false;
        }
        acc
    }
    let n = laws[0].len();
    recurse(laws, 0, &mut vec![false; n])
}

/// Exact probability that at least two of `n_lineages` children share a
/// parent in one resampling round with the given weights. The setting is
/// kernel-free: a single round, forward weights only.
pub fn exact_merger_probability(
    weights: &[Rational],
    scheme: OracleScheme,
    n_lineages: usize,
) -> Result<ExactResult> {
    let n = weights.len();
    if n > MAX_N || n_lineages > MAX_LINEAGES {
        return Err(Error::TooLarge {
            max_n: MAX_N,
            max_r: MAX_LINEAGES,
        });
    }
    if n_lineages < 2 || n_lineages > n {
        return Err(Error::OutOfRange("n_lineages".into()));
    }
    check_weights(weights)?;
    let survive = match scheme {
        OracleScheme::Multinomial => {
            let laws: Vec<&[Rational]> = (0..n_lineages).map(|_| weights).collect();
            no_collision_mass(&laws)
        }
        OracleScheme::StratifiedOrdered => {
            let laws = stratum_parent_laws(weights);
            let chosen: Vec<&[Rational]> = (0..n_lineages).map(|h| laws[h].as_slice()).collect();
            no_collision_mass(&chosen)
        }
        OracleScheme::StratifiedShuffled => {
            let laws = stratum_parent_laws(weights);
            let mut acc = Rational::zero();
            let mut count = 0u64;
            let mut strata = vec![0usize; n_lineages];
            enumerate_distinct(n, n_lineages, &mut strata, &mut |assignment| {
                let chosen: Vec<&[Rational]> =
                    assignment.iter().map(|&h| laws[h].as_slice()).collect();
                acc += no_collision_mass(&chosen);
                count += 1;
            });
            acc / Rational::from_integer(BigInt::from(count))
        }
    };
    Ok(ExactResult::enumerated(Rational::one() - survive))
}

fn enumerate_distinct(
    n: usize,
    depth_left: usize,
    prefix: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    fn inner(
        n: usize,
        total: usize,
        depth: usize,
        prefix: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]),
    ) {
        if depth == total {
            f(prefix);
            return;
        }
        for cand in 0..n {
            if !prefix[..depth].contains(&cand) {
                prefix[depth] = cand;
                inner(n, total, depth + 1, prefix, f);
            }
        }
    }
    let total = depth_left;
    inner(n, total, 0, prefix, f);
}

/// Exact second factorial moment `E[(nu(parent))_2]` of a family size.
/// Multinomial uses the binomial closed form; stratified builds the exact
/// distribution of the Bernoulli-sum over strata overlaps.
pub fn exact_factorial_moment(
    weights: &[Rational],
    scheme: OracleScheme,
    parent: usize,
) -> Result<ExactResult> {
    let n = weights.len();
    if n > MAX_N {
        return Err(Error::TooLarge {
            max_n: MAX_N,
            max_r: MAX_LINEAGES,
        });
    }
    if parent >= n {
        return Err(Error::OutOfRange("parent".into()));
    }
    check_weights(weights)?;
    let n2 = rational((n * (n - 1)) as i64, 1);
    let moment = match scheme {
        OracleScheme::Multinomial => n2 * weights[parent].clone() * weights[parent].clone(),
        OracleScheme::StratifiedOrdered | OracleScheme::StratifiedShuffled => {
            // nu(parent) counts how many strata uniforms land in the parent's
            // interval; the shuffle permutes children, not the count.
            let laws = stratum_parent_laws(weights);
            let mut dist = vec![Rational::one()];
            for row in laws.iter() {
                let p = row[parent].clone();
                let q = Rational::one() - p.clone();
                let mut next = vec![Rational::zero(); dist.len() + 1];
                for (m, mass) in dist.iter().enumerate() {
                    next[m] += mass.clone() * q.clone();
                    next[m + 1] += mass.clone() * p.clone();
                }
                dist = next;
            }
            let mut moment = Rational::zero();
            for (m, mass) in dist.iter().enumerate() {
                moment += rational((m * m.saturating_sub(1)) as i64, 1) * mass.clone();
            }
            moment
        }
    };
    Ok(ExactResult::enumerated(moment))
}

/// The merger-ordering counterexample record at one `z`: exact merger
/// probabilities and second factorial moments under stratified (ordered and
/// shuffle-averaged) and multinomial resampling for the ordered weights
/// `(1 - 3z, z, z, z)` and three lineages, cross-checked against the
/// closed-form polynomials.
#[derive(Debug, Clone)]
pub struct CounterexampleRecord {
    pub z: Rational,
    /// Stratified (ordered strata) merger probability: identically one.
    pub p_s: Rational,
    /// Multinomial merger probability: `1 - 18 z^2 + 48 z^3`.
    pub p_m: Rational,
    /// Shuffle-averaged stratified merger probability, reported alongside.
    pub p_s_shuffled: Rational,
    /// `E_S[(nu(i))_2]`, i = 0..3: `(12 - 72z, 0, 0, 0)`.
    pub moments_s: Vec<Rational>,
    /// `E_M[(nu(i))_2]`: `(12 - 72z + 108 z^2, 12 z^2, 12 z^2, 12 z^2)`.
    pub moments_m: Vec<Rational>,
}

pub fn counterexample_weights(z: &Rational) -> Vec<Rational> {
    vec![
        Rational::one() - rational(3, 1) * z.clone(),
        z.clone(),
        z.clone(),
        z.clone(),
    ]
}

pub fn counterexample_report(z: &Rational) -> Result<CounterexampleRecord> {
    if z.is_negative() || z > &rational(1, 12) {
        return Err(Error::OutOfRange("z must lie in [0, 1/12]".into()));
    }
    let w = counterexample_weights(z);

    let p_m_closed = Rational::one() - rational(18, 1) * z * z + rational(48, 1) * z * z * z;
    let m1_s_closed = rational(12, 1) - rational(72, 1) * z;
    let m1_m_closed = rational(12, 1) - rational(72, 1) * z + rational(108, 1) * z * z;
    let mi_m_closed = rational(12, 1) * z * z;

    let p_m = exact_merger_probability(&w, OracleScheme::Multinomial, 3)?.exact;
    let p_s = exact_merger_probability(&w, OracleScheme::StratifiedOrdered, 3)?.exact;
    let p_s_shuffled = exact_merger_probability(&w, OracleScheme::StratifiedShuffled, 3)?.exact;
    let mut moments_s = Vec::with_capacity(4);
    let mut moments_m = Vec::with_capacity(4);
    for i in 0..4 {
        moments_s.push(exact_factorial_moment(&w, OracleScheme::StratifiedOrdered, i)?.exact);
        moments_m.push(exact_factorial_moment(&w, OracleScheme::Multinomial, i)?.exact);
    }

    // Dual-path agreement is exact in rational arithmetic.
    if p_m != p_m_closed
        || p_s != Rational::one()
        || moments_s[0] != m1_s_closed
        || moments_m[0] != m1_m_closed
        || (1..4).any(|i| moments_m[i] != mi_m_closed || !moments_s[i].is_zero())
    {
        return Err(Error::Internal(
            "enumeration disagrees with the closed forms".into(),
        ));
    }
    // Merger probabilities order one way, factorial moments the other.
    if !(p_m <= p_s) || (!z.is_zero() && p_m == p_s) {
        return Err(Error::Internal("merger ordering violated".into()));
    }
    for i in 0..4 {
        if moments_m[i] < moments_s[i] {
            return Err(Error::Internal("moment ordering violated".into()));
        }
    }
    Ok(CounterexampleRecord {
        z: z.clone(),
        p_s,
        p_m,
        p_s_shuffled,
        moments_s,
        moments_m,
    })
}

/// Checks `(sum x)^alpha <= distinct-tuple sum + C(alpha,2) sum x^2 (sum x)^(alpha-2)`
/// together with its two rearranged signed forms, to 1e-9 relative slack.
pub fn verify_multinomial_lemma(x: &[f64], alpha: usize) -> Result<bool> {
    if alpha < 2 || alpha > x.len() {
        return Err(Error::BadArity);
    }
    let sum: f64 = x.iter().sum();
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    let mut distinct = 0.0;
    let mut idx = vec![0usize; alpha];
    enumerate_distinct(x.len(), alpha, &mut idx, &mut |tuple| {
        distinct += tuple.iter().map(|&i| x[i]).product::<f64>();
    });
    let choose2 = binom2(alpha);
    let correction = choose2 * sum_sq * sum.powi(alpha as i32 - 2);
    let lhs = sum.powi(alpha as i32);
    let slack = 1e-9 * lhs.abs().max(1.0);
    let base = lhs <= distinct + correction + slack;

    // Rearranged signed forms used when expanding products of survival
    // probabilities: each bounds the distinct-tuple sum by the plain power
    // sum plus/minus the same correction.
    let sign = if alpha % 2 == 0 { 1.0 } else { -1.0 };
    let upper = sign * distinct <= sign * lhs + correction + slack;
    let lower = sign * distinct >= sign * lhs - correction - slack;
    Ok(base && upper && lower)
}

/// Checks the left-stochastic lower bound: the probability that `r` draws
/// from columns `ell` are pairwise distinct and avoid row `v` is at least
/// one minus the single-row masses minus the pairwise collision masses.
pub fn verify_left_stochastic_lemma(a: &[Vec<f64>], v: usize, ell: &[usize]) -> Result<bool> {
    let n = a.len();
    let r = ell.len();
    if n > 7 || r > MAX_LINEAGES {
        return Err(Error::TooLarge {
            max_n: 7,
            max_r: MAX_LINEAGES,
        });
    }
    if v >= n || ell.iter().any(|&l| l >= n) {
        return Err(Error::OutOfRange("indices".into()));
    }
    for col in 0..n {
        let sum: f64 = (0..n).map(|row| a[row][col]).sum();
        if (sum - 1.0).abs() > 1e-9 || (0..n).any(|row| a[row][col] < 0.0) {
            return Err(Error::NotStochastic);
        }
    }
    let mut lhs = 0.0;
    let mut idx = vec![0usize; r];
    enumerate_distinct(n, r, &mut idx, &mut |tuple| {
        if tuple.contains(&v) {
            return;
        }
        lhs += tuple
            .iter()
            .enumerate()
            .map(|(i, &vi)| a[vi][ell[i]])
            .product::<f64>();
    });
    let single: f64 = ell.iter().map(|&l| a[v][l]).sum();
    let mut pairwise = 0.0;
    for h in 0..r {
        for h2 in (h + 1)..r {
            for vp in 0..n {
                if vp != v {
                    pairwise += a[vp][ell[h]] * a[vp][ell[h2]];
                }
            }
        }
    }
    let rhs = 1.0 - single - pairwise;
    Ok(lhs >= rhs - 1e-9 * rhs.abs().max(1.0))
}

/// Full-enumeration reference for the exact lineage filter: tracks the
/// conditional label-tuple distribution explicitly and classifies every
/// parent assignment by brute force. Multinomial resampling, tiny runs only.
pub fn exact_profile_enumeration(
    model: &ModelSpec,
    run: &ForwardRun,
    start_labels: &[usize],
    start: usize,
    horizon: usize,
) -> Result<CoalescenceProfile> {
    let n = run.population;
    let b = start_labels.len();
    if n > MAX_N || b > 3 {
        return Err(Error::TooLarge {
            max_n: MAX_N,
            max_r: 3,
        });
    }
    let pairs = pair_index(b);
    let mut dist: HashMap<Vec<usize>, f64> = HashMap::new();
    dist.insert(start_labels.to_vec(), 1.0);
    let mut values = Vec::new();
    let mut pair_values = vec![Vec::new(); pairs.len()];
    let mut multi_values = Vec::new();

    for k in (start + 1)..=horizon {
        let fi = run.forward_index_of_rev_step(k);
        let parent_states = run.locations_rev(k);
        let child_states = run.locations_rev(k - 1);
        let mut merge = 0.0;
        let mut pair_acc = vec![0.0; pairs.len()];
        let mut multi = 0.0;
        let mut next: HashMap<Vec<usize>, f64> = HashMap::new();
        for (labels, &mass) in &dist {
            let laws: Vec<Vec<f64>> = labels
                .iter()
                .map(|&v| {
                    backward_ancestor_distribution(model, fi, parent_states, child_states[v])
                })
                .collect();
            let mut assignment = vec![0usize; b];
            loop {
                let p: f64 = (0..b).map(|i| laws[i][assignment[i]]).product();
                let outcome_mass = mass * p;
                let mut collided = Vec::new();
                for (pi, &(i, j)) in pairs.iter().enumerate() {
                    if assignment[i] == assignment[j] {
                        collided.push(pi);
                    }
                }
                if collided.is_empty() {
                    *next.entry(assignment.clone()).or_insert(0.0) += outcome_mass;
                } else {
                    merge += outcome_mass;
                    if collided.len() == 1 {
                        pair_acc[collided[0]] += outcome_mass;
                    } else {
                        multi += outcome_mass;
                    }
                }
                // Next assignment in base N.
                let mut pos = 0;
                loop {
                    if pos == b {
                        break;
                    }
                    assignment[pos] += 1;
                    if assignment[pos] < n {
                        break;
                    }
                    assignment[pos] = 0;
                    pos += 1;
                }
                if pos == b {
                    break;
                }
            }
        }
        let survive: f64 = next.values().sum();
        for mass in next.values_mut() {
            *mass /= survive;
        }
        dist = next;
        values.push(merge / binom2(b));
        for (pi, v) in pair_acc.iter().enumerate() {
            pair_values[pi].push(*v);
        }
        multi_values.push(multi);
    }

    Ok(CoalescenceProfile {
        xi_size: b,
        start,
        values,
        pair_index: pairs,
        pair_values,
        multi_values,
        exact: true,
        ci_halfwidth: None,
    })
}

/// Convenience: exact rational weights from integer counts (used by tests
/// and the CLI z-grid via float-to-rational conversion).
pub fn rational_from_f64(x: f64) -> Option<Rational> {
    BigRational::from_f64(x)
}
