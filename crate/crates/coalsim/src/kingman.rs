//! The reference Kingman coalescent and end-to-end convergence experiments.
//!
//! The experiment pipeline: simulate a particle system forward, trace the
//! genealogy of the first `n` terminal particles, compute the quenched
//! coalescence profile along the run, push the realised first-merger
//! generation through the profile's cumulative sum, and compare the
//! resulting rescaled times against the exponential holding times of the
//! Kingman coalescent.
//!
//! ```
//! use coalsim::kingman::{holding_survivor, sample_kingman};
//! use rand::SeedableRng;
//!
//! assert!((holding_survivor(2, 1.0) - (-1.0f64).exp()).abs() < 1e-15);
//! assert_eq!(holding_survivor(5, 0.0), 1.0);
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
//! let sample = sample_kingman(4, &mut rng).unwrap();
//! assert_eq!(sample.holding_times.len(), 3);
//! ```

use crate::genealogy::trace;
use crate::lineage::{binom2, estimate_profile_mc, pair_index, BackwardTables, StateFilter};
use crate::model::{
    compute_mixing_certificate, replicate_rng, simulate_forward_with, ModelSpec,
};
use crate::resampling::ResamplingScheme;
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Small statistics toolbox.
// ---------------------------------------------------------------------------

/// Lanczos approximation of `ln Gamma(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularised lower incomplete gamma `P(a, x)`; series for small `x`,
/// continued fraction otherwise.
fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        (sum.ln() + a * x.ln() - x - ln_gamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (a * x.ln() - x - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Upper-tail p-value of a chi-square statistic with `df` degrees of freedom.
pub fn chi_square_p_value(statistic: f64, df: f64) -> f64 {
    (1.0 - reg_lower_gamma(df / 2.0, statistic / 2.0)).clamp(0.0, 1.0)
}

/// Kolmogorov–Smirnov sup-distance between the sample ECDF and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::TooFewSamples {
            min: 10,
            got: samples.len(),
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        sup = sup.max((f - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - f).abs());
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// The reference coalescent.
// ---------------------------------------------------------------------------

/// One draw of the Kingman `n`-coalescent: holding times at block counts
/// `n, n-1, .., 2` and the merged block-index pairs (indices into the
/// lexicographically ordered block list at each step).
#[derive(Debug, Clone)]
pub struct CoalescentSample {
    pub holding_times: Vec<f64>,
    pub merger_pairs: Vec<(usize, usize)>,
}

/// Every pair of blocks merges at unit rate: at `k` blocks the holding time
/// is exponential with rate `binom(k, 2)` and the merging pair is uniform.
pub fn sample_kingman(n: usize, rng: &mut impl Rng) -> Result<CoalescentSample> {
    if n < 2 {
        return Err(Error::OutOfRange("n must be >= 2".into()));
    }
    let mut blocks: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut holding_times = Vec::with_capacity(n - 1);
    let mut merger_pairs = Vec::with_capacity(n - 1);
    while blocks.len() > 1 {
        let k = blocks.len();
        let rate = binom2(k);
        let u: f64 = 1.0 - rng.random::<f64>();
        holding_times.push(-u.ln() / rate);
        let pairs = pair_index(k);
        let &(i, j) = &pairs[rng.random_range(0..pairs.len())];
        merger_pairs.push((i, j));
        let absorbed = blocks.remove(j);
        blocks[i].extend(absorbed);
        blocks[i].sort_unstable();
        blocks.sort_by_key(|b| b[0]);
    }
    Ok(CoalescentSample {
        holding_times,
        merger_pairs,
    })
}

/// Survivor function of the holding time at `k` blocks.
pub fn holding_survivor(k: usize, t: f64) -> f64 {
    (-binom2(k) * t).exp()
}

// ---------------------------------------------------------------------------
// The convergence experiment.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    /// Rescaled-time range the run must support (profiles accumulate at
    /// least this much mass, plus enough for a <= 0.5% horizon-failure rate).
    pub t_max: f64,
    pub replicates: usize,
    pub master_seed: u64,
    /// Fixed horizon instead of the pilot-calibrated one.
    pub horizon_override: Option<usize>,
    /// For n = 3: restart after the first binary merger and test the second
    /// epoch against Exponential(1).
    pub track_second_epoch: bool,
    /// Replicates for per-run Monte Carlo profiles (non-multinomial schemes).
    pub mc_profile_replicates: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            t_max: 3.0,
            replicates: 1000,
            master_seed: 0,
            horizon_override: None,
            track_second_epoch: false,
            mc_profile_replicates: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub t_sample: Option<f64>,
    pub pair: Option<(usize, usize)>,
    /// Lineages lost in the first merger plus one (2 = binary).
    pub merger_size: usize,
    pub horizon_failed: bool,
    pub second_epoch_t: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SecondEpochReport {
    pub times: Vec<f64>,
    pub ks_statistic: f64,
    pub failures: u64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub model_name: String,
    pub scheme: ResamplingScheme,
    pub population: usize,
    pub sample_size: usize,
    pub replicates: usize,
    pub horizon: usize,
    pub rescaled_first_merger_times: Vec<f64>,
    pub pair_index: Vec<(usize, usize)>,
    /// Binary mergers per block pair; together with `multi_merger_count`
    /// and `horizon_failures` these account for every replicate.
    pub merged_pair_counts: Vec<u64>,
    pub multi_merger_count: u64,
    pub horizon_failures: u64,
    /// KS distance of the rescaled first-merger times against
    /// `Exponential(binom(n, 2))`.
    pub ks_statistic: f64,
    /// Chi-square uniformity p-value over the merged pairs.
    pub chi2_p: f64,
    pub second_epoch: Option<SecondEpochReport>,
    pub replicate_rows: Vec<ReplicateRow>,
}

struct ReplicateOutcome {
    t_sample: Option<f64>,
    pair: Option<(usize, usize)>,
    merger_size: usize,
    horizon_failed: bool,
    second: Option<Option<f64>>,
}

/// Cumulative scaled merger mass through reverse generation `upto` for the
/// exact multinomial filter, starting from `labels` at `start`.
fn exact_cumulative(
    model: &ModelSpec,
    run: &crate::model::ForwardRun,
    labels: &[usize],
    start: usize,
    upto: usize,
) -> Result<f64> {
    let s = model.state_count();
    let states: Vec<u8> = labels
        .iter()
        .map(|&l| run.locations_rev(start)[l])
        .collect();
    let mut filter = StateFilter::from_states(&states, s)?;
    let b = labels.len();
    let mut cum = 0.0;
    for k in (start + 1)..=upto {
        let fi = run.forward_index_of_rev_step(k);
        let counts = run.state_counts(fi, s);
        let tables = BackwardTables::new(model, fi, &counts);
        cum += filter.step(&tables).merge_prob / binom2(b);
    }
    Ok(cum)
}

/// Mean per-generation scaled merger probability from a pilot run; the
/// calibration for horizon sizing.
fn pilot_mean_rate(
    model: &ModelSpec,
    scheme: ResamplingScheme,
    population: usize,
    arity: usize,
    pilot_horizon: usize,
    settings: &ExperimentSettings,
) -> Result<f64> {
    let mut rng = replicate_rng(settings.master_seed, u64::MAX);
    let run = simulate_forward_with(
        model,
        population,
        pilot_horizon,
        scheme,
        settings.master_seed,
        &mut rng,
    )?;
    let labels: Vec<usize> = (0..arity).collect();
    let total = if scheme == ResamplingScheme::Multinomial {
        exact_cumulative(model, &run, &labels, 0, pilot_horizon)?
    } else {
        let mut mc_rng = replicate_rng(settings.master_seed, u64::MAX - 1);
        let profile = estimate_profile_mc(
            model,
            &run,
            scheme,
            &labels,
            0,
            pilot_horizon,
            settings.mc_profile_replicates.max(1000),
            &mut mc_rng,
        )?;
        profile.total_mass()
    };
    Ok(total / pilot_horizon as f64)
}

/// Pilot-calibrated horizon: long enough for the cumulative profile mass to
/// reach the experiment's targets with margin, so that fewer than ~0.5% of
/// replicates outlive it.
pub fn auto_horizon(
    model: &ModelSpec,
    scheme: ResamplingScheme,
    population: usize,
    sample_size: usize,
    settings: &ExperimentSettings,
) -> Result<usize> {
    if let Some(k) = settings.horizon_override {
        return Ok(k);
    }
    let pilot_len = (4 * population).max(200);
    let fail_quantile = (200f64).ln();
    let t_first = settings.t_max.max(fail_quantile / binom2(sample_size));
    let rate_first = pilot_mean_rate(model, scheme, population, sample_size, pilot_len, settings)?;
    if !(rate_first > 0.0) {
        return Err(Error::HorizonExceeded {
            requested: t_first,
            available: 0.0,
        });
    }
    let mut needed = t_first / rate_first;
    if settings.track_second_epoch && sample_size == 3 {
        let t_second = settings.t_max.max(fail_quantile);
        let rate_second = pilot_mean_rate(model, scheme, population, 2, pilot_len, settings)?;
        if !(rate_second > 0.0) {
            return Err(Error::HorizonExceeded {
                requested: t_second,
                available: 0.0,
            });
        }
        needed += t_second / rate_second;
    }
    Ok(((1.3 * needed).ceil() as usize).max(50))
}

/// Runs the full rescaled-genealogy convergence experiment.
///
/// Per replicate: simulate `horizon` generations, trace the genealogy of
/// terminal particles `0..n`, rescale the realised first-merger generation
/// through the replicate's own quenched cumulative rate (the time change is
/// measurable with respect to the locations), and record the merger
/// structure. Profiles are exact for multinomial resampling and Monte Carlo
/// otherwise. Replicates run in parallel on per-replicate RNG streams;
/// results do not depend on the thread count.
pub fn convergence_experiment(
    model: &ModelSpec,
    scheme: ResamplingScheme,
    population: usize,
    sample_size: usize,
    settings: &ExperimentSettings,
) -> Result<ConvergenceReport> {
    if !(2..=3).contains(&sample_size) {
        return Err(Error::OutOfRange("sample size must be 2 or 3".into()));
    }
    compute_mixing_certificate(model)?;
    let horizon = auto_horizon(model, scheme, population, sample_size, settings)?;
    let track_second = settings.track_second_epoch && sample_size == 3;

    let outcomes: Vec<ReplicateOutcome> = (0..settings.replicates)
        .into_par_iter()
        .map(|idx| replicate_outcome(model, scheme, population, sample_size, horizon, settings, idx, track_second))
        .collect::<Result<Vec<_>>>()?;

    let pairs = pair_index(sample_size);
    let mut times = Vec::with_capacity(settings.replicates);
    let mut pair_counts = vec![0u64; pairs.len()];
    let mut multi = 0u64;
    let mut failures = 0u64;
    let mut second_times = Vec::new();
    let mut second_failures = 0u64;
    let mut rows = Vec::with_capacity(settings.replicates);
    for (idx, o) in outcomes.iter().enumerate() {
        if o.horizon_failed {
            failures += 1;
        } else if let Some(t) = o.t_sample {
            times.push(t);
            if let Some(p) = o.pair {
                let pi = pairs.iter().position(|&q| q == p).expect("valid pair");
                pair_counts[pi] += 1;
            } else {
                multi += 1;
            }
        }
        if let Some(second) = &o.second {
            match second {
                Some(t2) => second_times.push(*t2),
                None => second_failures += 1,
            }
        }
        rows.push(ReplicateRow {
            replicate: idx,
            t_sample: o.t_sample,
            pair: o.pair,
            merger_size: o.merger_size,
            horizon_failed: o.horizon_failed,
            second_epoch_t: o.second.flatten(),
        });
    }

    let rate = binom2(sample_size);
    // Horizon-dominated runs can leave too few samples for a meaningful
    // statistic; report NaN and let callers act on `horizon_failures`.
    let ks = match ks_statistic(&times, |t| 1.0 - (-rate * t).exp()) {
        Ok(v) => v,
        Err(Error::TooFewSamples { .. }) => f64::NAN,
        Err(e) => return Err(e),
    };
    let chi2_p = if pairs.len() > 1 {
        let total: u64 = pair_counts.iter().sum();
        let expected = total as f64 / pairs.len() as f64;
        let stat: f64 = pair_counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        chi_square_p_value(stat, (pairs.len() - 1) as f64)
    } else {
        1.0
    };
    let second_epoch = if track_second {
        let ks2 = match ks_statistic(&second_times, |t| 1.0 - (-t).exp()) {
            Ok(v) => v,
            Err(Error::TooFewSamples { .. }) => f64::NAN,
            Err(e) => return Err(e),
        };
        Some(SecondEpochReport {
            times: second_times,
            ks_statistic: ks2,
            failures: second_failures,
        })
    } else {
        None
    };

    Ok(ConvergenceReport {
        model_name: model.name().to_string(),
        scheme,
        population,
        sample_size,
        replicates: settings.replicates,
        horizon,
        rescaled_first_merger_times: times,
        pair_index: pairs,
        merged_pair_counts: pair_counts,
        multi_merger_count: multi,
        horizon_failures: failures,
        ks_statistic: ks,
        chi2_p,
        second_epoch,
        replicate_rows: rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn replicate_outcome(
    model: &ModelSpec,
    scheme: ResamplingScheme,
    population: usize,
    sample_size: usize,
    horizon: usize,
    settings: &ExperimentSettings,
    idx: usize,
    track_second: bool,
) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(settings.master_seed, idx as u64);
    let run = simulate_forward_with(
        model,
        population,
        horizon,
        scheme,
        settings.master_seed,
        &mut rng,
    )?;
    let labels: Vec<usize> = (0..sample_size).collect();
    let tr = trace(&run, &labels)?;
    let exact = scheme == ResamplingScheme::Multinomial;

    let Some(k_star) = tr.first_merger() else {
        return Ok(ReplicateOutcome {
            t_sample: None,
            pair: None,
            merger_size: 0,
            horizon_failed: true,
            second: if track_second { Some(None) } else { None },
        });
    };

    let t_sample = if exact {
        exact_cumulative(model, &run, &labels, 0, k_star)?
    } else {
        let mut mc_rng = replicate_rng(
            settings.master_seed ^ 0x9e37_79b9_7f4a_7c15,
            idx as u64,
        );
        let profile = match estimate_profile_mc(
            model,
            &run,
            scheme,
            &labels,
            0,
            k_star,
            settings.mc_profile_replicates,
            &mut mc_rng,
        ) {
            Ok(p) => p,
            Err(Error::DegenerateSurvival { .. }) => {
                return Ok(ReplicateOutcome {
                    t_sample: None,
                    pair: None,
                    merger_size: 0,
                    horizon_failed: true,
                    second: if track_second { Some(None) } else { None },
                })
            }
            Err(e) => return Err(e),
        };
        profile.cumulative_through(k_star)
    };

    let before = &tr.states[k_star - 1];
    let after = &tr.states[k_star];
    let lost = before.block_count() - after.block_count();
    let pair = if lost == 1 {
        // The merged block's members are sample indices; from singleton
        // starts the merged pair is just its two smallest entries.
        let merged = after
            .blocks()
            .iter()
            .find(|b| !before.blocks().iter().any(|x| x.members == b.members))
            .expect("one block changed");
        Some((merged.members[0], merged.members[1]))
    } else {
        None
    };

    // Second epoch: restart the clock from the realised post-merger state.
    let second = if track_second {
        if pair.is_some() && after.block_count() == 2 && exact {
            let labels2 = after.labels();
            let k2 = tr.states[k_star..]
                .iter()
                .position(|s| s.block_count() < 2)
                .map(|off| k_star + off);
            match k2 {
                Some(k2) => {
                    let t2 = exact_cumulative(model, &run, &labels2, k_star, k2)?;
                    Some(Some(t2))
                }
                None => Some(None),
            }
        } else {
            Some(None)
        }
    } else {
        None
    };

    Ok(ReplicateOutcome {
        t_sample: Some(t_sample),
        pair,
        merger_size: lost + 1,
        horizon_failed: false,
        second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, BuiltinParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chi_square_p_value_known_points() {
        // df = 2 has the closed form exp(-x/2).
        for x in [0.5f64, 2.0, 5.991, 9.21] {
            assert!((chi_square_p_value(x, 2.0) - (-x / 2.0).exp()).abs() < 1e-10);
        }
        // Standard quantiles.
        assert!((chi_square_p_value(3.841, 1.0) - 0.05).abs() < 2e-4);
        assert!((chi_square_p_value(16.919, 9.0) - 0.05).abs() < 2e-4);
    }

    #[test]
    fn ks_statistic_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let d = ks_statistic(&samples, |t| 1.0 - (-t).exp()).unwrap();
        assert!(d < 0.02, "KS of exact samples came out {d}");

        let constant = vec![0.7; 100];
        let d = ks_statistic(&constant, |t| 1.0 - (-t).exp()).unwrap();
        assert!(d >= 0.5);

        let ten = vec![0.5; 10];
        let d = ks_statistic(&ten, |t| t.clamp(0.0, 1.0)).unwrap();
        assert!((0.0..=1.0).contains(&d));
        assert!(ks_statistic(&ten[..9], |_| 0.5).is_err());
    }

    #[test]
    fn kingman_sampler_moments_and_uniformity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 100_000;
        let mut mean2 = 0.0;
        let mut mean3 = 0.0;
        let mut pair_counts = [0u64; 3];
        for _ in 0..draws {
            let s2 = sample_kingman(2, &mut rng).unwrap();
            mean2 += s2.holding_times[0];
            let s3 = sample_kingman(3, &mut rng).unwrap();
            mean3 += s3.holding_times[0];
            let p = s3.merger_pairs[0];
            let pi = pair_index(3).iter().position(|&q| q == p).unwrap();
            pair_counts[pi] += 1;
        }
        mean2 /= draws as f64;
        mean3 /= draws as f64;
        // SE of an exponential mean is rate^-1 / sqrt(draws).
        assert!((mean2 - 1.0).abs() < 4.0 / (draws as f64).sqrt());
        assert!((mean3 - 1.0 / 3.0).abs() < 4.0 / 3.0 / (draws as f64).sqrt());
        let expected = draws as f64 / 3.0;
        let stat: f64 = pair_counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi_square_p_value(stat, 2.0) > 0.001);
    }

    #[test]
    fn neutral_pair_experiment_is_geometric() {
        // For the neutral model the first-merger generation is geometric
        // with success probability 1/N, so rescaled times are Exp(1) up to
        // a 1/N discretisation.
        let model = builtin_model(
            "neutral-uniform",
            &BuiltinParams {
                states: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let settings = ExperimentSettings {
            replicates: 2000,
            master_seed: 42,
            ..Default::default()
        };
        let report =
            convergence_experiment(&model, ResamplingScheme::Multinomial, 60, 2, &settings)
                .unwrap();
        assert!(report.ks_statistic < 0.05, "KS = {}", report.ks_statistic);
        assert!(report.horizon_failures < 40);
        // Geometric check: generation = t * N must match Geometric(1/N) in
        // distribution; compare via chi-square over generation bins.
        let n = 60.0;
        let mut bins = [0u64; 6];
        let mut total = 0u64;
        for &t in &report.rescaled_first_merger_times {
            let gen = (t * n).round() as u64;
            let bin = ((gen - 1) / 30).min(5) as usize;
            bins[bin] += 1;
            total += 1;
        }
        let p = 1.0 / n;
        let mut stat = 0.0;
        for (b, &obs) in bins.iter().enumerate() {
            let lo = 30.0 * b as f64;
            let hi = 30.0 * (b + 1) as f64;
            let mass = if b == 5 {
                (1.0 - p).powf(lo)
            } else {
                (1.0 - p).powf(lo) - (1.0 - p).powf(hi)
            };
            let e = total as f64 * mass;
            stat += (obs as f64 - e).powi(2) / e;
        }
        assert!(
            chi_square_p_value(stat, 5.0) > 0.001,
            "geometric law rejected: chi2 = {stat}"
        );
    }

    #[test]
    fn replicate_accounting_is_exhaustive() {
        let model = builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap();
        let settings = ExperimentSettings {
            replicates: 500,
            master_seed: 7,
            ..Default::default()
        };
        let report =
            convergence_experiment(&model, ResamplingScheme::Multinomial, 40, 3, &settings)
                .unwrap();
        let binary: u64 = report.merged_pair_counts.iter().sum();
        assert_eq!(
            binary + report.multi_merger_count + report.horizon_failures,
            500
        );
        assert_eq!(
            report.rescaled_first_merger_times.len() as u64,
            500 - report.horizon_failures
        );
    }

    #[test]
    fn experiment_is_deterministic_across_thread_counts() {
        let model = builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap();
        let settings = ExperimentSettings {
            replicates: 200,
            master_seed: 11,
            ..Default::default()
        };
        let a = convergence_experiment(&model, ResamplingScheme::Multinomial, 30, 2, &settings)
            .unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| {
            convergence_experiment(&model, ResamplingScheme::Multinomial, 30, 2, &settings)
                .unwrap()
        });
        assert_eq!(
            a.rescaled_first_merger_times,
            b.rescaled_first_merger_times
        );
        assert_eq!(a.merged_pair_counts, b.merged_pair_counts);
    }
}
