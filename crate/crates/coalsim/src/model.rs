//! Finite-state particle models and forward simulation.
//!
//! A model is a family of strictly positive potentials `g_k` over `S` states
//! together with row-stochastic, strictly positive mutation kernels `M_k`.
//! Restricting to finite state spaces makes the strong-mixing constant
//! exactly computable and keeps the backward dynamic programs in
//! [`crate::lineage`] exact.
//!
//! ```
//! use coalsim::model::ModelSpec;
//!
//! // A two-state model where fitness is inherited through a sticky kernel.
//! let model = ModelSpec::stationary(
//!     "sticky",
//!     vec![0.5, 2.0],
//!     vec![vec![0.7, 0.3], vec![0.3, 0.7]],
//! ).unwrap();
//! let cert = coalsim::model::compute_mixing_certificate(&model).unwrap();
//! assert!(cert.verify(&model));
//! assert!(cert.gamma > 3.0 && cert.gamma < 3.1);
//! ```

use crate::resampling::{self, AncestorVector, ResamplingScheme};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ROW_SUM_TOL: f64 = 1e-12;

/// A finite-state particle model: potentials and mutation kernels per
/// generation. `stationary` models reuse the single table for every
/// generation; non-stationary models must supply one table per generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    state_count: usize,
    /// One vector of length `state_count` per generation.
    potentials: Vec<Vec<f64>>,
    /// One row-major `S x S` matrix per generation.
    kernels: Vec<Vec<f64>>,
    stationary: bool,
}

impl ModelSpec {
    /// Builds and validates a model. `kernels[k]` is row-major `S x S`.
    pub fn new(
        name: impl Into<String>,
        potentials: Vec<Vec<f64>>,
        kernels: Vec<Vec<f64>>,
        stationary: bool,
    ) -> Result<Self> {
        let name = name.into();
        if potentials.is_empty() || kernels.is_empty() {
            return Err(Error::InvalidModel("no generation tables supplied".into()));
        }
        if potentials.len() != kernels.len() {
            return Err(Error::InvalidModel(format!(
                "{} potential tables vs {} kernel tables",
                potentials.len(),
                kernels.len()
            )));
        }
        if stationary && potentials.len() != 1 {
            return Err(Error::InvalidModel(
                "stationary models take exactly one table".into(),
            ));
        }
        let state_count = potentials[0].len();
        if state_count < 2 {
            return Err(Error::InvalidModel("need at least two states".into()));
        }
        for (k, g) in potentials.iter().enumerate() {
            if g.len() != state_count {
                return Err(Error::InvalidModel(format!(
                    "potential table {k} has {} entries, expected {state_count}",
                    g.len()
                )));
            }
            if g.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "potential table {k} has a non-positive entry"
                )));
            }
        }
        for (k, m) in kernels.iter().enumerate() {
            if m.len() != state_count * state_count {
                return Err(Error::InvalidModel(format!(
                    "kernel table {k} is not {state_count}x{state_count}"
                )));
            }
            for x in 0..state_count {
                let row = &m[x * state_count..(x + 1) * state_count];
                if row.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "kernel table {k} row {x} has a non-positive entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidModel(format!(
                        "kernel table {k} row {x} sums to {sum}, not 1"
                    )));
                }
            }
        }
        Ok(Self {
            name,
            state_count,
            potentials,
            kernels,
            stationary,
        })
    }

    /// One potential/kernel pair reused for every generation.
    pub fn stationary(
        name: impl Into<String>,
        potential: Vec<f64>,
        kernel_rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let flat: Vec<f64> = kernel_rows.into_iter().flatten().collect();
        Self::new(name, vec![potential], vec![flat], true)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Number of generation tables available (`usize::MAX` when stationary).
    pub fn generation_tables(&self) -> usize {
        if self.stationary {
            usize::MAX
        } else {
            self.potentials.len()
        }
    }

    fn table_index(&self, k: usize) -> usize {
        if self.stationary {
            0
        } else {
            k
        }
    }

    /// Potential vector `g_k`.
    pub fn potential(&self, k: usize) -> &[f64] {
        &self.potentials[self.table_index(k)]
    }

    /// Kernel entry `M_k(x, y)`.
    pub fn kernel(&self, k: usize, x: usize, y: usize) -> f64 {
        let s = self.state_count;
        self.kernels[self.table_index(k)][x * s + y]
    }

    /// Row `M_k(x, .)` of the mutation kernel.
    pub fn kernel_row(&self, k: usize, x: usize) -> &[f64] {
        let s = self.state_count;
        let t = self.table_index(k);
        &self.kernels[t][x * s..(x + 1) * s]
    }

    /// `q_k(x, y) = g_k(x) M_k(x, y)`, the strong-mixing kernel.
    pub fn q(&self, k: usize, x: usize, y: usize) -> f64 {
        self.potential(k)[x] * self.kernel(k, x, y)
    }
}

/// A strong-mixing certificate: `f(y) / gamma <= g_k(x) M_k(x, y) <= gamma f(y)`
/// for every state pair and generation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingCertificate {
    pub gamma: f64,
    pub f: Vec<f64>,
    pub valid: bool,
}

impl MixingCertificate {
    /// Re-checks the certificate by exhaustive scan over the finite model.
    pub fn verify(&self, model: &ModelSpec) -> bool {
        let s = model.state_count();
        let tables = if model.is_stationary() {
            1
        } else {
            model.generation_tables()
        };
        for k in 0..tables {
            for y in 0..s {
                for x in 0..s {
                    let q = model.q(k, x, y);
                    if q < self.f[y] / self.gamma - 1e-15 || q > self.gamma * self.f[y] + 1e-15 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Computes the tightest certificate of the form
/// `f(y) = sqrt(q_max(y) q_min(y))`, `gamma = max_y sqrt(q_max(y)/q_min(y))`
/// where the extrema of `q(x, y, k) = g_k(x) M_k(x, y)` are taken over `x`
/// and `k`. Always valid for finite positive models.
pub fn compute_mixing_certificate(model: &ModelSpec) -> Result<MixingCertificate> {
    let s = model.state_count();
    let tables = if model.is_stationary() {
        1
    } else {
        model.generation_tables()
    };
    let mut f = vec![0.0; s];
    let mut gamma: f64 = 1.0;
    for y in 0..s {
        let mut q_min = f64::INFINITY;
        let mut q_max = f64::NEG_INFINITY;
        for k in 0..tables {
            for x in 0..s {
                let q = model.q(k, x, y);
                if !(q > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "q({x}, {y}, {k}) is not positive"
                    )));
                }
                q_min = q_min.min(q);
                q_max = q_max.max(q);
            }
        }
        f[y] = (q_max * q_min).sqrt();
        gamma = gamma.max((q_max / q_min).sqrt());
    }
    let cert = MixingCertificate {
        gamma,
        f,
        valid: true,
    };
    debug_assert!(cert.verify(model));
    Ok(cert)
}

/// Parameters for [`builtin_model`]. Unset fields fall back to the builtin's
/// defaults.
#[derive(Debug, Clone, Default)]
pub struct BuiltinParams {
    /// Number of states (neutral-uniform, hereditary-chain).
    pub states: Option<usize>,
    /// Probability of keeping the current state (hereditary models).
    pub p_stay: Option<f64>,
    /// Ratio between the largest and smallest potential (hereditary models).
    pub g_ratio: Option<f64>,
}

/// Constructs one of the built-in models:
///
/// - `neutral-uniform`: constant potential, uniform kernel over `S` states;
/// - `hereditary-binary`: two states with potentials `(1/sqrt(r), sqrt(r))`
///   and a symmetric sticky kernel, so fitness is correlated with the
///   parent's;
/// - `hereditary-chain`: an `S`-state sticky chain whose kernel decays
///   geometrically with state distance and whose potentials grade
///   geometrically across states.
pub fn builtin_model(name: &str, params: &BuiltinParams) -> Result<ModelSpec> {
    match name {
        "neutral-uniform" => {
            let s = params.states.unwrap_or(2);
            if s < 2 {
                return Err(Error::InvalidModel("need at least two states".into()));
            }
            let g = vec![1.0; s];
            let rows = vec![vec![1.0 / s as f64; s]; s];
            ModelSpec::stationary("neutral-uniform", g, rows)
        }
        "hereditary-binary" => {
            let p = params.p_stay.unwrap_or(0.7);
            let r = params.g_ratio.unwrap_or(4.0);
            if !(0.0 < p && p < 1.0) || !(r > 0.0) {
                return Err(Error::InvalidModel(
                    "need 0 < p_stay < 1 and g_ratio > 0".into(),
                ));
            }
            let g = vec![1.0 / r.sqrt(), r.sqrt()];
            let rows = vec![vec![p, 1.0 - p], vec![1.0 - p, p]];
            ModelSpec::stationary("hereditary-binary", g, rows)
        }
        "hereditary-chain" => {
            let s = params.states.unwrap_or(5);
            let p = params.p_stay.unwrap_or(0.6);
            let r = params.g_ratio.unwrap_or(4.0);
            if s < 2 || !(0.0 < p && p < 1.0) || !(r > 0.0) {
                return Err(Error::InvalidModel(
                    "need S >= 2, 0 < p_stay < 1 and g_ratio > 0".into(),
                ));
            }
            // Geometric decay with distance keeps every entry positive while
            // concentrating mass near the diagonal; lambda is chosen so that
            // an interior row of an infinite chain would keep mass p_stay.
            let lambda = (1.0 - p) / (1.0 + p);
            let mut rows = Vec::with_capacity(s);
            for x in 0..s {
                let mut row: Vec<f64> = (0..s)
                    .map(|y| lambda.powi((y as i64 - x as i64).unsigned_abs() as i32))
                    .collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                rows.push(row);
            }
            let g: Vec<f64> = (0..s)
                .map(|x| r.powf(x as f64 / (s - 1) as f64 - 0.5))
                .collect();
            ModelSpec::stationary("hereditary-chain", g, rows)
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

/// One realisation of the particle system.
///
/// Forward-time indexing: `locations[g][i]` is the state of particle `i` in
/// generation `g` for `g = 0..=K`, and `ancestors[g][i]` is the parent (an
/// index into generation `g`) of particle `i` of generation `g + 1`, for
/// `g = 0..K`. Reverse-time accessors index the terminal generation as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRun {
    pub population: usize,
    pub locations: Vec<Vec<u8>>,
    pub ancestors: Vec<Vec<u32>>,
    pub seed: u64,
    /// Stratified shuffles, when the scheme recorded them (one per ancestor
    /// vector, forward-time order).
    pub shuffles: Vec<Option<Vec<u32>>>,
}

impl ForwardRun {
    /// Number of resampling steps `K`; there are `K + 1` location rows.
    pub fn generations(&self) -> usize {
        self.ancestors.len()
    }

    /// States at reverse-time generation `r` (terminal generation is `r = 0`).
    pub fn locations_rev(&self, r: usize) -> &[u8] {
        &self.locations[self.generations() - r]
    }

    /// Ancestor vector for reverse step `r >= 1`: maps a particle index at
    /// reverse generation `r - 1` to its parent at reverse generation `r`.
    pub fn ancestors_rev(&self, r: usize) -> &[u32] {
        &self.ancestors[self.generations() - r]
    }

    /// Forward-time model-table index used by reverse step `r`.
    pub fn forward_index_of_rev_step(&self, r: usize) -> usize {
        self.generations() - r
    }

    /// Per-state particle counts in forward generation `g`.
    pub fn state_counts(&self, g: usize, state_count: usize) -> Vec<usize> {
        let mut counts = vec![0usize; state_count];
        for &x in &self.locations[g] {
            counts[x as usize] += 1;
        }
        counts
    }

    fn validate(&self) -> bool {
        let n = self.population;
        self.locations.len() == self.ancestors.len() + 1
            && self.locations.iter().all(|row| row.len() == n)
            && self
                .ancestors
                .iter()
                .all(|row| row.len() == n && row.iter().all(|&a| (a as usize) < n))
    }
}

/// Derives the replicate RNG stream `index` from a master seed. ChaCha
/// streams are counter-based, so replicates are independent of scheduling.
pub fn replicate_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Simulates `k_gens` resampling/mutation steps of an `n`-particle system.
/// Generation zero is i.i.d. uniform over states. Deterministic given the
/// seed and parameters.
pub fn simulate_forward(
    model: &ModelSpec,
    n: usize,
    k_gens: usize,
    scheme: ResamplingScheme,
    seed: u64,
) -> Result<ForwardRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_forward_with(model, n, k_gens, scheme, seed, &mut rng)
}

/// As [`simulate_forward`], with a caller-provided RNG (used by experiment
/// drivers that manage per-replicate streams). The recorded `seed` is
/// informational only in this case.
pub fn simulate_forward_with(
    model: &ModelSpec,
    n: usize,
    k_gens: usize,
    scheme: ResamplingScheme,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardRun> {
    if n < 2 {
        return Err(Error::InvalidModel("population size must be >= 2".into()));
    }
    if k_gens < 1 {
        return Err(Error::InvalidModel("need at least one generation".into()));
    }
    if !model.is_stationary() && k_gens > model.generation_tables() {
        return Err(Error::InvalidModel(format!(
            "run of {k_gens} generations needs {k_gens} tables, model has {}",
            model.generation_tables()
        )));
    }
    if n > u32::MAX as usize || model.state_count() > u8::MAX as usize {
        return Err(Error::InvalidModel("population or state space too large".into()));
    }
    let s = model.state_count();
    let mut locations = Vec::with_capacity(k_gens + 1);
    let mut ancestors = Vec::with_capacity(k_gens);
    let mut shuffles = Vec::with_capacity(k_gens);

    let init: Vec<u8> = (0..n).map(|_| rng.random_range(0..s) as u8).collect();
    locations.push(init);

    let mut kernel_cdf = vec![0.0f64; s * s];
    for g in 0..k_gens {
        let current = &locations[g];
        let pot = model.potential(g);
        let values: Vec<f64> = current.iter().map(|&x| pot[x as usize]).collect();
        let weights = resampling::normalize(&values)?;
        let anc: AncestorVector = scheme.sample(&weights, rng);

        // Per-row kernel CDFs for this generation's table.
        let flat = 1.0 / s as f64;
        let mut uniform_kernel = true;
        for x in 0..s {
            let row = model.kernel_row(g, x);
            let mut acc = 0.0;
            for y in 0..s {
                acc += row[y];
                kernel_cdf[x * s + y] = acc;
                if (row[y] - flat).abs() > 1e-15 {
                    uniform_kernel = false;
                }
            }
            kernel_cdf[x * s + s - 1] = 1.0;
        }

        let mut next = vec![0u8; n];
        if uniform_kernel {
            for i in 0..n {
                next[i] = rng.random_range(0..s) as u8;
            }
        } else {
            for i in 0..n {
                let parent_state = current[anc.parents[i] as usize] as usize;
                let u: f64 = rng.random();
                let row = &kernel_cdf[parent_state * s..(parent_state + 1) * s];
                let y = row.partition_point(|&c| c <= u).min(s - 1);
                next[i] = y as u8;
            }
        }
        locations.push(next);
        ancestors.push(anc.parents);
        shuffles.push(anc.shuffle);
    }

    let run = ForwardRun {
        population: n,
        locations,
        ancestors,
        seed,
        shuffles,
    };
    debug_assert!(run.validate());
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;

    fn hereditary_binary() -> ModelSpec {
        builtin_model("hereditary-binary", &BuiltinParams::default()).unwrap()
    }

    #[test]
    fn neutral_certificate_is_unit_gamma() {
        let model = builtin_model(
            "neutral-uniform",
            &BuiltinParams {
                states: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let cert = compute_mixing_certificate(&model).unwrap();
        assert!((cert.gamma - 1.0).abs() < 1e-15);
        assert!(cert.f.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(cert.valid);
    }

    #[test]
    fn hereditary_binary_certificate_matches_pair_scan() {
        let model = hereditary_binary();
        let cert = compute_mixing_certificate(&model).unwrap();
        // Independent scan over the four (x, y) pairs.
        let mut expected_gamma: f64 = 1.0;
        for y in 0..2 {
            let q: Vec<f64> = (0..2).map(|x| model.q(0, x, y)).collect();
            let (lo, hi) = (q[0].min(q[1]), q[0].max(q[1]));
            expected_gamma = expected_gamma.max((hi / lo).sqrt());
        }
        assert!((cert.gamma - expected_gamma).abs() < 1e-15);
        // Column y = 0 holds {0.35, 0.6}; gamma must dominate each column ratio.
        assert!(cert.gamma >= (0.6f64 / 0.35).sqrt());
        assert!((cert.gamma - (1.4f64 / 0.15).sqrt()).abs() < 1e-12);
        assert!(cert.verify(&model));
    }

    #[test]
    fn potential_scaling_leaves_gamma_unchanged() {
        let model = hereditary_binary();
        let scaled = ModelSpec::stationary(
            "scaled",
            model.potential(0).iter().map(|g| 17.0 * g).collect(),
            vec![
                model.kernel_row(0, 0).to_vec(),
                model.kernel_row(0, 1).to_vec(),
            ],
        )
        .unwrap();
        let a = compute_mixing_certificate(&model).unwrap();
        let b = compute_mixing_certificate(&scaled).unwrap();
        assert!((a.gamma - b.gamma).abs() < 1e-12);
    }

    #[test]
    fn random_models_verify_their_certificates() {
        use rand::SeedableRng;
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..100 {
            let s = rng.random_range(2..=8usize);
            let g: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..5.0f64)).collect();
            let rows: Vec<Vec<f64>> = (0..s)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..s).map(|_| rng.random_range(0.01..1.0f64)).collect();
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= sum);
                    row
                })
                .collect();
            let model = ModelSpec::stationary("random", g, rows).unwrap();
            let cert = compute_mixing_certificate(&model).unwrap();
            assert!(cert.verify(&model), "certificate scan failed");
        }
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(ModelSpec::stationary("z", vec![1.0, 0.0], vec![vec![0.5, 0.5]; 2]).is_err());
        assert!(ModelSpec::stationary("z", vec![1.0, 1.0], vec![vec![0.6, 0.5]; 2]).is_err());
        assert!(ModelSpec::stationary("z", vec![1.0, 1.0], vec![vec![1.0, 0.0]; 2]).is_err());
        assert!(builtin_model("no-such-model", &BuiltinParams::default()).is_err());
    }

    #[test]
    fn builtin_chain_is_valid() {
        let model = builtin_model(
            "hereditary-chain",
            &BuiltinParams {
                states: Some(5),
                p_stay: Some(0.6),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.state_count(), 5);
        compute_mixing_certificate(&model).unwrap();
    }

    #[test]
    fn forward_run_shape_and_determinism() {
        let model = hereditary_binary();
        for scheme in [
            ResamplingScheme::Multinomial,
            ResamplingScheme::Stratified { shuffle: true },
            ResamplingScheme::Stratified { shuffle: false },
            ResamplingScheme::Systematic,
        ] {
            let a = simulate_forward(&model, 5, 4, scheme, 99).unwrap();
            assert_eq!(a.generations(), 4);
            assert_eq!(a.locations.len(), 5);
            assert!(a.locations.iter().all(|row| row.len() == 5));
            assert!(a
                .ancestors
                .iter()
                .all(|row| row.iter().all(|&p| (p as usize) < 5)));
            let b = simulate_forward(&model, 5, 4, scheme, 99).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reverse_views_are_consistent() {
        let model = hereditary_binary();
        let run = simulate_forward(&model, 6, 5, ResamplingScheme::Multinomial, 3).unwrap();
        assert_eq!(run.locations_rev(0), run.locations[5].as_slice());
        assert_eq!(run.ancestors_rev(1), run.ancestors[4].as_slice());
        assert_eq!(run.forward_index_of_rev_step(1), 4);
        assert_eq!(run.ancestors_rev(5), run.ancestors[0].as_slice());
    }

    #[test]
    fn marginal_resampling_law_matches_weights() {
        // Empirical marginal of a_k(i) = m at a fixed generation must match
        // the normalised potentials within 4 standard errors.
        let model = hereditary_binary();
        let run = simulate_forward(&model, 8, 1, ResamplingScheme::Multinomial, 5).unwrap();
        let pot = model.potential(0);
        let values: Vec<f64> = run.locations[0]
            .iter()
            .map(|&x| pot[x as usize])
            .collect();
        let weights = resampling::normalize(&values).unwrap();
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            let anc = ResamplingScheme::Multinomial.sample(&weights, &mut rng);
            counts[anc.parents[3] as usize] += 1;
        }
        for m in 0..8 {
            let p = weights.weights[m];
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let freq = counts[m] as f64 / draws as f64;
            assert!(
                (freq - p).abs() < 4.0 * se,
                "marginal off at {m}: {freq} vs {p}"
            );
        }
    }
}
