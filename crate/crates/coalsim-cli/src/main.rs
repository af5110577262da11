//! Configuration-driven experiment runner.
//!
//! Every subcommand is seeded explicitly, writes CSV outputs with a config
//! hash in the footer, and prints a one-line summary. Exit codes: 0 success,
//! 2 config error, 3 horizon-failure-dominated experiment, 4 internal
//! invariant violation.

use clap::{Args, Parser, Subcommand};
use coalsim::genealogy::trace;
use coalsim::io::{self, config_hash};
use coalsim::kingman::{convergence_experiment, ExperimentSettings};
use coalsim::lineage::{
    coalescence_profile, discrepancy_experiment, estimate_profile_mc, timescale_inverse,
};
use coalsim::model::{
    builtin_model, replicate_rng, simulate_forward, BuiltinParams, ModelSpec,
};
use coalsim::oracle::{
    counterexample_report, rational_from_f64, verify_left_stochastic_lemma,
    verify_multinomial_lemma, CounterexampleRecord,
};
use coalsim::resampling::ResamplingScheme;
use coalsim::Error;
use serde::Deserialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "coalsim",
    about = "Genealogies of interacting particle systems: simulation, quenched rates, coalescent tests",
    version
)]
struct Cli {
    /// TOML config file; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $COALSIM_OUT_DIR or the working directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results never depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Builtin model name (neutral-uniform, hereditary-binary, hereditary-chain).
    #[arg(long)]
    model: Option<String>,
    /// TOML model definition file (inline tables or builtin reference).
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    p_stay: Option<f64>,
    #[arg(long)]
    g_ratio: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a forward run and dump locations.csv / ancestors.csv.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate, trace an n-sample genealogy, dump trajectory.csv.
    Trace {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample size (terminal particles 0..n).
        #[arg(short = 'n', long = "n", alias = "sample-size")]
        sample_size: Option<usize>,
    },
    /// Quenched coalescence profile along one run (exact for multinomial,
    /// Monte Carlo otherwise); dumps profile.csv.
    Profile {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short = 'n', long = "n", alias = "sample-size")]
        sample_size: Option<usize>,
        /// Monte Carlo replicates for non-multinomial schemes.
        #[arg(long)]
        mc_replicates: Option<usize>,
    },
    /// Profile plus its generalised-inverse timescale over a t-grid;
    /// dumps profile.csv and timescale.csv.
    Rescale {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short = 'n', long = "n", alias = "sample-size")]
        sample_size: Option<usize>,
        #[arg(long)]
        mc_replicates: Option<usize>,
        /// t grid as start:stop:step.
        #[arg(long)]
        t_grid: Option<String>,
    },
    /// Rescaled-genealogy convergence experiment against the Kingman
    /// coalescent; dumps report.csv and summary.json.
    KingmanTest {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short = 'n', long = "n", alias = "sample-size")]
        sample_size: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Fixed horizon instead of the pilot-calibrated one.
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        /// Track the post-merger epoch for n = 3.
        #[arg(long)]
        second_epoch: bool,
        #[arg(long)]
        mc_replicates: Option<usize>,
    },
    /// Exact merger-ordering counterexample over a z-grid; dumps
    /// counterexample.csv.
    Counterexample {
        /// z grid as start:stop:step (inclusive of endpoints within step/2).
        #[arg(long)]
        z_grid: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Inequality sweeps and counterexample dual-path verification.
    OracleCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        multinomial_sweeps: usize,
        #[arg(long, default_value_t = 500)]
        stochastic_sweeps: usize,
    },
    /// Family-size-formula discrepancy experiment; dumps discrepancy.csv
    /// and summary.json.
    Discrepancy {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short = 'N', long = "N", alias = "population")]
        population: Option<usize>,
        #[arg(short = 'K', long = "K", alias = "generations")]
        generations: Option<usize>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short = 'n', long = "n", alias = "sample-size")]
        sample_size: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

/// File-level defaults; any command-line flag overrides its field.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    model: Option<toml::Value>,
    scheme: Option<String>,
    #[serde(alias = "N")]
    population: Option<usize>,
    #[serde(alias = "n")]
    sample_size: Option<usize>,
    #[serde(alias = "K")]
    generations: Option<usize>,
    t_max: Option<f64>,
    replicates: Option<usize>,
    mc_replicates: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    z_grid: Option<String>,
    t_grid: Option<String>,
    second_epoch: Option<bool>,
}

struct Resolved {
    cfg: FileConfig,
    out: PathBuf,
}

fn load_config(cli: &Cli) -> Result<Resolved, Error> {
    let cfg: FileConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?
        }
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os("COALSIM_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Resolved { cfg, out })
}

fn resolve_model(args: &ModelArgs, cfg: &FileConfig) -> Result<ModelSpec, Error> {
    if let Some(path) = &args.model_file {
        let text = std::fs::read_to_string(path)?;
        return io::model_from_toml(&text);
    }
    if let Some(name) = &args.model {
        return builtin_model(
            name,
            &BuiltinParams {
                states: args.states,
                p_stay: args.p_stay,
                g_ratio: args.g_ratio,
            },
        );
    }
    if let Some(value) = &cfg.model {
        let text = toml::to_string(value).map_err(|e| Error::Config(format!("{e}")))?;
        return io::model_from_toml(&text);
    }
    Err(Error::Config(
        "no model given (use --model, --model-file, or [model] in the config)".into(),
    ))
}

fn resolve_scheme(flag: &Option<String>, cfg: &FileConfig) -> Result<ResamplingScheme, Error> {
    let name = flag
        .clone()
        .or_else(|| cfg.scheme.clone())
        .unwrap_or_else(|| "multinomial".into());
    ResamplingScheme::parse(&name)
}

fn require<T: Copy>(flag: Option<T>, cfg_value: Option<T>, what: &str) -> Result<T, Error> {
    flag.or(cfg_value)
        .ok_or_else(|| Error::Config(format!("missing required parameter `{what}`")))
}

fn parse_grid(text: &str) -> Result<Vec<f64>, Error> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "grid `{text}` must be start:stop:step"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| Error::Config("bad grid start".into()))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| Error::Config("bad grid stop".into()))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|_| Error::Config("bad grid step".into()))?;
    if !step.is_finite() || step <= 0.0 || stop < start {
        return Err(Error::Config("grid must increase".into()));
    }
    let mut grid = Vec::new();
    let mut t = start;
    while t <= stop + step / 2.0 {
        grid.push(t);
        t += step;
    }
    Ok(grid)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("coalsim: could not configure {threads} threads");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("coalsim: {e}");
            let code = match e {
                Error::Internal(_) => 4,
                Error::Io(_) => 2,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    let resolved = load_config(cli)?;
    let cfg = &resolved.cfg;
    let out = &resolved.out;
    match &cli.command {
        Command::Simulate {
            model,
            population,
            generations,
            scheme,
            seed,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let k = require(*generations, cfg.generations, "K")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let run = simulate_forward(&model, n, k, scheme, seed)?;
            let hash = config_hash(&[
                "simulate",
                model.name(),
                &n.to_string(),
                &k.to_string(),
                scheme.label(),
                &seed.to_string(),
            ]);
            io::write_run_csv(out, &run, hash)?;
            println!(
                "simulate: model={} N={n} K={k} scheme={} seed={seed} -> {}",
                model.name(),
                scheme.label(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace {
            model,
            population,
            generations,
            scheme,
            seed,
            sample_size,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let k = require(*generations, cfg.generations, "K")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let sample = require(*sample_size, cfg.sample_size, "n")?;
            let run = simulate_forward(&model, n, k, scheme, seed)?;
            let labels: Vec<usize> = (0..sample).collect();
            let tr = trace(&run, &labels)?;
            let hash = config_hash(&[
                "trace",
                model.name(),
                &n.to_string(),
                &k.to_string(),
                scheme.label(),
                &seed.to_string(),
                &sample.to_string(),
            ]);
            io::write_trajectory_csv(&out.join("trajectory.csv"), &tr, hash, seed)?;
            println!(
                "trace: n={sample} blocks {} -> {} over {k} generations; first merger {:?}",
                sample,
                tr.states.last().unwrap().block_count(),
                tr.first_merger()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Profile {
            model,
            population,
            generations,
            scheme,
            seed,
            sample_size,
            mc_replicates,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let k = require(*generations, cfg.generations, "K")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let sample = require(*sample_size, cfg.sample_size, "n")?;
            let run = simulate_forward(&model, n, k, scheme, seed)?;
            let labels: Vec<usize> = (0..sample).collect();
            let profile = if scheme == ResamplingScheme::Multinomial {
                coalescence_profile(&model, &run, &labels, 0, k)?
            } else {
                let reps = mc_replicates.or(cfg.mc_replicates).unwrap_or(2000);
                let mut rng = replicate_rng(seed, u64::MAX - 2);
                estimate_profile_mc(&model, &run, scheme, &labels, 0, k, reps, &mut rng)?
            };
            let hash = config_hash(&[
                "profile",
                model.name(),
                &n.to_string(),
                &k.to_string(),
                scheme.label(),
                &seed.to_string(),
                &sample.to_string(),
            ]);
            io::write_profile_csv(&out.join("profile.csv"), &profile, hash, seed)?;
            println!(
                "profile: {} entries, total mass {:.6}, exact={}",
                profile.values.len(),
                profile.total_mass(),
                profile.exact
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Rescale {
            model,
            population,
            generations,
            scheme,
            seed,
            sample_size,
            mc_replicates,
            t_grid,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let k = require(*generations, cfg.generations, "K")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let sample = require(*sample_size, cfg.sample_size, "n")?;
            let grid_text = t_grid
                .clone()
                .or_else(|| cfg.t_grid.clone())
                .unwrap_or_else(|| "0.1:3.0:0.1".into());
            let grid = parse_grid(&grid_text)?;
            let run = simulate_forward(&model, n, k, scheme, seed)?;
            let labels: Vec<usize> = (0..sample).collect();
            let profile = if scheme == ResamplingScheme::Multinomial {
                coalescence_profile(&model, &run, &labels, 0, k)?
            } else {
                let reps = mc_replicates.or(cfg.mc_replicates).unwrap_or(2000);
                let mut rng = replicate_rng(seed, u64::MAX - 2);
                estimate_profile_mc(&model, &run, scheme, &labels, 0, k, reps, &mut rng)?
            };
            let mut rows = Vec::with_capacity(grid.len());
            for &t in &grid {
                rows.push((t, timescale_inverse(&profile, t)?));
            }
            let hash = config_hash(&[
                "rescale",
                model.name(),
                &n.to_string(),
                &k.to_string(),
                scheme.label(),
                &seed.to_string(),
                &sample.to_string(),
                &grid_text,
            ]);
            io::write_profile_csv(&out.join("profile.csv"), &profile, hash, seed)?;
            io::write_timescale_csv(&out.join("timescale.csv"), &rows, hash, seed)?;
            println!(
                "rescale: tau({}) = {} .. tau({}) = {}",
                grid[0],
                rows[0].1,
                grid[grid.len() - 1],
                rows[rows.len() - 1].1
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::KingmanTest {
            model,
            population,
            scheme,
            seed,
            sample_size,
            replicates,
            t_max,
            generations,
            second_epoch,
            mc_replicates,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let sample = require(*sample_size, cfg.sample_size, "n")?;
            let reps = require(*replicates, cfg.replicates, "replicates")?;
            let settings = ExperimentSettings {
                t_max: t_max.or(cfg.t_max).unwrap_or(3.0),
                replicates: reps,
                master_seed: seed,
                horizon_override: generations.or(cfg.generations),
                track_second_epoch: *second_epoch || cfg.second_epoch.unwrap_or(false),
                mc_profile_replicates: mc_replicates.or(cfg.mc_replicates).unwrap_or(2000),
            };
            let report = convergence_experiment(&model, scheme, n, sample, &settings)?;
            let hash = config_hash(&[
                "kingman-test",
                model.name(),
                &n.to_string(),
                scheme.label(),
                &seed.to_string(),
                &sample.to_string(),
                &reps.to_string(),
            ]);
            io::write_convergence_csv(&out.join("report.csv"), &report, hash, seed)?;
            io::write_convergence_summary(&out.join("summary.json"), &report, hash)?;
            println!(
                "kingman-test: KS={:.4} chi2_p={:.4} multi={} failures={} horizon={}",
                report.ks_statistic,
                report.chi2_p,
                report.multi_merger_count,
                report.horizon_failures,
                report.horizon
            );
            if report.horizon_failures as f64 > 0.1 * reps as f64 {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Counterexample { z_grid, seed } => {
            let grid_text = z_grid
                .clone()
                .or_else(|| cfg.z_grid.clone())
                .unwrap_or_else(|| "0.0:0.0833:0.005".into());
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let grid = parse_grid(&grid_text)?;
            let mut records: Vec<CounterexampleRecord> = Vec::with_capacity(grid.len());
            for &z in &grid {
                let z = z.min(1.0 / 12.0);
                let zr = rational_from_f64(z)
                    .ok_or_else(|| Error::Config(format!("bad z value {z}")))?;
                records.push(counterexample_report(&zr)?);
            }
            let hash = config_hash(&["counterexample", &grid_text]);
            io::write_counterexample_csv(&out.join("counterexample.csv"), &records, hash, seed)?;
            println!(
                "counterexample: {} grid points, P_S = 1 throughout, P_M in [{:.6}, 1]",
                records.len(),
                records
                    .iter()
                    .map(|r| r.p_m.to_f64_lossy())
                    .fold(f64::INFINITY, f64::min)
            );
            Ok(ExitCode::SUCCESS)
        }
        #[allow(clippy::needless_range_loop)]
        Command::OracleCheck {
            seed,
            multinomial_sweeps,
            stochastic_sweeps,
        } => {
            let seed = seed.or(cfg.seed).unwrap_or(0);
            use rand::Rng as _;
            use rand::SeedableRng as _;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..*multinomial_sweeps {
                let len = rng.random_range(2..=8usize);
                let x: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
                let alpha = rng.random_range(2..=len);
                if !verify_multinomial_lemma(&x, alpha)? {
                    return Err(Error::Internal("multinomial bound violated".into()));
                }
            }
            for _ in 0..*stochastic_sweeps {
                let n = rng.random_range(2..=6usize);
                let mut a = vec![vec![0.0; n]; n];
                for col in 0..n {
                    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let sum: f64 = raw.iter().sum();
                    for row in 0..n {
                        a[row][col] = raw[row] / sum;
                    }
                }
                let r = rng.random_range(2..=n.min(4));
                let mut ell: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    ell.swap(i, j);
                }
                ell.truncate(r);
                let v = rng.random_range(0..n);
                if !verify_left_stochastic_lemma(&a, v, &ell)? {
                    return Err(Error::Internal("left-stochastic bound violated".into()));
                }
            }
            // Dual-path counterexample check at the three canonical points.
            for (num, den) in [(0i64, 1i64), (1, 24), (1, 12)] {
                let z = coalsim::oracle::rational(num, den);
                counterexample_report(&z)?;
            }
            println!(
                "oracle-check: {} + {} sweeps and dual-path verification passed",
                multinomial_sweeps, stochastic_sweeps
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Discrepancy {
            model,
            population,
            generations,
            scheme,
            seed,
            sample_size,
            replicates,
        } => {
            let model = resolve_model(model, cfg)?;
            let n = require(*population, cfg.population, "N")?;
            let k = require(*generations, cfg.generations, "K")?;
            let scheme = resolve_scheme(scheme, cfg)?;
            let seed = require(*seed, cfg.seed, "seed")?;
            let sample = require(*sample_size, cfg.sample_size, "n")?;
            let reps = require(*replicates, cfg.replicates, "replicates")?;
            let report = discrepancy_experiment(&model, scheme, n, sample, reps, k, seed)?;
            let hash = config_hash(&[
                "discrepancy",
                model.name(),
                &n.to_string(),
                &k.to_string(),
                scheme.label(),
                &seed.to_string(),
                &sample.to_string(),
                &reps.to_string(),
            ]);
            io::write_discrepancy_csv(&out.join("discrepancy.csv"), &report, hash, seed)?;
            io::write_discrepancy_summary(&out.join("summary.json"), &report, hash)?;
            println!(
                "discrepancy: mean |dev| = {:.6}, z = {:.3} over {} rows",
                report.mean_abs_deviation,
                report.z_score,
                report.rows.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

trait ToF64Lossy {
    fn to_f64_lossy(&self) -> f64;
}

impl ToF64Lossy for coalsim::oracle::Rational {
    fn to_f64_lossy(&self) -> f64 {
        use num_traits::ToPrimitive;
        self.to_f64().unwrap_or(f64::NAN)
    }
}
