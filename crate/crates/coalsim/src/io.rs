//! CSV and config plumbing shared by the library and the command-line tool.
//!
//! Every CSV written here has a header row and a trailing metadata comment
//! recording the config hash and master seed, and floats are serialised
//! with 17 significant digits so files round-trip exactly.

use crate::genealogy::GenealogyTrajectory;
use crate::kingman::ConvergenceReport;
use crate::lineage::{CoalescenceProfile, DiscrepancyReport};
use crate::model::{builtin_model, BuiltinParams, ForwardRun, ModelSpec};
use crate::oracle::CounterexampleRecord;
use crate::{Error, Result};
use num_traits::ToPrimitive;
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// 17 significant digits: enough to reproduce any f64 bit-exactly.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON has no NaN/inf tokens; non-finite statistics become null.
fn json_number(x: f64) -> String {
    if x.is_finite() {
        format_float(x)
    } else {
        "null".into()
    }
}

/// FNV-1a over the canonical config string.
pub fn config_hash(parts: &[&str]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for part in parts {
        for b in part.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0x1f;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn footer(hash: u64, seed: u64) -> String {
    format!("# config_hash={hash:016x} seed={seed}\n")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

/// `locations.csv` and `ancestors.csv` under `dir`.
pub fn write_run_csv(dir: &Path, run: &ForwardRun, hash: u64) -> Result<()> {
    let mut loc = String::from("generation,particle,state\n");
    for (g, row) in run.locations.iter().enumerate() {
        for (i, &x) in row.iter().enumerate() {
            let _ = writeln!(loc, "{g},{i},{x}");
        }
    }
    loc.push_str(&footer(hash, run.seed));
    write_file(&dir.join("locations.csv"), &loc)?;

    let mut anc = String::from("generation,child,parent\n");
    for (g, row) in run.ancestors.iter().enumerate() {
        for (i, &p) in row.iter().enumerate() {
            let _ = writeln!(anc, "{g},{i},{p}");
        }
    }
    anc.push_str(&footer(hash, run.seed));
    write_file(&dir.join("ancestors.csv"), &anc)
}

/// Trajectory rows: reverse generation, block index, semicolon-joined
/// members, particle label.
pub fn write_trajectory_csv(
    path: &Path,
    tr: &GenealogyTrajectory,
    hash: u64,
    seed: u64,
) -> Result<()> {
    let mut out = String::from("k,block_index,members,label\n");
    for (k, state) in tr.states.iter().enumerate() {
        for (b, block) in state.blocks().iter().enumerate() {
            let members: Vec<String> = block.members.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(out, "{k},{b},{},{}", members.join(";"), block.label);
        }
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

pub fn write_profile_csv(
    path: &Path,
    profile: &CoalescenceProfile,
    hash: u64,
    seed: u64,
) -> Result<()> {
    let mut header = String::from("k,c_value,ci_halfwidth,multi_prob");
    for &(i, j) in &profile.pair_index {
        let _ = write!(header, ",pair_{i}_{j}");
    }
    header.push('\n');
    let mut out = header;
    for step in 0..profile.values.len() {
        let k = profile.start + 1 + step;
        let ci = profile
            .ci_halfwidth
            .as_ref()
            .map_or(0.0, |c| c[step]);
        let _ = write!(
            out,
            "{k},{},{},{}",
            format_float(profile.values[step]),
            format_float(ci),
            format_float(profile.multi_values[step])
        );
        for pv in &profile.pair_values {
            let _ = write!(out, ",{}", format_float(pv[step]));
        }
        out.push('\n');
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

pub fn write_timescale_csv(
    path: &Path,
    rows: &[(f64, usize)],
    hash: u64,
    seed: u64,
) -> Result<()> {
    let mut out = String::from("t,tau\n");
    for &(t, tau) in rows {
        let _ = writeln!(out, "{},{tau}", format_float(t));
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

pub fn write_counterexample_csv(
    path: &Path,
    records: &[CounterexampleRecord],
    hash: u64,
    seed: u64,
) -> Result<()> {
    let mut out = String::from(
        "z,P_S,P_M,m_S1,m_S2,m_S3,m_S4,m_M1,m_M2,m_M3,m_M4,P_S_shuffled\n",
    );
    for r in records {
        let f = |x: &crate::oracle::Rational| format_float(x.to_f64().unwrap_or(f64::NAN));
        let _ = write!(out, "{},{},{}", f(&r.z), f(&r.p_s), f(&r.p_m));
        for m in &r.moments_s {
            let _ = write!(out, ",{}", f(m));
        }
        for m in &r.moments_m {
            let _ = write!(out, ",{}", f(m));
        }
        let _ = writeln!(out, ",{}", f(&r.p_s_shuffled));
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

/// Per-replicate rows of a convergence experiment.
pub fn write_convergence_csv(path: &Path, report: &ConvergenceReport, hash: u64, seed: u64) -> Result<()> {
    let mut out = String::from("replicate,t_sample,pair,merger_size,horizon_failed,second_epoch_t\n");
    for row in &report.replicate_rows {
        let t = row.t_sample.map_or(String::new(), format_float);
        let pair = row
            .pair
            .map_or(String::new(), |(i, j)| format!("{i};{j}"));
        let t2 = row.second_epoch_t.map_or(String::new(), format_float);
        let _ = writeln!(
            out,
            "{},{t},{pair},{},{},{t2}",
            row.replicate,
            row.merger_size,
            u8::from(row.horizon_failed)
        );
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

/// Summary statistics as a small JSON document.
pub fn write_convergence_summary(path: &Path, report: &ConvergenceReport, hash: u64) -> Result<()> {
    let mut pairs = String::new();
    for (i, (&(a, b), &c)) in report
        .pair_index
        .iter()
        .zip(report.merged_pair_counts.iter())
        .enumerate()
    {
        if i > 0 {
            pairs.push_str(", ");
        }
        let _ = write!(pairs, "\"{a}-{b}\": {c}");
    }
    let second = match &report.second_epoch {
        Some(s) => format!(
            ",\n  \"second_epoch_ks\": {},\n  \"second_epoch_failures\": {}",
            json_number(s.ks_statistic),
            s.failures
        ),
        None => String::new(),
    };
    let json = format!(
        "{{\n  \"model\": \"{}\",\n  \"scheme\": \"{}\",\n  \"population\": {},\n  \"sample_size\": {},\n  \"replicates\": {},\n  \"horizon\": {},\n  \"ks_statistic\": {},\n  \"chi2_p\": {},\n  \"merged_pair_counts\": {{{pairs}}},\n  \"multi_merger_count\": {},\n  \"horizon_failures\": {},\n  \"config_hash\": \"{hash:016x}\"{second}\n}}\n",
        report.model_name,
        report.scheme.label(),
        report.population,
        report.sample_size,
        report.replicates,
        report.horizon,
        json_number(report.ks_statistic),
        json_number(report.chi2_p),
        report.multi_merger_count,
        report.horizon_failures,
    );
    write_file(path, &json)
}

pub fn write_discrepancy_csv(
    path: &Path,
    report: &DiscrepancyReport,
    hash: u64,
    seed: u64,
) -> Result<()> {
    let mut out = String::from("rev_generation,observations,merger_freq,formula_mean,deviation\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.rev_generation,
            row.observations,
            format_float(row.merger_freq),
            format_float(row.formula_mean),
            format_float(row.deviation)
        );
    }
    out.push_str(&footer(hash, seed));
    write_file(path, &out)
}

pub fn write_discrepancy_summary(path: &Path, report: &DiscrepancyReport, hash: u64) -> Result<()> {
    let json = format!(
        "{{\n  \"replicates\": {},\n  \"mean_abs_deviation\": {},\n  \"z_score\": {},\n  \"config_hash\": \"{hash:016x}\"\n}}\n",
        report.replicates,
        format_float(report.mean_abs_deviation),
        format_float(report.z_score),
    );
    write_file(path, &json)
}

// ---------------------------------------------------------------------------
// Model configuration files.
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct ModelConfig {
    builtin: Option<String>,
    params: Option<ParamTable>,
    name: Option<String>,
    #[serde(alias = "S")]
    states: Option<usize>,
    stationary: Option<bool>,
    potentials: Option<Vec<Vec<f64>>>,
    kernels: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Deserialize)]
struct ParamTable {
    #[serde(alias = "S")]
    states: Option<usize>,
    p_stay: Option<f64>,
    g_ratio: Option<f64>,
}

/// Loads a model from TOML: either `builtin = "..."` with an optional
/// `[params]` table, or inline `name`/`states`/`potentials`/`kernels`.
pub fn model_from_toml(text: &str) -> Result<ModelSpec> {
    let cfg: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
    if let Some(builtin) = cfg.builtin {
        let p = cfg.params.unwrap_or(ParamTable {
            states: None,
            p_stay: None,
            g_ratio: None,
        });
        return builtin_model(
            &builtin,
            &BuiltinParams {
                states: p.states,
                p_stay: p.p_stay,
                g_ratio: p.g_ratio,
            },
        );
    }
    let name = cfg.name.unwrap_or_else(|| "custom".into());
    let potentials = cfg
        .potentials
        .ok_or_else(|| Error::Config("inline model needs `potentials`".into()))?;
    let kernels = cfg
        .kernels
        .ok_or_else(|| Error::Config("inline model needs `kernels`".into()))?;
    if let Some(s) = cfg.states {
        if potentials.iter().any(|g| g.len() != s) {
            return Err(Error::Config("`states` disagrees with table sizes".into()));
        }
    }
    let stationary = cfg.stationary.unwrap_or(potentials.len() == 1);
    let flat: Vec<Vec<f64>> = kernels
        .into_iter()
        .map(|m| m.into_iter().flatten().collect())
        .collect();
    ModelSpec::new(name, potentials, flat, stationary)
}
