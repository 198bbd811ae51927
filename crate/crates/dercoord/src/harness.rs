//! Scenario ingestion, synthetic scenario generation, and run reports.
//!
//! A scenario lives in a directory: one `scenario.toml` naming the horizon,
//! coordination settings, and per-prosumer parameter blocks, plus CSV files
//! for every per-slot series (outdoor temperature, per-prosumer renewable
//! generation and preferred shiftable profile, feed-in and demand-response
//! rates). CSVs are comma-separated with a header row and one data row per
//! slot; numbers are written with 9 fixed decimals, so emitted files load
//! back bit-exactly.
//!
//! The reference generator builds a deterministic 10-prosumer, 24-slot day:
//! a sinusoidal 20-32 °C outdoor profile, midday solar bells, an evening
//! demand-response window, and two archetypes — renewable-rich sellers
//! (ids 0-4) and renewable-poor buyers (ids 5-9).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{AdmmSettings, IterationRecord};
use crate::model::{
    self, DecisionSchedule, EnvironmentProfile, GridTariff, HvacParams, ProsumerProfile,
    RenewableProfile, Scenario, ServiceRates, ShiftableSpec, SlotMatrix, StorageParams,
    TerminalRule, TimeGrid,
};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: TOML parse error: {message}")]
    Toml { path: String, message: String },
    #[error("{path}: CSV error: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: expected {expected} data rows, found {got}")]
    LengthMismatch {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("{context}: {message}")]
    Invariant { context: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> LoadError {
    LoadError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------
// Scenario file schema
// ---------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    time: TimeGrid,
    admm: AdmmSettings,
    series: SharedSeries,
    #[serde(rename = "prosumer")]
    prosumers: Vec<ProsumerBlock>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SharedSeries {
    outdoor_temperature: String,
    fit_rate: String,
    dr_rate: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProsumerBlock {
    id: usize,
    tariff: GridTariff,
    hvac: HvacParams,
    shiftable: ShiftableBlock,
    renewable: RenewableBlock,
    storage: StorageParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShiftableBlock {
    window: Vec<usize>,
    omega_s: f64,
    p_s_max: f64,
    /// CSV file with the preferred per-slot profile.
    preferred: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RenewableBlock {
    /// CSV file with the available generation per slot.
    gen: String,
}

/// Reads a single-series CSV (`slot,value` header, one row per slot).
fn read_series_csv(path: &Path, expected: usize) -> Result<Vec<f64>, LoadError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LoadError::Csv {
            path: display.clone(),
            message: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(LoadError::Csv {
                path: display,
                message: format!("row {row}: expected 2 columns, found {}", record.len()),
            });
        }
        let value: f64 = record[1].parse().map_err(|_| LoadError::Csv {
            path: display.clone(),
            message: format!("row {row}: malformed number {:?}", &record[1]),
        })?;
        values.push(value);
    }
    if values.len() != expected {
        return Err(LoadError::LengthMismatch {
            path: display,
            expected,
            got: values.len(),
        });
    }
    Ok(values)
}

fn format_series_csv(values: &[f64]) -> String {
    let mut out = String::from("slot,value\n");
    for (t, v) in values.iter().enumerate() {
        out.push_str(&format!("{t},{v:.9}\n"));
    }
    out
}

/// Whole-file atomic write (temp file + rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), LoadError> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Loads and fully validates a scenario directory via its TOML file.
pub fn load_scenario(path: &Path) -> Result<Scenario, LoadError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: ScenarioFile = toml::from_str(&text).map_err(|e| LoadError::Toml {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let slots = file.time.slots;

    let tau_out = read_series_csv(&dir.join(&file.series.outdoor_temperature), slots)?;
    let pi_fit = read_series_csv(&dir.join(&file.series.fit_rate), slots)?;
    let pi_dr = read_series_csv(&dir.join(&file.series.dr_rate), slots)?;

    let mut prosumers = Vec::with_capacity(file.prosumers.len());
    for block in &file.prosumers {
        let gen = read_series_csv(&dir.join(&block.renewable.gen), slots)?;
        let preferred = read_series_csv(&dir.join(&block.shiftable.preferred), slots)?;
        prosumers.push(ProsumerProfile {
            id: block.id,
            tariff: block.tariff,
            hvac: block.hvac,
            shiftable: ShiftableSpec {
                window: block.shiftable.window.clone(),
                preferred,
                omega_s: block.shiftable.omega_s,
                p_s_max: block.shiftable.p_s_max,
            },
            renewable: RenewableProfile { gen },
            storage: block.storage,
            rates: ServiceRates {
                pi_fit: pi_fit.clone(),
                pi_dr: pi_dr.clone(),
            },
        });
    }

    let scenario = Scenario {
        time: file.time,
        env: EnvironmentProfile { tau_out },
        prosumers,
        admm: file.admm,
    };
    scenario.validate().map_err(|e| LoadError::Invariant {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(scenario)
}

/// Writes a scenario as `scenario.toml` plus its CSV series into `dir`.
/// Returns the TOML path. Output is byte-deterministic for equal inputs.
pub fn write_scenario(scenario: &Scenario, dir: &Path) -> Result<PathBuf, LoadError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write_series = |name: String, values: &[f64]| -> Result<String, LoadError> {
        atomic_write(&dir.join(&name), format_series_csv(values).as_bytes())?;
        Ok(name)
    };

    let series = SharedSeries {
        outdoor_temperature: write_series("outdoor_temperature.csv".into(), &scenario.env.tau_out)?,
        fit_rate: write_series("fit_rate.csv".into(), &scenario.prosumers[0].rates.pi_fit)?,
        dr_rate: write_series("dr_rate.csv".into(), &scenario.prosumers[0].rates.pi_dr)?,
    };
    let mut blocks = Vec::new();
    for p in &scenario.prosumers {
        blocks.push(ProsumerBlock {
            id: p.id,
            tariff: p.tariff,
            hvac: p.hvac,
            shiftable: ShiftableBlock {
                window: p.shiftable.window.clone(),
                omega_s: p.shiftable.omega_s,
                p_s_max: p.shiftable.p_s_max,
                preferred: write_series(
                    format!("preferred_p{}.csv", p.id),
                    &p.shiftable.preferred,
                )?,
            },
            renewable: RenewableBlock {
                gen: write_series(format!("renewable_p{}.csv", p.id), &p.renewable.gen)?,
            },
            storage: p.storage,
        });
    }
    let file = ScenarioFile {
        time: scenario.time,
        admm: scenario.admm,
        series,
        prosumers: blocks,
    };
    let toml_text = toml::to_string_pretty(&file).map_err(|e| LoadError::Toml {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let path = dir.join("scenario.toml");
    atomic_write(&path, toml_text.as_bytes())?;
    Ok(path)
}

// ---------------------------------------------------------------------
// Synthetic scenario generators
// ---------------------------------------------------------------------

/// Snaps a value onto the 1e-9 grid used by the CSV format, so generated
/// scenarios survive a write/load round trip bit-exactly.
fn q9(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn jitter(rng: &mut ChaCha8Rng, base: f64, frac: f64) -> f64 {
    base * (1.0 + frac * (rng.gen::<f64>() * 2.0 - 1.0))
}

/// Prosumer ids of the renewable-rich and renewable-poor archetypes in the
/// reference scenario.
pub fn reference_archetypes() -> (Vec<usize>, Vec<usize>) {
    ((0..5).collect(), (5..10).collect())
}

fn solar_bell(t_hour: f64, peak: f64) -> f64 {
    let v = peak * (-((t_hour - 12.5) / 3.0).powi(2)).exp();
    if v < 0.01 {
        0.0
    } else {
        v
    }
}

/// Reference tariff block. The demand charge is kept moderate relative to
/// the energy price so storage does not flatten every import profile into
/// one plateau; that keeps peaks where the loads are and leaves visible
/// demand-response headroom.
const ENERGY_RATE: f64 = 0.0875;
const DEMAND_RATE: f64 = 0.315;
const FIT_RATE: f64 = 0.028;
const DR_RATE: f64 = 0.105;

fn reference_prosumer(
    rng: &mut ChaCha8Rng,
    id: usize,
    slots: usize,
    rich: bool,
    pi_fit: &[f64],
    pi_dr: &[f64],
) -> ProsumerProfile {
    let solar_peak = if rich {
        jitter(rng, 4.2, 0.05)
    } else {
        jitter(rng, 0.8, 0.05)
    };
    let gen: Vec<f64> = (0..slots)
        .map(|t| q9(solar_bell((t % 24) as f64, solar_peak)))
        .collect();

    // The last two prosumers own no battery. Their morning task sets a real
    // grid peak that storage cannot flatten, which leaves them headroom to
    // answer the evening demand-response call.
    let battery_less = id >= 8;

    // Rich prosumers run their deferrable task before sunrise, poor ones in
    // the evening (battery-less ones in the morning as well).
    let day = (slots / 24).max(1);
    let mut window = Vec::new();
    let mut preferred = vec![0.0; slots];
    let shape = if rich || battery_less {
        [(6usize, 1.5), (7, 1.5), (8, 1.2), (9, 0.8)]
    } else {
        [(17usize, 1.0), (18, 1.3), (19, 1.0), (20, 0.7)]
    };
    for d in 0..day {
        for (hour, level) in shape {
            let t = d * 24 + hour;
            window.push(t);
            preferred[t] = q9(jitter(rng, level, 0.1));
        }
    }
    let p_s_max = 2.0 * preferred.iter().fold(0.0_f64, |m, &v| m.max(v));

    // Batteries are sized below the midday surplus so some of it has
    // nowhere to go but the feed-in tariff.
    let e_cap = if battery_less {
        0.0
    } else if rich {
        5.0
    } else {
        3.0
    };
    let p_b_max = if battery_less {
        0.0
    } else if rich {
        1.5
    } else {
        1.0
    };
    ProsumerProfile {
        id,
        tariff: GridTariff {
            pi_e: ENERGY_RATE,
            pi_d: DEMAND_RATE,
            p_g_max: 9.0,
        },
        // Cooling-only HVAC: the band floor must sit below the nightly
        // free-response temperature (outdoor minimum is 20 degC).
        hvac: HvacParams {
            r: 2.0,
            c: 2.0,
            gamma: -jitter(rng, 1.8, 0.08),
            omega_ac: q9(jitter(rng, 0.028, 0.1)),
            tau_ref: 23.0,
            tau_min: 19.0,
            tau_max: 24.5,
            tau_init: 23.0,
            p_ac_max: 5.0,
        },
        shiftable: ShiftableSpec {
            window,
            preferred,
            omega_s: q9(jitter(rng, 0.0875, 0.1)),
            p_s_max,
        },
        renewable: RenewableProfile { gen },
        storage: StorageParams {
            e_cap,
            eta_ch: 0.95,
            eta_dis: 0.95,
            alpha_min: 0.1,
            alpha_max: 0.95,
            p_ch_max: p_b_max,
            p_dis_max: p_b_max,
            beta: 0.00525,
            e_init: 0.1 * e_cap,
            terminal_rule: TerminalRule::None,
        },
        rates: ServiceRates {
            pi_fit: pi_fit.to_vec(),
            pi_dr: pi_dr.to_vec(),
        },
    }
}

fn reference_with_horizon(seed: u64, days: usize) -> Scenario {
    let slots = 24 * days;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau_out: Vec<f64> = (0..slots)
        .map(|t| {
            let hour = (t % 24) as f64;
            let day_swing = 1.0 + 0.05 * ((t / 24) as f64 * 1.3).sin();
            q9(26.0 - 6.0 * day_swing * ((hour - 3.0) / 24.0 * std::f64::consts::TAU).cos())
        })
        .collect();
    let pi_fit = vec![FIT_RATE; slots];
    let mut pi_dr = vec![0.0; slots];
    for d in 0..days {
        for hour in 18..21 {
            pi_dr[d * 24 + hour] = DR_RATE;
        }
    }

    let prosumers: Vec<ProsumerProfile> = (0..10)
        .map(|id| reference_prosumer(&mut rng, id, slots, id < 5, &pi_fit, &pi_dr))
        .collect();

    let scenario = Scenario {
        time: TimeGrid {
            slots,
            slot_hours: 1.0,
        },
        env: EnvironmentProfile { tau_out },
        prosumers,
        admm: AdmmSettings {
            rho: 1.0,
            eps_primal: 1e-3,
            eps_dual: 1e-3,
            max_iterations: 60,
        },
    };
    scenario.validate().expect("generated scenario is valid");
    scenario
}

/// The bundled daily reference scenario: 10 prosumers, 24 hourly slots.
pub fn generate_reference(seed: u64) -> Scenario {
    reference_with_horizon(seed, 1)
}

/// Weekly variant (T = 168) of the reference scenario.
pub fn generate_reference_weekly(seed: u64) -> Scenario {
    reference_with_horizon(seed, 7)
}

/// Small randomized scenario (2-3 prosumers, 4-6 slots) for oracle
/// cross-checks. Construction keeps every instance feasible: wide comfort
/// bands, tasks that fit their windows, storage seeded inside its band.
pub fn generate_small_random(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fleet = if rng.gen::<bool>() { 2 } else { 3 };
    let slots = if rng.gen::<bool>() { 4 } else { 6 };
    let tau_out: Vec<f64> = (0..slots)
        .map(|_| q9(24.0 + rng.gen::<f64>() * 8.0))
        .collect();
    let pi_fit: Vec<f64> = (0..slots).map(|_| q9(rng.gen::<f64>() * 0.12)).collect();
    let mut pi_dr = vec![0.0; slots];
    // One DR slot, rewarded slightly above the energy price half the time.
    if rng.gen::<bool>() {
        let t = rng.gen_range(0..slots);
        pi_dr[t] = q9(0.2 + rng.gen::<f64>() * 0.15);
    }

    let mut prosumers = Vec::new();
    for id in 0..fleet {
        let window_len = rng.gen_range(2..=slots.min(3));
        let start = rng.gen_range(0..=slots - window_len);
        let window: Vec<usize> = (start..start + window_len).collect();
        let mut preferred = vec![0.0; slots];
        for &t in &window {
            preferred[t] = q9(rng.gen::<f64>() * 0.8);
        }
        let p_s_max = 2.0 * preferred.iter().fold(0.5_f64, |m, &v| m.max(v));
        let e_cap = 2.0 + rng.gen::<f64>() * 3.0;
        let solar = rng.gen::<f64>() * 2.0;
        prosumers.push(ProsumerProfile {
            id,
            tariff: GridTariff {
                pi_e: 0.25,
                pi_d: if rng.gen::<bool>() { 1.5 } else { 0.0 },
                p_g_max: 10.0,
            },
            hvac: HvacParams {
                r: 1.5 + rng.gen::<f64>(),
                c: 1.5 + rng.gen::<f64>(),
                gamma: -(1.0 + rng.gen::<f64>() * 1.5),
                omega_ac: 0.02 + rng.gen::<f64>() * 0.1,
                tau_ref: 23.0,
                tau_min: 0.0,
                tau_max: 60.0,
                tau_init: 22.0 + rng.gen::<f64>() * 2.0,
                p_ac_max: 4.0,
            },
            shiftable: ShiftableSpec {
                window,
                preferred,
                omega_s: 0.05 + rng.gen::<f64>() * 0.3,
                p_s_max,
            },
            renewable: RenewableProfile {
                gen: (0..slots)
                    .map(|_| q9((rng.gen::<f64>() * solar).max(0.0)))
                    .collect(),
            },
            storage: StorageParams {
                e_cap,
                eta_ch: 0.85 + rng.gen::<f64>() * 0.12,
                eta_dis: 0.85 + rng.gen::<f64>() * 0.12,
                alpha_min: 0.05,
                alpha_max: 0.95,
                p_ch_max: 1.0 + rng.gen::<f64>(),
                p_dis_max: 1.0 + rng.gen::<f64>(),
                beta: 0.005 + rng.gen::<f64>() * 0.025,
                e_init: q9(0.5 * e_cap),
                terminal_rule: TerminalRule::None,
            },
            rates: ServiceRates {
                pi_fit: pi_fit.clone(),
                pi_dr: pi_dr.clone(),
            },
        });
    }
    let scenario = Scenario {
        time: TimeGrid {
            slots,
            slot_hours: 1.0,
        },
        env: EnvironmentProfile { tau_out },
        prosumers,
        admm: AdmmSettings {
            rho: 1.0,
            eps_primal: 1e-4,
            eps_dual: 1e-4,
            max_iterations: 300,
        },
    };
    scenario.validate().expect("generated scenario is valid");
    scenario
}

// ---------------------------------------------------------------------
// Run reports
// ---------------------------------------------------------------------

/// Summary of one solve/simulate run. Schedules and trades live in the CSV
/// files named here, next to the JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub fleet_cost: f64,
    pub fit_revenue: f64,
    pub dr_revenue: f64,
    pub per_prosumer_cost: Vec<f64>,
    /// Net trade revenue per prosumer at the final dual prices (zero for
    /// central solves).
    pub settlement: Vec<f64>,
    pub schedule_files: Vec<String>,
    pub trades_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_file: Option<String>,
    pub wall_clock_seconds: f64,
}

/// Computes fleet totals from schedules with the model operations.
pub fn fleet_totals(
    scenario: &Scenario,
    schedules: &[DecisionSchedule],
) -> Result<(f64, f64, f64, Vec<f64>), model::ModelError> {
    let mut fleet_cost = 0.0;
    let mut fit = 0.0;
    let mut dr = 0.0;
    let mut per = Vec::with_capacity(schedules.len());
    for (profile, sched) in scenario.prosumers.iter().zip(schedules) {
        let cost = model::prosumer_cost(profile, sched)?;
        let (r_fit, r_dr) = model::service_revenues(&profile.rates, sched);
        fleet_cost += cost;
        fit += r_fit;
        dr += r_dr;
        per.push(cost);
    }
    Ok((fleet_cost, fit, dr, per))
}

pub const SCHEDULE_CSV_HEADER: &str = "slot,p_g,p_ac,p_s,p_ch,p_dis,p_re,p_fit,p_dr,tau_in,e_b";

pub fn schedule_to_csv(sched: &DecisionSchedule) -> String {
    let mut out = String::from(SCHEDULE_CSV_HEADER);
    out.push('\n');
    for t in 0..sched.p_g.len() {
        out.push_str(&format!(
            "{t},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            sched.p_g[t],
            sched.p_ac[t],
            sched.p_s[t],
            sched.p_ch[t],
            sched.p_dis[t],
            sched.p_re[t],
            sched.p_fit[t],
            sched.p_dr[t],
            sched.tau_in[t],
            sched.e_b[t],
        ));
    }
    out
}

/// Parses the numeric columns of a schedule CSV (all columns after `slot`).
pub fn schedule_columns_from_csv(text: &str, path: &str) -> Result<Vec<Vec<f64>>, LoadError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != SCHEDULE_CSV_HEADER {
        return Err(LoadError::Csv {
            path: path.into(),
            message: "unexpected header".into(),
        });
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 10];
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(LoadError::Csv {
                path: path.into(),
                message: format!("row {i}: expected 11 columns"),
            });
        }
        for (k, field) in fields[1..].iter().enumerate() {
            cols[k].push(field.parse().map_err(|_| LoadError::Csv {
                path: path.into(),
                message: format!("row {i}: malformed number {field:?}"),
            })?);
        }
    }
    Ok(cols)
}

fn trades_to_csv(schedules: &[DecisionSchedule], lambda: Option<&[SlotMatrix]>) -> String {
    let mut out = String::from("slot,i,j,p_et,lambda\n");
    let fleet = schedules.len();
    for t in 0..schedules.first().map(|s| s.p_g.len()).unwrap_or(0) {
        for (i, sched) in schedules.iter().enumerate() {
            for j in 0..fleet {
                if i == j {
                    continue;
                }
                let price = lambda.map(|l| l[i].get(t, j)).unwrap_or(0.0);
                out.push_str(&format!(
                    "{t},{i},{j},{:.9},{price:.9}\n",
                    sched.p_et.get(t, j)
                ));
            }
        }
    }
    out
}

/// Writes `report.json`, per-prosumer schedule CSVs, and the trades CSV
/// into `dir`; returns the JSON path. File names are recorded in the
/// report before it is serialized.
pub fn write_report(
    dir: &Path,
    report: &mut RunReport,
    schedules: &[DecisionSchedule],
    lambda: Option<&[SlotMatrix]>,
) -> Result<PathBuf, LoadError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    report.schedule_files.clear();
    for (i, sched) in schedules.iter().enumerate() {
        let name = format!("schedule_p{i}.csv");
        atomic_write(&dir.join(&name), schedule_to_csv(sched).as_bytes())?;
        report.schedule_files.push(name);
    }
    report.trades_file = "trades.csv".into();
    atomic_write(
        &dir.join(&report.trades_file),
        trades_to_csv(schedules, lambda).as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(report).expect("report serialization is infallible");
    let path = dir.join("report.json");
    atomic_write(&path, json.as_bytes())?;
    Ok(path)
}

pub fn read_report(path: &Path) -> Result<RunReport, LoadError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| LoadError::Toml {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Differences between two run reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReportDelta {
    /// |cost_a - cost_b| / max(1, |cost_a|, |cost_b|).
    pub cost_delta_rel: f64,
    /// Largest absolute difference across all schedule CSV columns.
    pub max_schedule_delta: f64,
}

/// Loads two reports (plus their schedule CSVs) and measures their gap.
pub fn compare_reports(a: &Path, b: &Path) -> Result<ReportDelta, LoadError> {
    let ra = read_report(a)?;
    let rb = read_report(b)?;
    let cost_delta_rel = (ra.fleet_cost - rb.fleet_cost).abs()
        / ra.fleet_cost.abs().max(rb.fleet_cost.abs()).max(1.0);
    if ra.schedule_files.len() != rb.schedule_files.len() {
        return Err(LoadError::Invariant {
            context: "compare".into(),
            message: "reports cover different fleet sizes".into(),
        });
    }
    let dir_a = a.parent().unwrap_or_else(|| Path::new("."));
    let dir_b = b.parent().unwrap_or_else(|| Path::new("."));
    let mut max_delta = 0.0_f64;
    for (fa, fb) in ra.schedule_files.iter().zip(&rb.schedule_files) {
        let pa = dir_a.join(fa);
        let pb = dir_b.join(fb);
        let ca = schedule_columns_from_csv(
            &fs::read_to_string(&pa).map_err(|e| io_err(&pa, e))?,
            fa,
        )?;
        let cb = schedule_columns_from_csv(
            &fs::read_to_string(&pb).map_err(|e| io_err(&pb, e))?,
            fb,
        )?;
        for (col_a, col_b) in ca.iter().zip(&cb) {
            if col_a.len() != col_b.len() {
                return Err(LoadError::Invariant {
                    context: "compare".into(),
                    message: "schedule horizons differ".into(),
                });
            }
            for (va, vb) in col_a.iter().zip(col_b) {
                max_delta = max_delta.max((va - vb).abs());
            }
        }
    }
    Ok(ReportDelta {
        cost_delta_rel,
        max_schedule_delta: max_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_is_deterministic_and_loads_back() {
        let a = generate_reference(7);
        let b = generate_reference(7);
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path_a = write_scenario(&a, &dir.path().join("a")).unwrap();
        let path_b = write_scenario(&b, &dir.path().join("b")).unwrap();
        let bytes_a = fs::read(&path_a).unwrap();
        let bytes_b = fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b, "same seed must emit identical files");

        let loaded = load_scenario(&path_a).unwrap();
        assert_eq!(loaded, a, "write/load round trip must be exact");
    }

    #[test]
    fn documented_example_scenario_loads_and_solves() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../docs/example-scenario/scenario.toml");
        let scenario = load_scenario(&path).unwrap();
        assert_eq!(scenario.fleet_size(), 2);
        assert_eq!(scenario.time.slots, 4);
        let central = crate::subproblem::solve_dcm_central(&scenario, 1e-6).unwrap();
        assert!(central.total_cost.is_finite());
    }

    #[test]
    fn reference_archetype_renewable_ratio() {
        let scenario = generate_reference(7);
        let (rich, poor) = reference_archetypes();
        let total = |ids: &[usize]| -> f64 {
            ids.iter()
                .map(|&i| scenario.prosumers[i].renewable.gen.iter().sum::<f64>())
                .sum()
        };
        let ratio = total(&rich) / total(&poor);
        assert!(ratio > 4.0, "rich/poor renewable ratio {ratio} too small");
    }

    #[test]
    fn weekly_variant_has_seven_days() {
        let scenario = generate_reference_weekly(3);
        assert_eq!(scenario.time.slots, 168);
        scenario.validate().unwrap();
    }

    #[test]
    fn csv_length_mismatch_names_the_file() {
        let scenario = generate_reference(1);
        let dir = tempfile::tempdir().unwrap();
        let toml_path = write_scenario(&scenario, dir.path()).unwrap();
        // Drop the last row of one renewable file.
        let victim = dir.path().join("renewable_p3.csv");
        let text = fs::read_to_string(&victim).unwrap();
        let truncated: Vec<&str> = text.lines().collect();
        fs::write(&victim, truncated[..truncated.len() - 1].join("\n")).unwrap();
        let err = load_scenario(&toml_path).unwrap_err();
        match err {
            LoadError::LengthMismatch { path, expected, got } => {
                assert!(path.contains("renewable_p3.csv"));
                assert_eq!(expected, 24);
                assert_eq!(got, 23);
            }
            other => panic!("expected length mismatch, got {other}"),
        }
    }

    #[test]
    fn invariant_breach_names_the_prosumer() {
        let scenario = generate_reference(1);
        let dir = tempfile::tempdir().unwrap();
        let toml_path = write_scenario(&scenario, dir.path()).unwrap();
        let text = fs::read_to_string(&toml_path).unwrap();
        // Invert the state-of-charge band of one prosumer.
        let broken = text.replacen("alpha_min = 0.1", "alpha_min = 0.99", 1);
        assert_ne!(text, broken);
        fs::write(&toml_path, broken).unwrap();
        let err = load_scenario(&toml_path).unwrap_err();
        match err {
            LoadError::Invariant { message, .. } => {
                assert!(message.contains("prosumer 0"), "message was: {message}")
            }
            other => panic!("expected invariant error, got {other}"),
        }
    }

    #[test]
    fn schedule_csv_round_trips_byte_exactly() {
        let scenario = generate_small_random(11);
        let profile = &scenario.prosumers[0];
        let mut sched = DecisionSchedule::zero(
            profile,
            &scenario.env,
            &scenario.time,
            scenario.fleet_size(),
        )
        .unwrap();
        sched.p_g = (0..scenario.time.slots)
            .map(|t| 0.123456789 + t as f64 / 3.0)
            .collect();
        sched.p_ac = (0..scenario.time.slots).map(|t| t as f64 * 0.37).collect();
        let text = schedule_to_csv(&sched);
        let cols = schedule_columns_from_csv(&text, "mem").unwrap();
        let rebuilt = DecisionSchedule {
            p_g: cols[0].clone(),
            p_ac: cols[1].clone(),
            p_s: cols[2].clone(),
            p_ch: cols[3].clone(),
            p_dis: cols[4].clone(),
            p_re: cols[5].clone(),
            p_fit: cols[6].clone(),
            p_dr: cols[7].clone(),
            p_et: sched.p_et.clone(),
            tau_in: cols[8].clone(),
            e_b: cols[9].clone(),
        };
        assert_eq!(schedule_to_csv(&rebuilt), text);
    }

    #[test]
    fn fleet_totals_recompute_from_schedules() {
        let scenario = generate_small_random(5);
        let schedules: Vec<DecisionSchedule> = scenario
            .prosumers
            .iter()
            .map(|p| {
                DecisionSchedule::zero(p, &scenario.env, &scenario.time, scenario.fleet_size())
                    .unwrap()
            })
            .collect();
        let (fleet_cost, fit, dr, per) = fleet_totals(&scenario, &schedules).unwrap();
        let direct: f64 = scenario
            .prosumers
            .iter()
            .zip(&schedules)
            .map(|(p, s)| model::prosumer_cost(p, s).unwrap())
            .sum();
        assert_abs_diff_eq!(fleet_cost, direct, epsilon = 1e-9);
        assert_abs_diff_eq!(fleet_cost, per.iter().sum::<f64>(), epsilon = 1e-9);
        assert!(fit >= 0.0 && dr >= 0.0);
    }
}
