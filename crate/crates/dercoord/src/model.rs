//! Prosumer and device models: tariffs, HVAC thermal dynamics, shiftable
//! loads, renewables, battery storage, service revenues, and per-schedule
//! feasibility checking.
//!
//! Conventions: power in kW, energy in kWh, temperatures in °C. Slot series
//! are 0-indexed vectors of length `T`. The thermal and storage recursions
//! advance with the power applied during the slot itself, seeded from the
//! configured initial state.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by model operations.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },
}

fn invalid(what: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        what: what.into(),
        reason: reason.into(),
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            got,
        })
    }
}

fn all_finite(what: &str, values: &[f64]) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(what, "contains a non-finite value"))
    }
}

/// The scheduling horizon: `slots` slots of `slot_hours` hours each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub slots: usize,
    pub slot_hours: f64,
}

impl TimeGrid {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.slots == 0 {
            return Err(invalid("time grid", "slot count must be at least 1"));
        }
        if !(self.slot_hours > 0.0) || !self.slot_hours.is_finite() {
            return Err(invalid("time grid", "slot_hours must be positive"));
        }
        Ok(())
    }
}

/// Utility tariff: per-kWh energy price, per-kW demand charge on the peak
/// draw over the horizon, and the physical supply cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridTariff {
    pub pi_e: f64,
    pub pi_d: f64,
    pub p_g_max: f64,
}

impl GridTariff {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.pi_e >= 0.0 && self.pi_d >= 0.0) {
            return Err(invalid("tariff", "prices must be nonnegative"));
        }
        if !(self.p_g_max > 0.0) {
            return Err(invalid("tariff", "p_g_max must be positive"));
        }
        Ok(())
    }
}

/// First-order RC thermal model of one HVAC zone.
///
/// `gamma` is the temperature change per kW of HVAC power over one slot
/// (negative when cooling). The decay factor per slot is
/// `epsilon = exp(-slot_hours / (r * c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvacParams {
    pub r: f64,
    pub c: f64,
    pub gamma: f64,
    pub omega_ac: f64,
    pub tau_ref: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_init: f64,
    pub p_ac_max: f64,
}

impl HvacParams {
    pub fn epsilon(&self, slot_hours: f64) -> f64 {
        (-slot_hours / (self.r * self.c)).exp()
    }

    pub fn validate(&self, slot_hours: f64) -> Result<(), ModelError> {
        if !(self.r > 0.0 && self.c > 0.0) {
            return Err(invalid("hvac", "r and c must be positive"));
        }
        if self.omega_ac < 0.0 {
            return Err(invalid("hvac", "omega_ac must be nonnegative"));
        }
        if !(self.tau_min <= self.tau_ref && self.tau_ref <= self.tau_max) {
            return Err(invalid(
                "hvac",
                "comfort band must satisfy tau_min <= tau_ref <= tau_max",
            ));
        }
        if self.p_ac_max < 0.0 {
            return Err(invalid("hvac", "p_ac_max must be nonnegative"));
        }
        let eps = self.epsilon(slot_hours);
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid("hvac", "decay factor must lie strictly in (0, 1)"));
        }
        Ok(())
    }
}

/// A deferrable task: total preferred energy must be delivered within the
/// window, per-slot power capped at `p_s_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftableSpec {
    /// Slot indices (0-based) in which the load may run.
    pub window: Vec<usize>,
    /// Preferred per-slot load; zero outside the window.
    pub preferred: Vec<f64>,
    pub omega_s: f64,
    pub p_s_max: f64,
}

impl ShiftableSpec {
    pub fn in_window(&self, slot: usize) -> bool {
        self.window.contains(&slot)
    }

    pub fn validate(&self, slots: usize) -> Result<(), ModelError> {
        check_len("shiftable preferred profile", slots, self.preferred.len())?;
        all_finite("shiftable preferred profile", &self.preferred)?;
        if self.omega_s < 0.0 {
            return Err(invalid("shiftable", "omega_s must be nonnegative"));
        }
        if self.p_s_max < 0.0 {
            return Err(invalid("shiftable", "p_s_max must be nonnegative"));
        }
        let mut seen = vec![false; slots];
        for &t in &self.window {
            if t >= slots {
                return Err(invalid("shiftable", format!("window slot {t} out of range")));
            }
            if seen[t] {
                return Err(invalid("shiftable", format!("window slot {t} repeated")));
            }
            seen[t] = true;
        }
        for (t, &p) in self.preferred.iter().enumerate() {
            if !seen[t] && p != 0.0 {
                return Err(invalid(
                    "shiftable",
                    format!("preferred load nonzero outside window at slot {t}"),
                ));
            }
            if p < 0.0 || p > self.p_s_max {
                return Err(invalid(
                    "shiftable",
                    format!("preferred load at slot {t} outside [0, p_s_max]"),
                ));
            }
        }
        Ok(())
    }
}

/// Day-ahead available renewable generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewableProfile {
    pub gen: Vec<f64>,
}

impl RenewableProfile {
    pub fn validate(&self, slots: usize) -> Result<(), ModelError> {
        check_len("renewable profile", slots, self.gen.len())?;
        all_finite("renewable profile", &self.gen)?;
        if self.gen.iter().any(|&g| g < 0.0) {
            return Err(invalid("renewable", "generation must be nonnegative"));
        }
        Ok(())
    }
}

/// End-of-horizon requirement on the storage level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalRule {
    None,
    AtLeastInitial,
}

/// Battery parameters: capacity, charge/discharge efficiencies and caps,
/// state-of-charge band, degradation cost, initial level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub e_cap: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub p_ch_max: f64,
    pub p_dis_max: f64,
    pub beta: f64,
    pub e_init: f64,
    pub terminal_rule: TerminalRule,
}

impl StorageParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.e_cap >= 0.0) {
            return Err(invalid("storage", "capacity must be nonnegative"));
        }
        if !(self.eta_ch >= 0.0 && self.eta_ch <= 1.0) {
            return Err(invalid("storage", "eta_ch must lie in [0, 1]"));
        }
        if !(self.eta_dis > 0.0 && self.eta_dis <= 1.0) {
            return Err(invalid("storage", "eta_dis must lie in (0, 1]"));
        }
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(invalid(
                "storage",
                "state-of-charge fractions must satisfy 0 <= alpha_min <= alpha_max <= 1",
            ));
        }
        let lo = self.alpha_min * self.e_cap;
        let hi = self.alpha_max * self.e_cap;
        if !(lo <= self.e_init && self.e_init <= hi) {
            return Err(invalid(
                "storage",
                format!("e_init {} outside level band [{lo}, {hi}]", self.e_init),
            ));
        }
        if self.p_ch_max < 0.0 || self.p_dis_max < 0.0 || self.beta < 0.0 {
            return Err(invalid("storage", "caps and beta must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-slot feed-in tariff and demand-response reward rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRates {
    pub pi_fit: Vec<f64>,
    pub pi_dr: Vec<f64>,
}

impl ServiceRates {
    pub fn validate(&self, slots: usize) -> Result<(), ModelError> {
        check_len("pi_fit", slots, self.pi_fit.len())?;
        check_len("pi_dr", slots, self.pi_dr.len())?;
        all_finite("pi_fit", &self.pi_fit)?;
        all_finite("pi_dr", &self.pi_dr)?;
        if self.pi_fit.iter().chain(self.pi_dr.iter()).any(|&r| r < 0.0) {
            return Err(invalid("service rates", "rates must be nonnegative"));
        }
        Ok(())
    }
}

/// Everything static about one prosumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerProfile {
    pub id: usize,
    pub tariff: GridTariff,
    pub hvac: HvacParams,
    pub shiftable: ShiftableSpec,
    pub renewable: RenewableProfile,
    pub storage: StorageParams,
    pub rates: ServiceRates,
}

impl ProsumerProfile {
    pub fn validate(&self, time: &TimeGrid) -> Result<(), ModelError> {
        self.tariff.validate()?;
        self.hvac.validate(time.slot_hours)?;
        self.shiftable.validate(time.slots)?;
        self.renewable.validate(time.slots)?;
        self.storage.validate()?;
        self.rates.validate(time.slots)?;
        Ok(())
    }
}

/// Shared outdoor temperature series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentProfile {
    pub tau_out: Vec<f64>,
}

impl EnvironmentProfile {
    pub fn validate(&self, slots: usize) -> Result<(), ModelError> {
        check_len("outdoor temperature", slots, self.tau_out.len())?;
        all_finite("outdoor temperature", &self.tau_out)
    }
}

/// A dense slot-by-counterpart matrix, used for pairwise trades and for the
/// per-prosumer dual/auxiliary slices handed out by the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotMatrix {
    slots: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SlotMatrix {
    pub fn zeros(slots: usize, cols: usize) -> Self {
        Self {
            slots,
            cols,
            data: vec![0.0; slots * cols],
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, slot: usize, col: usize) -> f64 {
        self.data[slot * self.cols + col]
    }

    pub fn set(&mut self, slot: usize, col: usize, value: f64) {
        self.data[slot * self.cols + col] = value;
    }

    /// Sum over counterparts in one slot.
    pub fn row_sum(&self, slot: usize) -> f64 {
        self.data[slot * self.cols..(slot + 1) * self.cols]
            .iter()
            .sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One prosumer's decisions over the horizon plus the derived indoor
/// temperature and storage level trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSchedule {
    pub p_g: Vec<f64>,
    pub p_ac: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_ch: Vec<f64>,
    pub p_dis: Vec<f64>,
    pub p_re: Vec<f64>,
    pub p_fit: Vec<f64>,
    pub p_dr: Vec<f64>,
    /// Pairwise trades: `p_et[t][j]` is power sold to prosumer `j` in slot
    /// `t` (negative = purchase). The own column is identically zero.
    pub p_et: SlotMatrix,
    pub tau_in: Vec<f64>,
    pub e_b: Vec<f64>,
}

impl DecisionSchedule {
    /// All-zero schedule with recursion fields derived from zero input.
    pub fn zero(
        profile: &ProsumerProfile,
        env: &EnvironmentProfile,
        time: &TimeGrid,
        fleet_size: usize,
    ) -> Result<Self, ModelError> {
        let t = time.slots;
        let zeros = vec![0.0; t];
        let tau_in = simulate_temperature(&profile.hvac, env, time.slot_hours, &zeros)?;
        let e_b = simulate_storage(&profile.storage, time.slot_hours, &zeros, &zeros)?;
        Ok(Self {
            p_g: zeros.clone(),
            p_ac: zeros.clone(),
            p_s: zeros.clone(),
            p_ch: zeros.clone(),
            p_dis: zeros.clone(),
            p_re: zeros.clone(),
            p_fit: zeros.clone(),
            p_dr: zeros,
            p_et: SlotMatrix::zeros(t, fleet_size),
            tau_in,
            e_b,
        })
    }

    pub fn check_dims(&self, slots: usize) -> Result<(), ModelError> {
        check_len("p_g", slots, self.p_g.len())?;
        check_len("p_ac", slots, self.p_ac.len())?;
        check_len("p_s", slots, self.p_s.len())?;
        check_len("p_ch", slots, self.p_ch.len())?;
        check_len("p_dis", slots, self.p_dis.len())?;
        check_len("p_re", slots, self.p_re.len())?;
        check_len("p_fit", slots, self.p_fit.len())?;
        check_len("p_dr", slots, self.p_dr.len())?;
        check_len("tau_in", slots, self.tau_in.len())?;
        check_len("e_b", slots, self.e_b.len())?;
        check_len("p_et rows", slots, self.p_et.slots())?;
        Ok(())
    }
}

/// A scenario: horizon, shared environment, the prosumer fleet, and the
/// coordination settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub time: TimeGrid,
    pub env: EnvironmentProfile,
    pub prosumers: Vec<ProsumerProfile>,
    pub admm: crate::coordinator::AdmmSettings,
}

impl Scenario {
    pub fn fleet_size(&self) -> usize {
        self.prosumers.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.time.validate()?;
        self.env.validate(self.time.slots)?;
        if self.prosumers.is_empty() {
            return Err(invalid("scenario", "at least one prosumer required"));
        }
        for (k, p) in self.prosumers.iter().enumerate() {
            if p.id != k {
                return Err(invalid(
                    format!("prosumer {}", p.id),
                    format!("id must equal its fleet position {k}"),
                ));
            }
            p.validate(&self.time)
                .map_err(|e| invalid(format!("prosumer {k}"), e.to_string()))?;
        }
        self.admm
            .validate()
            .map_err(|e| invalid("admm settings", e))?;
        Ok(())
    }
}

/// Indoor temperature trajectory under the RC recursion.
///
/// `tau[t] = tau_out[t] - (tau_out[t] - tau[t-1]) * eps + gamma * p_ac[t]`,
/// seeded with `tau[-1] = tau_init`.
pub fn simulate_temperature(
    hvac: &HvacParams,
    env: &EnvironmentProfile,
    slot_hours: f64,
    p_ac: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_len("p_ac", env.tau_out.len(), p_ac.len())?;
    let eps = hvac.epsilon(slot_hours);
    let mut tau = Vec::with_capacity(p_ac.len());
    let mut prev = hvac.tau_init;
    for (t, &out) in env.tau_out.iter().enumerate() {
        let next = out - (out - prev) * eps + hvac.gamma * p_ac[t];
        tau.push(next);
        prev = next;
    }
    Ok(tau)
}

/// Storage level trajectory in kWh.
///
/// `e[t] = e[t-1] + eta_ch * p_ch[t] * dt - p_dis[t] * dt / eta_dis`,
/// seeded with `e[-1] = e_init`.
pub fn simulate_storage(
    storage: &StorageParams,
    slot_hours: f64,
    p_ch: &[f64],
    p_dis: &[f64],
) -> Result<Vec<f64>, ModelError> {
    check_len("p_dis", p_ch.len(), p_dis.len())?;
    let mut level = Vec::with_capacity(p_ch.len());
    let mut prev = storage.e_init;
    for t in 0..p_ch.len() {
        let next =
            prev + storage.eta_ch * p_ch[t] * slot_hours - p_dis[t] * slot_hours / storage.eta_dis;
        level.push(next);
        prev = next;
    }
    Ok(level)
}

/// Grid cost: energy charge plus demand charge on the peak draw.
pub fn grid_cost(tariff: &GridTariff, p_g: &[f64]) -> Result<f64, ModelError> {
    if let Some(t) = p_g.iter().position(|&v| v < 0.0) {
        return Err(ModelError::Domain(format!(
            "grid purchase negative at slot {t}"
        )));
    }
    let energy: f64 = p_g.iter().sum();
    let peak = p_g.iter().fold(0.0_f64, |m, &v| m.max(v));
    Ok(tariff.pi_e * energy + tariff.pi_d * peak)
}

/// Quadratic discomfort costs: (HVAC temperature deviation, load shifting).
pub fn discomfort_costs(
    profile: &ProsumerProfile,
    sched: &DecisionSchedule,
) -> Result<(f64, f64), ModelError> {
    check_len("p_s", sched.tau_in.len(), sched.p_s.len())?;
    let ac: f64 = sched
        .tau_in
        .iter()
        .map(|&tau| (tau - profile.hvac.tau_ref).powi(2))
        .sum();
    let shift: f64 = profile
        .shiftable
        .window
        .iter()
        .map(|&t| (sched.p_s[t] - profile.shiftable.preferred[t]).powi(2))
        .sum();
    Ok((
        profile.hvac.omega_ac * ac,
        profile.shiftable.omega_s * shift,
    ))
}

/// Battery degradation cost, proportional to total throughput.
pub fn storage_cost(storage: &StorageParams, sched: &DecisionSchedule) -> f64 {
    let throughput: f64 = sched
        .p_ch
        .iter()
        .zip(&sched.p_dis)
        .map(|(c, d)| c + d)
        .sum();
    storage.beta * throughput
}

/// Revenues from feed-in and demand response.
pub fn service_revenues(rates: &ServiceRates, sched: &DecisionSchedule) -> (f64, f64) {
    let fit: f64 = rates
        .pi_fit
        .iter()
        .zip(&sched.p_fit)
        .map(|(r, p)| r * p)
        .sum();
    let dr: f64 = rates
        .pi_dr
        .iter()
        .zip(&sched.p_dr)
        .map(|(r, p)| r * p)
        .sum();
    (fit, dr)
}

/// One prosumer's net cost: grid + discomfort + degradation minus service
/// revenues. Pairwise trade payments cancel across the fleet and are
/// settled separately, so they do not appear here.
pub fn prosumer_cost(
    profile: &ProsumerProfile,
    sched: &DecisionSchedule,
) -> Result<f64, ModelError> {
    let c_g = grid_cost(&profile.tariff, &sched.p_g)?;
    let (c_ac, c_s) = discomfort_costs(profile, sched)?;
    let c_b = storage_cost(&profile.storage, sched);
    let (r_fit, r_dr) = service_revenues(&profile.rates, sched);
    Ok(c_g + c_ac + c_s + c_b - r_fit - r_dr)
}

/// Constraint families reported by [`check_feasibility`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    GridCapacity,
    TemperatureRecursion,
    ComfortBand,
    HvacCap,
    ShiftableTask,
    ShiftableWindow,
    ShiftableCap,
    RenewableLimit,
    StorageRecursion,
    StorageLevel,
    StorageTerminal,
    ChargeCap,
    DischargeCap,
    FeedInLimit,
    DemandResponseLimit,
    PowerBalance,
    TradeDiagonal,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Constraint::GridCapacity => "grid-capacity",
            Constraint::TemperatureRecursion => "temperature-recursion",
            Constraint::ComfortBand => "comfort-band",
            Constraint::HvacCap => "hvac-cap",
            Constraint::ShiftableTask => "shiftable-task",
            Constraint::ShiftableWindow => "shiftable-window",
            Constraint::ShiftableCap => "shiftable-cap",
            Constraint::RenewableLimit => "renewable-limit",
            Constraint::StorageRecursion => "storage-recursion",
            Constraint::StorageLevel => "storage-level",
            Constraint::StorageTerminal => "storage-terminal",
            Constraint::ChargeCap => "charge-cap",
            Constraint::DischargeCap => "discharge-cap",
            Constraint::FeedInLimit => "feed-in-limit",
            Constraint::DemandResponseLimit => "demand-response-limit",
            Constraint::PowerBalance => "power-balance",
            Constraint::TradeDiagonal => "trade-diagonal",
        };
        f.write_str(name)
    }
}

/// One constraint breach: which family, which slot (`None` for horizon-wide
/// constraints), and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub slot: Option<usize>,
    pub magnitude: f64,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.slot {
            Some(t) => write!(
                f,
                "{} violated at slot {t} by {:.6e}",
                self.constraint, self.magnitude
            ),
            None => write!(f, "{} violated by {:.6e}", self.constraint, self.magnitude),
        }
    }
}

struct ViolationLog {
    tol: f64,
    out: Vec<Violation>,
}

impl ViolationLog {
    fn new(tol: f64) -> Self {
        Self { tol, out: Vec::new() }
    }

    fn record(&mut self, constraint: Constraint, slot: Option<usize>, magnitude: f64) {
        if magnitude > self.tol {
            self.out.push(Violation {
                constraint,
                slot,
                magnitude,
            });
        }
    }

    /// Checks `lo - tol <= value <= hi + tol`.
    fn bounds(&mut self, constraint: Constraint, slot: usize, value: f64, lo: f64, hi: f64) {
        self.record(constraint, Some(slot), (lo - value).max(value - hi));
    }
}

/// Default absolute tolerance for [`check_feasibility`].
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

/// Verifies every model constraint on a schedule within an absolute
/// tolerance and returns the list of breaches (empty = feasible).
pub fn check_feasibility(
    profile: &ProsumerProfile,
    env: &EnvironmentProfile,
    time: &TimeGrid,
    sched: &DecisionSchedule,
    tol: f64,
) -> Result<Vec<Violation>, ModelError> {
    let t_slots = time.slots;
    sched.check_dims(t_slots)?;
    env.validate(t_slots)?;
    let mut log = ViolationLog::new(tol);

    // Grid draw and HVAC power caps.
    for t in 0..t_slots {
        log.bounds(
            Constraint::GridCapacity,
            t,
            sched.p_g[t],
            0.0,
            profile.tariff.p_g_max,
        );
        log.bounds(
            Constraint::HvacCap,
            t,
            sched.p_ac[t],
            0.0,
            profile.hvac.p_ac_max,
        );
    }

    // Thermal recursion and comfort band, checked against a re-simulation.
    let tau = simulate_temperature(&profile.hvac, env, time.slot_hours, &sched.p_ac)?;
    for t in 0..t_slots {
        log.record(
            Constraint::TemperatureRecursion,
            Some(t),
            (sched.tau_in[t] - tau[t]).abs(),
        );
        log.bounds(
            Constraint::ComfortBand,
            t,
            tau[t],
            profile.hvac.tau_min,
            profile.hvac.tau_max,
        );
    }

    // Shiftable task completion, window confinement, per-slot cap.
    let spec = &profile.shiftable;
    let scheduled: f64 = spec.window.iter().map(|&t| sched.p_s[t]).sum();
    let required: f64 = spec.window.iter().map(|&t| spec.preferred[t]).sum();
    log.record(Constraint::ShiftableTask, None, (scheduled - required).abs());
    for t in 0..t_slots {
        if spec.in_window(t) {
            log.bounds(Constraint::ShiftableCap, t, sched.p_s[t], 0.0, spec.p_s_max);
        } else {
            log.record(Constraint::ShiftableWindow, Some(t), sched.p_s[t].abs());
        }
    }

    // Renewable self-use and feed-in split.
    for t in 0..t_slots {
        log.bounds(
            Constraint::RenewableLimit,
            t,
            sched.p_re[t],
            0.0,
            profile.renewable.gen[t],
        );
        log.bounds(
            Constraint::FeedInLimit,
            t,
            sched.p_fit[t],
            0.0,
            profile.renewable.gen[t] - sched.p_re[t],
        );
    }

    // Storage recursion, level band, power caps, terminal rule.
    let level = simulate_storage(&profile.storage, time.slot_hours, &sched.p_ch, &sched.p_dis)?;
    let st = &profile.storage;
    for t in 0..t_slots {
        log.record(
            Constraint::StorageRecursion,
            Some(t),
            (sched.e_b[t] - level[t]).abs(),
        );
        log.bounds(
            Constraint::StorageLevel,
            t,
            level[t],
            st.alpha_min * st.e_cap,
            st.alpha_max * st.e_cap,
        );
        log.bounds(Constraint::ChargeCap, t, sched.p_ch[t], 0.0, st.p_ch_max);
        log.bounds(Constraint::DischargeCap, t, sched.p_dis[t], 0.0, st.p_dis_max);
    }
    if st.terminal_rule == TerminalRule::AtLeastInitial {
        if let Some(&last) = level.last() {
            log.record(Constraint::StorageTerminal, None, st.e_init - last);
        }
    }

    // Demand response bounded by the scheduled grid draw.
    for t in 0..t_slots {
        log.bounds(
            Constraint::DemandResponseLimit,
            t,
            sched.p_dr[t],
            0.0,
            sched.p_g[t],
        );
    }

    // Trade matrix: own column zero, then per-slot power balance.
    if profile.id < sched.p_et.cols() {
        for t in 0..t_slots {
            log.record(
                Constraint::TradeDiagonal,
                Some(t),
                sched.p_et.get(t, profile.id).abs(),
            );
        }
    }
    for t in 0..t_slots {
        let demand = sched.p_ac[t] + sched.p_s[t] + sched.p_ch[t] + sched.p_et.row_sum(t);
        let supply = sched.p_re[t] + sched.p_g[t] - sched.p_dr[t] + sched.p_dis[t];
        log.record(Constraint::PowerBalance, Some(t), (demand - supply).abs());
    }

    Ok(log.out)
}
