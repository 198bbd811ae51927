//! Assembly and solution of the scheduling programs.
//!
//! Each prosumer's local task minimizes its own cost plus the trade
//! proximity/price terms handed down by the coordinator; the fleet-wide
//! program stacks every prosumer and couples the pairwise trades with
//! clearing equalities. Both are plain convex QPs:
//!
//! - the peak-demand charge is epigraph-reformulated through one scalar `d`
//!   with `d >= p_g[t]` for every slot;
//! - indoor temperature and storage level are eliminated by unrolling their
//!   recursions into affine expressions of the power decisions, so the only
//!   variables are powers, trades, and `d`;
//! - a tiny ridge (1e-9 * ||x||^2) breaks cost-neutral trade loops in favor
//!   of the minimum-norm solution.

pub mod qp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, DecisionSchedule, EnvironmentProfile, ModelError, ProsumerProfile, Scenario, SlotMatrix,
    TerminalRule, TimeGrid,
};
use qp::{
    QpError, QpSolution, QpSolver, QpStatus, QuadraticProgram, TripletList, VarIndex, VarKind,
};

/// Adds `1e-9 * ||x||^2` to every assembled objective (as `x' (2e-9 I) x / 2`).
pub const TIE_BREAK_RIDGE: f64 = 2e-9;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("program construction failed: {0}")]
    Construction(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("solver stopped with status {status:?}: kkt residual {residual:.3e} after {iterations} iterations")]
    NotOptimal {
        status: QpStatus,
        residual: f64,
        iterations: usize,
    },
}

fn construction(msg: impl Into<String>) -> SolveError {
    SolveError::Construction(msg.into())
}

// ---------------------------------------------------------------------
// Local block layout
// ---------------------------------------------------------------------

/// Columns of one prosumer's decision block, in order: the eight per-slot
/// power vectors, the peak epigraph scalar, then one trade vector per
/// counterpart (ascending id, own id skipped).
fn local_width(slots: usize, fleet: usize) -> usize {
    8 * slots + 1 + (fleet - 1) * slots
}

struct LocalCols {
    offset: usize,
    slots: usize,
}

impl LocalCols {
    fn p_g(&self, t: usize) -> usize {
        self.offset + t
    }
    fn p_ac(&self, t: usize) -> usize {
        self.offset + self.slots + t
    }
    fn p_s(&self, t: usize) -> usize {
        self.offset + 2 * self.slots + t
    }
    fn p_ch(&self, t: usize) -> usize {
        self.offset + 3 * self.slots + t
    }
    fn p_dis(&self, t: usize) -> usize {
        self.offset + 4 * self.slots + t
    }
    fn p_re(&self, t: usize) -> usize {
        self.offset + 5 * self.slots + t
    }
    fn p_fit(&self, t: usize) -> usize {
        self.offset + 6 * self.slots + t
    }
    fn p_dr(&self, t: usize) -> usize {
        self.offset + 7 * self.slots + t
    }
    fn peak(&self) -> usize {
        self.offset + 8 * self.slots
    }
    /// Trade column for counterpart rank `r` (counterparts sorted by id).
    fn trade(&self, rank: usize, t: usize) -> usize {
        self.offset + 8 * self.slots + 1 + rank * self.slots + t
    }
}

/// Growing QP under assembly.
struct Assembly {
    n: usize,
    quad: TripletList,
    linear: Vec<f64>,
    constant: f64,
    eq: TripletList,
    b_eq: Vec<f64>,
    ineq: TripletList,
    b_in: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    var_index: VarIndex,
}

impl Assembly {
    fn new(n: usize) -> Self {
        Self {
            n,
            quad: TripletList::new(),
            linear: vec![0.0; n],
            constant: 0.0,
            eq: TripletList::new(),
            b_eq: Vec::new(),
            ineq: TripletList::new(),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            var_index: VarIndex::new(),
        }
    }

    fn finish(self) -> QuadraticProgram {
        let m_eq = self.b_eq.len();
        let m_in = self.b_in.len();
        QuadraticProgram {
            n: self.n,
            quad: self.quad.build(self.n, self.n),
            linear: self.linear,
            constant: self.constant,
            a_eq: self.eq.build(m_eq, self.n),
            b_eq: self.b_eq,
            a_in: self.ineq.build(m_in, self.n),
            b_in: self.b_in,
            lower: self.lower,
            upper: self.upper,
            var_index: self.var_index,
        }
    }
}

/// Thermal unrolling: `tau[s] = base[s] + sum_{k<=s} weight[s][k] * p_ac[k]`
/// with `weight[s][k] = gamma * eps^(s-k)`.
struct ThermalUnroll {
    base: Vec<f64>,
    eps: f64,
    gamma: f64,
}

impl ThermalUnroll {
    fn build(profile: &ProsumerProfile, env: &EnvironmentProfile, time: &TimeGrid) -> Self {
        let eps = profile.hvac.epsilon(time.slot_hours);
        let mut base = Vec::with_capacity(time.slots);
        let mut prev = profile.hvac.tau_init;
        for &out in &env.tau_out {
            let next = out * (1.0 - eps) + eps * prev;
            base.push(next);
            prev = next;
        }
        Self {
            base,
            eps,
            gamma: profile.hvac.gamma,
        }
    }

    fn weight(&self, s: usize, k: usize) -> f64 {
        debug_assert!(k <= s);
        self.gamma * self.eps.powi((s - k) as i32)
    }
}

/// Emits one prosumer's objective, constraints, and bounds into `acc`.
///
/// `trade_prox` carries `(lambda_i, p_hat_i, rho)` for the local task; the
/// fleet-wide program passes `None` and couples trades externally instead.
fn assemble_local(
    profile: &ProsumerProfile,
    env: &EnvironmentProfile,
    time: &TimeGrid,
    fleet: usize,
    cols: &LocalCols,
    trade_prox: Option<(&SlotMatrix, &SlotMatrix, f64)>,
    acc: &mut Assembly,
) -> Result<(), SolveError> {
    profile
        .validate(time)
        .map_err(|e| construction(e.to_string()))?;
    let slots = time.slots;
    let i = profile.id;

    // var_index blocks.
    let vi = &mut acc.var_index;
    vi.insert(i, VarKind::GridPower, cols.p_g(0), slots);
    vi.insert(i, VarKind::HvacPower, cols.p_ac(0), slots);
    vi.insert(i, VarKind::ShiftablePower, cols.p_s(0), slots);
    vi.insert(i, VarKind::ChargePower, cols.p_ch(0), slots);
    vi.insert(i, VarKind::DischargePower, cols.p_dis(0), slots);
    vi.insert(i, VarKind::RenewableUse, cols.p_re(0), slots);
    vi.insert(i, VarKind::FeedIn, cols.p_fit(0), slots);
    vi.insert(i, VarKind::DemandResponse, cols.p_dr(0), slots);
    vi.insert(i, VarKind::PeakDemand, cols.peak(), 1);
    let counterparts: Vec<usize> = (0..fleet).filter(|&j| j != i).collect();
    for (rank, &j) in counterparts.iter().enumerate() {
        vi.insert(i, VarKind::TradeWith(j), cols.trade(rank, 0), slots);
    }

    // Box bounds.
    for t in 0..slots {
        acc.lower[cols.p_g(t)] = 0.0;
        acc.upper[cols.p_g(t)] = profile.tariff.p_g_max;
        acc.lower[cols.p_ac(t)] = 0.0;
        acc.upper[cols.p_ac(t)] = profile.hvac.p_ac_max;
        acc.lower[cols.p_s(t)] = 0.0;
        acc.upper[cols.p_s(t)] = if profile.shiftable.in_window(t) {
            profile.shiftable.p_s_max
        } else {
            0.0
        };
        acc.lower[cols.p_ch(t)] = 0.0;
        acc.upper[cols.p_ch(t)] = profile.storage.p_ch_max;
        acc.lower[cols.p_dis(t)] = 0.0;
        acc.upper[cols.p_dis(t)] = profile.storage.p_dis_max;
        acc.lower[cols.p_re(t)] = 0.0;
        acc.upper[cols.p_re(t)] = profile.renewable.gen[t];
        acc.lower[cols.p_fit(t)] = 0.0;
        acc.upper[cols.p_fit(t)] = profile.renewable.gen[t];
        acc.lower[cols.p_dr(t)] = 0.0;
        acc.upper[cols.p_dr(t)] = profile.tariff.p_g_max;
    }
    acc.lower[cols.peak()] = 0.0;
    acc.upper[cols.peak()] = profile.tariff.p_g_max;

    // Objective: energy + demand charges.
    for t in 0..slots {
        acc.linear[cols.p_g(t)] += profile.tariff.pi_e;
    }
    acc.linear[cols.peak()] += profile.tariff.pi_d;

    // HVAC comfort cost, quadratic in p_ac after unrolling.
    let thermal = ThermalUnroll::build(profile, env, time);
    let w_ac = profile.hvac.omega_ac;
    if w_ac > 0.0 {
        for k1 in 0..slots {
            for k2 in 0..slots {
                let hi = k1.max(k2);
                let mut q = 0.0;
                for s in hi..slots {
                    q += thermal.weight(s, k1) * thermal.weight(s, k2);
                }
                acc.quad.push(cols.p_ac(k1), cols.p_ac(k2), 2.0 * w_ac * q);
            }
            let mut lin = 0.0;
            for s in k1..slots {
                lin += thermal.weight(s, k1) * (thermal.base[s] - profile.hvac.tau_ref);
            }
            acc.linear[cols.p_ac(k1)] += 2.0 * w_ac * lin;
        }
        for s in 0..slots {
            acc.constant += w_ac * (thermal.base[s] - profile.hvac.tau_ref).powi(2);
        }
    }

    // Shifting discomfort.
    let w_s = profile.shiftable.omega_s;
    for &t in &profile.shiftable.window {
        acc.quad.push(cols.p_s(t), cols.p_s(t), 2.0 * w_s);
        acc.linear[cols.p_s(t)] -= 2.0 * w_s * profile.shiftable.preferred[t];
        acc.constant += w_s * profile.shiftable.preferred[t].powi(2);
    }

    // Battery degradation.
    for t in 0..slots {
        acc.linear[cols.p_ch(t)] += profile.storage.beta;
        acc.linear[cols.p_dis(t)] += profile.storage.beta;
    }

    // Service revenues (negative costs).
    for t in 0..slots {
        acc.linear[cols.p_fit(t)] -= profile.rates.pi_fit[t];
        acc.linear[cols.p_dr(t)] -= profile.rates.pi_dr[t];
    }

    // Trade proximity/price terms of the local task.
    if let Some((lambda_i, p_hat_i, rho)) = trade_prox {
        if !(rho > 0.0) {
            return Err(construction("rho must be positive"));
        }
        for m in [lambda_i, p_hat_i] {
            if m.slots() != slots || m.cols() != fleet {
                return Err(construction("coordinator slice dimensions mismatch"));
            }
            for t in 0..slots {
                if m.get(t, i) != 0.0 {
                    return Err(construction("coordinator slice has nonzero own column"));
                }
            }
        }
        for (rank, &j) in counterparts.iter().enumerate() {
            for t in 0..slots {
                let col = cols.trade(rank, t);
                acc.quad.push(col, col, rho);
                let p_hat = p_hat_i.get(t, j);
                acc.linear[col] += -(rho * p_hat + lambda_i.get(t, j));
                acc.constant += 0.5 * rho * p_hat * p_hat;
            }
        }
    }

    // Minimum-norm tie-break ridge over the whole block.
    for c in 0..local_width(slots, fleet) {
        acc.quad.push(cols.offset + c, cols.offset + c, TIE_BREAK_RIDGE);
    }

    // Comfort band: tau_min <= base[s] + sum_k w[s][k] p_ac[k] <= tau_max.
    for s in 0..slots {
        let upper_row = acc.b_in.len();
        for k in 0..=s {
            acc.ineq.push(upper_row, cols.p_ac(k), thermal.weight(s, k));
        }
        acc.b_in.push(profile.hvac.tau_max - thermal.base[s]);
        let lower_row = acc.b_in.len();
        for k in 0..=s {
            acc.ineq.push(lower_row, cols.p_ac(k), -thermal.weight(s, k));
        }
        acc.b_in.push(thermal.base[s] - profile.hvac.tau_min);
    }

    // Storage level band via prefix sums of the charge/discharge flows.
    let st = &profile.storage;
    let ch_coeff = st.eta_ch * time.slot_hours;
    let dis_coeff = time.slot_hours / st.eta_dis;
    for s in 0..slots {
        let upper_row = acc.b_in.len();
        for k in 0..=s {
            acc.ineq.push(upper_row, cols.p_ch(k), ch_coeff);
            acc.ineq.push(upper_row, cols.p_dis(k), -dis_coeff);
        }
        acc.b_in.push(st.alpha_max * st.e_cap - st.e_init);
        let lower_row = acc.b_in.len();
        for k in 0..=s {
            acc.ineq.push(lower_row, cols.p_ch(k), -ch_coeff);
            acc.ineq.push(lower_row, cols.p_dis(k), dis_coeff);
        }
        acc.b_in.push(st.e_init - st.alpha_min * st.e_cap);
    }
    if st.terminal_rule == TerminalRule::AtLeastInitial {
        let row = acc.b_in.len();
        for k in 0..slots {
            acc.ineq.push(row, cols.p_ch(k), -ch_coeff);
            acc.ineq.push(row, cols.p_dis(k), dis_coeff);
        }
        acc.b_in.push(0.0);
    }

    // Feed-in limited to unused renewable.
    for t in 0..slots {
        let row = acc.b_in.len();
        acc.ineq.push(row, cols.p_fit(t), 1.0);
        acc.ineq.push(row, cols.p_re(t), 1.0);
        acc.b_in.push(profile.renewable.gen[t]);
    }

    // Demand response bounded by scheduled grid draw.
    for t in 0..slots {
        let row = acc.b_in.len();
        acc.ineq.push(row, cols.p_dr(t), 1.0);
        acc.ineq.push(row, cols.p_g(t), -1.0);
        acc.b_in.push(0.0);
    }

    // Peak epigraph.
    for t in 0..slots {
        let row = acc.b_in.len();
        acc.ineq.push(row, cols.p_g(t), 1.0);
        acc.ineq.push(row, cols.peak(), -1.0);
        acc.b_in.push(0.0);
    }

    // Power balance per slot.
    for t in 0..slots {
        let row = acc.b_eq.len();
        acc.eq.push(row, cols.p_ac(t), 1.0);
        acc.eq.push(row, cols.p_s(t), 1.0);
        acc.eq.push(row, cols.p_ch(t), 1.0);
        for rank in 0..counterparts.len() {
            acc.eq.push(row, cols.trade(rank, t), 1.0);
        }
        acc.eq.push(row, cols.p_re(t), -1.0);
        acc.eq.push(row, cols.p_g(t), -1.0);
        acc.eq.push(row, cols.p_dr(t), 1.0);
        acc.eq.push(row, cols.p_dis(t), -1.0);
        acc.b_eq.push(0.0);
    }

    // Shiftable task completion.
    if !profile.shiftable.window.is_empty() {
        let row = acc.b_eq.len();
        for &t in &profile.shiftable.window {
            acc.eq.push(row, cols.p_s(t), 1.0);
        }
        acc.b_eq
            .push(profile.shiftable.window.iter().map(|&t| profile.shiftable.preferred[t]).sum());
    }

    Ok(())
}

/// Assembles prosumer `i`'s local task given the coordinator's current dual
/// prices and auxiliary trades (both `T x N` slices with the own column
/// zeroed).
pub fn assemble_plt(
    profile: &ProsumerProfile,
    env: &EnvironmentProfile,
    time: &TimeGrid,
    lambda_i: &SlotMatrix,
    p_hat_i: &SlotMatrix,
    rho: f64,
) -> Result<QuadraticProgram, SolveError> {
    let fleet = lambda_i.cols().max(1);
    let n = local_width(time.slots, fleet);
    let mut acc = Assembly::new(n);
    let cols = LocalCols {
        offset: 0,
        slots: time.slots,
    };
    assemble_local(
        profile,
        env,
        time,
        fleet,
        &cols,
        Some((lambda_i, p_hat_i, rho)),
        &mut acc,
    )?;
    Ok(acc.finish())
}

/// Assembles the fleet-wide cost minimization: every prosumer's block plus
/// the pairwise trade clearing equalities `p[i][j] + p[j][i] = 0`.
pub fn assemble_dcm(scenario: &Scenario) -> Result<QuadraticProgram, SolveError> {
    scenario.validate().map_err(|e| construction(e.to_string()))?;
    let fleet = scenario.fleet_size();
    let slots = scenario.time.slots;
    let width = local_width(slots, fleet);
    let mut acc = Assembly::new(width * fleet);
    for (i, profile) in scenario.prosumers.iter().enumerate() {
        let cols = LocalCols {
            offset: i * width,
            slots,
        };
        assemble_local(
            profile,
            &scenario.env,
            &scenario.time,
            fleet,
            &cols,
            None,
            &mut acc,
        )?;
    }
    // Clearing equalities for each unordered pair.
    for i in 0..fleet {
        for j in (i + 1)..fleet {
            for t in 0..slots {
                let row = acc.b_eq.len();
                let col_ij = acc
                    .var_index
                    .column(i, VarKind::TradeWith(j), t)
                    .expect("trade column exists");
                let col_ji = acc
                    .var_index
                    .column(j, VarKind::TradeWith(i), t)
                    .expect("trade column exists");
                acc.eq.push(row, col_ij, 1.0);
                acc.eq.push(row, col_ji, 1.0);
                acc.b_eq.push(0.0);
            }
        }
    }
    Ok(acc.finish())
}

/// Reads one prosumer's schedule out of a solved program, re-deriving the
/// temperature and storage trajectories from the extracted powers.
pub fn extract_schedule(
    qp: &QuadraticProgram,
    x: &[f64],
    profile: &ProsumerProfile,
    env: &EnvironmentProfile,
    time: &TimeGrid,
    fleet: usize,
) -> Result<DecisionSchedule, SolveError> {
    let slots = time.slots;
    let clamped = |col: usize| x[col].clamp(qp.lower[col], qp.upper[col]);
    let read_block = |kind: VarKind| -> Result<Vec<f64>, SolveError> {
        let (start, len) = qp
            .var_index
            .block(profile.id, kind)
            .ok_or_else(|| construction(format!("missing block {kind:?}")))?;
        if len != slots {
            return Err(construction("block length mismatch"));
        }
        Ok((start..start + len).map(clamped).collect())
    };

    let p_g = read_block(VarKind::GridPower)?;
    let p_ac = read_block(VarKind::HvacPower)?;
    let p_s = read_block(VarKind::ShiftablePower)?;
    let p_ch = read_block(VarKind::ChargePower)?;
    let p_dis = read_block(VarKind::DischargePower)?;
    let p_re = read_block(VarKind::RenewableUse)?;
    let p_fit = read_block(VarKind::FeedIn)?;
    let p_dr = read_block(VarKind::DemandResponse)?;

    let mut p_et = SlotMatrix::zeros(slots, fleet);
    for j in 0..fleet {
        if j == profile.id {
            continue;
        }
        if let Some((start, len)) = qp.var_index.block(profile.id, VarKind::TradeWith(j)) {
            debug_assert_eq!(len, slots);
            for t in 0..slots {
                p_et.set(t, j, clamped(start + t));
            }
        }
    }

    let tau_in = model::simulate_temperature(&profile.hvac, env, time.slot_hours, &p_ac)?;
    let e_b = model::simulate_storage(&profile.storage, time.slot_hours, &p_ch, &p_dis)?;
    Ok(DecisionSchedule {
        p_g,
        p_ac,
        p_s,
        p_ch,
        p_dis,
        p_re,
        p_fit,
        p_dr,
        p_et,
        tau_in,
        e_b,
    })
}

fn require_optimal(sol: &QpSolution) -> Result<(), SolveError> {
    if sol.status == QpStatus::Optimal {
        Ok(())
    } else {
        Err(SolveError::NotOptimal {
            status: sol.status,
            residual: sol.kkt_residual,
            iterations: sol.iterations,
        })
    }
}

/// Reusable local-task solver: the program structure and factorizations are
/// built once, and each call re-targets only the trade prices before a
/// warm-started solve.
pub struct PltSolver {
    profile: ProsumerProfile,
    env: EnvironmentProfile,
    time: TimeGrid,
    fleet: usize,
    rho: f64,
    qp: QuadraticProgram,
    base_linear: Vec<f64>,
    base_constant: f64,
    solver: QpSolver,
}

impl PltSolver {
    pub fn new(
        profile: &ProsumerProfile,
        env: &EnvironmentProfile,
        time: &TimeGrid,
        fleet: usize,
        rho: f64,
    ) -> Result<Self, SolveError> {
        let zero = SlotMatrix::zeros(time.slots, fleet);
        let qp = assemble_plt(profile, env, time, &zero, &zero, rho)?;
        let solver = QpSolver::new(&qp)?;
        Ok(Self {
            profile: profile.clone(),
            env: env.clone(),
            time: *time,
            fleet,
            rho,
            base_linear: qp.linear.clone(),
            base_constant: qp.constant,
            qp,
            solver,
        })
    }

    /// Solves the local task against the given coordinator slices.
    pub fn solve(
        &mut self,
        lambda_i: &SlotMatrix,
        p_hat_i: &SlotMatrix,
        tol: f64,
    ) -> Result<(DecisionSchedule, QpSolution), SolveError> {
        let slots = self.time.slots;
        if lambda_i.slots() != slots
            || lambda_i.cols() != self.fleet
            || p_hat_i.slots() != slots
            || p_hat_i.cols() != self.fleet
        {
            return Err(construction("coordinator slice dimensions mismatch"));
        }
        let mut linear = self.base_linear.clone();
        let mut constant = self.base_constant;
        for j in 0..self.fleet {
            if j == self.profile.id {
                continue;
            }
            let (start, _) = self
                .qp
                .var_index
                .block(self.profile.id, VarKind::TradeWith(j))
                .expect("trade block exists");
            for t in 0..slots {
                let p_hat = p_hat_i.get(t, j);
                linear[start + t] += -(self.rho * p_hat + lambda_i.get(t, j));
                constant += 0.5 * self.rho * p_hat * p_hat;
            }
        }
        self.qp.linear.copy_from_slice(&linear);
        self.qp.constant = constant;
        self.solver.update_linear(&linear, constant);
        let sol = self.solver.solve(tol, qp::DEFAULT_MAX_ITER);
        require_optimal(&sol)?;
        let sched = extract_schedule(&self.qp, &sol.x, &self.profile, &self.env, &self.time, self.fleet)?;
        Ok((sched, sol))
    }
}

/// One-shot local solve.
pub fn solve_plt(
    profile: &ProsumerProfile,
    env: &EnvironmentProfile,
    time: &TimeGrid,
    lambda_i: &SlotMatrix,
    p_hat_i: &SlotMatrix,
    rho: f64,
    tol: f64,
) -> Result<DecisionSchedule, SolveError> {
    let qp = assemble_plt(profile, env, time, lambda_i, p_hat_i, rho)?;
    let sol = qp::solve_qp(&qp, tol, qp::DEFAULT_MAX_ITER)?;
    require_optimal(&sol)?;
    extract_schedule(&qp, &sol.x, profile, env, time, lambda_i.cols().max(1))
}

/// Result of the fleet-wide (centralized) solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentralSolution {
    pub schedules: Vec<DecisionSchedule>,
    pub total_cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves the joint fleet program and returns per-prosumer schedules with
/// exactly antisymmetric trades, plus the fleet cost recomputed from the
/// model operations.
pub fn solve_dcm_central(scenario: &Scenario, tol: f64) -> Result<CentralSolution, SolveError> {
    let qp = assemble_dcm(scenario)?;
    let sol = qp::solve_qp(&qp, tol, qp::DEFAULT_MAX_ITER)?;
    require_optimal(&sol)?;
    let fleet = scenario.fleet_size();
    let mut schedules = Vec::with_capacity(fleet);
    for profile in &scenario.prosumers {
        schedules.push(extract_schedule(
            &qp,
            &sol.x,
            profile,
            &scenario.env,
            &scenario.time,
            fleet,
        )?);
    }
    // Enforce exact clearing on the extracted trades.
    for i in 0..fleet {
        for j in (i + 1)..fleet {
            for t in 0..scenario.time.slots {
                let mid = 0.5 * (schedules[i].p_et.get(t, j) - schedules[j].p_et.get(t, i));
                schedules[i].p_et.set(t, j, mid);
                schedules[j].p_et.set(t, i, -mid);
            }
        }
    }
    let mut total_cost = 0.0;
    for (profile, sched) in scenario.prosumers.iter().zip(&schedules) {
        total_cost += model::prosumer_cost(profile, sched)?;
    }
    Ok(CentralSolution {
        schedules,
        total_cost,
        kkt_residual: sol.kkt_residual,
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_small_random;
    use crate::model::{
        check_feasibility, prosumer_cost, GridTariff, HvacParams, RenewableProfile, ServiceRates,
        ShiftableSpec, StorageParams,
    };
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A prosumer with every device disabled except a grid connection.
    fn idle_profile(slots: usize) -> (ProsumerProfile, EnvironmentProfile, TimeGrid) {
        let time = TimeGrid {
            slots,
            slot_hours: 1.0,
        };
        let profile = ProsumerProfile {
            id: 0,
            tariff: GridTariff {
                pi_e: 0.2,
                pi_d: 1.0,
                p_g_max: 8.0,
            },
            hvac: HvacParams {
                r: 2.0,
                c: 2.0,
                gamma: -1.5,
                omega_ac: 0.1,
                tau_ref: 23.0,
                tau_min: 0.0,
                tau_max: 50.0,
                tau_init: 23.0,
                p_ac_max: 4.0,
            },
            shiftable: ShiftableSpec {
                window: vec![],
                preferred: vec![0.0; slots],
                omega_s: 0.2,
                p_s_max: 1.0,
            },
            renewable: RenewableProfile {
                gen: vec![0.0; slots],
            },
            storage: StorageParams {
                e_cap: 0.0,
                eta_ch: 0.9,
                eta_dis: 0.9,
                alpha_min: 0.0,
                alpha_max: 1.0,
                p_ch_max: 0.0,
                p_dis_max: 0.0,
                beta: 0.01,
                e_init: 0.0,
                terminal_rule: TerminalRule::None,
            },
            rates: ServiceRates {
                pi_fit: vec![0.0; slots],
                pi_dr: vec![0.0; slots],
            },
        };
        let env = EnvironmentProfile {
            tau_out: vec![23.0; slots],
        };
        (profile, env, time)
    }

    #[test]
    fn single_prosumer_plt_has_no_trade_columns() {
        let (profile, env, time) = idle_profile(4);
        let zero = SlotMatrix::zeros(4, 1);
        let qp = assemble_plt(&profile, &env, &time, &zero, &zero, 1.0).unwrap();
        assert_eq!(qp.n, 8 * 4 + 1);
        assert!(qp
            .var_index
            .blocks()
            .all(|(_, kind, _, _)| !matches!(kind, VarKind::TradeWith(_))));
    }

    #[test]
    fn trade_terms_are_pure_proximity_penalties() {
        let (mut profile, env, time) = idle_profile(3);
        profile.id = 0;
        let mut p_hat = SlotMatrix::zeros(3, 2);
        p_hat.set(0, 1, 0.5);
        p_hat.set(2, 1, -0.25);
        let lambda = SlotMatrix::zeros(3, 2);
        let rho = 1.0;
        let qp = assemble_plt(&profile, &env, &time, &lambda, &p_hat, rho).unwrap();
        let (start, len) = qp.var_index.block(0, VarKind::TradeWith(1)).unwrap();
        assert_eq!(len, 3);
        for t in 0..3 {
            let col = start + t;
            // linear term -(rho p_hat + lambda), diagonal rho (+ ridge).
            assert_abs_diff_eq!(qp.linear[col], -rho * p_hat.get(t, 1), epsilon = 1e-15);
            let diag: f64 = qp
                .quad
                .row(col)
                .filter(|&(c, _)| c == col)
                .map(|(_, v)| v)
                .sum();
            assert_abs_diff_eq!(diag, rho + TIE_BREAK_RIDGE, epsilon = 1e-15);
        }
        // Constant carries rho/2 * p_hat^2.
        let expect = 0.5 * rho * (0.5f64.powi(2) + 0.25f64.powi(2));
        assert_abs_diff_eq!(qp.constant, expect, epsilon = 1e-12);
    }

    #[test]
    fn var_index_covers_every_column_exactly_once() {
        let scenario = generate_small_random(3);
        let profile = &scenario.prosumers[0];
        let fleet = scenario.fleet_size();
        let zero = SlotMatrix::zeros(scenario.time.slots, fleet);
        let qp = assemble_plt(profile, &scenario.env, &scenario.time, &zero, &zero, 1.0).unwrap();
        for col in 0..qp.n {
            let (p, kind, slot) = qp
                .var_index
                .describe(col)
                .unwrap_or_else(|| panic!("column {col} unmapped"));
            assert_eq!(p, profile.id);
            assert_eq!(qp.var_index.column(p, kind, slot), Some(col));
        }
        assert_eq!(qp.var_index.describe(qp.n), None);
    }

    #[test]
    fn assembled_quadratics_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in [1u64, 9, 23] {
            let scenario = generate_small_random(seed);
            let qp = assemble_dcm(&scenario).unwrap();
            let mut worst = 0.0_f64;
            for _ in 0..1000 {
                let x: Vec<f64> = (0..qp.n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let mut qx = vec![0.0; qp.n];
                qp.quad.matvec(&x, &mut qx);
                let quad_form: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
                let norm2: f64 = x.iter().map(|v| v * v).sum();
                worst = worst.min(quad_form / norm2);
            }
            assert!(worst >= -1e-12, "negative curvature direction: {worst}");
        }
    }

    #[test]
    fn dcm_single_prosumer_matches_plt() {
        let (profile, env, time) = idle_profile(4);
        let scenario = Scenario {
            time,
            env: env.clone(),
            prosumers: vec![profile.clone()],
            admm: crate::coordinator::AdmmSettings::default(),
        };
        let dcm = assemble_dcm(&scenario).unwrap();
        let zero = SlotMatrix::zeros(4, 1);
        let plt = assemble_plt(&profile, &env, &time, &zero, &zero, 1.0).unwrap();
        assert_eq!(dcm.n, plt.n);
        assert_eq!(dcm.linear, plt.linear);
        assert_eq!(dcm.lower, plt.lower);
        assert_eq!(dcm.upper, plt.upper);
        assert_eq!(dcm.b_eq, plt.b_eq);
        assert_eq!(dcm.quad, plt.quad);
    }

    #[test]
    fn clearing_constraints_grow_with_pairs() {
        for seed in [2u64, 4, 8] {
            let scenario = generate_small_random(seed);
            let n = scenario.fleet_size();
            let t = scenario.time.slots;
            let qp = assemble_dcm(&scenario).unwrap();
            let windows: usize = scenario
                .prosumers
                .iter()
                .filter(|p| !p.shiftable.window.is_empty())
                .count();
            let expected = n * t + windows + t * n * (n - 1) / 2;
            assert_eq!(qp.a_eq.rows(), expected);
        }
    }

    #[test]
    fn idle_prosumer_solves_to_zero() {
        let (profile, env, time) = idle_profile(4);
        let zero = SlotMatrix::zeros(4, 1);
        let sched = solve_plt(&profile, &env, &time, &zero, &zero, 1.0, 1e-7).unwrap();
        for t in 0..4 {
            assert_abs_diff_eq!(sched.p_g[t], 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(sched.p_ac[t], 0.0, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(prosumer_cost(&profile, &sched).unwrap(), 0.0, epsilon = 1e-5);
    }

    #[test]
    fn abundant_renewable_is_fully_fed_in() {
        let (mut profile, env, time) = idle_profile(4);
        profile.renewable.gen = vec![2.0, 3.0, 1.5, 2.5];
        profile.rates.pi_fit = vec![0.1; 4];
        let zero = SlotMatrix::zeros(4, 1);
        let sched = solve_plt(&profile, &env, &time, &zero, &zero, 1.0, 1e-7).unwrap();
        for t in 0..4 {
            assert_abs_diff_eq!(sched.p_fit[t], profile.renewable.gen[t], epsilon = 1e-5);
        }
    }

    #[test]
    fn solutions_respect_bounds_and_recursions_and_feasibility() {
        for seed in [5u64, 6, 7] {
            let scenario = generate_small_random(seed);
            let fleet = scenario.fleet_size();
            let zero = SlotMatrix::zeros(scenario.time.slots, fleet);
            for profile in &scenario.prosumers {
                let sched = solve_plt(
                    profile,
                    &scenario.env,
                    &scenario.time,
                    &zero,
                    &zero,
                    1.0,
                    1e-6,
                )
                .unwrap();
                for t in 0..scenario.time.slots {
                    assert!(sched.p_g[t] >= 0.0 && sched.p_g[t] <= profile.tariff.p_g_max);
                    assert!(sched.p_ac[t] >= 0.0 && sched.p_ac[t] <= profile.hvac.p_ac_max);
                    assert!(sched.p_ch[t] >= 0.0 && sched.p_ch[t] <= profile.storage.p_ch_max);
                }
                let tau = crate::model::simulate_temperature(
                    &profile.hvac,
                    &scenario.env,
                    scenario.time.slot_hours,
                    &sched.p_ac,
                )
                .unwrap();
                for t in 0..scenario.time.slots {
                    assert_abs_diff_eq!(sched.tau_in[t], tau[t], epsilon = 1e-8);
                }
                let violations = check_feasibility(
                    profile,
                    &scenario.env,
                    &scenario.time,
                    &sched,
                    1e-5,
                )
                .unwrap();
                assert!(
                    violations.is_empty(),
                    "seed {seed} prosumer {} infeasible: {:?}",
                    profile.id,
                    violations
                );
            }
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let scenario = generate_small_random(13);
        let profile = &scenario.prosumers[0];
        let fleet = scenario.fleet_size();
        let zero = SlotMatrix::zeros(scenario.time.slots, fleet);
        let qp = assemble_plt(profile, &scenario.env, &scenario.time, &zero, &zero, 1.0).unwrap();
        let sol = qp::solve_qp(&qp, 1e-7, qp::DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);

        let mut grad = vec![0.0; qp.n];
        qp.quad.matvec(&sol.x, &mut grad);
        for j in 0..qp.n {
            grad[j] += qp.linear[j];
        }
        let h = 1e-5;
        let mut checked = 0;
        for j in 0..qp.n {
            let margin = 10.0 * h;
            if sol.x[j] - qp.lower[j] < margin || qp.upper[j] - sol.x[j] < margin {
                continue;
            }
            let mut plus = sol.x.clone();
            plus[j] += h;
            let mut minus = sol.x.clone();
            minus[j] -= h;
            let fd = (qp.objective(&plus) - qp.objective(&minus)) / (2.0 * h);
            let scale = grad[j].abs().max(1e-4);
            assert!(
                (fd - grad[j]).abs() / scale < 1e-4,
                "column {j}: fd {fd} vs grad {}",
                grad[j]
            );
            checked += 1;
        }
        assert!(checked > 0, "no strictly interior coordinates found");
    }

    /// Zeroes the trade bounds of every prosumer pair through var_index.
    fn forbid_trades(qp: &mut QuadraticProgram) {
        let blocks: Vec<(usize, usize)> = qp
            .var_index
            .blocks()
            .filter(|(_, kind, _, _)| matches!(kind, VarKind::TradeWith(_)))
            .map(|&(_, _, start, len)| (start, len))
            .collect();
        for (start, len) in blocks {
            for col in start..start + len {
                qp.lower[col] = 0.0;
                qp.upper[col] = 0.0;
            }
        }
    }

    #[test]
    fn forbidden_trades_make_the_fleet_separable() {
        let scenario = generate_small_random(17);
        let mut qp = assemble_dcm(&scenario).unwrap();
        forbid_trades(&mut qp);
        let joint = qp::solve_qp(&qp, 1e-7, qp::DEFAULT_MAX_ITER).unwrap();
        assert_eq!(joint.status, QpStatus::Optimal);

        let fleet = scenario.fleet_size();
        let mut standalone_total = 0.0;
        for profile in &scenario.prosumers {
            let zero = SlotMatrix::zeros(scenario.time.slots, fleet);
            let mut plt =
                assemble_plt(profile, &scenario.env, &scenario.time, &zero, &zero, 1.0).unwrap();
            forbid_trades(&mut plt);
            let sol = qp::solve_qp(&plt, 1e-7, qp::DEFAULT_MAX_ITER).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            standalone_total += sol.objective;
        }
        assert_abs_diff_eq!(joint.objective, standalone_total, epsilon = 1e-4);
    }

    #[test]
    fn central_solve_never_beats_standalone_and_identical_fleets_do_not_trade() {
        let scenario = generate_small_random(21);
        let central = solve_dcm_central(&scenario, 1e-7).unwrap();
        let fleet = scenario.fleet_size();
        let mut standalone_total = 0.0;
        for profile in &scenario.prosumers {
            let zero = SlotMatrix::zeros(scenario.time.slots, fleet);
            let mut plt =
                assemble_plt(profile, &scenario.env, &scenario.time, &zero, &zero, 1.0).unwrap();
            forbid_trades(&mut plt);
            let sol = qp::solve_qp(&plt, 1e-7, qp::DEFAULT_MAX_ITER).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            let sched = extract_schedule(
                &plt,
                &sol.x,
                profile,
                &scenario.env,
                &scenario.time,
                fleet,
            )
            .unwrap();
            standalone_total += prosumer_cost(profile, &sched).unwrap();
        }
        assert!(
            central.total_cost <= standalone_total + 1e-4,
            "central {} vs standalone {standalone_total}",
            central.total_cost
        );

        // Two clones of the same prosumer: trading is cost-neutral at best,
        // and the ridge selects the zero-trade optimum.
        let mut twin = generate_small_random(25);
        let mut second = twin.prosumers[0].clone();
        second.id = 1;
        twin.prosumers = vec![twin.prosumers[0].clone(), second];
        let central_twin = solve_dcm_central(&twin, 1e-7).unwrap();
        let mut forbidden = assemble_dcm(&twin).unwrap();
        forbid_trades(&mut forbidden);
        let no_trade = qp::solve_qp(&forbidden, 1e-7, qp::DEFAULT_MAX_ITER).unwrap();
        // Objectives agree along the flat direction.
        let mut no_trade_cost = 0.0;
        for profile in &twin.prosumers {
            let sched = extract_schedule(
                &forbidden,
                &no_trade.x,
                profile,
                &twin.env,
                &twin.time,
                2,
            )
            .unwrap();
            no_trade_cost += prosumer_cost(profile, &sched).unwrap();
        }
        assert_abs_diff_eq!(central_twin.total_cost, no_trade_cost, epsilon = 1e-3);
        let max_trade = central_twin
            .schedules
            .iter()
            .map(|s| s.p_et.max_abs())
            .fold(0.0_f64, f64::max);
        assert!(max_trade < 1e-3, "identical prosumers traded {max_trade}");
    }
}
