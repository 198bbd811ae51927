//! The trade-consensus loop.
//!
//! Prosumers propose pairwise trades; the coordinator holds an auxiliary
//! copy of every trade, kept exactly antisymmetric (market clearing), and a
//! dual price per ordered pair and slot. One round is:
//!
//! 1. every prosumer reads its dual/auxiliary slices and solves its local
//!    task ([`crate::subproblem::solve_plt`]),
//! 2. all trade proposals are submitted to the contract,
//! 3. the contract recomputes the auxiliary trades in closed form and steps
//!    the duals, and
//! 4. the loop stops once both the primal residual (proposal vs. auxiliary)
//!    and the dual residual (auxiliary change) fall below their thresholds.
//!
//! [`sct_update`] is the float-domain reference of the contract arithmetic;
//! the deterministic fixed-point version that actually runs on the ledger
//! lives in [`crate::ledger::contract`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Scenario, SlotMatrix};
use crate::subproblem::{PltSolver, SolveError};

/// Penalty weight and stopping rules for the consensus loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub rho: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iterations: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eps_primal: 1e-3,
            eps_dual: 1e-3,
            max_iterations: 200,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rho > 0.0) {
            return Err("rho must be positive".into());
        }
        if !(self.eps_primal > 0.0 && self.eps_dual > 0.0) {
            return Err("residual thresholds must be positive".into());
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// Dense `N x N x T` tensor over ordered prosumer pairs; diagonals stay
/// zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTensor {
    fleet: usize,
    slots: usize,
    data: Vec<f64>,
}

impl PairTensor {
    pub fn zeros(fleet: usize, slots: usize) -> Self {
        Self {
            fleet,
            slots,
            data: vec![0.0; fleet * fleet * slots],
        }
    }

    pub fn fleet(&self) -> usize {
        self.fleet
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.data[(i * self.fleet + j) * self.slots + t]
    }

    pub fn set(&mut self, i: usize, j: usize, t: usize, value: f64) {
        self.data[(i * self.fleet + j) * self.slots + t] = value;
    }

    /// Copies row `i` into a slot-by-counterpart matrix.
    pub fn row_matrix(&self, i: usize) -> SlotMatrix {
        let mut out = SlotMatrix::zeros(self.slots, self.fleet);
        for j in 0..self.fleet {
            for t in 0..self.slots {
                out.set(t, j, self.get(i, j, t));
            }
        }
        out
    }

    /// Writes a slot-by-counterpart matrix into row `i`.
    pub fn set_row(&mut self, i: usize, row: &SlotMatrix) {
        assert_eq!(row.slots(), self.slots);
        assert_eq!(row.cols(), self.fleet);
        for j in 0..self.fleet {
            for t in 0..self.slots {
                self.set(i, j, t, row.get(t, j));
            }
        }
    }

    pub fn max_abs_diff(&self, other: &PairTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Coordinator-side state between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    pub iteration: u64,
    pub lambda: PairTensor,
    pub p_hat: PairTensor,
    pub p_hat_prev: PairTensor,
    pub last_trades: PairTensor,
    pub r_primal: f64,
    pub r_dual: f64,
}

impl CoordinatorState {
    pub fn new(fleet: usize, slots: usize) -> Self {
        Self {
            iteration: 0,
            lambda: PairTensor::zeros(fleet, slots),
            p_hat: PairTensor::zeros(fleet, slots),
            p_hat_prev: PairTensor::zeros(fleet, slots),
            last_trades: PairTensor::zeros(fleet, slots),
            r_primal: 0.0,
            r_dual: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("tensor dimensions mismatch")]
    Dimension,
    #[error("trade tensor has a nonzero diagonal entry")]
    Diagonal,
    #[error("rho must be positive")]
    BadRho,
    #[error("prosumer {prosumer} failed at iteration {iteration}: {source}")]
    Subproblem {
        prosumer: usize,
        iteration: usize,
        #[source]
        source: SolveError,
    },
    #[error("contract rejected submission from prosumer {prosumer}: {outcome:?}")]
    Rejected {
        prosumer: usize,
        outcome: SubmitOutcome,
    },
    #[error("contract state mismatch: {0}")]
    Contract(String),
}

/// One coordinator round: recompute the auxiliary trades in closed form
/// from the submitted proposals (using the pre-update duals), then step the
/// duals with the fresh auxiliaries. Returns the successor state.
pub fn sct_update(
    state: &CoordinatorState,
    trades: &PairTensor,
    rho: f64,
) -> Result<CoordinatorState, CoordError> {
    if !(rho > 0.0) {
        return Err(CoordError::BadRho);
    }
    let fleet = state.lambda.fleet();
    let slots = state.lambda.slots();
    if trades.fleet() != fleet || trades.slots() != slots {
        return Err(CoordError::Dimension);
    }
    for i in 0..fleet {
        for t in 0..slots {
            if trades.get(i, i, t) != 0.0 {
                return Err(CoordError::Diagonal);
            }
        }
    }

    let mut next = state.clone();
    next.p_hat_prev = state.p_hat.clone();
    next.last_trades = trades.clone();
    for i in 0..fleet {
        for j in 0..fleet {
            if i == j {
                continue;
            }
            for t in 0..slots {
                let p_ij = trades.get(i, j, t);
                let p_ji = trades.get(j, i, t);
                let l_ij = state.lambda.get(i, j, t);
                let l_ji = state.lambda.get(j, i, t);
                let p_hat = (rho * (p_ij - p_ji) - (l_ij - l_ji)) / (2.0 * rho);
                next.p_hat.set(i, j, t, p_hat);
            }
        }
    }
    for i in 0..fleet {
        for j in 0..fleet {
            if i == j {
                continue;
            }
            for t in 0..slots {
                let delta = rho * (next.p_hat.get(i, j, t) - trades.get(i, j, t));
                let l_new = state.lambda.get(i, j, t) + delta;
                next.lambda.set(i, j, t, l_new);
            }
        }
    }
    next.iteration = state.iteration + 1;
    let (r_primal, r_dual) = residuals(&next, rho);
    next.r_primal = r_primal;
    next.r_dual = r_dual;
    Ok(next)
}

/// Stopping residuals: primal = worst proposal/auxiliary gap, dual = rho
/// times the worst auxiliary change since the previous round.
pub fn residuals(state: &CoordinatorState, rho: f64) -> (f64, f64) {
    let r_primal = state.p_hat.max_abs_diff(&state.last_trades);
    let r_dual = rho * state.p_hat.max_abs_diff(&state.p_hat_prev);
    (r_primal, r_dual)
}

/// Outcome of a trade submission to the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmitOutcome {
    Accepted,
    RejectedDuplicate,
    RejectedStale,
    RejectedInvalid,
}

/// The surface the coordination loop needs from the contract: submit one
/// prosumer's proposals and read back the committed slices. Execution of
/// the coordinator round is triggered internally once all proposals for the
/// current iteration have arrived.
pub trait ContractHandle {
    fn submit_trades(&mut self, sender: usize, iteration: u64, trades: &SlotMatrix)
        -> SubmitOutcome;
    /// Returns `(lambda_row, p_hat_row, iteration)` of the committed state.
    fn read_state(&self, prosumer: usize) -> (SlotMatrix, SlotMatrix, u64);
}

/// Residuals of one finished round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub r_primal: f64,
    pub r_dual: f64,
}

/// Everything the loop produced: residual history, final schedules, final
/// prices, and the trade settlement at those prices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmReport {
    pub converged: bool,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub schedules: Vec<crate::model::DecisionSchedule>,
    /// Final dual-price slices, one per prosumer.
    pub lambda: Vec<SlotMatrix>,
    /// Final auxiliary-trade slices, one per prosumer.
    pub p_hat: Vec<SlotMatrix>,
    /// Net trade revenue per prosumer at the final prices:
    /// `sum_{t,j} lambda[t][j] * p_et[t][j]`.
    pub settlement: Vec<f64>,
}

/// Subproblem tolerance used inside the loop; an order tighter than the
/// default residual thresholds so the solves never dominate the residuals.
pub const PLT_TOL: f64 = 1e-7;

/// Runs the distributed loop against any contract implementation.
pub fn run_admm(
    scenario: &Scenario,
    contract: &mut dyn ContractHandle,
) -> Result<AdmmReport, CoordError> {
    scenario
        .validate()
        .map_err(|e| CoordError::Contract(e.to_string()))?;
    let fleet = scenario.fleet_size();
    let slots = scenario.time.slots;
    let settings = scenario.admm;

    let mut solvers: Vec<PltSolver> = Vec::with_capacity(fleet);
    for profile in &scenario.prosumers {
        solvers.push(
            PltSolver::new(profile, &scenario.env, &scenario.time, fleet, settings.rho).map_err(
                |source| CoordError::Subproblem {
                    prosumer: profile.id,
                    iteration: 0,
                    source,
                },
            )?,
        );
    }

    let mut history = Vec::new();
    let mut schedules = Vec::new();
    let mut final_lambda: Vec<SlotMatrix> = Vec::new();
    let mut final_p_hat: Vec<SlotMatrix> = Vec::new();
    let mut prev_p_hat: Vec<SlotMatrix> =
        (0..fleet).map(|_| SlotMatrix::zeros(slots, fleet)).collect();
    let mut converged = false;
    let mut iterations = 0usize;

    for iter in 1..=settings.max_iterations {
        iterations = iter;
        // Read committed slices for every prosumer.
        let mut reads = Vec::with_capacity(fleet);
        for i in 0..fleet {
            let (lambda_i, p_hat_i, k) = contract.read_state(i);
            if k != (iter - 1) as u64 {
                return Err(CoordError::Contract(format!(
                    "expected contract iteration {}, found {k}",
                    iter - 1
                )));
            }
            reads.push((lambda_i, p_hat_i));
        }

        // Local solves are independent; run them in parallel.
        let results: Vec<Result<_, SolveError>> = solvers
            .par_iter_mut()
            .zip(reads.par_iter())
            .map(|(solver, (lambda_i, p_hat_i))| {
                solver.solve(lambda_i, p_hat_i, PLT_TOL).map(|(s, _)| s)
            })
            .collect();
        let mut round_schedules = Vec::with_capacity(fleet);
        for (i, res) in results.into_iter().enumerate() {
            round_schedules.push(res.map_err(|source| CoordError::Subproblem {
                prosumer: i,
                iteration: iter,
                source,
            })?);
        }

        // Submit all proposals; the contract executes on the last one.
        for (i, sched) in round_schedules.iter().enumerate() {
            let outcome = contract.submit_trades(i, (iter - 1) as u64, &sched.p_et);
            if outcome != SubmitOutcome::Accepted {
                return Err(CoordError::Rejected {
                    prosumer: i,
                    outcome,
                });
            }
        }

        // Read back the updated state and measure residuals.
        let mut r_primal = 0.0_f64;
        let mut r_dual = 0.0_f64;
        let mut lambda_rows = Vec::with_capacity(fleet);
        let mut p_hat_rows = Vec::with_capacity(fleet);
        for i in 0..fleet {
            let (lambda_i, p_hat_i, k) = contract.read_state(i);
            if k != iter as u64 {
                return Err(CoordError::Contract(format!(
                    "contract did not execute round {iter} (still at {k})"
                )));
            }
            for t in 0..slots {
                for j in 0..fleet {
                    r_primal = r_primal
                        .max((p_hat_i.get(t, j) - round_schedules[i].p_et.get(t, j)).abs());
                    r_dual =
                        r_dual.max(settings.rho * (p_hat_i.get(t, j) - prev_p_hat[i].get(t, j)).abs());
                }
            }
            lambda_rows.push(lambda_i);
            p_hat_rows.push(p_hat_i);
        }
        history.push(IterationRecord {
            iteration: iter as u64,
            r_primal,
            r_dual,
        });
        prev_p_hat = p_hat_rows.clone();
        schedules = round_schedules;
        final_lambda = lambda_rows;
        final_p_hat = p_hat_rows;

        if r_primal <= settings.eps_primal && r_dual <= settings.eps_dual {
            converged = true;
            break;
        }
    }

    // Settle trades at the final dual prices.
    let mut settlement = vec![0.0; fleet];
    for i in 0..fleet {
        let mut total = 0.0;
        for t in 0..slots {
            for j in 0..fleet {
                total += final_lambda[i].get(t, j) * schedules[i].p_et.get(t, j);
            }
        }
        settlement[i] = total;
    }

    Ok(AdmmReport {
        converged,
        iterations,
        history,
        schedules,
        lambda: final_lambda,
        p_hat: final_p_hat,
        settlement,
    })
}
