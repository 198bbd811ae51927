//! The deterministic contract core: the coordinator round in signed 64-bit
//! fixed-point arithmetic (1e-9 resolution), a canonical byte serialization
//! of the full contract state, and its digest.
//!
//! Both contract frontends — the in-memory handle and the chain-backed
//! handle — drive this same state machine, so their committed values are
//! bit-identical. All arithmetic is integer (i128 intermediates, truncating
//! division), which keeps replays exact across runs and platforms.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::coordinator::{AdmmSettings, SubmitOutcome};
use crate::model::SlotMatrix;

/// Fixed-point scale: stored integers are value * 1e9.
pub const SCALE: i64 = 1_000_000_000;
/// Largest accepted magnitude on-chain (1e6 kW), guarding i128 products.
pub const MAX_ABS_FIXED: i64 = 1_000_000 * SCALE;

pub fn to_fixed(v: f64) -> i64 {
    (v * SCALE as f64).round() as i64
}

pub fn from_fixed(v: i64) -> f64 {
    v as f64 * 1e-9
}

/// A 32-byte digest, hex-encoded in JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Hash256(pub [u8; 32]);

impl Hash256 {
    pub fn to_hex(self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(Self(arr))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }
}

impl std::fmt::Display for Hash256 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Hash256 {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash256 {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Hash256::from_hex(&s).ok_or_else(|| serde::de::Error::custom("malformed 32-byte hex digest"))
    }
}

/// Static parameters the contract is instantiated with. Committed into the
/// genesis state hash, so a chain is bound to them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractConfig {
    pub fleet: u16,
    pub slots: u16,
    /// Penalty weight, fixed-point.
    pub rho: i64,
    /// Stopping thresholds, fixed-point (informational on-chain).
    pub eps_primal: i64,
    pub eps_dual: i64,
    pub max_iterations: u64,
    /// Current block-producer committee, in rotation order.
    pub committee: Vec<u16>,
}

/// Default committee: the first `max(1, ceil(fleet / 3))` prosumer nodes.
pub fn default_committee(fleet: u16) -> Vec<u16> {
    let size = ((fleet as usize) + 2) / 3;
    (0..size.max(1) as u16).collect()
}

impl ContractConfig {
    pub fn from_settings(fleet: usize, slots: usize, settings: &AdmmSettings) -> Self {
        Self {
            fleet: fleet as u16,
            slots: slots as u16,
            rho: to_fixed(settings.rho),
            eps_primal: to_fixed(settings.eps_primal),
            eps_dual: to_fixed(settings.eps_dual),
            max_iterations: settings.max_iterations as u64,
            committee: default_committee(fleet as u16),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fleet == 0 || self.slots == 0 {
            return Err("fleet and slots must be positive".into());
        }
        if self.rho <= 0 {
            return Err("rho must be positive".into());
        }
        if self.committee.is_empty() {
            return Err("committee must be nonempty".into());
        }
        let mut seen = BTreeSet::new();
        for &m in &self.committee {
            if m >= self.fleet || !seen.insert(m) {
                return Err("committee members must be distinct prosumer nodes".into());
            }
        }
        Ok(())
    }

    fn canonical_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.fleet.to_be_bytes());
        out.extend_from_slice(&self.slots.to_be_bytes());
        out.extend_from_slice(&self.rho.to_be_bytes());
        out.extend_from_slice(&self.eps_primal.to_be_bytes());
        out.extend_from_slice(&self.eps_dual.to_be_bytes());
        out.extend_from_slice(&self.max_iterations.to_be_bytes());
        out.extend_from_slice(&(self.committee.len() as u16).to_be_bytes());
        for &m in &self.committee {
            out.extend_from_slice(&m.to_be_bytes());
        }
    }
}

/// How a membership vote was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteOutcome {
    /// Tallied, majority not yet reached.
    Recorded,
    /// Majority reached; committee changed and the tally was cleared.
    Applied,
    RejectedNotCommittee,
    RejectedUnknownCandidate,
    RejectedRedundant,
    RejectedWouldEmpty,
}

/// Full replayable contract state.
///
/// Tensor layout: `(i * fleet + j) * slots + t`, diagonals zero. Values are
/// fixed-point per [`SCALE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContractState {
    pub config: ContractConfig,
    pub iteration: u64,
    pub lambda: Vec<i64>,
    pub p_hat: Vec<i64>,
    pub p_hat_prev: Vec<i64>,
    pub last_trades: Vec<i64>,
    /// Senders that already submitted for the current iteration.
    pub received: BTreeSet<u16>,
    pub r_primal: i64,
    pub r_dual: i64,
    /// Next expected transaction nonce per sender.
    pub next_nonce: Vec<u64>,
    /// Pending membership votes: (candidate, add) -> voters.
    pub votes: BTreeMap<(u16, bool), BTreeSet<u16>>,
}

impl ContractState {
    pub fn new(config: ContractConfig) -> Self {
        let n = config.fleet as usize;
        let t = config.slots as usize;
        let len = n * n * t;
        Self {
            next_nonce: vec![0; n],
            iteration: 0,
            lambda: vec![0; len],
            p_hat: vec![0; len],
            p_hat_prev: vec![0; len],
            last_trades: vec![0; len],
            received: BTreeSet::new(),
            r_primal: 0,
            r_dual: 0,
            votes: BTreeMap::new(),
            config,
        }
    }

    pub fn fleet(&self) -> usize {
        self.config.fleet as usize
    }

    pub fn slots(&self) -> usize {
        self.config.slots as usize
    }

    fn idx(&self, i: usize, j: usize, t: usize) -> usize {
        (i * self.fleet() + j) * self.slots() + t
    }

    /// Function one: stores one prosumer's trade proposals for the current
    /// iteration. The payload is slot-major (`payload[t * fleet + j]`).
    pub fn submit(&mut self, sender: u16, iteration: u64, payload: &[i64]) -> SubmitOutcome {
        let n = self.fleet();
        let t_slots = self.slots();
        if sender as usize >= n || payload.len() != n * t_slots {
            return SubmitOutcome::RejectedInvalid;
        }
        if iteration != self.iteration {
            return SubmitOutcome::RejectedStale;
        }
        if self.received.contains(&sender) {
            return SubmitOutcome::RejectedDuplicate;
        }
        for t in 0..t_slots {
            for j in 0..n {
                let v = payload[t * n + j];
                if v.abs() > MAX_ABS_FIXED || (j == sender as usize && v != 0) {
                    return SubmitOutcome::RejectedInvalid;
                }
            }
        }
        for t in 0..t_slots {
            for j in 0..n {
                let pos = self.idx(sender as usize, j, t);
                self.last_trades[pos] = payload[t * n + j];
            }
        }
        self.received.insert(sender);
        SubmitOutcome::Accepted
    }

    /// Function two: once every prosumer has submitted, runs the fixed-point
    /// coordinator round and advances the iteration. Returns whether it
    /// fired.
    pub fn try_execute(&mut self) -> bool {
        if self.received.len() < self.fleet() {
            return false;
        }
        self.run_round();
        self.received.clear();
        self.iteration += 1;
        true
    }

    fn run_round(&mut self) {
        let n = self.fleet();
        let t_slots = self.slots();
        let rho = self.config.rho as i128;
        self.p_hat_prev.copy_from_slice(&self.p_hat);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for t in 0..t_slots {
                    let p_ij = self.last_trades[self.idx(i, j, t)] as i128;
                    let p_ji = self.last_trades[self.idx(j, i, t)] as i128;
                    let l_ij = self.lambda[self.idx(i, j, t)] as i128;
                    let l_ji = self.lambda[self.idx(j, i, t)] as i128;
                    let num = rho * (p_ij - p_ji) - (SCALE as i128) * (l_ij - l_ji);
                    let den = 2 * rho;
                    let pos = self.idx(i, j, t);
                    self.p_hat[pos] = (num / den) as i64;
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for t in 0..t_slots {
                    let pos = self.idx(i, j, t);
                    let delta =
                        rho * (self.p_hat[pos] as i128 - self.last_trades[pos] as i128)
                            / SCALE as i128;
                    self.lambda[pos] = (self.lambda[pos] as i128 + delta) as i64;
                }
            }
        }
        let mut r_primal: i64 = 0;
        let mut r_dual: i128 = 0;
        for k in 0..self.p_hat.len() {
            r_primal = r_primal.max((self.p_hat[k] - self.last_trades[k]).abs());
            r_dual = r_dual.max((self.p_hat[k] as i128 - self.p_hat_prev[k] as i128).abs());
        }
        self.r_primal = r_primal;
        self.r_dual = (rho * r_dual / SCALE as i128).min(i64::MAX as i128) as i64;
    }

    /// Function three: read-only slices of the committed duals and
    /// auxiliary trades for one prosumer, as floats.
    pub fn read(&self, prosumer: usize) -> (SlotMatrix, SlotMatrix, u64) {
        let n = self.fleet();
        let t_slots = self.slots();
        let mut lambda = SlotMatrix::zeros(t_slots, n);
        let mut p_hat = SlotMatrix::zeros(t_slots, n);
        for t in 0..t_slots {
            for j in 0..n {
                lambda.set(t, j, from_fixed(self.lambda[self.idx(prosumer, j, t)]));
                p_hat.set(t, j, from_fixed(self.p_hat[self.idx(prosumer, j, t)]));
            }
        }
        (lambda, p_hat, self.iteration)
    }

    /// Residuals of the last executed round, as floats.
    pub fn residuals(&self) -> (f64, f64) {
        (from_fixed(self.r_primal), from_fixed(self.r_dual))
    }

    /// Committee membership vote. A candidate joins or leaves once strictly
    /// more than half of the current committee voted the same way; the
    /// tally for that candidate is then cleared.
    pub fn apply_vote(&mut self, sender: u16, candidate: u16, add: bool) -> VoteOutcome {
        if !self.config.committee.contains(&sender) {
            return VoteOutcome::RejectedNotCommittee;
        }
        if candidate >= self.config.fleet {
            return VoteOutcome::RejectedUnknownCandidate;
        }
        let is_member = self.config.committee.contains(&candidate);
        if add == is_member {
            return VoteOutcome::RejectedRedundant;
        }
        if !add && self.config.committee.len() == 1 {
            return VoteOutcome::RejectedWouldEmpty;
        }
        self.votes
            .entry((candidate, add))
            .or_default()
            .insert(sender);
        let tally = self.votes[&(candidate, add)]
            .iter()
            .filter(|v| self.config.committee.contains(v))
            .count();
        if 2 * tally > self.config.committee.len() {
            if add {
                self.config.committee.push(candidate);
            } else {
                self.config.committee.retain(|&m| m != candidate);
            }
            self.votes.retain(|&(c, _), _| c != candidate);
            VoteOutcome::Applied
        } else {
            VoteOutcome::Recorded
        }
    }

    /// Canonical byte serialization: versioned, fixed field order, all
    /// integers big-endian. The state hash is SHA-256 of these bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.lambda.len() * 8);
        out.extend_from_slice(b"DERC\x01");
        self.config.canonical_bytes(&mut out);
        out.extend_from_slice(&self.iteration.to_be_bytes());
        for tensor in [&self.lambda, &self.p_hat, &self.p_hat_prev, &self.last_trades] {
            for &v in tensor.iter() {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out.extend_from_slice(&(self.received.len() as u16).to_be_bytes());
        for &s in &self.received {
            out.extend_from_slice(&s.to_be_bytes());
        }
        out.extend_from_slice(&self.r_primal.to_be_bytes());
        out.extend_from_slice(&self.r_dual.to_be_bytes());
        out.extend_from_slice(&(self.next_nonce.len() as u16).to_be_bytes());
        for &nn in &self.next_nonce {
            out.extend_from_slice(&nn.to_be_bytes());
        }
        out.extend_from_slice(&(self.votes.len() as u32).to_be_bytes());
        for (&(candidate, add), voters) in &self.votes {
            out.extend_from_slice(&candidate.to_be_bytes());
            out.push(add as u8);
            out.extend_from_slice(&(voters.len() as u16).to_be_bytes());
            for &v in voters {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn state_hash(&self) -> Hash256 {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_bytes());
        Hash256(hasher.finalize().into())
    }
}

/// Converts a float trade matrix to the on-chain fixed-point payload
/// (slot-major).
pub fn matrix_to_payload(m: &SlotMatrix) -> Vec<i64> {
    let mut out = Vec::with_capacity(m.slots() * m.cols());
    for t in 0..m.slots() {
        for j in 0..m.cols() {
            out.push(to_fixed(m.get(t, j)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::{sct_update, CoordinatorState, PairTensor};

    fn config(fleet: u16, slots: u16) -> ContractConfig {
        ContractConfig {
            fleet,
            slots,
            rho: SCALE,
            eps_primal: to_fixed(1e-3),
            eps_dual: to_fixed(1e-3),
            max_iterations: 50,
            committee: default_committee(fleet),
        }
    }

    #[test]
    fn fixed_point_round_trip() {
        for v in [0.0, 1.25, -3.141592653, 1e5] {
            assert!((from_fixed(to_fixed(v)) - v).abs() <= 5e-10);
        }
        assert_eq!(to_fixed(0.0), 0);
        assert_eq!(to_fixed(-1.0), -SCALE);
    }

    #[test]
    fn submit_validation_paths() {
        let mut state = ContractState::new(config(3, 2));
        let payload = vec![0i64; 6];
        assert_eq!(state.submit(0, 0, &payload), SubmitOutcome::Accepted);
        assert_eq!(state.submit(0, 0, &payload), SubmitOutcome::RejectedDuplicate);
        assert_eq!(state.submit(1, 1, &payload), SubmitOutcome::RejectedStale);
        assert_eq!(state.submit(5, 0, &payload), SubmitOutcome::RejectedInvalid);
        assert_eq!(state.submit(1, 0, &payload[..4]), SubmitOutcome::RejectedInvalid);
        // Nonzero own column.
        let mut diag = payload.clone();
        diag[1] = 7; // slot 0, column 1, sender 1
        assert_eq!(state.submit(1, 0, &diag), SubmitOutcome::RejectedInvalid);
    }

    #[test]
    fn execute_requires_full_round_and_matches_float_reference() {
        let mut state = ContractState::new(config(2, 1));
        let pay0 = vec![0, to_fixed(1.0)]; // sells 1.0 to prosumer 1
        let pay1 = vec![0, 0];
        assert_eq!(state.submit(0, 0, &pay0), SubmitOutcome::Accepted);
        assert!(!state.try_execute());
        assert_eq!(state.submit(1, 0, &pay1), SubmitOutcome::Accepted);
        assert!(state.try_execute());
        assert_eq!(state.iteration, 1);
        assert!(state.received.is_empty());

        // Same round in the float domain.
        let float_state = CoordinatorState::new(2, 1);
        let mut trades = PairTensor::zeros(2, 1);
        trades.set(0, 1, 0, 1.0);
        let next = sct_update(&float_state, &trades, 1.0).unwrap();
        let (lambda0, p_hat0, _) = state.read(0);
        assert!((p_hat0.get(0, 1) - next.p_hat.get(0, 1, 0)).abs() < 2e-9);
        assert!((lambda0.get(0, 1) - next.lambda.get(0, 1, 0)).abs() < 2e-9);
    }

    #[test]
    fn auxiliary_antisymmetry_is_exact_in_fixed_point() {
        let mut state = ContractState::new(config(3, 2));
        // Awkward values that do not divide evenly.
        let mk = |vals: [i64; 6]| vals.to_vec();
        assert_eq!(
            state.submit(0, 0, &mk([0, 333_333_333, -7, 0, 1, 999_999_999])),
            SubmitOutcome::Accepted
        );
        assert_eq!(
            state.submit(1, 0, &mk([5, 0, 123_456_789, -11, 0, 3])),
            SubmitOutcome::Accepted
        );
        assert_eq!(
            state.submit(2, 0, &mk([-17, 29, 0, 41, -53, 0])),
            SubmitOutcome::Accepted
        );
        assert!(state.try_execute());
        for i in 0..3 {
            for j in 0..3 {
                for t in 0..2 {
                    let sum = state.p_hat[state.idx(i, j, t)] + state.p_hat[state.idx(j, i, t)];
                    assert_eq!(sum, 0, "p_hat not antisymmetric at ({i},{j},{t})");
                }
            }
        }
    }

    #[test]
    fn state_hash_changes_with_any_field() {
        let state = ContractState::new(config(2, 2));
        let h0 = state.state_hash();
        let mut s1 = state.clone();
        s1.lambda[3] = 1;
        assert_ne!(h0, s1.state_hash());
        let mut s2 = state.clone();
        s2.iteration = 1;
        assert_ne!(h0, s2.state_hash());
        let mut s3 = state;
        s3.config.committee = vec![1];
        assert_ne!(h0, s3.state_hash());
    }

    #[test]
    fn vote_majority_rules() {
        let mut state = ContractState::new(config(9, 1)); // committee [0, 1, 2]
        assert_eq!(state.config.committee, vec![0, 1, 2]);
        assert_eq!(state.apply_vote(0, 5, true), VoteOutcome::Recorded);
        assert_eq!(state.apply_vote(5, 6, true), VoteOutcome::RejectedNotCommittee);
        assert_eq!(state.apply_vote(1, 5, true), VoteOutcome::Applied); // 2 > 1.5
        assert_eq!(state.config.committee, vec![0, 1, 2, 5]);
        assert!(state.votes.is_empty());

        assert_eq!(state.apply_vote(0, 5, true), VoteOutcome::RejectedRedundant);
        assert_eq!(state.apply_vote(0, 9, true), VoteOutcome::RejectedUnknownCandidate);

        // Shrink back to one member, then protect it. Members may vote for
        // their own removal; a strict majority is still required.
        for target in [5u16, 2, 1] {
            let mut applied = false;
            for voter in [0u16, 1, 2, 5] {
                if !state.config.committee.contains(&voter) {
                    continue;
                }
                match state.apply_vote(voter, target, false) {
                    VoteOutcome::Applied => {
                        applied = true;
                        break;
                    }
                    VoteOutcome::Recorded => {}
                    VoteOutcome::RejectedRedundant => break, // already removed
                    other => panic!("unexpected outcome {other:?}"),
                }
            }
            assert!(applied, "removal of {target} did not apply");
        }
        assert_eq!(state.config.committee, vec![0]);
        assert_eq!(state.apply_vote(0, 0, false), VoteOutcome::RejectedWouldEmpty);
    }
}
