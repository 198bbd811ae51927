//! Simulated permissioned ledger.
//!
//! Prosumer smart meters are the nodes; a committee of them produces blocks
//! round-robin (`producer = committee[height % committee_len]`). Blocks
//! carry the submitted transactions, the digest of the post-execution
//! contract state, and are chained by hash. There is exactly one honest
//! chain: no forks, no adversarial producers — tampering is exercised only
//! through [`verify_chain`], which replays every block from genesis and
//! re-derives every digest.
//!
//! Exports are newline-delimited JSON, one block per line, digests in
//! lowercase hex. The height-0 line carries the contract configuration so a
//! chain file is self-contained for replay.

pub mod contract;

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::coordinator::{ContractHandle, SubmitOutcome};
use crate::model::{Scenario, SlotMatrix};
use contract::{matrix_to_payload, ContractConfig, ContractState, Hash256, VoteOutcome};

/// A blockchain node: its index and whether it sits on the PoA committee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeId {
    pub index: u16,
    pub role: NodeRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Normal,
    Poa,
}

/// Signed content of a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxPayload {
    /// Trade proposals, fixed-point, slot-major (`trades[t * fleet + j]`).
    SubmitTrades { trades: Vec<i64> },
    /// Committee membership vote.
    Vote { candidate: u16, add: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: u16,
    pub iteration: u64,
    pub nonce: u64,
    #[serde(flatten)]
    pub payload: TxPayload,
}

impl Transaction {
    fn canonical_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.sender.to_be_bytes());
        out.extend_from_slice(&self.iteration.to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        match &self.payload {
            TxPayload::SubmitTrades { trades } => {
                out.push(0);
                out.extend_from_slice(&(trades.len() as u32).to_be_bytes());
                for &v in trades {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            TxPayload::Vote { candidate, add } => {
                out.push(1);
                out.extend_from_slice(&candidate.to_be_bytes());
                out.push(*add as u8);
            }
        }
    }
}

/// One block. The genesis block (height 0) additionally embeds the contract
/// configuration so replays can reconstruct the initial state from the
/// chain file alone; the genesis state hash commits to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub producer: u16,
    pub txs: Vec<Transaction>,
    pub parent_hash: Hash256,
    pub state_hash: Hash256,
    pub block_hash: Hash256,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genesis: Option<ContractConfig>,
}

fn compute_block_hash(
    height: u64,
    producer: u16,
    txs: &[Transaction],
    parent_hash: &Hash256,
    state_hash: &Hash256,
) -> Hash256 {
    use sha2::{Digest as _, Sha256};
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&height.to_be_bytes());
    bytes.extend_from_slice(&producer.to_be_bytes());
    bytes.extend_from_slice(&(txs.len() as u32).to_be_bytes());
    for tx in txs {
        tx.canonical_bytes(&mut bytes);
    }
    bytes.extend_from_slice(&parent_hash.0);
    bytes.extend_from_slice(&state_hash.0);
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Hash256(hasher.finalize().into())
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("not this node's turn: expected producer {expected}, got {got}")]
    RejectedTurn { expected: u16, got: u16 },
    #[error("parent hash does not match the chain tip")]
    RejectedFork,
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("chain parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Why a chain failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyFailure {
    EmptyChain,
    MissingGenesis,
    UnexpectedGenesis,
    BadHeight,
    ParentHash,
    ProducerTurn,
    TxOrder,
    StateHashMismatch,
    BlockHashMismatch,
}

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            VerifyFailure::EmptyChain => "empty-chain",
            VerifyFailure::MissingGenesis => "missing-genesis",
            VerifyFailure::UnexpectedGenesis => "unexpected-genesis",
            VerifyFailure::BadHeight => "bad-height",
            VerifyFailure::ParentHash => "parent-hash",
            VerifyFailure::ProducerTurn => "producer-turn",
            VerifyFailure::TxOrder => "tx-order",
            VerifyFailure::StateHashMismatch => "state-hash-mismatch",
            VerifyFailure::BlockHashMismatch => "block-hash-mismatch",
        };
        f.write_str(name)
    }
}

/// Replay verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainVerdict {
    Valid,
    Invalid { height: u64, reason: VerifyFailure },
}

impl ChainVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainVerdict::Valid)
    }
}

fn expected_producer(committee: &[u16], height: u64) -> u16 {
    committee[(height % committee.len() as u64) as usize]
}

/// Applies one transaction to the contract state; invalidly-nonced
/// transactions are skipped without effect. Runs inside block production
/// and replay, so it must stay deterministic.
fn apply_tx(state: &mut ContractState, tx: &Transaction) {
    let sender = tx.sender as usize;
    if sender >= state.fleet() || tx.nonce != state.next_nonce[sender] {
        return;
    }
    state.next_nonce[sender] += 1;
    match &tx.payload {
        TxPayload::SubmitTrades { trades } => {
            let _ = state.submit(tx.sender, tx.iteration, trades);
        }
        TxPayload::Vote { candidate, add } => {
            let _ = state.apply_vote(tx.sender, *candidate, *add);
        }
    }
}

fn txs_sorted(txs: &[Transaction]) -> bool {
    txs.windows(2)
        .all(|w| (w[0].sender, w[0].nonce) < (w[1].sender, w[1].nonce))
}

/// Replays a chain from genesis: hash links, producer rotation, transaction
/// ordering, and independent re-execution of every state digest.
pub fn verify_chain(blocks: &[Block]) -> ChainVerdict {
    let invalid = |height: u64, reason: VerifyFailure| ChainVerdict::Invalid { height, reason };
    let Some(genesis) = blocks.first() else {
        return invalid(0, VerifyFailure::EmptyChain);
    };
    if genesis.height != 0 || !genesis.parent_hash.is_zero() || !genesis.txs.is_empty() {
        return invalid(0, VerifyFailure::MissingGenesis);
    }
    let Some(config) = genesis.genesis.clone() else {
        return invalid(0, VerifyFailure::MissingGenesis);
    };
    if config.validate().is_err() {
        return invalid(0, VerifyFailure::MissingGenesis);
    }
    let mut state = ContractState::new(config);
    let mut parent = Hash256::default();
    for (k, block) in blocks.iter().enumerate() {
        let h = block.height;
        if h != k as u64 {
            return invalid(h, VerifyFailure::BadHeight);
        }
        if k > 0 && block.genesis.is_some() {
            return invalid(h, VerifyFailure::UnexpectedGenesis);
        }
        if block.parent_hash != parent {
            return invalid(h, VerifyFailure::ParentHash);
        }
        if block.producer != expected_producer(&state.config.committee, h) {
            return invalid(h, VerifyFailure::ProducerTurn);
        }
        if !txs_sorted(&block.txs) {
            return invalid(h, VerifyFailure::TxOrder);
        }
        for tx in &block.txs {
            apply_tx(&mut state, tx);
        }
        if k > 0 {
            state.try_execute();
        }
        if state.state_hash() != block.state_hash {
            return invalid(h, VerifyFailure::StateHashMismatch);
        }
        let recomputed = compute_block_hash(
            block.height,
            block.producer,
            &block.txs,
            &block.parent_hash,
            &block.state_hash,
        );
        if recomputed != block.block_hash {
            return invalid(h, VerifyFailure::BlockHashMismatch);
        }
        parent = block.block_hash;
    }
    ChainVerdict::Valid
}

/// One block per line, serde-encoded JSON.
pub fn export_chain(blocks: &[Block]) -> String {
    let mut out = String::new();
    for block in blocks {
        out.push_str(&serde_json::to_string(block).expect("block serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn import_chain(text: &str) -> Result<Vec<Block>, LedgerError> {
    let mut blocks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let block: Block = serde_json::from_str(line).map_err(|e| LedgerError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        blocks.push(block);
    }
    Ok(blocks)
}

/// Chain-backed contract: queues submissions in a mempool and lets the
/// rotating committee producer commit them; the coordinator round executes
/// inside block application once all proposals are in.
pub struct LedgerContract {
    state: ContractState,
    blocks: Vec<Block>,
    mempool: Vec<Transaction>,
    pending_senders: BTreeSet<u16>,
    assign_nonce: Vec<u64>,
}

impl LedgerContract {
    pub fn new(config: ContractConfig) -> Result<Self, LedgerError> {
        config.validate().map_err(LedgerError::Config)?;
        let state = ContractState::new(config.clone());
        let state_hash = state.state_hash();
        let producer = expected_producer(&config.committee, 0);
        let block_hash = compute_block_hash(0, producer, &[], &Hash256::default(), &state_hash);
        let genesis = Block {
            height: 0,
            producer,
            txs: Vec::new(),
            parent_hash: Hash256::default(),
            state_hash,
            block_hash,
            genesis: Some(config),
        };
        let fleet = state.fleet();
        Ok(Self {
            state,
            blocks: vec![genesis],
            mempool: Vec::new(),
            pending_senders: BTreeSet::new(),
            assign_nonce: vec![0; fleet],
        })
    }

    pub fn from_scenario(scenario: &Scenario) -> Result<Self, LedgerError> {
        Self::new(ContractConfig::from_settings(
            scenario.fleet_size(),
            scenario.time.slots,
            &scenario.admm,
        ))
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }

    pub fn node(&self, index: u16) -> NodeId {
        let role = if self.state.config.committee.contains(&index) {
            NodeRole::Poa
        } else {
            NodeRole::Normal
        };
        NodeId { index, role }
    }

    fn tip_hash(&self) -> Hash256 {
        self.blocks.last().map(|b| b.block_hash).unwrap_or_default()
    }

    pub fn next_height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn expected_producer(&self) -> u16 {
        expected_producer(&self.state.config.committee, self.next_height())
    }

    /// Produces and commits the next block. The caller must be the
    /// round-robin producer and must extend the current tip.
    pub fn produce_block(
        &mut self,
        producer: u16,
        parent_hash: Hash256,
        mut txs: Vec<Transaction>,
    ) -> Result<&Block, LedgerError> {
        let expected = self.expected_producer();
        if producer != expected {
            return Err(LedgerError::RejectedTurn {
                expected,
                got: producer,
            });
        }
        if parent_hash != self.tip_hash() {
            return Err(LedgerError::RejectedFork);
        }
        txs.sort_by_key(|tx| (tx.sender, tx.nonce));
        for tx in &txs {
            apply_tx(&mut self.state, tx);
        }
        self.state.try_execute();
        let height = self.next_height();
        let state_hash = self.state.state_hash();
        let block_hash = compute_block_hash(height, producer, &txs, &parent_hash, &state_hash);
        self.blocks.push(Block {
            height,
            producer,
            txs,
            parent_hash,
            state_hash,
            block_hash,
            genesis: None,
        });
        self.assign_nonce = self.state.next_nonce.clone();
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Queues a membership vote and commits it in its own block.
    pub fn vote_membership(
        &mut self,
        sender: u16,
        candidate: u16,
        add: bool,
    ) -> Result<VoteOutcome, LedgerError> {
        // Predict the outcome on a copy so callers see the contract verdict.
        let mut preview = self.state.clone();
        let outcome = preview.apply_vote(sender, candidate, add);
        let tx = Transaction {
            sender,
            iteration: self.state.iteration,
            nonce: self.alloc_nonce(sender),
            payload: TxPayload::Vote { candidate, add },
        };
        let producer = self.expected_producer();
        let parent = self.tip_hash();
        self.produce_block(producer, parent, vec![tx])?;
        Ok(outcome)
    }

    fn alloc_nonce(&mut self, sender: u16) -> u64 {
        let n = self.assign_nonce[sender as usize];
        self.assign_nonce[sender as usize] += 1;
        n
    }

    fn flush_round(&mut self) {
        let txs = std::mem::take(&mut self.mempool);
        self.pending_senders.clear();
        let producer = self.expected_producer();
        let parent = self.tip_hash();
        self.produce_block(producer, parent, txs)
            .expect("internally produced block follows the rotation");
    }
}

impl ContractHandle for LedgerContract {
    fn submit_trades(
        &mut self,
        sender: usize,
        iteration: u64,
        trades: &SlotMatrix,
    ) -> SubmitOutcome {
        let fleet = self.state.fleet();
        let slots = self.state.slots();
        if sender >= fleet || trades.slots() != slots || trades.cols() != fleet {
            return SubmitOutcome::RejectedInvalid;
        }
        if iteration != self.state.iteration {
            return SubmitOutcome::RejectedStale;
        }
        let sender16 = sender as u16;
        if self.state.received.contains(&sender16) || self.pending_senders.contains(&sender16) {
            return SubmitOutcome::RejectedDuplicate;
        }
        let payload = matrix_to_payload(trades);
        for t in 0..slots {
            let v = payload[t * fleet + sender];
            if v != 0 || payload[t * fleet..(t + 1) * fleet]
                .iter()
                .any(|v| v.abs() > contract::MAX_ABS_FIXED)
            {
                return SubmitOutcome::RejectedInvalid;
            }
        }
        let tx = Transaction {
            sender: sender16,
            iteration,
            nonce: self.alloc_nonce(sender16),
            payload: TxPayload::SubmitTrades { trades: payload },
        };
        self.mempool.push(tx);
        self.pending_senders.insert(sender16);
        if self.pending_senders.len() + self.state.received.len() == fleet {
            self.flush_round();
        }
        SubmitOutcome::Accepted
    }

    fn read_state(&self, prosumer: usize) -> (SlotMatrix, SlotMatrix, u64) {
        self.state.read(prosumer)
    }
}

/// In-memory contract stub: the same fixed-point state machine without
/// blocks, so its committed values are bit-identical to the ledger's.
pub struct MemoryContract {
    state: ContractState,
}

impl MemoryContract {
    pub fn new(config: ContractConfig) -> Result<Self, LedgerError> {
        config.validate().map_err(LedgerError::Config)?;
        Ok(Self {
            state: ContractState::new(config),
        })
    }

    pub fn from_scenario(scenario: &Scenario) -> Result<Self, LedgerError> {
        Self::new(ContractConfig::from_settings(
            scenario.fleet_size(),
            scenario.time.slots,
            &scenario.admm,
        ))
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }
}

impl ContractHandle for MemoryContract {
    fn submit_trades(
        &mut self,
        sender: usize,
        iteration: u64,
        trades: &SlotMatrix,
    ) -> SubmitOutcome {
        if trades.slots() != self.state.slots() || trades.cols() != self.state.fleet() {
            return SubmitOutcome::RejectedInvalid;
        }
        let payload = matrix_to_payload(trades);
        let outcome = self.state.submit(sender as u16, iteration, &payload);
        if outcome == SubmitOutcome::Accepted {
            self.state.try_execute();
        }
        outcome
    }

    fn read_state(&self, prosumer: usize) -> (SlotMatrix, SlotMatrix, u64) {
        self.state.read(prosumer)
    }
}
