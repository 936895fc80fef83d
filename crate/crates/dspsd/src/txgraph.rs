//! Temporal directed transaction graph.
//!
//! Events aggregate into weighted directed edges (weight = transaction
//! count), and every node carries an interactive account formation sequence:
//! the time-ordered list of counterparties it transacted with. Snapshots
//! restrict the graph to events at or before a timestamp.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown account: {0}")]
    NodeNotFound(String),
}

/// Opaque account identifier (a hex address in real data, any token in
/// synthetic data).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn new(id: impl Into<String>) -> Self {
        AccountId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccountKind {
    Eoa,
    Contract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Ponzi,
}

/// An Ethereum-style account: externally owned (no code) or a contract with
/// an opcode mnemonic sequence and an optional ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub id: AccountId,
    pub kind: AccountKind,
    pub opcodes: Vec<String>,
    pub label: Option<Label>,
}

impl Account {
    pub fn eoa(id: impl Into<String>) -> Self {
        Account {
            id: AccountId::new(id),
            kind: AccountKind::Eoa,
            opcodes: Vec::new(),
            label: None,
        }
    }

    pub fn contract(id: impl Into<String>, opcodes: Vec<String>, label: Option<Label>) -> Self {
        Account {
            id: AccountId::new(id),
            kind: AccountKind::Contract,
            opcodes,
            label,
        }
    }

    pub fn is_contract(&self) -> bool {
        self.kind == AccountKind::Contract
    }
}

/// One raw transaction record. The value is stored but never used for edge
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionEvent {
    pub from: AccountId,
    pub to: AccountId,
    pub timestamp: u64,
    pub value: f64,
}

impl TransactionEvent {
    pub fn new(from: impl Into<String>, to: impl Into<String>, timestamp: u64, value: f64) -> Self {
        TransactionEvent {
            from: AccountId::new(from),
            to: AccountId::new(to),
            timestamp,
            value,
        }
    }
}

/// Weighted directed graph plus per-node formation sequences. Node handles
/// are dense indices assigned in registration order (account list first, then
/// auto-registered event endpoints), so iteration order is deterministic.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    accounts: Vec<Account>,
    index: HashMap<AccountId, usize>,
    edges: BTreeMap<(usize, usize), u64>,
    /// Sorted event timestamps per edge, for snapshot weights.
    edge_times: BTreeMap<(usize, usize), Vec<u64>>,
    formation: Vec<Vec<(usize, u64)>>,
    event_count: usize,
}

impl TemporalGraph {
    pub fn node_count(&self) -> usize {
        self.accounts.len()
    }

    pub fn event_count(&self) -> usize {
        self.event_count
    }

    pub fn account(&self, idx: usize) -> &Account {
        &self.accounts[idx]
    }

    pub fn accounts(&self) -> &[Account] {
        &self.accounts
    }

    pub fn node_idx(&self, id: &AccountId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require_node(&self, id: &AccountId) -> Result<usize, GraphError> {
        self.node_idx(id)
            .ok_or_else(|| GraphError::NodeNotFound(id.to_string()))
    }

    /// Aggregated weight of the directed edge, 0 if absent.
    pub fn weight(&self, from: usize, to: usize) -> u64 {
        self.edges.get(&(from, to)).copied().unwrap_or(0)
    }

    /// Edge weight counting only events with timestamp <= `t`.
    pub fn weight_at(&self, from: usize, to: usize, t: u64) -> u64 {
        self.edge_times
            .get(&(from, to))
            .map(|times| times.partition_point(|&ts| ts <= t) as u64)
            .unwrap_or(0)
    }

    /// Deterministic iteration over `((from, to), weight)`.
    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), u64)> + '_ {
        self.edges.iter().map(|(&k, &w)| (k, w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Formation sequence of node `v`: `(counterparty, timestamp)` per event
    /// incident to `v`, ordered by timestamp with input order as tie-break.
    /// Self-loops are excluded.
    pub fn formation(&self, v: usize) -> &[(usize, u64)] {
        &self.formation[v]
    }

    /// Weighted total degree (in + out); self-loops count on both sides.
    pub fn total_degree(&self, v: usize) -> u64 {
        let mut deg = 0;
        for (&(a, b), &w) in &self.edges {
            if a == v {
                deg += w;
            }
            if b == v {
                deg += w;
            }
        }
        deg
    }
}

/// Aggregate an event stream into a [`TemporalGraph`].
///
/// Endpoints missing from `accounts` are auto-registered as EOAs. Duplicate
/// ids in `accounts` keep the first occurrence.
pub fn build_graph(events: &[TransactionEvent], accounts: &[Account]) -> TemporalGraph {
    let mut registry: Vec<Account> = Vec::with_capacity(accounts.len());
    let mut index: HashMap<AccountId, usize> = HashMap::with_capacity(accounts.len());
    for acct in accounts {
        if !index.contains_key(&acct.id) {
            index.insert(acct.id.clone(), registry.len());
            registry.push(acct.clone());
        }
    }
    let mut register = |id: &AccountId, registry: &mut Vec<Account>| -> usize {
        if let Some(&i) = index.get(id) {
            return i;
        }
        let i = registry.len();
        index.insert(id.clone(), i);
        registry.push(Account::eoa(id.as_str()));
        i
    };

    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut edge_times: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut formation_raw: Vec<Vec<(usize, u64)>> = vec![Vec::new(); registry.len()];

    for event in events {
        let from = register(&event.from, &mut registry);
        let to = register(&event.to, &mut registry);
        if formation_raw.len() < registry.len() {
            formation_raw.resize(registry.len(), Vec::new());
        }
        *edges.entry((from, to)).or_insert(0) += 1;
        edge_times.entry((from, to)).or_default().push(event.timestamp);
        if from != to {
            formation_raw[from].push((to, event.timestamp));
            formation_raw[to].push((from, event.timestamp));
        }
    }

    for times in edge_times.values_mut() {
        times.sort_unstable();
    }
    for seq in &mut formation_raw {
        // Stable sort keeps input order for tied timestamps.
        seq.sort_by_key(|&(_, t)| t);
    }

    TemporalGraph {
        accounts: registry,
        index,
        edges,
        edge_times,
        formation: formation_raw,
        event_count: events.len(),
    }
}

/// Weighted edge set restricted to events with timestamp <= `time`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub time: u64,
    pub edges: BTreeMap<(usize, usize), u64>,
    /// Endpoints of the retained edges, sorted.
    pub nodes: Vec<usize>,
}

/// Materialize the snapshot of `g` at `t` from the original event stream.
pub fn snapshot_at(
    g: &TemporalGraph,
    events: &[TransactionEvent],
    t: u64,
) -> Result<Snapshot, GraphError> {
    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for event in events {
        if event.timestamp > t {
            continue;
        }
        let from = g.require_node(&event.from)?;
        let to = g.require_node(&event.to)?;
        *edges.entry((from, to)).or_insert(0) += 1;
    }
    let mut nodes: Vec<usize> = edges.keys().flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    Ok(Snapshot { time: t, edges, nodes })
}

/// The stored formation sequence of `v`, resolved back to account ids.
pub fn interactive_sequence(
    g: &TemporalGraph,
    v: &AccountId,
) -> Result<Vec<(AccountId, u64)>, GraphError> {
    let idx = g.require_node(v)?;
    Ok(g.formation(idx)
        .iter()
        .map(|&(u, t)| (g.account(u).id.clone(), t))
        .collect())
}
