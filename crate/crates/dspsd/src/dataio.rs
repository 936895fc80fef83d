//! Dataset files and the seeded synthetic generator.
//!
//! On disk a dataset is three UTF-8, LF-terminated files plus a manifest:
//!
//! * `transactions.csv` — header `from,to,timestamp,value`, one event per row
//! * `opcodes.tsv` — `account_id<TAB>space-separated mnemonics` (contracts only)
//! * `labels.csv` — header `account_id,label`, label 0 = normal, 1 = Ponzi
//! * `manifest.json` — file names, counts, and the generator seed
//!
//! The generator realizes the four smart Ponzi contract patterns (array
//! pyramid, tree pyramid, handover, waterfall) plus normal contract traffic.
//! Opcode sequences are drawn from scheme-specific template distributions
//! over synthetic mnemonic vocabularies; they are NOT compiled contracts,
//! they only carry distributional label signal.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;
use crate::txgraph::{Account, AccountId, Label, TransactionEvent};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate account {id} in {file}")]
    DuplicateAccount { id: String, file: String },
    #[error("label references unknown account {0}")]
    UnknownLabelTarget(String),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// How malformed transaction rows are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// First malformed row aborts the load.
    Strict,
    /// Malformed rows are skipped and counted.
    Lenient,
}

pub const TRANSACTIONS_HEADER: &str = "from,to,timestamp,value";
pub const LABELS_HEADER: &str = "account_id,label";

/// Parse `transactions.csv` in strict mode.
pub fn load_transactions(path: &Path) -> Result<Vec<TransactionEvent>, DataError> {
    let (events, _) = load_transactions_with_mode(path, ParseMode::Strict)?;
    Ok(events)
}

/// Parse `transactions.csv`; returns the events plus the number of skipped
/// rows (always 0 in strict mode).
pub fn load_transactions_with_mode(
    path: &Path,
    mode: ParseMode,
) -> Result<(Vec<TransactionEvent>, usize), DataError> {
    let file = path.display().to_string();
    let contents = read(path)?;
    let mut lines = contents.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == TRANSACTIONS_HEADER => {}
        Some((_, header)) => {
            return Err(DataError::Parse {
                file,
                line: 1,
                reason: format!("expected header `{TRANSACTIONS_HEADER}`, got `{header}`"),
            })
        }
        None => {
            return Err(DataError::Parse {
                file,
                line: 1,
                reason: "empty file".to_string(),
            })
        }
    }
    let mut events = Vec::new();
    let mut skipped = 0;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        match parse_transaction_row(line) {
            Ok(event) => events.push(event),
            Err(reason) => match mode {
                ParseMode::Strict => {
                    return Err(DataError::Parse {
                        file,
                        line: idx + 1,
                        reason,
                    })
                }
                ParseMode::Lenient => skipped += 1,
            },
        }
    }
    Ok((events, skipped))
}

fn parse_transaction_row(line: &str) -> Result<TransactionEvent, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, got {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty account id".to_string());
    }
    let timestamp: u64 = fields[2]
        .parse()
        .map_err(|_| format!("invalid timestamp `{}`", fields[2]))?;
    let value: f64 = fields[3]
        .parse()
        .map_err(|_| format!("invalid value `{}`", fields[3]))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("value must be a non-negative number, got `{}`", fields[3]));
    }
    Ok(TransactionEvent::new(fields[0], fields[1], timestamp, value))
}

/// Parse `opcodes.tsv` and `labels.csv` into labeled contract accounts.
/// Accounts absent from the opcodes file are EOAs and never appear here.
pub fn load_opcodes_and_labels(
    opcodes_path: &Path,
    labels_path: &Path,
) -> Result<Vec<Account>, DataError> {
    let opcodes_file = opcodes_path.display().to_string();
    let contents = read(opcodes_path)?;
    let mut accounts: Vec<Account> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in contents.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            file: opcodes_file.clone(),
            line: idx + 1,
            reason: "expected `account_id<TAB>mnemonics`".to_string(),
        })?;
        if id.is_empty() {
            return Err(DataError::Parse {
                file: opcodes_file.clone(),
                line: idx + 1,
                reason: "empty account id".to_string(),
            });
        }
        let mnemonics: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
        if mnemonics.is_empty() {
            return Err(DataError::Parse {
                file: opcodes_file.clone(),
                line: idx + 1,
                reason: "contract account with no opcodes".to_string(),
            });
        }
        if index.contains_key(id) {
            return Err(DataError::DuplicateAccount {
                id: id.to_string(),
                file: opcodes_file,
            });
        }
        index.insert(id.to_string(), accounts.len());
        accounts.push(Account::contract(id, mnemonics, None));
    }

    let labels_file = labels_path.display().to_string();
    let contents = read(labels_path)?;
    let mut lines = contents.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == LABELS_HEADER => {}
        Some((_, header)) => {
            return Err(DataError::Parse {
                file: labels_file,
                line: 1,
                reason: format!("expected header `{LABELS_HEADER}`, got `{header}`"),
            })
        }
        None => {
            return Err(DataError::Parse {
                file: labels_file,
                line: 1,
                reason: "empty file".to_string(),
            })
        }
    }
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| DataError::Parse {
            file: labels_file.clone(),
            line: idx + 1,
            reason: "expected `account_id,label`".to_string(),
        })?;
        let label = match label {
            "0" => Label::Normal,
            "1" => Label::Ponzi,
            other => {
                return Err(DataError::Parse {
                    file: labels_file.clone(),
                    line: idx + 1,
                    reason: format!("label must be 0 or 1, got `{other}`"),
                })
            }
        };
        if !seen.insert(id.to_string()) {
            return Err(DataError::DuplicateAccount {
                id: id.to_string(),
                file: labels_file,
            });
        }
        let &slot = index
            .get(id)
            .ok_or_else(|| DataError::UnknownLabelTarget(id.to_string()))?;
        accounts[slot].label = Some(label);
    }
    Ok(accounts)
}

/// The four smart Ponzi contract patterns plus normal traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    ArrayPyramid,
    TreePyramid,
    Handover,
    Waterfall,
    Normal,
}

impl SchemeKind {
    pub const ALL_PONZI: [SchemeKind; 4] = [
        SchemeKind::ArrayPyramid,
        SchemeKind::TreePyramid,
        SchemeKind::Handover,
        SchemeKind::Waterfall,
    ];

    pub fn label(self) -> Label {
        match self {
            SchemeKind::Normal => Label::Normal,
            _ => Label::Ponzi,
        }
    }
}

/// Tunables for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Inclusive range for opcode sequence lengths.
    pub opcode_len: (usize, usize),
    /// Handover payout = previous investment * (1 + interest).
    pub interest: f64,
    /// Waterfall payout fraction of each earlier investment.
    pub waterfall_fraction: f64,
    /// Array scheme: payouts an investor receives before the frontier moves.
    pub array_refunds: usize,
    /// Probability that a normal contract replies to a deposit.
    pub reply_prob: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            opcode_len: (16, 28),
            interest: 0.1,
            waterfall_fraction: 0.25,
            array_refunds: 2,
            reply_prob: 0.5,
        }
    }
}

const COMMON_OPS: &[&str] = &[
    "PUSH1", "PUSH2", "POP", "MSTORE", "MLOAD", "JUMP", "JUMPI", "JUMPDEST", "DUP1", "DUP2",
    "SWAP1", "ADD", "SUB", "ISZERO", "STOP", "RETURN",
];
const PONZI_OPS: &[&str] = &["CALLVALUE", "CALLER", "SLOAD", "SSTORE", "CALL", "BALANCE", "GAS"];
const ARRAY_OPS: &[&str] = &["CALLDATALOAD", "MOD", "LT"];
const TREE_OPS: &[&str] = &["SHA3", "DIV", "GT"];
const HANDOVER_OPS: &[&str] = &["ORIGIN", "EQ", "MSTORE8"];
const WATERFALL_OPS: &[&str] = &["CALLDATASIZE", "MULMOD", "SGT"];
const NORMAL_OPS: &[&[&str]] = &[
    &["LOG1", "EXTCODESIZE", "TIMESTAMP", "ADDRESS"],
    &["LOG2", "CREATE", "NUMBER", "CODECOPY"],
    &["RETURNDATASIZE", "DELEGATECALL", "BYTE", "SHL"],
];

fn global_pool() -> Vec<&'static str> {
    let mut pool: Vec<&'static str> = Vec::new();
    pool.extend(COMMON_OPS);
    pool.extend(PONZI_OPS);
    pool.extend(ARRAY_OPS);
    pool.extend(TREE_OPS);
    pool.extend(HANDOVER_OPS);
    pool.extend(WATERFALL_OPS);
    for group in NORMAL_OPS {
        pool.extend(*group);
    }
    pool
}

/// Weighted template distribution for one contract's opcodes.
fn opcode_template(scheme: SchemeKind, rng: &mut Rng) -> Vec<(&'static str, f64)> {
    let mut template: Vec<(&'static str, f64)> = Vec::new();
    let push = |ops: &[&'static str], group_weight: f64, out: &mut Vec<(&'static str, f64)>| {
        for &op in ops {
            out.push((op, group_weight / ops.len() as f64));
        }
    };
    match scheme {
        SchemeKind::Normal => {
            let primary = NORMAL_OPS[rng.below(NORMAL_OPS.len())];
            let secondary = NORMAL_OPS[rng.below(NORMAL_OPS.len())];
            push(COMMON_OPS, 0.5, &mut template);
            push(primary, 0.32, &mut template);
            push(secondary, 0.13, &mut template);
            push(PONZI_OPS, 0.05, &mut template);
        }
        ponzi => {
            let marker = match ponzi {
                SchemeKind::ArrayPyramid => ARRAY_OPS,
                SchemeKind::TreePyramid => TREE_OPS,
                SchemeKind::Handover => HANDOVER_OPS,
                SchemeKind::Waterfall => WATERFALL_OPS,
                SchemeKind::Normal => unreachable!(),
            };
            push(COMMON_OPS, 0.4, &mut template);
            push(PONZI_OPS, 0.35, &mut template);
            push(marker, 0.25, &mut template);
        }
    }
    template
}

fn draw_opcodes(scheme: SchemeKind, params: &SchemeParams, rng: &mut Rng) -> Vec<String> {
    let template = opcode_template(scheme, rng);
    let total: f64 = template.iter().map(|(_, w)| w).sum();
    let pool = global_pool();
    let (lo, hi) = params.opcode_len;
    let len = lo + rng.below(hi - lo + 1);
    let mut opcodes = Vec::with_capacity(len);
    for _ in 0..len {
        // 5% uniform noise over the whole vocabulary.
        if rng.bernoulli(0.05) {
            opcodes.push(pool[rng.below(pool.len())].to_string());
            continue;
        }
        let mut u = rng.uniform01() * total;
        let mut chosen = template[template.len() - 1].0;
        for &(op, w) in &template {
            if u < w {
                chosen = op;
                break;
            }
            u -= w;
        }
        opcodes.push(chosen.to_string());
    }
    opcodes
}

/// One generated contract: its events, accounts, and the contract label.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticComponent {
    pub events: Vec<TransactionEvent>,
    pub accounts: Vec<Account>,
    pub labels: Vec<(AccountId, Label)>,
}

/// Generate one contract plus `n_investors` EOAs realizing `scheme`.
pub fn generate_synthetic(
    scheme: SchemeKind,
    n_investors: usize,
    seed: u64,
    params: &SchemeParams,
) -> Result<SyntheticComponent, DataError> {
    if n_investors < 2 {
        return Err(DataError::InvalidParams(format!(
            "need at least 2 investors, got {n_investors}"
        )));
    }
    if params.opcode_len.0 == 0 || params.opcode_len.0 > params.opcode_len.1 {
        return Err(DataError::InvalidParams(format!(
            "bad opcode length range {:?}",
            params.opcode_len
        )));
    }
    let mut rng = Rng::new(seed);
    let contract = AccountId::new(format!("c{seed:016x}"));
    let investor = |j: usize| AccountId::new(format!("c{seed:016x}_i{j:03}"));

    let opcodes = draw_opcodes(scheme, params, &mut rng);
    let mut accounts = vec![Account::contract(
        contract.as_str(),
        opcodes,
        Some(scheme.label()),
    )];
    for j in 0..n_investors {
        accounts.push(Account::eoa(investor(j).as_str()));
    }

    let mut events: Vec<TransactionEvent> = Vec::new();
    let mut t: u64 = 0;
    let mut deposits: Vec<f64> = Vec::with_capacity(n_investors);
    let push_event = |from: &AccountId, to: &AccountId, t: u64, value: f64, out: &mut Vec<TransactionEvent>| {
        out.push(TransactionEvent::new(from.as_str(), to.as_str(), t, value));
    };

    match scheme {
        SchemeKind::ArrayPyramid => {
            let mut frontier = 0usize;
            let mut refunds_at_frontier = 0usize;
            for j in 0..n_investors {
                t += 1 + rng.below(3) as u64;
                let value = rng.uniform(0.5, 5.0);
                deposits.push(value);
                push_event(&investor(j), &contract, t, value, &mut events);
                if j >= 1 {
                    // Refund the earliest investor still waiting.
                    push_event(&contract, &investor(frontier), t, value * 0.5, &mut events);
                    refunds_at_frontier += 1;
                    if refunds_at_frontier >= params.array_refunds {
                        frontier += 1;
                        refunds_at_frontier = 0;
                    }
                }
            }
        }
        SchemeKind::TreePyramid => {
            // parent[j] = None means attached directly under the contract.
            let mut parents: Vec<Option<usize>> = Vec::with_capacity(n_investors);
            for j in 0..n_investors {
                t += 1 + rng.below(3) as u64;
                let value = rng.uniform(0.5, 5.0);
                deposits.push(value);
                push_event(&investor(j), &contract, t, value, &mut events);
                let parent = if j == 0 {
                    None
                } else {
                    let pick = rng.below(j + 1);
                    if pick == 0 { None } else { Some(pick - 1) }
                };
                parents.push(parent);
                // The new investment refunds the ancestor chain.
                let mut ancestor = parent;
                let mut share = value * 0.5;
                while let Some(a) = ancestor {
                    push_event(&contract, &investor(a), t, share, &mut events);
                    share *= 0.5;
                    ancestor = parents[a];
                }
            }
        }
        SchemeKind::Handover => {
            for j in 0..n_investors {
                t += 1 + rng.below(3) as u64;
                let value = rng.uniform(0.5, 5.0);
                deposits.push(value);
                push_event(&investor(j), &contract, t, value, &mut events);
                if j >= 1 {
                    // Pay off the immediately previous investor plus interest.
                    let owed = deposits[j - 1] * (1.0 + params.interest);
                    push_event(&contract, &investor(j - 1), t, owed, &mut events);
                }
            }
        }
        SchemeKind::Waterfall => {
            for j in 0..n_investors {
                t += 1 + rng.below(3) as u64;
                let value = rng.uniform(0.5, 5.0);
                deposits.push(value);
                push_event(&investor(j), &contract, t, value, &mut events);
                // Split the new investment over earlier investors, first to
                // last, until it is exhausted.
                let mut remaining = value;
                for i in 0..j {
                    let share = deposits[i] * params.waterfall_fraction;
                    if share > remaining {
                        break;
                    }
                    push_event(&contract, &investor(i), t, share, &mut events);
                    remaining -= share;
                }
            }
        }
        SchemeKind::Normal => {
            for j in 0..n_investors {
                t += 1 + rng.below(3) as u64;
                let value = rng.uniform(0.1, 5.0);
                push_event(&investor(j), &contract, t, value, &mut events);
                if rng.bernoulli(params.reply_prob) {
                    // Reply to an arbitrary known counterparty.
                    let target = rng.below(j + 1);
                    push_event(&contract, &investor(target), t, rng.uniform(0.1, 2.0), &mut events);
                }
                if rng.bernoulli(0.3) {
                    push_event(&investor(j), &contract, t + 1, rng.uniform(0.1, 2.0), &mut events);
                }
            }
        }
    }

    let labels = vec![(contract, scheme.label())];
    Ok(SyntheticComponent {
        events,
        accounts,
        labels,
    })
}

/// Composition of the whole synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub ponzi_per_scheme: usize,
    pub normal_contracts: usize,
    /// Inclusive range of investors per contract.
    pub investors: (usize, usize),
    /// Size of the shared investor pool; investors from the pool connect
    /// contracts into one transaction network (0 keeps components disjoint).
    pub investor_pool: usize,
    /// Probability that an investor slot is drawn from the shared pool.
    pub pool_prob: f64,
    /// Probability that an investor slot is another contract account,
    /// producing contract-to-contract edges.
    pub contract_prob: f64,
    /// Probability that a pooled investor (or linked contract) comes from
    /// the same class community: Ponzi schemes recycle victim lists and
    /// cross-fund each other, normal apps share ordinary users.
    pub community_bias: f64,
    pub scheme_params: SchemeParams,
}

impl DatasetRecipe {
    /// Acceptance-scale recipe: 200 contracts, 40 Ponzi (10 per scheme).
    pub fn default_recipe() -> Self {
        DatasetRecipe {
            ponzi_per_scheme: 10,
            normal_contracts: 160,
            investors: (24, 36),
            investor_pool: 1500,
            pool_prob: 0.7,
            contract_prob: 0.12,
            community_bias: 0.7,
            scheme_params: SchemeParams::default(),
        }
    }

    /// Small smoke-test recipe: 20 contracts, 8 Ponzi.
    pub fn small() -> Self {
        DatasetRecipe {
            ponzi_per_scheme: 2,
            normal_contracts: 12,
            investors: (6, 10),
            investor_pool: 60,
            pool_prob: 0.7,
            contract_prob: 0.12,
            community_bias: 0.7,
            scheme_params: SchemeParams::default(),
        }
    }

    pub fn contract_count(&self) -> usize {
        self.ponzi_per_scheme * SchemeKind::ALL_PONZI.len() + self.normal_contracts
    }
}

/// In-memory dataset: events plus the explicitly declared accounts
/// (contracts with opcodes and labels; EOAs are implicit in the events).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub events: Vec<TransactionEvent>,
    pub accounts: Vec<Account>,
}

impl Dataset {
    pub fn labeled_contracts(&self) -> Vec<&Account> {
        self.accounts
            .iter()
            .filter(|a| a.is_contract() && a.label.is_some())
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.accounts
            .iter()
            .filter(|a| a.label == Some(Label::Ponzi))
            .count()
    }
}

const STREAM_COMPONENT: u64 = 0x5eed;
const STREAM_OFFSET: u64 = 0x0ff5;
const STREAM_POOL: u64 = 0x9001;

/// Generate a full dataset: Ponzi contracts (per scheme) then normal
/// contracts, each an independent component with a random time offset,
/// merged into one timestamp-ordered event stream.
pub fn generate_dataset(recipe: &DatasetRecipe, seed: u64) -> Result<Dataset, DataError> {
    let mut schemes: Vec<SchemeKind> = Vec::with_capacity(recipe.contract_count());
    for scheme in SchemeKind::ALL_PONZI {
        schemes.extend(std::iter::repeat(scheme).take(recipe.ponzi_per_scheme));
    }
    schemes.extend(std::iter::repeat(SchemeKind::Normal).take(recipe.normal_contracts));

    let mut offset_rng = Rng::new(Rng::derive_seed(seed, STREAM_OFFSET));
    let mut events: Vec<(u64, usize, TransactionEvent)> = Vec::new();
    let mut accounts: Vec<Account> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let (inv_lo, inv_hi) = recipe.investors;
    if inv_lo < 2 || inv_lo > inv_hi {
        return Err(DataError::InvalidParams(format!(
            "bad investor range {:?}",
            recipe.investors
        )));
    }

    if !(0.0..=1.0).contains(&recipe.pool_prob) {
        return Err(DataError::InvalidParams(format!(
            "pool_prob must be in [0, 1], got {}",
            recipe.pool_prob
        )));
    }
    let mut pool_used: BTreeSet<usize> = BTreeSet::new();
    let mut pool_rng = Rng::new(Rng::derive_seed(seed, STREAM_POOL));
    let component_seeds: Vec<u64> = (0..schemes.len())
        .map(|idx| Rng::derive_seed(Rng::derive_seed(seed, STREAM_COMPONENT), idx as u64))
        .collect();
    let contract_ids: Vec<AccountId> = component_seeds
        .iter()
        .map(|s| AccountId::new(format!("c{s:016x}")))
        .collect();

    for (idx, &scheme) in schemes.iter().enumerate() {
        let component_seed = component_seeds[idx];
        let n_investors = inv_lo + offset_rng.below(inv_hi - inv_lo + 1);
        let component = generate_synthetic(scheme, n_investors, component_seed, &recipe.scheme_params)?;
        let offset = offset_rng.below(5000) as u64;

        // Alias a share of this component's investors onto the common pool
        // or onto other contracts, wiring everything into one network.
        // Pool halves act as communities: Ponzi schemes draw mostly from the
        // lower half, normal contracts from the upper half.
        let mut alias: BTreeMap<AccountId, AccountId> = BTreeMap::new();
        if recipe.investor_pool > 0 {
            let is_ponzi = scheme.label() == Label::Ponzi;
            let half = (recipe.investor_pool / 2).max(1);
            for account in &component.accounts {
                if account.is_contract() {
                    continue;
                }
                if pool_rng.bernoulli(recipe.contract_prob) && contract_ids.len() > 1 {
                    let same_class = pool_rng.bernoulli(recipe.community_bias);
                    let candidates: Vec<usize> = (0..contract_ids.len())
                        .filter(|&i| {
                            i != idx && (schemes[i].label() == Label::Ponzi) == (is_ponzi == same_class)
                        })
                        .collect();
                    if !candidates.is_empty() {
                        let pick = candidates[pool_rng.below(candidates.len())];
                        alias.insert(account.id.clone(), contract_ids[pick].clone());
                        continue;
                    }
                }
                if pool_rng.bernoulli(recipe.pool_prob) {
                    let own_half = pool_rng.bernoulli(recipe.community_bias);
                    let slot = if own_half == is_ponzi {
                        pool_rng.below(half)
                    } else {
                        half + pool_rng.below(recipe.investor_pool - half)
                    };
                    pool_used.insert(slot);
                    alias.insert(account.id.clone(), AccountId::new(format!("inv{slot:05}")));
                }
            }
        }

        for account in component.accounts {
            if alias.contains_key(&account.id) {
                continue;
            }
            if !seen.insert(account.id.to_string()) {
                return Err(DataError::InvalidParams(format!(
                    "component seed collision on {}",
                    account.id
                )));
            }
            accounts.push(account);
        }
        for (order, mut event) in component.events.into_iter().enumerate() {
            event.timestamp += offset;
            if let Some(id) = alias.get(&event.from) {
                event.from = id.clone();
            }
            if let Some(id) = alias.get(&event.to) {
                event.to = id.clone();
            }
            events.push((event.timestamp, idx * 1_000_000 + order, event));
        }
    }

    for slot in pool_used {
        accounts.push(Account::eoa(format!("inv{slot:05}")));
    }

    // Merge by timestamp; per-component order breaks ties deterministically.
    events.sort_by_key(|&(t, order, _)| (t, order));
    Ok(Dataset {
        events: events.into_iter().map(|(_, _, e)| e).collect(),
        accounts,
    })
}

/// Paths (relative to the dataset directory) and summary counts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub transactions: String,
    pub opcodes: String,
    pub labels: String,
    pub accounts: usize,
    pub events: usize,
    pub positives: usize,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write the dataset files and manifest into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, seed: u64) -> Result<DatasetManifest, DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut tx = String::from(TRANSACTIONS_HEADER);
    tx.push('\n');
    for event in &dataset.events {
        writeln!(
            tx,
            "{},{},{},{}",
            event.from, event.to, event.timestamp, event.value
        )
        .expect("string write");
    }
    write(&dir.join("transactions.csv"), &tx)?;

    let mut contracts: Vec<&Account> = dataset.accounts.iter().filter(|a| a.is_contract()).collect();
    contracts.sort_by(|a, b| a.id.cmp(&b.id));
    let mut ops = String::new();
    for account in &contracts {
        writeln!(ops, "{}\t{}", account.id, account.opcodes.join(" ")).expect("string write");
    }
    write(&dir.join("opcodes.tsv"), &ops)?;

    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    for account in &contracts {
        if let Some(label) = account.label {
            let bit = match label {
                Label::Normal => 0,
                Label::Ponzi => 1,
            };
            writeln!(labels, "{},{}", account.id, bit).expect("string write");
        }
    }
    write(&dir.join("labels.csv"), &labels)?;

    let manifest = DatasetManifest {
        transactions: "transactions.csv".to_string(),
        opcodes: "opcodes.tsv".to_string(),
        labels: "labels.csv".to_string(),
        accounts: dataset.accounts.len(),
        events: dataset.events.len(),
        positives: dataset.positives(),
        seed,
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST_FILE), &format!("{body}\n"))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let body = read(&path)?;
    serde_json::from_str(&body).map_err(|e| DataError::Manifest(e.to_string()))
}

/// Load a dataset directory through its manifest. The returned accounts are
/// the declared contracts; EOAs are registered when the graph is built.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest), DataError> {
    let manifest = load_manifest(dir)?;
    let events = load_transactions(&dir.join(&manifest.transactions))?;
    let accounts = load_opcodes_and_labels(&dir.join(&manifest.opcodes), &dir.join(&manifest.labels))?;
    if events.len() != manifest.events {
        return Err(DataError::Manifest(format!(
            "manifest declares {} events, files contain {}",
            manifest.events,
            events.len()
        )));
    }
    Ok((Dataset { events, accounts }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn parses_a_transaction_row() {
        let event = parse_transaction_row("0xa,0xb,1609459200,1.5").unwrap();
        assert_eq!(event.from, AccountId::new("0xa"));
        assert_eq!(event.to, AccountId::new("0xb"));
        assert_eq!(event.timestamp, 1609459200);
        assert_eq!(event.value, 1.5);
    }

    #[test]
    fn empty_file_after_header_loads_no_events() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("transactions.csv");
        fs::write(&path, "from,to,timestamp,value\n").unwrap();
        let events = load_transactions(&path).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn bad_timestamp_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("transactions.csv");
        fs::write(&path, "from,to,timestamp,value\n0xa,0xb,notatime,1.0\n").unwrap();
        match load_transactions(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn lenient_mode_skips_and_counts() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("transactions.csv");
        fs::write(
            &path,
            "from,to,timestamp,value\n0xa,0xb,1,1.0\nbadrow\n0xb,0xa,2,0.5\n",
        )
        .unwrap();
        let (events, skipped) = load_transactions_with_mode(&path, ParseMode::Lenient).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn opcodes_and_labels_load_together() {
        let dir = tempdir().unwrap();
        let ops = dir.path().join("opcodes.tsv");
        let labels = dir.path().join("labels.csv");
        fs::write(&ops, "0xc\tPUSH1 MSTORE STOP\n").unwrap();
        fs::write(&labels, "account_id,label\n0xc,1\n").unwrap();
        let accounts = load_opcodes_and_labels(&ops, &labels).unwrap();
        assert_eq!(accounts.len(), 1);
        assert_eq!(accounts[0].opcodes, vec!["PUSH1", "MSTORE", "STOP"]);
        assert_eq!(accounts[0].label, Some(Label::Ponzi));
    }

    #[test]
    fn duplicate_contract_is_rejected() {
        let dir = tempdir().unwrap();
        let ops = dir.path().join("opcodes.tsv");
        let labels = dir.path().join("labels.csv");
        fs::write(&ops, "0xc\tPUSH1\n0xc\tSTOP\n").unwrap();
        fs::write(&labels, "account_id,label\n").unwrap();
        assert!(matches!(
            load_opcodes_and_labels(&ops, &labels),
            Err(DataError::DuplicateAccount { .. })
        ));
    }

    #[test]
    fn label_for_unknown_account_is_rejected() {
        let dir = tempdir().unwrap();
        let ops = dir.path().join("opcodes.tsv");
        let labels = dir.path().join("labels.csv");
        fs::write(&ops, "0xc\tPUSH1\n").unwrap();
        fs::write(&labels, "account_id,label\n0xmissing,1\n").unwrap();
        assert!(matches!(
            load_opcodes_and_labels(&ops, &labels),
            Err(DataError::UnknownLabelTarget(_))
        ));
    }

    #[test]
    fn handover_pays_exactly_the_previous_investor() {
        let params = SchemeParams::default();
        let component = generate_synthetic(SchemeKind::Handover, 3, 99, &params).unwrap();
        let contract = &component.labels[0].0;
        let payouts: Vec<&TransactionEvent> = component
            .events
            .iter()
            .filter(|e| &e.from == contract)
            .collect();
        assert_eq!(payouts.len(), 2);
        assert!(payouts[0].to.as_str().ends_with("_i000"));
        assert!(payouts[1].to.as_str().ends_with("_i001"));
        // Payout equals the previous deposit plus fixed interest.
        let deposits: Vec<&TransactionEvent> = component
            .events
            .iter()
            .filter(|e| &e.to == contract)
            .collect();
        assert!((payouts[0].value - deposits[0].value * 1.1).abs() < 1e-12);
    }

    #[test]
    fn array_payouts_are_ordered_by_arrival() {
        let component =
            generate_synthetic(SchemeKind::ArrayPyramid, 12, 7, &SchemeParams::default()).unwrap();
        let contract = &component.labels[0].0;
        let mut last = 0usize;
        let mut saw_payout = false;
        for event in component.events.iter().filter(|e| &e.from == contract) {
            saw_payout = true;
            let idx: usize = event.to.as_str().rsplit("_i").next().unwrap().parse().unwrap();
            assert!(idx >= last, "payout order regressed: {idx} after {last}");
            last = idx;
        }
        assert!(saw_payout);
    }

    #[test]
    fn tree_payout_bursts_walk_up_to_earlier_investors() {
        let component =
            generate_synthetic(SchemeKind::TreePyramid, 10, 5, &SchemeParams::default()).unwrap();
        let contract = &component.labels[0].0;
        let mut joined = 0usize;
        let mut burst_prev: Option<usize> = None;
        for event in &component.events {
            if &event.to == contract {
                joined += 1;
                burst_prev = None;
            } else {
                let idx: usize = event.to.as_str().rsplit("_i").next().unwrap().parse().unwrap();
                assert!(idx + 1 < joined, "payout to a not-yet-joined investor");
                if let Some(prev) = burst_prev {
                    assert!(idx < prev, "ancestor chain must strictly ascend the tree");
                }
                burst_prev = Some(idx);
            }
        }
    }

    #[test]
    fn waterfall_bursts_start_at_the_first_investor() {
        let component =
            generate_synthetic(SchemeKind::Waterfall, 8, 3, &SchemeParams::default()).unwrap();
        let contract = &component.labels[0].0;
        let mut burst_next = 0usize;
        for event in &component.events {
            if &event.to == contract {
                burst_next = 0;
            } else {
                let idx: usize = event.to.as_str().rsplit("_i").next().unwrap().parse().unwrap();
                assert_eq!(idx, burst_next, "waterfall must pay in arrival order from the first");
                burst_next += 1;
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let params = SchemeParams::default();
        let a = generate_synthetic(SchemeKind::TreePyramid, 9, 1234, &params).unwrap();
        let b = generate_synthetic(SchemeKind::TreePyramid, 9, 1234, &params).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(SchemeKind::TreePyramid, 9, 1235, &params).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn every_event_references_generated_accounts() {
        let dataset = generate_dataset(&DatasetRecipe::small(), 7).unwrap();
        let known: BTreeSet<&str> = dataset.accounts.iter().map(|a| a.id.as_str()).collect();
        for event in &dataset.events {
            assert!(known.contains(event.from.as_str()));
            assert!(known.contains(event.to.as_str()));
        }
        // Labels cover exactly the contract accounts.
        for account in &dataset.accounts {
            assert_eq!(account.is_contract(), account.label.is_some());
        }
    }

    #[test]
    fn ponzi_components_have_at_least_as_many_distinct_payers_as_payees() {
        // Every payout target previously deposited, so within one generated
        // component the payer set covers the payee set.
        for (i, scheme) in SchemeKind::ALL_PONZI.into_iter().enumerate() {
            let component =
                generate_synthetic(scheme, 12, 100 + i as u64, &SchemeParams::default()).unwrap();
            let contract = &component.labels[0].0;
            let payers: BTreeSet<&str> = component
                .events
                .iter()
                .filter(|e| &e.to == contract)
                .map(|e| e.from.as_str())
                .collect();
            let payees: BTreeSet<&str> = component
                .events
                .iter()
                .filter(|e| &e.from == contract)
                .map(|e| e.to.as_str())
                .collect();
            assert!(payees.is_subset(&payers), "{scheme:?}");
            assert!(payers.len() >= payees.len(), "{scheme:?}");
        }
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dataset = generate_dataset(&DatasetRecipe::small(), 42).unwrap();
        let dir = tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &dataset, 42).unwrap();
        let (loaded, loaded_manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, loaded_manifest);
        assert_eq!(dataset.events, loaded.events);
        // Loaded accounts are the contracts, sorted by id.
        let mut contracts: Vec<Account> = dataset
            .accounts
            .iter()
            .filter(|a| a.is_contract())
            .cloned()
            .collect();
        contracts.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(contracts, loaded.accounts);
    }

    #[test]
    fn recipe_counts_add_up() {
        let dataset = generate_dataset(&DatasetRecipe::default_recipe(), 7).unwrap();
        let contracts = dataset.accounts.iter().filter(|a| a.is_contract()).count();
        assert_eq!(contracts, 200);
        assert_eq!(dataset.positives(), 40);
    }

    #[test]
    fn too_few_investors_is_rejected() {
        assert!(matches!(
            generate_synthetic(SchemeKind::Handover, 1, 1, &SchemeParams::default()),
            Err(DataError::InvalidParams(_))
        ));
    }
}
