//! Registry server: pseudonym lookup with replay detection, provisioning and
//! billing.
//!
//! The registry is shared by every terminal. Records live behind individual
//! mutexes so the check-then-update on the stored nonce is atomic per
//! vehicle while lookups for different vehicles proceed independently.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{encrypt_block, Block, Nonce, SecretKey, Timestamp};
use crate::messages::{LookupResponse, SessionReport};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate vehicle: pseudonym {pseudonym} already registered")]
    DuplicateVehicle { pseudonym: Block },
    #[error("duplicate vehicle: id {id_a} already registered")]
    DuplicateIdentity { id_a: Block },
    #[error("unknown vehicle {id_a}")]
    UnknownVehicle { id_a: Block },
    #[error("invalid session report: end {t_end} precedes start {t_start}")]
    InvalidReport {
        t_start: Timestamp,
        t_end: Timestamp,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NotifyChannel {
    Sms,
    Email,
}

impl fmt::Display for NotifyChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NotifyChannel::Sms => "sms",
            NotifyChannel::Email => "email",
        })
    }
}

impl FromStr for NotifyChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sms" => Ok(NotifyChannel::Sms),
            "email" => Ok(NotifyChannel::Email),
            other => Err(format!("unknown notify channel {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id_a: Block,
    pub k_a: SecretKey,
    /// Always E(id_a, k_a).
    pub pseudonym: Block,
    pub last_n_a: Option<Nonce>,
    /// Prepaid balance in minor currency units.
    pub balance: u64,
    pub owner_contact: String,
    pub notify_channel: NotifyChannel,
}

impl VehicleRecord {
    pub fn to_line(&self) -> String {
        format!(
            "vehicle {} {} {} {} {} {} {}",
            self.id_a,
            self.k_a,
            self.pseudonym,
            self.last_n_a
                .map_or_else(|| "-".to_string(), |n| n.to_hex()),
            self.balance,
            self.notify_channel,
            self.owner_contact
        )
    }

    pub fn parse_line(line: &str) -> Result<VehicleRecord, String> {
        let fields: Vec<&str> = line.splitn(8, ' ').collect();
        if fields.len() != 8 || fields[0] != "vehicle" {
            return Err("expected `vehicle <id> <key> <pseudonym> <last_n_a|-> <balance> <channel> <contact>`".into());
        }
        let id_a = Block::from_hex(fields[1]).map_err(|e| format!("id: {e}"))?;
        let k_a = SecretKey::from_hex(fields[2]).map_err(|e| format!("key: {e}"))?;
        let pseudonym = Block::from_hex(fields[3]).map_err(|e| format!("pseudonym: {e}"))?;
        let last_n_a = match fields[4] {
            "-" => None,
            h => Some(Nonce::from_hex(h).map_err(|e| format!("last nonce: {e}"))?),
        };
        let balance = fields[5]
            .parse()
            .map_err(|e| format!("balance {:?}: {e}", fields[5]))?;
        let notify_channel = fields[6].parse()?;
        if pseudonym != encrypt_block(&id_a, &k_a) {
            return Err(format!("pseudonym {pseudonym} does not match id and key"));
        }
        Ok(VehicleRecord {
            id_a,
            k_a,
            pseudonym,
            last_n_a,
            balance,
            owner_contact: fields[7].to_string(),
            notify_channel,
        })
    }
}

/// Owner notification. Rendered and stored, never sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub channel: NotifyChannel,
    pub contact: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invoice {
    pub id_a: Block,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub duration_ms: u64,
    pub amount: u64,
    /// The balance could not cover `amount`; it was drained to zero.
    pub underfunded: bool,
    pub notification: Notification,
}

impl Invoice {
    pub fn to_line(&self) -> String {
        format!(
            "invoice {} {} {} {} {} {} {}",
            self.id_a,
            self.t_start,
            self.t_end,
            self.duration_ms,
            self.amount,
            self.notification.channel,
            self.notification.contact
        )
    }
}

/// Flat per-minute rate in minor currency units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tariff(pub u64);

impl Tariff {
    /// ceil(duration_ms * rate / 60_000)
    pub fn amount_for(self, duration_ms: u64) -> u64 {
        let num = duration_ms as u128 * self.0 as u128;
        num.div_ceil(60_000).min(u64::MAX as u128) as u64
    }

    /// Longest duration in ms whose charge stays within `balance`.
    pub fn affordable_ms(self, balance: u64) -> u64 {
        if self.0 == 0 {
            return u64::MAX;
        }
        let ms = balance as u128 * 60_000 / self.0 as u128;
        ms.min(u64::MAX as u128) as u64
    }
}

/// How much nonce history each record keeps for replay detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReplayPolicy {
    /// Compare against the most recent nonce only. An older capture replayed
    /// after a newer session is accepted.
    #[default]
    LastNonce,
    /// Reject any nonce ever seen for the vehicle. In-memory only; the
    /// registry file still stores just the last nonce.
    Strict,
}

struct Entry {
    order: u64,
    record: VehicleRecord,
    seen: BTreeSet<Nonce>,
}

#[derive(Default)]
struct Index {
    by_pseudonym: HashMap<Block, Arc<Mutex<Entry>>>,
    by_id: HashMap<Block, Block>,
    next_order: u64,
}

#[derive(Debug, Clone)]
struct Persistence {
    registry: PathBuf,
    invoices: Option<PathBuf>,
}

#[derive(Default)]
pub struct Registry {
    index: RwLock<Index>,
    invoices: Mutex<Vec<Invoice>>,
    policy: ReplayPolicy,
    persistence: Option<Persistence>,
    io_lock: Mutex<()>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("vehicles", &self.len())
            .field("policy", &self.policy)
            .finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: ReplayPolicy) -> Self {
        Registry {
            policy,
            ..Self::default()
        }
    }

    pub fn policy(&self) -> ReplayPolicy {
        self.policy
    }

    /// Rewrites `registry` (and `invoices`, if given) after every mutation.
    pub fn persist_to(mut self, registry: impl Into<PathBuf>, invoices: Option<PathBuf>) -> Self {
        self.persistence = Some(Persistence {
            registry: registry.into(),
            invoices,
        });
        self
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().by_pseudonym.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn register_vehicle(
        &self,
        id_a: Block,
        k_a: SecretKey,
        balance: u64,
        owner_contact: impl Into<String>,
        notify_channel: NotifyChannel,
    ) -> Result<VehicleRecord, RegistryError> {
        let record = VehicleRecord {
            id_a,
            k_a,
            pseudonym: encrypt_block(&id_a, &k_a),
            last_n_a: None,
            balance,
            owner_contact: owner_contact.into(),
            notify_channel,
        };
        self.insert(record.clone())?;
        self.persist()?;
        Ok(record)
    }

    fn insert(&self, record: VehicleRecord) -> Result<(), RegistryError> {
        let mut index = self.index.write().unwrap();
        if index.by_pseudonym.contains_key(&record.pseudonym) {
            return Err(RegistryError::DuplicateVehicle {
                pseudonym: record.pseudonym,
            });
        }
        if index.by_id.contains_key(&record.id_a) {
            return Err(RegistryError::DuplicateIdentity { id_a: record.id_a });
        }
        let order = index.next_order;
        index.next_order += 1;
        index.by_id.insert(record.id_a, record.pseudonym);
        let seen = record.last_n_a.into_iter().collect();
        index.by_pseudonym.insert(
            record.pseudonym,
            Arc::new(Mutex::new(Entry {
                order,
                record,
                seen,
            })),
        );
        Ok(())
    }

    fn entry_by_pseudonym(&self, m5: &Block) -> Option<Arc<Mutex<Entry>>> {
        self.index.read().unwrap().by_pseudonym.get(m5).cloned()
    }

    fn entry_by_id(&self, id_a: &Block) -> Option<Arc<Mutex<Entry>>> {
        let index = self.index.read().unwrap();
        index
            .by_id
            .get(id_a)
            .and_then(|p| index.by_pseudonym.get(p))
            .cloned()
    }

    pub fn record(&self, id_a: &Block) -> Option<VehicleRecord> {
        self.entry_by_id(id_a)
            .map(|e| e.lock().unwrap().record.clone())
    }

    /// All records in registration order.
    pub fn records(&self) -> Vec<VehicleRecord> {
        let entries: Vec<_> = self
            .index
            .read()
            .unwrap()
            .by_pseudonym
            .values()
            .cloned()
            .collect();
        let mut rows: Vec<(u64, VehicleRecord)> = entries
            .iter()
            .map(|e| {
                let e = e.lock().unwrap();
                (e.order, e.record.clone())
            })
            .collect();
        rows.sort_by_key(|(order, _)| *order);
        rows.into_iter().map(|(_, r)| r).collect()
    }

    pub fn invoices(&self) -> Vec<Invoice> {
        self.invoices.lock().unwrap().clone()
    }

    /// Finds the record whose pseudonym is `m5` and applies the nonce rule:
    /// a nonce equal to the stored one is a replay, anything else replaces it.
    pub fn lookup_and_verify(&self, m5: &Block, n_a: &Nonce) -> LookupResponse {
        let Some(entry) = self.entry_by_pseudonym(m5) else {
            return LookupResponse::NotFound;
        };
        let response = {
            let mut entry = entry.lock().unwrap();
            let replay = match self.policy {
                ReplayPolicy::LastNonce => entry.record.last_n_a == Some(*n_a),
                ReplayPolicy::Strict => entry.seen.contains(n_a),
            };
            if replay {
                return LookupResponse::ReplayDetected;
            }
            entry.record.last_n_a = Some(*n_a);
            if self.policy == ReplayPolicy::Strict {
                entry.seen.insert(*n_a);
            }
            LookupResponse::Success {
                id_a: entry.record.id_a,
                k_a: entry.record.k_a,
            }
        };
        // The lookup outcome stands even if the snapshot cannot be written.
        let _ = self.persist();
        response
    }

    pub fn bill_session(
        &self,
        report: &SessionReport,
        tariff: Tariff,
    ) -> Result<Invoice, RegistryError> {
        if report.t_end < report.t_start {
            return Err(RegistryError::InvalidReport {
                t_start: report.t_start,
                t_end: report.t_end,
            });
        }
        let entry = self
            .entry_by_id(&report.id_a)
            .ok_or(RegistryError::UnknownVehicle { id_a: report.id_a })?;
        let duration_ms = report.t_end.0 - report.t_start.0;
        let amount = tariff.amount_for(duration_ms);
        let invoice = {
            let mut entry = entry.lock().unwrap();
            let record = &mut entry.record;
            let underfunded = amount > record.balance;
            record.balance = record.balance.saturating_sub(amount);
            let text = format!(
                "Charging session {}..{} ({} ms): charged {}{}, remaining balance {}.",
                report.t_start,
                report.t_end,
                duration_ms,
                amount,
                if underfunded {
                    " (balance insufficient)"
                } else {
                    ""
                },
                record.balance
            );
            Invoice {
                id_a: report.id_a,
                t_start: report.t_start,
                t_end: report.t_end,
                duration_ms,
                amount,
                underfunded,
                notification: Notification {
                    channel: record.notify_channel,
                    contact: record.owner_contact.clone(),
                    text,
                },
            }
        };
        self.invoices.lock().unwrap().push(invoice.clone());
        self.persist()?;
        Ok(invoice)
    }

    pub fn render_registry(&self) -> String {
        self.records().iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn render_invoices(&self) -> String {
        self.invoices().iter().map(|i| i.to_line() + "\n").collect()
    }

    /// Parses registry lines. Blank lines and `#` comments are skipped.
    pub fn parse(
        text: &str,
        origin: &str,
        policy: ReplayPolicy,
    ) -> Result<Registry, RegistryError> {
        let registry = Registry::with_policy(policy);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let record =
                VehicleRecord::parse_line(line).map_err(|message| RegistryError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message,
                })?;
            registry.insert(record)?;
        }
        Ok(registry)
    }

    pub fn load(path: &Path, policy: ReplayPolicy) -> Result<Registry, RegistryError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string(), policy)
    }

    fn persist(&self) -> Result<(), RegistryError> {
        let Some(p) = &self.persistence else {
            return Ok(());
        };
        let _guard = self.io_lock.lock().unwrap();
        write_atomic(&p.registry, &self.render_registry())?;
        if let Some(inv) = &p.invoices {
            write_atomic(inv, &self.render_invoices())?;
        }
        Ok(())
    }
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
