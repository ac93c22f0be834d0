use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::cold::{ColdFile, ColdLoc};
use super::{Result, TensorKey, TierConfig, TierError, TierTag};
use crate::clock::SimClock;

/// Handle for a queued prefetch. `Ticket(0)` means nothing needed moving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Ticket(pub u64);

impl Ticket {
    pub const NOOP: Ticket = Ticket(0);
}

/// Public view of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreEntry {
    pub key: TensorKey,
    pub tier: TierTag,
    pub bytes: u64,
    pub dirty: bool,
    pub pinned: bool,
    pub last_touch_step: u64,
    /// Target tier and completion flag of an in-flight prefetch.
    pub staged_copy: Option<(TierTag, bool)>,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounters {
    pub io_writes: u64,
    pub io_write_bytes: u64,
    pub io_reads: u64,
    pub io_read_bytes: u64,
    pub write_skips: u64,
    pub evictions: u64,
    pub transfers: u64,
    pub coalesced_prefetches: u64,
    pub installed_transfers: u64,
    pub discarded_transfers: u64,
    pub failed_transfers: u64,
}

struct Entry {
    len: u64,
    tier: TierTag,
    data: Option<Arc<Vec<u8>>>,
    dirty: bool,
    pinned: bool,
    touch_seq: u64,
    touch_step: u64,
    cold: Option<ColdLoc>,
    version: u64,
}

enum Source {
    Mem(Arc<Vec<u8>>),
    Cold(ColdLoc),
}

struct TransferJob {
    ticket: u64,
    key: TensorKey,
    source: Source,
    delay_us: u64,
}

struct Transfer {
    key: TensorKey,
    to: TierTag,
    version: u64,
    ready_at_us: u64,
    payload: Option<Result<Arc<Vec<u8>>>>,
}

struct State {
    entries: HashMap<TensorKey, Entry>,
    resident: [u64; 2],
    reserved: [u64; 2],
    capacity: [u64; 2],
    seq: u64,
    step: u64,
    version: u64,
    next_ticket: u64,
    inflight: BTreeMap<u64, Transfer>,
    by_key: HashMap<TensorKey, u64>,
    counters: StoreCounters,
}

struct Shared {
    state: Mutex<State>,
    arrived: Condvar,
    cold: Mutex<ColdFile>,
    cfg: TierConfig,
    clock: SimClock,
}

/// Thread-safe three-tier store. Metadata mutations are serialized behind
/// one lock; Cold file I/O is serialized behind a second one.
pub struct TierStore {
    shared: Arc<Shared>,
    tx: Option<Sender<TransferJob>>,
    worker: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for TierStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TierStore").field("cfg", &self.shared.cfg).finish()
    }
}

impl State {
    fn touch(&mut self, key: &TensorKey) {
        self.seq += 1;
        let (seq, step) = (self.seq, self.step);
        if let Some(e) = self.entries.get_mut(key) {
            e.touch_seq = seq;
            e.touch_step = step;
        }
    }

    fn unaccount(&mut self, tier: TierTag, len: u64) {
        if let Some(s) = tier.slot() {
            self.resident[s] -= len;
        }
    }

    fn account(&mut self, tier: TierTag, len: u64) {
        if let Some(s) = tier.slot() {
            self.resident[s] += len;
        }
    }

    /// Writes the entry to Cold unless an up-to-date copy already exists.
    fn persist(&mut self, cold: &mut ColdFile, key: &TensorKey) -> Result<bool> {
        let e = self.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if !e.dirty && e.cold.is_some() {
            self.counters.write_skips += 1;
            return Ok(false);
        }
        let data = e.data.clone().expect("resident entry holds data");
        let loc = cold.append(key, &data)?;
        let e = self.entries.get_mut(key).unwrap();
        e.cold = Some(loc);
        e.dirty = false;
        self.counters.io_writes += 1;
        self.counters.io_write_bytes += loc.len;
        Ok(true)
    }

    /// Evicts least-recently-touched unpinned entries from `tier` until
    /// `need` more bytes fit. Entries in `protect` are never chosen.
    fn ensure_room(
        &mut self,
        cold: &mut ColdFile,
        tier: TierTag,
        need: u64,
        protect: &[TensorKey],
    ) -> Result<()> {
        let s = tier.slot().expect("Cold is unbounded");
        let cap = self.capacity[s];
        if need + self.reserved[s] > cap {
            return Err(TierError::CapacityExhausted {
                tier,
                needed: need,
                available: cap.saturating_sub(self.reserved[s]),
            });
        }
        while self.resident[s] + self.reserved[s] + need > cap {
            let victim = self
                .entries
                .iter()
                .filter(|(k, e)| e.tier == tier && !e.pinned && !protect.contains(k))
                .min_by_key(|(k, e)| (e.touch_seq, **k))
                .map(|(k, _)| *k);
            let Some(victim) = victim else {
                return Err(TierError::CapacityExhausted {
                    tier,
                    needed: need,
                    available: cap.saturating_sub(self.resident[s] + self.reserved[s]),
                });
            };
            self.move_down(cold, &victim, tier.colder().unwrap(), protect)?;
            self.counters.evictions += 1;
        }
        Ok(())
    }

    /// Re-accounting an entry after a failed move can overflow its tier when
    /// cascaded evictions took the space it vacated; pushes others down to
    /// restore the bound.
    fn rebalance(&mut self, cold: &mut ColdFile, tier: TierTag, keep: &TensorKey) -> Result<()> {
        if let Some(s) = tier.slot() {
            if self.resident[s] + self.reserved[s] > self.capacity[s] {
                self.ensure_room(cold, tier, 0, &[*keep])?;
            }
        }
        Ok(())
    }

    /// Moves an entry one or two tiers colder, cascading evictions.
    fn move_down(
        &mut self,
        cold: &mut ColdFile,
        key: &TensorKey,
        to: TierTag,
        protect: &[TensorKey],
    ) -> Result<()> {
        let (from, len) = {
            let e = &self.entries[key];
            (e.tier, e.len)
        };
        match to {
            TierTag::Host => {
                self.unaccount(from, len);
                let mut guard = protect.to_vec();
                guard.push(*key);
                if let Err(e) = self.ensure_room(cold, TierTag::Host, len, &guard) {
                    self.account(from, len);
                    return Err(e);
                }
                self.account(TierTag::Host, len);
                self.entries.get_mut(key).unwrap().tier = TierTag::Host;
            }
            TierTag::Cold => {
                self.persist(cold, key)?;
                self.unaccount(from, len);
                let e = self.entries.get_mut(key).unwrap();
                e.tier = TierTag::Cold;
                e.data = None;
            }
            TierTag::Hot => unreachable!("Hot is never a demotion target"),
        }
        Ok(())
    }

    /// Moves an entry hotter. `staged` carries already-transferred bytes;
    /// otherwise Cold entries are read synchronously.
    fn move_up(
        &mut self,
        cold: &mut ColdFile,
        key: &TensorKey,
        to: TierTag,
        staged: Option<Arc<Vec<u8>>>,
    ) -> Result<()> {
        let (from, len, loc) = {
            let e = &self.entries[key];
            (e.tier, e.len, e.cold)
        };
        let data = match (staged, from) {
            (Some(d), _) => d,
            (None, TierTag::Cold) => {
                let loc = loc.expect("Cold entry has a file location");
                let bytes = cold.read(key, &loc)?;
                self.counters.io_reads += 1;
                self.counters.io_read_bytes += len;
                Arc::new(bytes)
            }
            (None, _) => self.entries[key].data.clone().unwrap(),
        };
        self.unaccount(from, len);
        if let Err(e) = self.ensure_room(cold, to, len, &[*key]) {
            self.account(from, len);
            self.rebalance(cold, from, key)?;
            return Err(e);
        }
        self.account(to, len);
        let e = self.entries.get_mut(key).unwrap();
        e.tier = to;
        e.data = Some(data);
        if from == TierTag::Cold {
            e.dirty = false;
        }
        Ok(())
    }

    fn view(&self, key: &TensorKey, e: &Entry) -> StoreEntry {
        let staged_copy = self.by_key.get(key).and_then(|t| {
            self.inflight
                .get(t)
                .map(|tr| (tr.to, tr.payload.is_some()))
        });
        StoreEntry {
            key: *key,
            tier: e.tier,
            bytes: e.len,
            dirty: e.dirty,
            pinned: e.pinned,
            last_touch_step: e.touch_step,
            staged_copy,
            version: e.version,
        }
    }

    fn install(&mut self, cold: &mut ColdFile, t: Transfer) -> bool {
        let current = match self.entries.get(&t.key) {
            Some(e) if e.version == t.version && e.tier > t.to => true,
            _ => false,
        };
        if !current {
            self.counters.discarded_transfers += 1;
            return false;
        }
        match t.payload {
            Some(Ok(data)) => {
                if self.move_up(cold, &t.key, t.to, Some(data)).is_ok() {
                    self.counters.installed_transfers += 1;
                    true
                } else {
                    self.counters.discarded_transfers += 1;
                    false
                }
            }
            _ => {
                self.counters.failed_transfers += 1;
                false
            }
        }
    }
}

impl TierStore {
    pub fn new(cfg: TierConfig, clock: SimClock) -> Result<Self> {
        let cold = ColdFile::create(cfg.cold_path.as_deref())?;
        let state = State {
            entries: HashMap::new(),
            resident: [0; 2],
            reserved: [0; 2],
            capacity: [cfg.hot_capacity_bytes, cfg.host_capacity_bytes],
            seq: 0,
            step: 0,
            version: 0,
            next_ticket: 1,
            inflight: BTreeMap::new(),
            by_key: HashMap::new(),
            counters: StoreCounters::default(),
        };
        let shared = Arc::new(Shared {
            state: Mutex::new(state),
            arrived: Condvar::new(),
            cold: Mutex::new(cold),
            cfg,
            clock,
        });
        let (tx, rx) = unbounded::<TransferJob>();
        let worker_shared = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("tier-transfer".into())
            .spawn(move || {
                for job in rx {
                    if !worker_shared.clock.is_virtual() && job.delay_us > 0 {
                        std::thread::sleep(Duration::from_micros(job.delay_us));
                    }
                    let (payload, read_bytes) = match job.source {
                        Source::Mem(d) => (Ok(Arc::new(d.as_ref().clone())), None),
                        Source::Cold(loc) => (
                            worker_shared.cold.lock().read(&job.key, &loc).map(Arc::new),
                            Some(loc.len),
                        ),
                    };
                    let mut st = worker_shared.state.lock();
                    if let Some(n) = read_bytes {
                        st.counters.io_reads += 1;
                        st.counters.io_read_bytes += n;
                    }
                    if let Some(t) = st.inflight.get_mut(&job.ticket) {
                        t.payload = Some(payload);
                    }
                    drop(st);
                    worker_shared.arrived.notify_all();
                }
            })?;
        Ok(Self {
            shared,
            tx: Some(tx),
            worker: Some(worker),
        })
    }

    pub fn config(&self) -> &TierConfig {
        &self.shared.cfg
    }

    pub fn clock(&self) -> &SimClock {
        &self.shared.clock
    }

    /// Step recorded as `last_touch_step` by subsequent accesses.
    pub fn set_step(&self, step: u64) {
        self.shared.state.lock().step = step;
    }

    /// Stores `data` under `key` in `tier`, replacing any previous content.
    /// Hot and Host puts are dirty until flushed.
    pub fn put(&self, key: TensorKey, data: Vec<u8>, tier: TierTag) -> Result<StoreEntry> {
        if data.is_empty() {
            return Err(TierError::EmptyTensor(key));
        }
        let mut st = self.shared.state.lock();
        let mut cold = self.shared.cold.lock();
        let len = data.len() as u64;
        let old = st.entries.remove(&key);
        if let Some(o) = &old {
            st.unaccount(o.tier, o.len);
        }
        st.by_key.remove(&key);
        let restore = |st: &mut State, cold: &mut ColdFile, old: Option<Entry>| -> Result<()> {
            if let Some(o) = old {
                let tier = o.tier;
                st.account(tier, o.len);
                st.entries.insert(key, o);
                st.rebalance(cold, tier, &key)?;
            }
            Ok(())
        };
        let pinned = old.as_ref().map(|o| o.pinned).unwrap_or(false);
        let (data, dirty, cold_loc) = match tier {
            TierTag::Cold => match cold.append(&key, &data) {
                Ok(loc) => {
                    st.counters.io_writes += 1;
                    st.counters.io_write_bytes += len;
                    (None, false, Some(loc))
                }
                Err(e) => {
                    restore(&mut st, &mut cold, old)?;
                    return Err(e);
                }
            },
            _ => {
                if let Err(e) = st.ensure_room(&mut cold, tier, len, &[key]) {
                    restore(&mut st, &mut cold, old)?;
                    return Err(e);
                }
                st.account(tier, len);
                (Some(Arc::new(data)), true, None)
            }
        };
        st.version += 1;
        st.seq += 1;
        let entry = Entry {
            len,
            tier,
            data,
            dirty,
            pinned,
            touch_seq: st.seq,
            touch_step: st.step,
            cold: cold_loc,
            version: st.version,
        };
        let view = st.view(&key, &entry);
        st.entries.insert(key, entry);
        Ok(view)
    }

    /// Returns the bytes and the tier the entry resides in afterwards. A
    /// Cold entry is paged into Host synchronously; if Host cannot make room
    /// the bytes are still returned and the entry stays Cold.
    pub fn get(&self, key: &TensorKey) -> Result<(Arc<Vec<u8>>, TierTag)> {
        let mut st = self.shared.state.lock();
        let tier = st.entries.get(key).ok_or(TierError::MissingKey(*key))?.tier;
        st.touch(key);
        if tier != TierTag::Cold {
            return Ok((st.entries[key].data.clone().unwrap(), tier));
        }
        let mut cold = self.shared.cold.lock();
        let loc = st.entries[key].cold.unwrap();
        let bytes = Arc::new(cold.read(key, &loc)?);
        st.counters.io_reads += 1;
        st.counters.io_read_bytes += loc.len;
        match st.move_up(&mut cold, key, TierTag::Host, Some(Arc::clone(&bytes))) {
            Ok(()) => Ok((bytes, TierTag::Host)),
            Err(TierError::CapacityExhausted { .. }) => Ok((bytes, TierTag::Cold)),
            Err(e) => Err(e),
        }
    }

    pub fn demote(&self, key: &TensorKey, to: TierTag) -> Result<()> {
        let mut st = self.shared.state.lock();
        let e = st.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if e.pinned {
            return Err(TierError::PinnedEntry(*key));
        }
        if to == e.tier {
            return Ok(());
        }
        if to < e.tier {
            return Err(TierError::InvalidMove {
                key: *key,
                from: e.tier,
                to,
            });
        }
        let mut cold = self.shared.cold.lock();
        st.move_down(&mut cold, key, to, &[])
    }

    pub fn promote(&self, key: &TensorKey, to: TierTag) -> Result<()> {
        let mut st = self.shared.state.lock();
        let e = st.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if to == e.tier {
            return Ok(());
        }
        if to > e.tier {
            return Err(TierError::InvalidMove {
                key: *key,
                from: e.tier,
                to,
            });
        }
        let mut cold = self.shared.cold.lock();
        st.touch(key);
        st.move_up(&mut cold, key, to, None)
    }

    /// Persists a resident entry to Cold if it is dirty. Returns whether a
    /// write happened.
    pub fn flush(&self, key: &TensorKey) -> Result<bool> {
        let mut st = self.shared.state.lock();
        let e = st.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if e.tier == TierTag::Cold {
            return Ok(false);
        }
        let mut cold = self.shared.cold.lock();
        st.persist(&mut cold, key)
    }

    /// Releases the resident buffer of an entry whose content is already
    /// persisted. Returns the freed byte count.
    pub fn reclaim(&self, key: &TensorKey) -> Result<u64> {
        let mut st = self.shared.state.lock();
        let e = st.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if e.tier == TierTag::Cold {
            return Ok(0);
        }
        if e.pinned {
            return Err(TierError::PinnedEntry(*key));
        }
        if e.dirty || e.cold.is_none() {
            return Err(TierError::DirtyNotPersisted(*key));
        }
        let (tier, len) = (e.tier, e.len);
        st.unaccount(tier, len);
        let e = st.entries.get_mut(key).unwrap();
        e.tier = TierTag::Cold;
        e.data = None;
        Ok(len)
    }

    pub fn pin(&self, key: &TensorKey, pinned: bool) -> Result<()> {
        let mut st = self.shared.state.lock();
        st.entries
            .get_mut(key)
            .ok_or(TierError::MissingKey(*key))?
            .pinned = pinned;
        Ok(())
    }

    /// Sets aside `bytes` of `tier` capacity for state owned outside the
    /// store, evicting as needed.
    pub fn reserve(&self, tier: TierTag, bytes: u64) -> Result<()> {
        let mut st = self.shared.state.lock();
        let mut cold = self.shared.cold.lock();
        st.ensure_room(&mut cold, tier, bytes, &[])?;
        st.reserved[tier.slot().unwrap()] += bytes;
        Ok(())
    }

    pub fn release_reservation(&self, tier: TierTag, bytes: u64) {
        let mut st = self.shared.state.lock();
        let s = tier.slot().expect("Cold has no reservations");
        st.reserved[s] = st.reserved[s].saturating_sub(bytes);
    }

    /// Queues an asynchronous move of `key` into `to` and returns at once.
    /// A second prefetch of a key already in flight joins the first.
    pub fn prefetch(&self, key: &TensorKey, to: TierTag) -> Result<Ticket> {
        let mut st = self.shared.state.lock();
        let e = st.entries.get(key).ok_or(TierError::MissingKey(*key))?;
        if e.tier <= to {
            return Ok(Ticket::NOOP);
        }
        let (version, len) = (e.version, e.len);
        let source = match &e.data {
            Some(d) => Source::Mem(Arc::clone(d)),
            None => Source::Cold(e.cold.expect("Cold entry has a file location")),
        };
        if let Some(&t) = st.by_key.get(key) {
            if let Some(tr) = st.inflight.get_mut(&t) {
                if tr.version == version {
                    tr.to = tr.to.min(to);
                    st.counters.coalesced_prefetches += 1;
                    return Ok(Ticket(t));
                }
            }
        }
        let ticket = st.next_ticket;
        st.next_ticket += 1;
        let delay_us = self.shared.cfg.transfer_time_us(len);
        st.inflight.insert(
            ticket,
            Transfer {
                key: *key,
                to,
                version,
                ready_at_us: self.shared.clock.now_us() + delay_us,
                payload: None,
            },
        );
        st.by_key.insert(*key, ticket);
        st.counters.transfers += 1;
        if let Some(tx) = &self.tx {
            let _ = tx.send(TransferJob {
                ticket,
                key: *key,
                source,
                delay_us,
            });
        }
        Ok(Ticket(ticket))
    }

    /// Installs at most `max_items` completed transfers. With a wall clock
    /// this never waits; with a virtual clock a transfer whose modeled
    /// arrival time has passed is awaited if its worker has not finished.
    pub fn drain_ready(&self, max_items: usize) -> usize {
        let virt = self.shared.clock.is_virtual();
        let mut st = self.shared.state.lock();
        let mut installed = 0;
        while installed < max_items {
            let now = self.shared.clock.now_us();
            let pick = st
                .inflight
                .iter()
                .find(|(_, t)| {
                    if virt {
                        t.ready_at_us <= now
                    } else {
                        t.payload.is_some()
                    }
                })
                .map(|(k, _)| *k);
            let Some(ticket) = pick else { break };
            while st.inflight[&ticket].payload.is_none() {
                self.shared.arrived.wait(&mut st);
            }
            let t = st.inflight.remove(&ticket).unwrap();
            if st.by_key.get(&t.key) == Some(&ticket) {
                st.by_key.remove(&t.key);
            }
            let mut cold = self.shared.cold.lock();
            if st.install(&mut cold, t) {
                installed += 1;
            }
        }
        installed
    }

    /// Blocks until every queued transfer has arrived (not installed).
    /// Flushes buffered Cold writes to the backing file.
    pub fn sync_cold(&self) -> Result<()> {
        self.shared.cold.lock().sync()
    }

    pub fn wait_transfers(&self) {
        let mut st = self.shared.state.lock();
        while st.inflight.values().any(|t| t.payload.is_none()) {
            self.shared.arrived.wait(&mut st);
        }
    }

    pub fn pending_transfers(&self) -> usize {
        self.shared.state.lock().inflight.len()
    }

    /// Modeled arrival time of the in-flight transfer of `key`, if any.
    pub fn transfer_ready_at(&self, key: &TensorKey) -> Option<u64> {
        let st = self.shared.state.lock();
        let t = st.by_key.get(key)?;
        st.inflight.get(t).map(|t| t.ready_at_us)
    }

    pub fn entry(&self, key: &TensorKey) -> Option<StoreEntry> {
        let st = self.shared.state.lock();
        st.entries.get(key).map(|e| st.view(key, e))
    }

    pub fn contains(&self, key: &TensorKey) -> bool {
        self.shared.state.lock().entries.contains_key(key)
    }

    pub fn resident_bytes(&self, tier: TierTag) -> u64 {
        tier.slot()
            .map(|s| self.shared.state.lock().resident[s])
            .unwrap_or(0)
    }

    pub fn reserved_bytes(&self, tier: TierTag) -> u64 {
        tier.slot()
            .map(|s| self.shared.state.lock().reserved[s])
            .unwrap_or(0)
    }

    pub fn counters(&self) -> StoreCounters {
        self.shared.state.lock().counters
    }

    /// Recomputes residency from the entries and checks it against the
    /// gauges, the capacities and the per-entry invariants.
    pub fn audit(&self) -> Result<()> {
        let st = self.shared.state.lock();
        let mut sums = [0u64; 2];
        for (k, e) in &st.entries {
            if e.len == 0 {
                return Err(TierError::AuditMismatch(format!("{k} has zero bytes")));
            }
            match e.tier {
                TierTag::Cold => {
                    if e.cold.is_none() || e.data.is_some() || e.dirty {
                        return Err(TierError::AuditMismatch(format!(
                            "{k} is Cold but not cleanly persisted"
                        )));
                    }
                }
                t => {
                    match &e.data {
                        Some(d) if d.len() as u64 == e.len => {}
                        _ => {
                            return Err(TierError::AuditMismatch(format!(
                                "{k} resident without a matching buffer"
                            )))
                        }
                    }
                    sums[t.slot().unwrap()] += e.len;
                }
            }
        }
        for (s, tier) in [(0, TierTag::Hot), (1, TierTag::Host)] {
            if sums[s] != st.resident[s] {
                return Err(TierError::AuditMismatch(format!(
                    "{tier:?} gauge {} != entry sum {}",
                    st.resident[s], sums[s]
                )));
            }
            if st.resident[s] + st.reserved[s] > st.capacity[s] {
                return Err(TierError::AuditMismatch(format!(
                    "{tier:?} holds {} + {} reserved over capacity {}",
                    st.resident[s], st.reserved[s], st.capacity[s]
                )));
            }
        }
        Ok(())
    }
}

impl Drop for TierStore {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tierstore::TensorRole;
    use std::time::Instant;

    fn key(b: u32) -> TensorKey {
        TensorKey::new(b, TensorRole::InvL)
    }

    fn store(hot: u64, host: u64) -> TierStore {
        TierStore::new(
            TierConfig {
                hot_capacity_bytes: hot,
                host_capacity_bytes: host,
                ..TierConfig::default()
            },
            SimClock::wall(),
        )
        .unwrap()
    }

    #[test]
    fn hot_roundtrip() {
        let s = store(4096, 4096);
        let data: Vec<u8> = (0..1024).map(|i| (i % 251) as u8).collect();
        s.put(key(0), data.clone(), TierTag::Hot).unwrap();
        let (got, tier) = s.get(&key(0)).unwrap();
        assert_eq!(*got, data);
        assert_eq!(tier, TierTag::Hot);
    }

    #[test]
    fn cold_get_pages_into_host() {
        let s = store(4096, 4096);
        s.put(key(1), vec![7; 100], TierTag::Cold).unwrap();
        let (got, tier) = s.get(&key(1)).unwrap();
        assert_eq!(*got, vec![7; 100]);
        assert_eq!(tier, TierTag::Host);
        assert_eq!(s.resident_bytes(TierTag::Host), 100);
        assert_eq!(s.entry(&key(1)).unwrap().tier, TierTag::Host);
        s.audit().unwrap();
    }

    #[test]
    fn full_hot_evicts_least_recent() {
        let s = store(300, 1000);
        for b in 0..3 {
            s.put(key(b), vec![b as u8; 100], TierTag::Hot).unwrap();
        }
        s.get(&key(0)).unwrap();
        s.put(key(3), vec![3; 100], TierTag::Hot).unwrap();
        assert_eq!(s.entry(&key(1)).unwrap().tier, TierTag::Host);
        assert_eq!(s.resident_bytes(TierTag::Hot), 300);
        assert_eq!(s.resident_bytes(TierTag::Host), 100);
        assert_eq!(s.counters().evictions, 1);
        s.audit().unwrap();
    }

    #[test]
    fn pinned_entries_block_eviction() {
        let s = store(200, 1000);
        s.put(key(0), vec![0; 100], TierTag::Hot).unwrap();
        s.put(key(1), vec![1; 100], TierTag::Hot).unwrap();
        s.pin(&key(0), true).unwrap();
        s.pin(&key(1), true).unwrap();
        assert!(matches!(
            s.put(key(2), vec![2; 100], TierTag::Hot),
            Err(TierError::CapacityExhausted { .. })
        ));
        assert!(!s.contains(&key(2)));
        assert_eq!(s.demote(&key(0), TierTag::Host), Err(TierError::PinnedEntry(key(0))));
        s.audit().unwrap();
    }

    #[test]
    fn clean_demote_skips_write() {
        let s = store(1000, 1000);
        s.put(key(0), vec![1; 64], TierTag::Host).unwrap();
        s.demote(&key(0), TierTag::Cold).unwrap();
        assert_eq!(s.counters().io_writes, 1);
        s.promote(&key(0), TierTag::Host).unwrap();
        s.demote(&key(0), TierTag::Cold).unwrap();
        let c = s.counters();
        assert_eq!(c.io_writes, 1);
        assert_eq!(c.write_skips, 1);
        assert_eq!(*s.get(&key(0)).unwrap().0, vec![1; 64]);
    }

    #[test]
    fn reclaim_requires_persisted_copy() {
        let s = store(1000, 1000);
        s.put(key(0), vec![5; 200], TierTag::Host).unwrap();
        assert_eq!(s.reclaim(&key(0)), Err(TierError::DirtyNotPersisted(key(0))));
        assert!(s.flush(&key(0)).unwrap());
        assert_eq!(s.reclaim(&key(0)).unwrap(), 200);
        assert_eq!(s.resident_bytes(TierTag::Host), 0);
        assert_eq!(*s.get(&key(0)).unwrap().0, vec![5; 200]);
    }

    #[test]
    fn prefetch_coalesces_and_drains() {
        let s = store(1000, 1000);
        s.put(key(0), vec![9; 100], TierTag::Cold).unwrap();
        let a = s.prefetch(&key(0), TierTag::Host).unwrap();
        let b = s.prefetch(&key(0), TierTag::Host).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.counters().transfers, 1);
        assert_eq!(s.counters().coalesced_prefetches, 1);
        s.wait_transfers();
        assert_eq!(s.drain_ready(4), 1);
        assert_eq!(s.entry(&key(0)).unwrap().tier, TierTag::Host);
        assert_eq!(s.drain_ready(4), 0);
        s.audit().unwrap();
    }

    #[test]
    fn drain_does_not_wait_for_slow_transfers() {
        let s = TierStore::new(
            TierConfig {
                transfer_latency_us: 200_000,
                ..TierConfig::default()
            },
            SimClock::wall(),
        )
        .unwrap();
        s.put(key(0), vec![1; 1 << 20], TierTag::Cold).unwrap();
        let t0 = Instant::now();
        s.prefetch(&key(0), TierTag::Hot).unwrap();
        assert_eq!(s.drain_ready(4), 0);
        assert!(t0.elapsed() < Duration::from_millis(100));
        s.wait_transfers();
        assert_eq!(s.drain_ready(4), 1);
        assert_eq!(s.entry(&key(0)).unwrap().tier, TierTag::Hot);
    }

    #[test]
    fn put_supersedes_inflight_transfer() {
        let s = store(1000, 1000);
        s.put(key(0), vec![1; 10], TierTag::Cold).unwrap();
        s.prefetch(&key(0), TierTag::Hot).unwrap();
        s.put(key(0), vec![2; 10], TierTag::Cold).unwrap();
        s.wait_transfers();
        assert_eq!(s.drain_ready(4), 0);
        assert_eq!(s.counters().discarded_transfers, 1);
        assert_eq!(*s.get(&key(0)).unwrap().0, vec![2; 10]);
    }

    #[test]
    fn virtual_clock_gates_transfers() {
        let clock = SimClock::virtual_at(0);
        let s = TierStore::new(
            TierConfig {
                transfer_latency_us: 50,
                ..TierConfig::default()
            },
            clock.clone(),
        )
        .unwrap();
        s.put(key(0), vec![1; 8], TierTag::Cold).unwrap();
        s.prefetch(&key(0), TierTag::Host).unwrap();
        assert_eq!(s.drain_ready(4), 0);
        clock.advance(50);
        assert_eq!(s.drain_ready(4), 1);
    }

    #[test]
    fn reservations_count_against_capacity() {
        let s = store(300, 1000);
        s.put(key(0), vec![0; 200], TierTag::Hot).unwrap();
        s.reserve(TierTag::Hot, 200).unwrap();
        assert_eq!(s.entry(&key(0)).unwrap().tier, TierTag::Host);
        assert!(s.reserve(TierTag::Hot, 200).is_err());
        s.audit().unwrap();
    }

    #[test]
    fn empty_put_rejected() {
        let s = store(10, 10);
        assert_eq!(s.put(key(0), vec![], TierTag::Hot), Err(TierError::EmptyTensor(key(0))));
    }

    #[test]
    fn failed_put_keeps_old_tier_within_capacity() {
        let s = store(100, 100);
        s.put(key(0), vec![0; 40], TierTag::Host).unwrap();
        s.put(key(1), vec![1; 60], TierTag::Host).unwrap();
        s.put(key(2), vec![2; 60], TierTag::Hot).unwrap();
        s.pin(&key(2), true).unwrap();
        s.put(key(3), vec![3; 30], TierTag::Hot).unwrap();
        // Evicting key 3 into Host reuses the space key 0 vacated before
        // the put fails on the pinned entry.
        assert!(matches!(s.put(key(0), vec![9; 60], TierTag::Hot), Err(TierError::CapacityExhausted { .. })));
        assert_eq!(*s.get(&key(0)).unwrap().0, vec![0; 40]);
        assert!(s.resident_bytes(TierTag::Host) <= 100);
        s.audit().unwrap();
    }
}
