//! Gateway side: beacon bookkeeping and the download protocol.
//!
//! A download has two phases. In the bulk phase the gateway asks for every
//! record from `since_seq` on; the mote streams one packet per record and
//! closes with a status message that tells the gateway the highest sequence
//! number it sent. Missing or corrupt sequence numbers become holes. In the
//! send-and-wait phase the gateway requests each hole in turn and waits for
//! it before asking for the next.

pub mod level0;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use thiserror::Error;

use crate::channel::{prr_from_lqi, Link};
use crate::mote::flash::FLASH_CAPACITY_RECORDS;
use crate::mote::{FlashError, MoteState, SampleRecord, StatusMessage};
use crate::registry::MoteId;

pub use level0::{export_level0, level0_csv, Level0Error, Level0Row, TimeAnchor, LEVEL0_HEADER};

pub const DEFAULT_LQI_WINDOW: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MoteHealth {
    pub mote_id: MoteId,
    pub last_seen: DateTime<Utc>,
    pub last_battery_adc: u16,
    pub stored_records: u64,
    pub highest_seq: Option<u64>,
    pub lqi_history: VecDeque<f64>,
    pub beacons_received: u64,
    pub buffer_full: bool,
}

impl MoteHealth {
    /// Delivery estimate from the LQI window.
    pub fn prr_estimate(&self) -> Option<f64> {
        let window: Vec<f64> = self.lqi_history.iter().copied().collect();
        prr_from_lqi(&window).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthTable {
    rows: BTreeMap<MoteId, MoteHealth>,
    lqi_window: usize,
}

impl Default for HealthTable {
    fn default() -> Self {
        Self::new(DEFAULT_LQI_WINDOW)
    }
}

impl HealthTable {
    pub fn new(lqi_window: usize) -> Self {
        assert!(lqi_window > 0, "LQI window must hold at least one value");
        Self {
            rows: BTreeMap::new(),
            lqi_window,
        }
    }

    pub fn get(&self, mote_id: MoteId) -> Option<&MoteHealth> {
        self.rows.get(&mote_id)
    }

    pub fn rows(&self) -> impl Iterator<Item = &MoteHealth> {
        self.rows.values()
    }

    /// Records a received beacon. Beacons that arrive out of order still
    /// count but do not overwrite fresher status fields.
    pub fn handle_status(&mut self, msg: &StatusMessage, lqi: f64, at: DateTime<Utc>) -> &MoteHealth {
        let window = self.lqi_window;
        let row = self.rows.entry(msg.mote_id).or_insert_with(|| MoteHealth {
            mote_id: msg.mote_id,
            last_seen: at,
            last_battery_adc: msg.battery_adc,
            stored_records: msg.stored_records,
            highest_seq: msg.highest_seq,
            lqi_history: VecDeque::with_capacity(window),
            beacons_received: 0,
            buffer_full: false,
        });
        row.beacons_received += 1;
        if row.lqi_history.len() == window {
            row.lqi_history.pop_front();
        }
        row.lqi_history.push_back(lqi);
        if at >= row.last_seen {
            row.last_seen = at;
            row.last_battery_adc = msg.battery_adc;
            row.stored_records = msg.stored_records;
            row.highest_seq = msg.highest_seq;
            row.buffer_full = msg.stored_records >= FLASH_CAPACITY_RECORDS;
        }
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownloadPolicy {
    /// A download starts only if a beacon arrived this recently.
    pub status_timeout: Duration,
    pub max_retries_per_packet: u32,
    /// Air time of one bulk data packet.
    pub bulk_packet_s: f64,
    /// Request plus reply time for one send-and-wait exchange.
    pub request_rtt_s: f64,
}

impl Default for DownloadPolicy {
    fn default() -> Self {
        Self {
            status_timeout: Duration::minutes(10),
            max_retries_per_packet: 100,
            bulk_packet_s: 0.008,
            request_rtt_s: 0.030,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Bulk,
    SendAndWait,
    Done,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DownloadStats {
    pub packets_expected: u64,
    pub packets_received_bulk: u64,
    pub bulk_losses: u64,
    pub retransmission_requests: u64,
    pub max_retries_for_one_packet: u32,
    /// Resends of the bulk request and of the closing status.
    pub control_retries: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadSession {
    pub mote_id: MoteId,
    pub since_seq: u64,
    /// Last sequence number in range; `None` while unknown or when the
    /// mote had nothing new.
    pub high_seq: Option<u64>,
    pub holes: BTreeSet<u64>,
    pub phase: Phase,
    pub stats: DownloadStats,
}

impl DownloadSession {
    fn advance_to(&mut self, next: Phase) {
        let ok = matches!(
            (self.phase, next),
            (Phase::Bulk, Phase::SendAndWait)
                | (Phase::SendAndWait, Phase::Done)
                | (Phase::Bulk | Phase::SendAndWait, Phase::Aborted)
        );
        debug_assert!(ok, "illegal phase change {:?} -> {:?}", self.phase, next);
        self.phase = next;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Download {
    pub mote_id: MoteId,
    pub epoch: u32,
    pub records: Vec<SampleRecord>,
    pub anchor: TimeAnchor,
    pub session: DownloadSession,
}

impl Download {
    pub fn stats(&self) -> &DownloadStats {
        &self.session.stats
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DownloadError {
    #[error("mote {mote_id} not heard within the status timeout")]
    Unreachable { mote_id: MoteId },
    #[error("{lost} records before seq {tail_seq} were overwritten before download")]
    Evicted { tail_seq: u64, lost: u64 },
    #[error("seq {since_seq} is beyond the mote's newest record")]
    BeyondHead { since_seq: u64 },
    #[error("seq {seq} still missing after {retries} requests")]
    Aborted {
        seq: u64,
        retries: u32,
        partial: Vec<SampleRecord>,
        session: Box<DownloadSession>,
    },
}

/// Runs one download session against `mote` over `link`. On success the
/// mote marks the range as downloaded; energy is charged either way.
pub fn run_download<R: Rng + ?Sized>(
    health: &HealthTable,
    mote: &mut MoteState,
    since_seq: u64,
    link: &mut Link,
    rng: &mut R,
    policy: &DownloadPolicy,
) -> Result<Download, DownloadError> {
    let mote_id = mote.mote_id;
    let now = mote.now_utc();
    match health.get(mote_id) {
        Some(h) if now - h.last_seen <= policy.status_timeout && mote.radio_alive() => {}
        _ => return Err(DownloadError::Unreachable { mote_id }),
    }
    let tail = mote.flash.tail_seq();
    let head = mote.flash.head_seq();
    if since_seq < tail {
        return Err(DownloadError::Evicted {
            tail_seq: tail,
            lost: tail - since_seq,
        });
    }
    if since_seq > head {
        return Err(DownloadError::BeyondHead { since_seq });
    }

    let mut session = DownloadSession {
        mote_id,
        since_seq,
        high_seq: None,
        holes: BTreeSet::new(),
        phase: Phase::Bulk,
        stats: DownloadStats::default(),
    };
    let outgoing = mote.flash_read_range(since_seq, head).map_err(|e| match e {
        FlashError::Evicted { tail_seq, .. } => DownloadError::Evicted {
            tail_seq,
            lost: tail_seq - since_seq,
        },
        _ => DownloadError::BeyondHead { since_seq },
    })?;

    let mut received: BTreeMap<u64, SampleRecord> = BTreeMap::new();
    let mut stats = DownloadStats {
        packets_expected: outgoing.len() as u64,
        ..Default::default()
    };

    // Bulk phase. The bulk request is resent until it gets through.
    let mut airtime = 0.0;
    let mut request_ok = false;
    for _ in 0..=policy.max_retries_per_packet {
        airtime += policy.request_rtt_s;
        if link.transmit(rng).is_intact() {
            request_ok = true;
            break;
        }
        stats.control_retries += 1;
    }
    if !request_ok {
        stats.duration_s = airtime;
        session.stats = stats;
        session.advance_to(Phase::Aborted);
        mote.charge_download(airtime);
        return Err(DownloadError::Aborted {
            seq: since_seq,
            retries: policy.max_retries_per_packet,
            partial: Vec::new(),
            session: Box::new(session),
        });
    }
    for rec in &outgoing {
        airtime += policy.bulk_packet_s;
        let frame = rec.encode();
        let d = link.transmit(rng);
        if !d.is_intact() {
            continue;
        }
        if let Ok(got) = SampleRecord::decode(&frame, since_seq) {
            if received.insert(got.seq, got).is_none() {
                stats.packets_received_bulk += 1;
            }
        }
    }
    stats.bulk_losses = stats.packets_expected - stats.packets_received_bulk;

    // Closing status: resent on request until the gateway hears it.
    let mut status_ok = false;
    for _ in 0..=policy.max_retries_per_packet {
        airtime += policy.bulk_packet_s;
        if link.transmit(rng).is_intact() {
            status_ok = true;
            break;
        }
        stats.control_retries += 1;
        airtime += policy.request_rtt_s;
    }
    session.high_seq = head.checked_sub(1).filter(|&h| h >= since_seq);
    if let Some(high) = session.high_seq {
        session.holes = (since_seq..=high).filter(|s| !received.contains_key(s)).collect();
    }
    session.advance_to(Phase::SendAndWait);

    let mut abort: Option<(u64, u32)> = None;
    if !status_ok {
        abort = Some((head, policy.max_retries_per_packet));
    }
    let holes: Vec<u64> = session.holes.iter().copied().collect();
    for seq in holes {
        if abort.is_some() {
            break;
        }
        let frame = outgoing[(seq - since_seq) as usize].encode();
        let mut attempts = 0u32;
        loop {
            if attempts == policy.max_retries_per_packet {
                abort = Some((seq, attempts));
                break;
            }
            attempts += 1;
            stats.retransmission_requests += 1;
            airtime += policy.request_rtt_s;
            if !link.transmit(rng).is_intact() || !link.transmit(rng).is_intact() {
                continue;
            }
            if let Ok(got) = SampleRecord::decode(&frame, since_seq) {
                received.insert(got.seq, got);
                session.holes.remove(&seq);
                break;
            }
        }
        stats.max_retries_for_one_packet = stats.max_retries_for_one_packet.max(attempts);
    }

    stats.duration_s = airtime;
    session.stats = stats;
    mote.charge_download(airtime);
    let records: Vec<SampleRecord> = received.into_values().collect();

    if let Some((seq, retries)) = abort {
        session.advance_to(Phase::Aborted);
        return Err(DownloadError::Aborted {
            seq,
            retries,
            partial: records,
            session: Box::new(session),
        });
    }
    session.advance_to(Phase::Done);
    mote.mark_downloaded(head);
    let anchor = TimeAnchor {
        mote_time_s: mote.clock_s(),
        utc: mote.boot_utc() + Duration::seconds(i64::from(mote.clock_s())),
    };
    Ok(Download {
        mote_id,
        epoch: mote.epoch(),
        records,
        anchor,
        session,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LinkModel;
    use crate::mote::{ChannelModel, EnvironmentModel};
    use chrono::TimeZone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2006, 1, 5, 0, 0, 0).unwrap()
    }

    /// A mote with `n` samples and a fresh beacon in the table.
    fn setup(n: i64) -> (MoteState, HealthTable) {
        let mut mote = MoteState::new(51, t0(), [ChannelModel::Photo; 5]);
        let env = EnvironmentModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mote.advance(&env, &mut rng, t0() + Duration::minutes(n));
        let mut table = HealthTable::default();
        table.handle_status(&mote.make_status(), 100.0, mote.now_utc());
        (mote, table)
    }

    #[test]
    fn lossless_download_is_complete() {
        let (mut mote, table) = setup(500);
        let mut link = Link::new(LinkModel::with_loss(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = run_download(&table, &mut mote, 0, &mut link, &mut rng, &DownloadPolicy::default()).unwrap();
        assert_eq!(d.records.len(), 500);
        assert_eq!(d.stats().retransmission_requests, 0);
        assert_eq!(d.stats().bulk_losses, 0);
        assert!(d.session.holes.is_empty());
        assert_eq!(d.session.phase, Phase::Done);
        assert_eq!(mote.make_status().stored_records, 0);
        assert_eq!(d.anchor.mote_time_s, 500 * 60);
        assert!(mote.ledger.download_mah > 0.0);
    }

    #[test]
    fn lossy_download_recovers_every_record() {
        let (mut mote, table) = setup(3000);
        let mut link = Link::new(LinkModel {
            duplicate_prob: 0.1,
            corrupt_prob: 0.05,
            ..LinkModel::with_loss(0.3)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = run_download(&table, &mut mote, 1000, &mut link, &mut rng, &DownloadPolicy::default()).unwrap();
        let seqs: Vec<u64> = d.records.iter().map(|r| r.seq).collect();
        assert_eq!(seqs, (1000..3000).collect::<Vec<_>>());
        let s = d.stats();
        assert_eq!(s.packets_received_bulk + s.bulk_losses, s.packets_expected);
        assert!(s.retransmission_requests >= s.bulk_losses);
        assert!(s.max_retries_for_one_packet >= 2);
    }

    #[test]
    fn stale_beacon_means_unreachable() {
        let (mut mote, table) = setup(10);
        let env = EnvironmentModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mote.advance(&env, &mut rng, mote.now_utc() + Duration::hours(1));
        let mut link = Link::new(LinkModel::with_loss(0.0)).unwrap();
        let err = run_download(&table, &mut mote, 0, &mut link, &mut rng, &DownloadPolicy::default());
        assert_eq!(err, Err(DownloadError::Unreachable { mote_id: 51 }));
        let empty = HealthTable::default();
        assert!(run_download(&empty, &mut mote, 0, &mut link, &mut rng, &DownloadPolicy::default()).is_err());
    }

    #[test]
    fn evicted_range_reports_loss() {
        let (mut mote, table) = setup(32_800);
        let mut link = Link::new(LinkModel::with_loss(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = run_download(&table, &mut mote, 0, &mut link, &mut rng, &DownloadPolicy::default());
        assert!(matches!(err, Err(DownloadError::Evicted { tail_seq: 32, lost: 32 })));
    }

    #[test]
    fn dead_link_aborts_with_bound() {
        let (mut mote, table) = setup(20);
        let mut link = Link::new(LinkModel::with_loss(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = DownloadPolicy {
            max_retries_per_packet: 5,
            ..Default::default()
        };
        match run_download(&table, &mut mote, 0, &mut link, &mut rng, &policy) {
            Err(DownloadError::Aborted { partial, session, .. }) => {
                assert!(partial.is_empty());
                assert_eq!(session.phase, Phase::Aborted);
            }
            other => panic!("expected abort, got {other:?}"),
        }
        assert_eq!(mote.make_status().stored_records, 20);
    }

    #[test]
    fn nothing_new_is_an_empty_success() {
        let (mut mote, table) = setup(5);
        let mut link = Link::new(LinkModel::with_loss(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = run_download(&table, &mut mote, 5, &mut link, &mut rng, &DownloadPolicy::default()).unwrap();
        assert!(d.records.is_empty());
        assert_eq!(d.session.high_seq, None);
    }

    #[test]
    fn health_tracks_beacons() {
        let mut table = HealthTable::new(3);
        let mut msg = StatusMessage {
            mote_id: 9,
            stored_records: 10,
            highest_seq: Some(9),
            battery_adc: 900,
        };
        table.handle_status(&msg, 90.0, t0());
        assert_eq!(table.get(9).unwrap().beacons_received, 1);
        msg.stored_records = 32_768;
        for i in 1..5 {
            table.handle_status(&msg, 100.0, t0() + Duration::seconds(i));
        }
        let h = table.get(9).unwrap();
        assert!(h.buffer_full);
        assert_eq!(h.lqi_history.len(), 3);
        assert_eq!(h.beacons_received, 5);
        // An older beacon still counts but leaves last_seen alone.
        msg.stored_records = 1;
        table.handle_status(&msg, 100.0, t0());
        let h = table.get(9).unwrap();
        assert_eq!(h.last_seen, t0() + Duration::seconds(4));
        assert!(h.buffer_full);
        assert!(h.prr_estimate().unwrap() > 0.9);
    }
}
