//! Satellite to ground downlink: constant-rate transmission confined to
//! contact windows, strict FIFO per satellite.

use serde::{Deserialize, Serialize};

use crate::constellation::ContactWindow;
use crate::domain::ByteSize;
use crate::error::{Error, Result};

/// Measured average Starlink downlink rate.
pub const DEFAULT_BANDWIDTH_BPS: f64 = 110.67e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSpec {
    pub bandwidth_bps: f64,
    pub per_message_overhead_bytes: u64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self {
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            per_message_overhead_bytes: 0,
        }
    }
}

impl LinkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(vec![format!(
                "link.bandwidth_bps must be > 0 (got {})",
                self.bandwidth_bps
            )]))
        }
    }

    /// Seconds of air time for a payload, overhead included.
    pub fn air_time(&self, bytes: ByteSize) -> f64 {
        (bytes.0 + self.per_message_overhead_bytes) as f64 * 8.0 / self.bandwidth_bps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRecord {
    pub release_s: f64,
    pub start_s: f64,
    pub complete_s: f64,
    pub bytes: ByteSize,
    /// In-window intervals during which bits flowed.
    pub segments: Vec<(f64, f64)>,
}

impl TransmissionRecord {
    pub fn active_time(&self) -> f64 {
        self.segments.iter().map(|(a, b)| b - a).sum()
    }

    /// Time from release to the last bit, i.e. queueing plus transmission.
    pub fn latency(&self) -> f64 {
        self.complete_s - self.release_s
    }
}

/// FIFO state of one satellite's downlink.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueueState {
    pub tail_s: f64,
}

/// Schedules `bytes` released at `release_s` behind whatever is already
/// queued. Bits flow only inside `windows` (sorted, disjoint); a payload
/// that reaches the end of a window pauses until the next one opens.
///
/// On success the queue tail advances to the completion time. When the
/// windows run out first the queue is left untouched and the error reports
/// how many bytes made it down.
pub fn schedule_transmission(
    bytes: ByteSize,
    release_s: f64,
    windows: &[ContactWindow],
    link: &LinkSpec,
    queue: &mut QueueState,
) -> Result<TransmissionRecord> {
    let total_bits = (bytes.0 + link.per_message_overhead_bytes) as f64 * 8.0;
    let need = link.air_time(bytes);
    let mut t = release_s.max(queue.tail_s);
    let mut remaining = need;
    let mut segments = Vec::new();
    let mut start = None;

    for w in windows {
        if w.end_s < t || (w.end_s == t && remaining > 0.0) {
            continue;
        }
        let seg_start = t.max(w.start_s);
        let first = *start.get_or_insert(seg_start);
        let available = w.end_s - seg_start;
        if remaining <= available {
            let complete = seg_start + remaining;
            if remaining > 0.0 {
                segments.push((seg_start, complete));
            }
            queue.tail_s = complete;
            return Ok(TransmissionRecord {
                release_s,
                start_s: first,
                complete_s: complete,
                bytes,
                segments,
            });
        }
        segments.push((seg_start, w.end_s));
        remaining -= available;
        t = w.end_s;
    }

    let horizon_s = windows.last().map_or(t, |w| w.end_s);
    let sent_bits = (need - remaining) * link.bandwidth_bps;
    Err(Error::HorizonExceeded {
        sent_bytes: (sent_bits.min(total_bits) / 8.0).max(0.0),
        total_bytes: bytes.0,
        horizon_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(a: f64, b: f64) -> ContactWindow {
        ContactWindow::new(a, b).unwrap()
    }

    #[test]
    fn one_second_of_air_time_at_default_rate() {
        // 110.67 Mb
        let bytes = ByteSize(110_670_000 / 8);
        let mut q = QueueState::default();
        let rec = schedule_transmission(bytes, 5.0, &[w(0.0, 1000.0)], &LinkSpec::default(), &mut q).unwrap();
        assert_eq!(rec.start_s, 5.0);
        assert!((rec.complete_s - rec.start_s - 1.0).abs() < 1e-6);
        assert_eq!(q.tail_s, rec.complete_s);
    }

    #[test]
    fn empty_payload_waits_for_window_only() {
        let mut q = QueueState::default();
        let rec = schedule_transmission(ByteSize(0), 3.0, &[w(10.0, 20.0)], &LinkSpec::default(), &mut q).unwrap();
        assert_eq!(rec.start_s, 10.0);
        assert_eq!(rec.complete_s, 10.0);
        let rec = schedule_transmission(ByteSize(0), 12.0, &[w(10.0, 20.0)], &LinkSpec::default(), &mut q).unwrap();
        assert_eq!((rec.start_s, rec.complete_s), (12.0, 12.0));
    }

    #[test]
    fn payload_pauses_across_window_gap() {
        // 15 s of air time at 1 kbps
        let link = LinkSpec {
            bandwidth_bps: 1000.0,
            per_message_overhead_bytes: 0,
        };
        let bytes = ByteSize(15 * 1000 / 8);
        let mut q = QueueState::default();
        let rec = schedule_transmission(bytes, 0.0, &[w(0.0, 10.0), w(100.0, 110.0)], &link, &mut q).unwrap();
        assert_eq!(rec.start_s, 0.0);
        assert_eq!(rec.complete_s, 105.0);
        assert_eq!(rec.segments, vec![(0.0, 10.0), (100.0, 105.0)]);
    }

    #[test]
    fn horizon_exceeded_reports_partial_progress() {
        let link = LinkSpec {
            bandwidth_bps: 8.0,
            per_message_overhead_bytes: 0,
        };
        let mut q = QueueState { tail_s: 1.0 };
        let err = schedule_transmission(ByteSize(30), 0.0, &[w(0.0, 11.0), w(20.0, 30.0)], &link, &mut q).unwrap_err();
        match err {
            Error::HorizonExceeded {
                sent_bytes,
                total_bytes,
                horizon_s,
            } => {
                assert!((sent_bytes - 20.0).abs() < 1e-9);
                assert_eq!(total_bytes, 30);
                assert_eq!(horizon_s, 30.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(q.tail_s, 1.0);
    }

    #[test]
    fn overhead_is_charged() {
        let link = LinkSpec {
            bandwidth_bps: 80.0,
            per_message_overhead_bytes: 10,
        };
        let mut q = QueueState::default();
        let rec = schedule_transmission(ByteSize(0), 0.0, &[w(0.0, 100.0)], &link, &mut q).unwrap();
        assert!((rec.complete_s - 1.0).abs() < 1e-12);
    }

    fn windows_strategy() -> impl Strategy<Value = Vec<ContactWindow>> {
        prop::collection::vec((1.0f64..50.0, 1.0f64..30.0), 1..12).prop_map(|gaps| {
            let mut t = 0.0;
            gaps.into_iter()
                .map(|(gap, len)| {
                    t += gap;
                    let win = ContactWindow::new(t, t + len).unwrap();
                    t += len;
                    win
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn active_time_equals_air_time(ws in windows_strategy(), kb in 0u64..20, release in 0.0f64..100.0) {
            let link = LinkSpec { bandwidth_bps: 1000.0, per_message_overhead_bytes: 3 };
            let bytes = ByteSize(kb * 100);
            let mut q = QueueState::default();
            if let Ok(rec) = schedule_transmission(bytes, release, &ws, &link, &mut q) {
                prop_assert!((rec.active_time() - link.air_time(bytes)).abs() < 1e-9);
                prop_assert!(rec.release_s <= rec.start_s && rec.start_s <= rec.complete_s);
                for (a, b) in &rec.segments {
                    prop_assert!(ws.iter().any(|w| w.start_s <= *a && *b <= w.end_s));
                }
            }
        }

        #[test]
        fn completion_monotone_in_size_and_release(ws in windows_strategy(), a in 0u64..3000, b in 0u64..3000, r1 in 0.0f64..80.0, r2 in 0.0f64..80.0) {
            let link = LinkSpec { bandwidth_bps: 1000.0, per_message_overhead_bytes: 0 };
            let done = |bytes: u64, rel: f64| {
                let mut q = QueueState::default();
                schedule_transmission(ByteSize(bytes), rel, &ws, &link, &mut q).map(|r| r.complete_s).unwrap_or(f64::INFINITY)
            };
            let (small, big) = (a.min(b), a.max(b));
            prop_assert!(done(small, r1) <= done(big, r1));
            let (early, late) = (r1.min(r2), r1.max(r2));
            prop_assert!(done(a, early) <= done(a, late));
        }

        #[test]
        fn fifo_preserves_release_order(ws in windows_strategy(), a in 0u64..2000, b in 0u64..2000, r1 in 0.0f64..60.0, dr in 0.0f64..30.0) {
            let link = LinkSpec { bandwidth_bps: 1000.0, per_message_overhead_bytes: 0 };
            let mut q = QueueState::default();
            let first = schedule_transmission(ByteSize(a), r1, &ws, &link, &mut q);
            let second = schedule_transmission(ByteSize(b), r1 + dr, &ws, &link, &mut q);
            if let (Ok(f), Ok(s)) = (first, second) {
                prop_assert!(f.complete_s <= s.complete_s);
                prop_assert!(f.complete_s <= s.start_s);
            }
        }
    }
}
