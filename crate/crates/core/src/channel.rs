//! Asynchronous delivery between the roadside unit and the ego vehicle.
//!
//! Latency is modelled by frame substitution: with a latency of `k` frame
//! periods the vehicle fuses the infrastructure frame captured `k` frames
//! earlier. Jitter perturbs the vehicle capture time relative to the
//! infrastructure clock; it never changes the link latency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const TAG_JITTER: u64 = 0x4A49_5454;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyLink {
    pub latency_ms: f64,
    pub jitter_range_ms: (f64, f64),
    pub frame_period_ms: f64,
    pub seed: u64,
}

impl Default for LatencyLink {
    fn default() -> Self {
        Self {
            latency_ms: 0.0,
            jitter_range_ms: (-30.0, 30.0),
            frame_period_ms: 100.0,
            seed: 0,
        }
    }
}

impl LatencyLink {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency_ms >= 0.0) {
            return Err(Error::invalid(format!("latency {} ms must be >= 0", self.latency_ms)));
        }
        let (lo, hi) = self.jitter_range_ms;
        if !(lo <= hi) {
            return Err(Error::invalid(format!("jitter range ({lo}, {hi}) is inverted")));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::invalid("frame period must be > 0"));
        }
        Ok(())
    }

    pub fn without_jitter(mut self) -> Self {
        self.jitter_range_ms = (0.0, 0.0);
        self
    }

    pub fn delivered_frame_index(&self, current: usize) -> usize {
        delivered_frame_index(current, self.latency_ms, self.frame_period_ms)
    }
}

/// Index of the infrastructure frame available at vehicle frame `current`:
/// `current − round(latency / period)` (ties to even), floored at 0.
pub fn delivered_frame_index(current: usize, latency_ms: f64, frame_period_ms: f64) -> usize {
    let k = (latency_ms / frame_period_ms).round_ties_even().max(0.0) as usize;
    current.saturating_sub(k)
}

/// Vehicle-vs-infrastructure timestamp offset for `frame_index`, uniform in
/// the link's jitter range.
pub fn pair_jitter(link: &LatencyLink, frame_index: usize) -> f64 {
    let (lo, hi) = link.jitter_range_ms;
    if lo == hi {
        return lo;
    }
    let mut rng = rng::stream(&[link.seed, TAG_JITTER, frame_index as u64]);
    lo + rng.gen::<f64>() * (hi - lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    pub t_send_us: u64,
    pub t_recv_us: u64,
    pub ab_bytes: usize,
}

/// Sends `bytes` over `link`. `header_len` leading bytes are metadata and
/// are not counted towards the Average Byte.
pub fn transmit(link: &LatencyLink, bytes: Vec<u8>, header_len: usize, t_send_us: u64) -> Delivery {
    let t_recv_us = t_send_us + (link.latency_ms * 1000.0).round() as u64;
    let ab_bytes = bytes.len().saturating_sub(header_len);
    Delivery {
        bytes,
        t_send_us,
        t_recv_us,
        ab_bytes,
    }
}

/// Mean payload bytes per cooperative frame.
pub fn average_bytes(deliveries: &[usize]) -> f64 {
    if deliveries.is_empty() {
        return 0.0;
    }
    deliveries.iter().map(|&b| b as f64).sum::<f64>() / deliveries.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivered_index_examples() {
        assert_eq!(delivered_frame_index(7, 0.0, 100.0), 7);
        assert_eq!(delivered_frame_index(7, 200.0, 100.0), 5);
        assert_eq!(delivered_frame_index(1, 500.0, 100.0), 0);
        // ties to even
        assert_eq!(delivered_frame_index(10, 150.0, 100.0), 8);
        assert_eq!(delivered_frame_index(10, 250.0, 100.0), 8);
    }

    #[test]
    fn jitter_examples() {
        let link = LatencyLink {
            jitter_range_ms: (0.0, 0.0),
            ..Default::default()
        };
        assert_eq!(pair_jitter(&link, 3), 0.0);
        let link = LatencyLink {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(pair_jitter(&link, 12), pair_jitter(&link, 12));
        let j = pair_jitter(&link, 12);
        assert!((-30.0..=30.0).contains(&j));
    }

    #[test]
    fn transmit_examples() {
        let link = LatencyLink::default();
        let d = transmit(&link, vec![0; 50], 10, 1_000);
        assert_eq!(d.t_recv_us, d.t_send_us);
        assert_eq!(d.ab_bytes, 40);
        let slow = LatencyLink {
            latency_ms: 300.0,
            ..Default::default()
        };
        let d = transmit(&slow, vec![], 0, 5);
        assert_eq!(d.t_recv_us - d.t_send_us, 300_000);
    }

    #[test]
    fn average_matches_definition() {
        let link = LatencyLink::default();
        let sizes: Vec<usize> = (0..5)
            .map(|i| transmit(&link, vec![0; 100 + i], 0, 0).ab_bytes)
            .collect();
        assert_eq!(average_bytes(&sizes), 102.0);
        assert_eq!(average_bytes(&[]), 0.0);
    }

    #[test]
    fn validation() {
        assert!(LatencyLink {
            jitter_range_ms: (5.0, -5.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LatencyLink {
            latency_ms: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
