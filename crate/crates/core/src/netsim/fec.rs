//! Single-parity XOR forward error correction.
//!
//! A block carries `k` media packets followed by one parity packet holding the
//! XOR of the media payloads. Any single missing media packet can be rebuilt
//! from the `k - 1` survivors and the parity.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FecConfig {
    pub block_k: usize,
    pub parity_count: usize,
}

impl Default for FecConfig {
    fn default() -> Self {
        Self {
            block_k: 4,
            parity_count: 1,
        }
    }
}

impl FecConfig {
    /// Rate multiplier applied to the media flow (parity overhead).
    pub fn overhead_factor(&self) -> f64 {
        1.0 + self.parity_count as f64 / self.block_k as f64
    }

    pub fn is_valid(&self) -> bool {
        self.block_k >= 1 && self.parity_count == 1
    }
}

/// XOR of all payloads, padded to the longest one.
pub fn xor_parity<P: AsRef<[u8]>>(payloads: &[P]) -> Vec<u8> {
    let len = payloads.iter().map(|p| p.as_ref().len()).max().unwrap_or(0);
    let mut parity = vec![0u8; len];
    for p in payloads {
        for (dst, src) in parity.iter_mut().zip(p.as_ref()) {
            *dst ^= src;
        }
    }
    parity
}

/// Outcome of decoding one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    /// Indices of media packets rebuilt from parity.
    pub indices: Vec<usize>,
    /// Media packets still missing after decoding.
    pub unrecoverable: Vec<usize>,
    /// Rebuilt payloads, aligned with `indices`.
    pub payloads: Vec<Vec<u8>>,
}

/// Decodes one block of `received.len()` media slots plus an optional parity.
///
/// `received[i]` is `None` when media packet `i` was lost. With a single
/// parity packet exactly one loss is recoverable; rebuilt payloads keep the
/// parity length (senders pad to a common size).
pub fn fec_recover(received: &[Option<&[u8]>], parity: Option<&[u8]>) -> Recovered {
    let missing: Vec<usize> = received
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(i, _)| i)
        .collect();
    match (missing.as_slice(), parity) {
        ([lost], Some(parity)) => {
            let mut rebuilt = parity.to_vec();
            for p in received.iter().flatten() {
                for (dst, src) in rebuilt.iter_mut().zip(p.iter()) {
                    *dst ^= src;
                }
            }
            Recovered {
                indices: vec![*lost],
                unrecoverable: Vec::new(),
                payloads: vec![rebuilt],
            }
        }
        _ => Recovered {
            indices: Vec::new(),
            unrecoverable: missing,
            payloads: Vec::new(),
        },
    }
}

/// Expected residual loss per media packet for i.i.d. loss `p` and block
/// size `k` with one parity: a packet stays lost iff it is lost and at least
/// one other packet among the remaining `k` (k−1 media + parity) is lost.
pub fn expected_residual_loss(p: f64, k: usize) -> f64 {
    p * (1.0 - (1.0 - p).powi(k as i32))
}

#[derive(Debug, Clone)]
pub(crate) struct PendingPacket {
    pub sent_at: f64,
    pub delivered_at: Option<f64>,
    pub resolved: bool,
}

/// Receiver-side bookkeeping for one in-progress FEC block.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockState {
    pub data: Vec<PendingPacket>,
    /// Number of media packets the sender put into this block, once closed.
    pub expected_data: Option<usize>,
    pub parity_sent: bool,
    pub parity_fate: Option<bool>,
}

impl BlockState {
    pub fn complete(&self) -> bool {
        let Some(expected) = self.expected_data else {
            return false;
        };
        let parity_done = !self.parity_sent || self.parity_fate.is_some();
        parity_done && self.data.len() == expected && self.data.iter().all(|d| d.resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> Vec<Vec<u8>> {
        vec![
            b"alpha---".to_vec(),
            b"bravo---".to_vec(),
            b"charlie-".to_vec(),
            b"delta---".to_vec(),
        ]
    }

    #[test]
    fn no_loss_is_identity() {
        let b = block();
        let parity = xor_parity(&b);
        let rx: Vec<Option<&[u8]>> = b.iter().map(|p| Some(p.as_slice())).collect();
        let out = fec_recover(&rx, Some(&parity));
        assert!(out.indices.is_empty());
        assert!(out.unrecoverable.is_empty());
    }

    #[test]
    fn single_loss_is_rebuilt() {
        let b = block();
        let parity = xor_parity(&b);
        for lost in 0..b.len() {
            let rx: Vec<Option<&[u8]>> = b
                .iter()
                .enumerate()
                .map(|(i, p)| (i != lost).then_some(p.as_slice()))
                .collect();
            let out = fec_recover(&rx, Some(&parity));
            assert_eq!(out.indices, vec![lost]);
            assert_eq!(out.payloads[0], b[lost]);
            assert!(out.unrecoverable.is_empty());
        }
    }

    #[test]
    fn double_loss_or_missing_parity_is_unrecoverable() {
        let b = block();
        let parity = xor_parity(&b);
        let rx = vec![None, Some(b[1].as_slice()), None, Some(b[3].as_slice())];
        assert_eq!(fec_recover(&rx, Some(&parity)).unrecoverable, vec![0, 2]);
        let rx = vec![Some(b[0].as_slice()), None, Some(b[2].as_slice()), Some(b[3].as_slice())];
        assert_eq!(fec_recover(&rx, None).unrecoverable, vec![1]);
    }

    #[test]
    fn residual_loss_matches_pattern_enumeration() {
        // Enumerate all 2^5 loss patterns of a k=4 block (4 media + parity).
        let p: f64 = 0.05;
        let k = 4;
        let mut expected_lost = 0.0;
        for mask in 0u32..(1 << (k + 1)) {
            let lost: Vec<bool> = (0..=k).map(|i| mask & (1 << i) != 0).collect();
            let n_lost = lost.iter().filter(|l| **l).count();
            let prob = p.powi(n_lost as i32) * (1.0 - p).powi((k + 1 - n_lost) as i32);
            let media_lost = lost[..k].iter().filter(|l| **l).count();
            let recoverable = n_lost == 1;
            if !recoverable {
                expected_lost += prob * media_lost as f64;
            }
        }
        let per_packet = expected_lost / k as f64;
        assert!((per_packet - expected_residual_loss(p, k)).abs() < 1e-12);
        // parity shares the lossy path, so four other packets can break recovery
        assert!((per_packet - 0.009274).abs() < 1e-5);
    }
}
