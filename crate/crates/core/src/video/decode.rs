//! Priority decode dispatch: ROI tiles first, then by tile index, each to the
//! earliest-free decoder.

use crate::types::Timestamp;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeJob {
    pub frame_id: u32,
    pub tile_index: usize,
    pub is_roi: bool,
    /// Cost units (encoded sample count).
    pub cost: u64,
    /// Earliest time decoding may start.
    pub ready: Timestamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSlot {
    pub frame_id: u32,
    pub tile_index: usize,
    pub is_roi: bool,
    pub decoder: usize,
    pub start: Timestamp,
    pub done: Timestamp,
}

/// Decoder availability, persistent across frames.
#[derive(Debug, Clone)]
pub struct DecoderPool {
    free_at: Vec<Timestamp>,
    units_per_us: f64,
}

impl DecoderPool {
    pub fn new(n_decoders: usize, units_per_us: f64) -> DecoderPool {
        assert!(n_decoders > 0, "need at least one decoder");
        assert!(units_per_us > 0.0, "decode rate must be positive");
        DecoderPool {
            free_at: vec![Timestamp::ZERO; n_decoders],
            units_per_us,
        }
    }

    pub fn len(&self) -> usize {
        self.free_at.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free_at.is_empty()
    }

    pub fn duration_us(&self, cost: u64) -> u64 {
        (cost as f64 / self.units_per_us).ceil() as u64
    }
}

/// Dispatches `jobs` in priority order `(is_roi desc, tile_index asc)`.
/// Slots are returned in dispatch order.
pub fn decode_schedule(jobs: &[DecodeJob], pool: &mut DecoderPool) -> Vec<DecodeSlot> {
    let mut order: Vec<&DecodeJob> = jobs.iter().collect();
    order.sort_by_key(|j| (!j.is_roi, j.tile_index));
    order
        .into_iter()
        .map(|j| {
            let d = (0..pool.free_at.len())
                .min_by_key(|&d| (pool.free_at[d], d))
                .unwrap();
            let start = pool.free_at[d].max(j.ready);
            let done = start.plus(pool.duration_us(j.cost));
            pool.free_at[d] = done;
            DecodeSlot {
                frame_id: j.frame_id,
                tile_index: j.tile_index,
                is_roi: j.is_roi,
                decoder: d,
                start,
                done,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn job(i: usize, roi: bool, cost: u64) -> DecodeJob {
        DecodeJob {
            frame_id: 0,
            tile_index: i,
            is_roi: roi,
            cost,
            ready: Timestamp::ZERO,
        }
    }

    #[test]
    fn roi_first_then_index() {
        let mut pool = DecoderPool::new(1, 1.0);
        let slots = decode_schedule(
            &[job(0, false, 10), job(1, false, 10), job(5, true, 10)],
            &mut pool,
        );
        let order: Vec<usize> = slots.iter().map(|s| s.tile_index).collect();
        assert_eq!(order, vec![5, 0, 1]);
        assert_eq!(slots[2].done, Timestamp(30));
    }

    #[test]
    fn two_decoders_run_in_parallel() {
        let mut pool = DecoderPool::new(2, 1.0);
        let slots = decode_schedule(&[job(0, false, 10), job(1, false, 10)], &mut pool);
        assert_eq!(slots[0].done, slots[1].done);
        assert_ne!(slots[0].decoder, slots[1].decoder);
    }

    // Event-driven oracle: decoders pick the highest-priority waiting job
    // whenever they become free.
    fn oracle_completions(jobs: &[DecodeJob], n: usize) -> Vec<(usize, u64)> {
        let mut waiting: Vec<&DecodeJob> = jobs.iter().collect();
        let mut free = vec![0u64; n];
        let mut out = Vec::new();
        while !waiting.is_empty() {
            let d = (0..n).min_by_key(|&d| (free[d], d)).unwrap();
            let pick = (0..waiting.len())
                .min_by_key(|&i| (!waiting[i].is_roi, waiting[i].tile_index))
                .unwrap();
            let j = waiting.remove(pick);
            free[d] += j.cost;
            out.push((j.tile_index, free[d]));
        }
        out.sort();
        out
    }

    #[test]
    fn roi_precedes_equal_cost_tiles() {
        let mut r = XorShift64Star::new(5);
        for _ in 0..100 {
            let n_tiles = 2 + r.uniform_inclusive(14) as usize;
            let n_dec = 1 + r.uniform_inclusive(3) as usize;
            let cost = 1 + r.uniform_inclusive(500);
            let roi_tile = r.uniform_inclusive(n_tiles as u64 - 1) as usize;
            let jobs: Vec<DecodeJob> = (0..n_tiles).map(|i| job(i, i == roi_tile, cost)).collect();
            let mut pool = DecoderPool::new(n_dec, 1.0);
            let slots = decode_schedule(&jobs, &mut pool);
            let mut got: Vec<(usize, u64)> =
                slots.iter().map(|s| (s.tile_index, s.done.0)).collect();
            got.sort();
            assert_eq!(got, oracle_completions(&jobs, n_dec));
            let roi_done = slots.iter().find(|s| s.is_roi).unwrap().done;
            assert!(slots
                .iter()
                .filter(|s| !s.is_roi)
                .all(|s| s.done >= roi_done));
        }
    }
}
