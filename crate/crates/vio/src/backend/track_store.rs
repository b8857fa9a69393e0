//! Two-stage feature-track store.
//!
//! A flat track table sized for the worst case (horizon x features-per-frame x
//! age entries, each holding a keyframe id and three doubles) is mostly empty
//! in practice. This store splits it:
//!
//! * stage 1, the full logical address space, holds per-entry only a keyframe
//!   id (5 bits in hardware) and a 12-bit pointer;
//! * stage 2 holds at most `capacity` dense payloads of three doubles each,
//!   recycled through a free list.
//!
//! A track born at keyframe `b` in feature slot `s` owns the stage-1 row
//! `(b mod horizon, s)`; its observation at keyframe `k` sits at age index
//! `k - b` within that row. At the default geometry (20 x 200 x 10 entries,
//! 4000 payloads) the modeled memory shrinks by about 5.4x; see
//! [`two_stage_bits`] and [`flat_bits`].

use std::collections::HashMap;

use crate::error::VioError;

/// Hardware field widths used by the memory model.
const KF_ID_BITS: usize = 5;
const POINTER_BITS: usize = 12;
const PAYLOAD_BITS: usize = 3 * 64;

pub const DEFAULT_HORIZON: usize = 20;
pub const DEFAULT_FEATURES: usize = 200;
pub const DEFAULT_AGE: usize = 10;
pub const DEFAULT_CAPACITY: usize = 4000;

/// One observation payload: left pixel coordinates plus the right-image
/// column, negative when there is no stereo measurement.
pub type Payload = [f64; 3];

/// Marks a mono observation in the third payload coordinate.
pub const NO_RIGHT: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    kf: u64,
    ptr: u16,
}

#[derive(Debug, Clone, Copy)]
struct TrackMeta {
    birth_kf: u64,
    slot: usize,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct TrackStore {
    horizon: usize,
    features: usize,
    age: usize,
    stage1: Vec<Option<Slot>>,
    dense: Vec<Payload>,
    free: Vec<u16>,
    dir: HashMap<u64, TrackMeta>,
    row_owner: Vec<Option<u64>>,
}

impl TrackStore {
    pub fn new(horizon: usize, features: usize, age: usize, capacity: usize) -> Self {
        assert!(capacity <= 1 << POINTER_BITS, "pointer width exceeded");
        TrackStore {
            horizon,
            features,
            age,
            stage1: vec![None; horizon * features * age],
            dense: vec![[0.0; 3]; capacity],
            free: (0..capacity as u16).rev().collect(),
            dir: HashMap::new(),
            row_owner: vec![None; horizon * features],
        }
    }

    pub fn with_defaults() -> Self {
        TrackStore::new(
            DEFAULT_HORIZON,
            DEFAULT_FEATURES,
            DEFAULT_AGE,
            DEFAULT_CAPACITY,
        )
    }

    pub fn capacity(&self) -> usize {
        self.dense.len()
    }

    /// Live payload count.
    pub fn occupancy(&self) -> usize {
        self.dense.len() - self.free.len()
    }

    pub fn track_count(&self) -> usize {
        self.dir.len()
    }

    pub fn age_limit(&self) -> usize {
        self.age
    }

    pub fn contains(&self, landmark: u64) -> bool {
        self.dir.contains_key(&landmark)
    }

    fn row(&self, birth_kf: u64, slot: usize) -> usize {
        (birth_kf as usize % self.horizon) * self.features + slot
    }

    fn cell(&self, birth_kf: u64, slot: usize, age_idx: usize) -> usize {
        self.row(birth_kf, slot) * self.age + age_idx
    }

    /// Appends one observation. A landmark unseen so far is registered with
    /// `kf` as its birth keyframe, claiming a feature slot in that row.
    pub fn insert(&mut self, landmark: u64, kf: u64, payload: Payload) -> Result<(), VioError> {
        let meta = match self.dir.get(&landmark) {
            Some(meta) => *meta,
            None => {
                let base = (kf as usize % self.horizon) * self.features;
                let slot = (0..self.features)
                    .find(|s| self.row_owner[base + s].is_none())
                    .ok_or_else(|| {
                        VioError::Config(format!(
                            "no free feature slot in keyframe row {}",
                            kf % self.horizon as u64
                        ))
                    })?;
                let meta = TrackMeta {
                    birth_kf: kf,
                    slot,
                    count: 0,
                };
                self.row_owner[base + slot] = Some(landmark);
                self.dir.insert(landmark, meta);
                meta
            }
        };
        if kf < meta.birth_kf || kf - meta.birth_kf >= self.age as u64 {
            return Err(VioError::Config(format!(
                "track {landmark}: keyframe {kf} outside age window starting at {}",
                meta.birth_kf
            )));
        }
        let cell = self.cell(meta.birth_kf, meta.slot, (kf - meta.birth_kf) as usize);
        if self.stage1[cell].is_some() {
            return Err(VioError::Config(format!(
                "track {landmark}: duplicate observation at keyframe {kf}"
            )));
        }
        let Some(ptr) = self.free.pop() else {
            // Roll back a registration that found no payload space.
            if meta.count == 0 {
                let row = self.row(meta.birth_kf, meta.slot);
                self.row_owner[row] = None;
                self.dir.remove(&landmark);
            }
            return Err(VioError::TrackStoreFull {
                capacity: self.dense.len(),
            });
        };
        self.dense[ptr as usize] = payload;
        self.stage1[cell] = Some(Slot { kf, ptr });
        self.dir.get_mut(&landmark).unwrap().count += 1;
        Ok(())
    }

    /// Removes a track, returning how many payloads went back to the free list.
    pub fn evict(&mut self, landmark: u64) -> Result<usize, VioError> {
        let meta = self
            .dir
            .remove(&landmark)
            .ok_or(VioError::TrackNotFound(landmark))?;
        let mut freed = 0;
        for age_idx in 0..self.age {
            let cell = self.cell(meta.birth_kf, meta.slot, age_idx);
            if let Some(slot) = self.stage1[cell].take() {
                self.free.push(slot.ptr);
                freed += 1;
            }
        }
        let row = self.row(meta.birth_kf, meta.slot);
        self.row_owner[row] = None;
        Ok(freed)
    }

    /// The observation of `landmark` at keyframe `kf`, if stored.
    pub fn get(&self, landmark: u64, kf: u64) -> Option<Payload> {
        let meta = self.dir.get(&landmark)?;
        if kf < meta.birth_kf || kf - meta.birth_kf >= self.age as u64 {
            return None;
        }
        let cell = self.cell(meta.birth_kf, meta.slot, (kf - meta.birth_kf) as usize);
        let slot = self.stage1[cell]?;
        debug_assert_eq!(slot.kf, kf);
        Some(self.dense[slot.ptr as usize])
    }

    /// All observations of a track in keyframe order.
    pub fn observations(&self, landmark: u64) -> Option<Vec<(u64, Payload)>> {
        let meta = self.dir.get(&landmark)?;
        let mut out = Vec::with_capacity(meta.count);
        for age_idx in 0..self.age {
            let cell = self.cell(meta.birth_kf, meta.slot, age_idx);
            if let Some(slot) = self.stage1[cell] {
                out.push((slot.kf, self.dense[slot.ptr as usize]));
            }
        }
        Some(out)
    }

    /// Live landmark ids, unordered.
    pub fn landmarks(&self) -> impl Iterator<Item = u64> + '_ {
        self.dir.keys().copied()
    }

    /// Landmarks whose birth keyframe is older than `kf`, given a window that
    /// keeps `horizon` keyframes; their rows are about to be reused.
    pub fn expired_before(&self, kf: u64) -> Vec<u64> {
        self.dir
            .iter()
            .filter(|(_, m)| m.birth_kf < kf)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Internal consistency check used by the fuzz oracle: every directory
    /// entry's slots hold valid distinct pointers and the free list partitions
    /// the dense table with them.
    #[cfg(test)]
    fn audit(&self) {
        let mut seen = std::collections::HashSet::new();
        let mut live = 0;
        for (id, meta) in &self.dir {
            let mut count = 0;
            for age_idx in 0..self.age {
                let cell = self.cell(meta.birth_kf, meta.slot, age_idx);
                if let Some(slot) = self.stage1[cell] {
                    assert!((slot.ptr as usize) < self.dense.len(), "pointer out of range");
                    assert!(seen.insert(slot.ptr), "pointer {} aliased", slot.ptr);
                    count += 1;
                }
            }
            assert_eq!(count, meta.count, "track {id} count drift");
            let row = self.row(meta.birth_kf, meta.slot);
            assert_eq!(self.row_owner[row], Some(*id), "row owner mismatch");
            live += count;
        }
        for ptr in &self.free {
            assert!(seen.insert(*ptr), "free pointer {} aliased", ptr);
        }
        assert_eq!(seen.len(), self.dense.len(), "pointer partition incomplete");
        assert_eq!(live, self.occupancy(), "occupancy drift");
    }
}

/// Modeled size of the two-stage layout in bits.
pub fn two_stage_bits(horizon: usize, features: usize, age: usize, capacity: usize) -> usize {
    horizon * features * age * (KF_ID_BITS + POINTER_BITS) + capacity * PAYLOAD_BITS
}

/// Modeled size of the flat worst-case table in bits.
pub fn flat_bits(horizon: usize, features: usize, age: usize) -> usize {
    horizon * features * age * (KF_ID_BITS + PAYLOAD_BITS)
}
