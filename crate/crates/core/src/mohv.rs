//! Multi-level occupancy hash voxels.
//!
//! `L` levels of occupancy over world space; level `l` uses cubic voxels of
//! edge `S_init / 2^l`, so level 0 is the coarsest. Each level is a fixed
//! table of `n³` bits addressed by a spatial hash of the integer voxel
//! coordinate, which bounds memory at `L·n³` bits no matter how large the
//! scene grows.
//!
//! * `update(p, l)` marks `p`'s voxel on every level `0..=l`. Finer levels
//!   are left alone.
//! * `query(p, l)` is the AND of the occupancy of `p`'s voxels on levels
//!   `0..=l`.
//!
//! Hash collisions can only turn a free voxel into an occupied one, so the
//! hashed structure errs towards rejecting candidates. [`OccupancyMode::Exact`]
//! keeps real voxel sets instead and exists to check the hashed variant.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Multipliers of the spatial hash (one per axis).
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MohvConfig {
    /// Number of levels `L`.
    pub levels: usize,
    /// Voxel edge of the coarsest level, meters.
    pub s_init: f64,
    /// Voxels per dimension `n`; each level has `n³` slots.
    pub n: usize,
}

impl Default for MohvConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            s_init: 1.0,
            n: 64,
        }
    }
}

impl MohvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidMohvConfig("levels must be at least 1".into()));
        }
        if !(self.s_init > 0.0) || !self.s_init.is_finite() {
            return Err(Error::InvalidMohvConfig(format!("s_init must be positive, got {}", self.s_init)));
        }
        if self.n < 2 {
            return Err(Error::InvalidMohvConfig(format!("n must be at least 2, got {}", self.n)));
        }
        Ok(())
    }

    pub fn slots_per_level(&self) -> u64 {
        (self.n as u64).pow(3)
    }

    pub fn voxel_size(&self, level: usize) -> f64 {
        self.s_init / (1u64 << level) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupancyMode {
    Hashed,
    Exact,
}

/// Fixed-length bitset.
#[derive(Debug, Clone)]
struct BitTable {
    words: Vec<u64>,
    bits: u64,
}

impl BitTable {
    fn new(bits: u64) -> Self {
        Self {
            words: vec![0; bits.div_ceil(64) as usize],
            bits,
        }
    }

    fn set(&mut self, i: u64) {
        self.words[(i / 64) as usize] |= 1 << (i % 64);
    }

    fn get(&self, i: u64) -> bool {
        self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

#[derive(Debug, Clone)]
enum Levels {
    Hashed(Vec<BitTable>),
    Exact(Vec<HashSet<[i64; 3]>>),
}

/// The multi-level occupancy structure.
#[derive(Debug, Clone)]
pub struct Mohv {
    config: MohvConfig,
    levels: Levels,
}

/// Hash of an integer voxel coordinate into `[0, n³)`.
pub fn hash_slot(coord: [i64; 3], n: usize) -> u64 {
    let h = (coord[0] as u64).wrapping_mul(HASH_PRIMES[0])
        ^ (coord[1] as u64).wrapping_mul(HASH_PRIMES[1])
        ^ (coord[2] as u64).wrapping_mul(HASH_PRIMES[2]);
    h % (n as u64).pow(3)
}

impl Mohv {
    pub fn new(config: MohvConfig) -> Result<Self> {
        Self::with_mode(config, OccupancyMode::Hashed)
    }

    pub fn with_mode(config: MohvConfig, mode: OccupancyMode) -> Result<Self> {
        config.validate()?;
        let levels = match mode {
            OccupancyMode::Hashed => Levels::Hashed(
                (0..config.levels)
                    .map(|_| BitTable::new(config.slots_per_level()))
                    .collect(),
            ),
            OccupancyMode::Exact => Levels::Exact(vec![HashSet::new(); config.levels]),
        };
        Ok(Self { config, levels })
    }

    pub fn config(&self) -> &MohvConfig {
        &self.config
    }

    pub fn mode(&self) -> OccupancyMode {
        match self.levels {
            Levels::Hashed(_) => OccupancyMode::Hashed,
            Levels::Exact(_) => OccupancyMode::Exact,
        }
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.config.levels {
            return Err(Error::LevelOutOfRange {
                level,
                levels: self.config.levels,
            });
        }
        Ok(())
    }

    /// Integer voxel containing `p` on `level`.
    pub fn voxel_coord(&self, p: &Vector3<f64>, level: usize) -> Result<[i64; 3]> {
        self.check_level(level)?;
        let size = self.config.voxel_size(level);
        Ok([
            (p.x / size).floor() as i64,
            (p.y / size).floor() as i64,
            (p.z / size).floor() as i64,
        ])
    }

    fn occupied(&self, level: usize, coord: [i64; 3]) -> bool {
        match &self.levels {
            Levels::Hashed(tables) => tables[level].get(hash_slot(coord, self.config.n)),
            Levels::Exact(sets) => sets[level].contains(&coord),
        }
    }

    fn mark(&mut self, level: usize, coord: [i64; 3]) {
        let n = self.config.n;
        match &mut self.levels {
            Levels::Hashed(tables) => tables[level].set(hash_slot(coord, n)),
            Levels::Exact(sets) => {
                sets[level].insert(coord);
            }
        }
    }

    /// Marks `p` as occupied on levels `0..=level`.
    pub fn update(&mut self, p: &Vector3<f64>, level: usize) -> Result<()> {
        self.check_level(level)?;
        for l in 0..=level {
            let c = self.voxel_coord(p, l)?;
            self.mark(l, c);
        }
        Ok(())
    }

    /// True when `p` is occupied on every level `0..=level`.
    pub fn query(&self, p: &Vector3<f64>, level: usize) -> Result<bool> {
        self.check_level(level)?;
        for l in 0..=level {
            if !self.occupied(l, self.voxel_coord(p, l)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Scans `points` in order, keeping each one whose position is still
    /// free and marking it immediately. Returns the kept indices.
    pub fn filter_candidates(&mut self, points: &[Vector3<f64>], level: usize) -> Result<Vec<usize>> {
        self.check_level(level)?;
        let mut kept = Vec::new();
        for (i, p) in points.iter().enumerate() {
            if !self.query(p, level)? {
                self.update(p, level)?;
                kept.push(i);
            }
        }
        Ok(kept)
    }

    /// Level whose voxel edge best matches a Gaussian scale:
    /// `clamp(floor(log2(S_init / scale)), 0, L - 1)`.
    pub fn level_for_scale(&self, scale: f64) -> Result<usize> {
        if !(scale > 0.0) {
            return Err(Error::NonPositiveScale(scale));
        }
        let raw = (self.config.s_init / scale).log2().floor();
        let top = (self.config.levels - 1) as f64;
        Ok(raw.clamp(0.0, top) as usize)
    }

    /// Bits of occupancy storage held by the hashed tables (`L·n³`); zero in
    /// exact mode.
    pub fn storage_bits(&self) -> u64 {
        match &self.levels {
            Levels::Hashed(tables) => tables.iter().map(|t| t.bits).sum(),
            Levels::Exact(_) => 0,
        }
    }

    /// Number of set bits (hashed) or stored voxels (exact) on `level`.
    pub fn occupied_count(&self, level: usize) -> usize {
        match &self.levels {
            Levels::Hashed(tables) => tables[level].count_ones() as usize,
            Levels::Exact(sets) => sets[level].len(),
        }
    }
}
