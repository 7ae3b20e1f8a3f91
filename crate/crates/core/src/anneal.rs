//! Simulated-annealing search over row placements and per-section column
//! orders.
//!
//! The energy of a state is the packed size plus a tile penalty:
//!
//! ```text
//! E = sum_s H * width_s  +  H * W * sum_s ceil(width_s / W)
//! ```
//!
//! so `E' - E = H * dW + H * W * d_tiles`. A proposal is accepted iff a
//! uniform draw in `[0, 1)` is below `exp(-(E' - E) / temp)`. Temperature is
//! multiplied by `1 - f` after every `iter` proposals and the run stops once
//! it falls to `t_end`. The best state seen is returned.
//!
//! Randomness comes from `Pcg64` (PCG XSL RR 128/64) seeded with
//! `seed_from_u64`, so results are identical across platforms.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{
    build_section, pack_section, packed_width, ArrayGeometry, MaskMatrix, PackInput, PackedMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    /// `None` selects [`auto_t_init`] from the column count.
    pub t_init: Option<f64>,
    pub t_end: f64,
    pub cooling: f64,
    pub iters_per_temp: usize,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            t_init: None,
            t_end: 1e-5,
            cooling: 0.01,
            iters_per_temp: 15,
            seed: 0,
            record_trace: false,
        }
    }
}

impl AnnealConfig {
    pub fn with_seed(seed: u64) -> Self {
        AnnealConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn resolved_t_init(&self, cols: usize) -> f64 {
        self.t_init.unwrap_or_else(|| auto_t_init(cols))
    }

    pub fn validate(&self, cols: usize) -> Result<()> {
        let t_init = self.resolved_t_init(cols);
        if !(self.t_end > 0.0 && t_init > self.t_end) {
            return Err(Error::Invalid(format!(
                "need t_init > t_end > 0, got t_init={t_init} t_end={}",
                self.t_end
            )));
        }
        if !(self.cooling > 0.0 && self.cooling < 1.0) {
            return Err(Error::Invalid(format!(
                "cooling factor must be in (0, 1), got {}",
                self.cooling
            )));
        }
        if self.iters_per_temp == 0 {
            return Err(Error::Invalid("iters_per_temp must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1000 up to 128 columns, 3000 from 1024 columns, linear in between.
pub fn auto_t_init(cols: usize) -> f64 {
    const LO: (f64, f64) = (128.0, 1000.0);
    const HI: (f64, f64) = (1024.0, 3000.0);
    let c = (cols as f64).clamp(LO.0, HI.0);
    LO.1 + (HI.1 - LO.1) * (c - LO.0) / (HI.0 - LO.0)
}

/// Row placement and column orders of a permuted matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationState {
    /// `sections[s][p]` is the original row at position `p` of section `s`.
    pub sections: Vec<Vec<Option<usize>>>,
    /// Column order fed to the packer, per section.
    pub col_orders: Vec<Vec<usize>>,
}

impl PermutationState {
    pub fn identity(rows: usize, cols: usize, geom: &ArrayGeometry) -> Self {
        let h = geom.array_rows;
        let n = geom.section_count(rows);
        PermutationState {
            sections: (0..n)
                .map(|s| (s * h..(s + 1) * h).map(|r| (r < rows).then_some(r)).collect())
                .collect(),
            col_orders: vec![(0..cols).collect(); n],
        }
    }

    /// `(section, position)` of every original row.
    pub fn row_assign(&self) -> Vec<(usize, usize)> {
        let rows = self.sections.iter().flatten().flatten().count();
        let mut out = vec![(usize::MAX, usize::MAX); rows];
        for (s, slots) in self.sections.iter().enumerate() {
            for (p, r) in slots.iter().enumerate() {
                if let Some(r) = r {
                    out[*r] = (s, p);
                }
            }
        }
        out
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for r in self.sections.iter().flatten().flatten() {
            if *r >= rows || std::mem::replace(&mut seen[*r], true) {
                return Err(Error::Internal(format!("row {r} placed twice or out of range")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Internal("row placement is not a bijection".into()));
        }
        for order in &self.col_orders {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..cols).collect::<Vec<_>>() {
                return Err(Error::Internal("column order is not a permutation".into()));
            }
        }
        Ok(())
    }

    fn slot(&mut self, (s, p): (usize, usize)) -> &mut Option<usize> {
        &mut self.sections[s][p]
    }

    /// Applies a move. Every move is its own inverse.
    pub fn apply(&mut self, mv: &Move) {
        match *mv {
            Move::RowSwap { a, b } => {
                let ra = *self.slot(a);
                let rb = std::mem::replace(self.slot(b), ra);
                *self.slot(a) = rb;
            }
            Move::ColSwap { section, i, j } => self.col_orders[section].swap(i, j),
            Move::Noop => {}
        }
    }
}

/// One-step permutation proposed by [`propose_move`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Move {
    /// Swap the contents of two `(section, position)` slots, padding included.
    RowSwap { a: (usize, usize), b: (usize, usize) },
    ColSwap { section: usize, i: usize, j: usize },
    Noop,
}

impl Move {
    /// Sections whose packing can change, deduplicated.
    pub fn touched_sections(&self) -> Vec<usize> {
        match *self {
            Move::RowSwap { a, b } if a.0 == b.0 => vec![a.0],
            Move::RowSwap { a, b } => vec![a.0, b.0],
            Move::ColSwap { section, .. } => vec![section],
            Move::Noop => Vec::new(),
        }
    }
}

/// Draws a row swap or a column swap with equal probability. Row swaps need
/// at least two sections and column swaps at least two columns; when only one
/// kind is possible it is always chosen. A self-swap is redrawn once and then
/// allowed through as [`Move::Noop`].
pub fn propose_move(state: &PermutationState, rng: &mut impl Rng) -> Move {
    let sections = state.sections.len();
    let height = state.sections.first().map_or(0, Vec::len);
    let cols = state.col_orders.first().map_or(0, Vec::len);
    let rows_possible = sections >= 2 && height > 0;
    let cols_possible = sections >= 1 && cols >= 2;
    let row_move = match (rows_possible, cols_possible) {
        (false, false) => return Move::Noop,
        (true, false) => true,
        (false, true) => false,
        (true, true) => rng.gen_bool(0.5),
    };
    if row_move {
        let slots = sections * height;
        let mut pick = || {
            let (x, y) = (rng.gen_range(0..slots), rng.gen_range(0..slots));
            (x, y)
        };
        let (mut x, mut y) = pick();
        if x == y {
            (x, y) = pick();
        }
        if x == y {
            return Move::Noop;
        }
        Move::RowSwap {
            a: (x / height, x % height),
            b: (y / height, y % height),
        }
    } else {
        let section = rng.gen_range(0..sections);
        let mut pick = || (rng.gen_range(0..cols), rng.gen_range(0..cols));
        let (mut i, mut j) = pick();
        if i == j {
            (i, j) = pick();
        }
        if i == j {
            return Move::Noop;
        }
        Move::ColSwap { section, i, j }
    }
}

/// Proposes one move and returns the moved state alongside it.
pub fn neighbor_state(state: &PermutationState, rng: &mut impl Rng) -> (PermutationState, Move) {
    let mv = propose_move(state, rng);
    let mut next = state.clone();
    next.apply(&mv);
    (next, mv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyDelta {
    pub delta_size: i64,
    pub delta_tiles: i64,
    pub total: i64,
}

pub fn energy(widths: &[usize], geom: &ArrayGeometry) -> i64 {
    let h = geom.array_rows as i64;
    let tile = (geom.array_rows * geom.array_cols) as i64;
    widths
        .iter()
        .map(|&w| h * w as i64 + tile * geom.tiles_for_width(w) as i64)
        .sum()
}

pub fn delta_energy(before: &[usize], after: &[usize], geom: &ArrayGeometry) -> Result<EnergyDelta> {
    if before.len() != after.len() {
        return Err(Error::Dimension(format!(
            "width lists cover {} and {} sections",
            before.len(),
            after.len()
        )));
    }
    let sum = |ws: &[usize]| ws.iter().sum::<usize>() as i64;
    let tiles = |ws: &[usize]| ws.iter().map(|&w| geom.tiles_for_width(w)).sum::<usize>() as i64;
    let delta_size = geom.array_rows as i64 * (sum(after) - sum(before));
    let delta_tiles = tiles(after) - tiles(before);
    Ok(EnergyDelta {
        delta_size,
        delta_tiles,
        total: delta_size + delta_tiles * (geom.array_rows * geom.array_cols) as i64,
    })
}

/// Per-section packed widths of a state, kept in sync move by move.
#[derive(Debug, Clone)]
pub struct SectionCache {
    masks: MaskMatrix,
    group_max: usize,
    widths: Vec<usize>,
}

impl SectionCache {
    pub fn new(input: PackInput<'_>, geom: &ArrayGeometry, state: &PermutationState) -> Self {
        let masks = input.slot_masks();
        let widths = (0..state.sections.len())
            .map(|s| packed_width(&masks, &state.sections[s], &state.col_orders[s], geom.group_max))
            .collect();
        SectionCache {
            masks,
            group_max: geom.group_max,
            widths,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn section_width(&self, state: &PermutationState, s: usize) -> usize {
        packed_width(&self.masks, &state.sections[s], &state.col_orders[s], self.group_max)
    }

    /// Widths after `mv`, given `moved` = the state with `mv` already
    /// applied. Only the touched sections are re-packed; their indices are
    /// returned alongside.
    pub fn incremental_repack(
        &self,
        moved: &PermutationState,
        mv: &Move,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        if moved.sections.len() != self.widths.len() || moved.col_orders.len() != self.widths.len() {
            return Err(Error::Internal(format!(
                "cache holds {} sections, state has {}",
                self.widths.len(),
                moved.sections.len()
            )));
        }
        let touched = mv.touched_sections();
        let mut widths = self.widths.clone();
        for &s in &touched {
            widths[s] = self.section_width(moved, s);
        }
        Ok((widths, touched))
    }

    pub fn commit(&mut self, widths: Vec<usize>) {
        self.widths = widths;
    }

    /// From-scratch widths, for checking the cache.
    pub fn full_recompute(&self, state: &PermutationState) -> Vec<usize> {
        (0..state.sections.len())
            .map(|s| self.section_width(state, s))
            .collect()
    }
}

/// Packs the matrix as permuted by `state`.
pub fn pack_state<'a>(
    input: impl Into<PackInput<'a>> + Copy,
    geom: &ArrayGeometry,
    state: &PermutationState,
) -> PackedMatrix {
    let input: PackInput<'_> = input.into();
    let mut pm = crate::pack::partition_sections(input, geom);
    pm.sections = state
        .sections
        .iter()
        .zip(&state.col_orders)
        .map(|(rows, cols)| {
            let mut section = build_section(input, rows, cols);
            section.groups = pack_section(&section, geom.group_max);
            section
        })
        .collect();
    pm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub temp: f64,
    pub delta: i64,
    pub draw: f64,
    pub accepted: bool,
    pub best_width: usize,
}

#[derive(Debug, Clone)]
pub struct AnnealResult {
    pub packed: PackedMatrix,
    pub state: PermutationState,
    pub initial_energy: i64,
    pub best_energy: i64,
    /// Energy of the last current state.
    pub final_energy: i64,
    pub initial_widths: Vec<usize>,
    pub steps: usize,
    pub accepted: usize,
    pub cooling_events: usize,
    pub final_temp: f64,
    /// Sum of accepted `EnergyDelta::total`.
    pub accepted_delta_sum: i64,
    pub trace: Vec<TraceEntry>,
}

impl AnnealResult {
    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        for entry in &self.trace {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn anneal<'a>(
    input: impl Into<PackInput<'a>> + Copy,
    geom: &ArrayGeometry,
    cfg: &AnnealConfig,
) -> Result<AnnealResult> {
    let input: PackInput<'_> = input.into();
    geom.validate()?;
    cfg.validate(input.cols())?;
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut state = PermutationState::identity(input.rows(), input.cols(), geom);
    let mut cache = SectionCache::new(input, geom, &state);
    let initial_widths = cache.widths().to_vec();
    let initial_energy = energy(&initial_widths, geom);

    let mut current_energy = initial_energy;
    let mut best_energy = initial_energy;
    let mut best_state = state.clone();
    let mut best_width: usize = initial_widths.iter().sum();
    let mut temp = cfg.resolved_t_init(input.cols());
    let mut loops = 0;
    let mut steps = 0;
    let mut accepted = 0;
    let mut cooling_events = 0;
    let mut accepted_delta_sum = 0;
    let mut trace = Vec::new();

    let searchable = input.nonzeros() > 0;
    while searchable && temp > cfg.t_end {
        let mv = propose_move(&state, &mut rng);
        state.apply(&mv);
        let (widths, _) = cache.incremental_repack(&state, &mv)?;
        let delta = delta_energy(cache.widths(), &widths, geom)?;
        let draw: f64 = rng.gen();
        let accept = draw < (-(delta.total as f64) / temp).exp();
        if accept {
            cache.commit(widths);
            current_energy += delta.total;
            accepted_delta_sum += delta.total;
            accepted += 1;
            if current_energy < best_energy {
                best_energy = current_energy;
                best_state = state.clone();
                best_width = cache.widths().iter().sum();
            }
        } else {
            state.apply(&mv);
        }
        if cfg.record_trace {
            trace.push(TraceEntry {
                step: steps,
                temp,
                delta: delta.total,
                draw,
                accepted: accept,
                best_width,
            });
        }
        steps += 1;
        loops += 1;
        if loops == cfg.iters_per_temp {
            temp *= 1.0 - cfg.cooling;
            cooling_events += 1;
            loops = 0;
        }
    }

    Ok(AnnealResult {
        packed: pack_state(input, geom, &best_state),
        state: best_state,
        initial_energy,
        best_energy,
        final_energy: current_energy,
        initial_widths,
        steps,
        accepted,
        cooling_events,
        final_temp: temp,
        accepted_delta_sum,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::WeightMatrix;

    fn g32() -> ArrayGeometry {
        ArrayGeometry::default()
    }

    #[test]
    fn eq1_examples() {
        let g = g32();
        assert_eq!(delta_energy(&[5, 7], &[5, 7], &g).unwrap().total, 0);
        let d = delta_energy(&[33], &[32], &g).unwrap();
        assert_eq!((d.delta_size, d.delta_tiles, d.total), (-32, -1, -1056));
        let d = delta_energy(&[40], &[39], &g).unwrap();
        assert_eq!((d.delta_size, d.delta_tiles, d.total), (-32, 0, -32));
        assert!(delta_energy(&[1], &[1, 2], &g).is_err());
    }

    #[test]
    fn auto_temperature() {
        assert_eq!(auto_t_init(64), 1000.0);
        assert_eq!(auto_t_init(128), 1000.0);
        assert_eq!(auto_t_init(576), 2000.0);
        assert_eq!(auto_t_init(4096), 3000.0);
    }

    #[test]
    fn config_validation() {
        let bad = AnnealConfig { t_end: 0.0, ..Default::default() };
        assert!(bad.validate(10).is_err());
        let bad = AnnealConfig { cooling: 1.0, ..Default::default() };
        assert!(bad.validate(10).is_err());
        let bad = AnnealConfig { t_init: Some(1e-6), ..Default::default() };
        assert!(bad.validate(10).is_err());
        assert!(AnnealConfig::default().validate(10).is_ok());
    }

    #[test]
    fn single_section_only_moves_columns() {
        let geom = ArrayGeometry::new(4, 4, 4).unwrap();
        let state = PermutationState::identity(1, 6, &geom);
        let mut rng = Pcg64::seed_from_u64(1);
        for _ in 0..500 {
            assert!(!matches!(propose_move(&state, &mut rng), Move::RowSwap { .. }));
        }
    }

    #[test]
    fn moves_are_involutions() {
        let geom = ArrayGeometry::new(4, 4, 4).unwrap();
        let mut state = PermutationState::identity(7, 5, &geom);
        let orig = state.clone();
        let mut rng = Pcg64::seed_from_u64(3);
        for _ in 0..200 {
            let mv = propose_move(&state, &mut rng);
            state.apply(&mv);
            state.validate(7, 5).unwrap();
            state.apply(&mv);
            assert_eq!(state, orig);
        }
    }

    #[test]
    fn move_touches_expected_sections() {
        let row = Move::RowSwap { a: (0, 1), b: (1, 2) };
        assert_eq!(row.touched_sections(), vec![0, 1]);
        let col = Move::ColSwap { section: 1, i: 0, j: 3 };
        assert_eq!(col.touched_sections(), vec![1]);
    }

    #[test]
    fn all_zero_matrix_converges_immediately() {
        let m = WeightMatrix::zeros(64, 40);
        let geom = ArrayGeometry::new(8, 8, 8).unwrap();
        let r = anneal(&m, &geom, &AnnealConfig::default()).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(r.packed.widths(), vec![1; 8]);
    }

    #[test]
    fn row_assign_inverts_sections() {
        let geom = ArrayGeometry::new(4, 4, 4).unwrap();
        let state = PermutationState::identity(6, 2, &geom);
        assert_eq!(state.row_assign(), vec![(0, 0), (0, 1), (0, 2), (0, 3), (1, 0), (1, 1)]);
    }
}
