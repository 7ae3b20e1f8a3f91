//! Functional model of the weight-stationary systolic array.
//!
//! A packed matrix is cut into `H x W` weight tiles. Each node holds one
//! weight, one subword, or a merged `{H, L}` pair, plus 4-bit selection
//! indices choosing which member column's activation it multiplies. Values
//! are computed word-level; bit-serial timing only enters the cycle model.
//!
//! Cycle model, per tile of used width `w`:
//!
//! ```text
//! compute = n_inputs * act_bits + (H + w)
//! load    = ceil(H * w / weight_bus_words)
//! exposed = load (first tile) or max(0, load - previous compute)
//! ```
//!
//! Throughput and energy figures are proxies relative to the unpacked
//! mapping of the same matrix, not physical measurements.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::{ArrayGeometry, PackMode, PackedMatrix, Payload, Slot};
use crate::prune::SubwordFormat;
use crate::tensorio::WeightMatrix;
use crate::REPORT_SCHEMA;

/// Consecutive groups of one section placed side by side in a tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSlice {
    pub section: usize,
    pub groups: Range<usize>,
    /// First array column (lane) used by this slice.
    pub lane_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub slices: Vec<TileSlice>,
    pub folded: bool,
    /// Nodes holding at least one payload.
    pub occupied_nodes: usize,
}

impl Tile {
    /// Array columns spanned, up to the last used lane.
    pub fn width(&self) -> usize {
        self.slices
            .iter()
            .map(|s| s.lane_offset + s.groups.len())
            .max()
            .unwrap_or(0)
    }

    /// `(lane, section, group)` for every mapped group-column.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.slices.iter().flat_map(|s| {
            s.groups
                .clone()
                .enumerate()
                .map(move |(k, g)| (s.lane_offset + k, s.section, g))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSchedule {
    pub tiles: Vec<Tile>,
    pub section_widths: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

fn count_occupied(pm: &PackedMatrix, section: usize, groups: Range<usize>) -> usize {
    pm.sections[section].groups[groups]
        .iter()
        .map(|g| g.cells.iter().filter(|c| !c.is_empty()).count())
        .sum()
}

fn unfolded_tiles(widths: &[usize], w: usize) -> Vec<Tile> {
    let mut tiles = Vec::new();
    for (s, &width) in widths.iter().enumerate() {
        let mut start = 0;
        while start < width {
            let end = (start + w).min(width);
            tiles.push(Tile {
                slices: vec![TileSlice {
                    section: s,
                    groups: start..end,
                    lane_offset: 0,
                }],
                folded: false,
                occupied_nodes: 0,
            });
            start = end;
        }
    }
    tiles
}

/// Streams sections into tiles. A section that does not start a fresh tile
/// begins at the next subarray boundary after the previous section's groups,
/// and no tile holds more than two sections.
fn folded_tiles(widths: &[usize], w: usize, sub: usize) -> Vec<Tile> {
    let mut tiles: Vec<Tile> = Vec::new();
    let mut fill = w;
    for (s, &width) in widths.iter().enumerate() {
        let mut start = 0;
        while start < width {
            let full = fill >= w || tiles.last().is_none_or(|t| t.slices.len() >= 2);
            if full {
                tiles.push(Tile {
                    slices: Vec::new(),
                    folded: false,
                    occupied_nodes: 0,
                });
                fill = 0;
            }
            let take = (width - start).min(w - fill);
            let tile = tiles.last_mut().unwrap();
            tile.slices.push(TileSlice {
                section: s,
                groups: start..start + take,
                lane_offset: fill,
            });
            tile.folded = tile.slices.len() > 1;
            fill = (fill + take.div_ceil(sub) * sub).min(w);
            start += take;
        }
    }
    tiles
}

/// Assigns every group of every section to a tile lane. With `folding`,
/// partially filled tiles are shared between two consecutive sections on
/// subarray boundaries; the folded schedule is kept only if it does not use
/// more tiles than the plain one.
pub fn schedule_tiles(pm: &PackedMatrix, geom: &ArrayGeometry, folding: bool) -> TileSchedule {
    let widths = pm.widths();
    let plain = unfolded_tiles(&widths, geom.array_cols);
    let mut tiles = if folding {
        let folded = folded_tiles(&widths, geom.array_cols, geom.subarray_cols);
        if folded.len() <= plain.len() {
            folded
        } else {
            plain
        }
    } else {
        plain
    };
    for tile in &mut tiles {
        tile.occupied_nodes = tile
            .slices
            .iter()
            .map(|s| count_occupied(pm, s.section, s.groups.clone()))
            .sum();
    }
    TileSchedule {
        tiles,
        section_widths: widths,
        rows: pm.rows,
        cols: pm.cols,
    }
}

/// What a node multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodePayload {
    #[default]
    Inactive,
    Weight(i8),
    /// Subword L alone (signed value).
    Low(i32),
    /// Subword H alone, already shifted into place.
    High(i32),
    /// Two weights merged: an L from one member and an H from another.
    Merged { low: i32, high: i32 },
    /// A full-precision weight split across both fields.
    Full { low: i32, high: i32 },
}

/// MAC selector used for 8-bit weights; subword formats use their code.
pub const MODE_WEIGHT: u8 = 0b11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Node {
    pub payload: NodePayload,
    pub index_l: u8,
    pub index_h: u8,
    pub mode: u8,
}

impl Node {
    pub fn is_active(&self) -> bool {
        !matches!(self.payload, NodePayload::Inactive)
    }

    pub fn occupant_count(&self) -> usize {
        match self.payload {
            NodePayload::Inactive => 0,
            NodePayload::Merged { .. } => 2,
            _ => 1,
        }
    }

    /// `(low, high)` weight fields; the low field pairs with `index_l`.
    fn fields(&self) -> (i32, i32) {
        match self.payload {
            NodePayload::Inactive => (0, 0),
            NodePayload::Weight(w) => (w as i32, 0),
            NodePayload::Low(v) => (v, 0),
            NodePayload::High(v) => (0, v),
            NodePayload::Merged { low, high } | NodePayload::Full { low, high } => (low, high),
        }
    }
}

/// Node programs for one tile, `height x width`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeGrid {
    pub height: usize,
    pub width: usize,
    pub nodes: Vec<Node>,
}

impl NodeGrid {
    pub fn node(&self, row: usize, lane: usize) -> &Node {
        &self.nodes[row * self.width + lane]
    }

    pub fn occupant_count(&self) -> usize {
        self.nodes.iter().map(Node::occupant_count).sum()
    }
}

fn selection_index(
    members: &[usize],
    col: usize,
    geom: &ArrayGeometry,
) -> Result<u8> {
    let idx = members
        .iter()
        .position(|&m| m == col)
        .ok_or_else(|| Error::Corrupt(format!("column {col} not in group members")))?;
    if idx >= geom.group_max {
        return Err(Error::Corrupt(format!(
            "selection index {idx} exceeds group limit {}",
            geom.group_max
        )));
    }
    Ok(idx as u8)
}

/// Translates one tile into per-node payloads and selection indices.
pub fn lower_to_nodes(tile: &Tile, pm: &PackedMatrix) -> Result<NodeGrid> {
    let geom = &pm.geometry;
    let height = geom.array_rows;
    let width = tile.width();
    let mut nodes = vec![Node::default(); height * width];
    let mode_flag = match (pm.mode, pm.format) {
        (PackMode::Weight, _) => MODE_WEIGHT,
        (PackMode::Subword, Some(f)) => f.mode_code().unwrap_or(MODE_WEIGHT),
        (PackMode::Subword, None) => {
            return Err(Error::Corrupt("subword mode without a format".into()))
        }
    };
    let fmt: Option<SubwordFormat> = pm.format;
    for (lane, s, g) in tile.entries() {
        let group = pm
            .sections
            .get(s)
            .and_then(|sec| sec.groups.get(g))
            .ok_or_else(|| Error::Corrupt(format!("tile references missing group {s}/{g}")))?;
        if group.cells.len() != height {
            return Err(Error::Corrupt(format!("group {s}/{g} has wrong height")));
        }
        for (row, slot) in group.cells.iter().enumerate() {
            let node = &mut nodes[row * width + lane];
            node.mode = mode_flag;
            match *slot {
                Slot::Empty => {}
                Slot::Whole(o) => {
                    let idx = selection_index(&group.members, o.col, geom)?;
                    node.index_l = idx;
                    node.index_h = idx;
                    node.payload = match (o.payload, pm.mode) {
                        (Payload::Weight(w), PackMode::Weight) => NodePayload::Weight(w),
                        (Payload::Subword(c), PackMode::Subword) => {
                            let (low, high) = c.split(fmt.unwrap());
                            NodePayload::Full { low, high }
                        }
                        _ => return Err(Error::Corrupt("payload does not match mode".into())),
                    };
                }
                Slot::Split { low, high } => {
                    if pm.mode != PackMode::Subword {
                        return Err(Error::Corrupt("split slot in weight mode".into()));
                    }
                    let f = fmt.unwrap();
                    let part = |o: Option<crate::pack::Occupant>| -> Result<Option<(u8, i32)>> {
                        o.map(|o| {
                            let idx = selection_index(&group.members, o.col, geom)?;
                            Ok((idx, o.payload.value(Some(f))))
                        })
                        .transpose()
                    };
                    node.payload = match (part(low)?, part(high)?) {
                        (Some((il, vl)), Some((ih, vh))) => {
                            node.index_l = il;
                            node.index_h = ih;
                            NodePayload::Merged { low: vl, high: vh }
                        }
                        (Some((il, vl)), None) => {
                            node.index_l = il;
                            NodePayload::Low(vl)
                        }
                        (None, Some((ih, vh))) => {
                            node.index_h = ih;
                            NodePayload::High(vh)
                        }
                        (None, None) => return Err(Error::Corrupt("empty split slot".into())),
                    };
                }
            }
        }
    }
    Ok(NodeGrid {
        height,
        width,
        nodes,
    })
}

/// 32-bit accumulator outputs, `rows x batch`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accumulators {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<i32>,
}

impl Accumulators {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Accumulators {
            rows,
            cols,
            values: vec![0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.values[row * self.cols + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.values[r * self.cols..(r + 1) * self.cols]
                .iter()
                .map(i32::to_string)
                .collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Plain `weights x inputs` in wrapping 32-bit arithmetic.
pub fn dense_matmul(weights: &WeightMatrix, inputs: &WeightMatrix) -> Result<Accumulators> {
    if weights.cols() != inputs.rows() {
        return Err(Error::Dimension(format!(
            "weights have {} columns, inputs have {} rows",
            weights.cols(),
            inputs.rows()
        )));
    }
    let n = inputs.cols();
    let mut out = Accumulators::zeros(weights.rows(), n);
    for r in 0..weights.rows() {
        for (c, &w) in weights.row(r).iter().enumerate() {
            if w == 0 {
                continue;
            }
            for (k, &x) in inputs.row(c).iter().enumerate() {
                let acc = &mut out.values[r * n + k];
                *acc = acc.wrapping_add(w as i32 * x as i32);
            }
        }
    }
    Ok(out)
}

/// Runs `inputs` (one row of activations per original column) through the
/// tiles of `schedule`. Partial sums flow left to right along each array row
/// within a section's slice and are added into that row's output.
pub fn simulate_schedule(
    pm: &PackedMatrix,
    inputs: &WeightMatrix,
    schedule: &TileSchedule,
) -> Result<Accumulators> {
    if inputs.rows() != pm.cols {
        return Err(Error::Dimension(format!(
            "packed matrix has {} columns, inputs have {} rows",
            pm.cols,
            inputs.rows()
        )));
    }
    let n = inputs.cols();
    let mut out = Accumulators::zeros(pm.rows, n);
    let mut acc = vec![0i32; n];
    for tile in &schedule.tiles {
        let grid = lower_to_nodes(tile, pm)?;
        for slice in &tile.slices {
            let section = &pm.sections[slice.section];
            for (pos, row) in section.row_map.iter().enumerate() {
                let Some(row) = *row else { continue };
                acc.iter_mut().for_each(|a| *a = 0);
                for (k, g) in slice.groups.clone().enumerate() {
                    let node = grid.node(pos, slice.lane_offset + k);
                    if !node.is_active() {
                        continue;
                    }
                    let members = &section.groups[g].members;
                    let (low, high) = node.fields();
                    let xl = inputs.row(members[node.index_l as usize]);
                    let xh = inputs.row(members[node.index_h as usize]);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a = a
                            .wrapping_add(low.wrapping_mul(xl[j] as i32))
                            .wrapping_add(high.wrapping_mul(xh[j] as i32));
                    }
                }
                let dst = &mut out.values[row * n..(row + 1) * n];
                for (d, a) in dst.iter_mut().zip(&acc) {
                    *d = d.wrapping_add(*a);
                }
            }
        }
    }
    Ok(out)
}

/// Simulates the folded schedule of `pm` on an array of geometry `geom`.
pub fn simulate_matmul(
    pm: &PackedMatrix,
    inputs: &WeightMatrix,
    geom: &ArrayGeometry,
) -> Result<Accumulators> {
    if geom.array_rows != pm.geometry.array_rows {
        return Err(Error::Dimension(format!(
            "array has {} rows, sections are {} tall",
            geom.array_rows, pm.geometry.array_rows
        )));
    }
    simulate_schedule(pm, inputs, &schedule_tiles(pm, geom, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleConfig {
    pub weight_bus_words: usize,
    /// Extra cycles charged to every folded tile.
    pub fold_reconfig_cycles: u64,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            weight_bus_words: 32,
            fold_reconfig_cycles: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub schema: String,
    pub layers: Vec<String>,
    pub total_cycles: u64,
    pub per_layer_cycles: Vec<u64>,
    pub active_node_cycles: u64,
    pub tile_count: usize,
    /// Unpacked-mapping cycles divided by `total_cycles` (proxy).
    pub throughput_proxy: f64,
    /// `active_node_cycles` over the node-cycles of the unpacked mapping
    /// with every node clocked (proxy).
    pub energy_proxy: f64,
    pub baseline_cycles: u64,
    pub baseline_node_cycles: u64,
}

struct CycleTotals {
    cycles: u64,
    node_cycles: u64,
}

/// Cycles for tiles given as `(width, folded, occupied_nodes)`.
fn tile_cycles(
    tiles: impl Iterator<Item = (usize, bool, u64)>,
    n_inputs: usize,
    geom: &ArrayGeometry,
    cfg: &CycleConfig,
) -> CycleTotals {
    let stream = (n_inputs * geom.act_bits) as u64;
    let h = geom.array_rows as u64;
    let bus = cfg.weight_bus_words.max(1) as u64;
    let mut prev_compute: Option<u64> = None;
    let mut cycles = 0;
    let mut node_cycles = 0;
    for (width, folded, occupied) in tiles {
        let compute = stream + h + width as u64;
        let load = (h * width as u64).div_ceil(bus);
        let exposed = match prev_compute {
            None => load,
            Some(prev) => load.saturating_sub(prev),
        };
        cycles += compute + exposed + if folded { cfg.fold_reconfig_cycles } else { 0 };
        node_cycles += occupied * stream;
        prev_compute = Some(compute);
    }
    CycleTotals {
        cycles,
        node_cycles,
    }
}

pub fn estimate_cycles(
    ts: &TileSchedule,
    n_inputs: usize,
    geom: &ArrayGeometry,
    cfg: &CycleConfig,
) -> CycleReport {
    let packed = tile_cycles(
        ts.tiles
            .iter()
            .map(|t| (t.width(), t.folded, t.occupied_nodes as u64)),
        n_inputs,
        geom,
        cfg,
    );
    // every original column as its own group, every node clocked
    let sections = geom.section_count(ts.rows);
    let w = geom.array_cols;
    let baseline_widths: Vec<usize> = (0..sections)
        .flat_map(|_| (0..ts.cols.div_ceil(w)).map(move |t| (ts.cols - t * w).min(w)))
        .collect();
    let baseline = tile_cycles(
        baseline_widths
            .iter()
            .map(|&bw| (bw, false, (bw * geom.array_rows) as u64)),
        n_inputs,
        geom,
        cfg,
    );
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    CycleReport {
        schema: REPORT_SCHEMA.to_string(),
        layers: Vec::new(),
        total_cycles: packed.cycles,
        per_layer_cycles: vec![packed.cycles],
        active_node_cycles: packed.node_cycles,
        tile_count: ts.tiles.len(),
        throughput_proxy: ratio(baseline.cycles, packed.cycles),
        energy_proxy: ratio(packed.node_cycles, baseline.node_cycles),
        baseline_cycles: baseline.cycles,
        baseline_node_cycles: baseline.node_cycles,
    }
}

impl CycleReport {
    pub fn with_layer(mut self, name: impl Into<String>) -> Self {
        self.layers = vec![name.into()];
        self
    }

    /// Concatenates per-layer reports; proxies are recomputed from the sums.
    pub fn combine(reports: &[CycleReport]) -> CycleReport {
        let sum = |f: fn(&CycleReport) -> u64| reports.iter().map(f).sum::<u64>();
        let total = sum(|r| r.total_cycles);
        let base = sum(|r| r.baseline_cycles);
        let active = sum(|r| r.active_node_cycles);
        let base_nodes = sum(|r| r.baseline_node_cycles);
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        CycleReport {
            schema: REPORT_SCHEMA.to_string(),
            layers: reports.iter().flat_map(|r| r.layers.clone()).collect(),
            total_cycles: total,
            per_layer_cycles: reports.iter().flat_map(|r| r.per_layer_cycles.clone()).collect(),
            active_node_cycles: active,
            tile_count: reports.iter().map(|r| r.tile_count).sum(),
            throughput_proxy: ratio(base, total),
            energy_proxy: ratio(active, base_nodes),
            baseline_cycles: base,
            baseline_node_cycles: base_nodes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `layer,cycles` rows for a per-layer bar chart.
    pub fn layer_csv(&self) -> String {
        let mut out = String::from("layer,cycles\n");
        for (i, cycles) in self.per_layer_cycles.iter().enumerate() {
            let name = self.layers.get(i).cloned().unwrap_or_else(|| format!("layer{i}"));
            out.push_str(&format!("{name},{cycles}\n"));
        }
        out
    }
}
