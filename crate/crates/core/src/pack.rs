//! Row sections, the conflict model and the greedy column packer.
//!
//! A matrix is cut into row sections exactly as tall as the array. Inside a
//! section, columns are merged into groups of at most `G` original columns
//! as long as no two members occupy the same slot of the same row. In
//! weight mode every row has one slot. In subword mode every row has an L
//! slot and an H slot; a full-precision weight takes both.
//!
//! The packer walks the group list left to right. For the current group it
//! merges, one at a time, the mergeable later group with the most occupied
//! slots (the first such group on ties) until nothing fits, then advances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::{SubwordCell, SubwordClass, SubwordFormat, SubwordMatrix};
use crate::tensorio::{
    Bitmap, DensityBitmap, WeightMatrix, PIXEL_OCCUPIED, PIXEL_SEPARATOR, PIXEL_ZERO,
};
use crate::REPORT_SCHEMA;

/// Largest supported group size; selection indices are at most 4 bits.
pub const MAX_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Section height `H`.
    pub array_rows: usize,
    /// Tile width `W`.
    pub array_cols: usize,
    /// Maximum original columns per group `G`.
    pub group_max: usize,
    pub subarray_cols: usize,
    pub macs_per_node: usize,
    pub act_bits: usize,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry {
            array_rows: 32,
            array_cols: 32,
            group_max: 16,
            subarray_cols: 8,
            macs_per_node: 4,
            act_bits: 8,
        }
    }
}

impl ArrayGeometry {
    pub fn new(array_rows: usize, array_cols: usize, group_max: usize) -> Result<Self> {
        let geom = ArrayGeometry {
            array_rows,
            array_cols,
            group_max,
            subarray_cols: Self::default_subarray_cols(array_cols),
            ..Default::default()
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Widest divisor of `array_cols` that is at most 8.
    pub fn default_subarray_cols(array_cols: usize) -> usize {
        (1..=array_cols.min(8)).rev().find(|d| array_cols.is_multiple_of(*d)).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.array_rows == 0 || self.array_cols == 0 || self.subarray_cols == 0 {
            return Err(Error::Invalid("array dimensions must be positive".into()));
        }
        if self.group_max == 0 || self.group_max > MAX_GROUP {
            return Err(Error::Invalid(format!(
                "group_max must be in 1..={MAX_GROUP}, got {}",
                self.group_max
            )));
        }
        if !self.array_cols.is_multiple_of(self.subarray_cols) {
            return Err(Error::Invalid(format!(
                "array_cols {} not divisible by subarray_cols {}",
                self.array_cols, self.subarray_cols
            )));
        }
        if self.act_bits == 0 {
            return Err(Error::Invalid("act_bits must be positive".into()));
        }
        Ok(())
    }

    /// Width of the per-node selection index.
    pub fn index_bits(&self) -> u32 {
        self.group_max.next_power_of_two().trailing_zeros()
    }

    pub fn tile_cells(&self) -> usize {
        self.array_rows * self.array_cols
    }

    pub fn section_count(&self, rows: usize) -> usize {
        rows.div_ceil(self.array_rows)
    }

    pub fn tiles_for_width(&self, width: usize) -> usize {
        width.div_ceil(self.array_cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackMode {
    Weight,
    Subword,
}

/// Slot bits of a row: bit 0 is the L slot, bit 1 the H slot.
pub(crate) const SLOT_L: u8 = 0b01;
pub(crate) const SLOT_H: u8 = 0b10;
pub(crate) const SLOT_BOTH: u8 = 0b11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Weight(i8),
    Subword(SubwordCell),
}

impl Payload {
    pub fn slot_mask(&self) -> u8 {
        match self {
            Payload::Weight(0) => 0,
            Payload::Weight(_) => SLOT_BOTH,
            Payload::Subword(c) => match c.class {
                SubwordClass::Zero => 0,
                SubwordClass::L => SLOT_L,
                SubwordClass::H => SLOT_H,
                SubwordClass::Full => SLOT_BOTH,
            },
        }
    }

    /// Integer weight this payload contributes.
    pub fn value(&self, format: Option<SubwordFormat>) -> i32 {
        match self {
            Payload::Weight(w) => *w as i32,
            Payload::Subword(c) => c.value(format.expect("subword payload needs a format")),
        }
    }
}

/// Matrix view accepted by the packer.
#[derive(Debug, Clone, Copy)]
pub enum PackInput<'a> {
    Weight(&'a WeightMatrix),
    Subword(&'a SubwordMatrix),
}

impl<'a> From<&'a WeightMatrix> for PackInput<'a> {
    fn from(m: &'a WeightMatrix) -> Self {
        PackInput::Weight(m)
    }
}

impl<'a> From<&'a SubwordMatrix> for PackInput<'a> {
    fn from(m: &'a SubwordMatrix) -> Self {
        PackInput::Subword(m)
    }
}

impl PackInput<'_> {
    pub fn rows(&self) -> usize {
        match self {
            PackInput::Weight(m) => m.rows(),
            PackInput::Subword(m) => m.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            PackInput::Weight(m) => m.cols(),
            PackInput::Subword(m) => m.cols(),
        }
    }

    pub fn mode(&self) -> PackMode {
        match self {
            PackInput::Weight(_) => PackMode::Weight,
            PackInput::Subword(_) => PackMode::Subword,
        }
    }

    pub fn format(&self) -> Option<SubwordFormat> {
        match self {
            PackInput::Weight(_) => None,
            PackInput::Subword(m) => Some(m.format),
        }
    }

    fn base(&self) -> &WeightMatrix {
        match self {
            PackInput::Weight(m) => m,
            PackInput::Subword(m) => &m.base,
        }
    }

    pub fn payload(&self, row: usize, col: usize) -> Option<Payload> {
        let p = match self {
            PackInput::Weight(m) => Payload::Weight(m.get(row, col)),
            PackInput::Subword(m) => Payload::Subword(m.cell(row, col)),
        };
        (p.slot_mask() != 0).then_some(p)
    }

    pub fn nonzeros(&self) -> usize {
        match self {
            PackInput::Weight(m) => m.nonzeros(),
            PackInput::Subword(m) => m.counts().nonzero(),
        }
    }

    /// Slot mask of every cell, row-major.
    pub(crate) fn slot_masks(&self) -> MaskMatrix {
        let cols = self.cols();
        let masks = match self {
            PackInput::Weight(m) => m
                .values()
                .iter()
                .map(|&v| Payload::Weight(v).slot_mask())
                .collect(),
            PackInput::Subword(m) => m
                .cells
                .iter()
                .map(|&c| Payload::Subword(c).slot_mask())
                .collect(),
        };
        MaskMatrix { cols, masks }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MaskMatrix {
    pub cols: usize,
    pub masks: Vec<u8>,
}

impl MaskMatrix {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.masks[row * self.cols + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occupant {
    /// Original column index.
    pub col: usize,
    pub payload: Payload,
}

/// One row position of a column group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Slot {
    #[default]
    Empty,
    /// An 8-bit weight, or a full-precision subword cell, owning both slots.
    Whole(Occupant),
    Split {
        low: Option<Occupant>,
        high: Option<Occupant>,
    },
}

impl Slot {
    fn from_payload(occ: Occupant) -> Slot {
        match occ.payload.slot_mask() {
            0 => Slot::Empty,
            SLOT_L => Slot::Split {
                low: Some(occ),
                high: None,
            },
            SLOT_H => Slot::Split {
                low: None,
                high: Some(occ),
            },
            _ => Slot::Whole(occ),
        }
    }

    pub fn mask(&self) -> u8 {
        match self {
            Slot::Empty => 0,
            Slot::Whole(_) => SLOT_BOTH,
            Slot::Split { low, high } => {
                (if low.is_some() { SLOT_L } else { 0 }) | (if high.is_some() { SLOT_H } else { 0 })
            }
        }
    }

    pub fn occupants(&self) -> impl Iterator<Item = &Occupant> {
        let (a, b) = match self {
            Slot::Empty => (None, None),
            Slot::Whole(o) => (Some(o), None),
            Slot::Split { low, high } => (low.as_ref(), high.as_ref()),
        };
        a.into_iter().chain(b)
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Slot::Empty)
    }

    /// Combines two slots whose masks do not overlap.
    fn combine(self, other: Slot) -> Slot {
        debug_assert_eq!(self.mask() & other.mask(), 0);
        match (self, other) {
            (Slot::Empty, s) | (s, Slot::Empty) => s,
            (Slot::Split { low: l1, high: h1 }, Slot::Split { low: l2, high: h2 }) => Slot::Split {
                low: l1.or(l2),
                high: h1.or(h2),
            },
            _ => unreachable!("whole slot cannot share a row"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnGroup {
    /// Original column indices; an occupant's selection index is its
    /// column's position here.
    pub members: Vec<usize>,
    pub cells: Vec<Slot>,
}

impl ColumnGroup {
    pub fn occupant_count(&self) -> usize {
        self.cells.iter().map(|s| s.occupants().count()).sum()
    }

    /// Occupied slots, L and H counted separately.
    pub fn slot_count(&self) -> usize {
        self.cells.iter().map(|s| s.mask().count_ones() as usize).sum()
    }

    pub fn selection_index(&self, col: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == col)
    }

    fn merged(mut self, other: &ColumnGroup) -> ColumnGroup {
        self.members.extend_from_slice(&other.members);
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a = a.combine(*b);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Original row at each of the `H` positions; `None` marks padding.
    pub row_map: Vec<Option<usize>>,
    pub groups: Vec<ColumnGroup>,
}

impl Section {
    pub fn width(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    pub geometry: ArrayGeometry,
    pub mode: PackMode,
    pub format: Option<SubwordFormat>,
    pub rows: usize,
    pub cols: usize,
    pub scale: f64,
    pub name: String,
    pub sections: Vec<Section>,
}

impl PackedMatrix {
    pub fn widths(&self) -> Vec<usize> {
        self.sections.iter().map(Section::width).collect()
    }

    pub fn total_width(&self) -> usize {
        self.sections.iter().map(Section::width).sum()
    }

    pub fn occupant_count(&self) -> usize {
        self.sections
            .iter()
            .flat_map(|s| &s.groups)
            .map(ColumnGroup::occupant_count)
            .sum()
    }
}

/// Builds the section of `input` holding `row_map`, one singleton group per
/// column in `col_order`.
pub(crate) fn build_section(
    input: PackInput<'_>,
    row_map: &[Option<usize>],
    col_order: &[usize],
) -> Section {
    let groups = col_order
        .iter()
        .map(|&col| ColumnGroup {
            members: vec![col],
            cells: row_map
                .iter()
                .map(|row| match row.and_then(|r| input.payload(r, col)) {
                    Some(payload) => Slot::from_payload(Occupant { col, payload }),
                    None => Slot::Empty,
                })
                .collect(),
        })
        .collect();
    Section {
        row_map: row_map.to_vec(),
        groups,
    }
}

/// Splits the matrix into `ceil(R/H)` sections with identity row order and
/// one singleton group per column.
pub fn partition_sections<'a>(input: impl Into<PackInput<'a>> + Copy, geom: &ArrayGeometry) -> PackedMatrix {
    let input: PackInput<'_> = input.into();
    let h = geom.array_rows;
    let rows = input.rows();
    let col_order: Vec<usize> = (0..input.cols()).collect();
    let sections = (0..geom.section_count(rows))
        .map(|s| {
            let row_map: Vec<Option<usize>> = (s * h..(s + 1) * h)
                .map(|r| (r < rows).then_some(r))
                .collect();
            build_section(input, &row_map, &col_order)
        })
        .collect();
    let base = input.base();
    PackedMatrix {
        geometry: *geom,
        mode: input.mode(),
        format: input.format(),
        rows,
        cols: input.cols(),
        scale: base.scale(),
        name: base.name.clone(),
        sections,
    }
}

/// True iff the union of `a` and `b` respects the group size bound and the
/// per-row slot limits of `mode`.
pub fn can_merge(a: &ColumnGroup, b: &ColumnGroup, mode: PackMode, group_max: usize) -> bool {
    if a.members.len() + b.members.len() > group_max {
        return false;
    }
    a.cells.iter().zip(&b.cells).all(|(x, y)| {
        let (mx, my) = (x.mask(), y.mask());
        match mode {
            PackMode::Weight => mx == 0 || my == 0,
            PackMode::Subword => mx & my == 0,
        }
    })
}

/// Row bitsets of a working list of groups, stored flat.
#[derive(Debug, Clone)]
pub(crate) struct GroupSet {
    words: usize,
    sizes: Vec<usize>,
    low: Vec<u64>,
    high: Vec<u64>,
    slots: Vec<u32>,
    /// Per group, indices of the initial groups it absorbed, in merge order.
    parts: Vec<Vec<usize>>,
}

impl GroupSet {
    pub fn new(height: usize, capacity: usize) -> Self {
        let words = height.div_ceil(64).max(1);
        GroupSet {
            words,
            sizes: Vec::with_capacity(capacity),
            low: Vec::with_capacity(capacity * words),
            high: Vec::with_capacity(capacity * words),
            slots: Vec::with_capacity(capacity),
            parts: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    /// Appends a group of `size` members whose row `p` has slot mask `mask(p)`.
    pub fn push(&mut self, size: usize, height: usize, mut mask: impl FnMut(usize) -> u8) {
        let start = self.low.len();
        self.low.resize(start + self.words, 0);
        self.high.resize(start + self.words, 0);
        let mut slots = 0;
        for p in 0..height {
            let m = mask(p);
            let bit = 1u64 << (p % 64);
            if m & SLOT_L != 0 {
                self.low[start + p / 64] |= bit;
            }
            if m & SLOT_H != 0 {
                self.high[start + p / 64] |= bit;
            }
            slots += m.count_ones();
        }
        self.parts.push(vec![self.sizes.len()]);
        self.sizes.push(size);
        self.slots.push(slots);
    }

    pub fn is_all_empty(&self) -> bool {
        self.slots.iter().all(|&s| s == 0)
    }

    fn compatible(&self, a: usize, b: usize, group_max: usize) -> bool {
        if self.sizes[a] + self.sizes[b] > group_max {
            return false;
        }
        let (wa, wb) = (a * self.words, b * self.words);
        (0..self.words).all(|k| {
            self.low[wa + k] & self.low[wb + k] == 0 && self.high[wa + k] & self.high[wb + k] == 0
        })
    }

    fn absorb(&mut self, into: usize, from: usize) {
        let w = self.words;
        for k in 0..w {
            self.low[into * w + k] |= self.low[from * w + k];
            self.high[into * w + k] |= self.high[from * w + k];
        }
        self.sizes[into] += self.sizes[from];
        self.slots[into] += self.slots[from];
        let moved = std::mem::take(&mut self.parts[from]);
        self.parts[into].extend(moved);
        self.sizes.remove(from);
        self.slots.remove(from);
        self.parts.remove(from);
        self.low.drain(from * w..(from + 1) * w);
        self.high.drain(from * w..(from + 1) * w);
    }

    /// Runs the greedy merge loop in place.
    pub fn pack(&mut self, group_max: usize) {
        if self.len() > 0 && self.is_all_empty() {
            // a section without any nonzero collapses to one empty group
            self.sizes.truncate(1);
            self.slots.truncate(1);
            self.parts.truncate(1);
            self.low.truncate(self.words);
            self.high.truncate(self.words);
            self.sizes[0] = 0;
            self.parts[0].clear();
            return;
        }
        let mut current = 0;
        while current < self.len() {
            let mut best: Option<(usize, u32)> = None;
            if self.sizes[current] < group_max {
                for cand in current + 1..self.len() {
                    if !self.compatible(current, cand, group_max) {
                        continue;
                    }
                    let density = self.slots[cand];
                    if best.is_none_or(|(_, d)| density > d) {
                        best = Some((cand, density));
                    }
                }
            }
            match best {
                Some((cand, _)) => self.absorb(current, cand),
                None => current += 1,
            }
        }
    }

    pub fn into_parts(self) -> Vec<Vec<usize>> {
        self.parts
    }
}

fn group_set_of(groups: &[ColumnGroup], height: usize) -> GroupSet {
    let mut set = GroupSet::new(height, groups.len());
    for g in groups {
        set.push(g.members.len(), height, |p| g.cells[p].mask());
    }
    set
}

/// Packs one section's group list with the greedy merge loop.
pub fn pack_section(section: &Section, group_max: usize) -> Vec<ColumnGroup> {
    let height = section.row_map.len();
    let mut set = group_set_of(&section.groups, height);
    set.pack(group_max);
    set.into_parts()
        .into_iter()
        .map(|parts| {
            if parts.is_empty() {
                return ColumnGroup {
                    members: Vec::new(),
                    cells: vec![Slot::Empty; height],
                };
            }
            let mut iter = parts.into_iter();
            let first = section.groups[iter.next().unwrap()].clone();
            iter.fold(first, |acc, i| acc.merged(&section.groups[i]))
        })
        .collect()
}

/// Packs every section independently.
pub fn pack_matrix(pm: &PackedMatrix) -> PackedMatrix {
    let g = pm.geometry.group_max;
    let mut out = pm.clone();
    for section in &mut out.sections {
        section.groups = pack_section(section, g);
    }
    out
}

/// Packed width of the section at `row_map` with columns in `col_order`,
/// computed on slot masks only.
pub(crate) fn packed_width(
    masks: &MaskMatrix,
    row_map: &[Option<usize>],
    col_order: &[usize],
    group_max: usize,
) -> usize {
    let height = row_map.len();
    let mut set = GroupSet::new(height, col_order.len());
    for &col in col_order {
        set.push(1, height, |p| row_map[p].map_or(0, |r| masks.get(r, col)));
    }
    set.pack(group_max);
    set.len()
}

/// The matrix recovered from a packed form.
#[derive(Debug, Clone, PartialEq)]
pub enum Unpacked {
    Weight(WeightMatrix),
    Subword {
        format: SubwordFormat,
        rows: usize,
        cols: usize,
        cells: Vec<SubwordCell>,
    },
}

impl Unpacked {
    /// Integer weights the hardware multiplies by.
    pub fn weights(&self) -> WeightMatrix {
        match self {
            Unpacked::Weight(m) => m.clone(),
            Unpacked::Subword {
                format,
                rows,
                cols,
                cells,
            } => {
                let values = cells.iter().map(|c| c.value(*format) as i8).collect();
                WeightMatrix::new(*rows, *cols, values, 1.0).expect("consistent dimensions")
            }
        }
    }

    /// True iff this reproduces every cell of `input`.
    pub fn matches(&self, input: PackInput<'_>) -> bool {
        match (self, input) {
            (Unpacked::Weight(a), PackInput::Weight(b)) => {
                a.rows() == b.rows() && a.cols() == b.cols() && a.values() == b.values()
            }
            (
                Unpacked::Subword {
                    format,
                    rows,
                    cols,
                    cells,
                },
                PackInput::Subword(b),
            ) => *format == b.format && *rows == b.rows() && *cols == b.cols() && *cells == b.cells,
            _ => false,
        }
    }
}

/// Inverts packing using the per-occupant provenance.
pub fn unpack(pm: &PackedMatrix) -> Result<Unpacked> {
    let (rows, cols) = (pm.rows, pm.cols);
    let mut seen = vec![false; rows * cols];
    let mut payloads: Vec<Option<Payload>> = vec![None; rows * cols];
    let mut row_seen = vec![false; rows];
    let h = pm.geometry.array_rows;
    for (s, section) in pm.sections.iter().enumerate() {
        if section.row_map.len() != h {
            return Err(Error::Corrupt(format!(
                "section {s} has {} rows, expected {h}",
                section.row_map.len()
            )));
        }
        for row in section.row_map.iter().flatten() {
            if *row >= rows || std::mem::replace(&mut row_seen[*row], true) {
                return Err(Error::Corrupt(format!("row {row} mapped twice or out of range")));
            }
        }
        for (gi, group) in section.groups.iter().enumerate() {
            if group.members.len() > pm.geometry.group_max {
                return Err(Error::Corrupt(format!(
                    "section {s} group {gi} has {} members, limit {}",
                    group.members.len(),
                    pm.geometry.group_max
                )));
            }
            if group.cells.len() != h {
                return Err(Error::Corrupt(format!("section {s} group {gi} has wrong height")));
            }
            for (pos, slot) in group.cells.iter().enumerate() {
                check_slot(slot, pm.mode)
                    .map_err(|m| Error::Corrupt(format!("section {s} group {gi} row {pos}: {m}")))?;
                for occ in slot.occupants() {
                    let row = section.row_map[pos].ok_or_else(|| {
                        Error::Corrupt(format!("occupant in padding row {pos} of section {s}"))
                    })?;
                    if occ.col >= cols || !group.members.contains(&occ.col) {
                        return Err(Error::Corrupt(format!(
                            "column {} is not a member of section {s} group {gi}",
                            occ.col
                        )));
                    }
                    let idx = row * cols + occ.col;
                    if std::mem::replace(&mut seen[idx], true) {
                        return Err(Error::Corrupt(format!(
                            "duplicate provenance for ({row}, {})",
                            occ.col
                        )));
                    }
                    payloads[idx] = Some(occ.payload);
                }
            }
        }
    }
    match pm.mode {
        PackMode::Weight => {
            let values = payloads
                .iter()
                .map(|p| match p {
                    Some(Payload::Weight(w)) => Ok(*w),
                    None => Ok(0),
                    Some(Payload::Subword(_)) => {
                        Err(Error::Corrupt("subword payload in weight mode".into()))
                    }
                })
                .collect::<Result<Vec<i8>>>()?;
            let mut m = WeightMatrix::new(rows, cols, values, pm.scale)?;
            m.name = pm.name.clone();
            Ok(Unpacked::Weight(m))
        }
        PackMode::Subword => {
            let format = pm
                .format
                .ok_or_else(|| Error::Corrupt("subword mode without a format".into()))?;
            let cells = payloads
                .iter()
                .map(|p| match p {
                    Some(Payload::Subword(c)) => Ok(*c),
                    None => Ok(SubwordCell::ZERO),
                    Some(Payload::Weight(_)) => {
                        Err(Error::Corrupt("weight payload in subword mode".into()))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Unpacked::Subword {
                format,
                rows,
                cols,
                cells,
            })
        }
    }
}

fn check_slot(slot: &Slot, mode: PackMode) -> std::result::Result<(), &'static str> {
    let class = |o: &Occupant| match o.payload {
        Payload::Subword(c) => Some(c.class),
        Payload::Weight(_) => None,
    };
    match (mode, slot) {
        (_, Slot::Empty) => Ok(()),
        (PackMode::Weight, Slot::Whole(o)) => match o.payload {
            Payload::Weight(w) if w != 0 => Ok(()),
            _ => Err("weight slot must hold a nonzero weight"),
        },
        (PackMode::Weight, Slot::Split { .. }) => Err("split slot in weight mode"),
        (PackMode::Subword, Slot::Whole(o)) => match class(o) {
            Some(SubwordClass::Full) => Ok(()),
            _ => Err("only full-precision cells may own both slots"),
        },
        (PackMode::Subword, Slot::Split { low, high }) => {
            if low.is_none() && high.is_none() {
                return Err("empty split slot");
            }
            if low.is_some_and(|o| class(&o) != Some(SubwordClass::L)) {
                return Err("L slot holds a non-L cell");
            }
            if high.is_some_and(|o| class(&o) != Some(SubwordClass::H)) {
                return Err("H slot holds a non-H cell");
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema: String,
    pub name: String,
    pub mode: PackMode,
    pub original_size: usize,
    pub packed_size: usize,
    pub compression_rate: f64,
    pub density: f64,
    /// Tiles loaded by the folded schedule.
    pub tile_count: usize,
    /// Tiles when every section starts a fresh tile.
    pub unfolded_tile_count: usize,
    pub nonzeros: usize,
    pub section_widths: Vec<usize>,
}

pub fn compression_report(pm: &PackedMatrix) -> CompressionReport {
    let geom = &pm.geometry;
    let widths = pm.widths();
    let original_size = pm.rows * pm.cols;
    let packed_size: usize = widths.iter().map(|w| w * geom.array_rows).sum();
    let nonzeros = pm.occupant_count();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    CompressionReport {
        schema: REPORT_SCHEMA.to_string(),
        name: pm.name.clone(),
        mode: pm.mode,
        original_size,
        packed_size,
        compression_rate: ratio(original_size, packed_size),
        density: ratio(nonzeros, packed_size),
        tile_count: crate::simarray::schedule_tiles(pm, geom, true).tiles.len(),
        unfolded_tile_count: widths.iter().map(|&w| geom.tiles_for_width(w)).sum(),
        nonzeros,
        section_widths: widths,
    }
}

/// Compression rate of one section of `cols` original columns packed into
/// `groups` groups.
pub fn section_rate(cols: usize, groups: usize) -> f64 {
    cols as f64 / groups as f64
}

impl DensityBitmap for PackedMatrix {
    fn density_bitmap(&self) -> Bitmap {
        let h = self.geometry.array_rows;
        let width = self.sections.iter().map(Section::width).max().unwrap_or(0);
        let n = self.sections.len();
        let height = if n == 0 { 0 } else { n * h + n - 1 };
        let mut pixels = Vec::with_capacity(width * height);
        for (s, section) in self.sections.iter().enumerate() {
            if s > 0 {
                pixels.extend(std::iter::repeat_n(PIXEL_SEPARATOR, width));
            }
            for pos in 0..h {
                for g in 0..width {
                    let occupied = section
                        .groups
                        .get(g)
                        .is_some_and(|grp| !grp.cells[pos].is_empty());
                    pixels.push(if occupied { PIXEL_OCCUPIED } else { PIXEL_ZERO });
                }
            }
        }
        Bitmap {
            width,
            height,
            pixels,
        }
    }
}

// ---------------------------------------------------------------------------
// JSON form

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SlotKind {
    Weight,
    L,
    H,
    Full,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellJson {
    row: usize,
    col_origin: usize,
    slot: SlotKind,
    value: i32,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupJson {
    members: Vec<usize>,
    cells: Vec<CellJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SectionJson {
    row_map: Vec<Option<usize>>,
    groups: Vec<GroupJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackedJson {
    schema: String,
    name: String,
    mode: PackMode,
    format: Option<String>,
    geometry: ArrayGeometry,
    rows: usize,
    cols: usize,
    scale: f64,
    sections: Vec<SectionJson>,
}

impl PackedMatrix {
    pub fn to_json(&self) -> String {
        let sections = self
            .sections
            .iter()
            .map(|s| SectionJson {
                row_map: s.row_map.clone(),
                groups: s
                    .groups
                    .iter()
                    .map(|g| GroupJson {
                        members: g.members.clone(),
                        cells: g
                            .cells
                            .iter()
                            .enumerate()
                            .flat_map(|(row, slot)| {
                                slot.occupants().map(move |o| CellJson {
                                    row,
                                    col_origin: o.col,
                                    slot: match o.payload {
                                        Payload::Weight(_) => SlotKind::Weight,
                                        Payload::Subword(c) => match c.class {
                                            SubwordClass::L => SlotKind::L,
                                            SubwordClass::H => SlotKind::H,
                                            _ => SlotKind::Full,
                                        },
                                    },
                                    value: o.payload.value(self.format),
                                })
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let doc = PackedJson {
            schema: REPORT_SCHEMA.to_string(),
            name: self.name.clone(),
            mode: self.mode,
            format: self.format.map(|f| f.to_string()),
            geometry: self.geometry,
            rows: self.rows,
            cols: self.cols,
            scale: self.scale,
            sections,
        };
        serde_json::to_string_pretty(&doc).expect("packed matrix serializes")
    }

    /// Parses and structurally validates the JSON form.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PackedJson = serde_json::from_str(text)?;
        if doc.schema != REPORT_SCHEMA {
            return Err(Error::Invalid(format!("unknown schema {:?}", doc.schema)));
        }
        doc.geometry.validate()?;
        let format = doc.format.as_deref().map(str::parse::<SubwordFormat>).transpose()?;
        let h = doc.geometry.array_rows;
        let mut sections = Vec::with_capacity(doc.sections.len());
        for (s, sec) in doc.sections.into_iter().enumerate() {
            if sec.row_map.len() != h {
                return Err(Error::Corrupt(format!("section {s} row_map length")));
            }
            let mut groups = Vec::with_capacity(sec.groups.len());
            for g in sec.groups {
                let mut cells = vec![Slot::Empty; h];
                for c in g.cells {
                    if c.row >= h {
                        return Err(Error::Corrupt(format!("cell row {} outside section", c.row)));
                    }
                    let payload = match (c.slot, format) {
                        (SlotKind::Weight, None) => Payload::Weight(
                            i8::try_from(c.value)
                                .map_err(|_| Error::Corrupt(format!("weight {} out of range", c.value)))?,
                        ),
                        (kind, Some(f)) if kind != SlotKind::Weight => {
                            let class = match kind {
                                SlotKind::L => SubwordClass::L,
                                SlotKind::H => SubwordClass::H,
                                _ => SubwordClass::Full,
                            };
                            Payload::Subword(SubwordCell::from_value(class, c.value, f))
                        }
                        _ => return Err(Error::Corrupt("slot kind does not match mode".into())),
                    };
                    let incoming = Slot::from_payload(Occupant {
                        col: c.col_origin,
                        payload,
                    });
                    let slot = &mut cells[c.row];
                    if slot.mask() & incoming.mask() != 0 || incoming.is_empty() {
                        return Err(Error::Corrupt(format!(
                            "slot collision at section {s} row {}",
                            c.row
                        )));
                    }
                    *slot = slot.combine(incoming);
                }
                groups.push(ColumnGroup {
                    members: g.members,
                    cells,
                });
            }
            sections.push(Section {
                row_map: sec.row_map,
                groups,
            });
        }
        Ok(PackedMatrix {
            geometry: doc.geometry,
            mode: doc.mode,
            format,
            rows: doc.rows,
            cols: doc.cols,
            scale: doc.scale,
            name: doc.name,
            sections,
        })
    }
}

impl CompressionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
