//! Magnitude pruning, 8-bit quantization and subword pruning.
//!
//! Subwords use a sign-magnitude split of the 7 magnitude bits of an 8-bit
//! weight: the low `l_bits` form subword L and the remaining `h_bits` form
//! subword H. A format labelled `{H,L}` (bit-lengths of the two subwords in
//! the 8-bit word) has `l_bits = L` and `h_bits = H - 1`, the sign bit being
//! counted once, in the H field.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensorio::{RealMatrix, WeightMatrix};

/// Largest magnitude representable in sign-magnitude 8-bit.
pub const MAX_MAGNITUDE: u8 = 127;
const MAGNITUDE_BITS: u32 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub epochs: Vec<usize>,
    pub rates: Vec<f64>,
}

/// Number of pruning events spread over the first half of training.
const PRUNE_EVENTS: usize = 10;

/// Gradual pruning schedule: cubic ramp `P * (1 - (1 - t/T)^3)` with
/// `T = ceil(E/2)`, sampled every `ceil(T/10)` epochs and always ending at
/// `(T, P)`.
pub fn prune_schedule(total_epochs: usize, final_rate: f64) -> Result<PruneSchedule> {
    if total_epochs < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 epochs, got {total_epochs}"
        )));
    }
    if !(0.0..1.0).contains(&final_rate) {
        return Err(Error::Invalid(format!(
            "pruning rate must be in [0, 1), got {final_rate}"
        )));
    }
    let horizon = total_epochs.div_ceil(2);
    let step = horizon.div_ceil(PRUNE_EVENTS);
    let mut epochs: Vec<usize> = (1..).map(|k| k * step).take_while(|&e| e < horizon).collect();
    epochs.push(horizon);
    let rates = epochs
        .iter()
        .map(|&e| {
            let remaining = 1.0 - e as f64 / horizon as f64;
            final_rate * (1.0 - remaining.powi(3))
        })
        .collect();
    Ok(PruneSchedule { epochs, rates })
}

/// Zeroes the `floor(rate * R * C)` smallest-magnitude entries, lower
/// row-major index first among equal magnitudes.
pub fn magnitude_prune(m: &WeightMatrix, rate: f64) -> Result<WeightMatrix> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!(
            "pruning rate must be in [0, 1], got {rate}"
        )));
    }
    let total = m.values().len();
    let count = ((rate * total as f64).floor() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    // stable sort keeps index order among ties
    order.sort_by_key(|&i| m.values()[i].unsigned_abs());
    let mut out = m.clone();
    let values = out.values_mut();
    for &i in &order[..count] {
        values[i] = 0;
    }
    Ok(out)
}

/// Symmetric linear quantization to `[-127, 127]` with
/// `scale = max|v| / 127`. An all-zero input yields scale 1.
pub fn quantize8(input: &RealMatrix) -> Result<WeightMatrix> {
    let max_abs = input.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Ok(WeightMatrix::zeros(input.rows, input.cols));
    }
    let scale = max_abs / MAX_MAGNITUDE as f64;
    let values = input
        .values
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    WeightMatrix::new(input.rows, input.cols, values, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubwordFormat {
    pub h_bits: u32,
    pub l_bits: u32,
}

impl SubwordFormat {
    /// The three hardware-supported splits: `{3,5}`, `{4,4}`, `{5,3}`.
    pub const SUPPORTED: [SubwordFormat; 3] = [
        SubwordFormat { h_bits: 2, l_bits: 5 },
        SubwordFormat { h_bits: 3, l_bits: 4 },
        SubwordFormat { h_bits: 4, l_bits: 3 },
    ];

    /// Builds a format from its `{H,L}` bit-length label; only the
    /// [`Self::SUPPORTED`] splits are accepted.
    pub fn from_label(h: u32, l: u32) -> Result<Self> {
        Self::SUPPORTED
            .into_iter()
            .find(|f| f.label() == (h, l))
            .ok_or_else(|| {
                Error::Invalid(format!("unsupported subword format {{{h},{l}}} (use 3,5 | 4,4 | 5,3)"))
            })
    }

    pub fn label(&self) -> (u32, u32) {
        (self.h_bits + 1, self.l_bits)
    }

    /// 2-bit selector for the MAC unit: index into [`Self::SUPPORTED`].
    pub fn mode_code(&self) -> Option<u8> {
        Self::SUPPORTED.iter().position(|f| f == self).map(|p| p as u8)
    }

    fn low_mask(&self) -> u8 {
        ((1u32 << self.l_bits) - 1) as u8
    }
}

impl fmt::Display for SubwordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, l) = self.label();
        write!(f, "{{{h},{l}}}")
    }
}

impl FromStr for SubwordFormat {
    type Err = Error;

    /// Accepts `"4,4"` or `"{4,4}"`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
        let (h, l) = inner
            .split_once(',')
            .ok_or_else(|| Error::Invalid(format!("bad subword format {s:?}")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| Error::Invalid(format!("bad subword format {s:?}")))
        };
        Self::from_label(parse(h)?, parse(l)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubwordClass {
    Zero,
    L,
    H,
    Full,
}

/// One weight after subword pruning. `magnitude` holds the full 7-bit value
/// for `Full` and `L` cells and the H field (already shifted down) for `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubwordCell {
    pub class: SubwordClass,
    pub negative: bool,
    pub magnitude: u8,
}

impl SubwordCell {
    pub const ZERO: SubwordCell = SubwordCell {
        class: SubwordClass::Zero,
        negative: false,
        magnitude: 0,
    };

    pub fn value(&self, fmt: SubwordFormat) -> i32 {
        let (low, high) = self.split(fmt);
        low + high
    }

    /// Signed contributions of the L and H fields.
    pub fn split(&self, fmt: SubwordFormat) -> (i32, i32) {
        let sign = if self.negative { -1 } else { 1 };
        let m = self.magnitude as i32;
        match self.class {
            SubwordClass::Zero => (0, 0),
            SubwordClass::L => (sign * m, 0),
            SubwordClass::H => (0, sign * (m << fmt.l_bits)),
            SubwordClass::Full => {
                let low = m & fmt.low_mask() as i32;
                (sign * low, sign * (m - low))
            }
        }
    }

    /// Recovers the cell from a stored class and reconstructed value.
    pub fn from_value(class: SubwordClass, value: i32, fmt: SubwordFormat) -> Self {
        let negative = value < 0;
        let abs = value.unsigned_abs();
        let magnitude = match class {
            SubwordClass::H => abs >> fmt.l_bits,
            _ => abs,
        } as u8;
        SubwordCell {
            class,
            negative,
            magnitude,
        }
    }
}

/// Classifies one 8-bit weight. `-128` saturates to `-127`.
pub fn classify_weight(w: i8, fmt: SubwordFormat, delta_max: f64) -> SubwordCell {
    if w == 0 {
        return SubwordCell::ZERO;
    }
    let negative = w < 0;
    let g = w.unsigned_abs().min(MAX_MAGNITUDE);
    if g >> fmt.l_bits == 0 {
        return SubwordCell {
            class: SubwordClass::L,
            negative,
            magnitude: g,
        };
    }
    let high_field = g >> fmt.l_bits;
    let h_val = (high_field as u32) << fmt.l_bits;
    let delta = (g as f64 - h_val as f64).abs() / g as f64;
    if delta <= delta_max {
        SubwordCell {
            class: SubwordClass::H,
            negative,
            magnitude: high_field,
        }
    } else {
        SubwordCell {
            class: SubwordClass::Full,
            negative,
            magnitude: g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubwordMatrix {
    /// Reference 8-bit weights (with `-128` saturated to `-127`).
    pub base: WeightMatrix,
    pub format: SubwordFormat,
    pub cells: Vec<SubwordCell>,
}

impl SubwordMatrix {
    pub fn rows(&self) -> usize {
        self.base.rows()
    }

    pub fn cols(&self) -> usize {
        self.base.cols()
    }

    pub fn cell(&self, row: usize, col: usize) -> SubwordCell {
        self.cells[row * self.cols() + col]
    }

    /// Weights as the hardware sees them after subword pruning.
    pub fn reconstructed(&self) -> WeightMatrix {
        let values = self
            .cells
            .iter()
            .map(|c| c.value(self.format) as i8)
            .collect();
        let mut m = WeightMatrix::new(self.rows(), self.cols(), values, self.base.scale())
            .expect("dimensions match base");
        m.name = self.base.name.clone();
        m
    }

    pub fn counts(&self) -> ClassCounts {
        ClassCounts::tally(self.cells.iter().map(|c| c.class))
    }
}

pub fn subword_prune(m: &WeightMatrix, fmt: SubwordFormat, delta_max: f64) -> Result<SubwordMatrix> {
    if !(delta_max > 0.0 && delta_max < 1.0) {
        return Err(Error::Invalid(format!(
            "delta_max must be in (0, 1), got {delta_max}"
        )));
    }
    let mut base = m.clone();
    for v in base.values_mut() {
        if *v == i8::MIN {
            *v = -(MAX_MAGNITUDE as i8);
        }
    }
    let cells = base
        .values()
        .iter()
        .map(|&w| classify_weight(w, fmt, delta_max))
        .collect();
    Ok(SubwordMatrix {
        base,
        format: fmt,
        cells,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub zero: usize,
    pub l: usize,
    pub h: usize,
    pub full: usize,
}

impl ClassCounts {
    pub fn tally(classes: impl IntoIterator<Item = SubwordClass>) -> Self {
        let mut c = ClassCounts::default();
        for class in classes {
            match class {
                SubwordClass::Zero => c.zero += 1,
                SubwordClass::L => c.l += 1,
                SubwordClass::H => c.h += 1,
                SubwordClass::Full => c.full += 1,
            }
        }
        c
    }

    pub fn nonzero(&self) -> usize {
        self.l + self.h + self.full
    }

    pub fn total(&self) -> usize {
        self.zero + self.nonzero()
    }
}

fn one_decimal<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 10.0).round() / 10.0)
}

/// Per-format proportions over the nonzero weights, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormatStats {
    pub format: String,
    #[serde(serialize_with = "one_decimal")]
    pub l_pct: f64,
    #[serde(serialize_with = "one_decimal")]
    pub h_pct: f64,
    #[serde(serialize_with = "one_decimal")]
    pub full_pct: f64,
    #[serde(skip)]
    pub subword: SubwordFormat,
    #[serde(skip)]
    pub counts: ClassCounts,
}

impl FormatStats {
    fn from_counts(fmt: SubwordFormat, counts: ClassCounts) -> Self {
        let nz = counts.nonzero().max(1) as f64;
        FormatStats {
            format: fmt.to_string(),
            l_pct: 100.0 * counts.l as f64 / nz,
            h_pct: 100.0 * counts.h as f64 / nz,
            full_pct: 100.0 * counts.full as f64 / nz,
            subword: fmt,
            counts,
        }
    }
}

/// Evaluates every supported format and picks the one whose L and H shares
/// are closest, preferring fewer full-precision weights on ties.
pub fn choose_subword_format(
    m: &WeightMatrix,
    delta_max: f64,
) -> Result<(SubwordFormat, Vec<FormatStats>)> {
    let mut table = Vec::with_capacity(SubwordFormat::SUPPORTED.len());
    for fmt in SubwordFormat::SUPPORTED {
        let sw = subword_prune(m, fmt, delta_max)?;
        table.push(FormatStats::from_counts(fmt, sw.counts()));
    }
    let best = table
        .iter()
        .min_by_key(|s| (s.counts.l.abs_diff(s.counts.h), s.counts.full))
        .map(|s| s.subword)
        .expect("non-empty format list");
    Ok((best, table))
}

/// Applies the full schedule of magnitude-pruning events to a static matrix.
pub fn prune_with_schedule(m: &WeightMatrix, schedule: &PruneSchedule) -> Result<WeightMatrix> {
    let mut out = m.clone();
    for &rate in &schedule.rates {
        out = magnitude_prune(&out, rate)?;
    }
    Ok(out)
}

/// Bits of magnitude carried by an 8-bit weight under the sign-magnitude split.
pub const fn magnitude_bits() -> u32 {
    MAGNITUDE_BITS
}
