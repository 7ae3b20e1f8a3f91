//! Independent oracles and fixture generators shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use tightpack::pack::{PackMode, Section, Slot};
use tightpack::prune::{subword_prune, SubwordFormat, SubwordMatrix};
use tightpack::tensorio::WeightMatrix;

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// Each cell nonzero with probability `density`, magnitudes uniform in 1..=127.
pub fn random_sparse(rng: &mut impl Rng, rows: usize, cols: usize, density: f64) -> WeightMatrix {
    let values = (0..rows * cols)
        .map(|_| {
            if rng.gen_bool(density) {
                let mag: i8 = rng.gen_range(1..=127);
                if rng.gen_bool(0.5) {
                    -mag
                } else {
                    mag
                }
            } else {
                0
            }
        })
        .collect();
    WeightMatrix::new(rows, cols, values, 0.01).unwrap()
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sparse matrix with log-normal magnitudes `exp(mu + sigma * z)` clamped to
/// 1..=127.
pub fn lognormal_sparse(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    density: f64,
    mu: f64,
    sigma: f64,
) -> WeightMatrix {
    let values = (0..rows * cols)
        .map(|_| {
            if !rng.gen_bool(density) {
                return 0;
            }
            let mag = (mu + sigma * standard_normal(rng)).exp().round().clamp(1.0, 127.0) as i8;
            if rng.gen_bool(0.5) {
                -mag
            } else {
                mag
            }
        })
        .collect();
    WeightMatrix::new(rows, cols, values, 0.01).unwrap()
}

pub fn random_subword(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    density: f64,
    delta_max: f64,
) -> SubwordMatrix {
    let m = random_sparse(rng, rows, cols, density);
    let fmt = SubwordFormat::SUPPORTED[rng.gen_range(0..3)];
    subword_prune(&m, fmt, delta_max).unwrap()
}

/// Naive `R x C` by `C x N` product in wrapping i32.
pub fn dense_product(w: &WeightMatrix, x: &WeightMatrix) -> Vec<i32> {
    let (r, c, n) = (w.rows(), w.cols(), x.cols());
    assert_eq!(c, x.rows());
    let mut out = vec![0i32; r * n];
    for i in 0..r {
        for k in 0..n {
            let mut acc = 0i32;
            for j in 0..c {
                acc = acc.wrapping_add(w.get(i, j) as i32 * x.get(j, k) as i32);
            }
            out[i * n + k] = acc;
        }
    }
    out
}

/// Step-by-step transcription of the column packing loop on dense slot
/// grids. `grid[col][row]` holds the slot bits of a singleton group
/// (weight mode: 0 or 1 occupant; subword mode: bit 0 = L, bit 1 = H).
/// Returns the member lists of the packed groups.
pub fn alg2_oracle(grid: &[Vec<u8>], mode: PackMode, group_max: usize) -> Vec<Vec<usize>> {
    #[derive(Clone)]
    struct G {
        members: Vec<usize>,
        rows: Vec<u8>,
    }
    let mut groups: Vec<G> = grid
        .iter()
        .enumerate()
        .map(|(c, rows)| G {
            members: vec![c],
            rows: rows.clone(),
        })
        .collect();
    if !groups.is_empty() && grid.iter().flatten().all(|&b| b == 0) {
        return vec![Vec::new()];
    }
    let capacity = |rows: &[u8]| match mode {
        PackMode::Weight => rows.len(),
        PackMode::Subword => 2 * rows.len(),
    };
    let occupied = |rows: &[u8]| -> usize {
        rows.iter()
            .map(|&b| match mode {
                PackMode::Weight => usize::from(b != 0),
                PackMode::Subword => b.count_ones() as usize,
            })
            .sum()
    };
    let conflicts = |a: &[u8], b: &[u8]| {
        a.iter().zip(b).any(|(&x, &y)| match mode {
            PackMode::Weight => x != 0 && y != 0,
            PackMode::Subword => x & y != 0,
        })
    };
    let mut index = 0;
    while index < groups.len() {
        let g = groups[index].clone();
        // find-densest-group: fewest zero slots after merging, first on ties
        let mut best: Option<(usize, usize)> = None;
        for (j, cand) in groups.iter().enumerate() {
            if j == index
                || g.members.len() + cand.members.len() > group_max
                || conflicts(&g.rows, &cand.rows)
            {
                continue;
            }
            let merged: Vec<u8> = g.rows.iter().zip(&cand.rows).map(|(a, b)| a | b).collect();
            let zeros = capacity(&merged) - occupied(&merged);
            if best.is_none_or(|(_, z)| zeros < z) {
                best = Some((j, zeros));
            }
        }
        match best {
            Some((j, _)) => {
                let other = groups.remove(j);
                let at = if j < index { index - 1 } else { index };
                let g = &mut groups[at];
                g.members.extend(other.members);
                for (a, b) in g.rows.iter_mut().zip(other.rows) {
                    *a |= b;
                }
                index = at;
            }
            None => index += 1,
        }
    }
    groups.into_iter().map(|g| g.members).collect()
}

/// Slot grid of an unpacked section, in the layout `alg2_oracle` expects.
pub fn section_grid(section: &Section) -> Vec<Vec<u8>> {
    section
        .groups
        .iter()
        .map(|g| {
            g.cells
                .iter()
                .map(|s| match s {
                    Slot::Empty => 0,
                    _ => s.mask(),
                })
                .collect()
        })
        .collect()
}

/// The 8x4 fixture of the row-section example: every column pair conflicts
/// somewhere, the plain sectioned packing has widths (3, 3), swapping rows 1
/// and 4 gives (2, 3), and then swapping columns 0 and 1 in the second
/// section gives (2, 2).
pub fn fig3_matrix() -> WeightMatrix {
    WeightMatrix::from_rows(&[
        vec![1, 1, 0, 0],
        vec![0, 1, 1, 0],
        vec![0, 1, 0, 1],
        vec![1, 0, 1, 0],
        vec![1, 0, 1, 0],
        vec![0, 0, 1, 1],
        vec![1, 0, 0, 1],
        vec![0, 1, 0, 0],
    ])
    .unwrap()
}
