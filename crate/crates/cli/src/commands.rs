use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tightpack::anneal::{anneal, AnnealResult};
use tightpack::pack::{
    compression_report, pack_matrix, partition_sections, unpack, ArrayGeometry, CompressionReport,
    PackInput, PackMode, PackedMatrix,
};
use tightpack::prune::{
    choose_subword_format, magnitude_prune, prune_schedule, prune_with_schedule, quantize8,
    subword_prune, FormatStats,
};
use tightpack::simarray::{
    dense_matmul, estimate_cycles, schedule_tiles, simulate_schedule, CycleConfig, CycleReport,
};
use tightpack::tensorio::{load_matrix, load_real_csv, render_density, save_matrix, MatrixFormat};
use tightpack::{Error, Result};

use crate::config::{FormatChoice, RunConfig};

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Tool(Error),
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Tool(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Tool(Error::Internal(_)) => 1,
            Failure::Tool(_) => 2,
            Failure::Mismatch(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Tool(e) => write!(f, "{e}"),
            Failure::Mismatch(m) => write!(f, "verification failed: {m}"),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load(path: &Path) -> Result<tightpack::tensorio::WeightMatrix> {
    load_matrix(path, MatrixFormat::from_path(path))
}

pub enum PruneRate {
    Fixed(f64),
    Schedule { epochs: usize, rate: f64 },
}

pub fn prune(input: &Path, output: &Path, rate: PruneRate) -> Result<String> {
    let m = load(input)?;
    let pruned = match rate {
        PruneRate::Fixed(r) => magnitude_prune(&m, r)?,
        PruneRate::Schedule { epochs, rate } => prune_with_schedule(&m, &prune_schedule(epochs, rate)?)?,
    };
    save_matrix(&pruned, output, MatrixFormat::from_path(output))?;
    let s = pruned.stats();
    Ok(format!(
        "{}: {}x{}, {} nonzeros, density {:.4}",
        output.display(),
        pruned.rows(),
        pruned.cols(),
        s.nonzeros,
        s.density
    ))
}

pub fn quantize(input: &Path, output: &Path) -> Result<String> {
    let q = quantize8(&load_real_csv(input)?)?;
    save_matrix(&q, output, MatrixFormat::from_path(output))?;
    Ok(format!("{}: scale {:e}", output.display(), q.scale()))
}

#[derive(Serialize)]
struct Baseline {
    packed_size: usize,
    compression_rate: f64,
    section_widths: Vec<usize>,
}

#[derive(Serialize)]
struct AnnealSummary {
    seed: u64,
    t_init: f64,
    steps: usize,
    accepted: usize,
    initial_energy: i64,
    best_energy: i64,
    final_temp: f64,
}

#[derive(Serialize)]
struct CompressOutput {
    #[serde(flatten)]
    report: CompressionReport,
    format: Option<String>,
    geometry: ArrayGeometry,
    delta_max: Option<f64>,
    /// Greedy packing without permutation.
    baseline: Baseline,
    anneal: Option<AnnealSummary>,
    subword_stats: Option<Vec<FormatStats>>,
}

pub struct CompressOptions<'a> {
    pub config: &'a RunConfig,
    pub out_dir: &'a Path,
    pub trace: bool,
    pub jobs: Option<usize>,
}

pub fn compress(inputs: &[PathBuf], opts: &CompressOptions<'_>) -> Result<Vec<String>> {
    let mut stems = BTreeSet::new();
    for path in inputs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(Error::Invalid(format!("two inputs share the name {stem:?}")));
        }
    }
    fs::create_dir_all(opts.out_dir).map_err(|e| Error::io(opts.out_dir, e))?;
    let run = || inputs.par_iter().map(|p| compress_one(p, opts)).collect::<Vec<_>>();
    let results = match opts.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    results.into_iter().collect()
}

fn compress_one(path: &Path, opts: &CompressOptions<'_>) -> Result<String> {
    let cfg = opts.config;
    let geom = &cfg.geometry;
    let m = load(path)?;
    cfg.validate(m.cols())?;

    let (sw, stats, fmt) = match cfg.mode {
        PackMode::Weight => (None, None, None),
        PackMode::Subword => {
            let (auto, table) = choose_subword_format(&m, cfg.delta_max)?;
            let fmt = match cfg.format {
                FormatChoice::Auto => auto,
                FormatChoice::Fixed(f) => f,
            };
            (Some(subword_prune(&m, fmt, cfg.delta_max)?), Some(table), Some(fmt))
        }
    };
    let input: PackInput = match &sw {
        Some(sw) => sw.into(),
        None => (&m).into(),
    };

    let mut baseline = pack_matrix(&partition_sections(input, geom));
    baseline.name = m.name.clone();
    let base = compression_report(&baseline);

    let mut annealed: Option<AnnealResult> = None;
    let mut packed = if cfg.anneal_enabled {
        let mut acfg = cfg.anneal;
        acfg.record_trace = opts.trace;
        let res = anneal(input, geom, &acfg)?;
        let packed = res.packed.clone();
        annealed = Some(res);
        packed
    } else {
        baseline.clone()
    };
    packed.name = m.name.clone();

    let out = |suffix: &str| opts.out_dir.join(format!("{}.{suffix}", m.name));
    let packed_path = out("packed.json");
    write_file(&packed_path, packed.to_json())?;
    if let Some(res) = annealed.as_ref().filter(|_| opts.trace) {
        let trace_path = out("trace.jsonl");
        let file = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
        res.write_trace(BufWriter::new(file)).map_err(|e| Error::io(&trace_path, e))?;
    }

    let report = compression_report(&packed);
    let summary = format!(
        "{}: rate {:.3} (greedy {:.3}), density {:.3}, {} tiles",
        m.name, report.compression_rate, base.compression_rate, report.density, report.tile_count
    );
    let output = CompressOutput {
        report,
        format: fmt.map(|f| f.to_string()),
        geometry: *geom,
        delta_max: fmt.map(|_| cfg.delta_max),
        baseline: Baseline {
            packed_size: base.packed_size,
            compression_rate: base.compression_rate,
            section_widths: base.section_widths,
        },
        anneal: annealed.as_ref().map(|res| AnnealSummary {
            seed: cfg.anneal.seed,
            t_init: cfg.anneal.resolved_t_init(m.cols()),
            steps: res.steps,
            accepted: res.accepted,
            initial_energy: res.initial_energy,
            best_energy: res.best_energy,
            final_temp: res.final_temp,
        }),
        subword_stats: stats,
    };
    let json = serde_json::to_string_pretty(&output).map_err(Error::from)?;
    write_file(&out("report.json"), json)?;
    Ok(summary)
}

pub struct SimulateOptions<'a> {
    pub out_dir: &'a Path,
    pub check: bool,
    /// Weight matrices to check against, paired with the packed files;
    /// empty means the packed matrices' own unpacked weights.
    pub reference: &'a [PathBuf],
    pub fold: bool,
    pub cycles: CycleConfig,
}

pub fn simulate(
    packed: &[PathBuf],
    inputs: &[PathBuf],
    opts: &SimulateOptions<'_>,
) -> std::result::Result<Vec<String>, Failure> {
    if packed.len() != inputs.len() {
        return Err(Error::Invalid(format!(
            "{} packed matrices but {} input files",
            packed.len(),
            inputs.len()
        ))
        .into());
    }
    if !opts.reference.is_empty() && opts.reference.len() != packed.len() {
        return Err(Error::Invalid(format!(
            "{} packed matrices but {} reference matrices",
            packed.len(),
            opts.reference.len()
        ))
        .into());
    }
    fs::create_dir_all(opts.out_dir).map_err(|e| Error::io(opts.out_dir, e))?;
    let mut reports = Vec::new();
    let mut lines = Vec::new();
    for (layer, (p, x)) in packed.iter().zip(inputs).enumerate() {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let pm = PackedMatrix::from_json(&text)?;
        let x = load(x)?;
        let geom = pm.geometry;
        let ts = schedule_tiles(&pm, &geom, opts.fold);
        let out = simulate_schedule(&pm, &x, &ts)?;
        let name = if pm.name.is_empty() { format!("layer{layer}") } else { pm.name.clone() };
        write_file(&opts.out_dir.join(format!("{name}.out.csv")), out.to_csv())?;
        if opts.check {
            let weights = match opts.reference.get(layer) {
                Some(path) => load(path)?,
                None => unpack(&pm)?.weights(),
            };
            let expect = dense_matmul(&weights, &x)?;
            if let Some(i) = out.values.iter().zip(&expect.values).position(|(a, b)| a != b) {
                return Err(Failure::Mismatch(format!(
                    "{name}: output ({}, {}) is {} but the dense product gives {}",
                    i / out.cols,
                    i % out.cols,
                    out.values[i],
                    expect.values[i]
                )));
            }
        }
        let report = estimate_cycles(&ts, x.cols(), &geom, &opts.cycles).with_layer(&name);
        lines.push(format!(
            "{name}: {} tiles, {} cycles, throughput x{:.2}{}",
            report.tile_count,
            report.total_cycles,
            report.throughput_proxy,
            if opts.check { ", outputs verified" } else { "" }
        ));
        reports.push(report);
    }
    let combined = CycleReport::combine(&reports);
    write_file(&opts.out_dir.join("cycles.json"), combined.to_json())?;
    write_file(&opts.out_dir.join("layers.csv"), combined.layer_csv())?;
    Ok(lines)
}

pub fn render(input: &Path, output: &Path) -> Result<String> {
    let is_json = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
        render_density(&PackedMatrix::from_json(&text)?, output)?;
    } else {
        render_density(&load(input)?, output)?;
    }
    Ok(format!("{}", output.display()))
}
