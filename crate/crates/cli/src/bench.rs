use std::fmt;
use std::fs;
use std::hint::black_box;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use lion_core::projections::{project, seeded_fixture, DecayFamily};
use lion_core::{Form, MemoryCounter, MixerInputs, ZooConfig};

use crate::{parse_config, parse_forms, resolve_seed, BenchArgs};

pub const HEADER: &str = "config,form,L,d,C,peak_aux_elements,wall_time_ns,repeats";

/// One cell of the sweep. `chunk` is 0 for forms without chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchRecord {
    pub config: String,
    pub form: Form,
    pub len: usize,
    pub d: usize,
    pub chunk: usize,
    pub peak_aux_elements: usize,
    pub wall_time_ns: u128,
    pub repeats: usize,
}

impl fmt::Display for BenchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.config,
            self.form,
            self.len,
            self.d,
            self.chunk,
            self.peak_aux_elements,
            self.wall_time_ns,
            self.repeats
        )
    }
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Times one cell sequentially. The element peak is deterministic, so the
/// max over runs equals any single run's.
fn measure(
    cfg: &ZooConfig,
    inputs: &MixerInputs,
    form: Form,
    chunk: usize,
    warmups: usize,
    repeats: usize,
) -> Result<BenchRecord> {
    for _ in 0..warmups {
        black_box(form.run(inputs, chunk, cfg.scaling, &MemoryCounter::new())?);
    }
    let mut times = Vec::with_capacity(repeats);
    let mut peak = 0;
    for _ in 0..repeats {
        let ctr = MemoryCounter::new();
        let start = Instant::now();
        black_box(form.run(inputs, chunk, cfg.scaling, &ctr)?);
        times.push(start.elapsed().as_nanos().max(1));
        peak = peak.max(ctr.peak_aux_elements());
    }
    Ok(BenchRecord {
        config: cfg.name().to_string(),
        form,
        len: inputs.len(),
        d: inputs.key_dim(),
        chunk: if form.uses_chunks() { chunk } else { 0 },
        peak_aux_elements: peak,
        wall_time_ns: median(times),
        repeats,
    })
}

/// The grid of cells to measure.
pub struct Sweep<'a> {
    pub lengths: &'a [usize],
    pub chunks: &'a [usize],
    pub d: usize,
    pub seed: u64,
    pub forms: &'a [Form],
    pub warmups: usize,
    pub repeats: usize,
}

pub fn run_sweep(cfg: &ZooConfig, sweep: &Sweep<'_>) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &len in sweep.lengths {
        let (x, w) = seeded_fixture(sweep.seed, len, sweep.d, cfg);
        let inputs = project(&x, &w, cfg)?;
        for &form in sweep.forms {
            let chunks: &[usize] = if form.uses_chunks() {
                sweep.chunks
            } else {
                &[0]
            };
            for &c in chunks {
                records.push(measure(
                    cfg,
                    &inputs,
                    form,
                    c,
                    sweep.warmups,
                    sweep.repeats,
                )?);
            }
        }
    }
    Ok(records)
}

pub fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = parse_config(&args.config)?;
    if cfg.decay == DecayFamily::Diagonal {
        bail!(
            "bench covers the scalar-decay forms; {} uses per-channel decay",
            cfg.name()
        );
    }
    ensure!(!args.lengths.is_empty(), "--lengths must not be empty");
    ensure!(
        args.lengths.iter().all(|&l| l >= 1),
        "lengths must be at least 1"
    );
    ensure!(
        args.chunks.iter().all(|&c| c >= 1),
        "chunk sizes must be at least 1"
    );
    ensure!(args.dim >= 1, "--dim must be at least 1");
    ensure!(args.repeats >= 1, "--repeats must be at least 1");
    let forms = parse_forms(&args.forms)?;
    let seed = resolve_seed(args.seed)?;

    let sweep = Sweep {
        lengths: &args.lengths,
        chunks: &args.chunks,
        d: args.dim,
        seed,
        forms: &forms,
        warmups: args.warmups,
        repeats: args.repeats,
    };
    let records = run_sweep(&cfg, &sweep)?;
    let mut csv = String::from(HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.to_string());
        csv.push('\n');
    }
    match &args.out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}
