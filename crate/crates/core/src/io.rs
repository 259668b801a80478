//! Trace files: one CSV row per kept iteration plus a JSON sidecar.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::samplers::{ChainTrace, SamplerKind};

/// Timings and seed lineage of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub sampler: SamplerKind,
    pub n: usize,
    pub q: usize,
    pub beta: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub rows: usize,
    pub master_seed: u64,
    pub stream_id: u64,
    pub wall_seconds_sampling: f64,
    pub wall_seconds_precompute: f64,
}

impl TraceSidecar {
    pub fn of(trace: &ChainTrace) -> Self {
        Self {
            sampler: trace.kind,
            n: trace.n,
            q: trace.q,
            beta: trace.beta,
            iterations: trace.iterations,
            burn_in: trace.burn_in,
            rows: trace.rows(),
            master_seed: trace.master_seed,
            stream_id: trace.stream_id,
            wall_seconds_sampling: trace.wall_seconds_sampling,
            wall_seconds_precompute: trace.wall_seconds_precompute,
        }
    }
}

/// Writes `iter,phi,x_1..x_n` with 1-based iterations and states.
pub fn write_trace_csv<W: Write>(trace: &ChainTrace, out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    write!(out, "iter,phi")?;
    for i in 1..=trace.n {
        write!(out, ",x_{i}")?;
    }
    writeln!(out)?;
    for row in 0..trace.rows() {
        write!(out, "{},{:.16e}", trace.iteration_of(row), trace.phi[row])?;
        for &s in trace.draw(row) {
            write!(out, ",{}", s as u32 + 1)?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// Path of the sidecar that belongs to a trace CSV.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes the CSV at `csv` and its sidecar next to it.
pub fn write_trace(trace: &ChainTrace, csv: &Path) -> io::Result<()> {
    write_trace_csv(trace, File::create(csv)?)?;
    let json = serde_json::to_string_pretty(&TraceSidecar::of(trace)).map_err(io::Error::other)?;
    std::fs::write(sidecar_path(csv), json + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::curie_weiss;
    use crate::model::PottsModel;
    use crate::numerics::RngStream;
    use crate::samplers::{run_chain, Initialization, PreparedSampler};
    use std::sync::Arc;

    fn trace() -> ChainTrace {
        let m = PottsModel::new(Arc::new(curie_weiss(3).unwrap()), 0.5, 3).unwrap();
        let s = PreparedSampler::new(SamplerKind::HeatBath, m, Default::default()).unwrap();
        run_chain(&s, &Initialization::Random, 6, 2, RngStream::new(4, 0)).unwrap()
    }

    #[test]
    fn csv_layout() {
        let t = trace();
        let mut buf = Vec::new();
        write_trace_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,phi,x_1,x_2,x_3");
        assert_eq!(lines.len(), 5);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[0], "3");
        assert_eq!(first[1].parse::<f64>().unwrap(), t.phi[0]);
        let states: Vec<u32> = first[2..].iter().map(|s| s.parse().unwrap()).collect();
        let expected: Vec<u32> = t.draw(0).iter().map(|&s| s as u32 + 1).collect();
        assert_eq!(states, expected);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("chain_0.csv");
        let t = trace();
        write_trace(&t, &csv).unwrap();
        let meta: TraceSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&csv)).unwrap()).unwrap();
        assert_eq!(meta, TraceSidecar::of(&t));
        assert_eq!(meta.rows, 4);
    }
}
