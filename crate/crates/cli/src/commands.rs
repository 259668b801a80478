use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use potts::coupling::{self, CouplingMatrix};
use potts::diagnostics::{DiagnosticsReport, RunLabel, CSV_HEADER};
use potts::io::write_trace;
use potts::model::{exact_summary, truncation_certificate, ExactSummary, PottsModel, TruncationCertificate};
use potts::numerics::{streams, RngStream};
use potts::samplers::{run_chains, ChainTrace, Initialization, PreparedSampler, SamplerKind, SamplerOptions};
use potts::tempering::{tempered_runs, TemperingLadder};
use serde::Serialize;

use crate::config::{Command, Config, InitSpec, ModelSpec};
use crate::error::CliError;

/// R-hat above this marks a run as not converged.
pub const RHAT_WARNING: f64 = 1.2;

pub struct Context {
    pub config: Config,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: Config, command: Command) -> Result<Self, CliError> {
        config.validate(command)?;
        let out = config.output.clone();
        fs::create_dir_all(&out).map_err(CliError::io(format!("cannot create {}", out.display())))?;
        let ctx = Self { config, out };
        ctx.write("resolved_config.json", ctx.config.to_json())?;
        Ok(ctx)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(format!("cannot create {}", parent.display())))?;
        }
        fs::write(&path, contents).map_err(CliError::io(format!("cannot write {}", path.display())))
    }

    fn options(&self) -> SamplerOptions {
        SamplerOptions {
            jitter: self.config.jitter,
            epsilon: self.config.epsilon,
            bond: self.config.bond_convention,
        }
    }

    fn init(&self) -> Initialization {
        match self.config.init {
            InitSpec::Random => Initialization::Random,
            InitSpec::AllZero => Initialization::AllZero,
        }
    }

    fn coupling(&self) -> Result<Arc<CouplingMatrix>, CliError> {
        build_coupling(&self.config.model, self.config.seed).map(Arc::new)
    }

    fn label(&self, sampler: &str, beta: f64, n: usize) -> RunLabel {
        RunLabel {
            sampler: sampler.to_string(),
            model: self.config.model.label(),
            beta,
            q: self.config.q,
            n,
        }
    }
}

pub fn build_coupling(spec: &ModelSpec, seed: u64) -> Result<CouplingMatrix, CliError> {
    let mut stream = RngStream::new(seed, streams::COUPLING);
    let a = match spec {
        ModelSpec::Lattice2d { side, scale } => coupling::lattice_2d(*side, *scale)?,
        ModelSpec::CurieWeiss { n } => coupling::curie_weiss(*n)?,
        ModelSpec::ErdosRenyi { n, p } => coupling::erdos_renyi(*n, *p, &mut stream)?,
        ModelSpec::Sk { n } => coupling::sk(*n, &mut stream)?,
        ModelSpec::Hopfield { n, d } => coupling::hopfield(*n, *d, &mut stream)?,
        ModelSpec::Custom { entries } => CouplingMatrix::from_rows(entries)?,
        ModelSpec::File { path } => {
            let file = File::open(path).map_err(|e| CliError::Config {
                path: "model.path".into(),
                message: format!("cannot open {}: {e}", path.display()),
            })?;
            coupling::read_coupling(BufReader::new(file))?
        }
    };
    Ok(a)
}

fn beta_tag(beta: f64) -> String {
    format!("beta{beta}")
}

fn write_traces(dir: &Path, stem: &str, traces: &[ChainTrace], tag: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))?;
    for (i, t) in traces.iter().enumerate() {
        let path = dir.join(format!("{stem}_{tag}{i}.csv"));
        write_trace(t, &path).map_err(CliError::io(format!("cannot write {}", path.display())))?;
    }
    Ok(())
}

fn flag_unconverged(mut report: DiagnosticsReport) -> DiagnosticsReport {
    if let Some(r) = report.rhat.filter(|r| *r > RHAT_WARNING) {
        let note = format!("warning: rhat {r:.4} > {RHAT_WARNING}");
        eprintln!("{} at beta {}: {note}", report.sampler, report.beta);
        report.status = if report.status == "ok" {
            note
        } else {
            format!("{}; {note}", report.status)
        };
    }
    report
}

fn benchmark_csv(rows: &[DiagnosticsReport]) -> String {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    text
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let a = ctx.coupling()?;
    let mut buf = Vec::new();
    coupling::write_coupling(&a, &mut buf).map_err(CliError::io("cannot format coupling"))?;
    ctx.write("coupling.csv", buf)?;

    let spectrum = a.spectrum()?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "n {}", a.n());
    let _ = writeln!(stdout, "lambda_max {:.12e}", spectrum.max_eigenvalue());
    let _ = writeln!(stdout, "lambda_min {:.12e}", spectrum.min_eigenvalue());
    let betas = if ctx.config.betas.is_empty() {
        vec![1.0]
    } else {
        ctx.config.betas.clone()
    };
    for beta in betas {
        let lr = coupling::precompute_lowrank(&a, beta, ctx.config.epsilon)?;
        let _ = writeln!(stdout, "rank beta={beta} epsilon={:e} k={}", ctx.config.epsilon, lr.k);
    }
    Ok(())
}

fn run_one(
    ctx: &Context,
    a: &Arc<CouplingMatrix>,
    kind: SamplerKind,
    beta: f64,
) -> Result<(DiagnosticsReport, Vec<ChainTrace>), CliError> {
    let spec = ctx.config.sampler.as_ref().expect("validated");
    let model = PottsModel::new(Arc::clone(a), beta, ctx.config.q)?;
    let sampler = PreparedSampler::new(kind, model, ctx.options())?;
    let run = run_chains(
        &sampler,
        &ctx.init(),
        spec.m,
        spec.burn_in,
        spec.chains,
        ctx.config.seed,
    )?;
    let report = DiagnosticsReport::from_series(
        ctx.label(kind.as_str(), beta, a.n()),
        &run.phi_series(),
        run.sampling_seconds(),
        run.precompute_seconds,
    );
    Ok((flag_unconverged(report), run.traces))
}

pub fn sample(ctx: &Context) -> Result<(), CliError> {
    let a = ctx.coupling()?;
    let kind = ctx.config.sampler.as_ref().expect("validated").kind;
    let probe = PottsModel::new(Arc::clone(&a), ctx.config.betas[0], ctx.config.q)?;
    kind.check_compatible(&probe)?;

    let mut rows = Vec::new();
    for &beta in &ctx.config.betas {
        let (report, traces) = run_one(ctx, &a, kind, beta)?;
        let stem = format!("{kind}_{}", beta_tag(beta));
        write_traces(&ctx.out.join("traces"), &stem, &traces, "chain")?;
        ctx.write(&format!("diagnostics/{stem}.json"), report.to_json() + "\n")?;
        println!("{}", report.csv_row());
        rows.push(report);
    }
    ctx.write("benchmark.csv", benchmark_csv(&rows))
}

pub fn temper(ctx: &Context) -> Result<(), CliError> {
    let a = ctx.coupling()?;
    let kind = ctx.config.sampler.as_ref().expect("validated").kind;
    let sets = ctx.config.sampler.as_ref().expect("validated").chains;
    let t = ctx.config.tempering.as_ref().expect("validated");
    let ladder = TemperingLadder::new(t.ladder.clone())?;
    let schedule = ctx.config.tempering_schedule().expect("validated");
    let template = PottsModel::new(Arc::clone(&a), ladder.cold(), ctx.config.q)?;
    kind.check_compatible(&template)?;

    let runs = tempered_runs(
        kind,
        &template,
        &ladder,
        ctx.options(),
        schedule,
        &ctx.init(),
        ctx.config.seed,
        sets,
    )?;
    for (s, run) in runs.iter().enumerate() {
        write_traces(
            &ctx.out.join("traces"),
            &format!("temper_{kind}_set{s}"),
            &run.traces,
            "replica",
        )?;
        ctx.write(&format!("exchange_set_{s}.json"), run.exchange.to_json() + "\n")?;
    }

    // Every replica's sampling time is charged to the cold chain.
    let series: Vec<Vec<f64>> = runs.iter().map(|r| r.cold().phi.clone()).collect();
    let seconds_sampling: f64 = runs
        .iter()
        .flat_map(|r| &r.traces)
        .map(|t| t.wall_seconds_sampling)
        .sum();
    let seconds_precompute: f64 = runs.iter().map(|r| r.precompute_seconds).sum();
    let report = flag_unconverged(DiagnosticsReport::from_series(
        ctx.label(&format!("tempered_{kind}"), ladder.cold(), a.n()),
        &series,
        seconds_sampling,
        seconds_precompute,
    ));
    ctx.write(&format!("diagnostics/temper_{kind}_cold.json"), report.to_json() + "\n")?;
    println!("{}", report.csv_row());
    ctx.write("benchmark.csv", benchmark_csv(std::slice::from_ref(&report)))
}

#[derive(Serialize)]
struct OracleEntry {
    #[serde(flatten)]
    summary: ExactSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<TruncationCertificate>,
}

pub fn oracle(ctx: &Context) -> Result<(), CliError> {
    let a = ctx.coupling()?;
    potts::model::check_enumerable(a.n(), ctx.config.q)?;
    let mut entries = Vec::new();
    for &beta in &ctx.config.betas {
        let model = PottsModel::new(Arc::clone(&a), beta, ctx.config.q)?;
        let summary = exact_summary(&model, ctx.config.oracle.want_pmf)?;
        let certificate = ctx
            .config
            .oracle
            .epsilon
            .map(|eps| truncation_certificate(&model, eps))
            .transpose()?;
        println!(
            "beta {beta} log_z {:.12e} mean_phi {:.12e}",
            summary.log_partition, summary.mean_phi
        );
        if let Some(c) = &certificate {
            println!(
                "certificate rank {} pass_log_z {} pass_kl {}",
                c.rank, c.pass_log_z, c.pass_kl
            );
        }
        entries.push(OracleEntry { summary, certificate });
    }
    let json = serde_json::to_string_pretty(&entries).expect("oracle output serializes");
    ctx.write("oracle.json", json + "\n")
}

pub fn benchmark(ctx: &Context) -> Result<(), CliError> {
    let a = ctx.coupling()?;
    let probe = PottsModel::new(Arc::clone(&a), ctx.config.betas[0], ctx.config.q)?;
    for kind in &ctx.config.samplers {
        kind.check_compatible(&probe)?;
    }

    let mut rows = Vec::new();
    for &kind in &ctx.config.samplers {
        for &beta in &ctx.config.betas {
            let report = match run_one(ctx, &a, kind, beta) {
                Ok((report, _)) => report,
                Err(e) => {
                    eprintln!("{kind} at beta {beta} failed: {e}");
                    DiagnosticsReport::failed(ctx.label(kind.as_str(), beta, a.n()), &e.to_string())
                }
            };
            rows.push(report);
        }
    }
    rows.sort_by(|x, y| x.sampler.cmp(&y.sampler).then(x.beta.total_cmp(&y.beta)));
    let text = benchmark_csv(&rows);
    print!("{text}");
    ctx.write("benchmark.csv", text)
}
