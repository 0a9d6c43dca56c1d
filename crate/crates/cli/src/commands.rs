use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{anyhow, bail, Context, Result};
use binfrag::analysis::{self, FragEntry};
use binfrag::binpack::{build_instance, read_instance, write_instance};
use binfrag::frag::{self, brute_force_frag, total_frag, DEFAULT_CELL_LIMIT};
use binfrag::sim::live::ServerProcess;
use binfrag::sim::{
    best_fit_backend, first_fit_backend, load_placement, next_fit_backend, save_placement,
    segregated_fit_backend, simulate as run_simulation, PolicyBackend, SimError, SimOptions,
    DEFAULT_SIZE_CLASSES,
};
use binfrag::trace::{parse_trace, unpack_trace};
use binfrag::FragError;

use crate::config::PipelineConfig;
use crate::BackendKind;

pub const SHIM_ENV: &str = "BINFRAG_SHIM";
pub const TRACE_FILE_ENV: &str = "BINFRAG_TRACE_FILE";
pub const SIM_SERVER_ENV: &str = "BINFRAG_SIM_SERVER";

pub fn trace(program: &[String], out: &Path, shim: Option<PathBuf>) -> Result<()> {
    if !cfg!(target_os = "linux") {
        bail!("tracing is only supported on Linux; write a trace CSV by hand and use `binfrag simulate`");
    }
    let shim = shim.or_else(|| std::env::var_os(SHIM_ENV).map(PathBuf::from)).filter(|p| p.is_file());
    let Some(shim) = shim else {
        bail!(
            "interposition shim not found (pass --shim or set {SHIM_ENV}); \
             without it, write a trace CSV in the documented format and run `binfrag simulate` on it"
        );
    };
    let status = Command::new(&program[0])
        .args(&program[1..])
        .env("LD_PRELOAD", &shim)
        .env(TRACE_FILE_ENV, out)
        .status()
        .with_context(|| format!("failed to launch {}", program[0]))?;
    if !status.success() {
        eprintln!("warning: traced program exited with {status}");
    }
    let requests = parse_trace(BufReader::new(
        File::open(out).with_context(|| format!("shim produced no trace at {}", out.display()))?,
    ))
    .with_context(|| format!("reading {}", out.display()))?;
    println!("traced {} requests to {}", requests.len(), out.display());
    Ok(())
}

fn model_backend(config: &PipelineConfig) -> Result<Box<dyn PolicyBackend>> {
    let arena = config.arena()?;
    Ok(match config.backend {
        BackendKind::FirstFit => Box::new(first_fit_backend(arena)),
        BackendKind::BestFit => Box::new(best_fit_backend(arena)),
        BackendKind::NextFit => Box::new(next_fit_backend(arena)),
        BackendKind::SegregatedFit => {
            let classes = config.size_classes.as_deref().unwrap_or(&DEFAULT_SIZE_CLASSES);
            Box::new(segregated_fit_backend(arena, classes).map_err(|e| anyhow!(e))?)
        }
        BackendKind::Live => unreachable!("live backend is spawned separately"),
    })
}

pub fn simulate(trace: &Path, out: &Path, config: &PipelineConfig) -> Result<()> {
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let requests = parse_trace(BufReader::new(file)).with_context(|| format!("parsing {}", trace.display()))?;
    let (ops, lint) = unpack_trace(&requests).with_context(|| format!("unpacking {}", trace.display()))?;
    for w in lint.iter().take(10) {
        eprintln!("warning: request {}: {}", w.index, w.kind);
    }
    if lint.len() > 10 {
        eprintln!("warning: {} more lint warnings", lint.len() - 10);
    }

    let options = SimOptions { lenient: config.lenient };
    let result = if config.backend == BackendKind::Live {
        let command = std::env::var(SIM_SERVER_ENV)
            .with_context(|| format!("--backend live needs the server command in {SIM_SERVER_ENV}"))?;
        let mut words = command.split_whitespace();
        let mut cmd = Command::new(words.next().context("empty server command")?);
        cmd.args(words);
        let (mut server, backend) = ServerProcess::spawn(cmd).context("starting allocation server")?;
        let mut backend = backend.with_header(config.header_bytes);
        let result = run_simulation(&ops, &mut backend, options);
        drop(backend);
        server.child.wait().context("waiting for allocation server")?;
        result
    } else {
        let mut backend = model_backend(config)?;
        run_simulation(&ops, &mut backend, options)
    };

    let (placement, report) = match result {
        Ok(done) => done,
        Err(SimError::Backend { index, source, partial }) => {
            let mut partial_path = out.as_os_str().to_owned();
            partial_path.push(".partial");
            let partial_path = PathBuf::from(partial_path);
            save_placement(&partial, &partial_path)
                .with_context(|| format!("writing {}", partial_path.display()))?;
            bail!(
                "request {index}: backend failure: {source} (partial placement written to {})",
                partial_path.display()
            );
        }
        Err(e) => return Err(e).with_context(|| format!("simulating {}", trace.display())),
    };
    save_placement(&placement, out).with_context(|| format!("writing {}", out.display()))?;
    println!("requests: {}", requests.len());
    println!("jobs: {}", report.jobs);
    println!("leaks: {}", report.leaks);
    if report.skipped_frees + report.orphaned > 0 {
        println!("skipped frees: {}, orphaned blocks: {}", report.skipped_frees, report.orphaned);
    }
    Ok(())
}

pub fn pack(placement_path: &Path, out: &Path, config: &PipelineConfig) -> Result<()> {
    let placement =
        load_placement(placement_path).with_context(|| format!("reading {}", placement_path.display()))?;
    if let Err(problem) = placement.validate() {
        bail!("{}: {problem}", placement_path.display());
    }
    let instance = build_instance(&placement, config.page_size, config.normalization)?;
    write_instance(&instance, out).with_context(|| format!("writing {}", out.display()))?;
    println!("mappings: {}", instance.mappings.len());
    println!("jobs: {}", instance.job_count());
    Ok(())
}

pub fn frag(dir: &Path, out: Option<&Path>, oracle: bool, config: &PipelineConfig) -> Result<()> {
    let mut instance = read_instance(dir).with_context(|| format!("reading {}", dir.display()))?;
    if let Some(page_size) = config.page_size_override {
        instance.page_size = page_size;
        for m in &mut instance.mappings {
            m.page_size = page_size;
        }
    }
    let report = total_frag(&instance, config.frag_options())?;

    if oracle {
        match brute_force_frag(&instance, config.floor_gaps, DEFAULT_CELL_LIMIT) {
            Ok(check) if check.per_mapping == report.per_mapping => eprintln!("oracle: agrees"),
            Ok(check) => bail!(
                "oracle mismatch: sweep F={} L={}, rasterization F={} L={}",
                report.total_gap,
                report.total_job,
                check.total_gap,
                check.total_job
            ),
            Err(FragError::TooLarge { cells, limit }) => {
                eprintln!("oracle: skipped, {cells} cells exceed the limit of {limit}")
            }
            Err(e) => return Err(e.into()),
        }
    }

    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            frag::write_report(&report, BufWriter::new(file))?;
            println!("TOTAL,{},{},{:.6}", report.total_gap, report.total_job, report.ratio);
        }
        None => frag::write_report(&report, io::stdout().lock())?,
    }
    Ok(())
}

struct IndexRow {
    workload: String,
    input: String,
    allocator: String,
    report: PathBuf,
    jobs: u64,
}

fn read_index(path: &Path) -> Result<Vec<IndexRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != "workload,input,allocator,report,jobs" {
        bail!("{}: expected header `workload,input,allocator,report,jobs`", path.display());
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [workload, input, allocator, report, jobs] = fields[..] else {
            bail!("{}:{}: expected 5 fields", path.display(), i + 2);
        };
        rows.push(IndexRow {
            workload: workload.to_string(),
            input: input.to_string(),
            allocator: allocator.to_string(),
            report: base.join(report),
            jobs: jobs.parse().with_context(|| format!("{}:{}: bad job count", path.display(), i + 2))?,
        });
    }
    Ok(rows)
}

pub fn study(index: &Path, rss: &Path, out: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for row in read_index(index)? {
        let file = File::open(&row.report).with_context(|| format!("opening {}", row.report.display()))?;
        let report = frag::read_report(BufReader::new(file)).with_context(|| format!("reading {}", row.report.display()))?;
        entries.push(FragEntry {
            workload: row.workload,
            input: row.input,
            allocator: row.allocator,
            ratio: report.ratio,
            jobs: row.jobs,
        });
    }
    let samples = analysis::parse_rss_samples(BufReader::new(
        File::open(rss).with_context(|| format!("opening {}", rss.display()))?,
    ))
    .with_context(|| format!("reading {}", rss.display()))?;
    let table = analysis::summarize_samples(&samples);
    let rows = analysis::correlate(&entries, &table)?;
    let points = analysis::scatter_points(&entries, &table)?;
    let (frag_map, rss_map) = analysis::heatmaps(&entries, &table)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let path = out.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    };
    analysis::write_study(&rows, create("study.csv")?)?;
    analysis::emit_scatter(&points, create("scatter.csv")?)?;
    analysis::emit_heatmap(&frag_map, create("heatmap_frag.csv")?)?;
    analysis::emit_heatmap(&rss_map, create("heatmap_rss.csv")?)?;

    let strong: BTreeMap<&str, f64> =
        rows.iter().filter(|r| r.strong).map(|r| (r.workload.as_str(), r.spearman)).collect();
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "workloads: {}, strong correlations: {}", rows.len(), strong.len())?;
    for (w, rho) in strong {
        writeln!(stdout, "  {w}: {rho:.4}")?;
    }
    Ok(())
}
