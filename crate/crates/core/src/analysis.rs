//! Correlating fragmentation with measured peak RSS.
//!
//! Per workload, every allocator contributes one point: its fragmentation
//! ratio and its mean peak RSS over repeated runs. The Spearman coefficient
//! over those points says whether the metric orders allocators the same way
//! memory usage does.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use crate::error::AnalysisError;

/// Coefficients above this are reported as strong correlations.
pub const STRONG_THRESHOLD: f64 = 0.65;

pub const RSS_HEADER: [&str; 4] = ["workload", "allocator", "sample_index", "peak_rss_kib"];

pub const STUDY_HEADER: &str =
    "workload,input,jobs,rss_min_mib,rss_max_mib,frag_min_pct,frag_max_pct,spearman,strong";

pub const SCATTER_HEADER: &str = "workload,allocator,frag,rss,rss_err";

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's rank correlation: Pearson's coefficient of the average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AnalysisError::TooFew(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    // mean rank is (n + 1) / 2 regardless of ties
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (dx, dy) = (a - mean, b - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RssSample {
    pub workload: String,
    pub allocator: String,
    pub sample_index: u64,
    pub peak_rss_kib: u64,
}

/// Reads `workload,allocator,sample_index,peak_rss_kib` rows.
pub fn parse_rss_samples<R: Read>(source: R) -> Result<Vec<RssSample>, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(source);
    let mut records = reader.records();
    let malformed = |line: u64, reason: String| AnalysisError::Malformed { line, reason };
    let header = match records.next() {
        Some(r) => r.map_err(|e| malformed(1, e.to_string()))?,
        None => return Err(AnalysisError::NoSamples),
    };
    if header.iter().ne(RSS_HEADER.iter().copied()) {
        return Err(malformed(1, format!("expected header `{}`", RSS_HEADER.join(","))));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(malformed(line, format!("expected 4 fields, got {}", record.len())));
        }
        let sample_index = record[2].parse().map_err(|_| malformed(line, format!("bad sample_index `{}`", &record[2])))?;
        let peak_rss_kib: u64 =
            record[3].parse().map_err(|_| malformed(line, format!("bad peak_rss_kib `{}`", &record[3])))?;
        if peak_rss_kib == 0 {
            return Err(malformed(line, "peak_rss_kib must be positive".into()));
        }
        let sample = RssSample {
            workload: record[0].to_string(),
            allocator: record[1].to_string(),
            sample_index,
            peak_rss_kib,
        };
        if !seen.insert((sample.workload.clone(), sample.allocator.clone(), sample_index)) {
            return Err(AnalysisError::Duplicate(format!(
                "{}/{} sample {}",
                sample.workload, sample.allocator, sample_index
            )));
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssSummary {
    pub mean_mib: f64,
    pub stddev_mib: f64,
}

/// Mean and sample standard deviation of peak RSS values given in KiB, in MiB.
pub fn summarize_rss(samples_kib: &[u64]) -> Result<RssSummary, AnalysisError> {
    if samples_kib.is_empty() {
        return Err(AnalysisError::NoSamples);
    }
    let mib: Vec<f64> = samples_kib.iter().map(|&k| k as f64 / 1024.0).collect();
    let n = mib.len() as f64;
    let mean_mib = mib.iter().sum::<f64>() / n;
    let stddev_mib = if mib.len() == 1 {
        0.0
    } else {
        (mib.iter().map(|v| (v - mean_mib).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RssSummary { mean_mib, stddev_mib })
}

pub type RssTable = BTreeMap<(String, String), RssSummary>;

/// Summaries keyed by `(workload, allocator)`.
pub fn summarize_samples(samples: &[RssSample]) -> RssTable {
    let mut grouped: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for s in samples {
        grouped.entry((s.workload.clone(), s.allocator.clone())).or_default().push(s.peak_rss_kib);
    }
    grouped
        .into_iter()
        .map(|(k, v)| (k, summarize_rss(&v).expect("groups are never empty")))
        .collect()
}

/// The fragmentation of one allocator on one workload.
#[derive(Debug, Clone, PartialEq)]
pub struct FragEntry {
    pub workload: String,
    pub input: String,
    pub allocator: String,
    /// Fragmentation ratio as a fraction.
    pub ratio: f64,
    pub jobs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub workload: String,
    pub input: String,
    pub jobs: u64,
    pub rss_min_mib: f64,
    pub rss_max_mib: f64,
    pub frag_min_pct: f64,
    pub frag_max_pct: f64,
    pub spearman: f64,
    pub strong: bool,
}

/// One workload's allocators in name order, each with its entry and RSS summary.
struct Joined<'a> {
    workload: &'a str,
    points: Vec<(&'a FragEntry, RssSummary)>,
}

fn join<'a>(frag: &'a [FragEntry], rss: &RssTable) -> Result<Vec<Joined<'a>>, AnalysisError> {
    let mut by_workload: BTreeMap<&str, BTreeMap<&str, &FragEntry>> = BTreeMap::new();
    for e in frag {
        if by_workload.entry(&e.workload).or_default().insert(&e.allocator, e).is_some() {
            return Err(AnalysisError::Duplicate(format!("{}/{}", e.workload, e.allocator)));
        }
    }
    let mut missing = Vec::new();
    for e in frag {
        if !rss.contains_key(&(e.workload.clone(), e.allocator.clone())) {
            missing.push(format!("{}/{} (rss)", e.workload, e.allocator));
        }
    }
    for (workload, allocator) in rss.keys() {
        let present = by_workload.get(workload.as_str()).is_some_and(|m| m.contains_key(allocator.as_str()));
        if !present {
            missing.push(format!("{workload}/{allocator} (fragmentation)"));
        }
    }
    if !missing.is_empty() {
        return Err(AnalysisError::Missing(missing));
    }
    Ok(by_workload
        .into_iter()
        .map(|(workload, allocs)| Joined {
            workload,
            points: allocs
                .into_values()
                .map(|e| (e, rss[&(e.workload.clone(), e.allocator.clone())]))
                .collect(),
        })
        .collect())
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// One row per workload, ordered by workload name.
pub fn correlate(frag: &[FragEntry], rss: &RssTable) -> Result<Vec<StudyRow>, AnalysisError> {
    let mut rows = Vec::new();
    for group in join(frag, rss)? {
        let wrap = |source| AnalysisError::Workload { workload: group.workload.to_string(), source: Box::new(source) };
        if group.points.len() < 2 {
            return Err(AnalysisError::TooFewAllocators(group.workload.to_string()));
        }
        let inputs: BTreeSet<&str> = group.points.iter().map(|(e, _)| e.input.as_str()).collect();
        if inputs.len() > 1 {
            return Err(wrap(AnalysisError::Duplicate(format!(
                "conflicting inputs {}",
                inputs.into_iter().collect::<Vec<_>>().join(", ")
            ))));
        }
        let xs: Vec<f64> = group.points.iter().map(|(e, _)| e.ratio).collect();
        let ys: Vec<f64> = group.points.iter().map(|(_, s)| s.mean_mib).collect();
        let rho = spearman(&xs, &ys).map_err(wrap)?;
        let (rss_min_mib, rss_max_mib) = min_max(ys.iter().copied());
        let (frag_min, frag_max) = min_max(xs.iter().copied());
        rows.push(StudyRow {
            workload: group.workload.to_string(),
            input: group.points[0].0.input.clone(),
            jobs: group.points.iter().map(|(e, _)| e.jobs).max().unwrap_or(0),
            rss_min_mib,
            rss_max_mib,
            frag_min_pct: frag_min * 100.0,
            frag_max_pct: frag_max * 100.0,
            spearman: rho,
            strong: rho > STRONG_THRESHOLD,
        });
    }
    Ok(rows)
}

pub fn write_study<W: Write>(rows: &[StudyRow], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{STUDY_HEADER}")?;
    for r in rows {
        writeln!(
            sink,
            "{},{},{},{:.3},{:.3},{:.3},{:.3},{:.6},{}",
            r.workload,
            r.input,
            r.jobs,
            r.rss_min_mib,
            r.rss_max_mib,
            r.frag_min_pct,
            r.frag_max_pct,
            r.spearman,
            r.strong
        )?;
    }
    sink.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub workload: String,
    pub allocator: String,
    pub frag: f64,
    pub rss: f64,
    pub rss_err: f64,
}

fn normalized(value: f64, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        value / max
    }
}

/// Points scaled by the per-workload maximum of each axis.
pub fn scatter_points(frag: &[FragEntry], rss: &RssTable) -> Result<Vec<ScatterPoint>, AnalysisError> {
    let mut out = Vec::new();
    for group in join(frag, rss)? {
        let frag_max = group.points.iter().map(|(e, _)| e.ratio).fold(0.0, f64::max);
        let rss_max = group.points.iter().map(|(_, s)| s.mean_mib).fold(0.0, f64::max);
        for (e, s) in &group.points {
            out.push(ScatterPoint {
                workload: e.workload.clone(),
                allocator: e.allocator.clone(),
                frag: normalized(e.ratio, frag_max),
                rss: normalized(s.mean_mib, rss_max),
                rss_err: normalized(s.stddev_mib, rss_max),
            });
        }
    }
    Ok(out)
}

pub fn emit_scatter<W: Write>(points: &[ScatterPoint], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{SCATTER_HEADER}")?;
    for p in points {
        writeln!(sink, "{},{},{},{},{}", p.workload, p.allocator, p.frag, p.rss, p.rss_err)?;
    }
    sink.flush()
}

/// Allocator x workload matrix; `values[a][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub allocators: Vec<String>,
    pub workloads: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Fragmentation and RSS matrices, each column scaled by its maximum.
pub fn heatmaps(frag: &[FragEntry], rss: &RssTable) -> Result<(Heatmap, Heatmap), AnalysisError> {
    let groups = join(frag, rss)?;
    let allocators: Vec<String> = frag.iter().map(|e| e.allocator.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let workloads: Vec<String> = groups.iter().map(|g| g.workload.to_string()).collect();
    let mut f = vec![vec![0.0; workloads.len()]; allocators.len()];
    let mut r = vec![vec![0.0; workloads.len()]; allocators.len()];
    for (w, group) in groups.iter().enumerate() {
        let frag_max = group.points.iter().map(|(e, _)| e.ratio).fold(0.0, f64::max);
        let rss_max = group.points.iter().map(|(_, s)| s.mean_mib).fold(0.0, f64::max);
        for (e, s) in &group.points {
            let a = allocators.binary_search(&e.allocator).expect("allocator collected above");
            f[a][w] = normalized(e.ratio, frag_max);
            r[a][w] = normalized(s.mean_mib, rss_max);
        }
    }
    Ok((
        Heatmap { allocators: allocators.clone(), workloads: workloads.clone(), values: f },
        Heatmap { allocators, workloads, values: r },
    ))
}

pub fn emit_heatmap<W: Write>(map: &Heatmap, mut sink: W) -> std::io::Result<()> {
    write!(sink, "allocator")?;
    for w in &map.workloads {
        write!(sink, ",{w}")?;
    }
    writeln!(sink)?;
    for (a, row) in map.allocators.iter().zip(&map.values) {
        write!(sink, "{a}")?;
        for v in row {
            write!(sink, ",{v}")?;
        }
        writeln!(sink)?;
    }
    sink.flush()
}

pub fn read_heatmap<R: BufRead>(source: R) -> Result<Heatmap, AnalysisError> {
    let mut lines = source.lines();
    let header = lines.next().transpose()?.ok_or(AnalysisError::Malformed { line: 1, reason: "empty".into() })?;
    let mut cols = header.split(',');
    if cols.next() != Some("allocator") {
        return Err(AnalysisError::Malformed { line: 1, reason: format!("unexpected header `{header}`") });
    }
    let workloads: Vec<String> = cols.map(str::to_string).collect();
    let mut allocators = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i as u64 + 2;
        let mut fields = line.split(',');
        allocators.push(fields.next().unwrap_or_default().to_string());
        let row = fields
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| AnalysisError::Malformed { line: lineno, reason: e.to_string() })?;
        if row.len() != workloads.len() {
            return Err(AnalysisError::Malformed {
                line: lineno,
                reason: format!("expected {} values, got {}", workloads.len(), row.len()),
            });
        }
        values.push(row);
    }
    Ok(Heatmap { allocators, workloads, values })
}
