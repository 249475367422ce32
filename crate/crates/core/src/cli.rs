//! The `watf` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::{DescriptorFilter, FilterRegistry};
use crate::harness::{
    compactness_before_after, threshold_retention, weight_histogram, Harness, KSweepRow, RunConfig, WeightHistogram,
    DEFAULT_EPISODES, DEFAULT_K,
};
use crate::pack::{read_pack, resolve_pack_paths, write_pack, Dtype, PackSet, Provenance, PACK_EXTENSION};
use crate::source::EpisodeSource;
use crate::synth::{generate_benchmark, SynthSpec};
use crate::watf::{adaptive_threshold, pooled_stats, PoolingMode};

#[derive(Debug, Parser)]
#[command(name = "watf", version, about = "Adaptive-threshold local descriptor filtering for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate on episode packs, or on a synthetic benchmark when no packs are given.
    Eval(EvalArgs),
    /// Write a seeded synthetic benchmark as episode packs.
    Synth(SynthArgs),
    /// Weight histogram, retention and compactness diagnostics.
    Stats(StatsArgs),
    /// Evaluate several k values over one episode stream.
    SweepK(SweepArgs),
    /// Check that a pack is well formed.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
struct SynthFlags {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    n_query: usize,
    /// Descriptors per image.
    #[arg(long = "m", default_value_t = 441)]
    m: usize,
    /// Descriptor dimension.
    #[arg(long = "c", default_value_t = 64)]
    c: usize,
    /// Fraction of background descriptors per image.
    #[arg(long, default_value_t = 0.4)]
    noise: f64,
    /// Per-coordinate perturbation scale.
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 3)]
    motifs: usize,
    /// Unit-normalize descriptors after perturbation.
    #[arg(long)]
    normalize: bool,
}

impl SynthFlags {
    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
            m_descriptors: self.m,
            c_dim: self.c,
            noise_fraction: self.noise,
            foreground_spread: self.eps,
            n_background_motifs: self.motifs,
            seed,
            normalize: self.normalize,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct SourceArgs {
    /// Pack file, directory of packs, or glob pattern.
    #[arg(long)]
    packs: Option<String>,
    /// Episodes to evaluate (default: 600 synthetic, or every episode in the packs).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Debug, Clone, Args)]
struct FilterArgs {
    /// Classify with every descriptor.
    #[arg(long)]
    no_filter: bool,
    /// Registered filter to apply.
    #[arg(long, default_value = "watf")]
    filter: String,
    #[arg(long, default_value = "per-stage")]
    pooling: String,
    /// Worker threads (0 = all cores). Does not affect results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    report: ReportFormat,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f64")]
    dtype: String,
    /// Output directory, one pack per episode.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "per-stage")]
    pooling: String,
    #[arg(long, default_value_t = 50)]
    histogram_bins: usize,
    /// Histogram CSV.
    #[arg(long)]
    out: PathBuf,
    /// Summary CSV (default: stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
    ks: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    pack: PathBuf,
}

/// Where the episodes of a run come from, as recorded in reports.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceConfig {
    Synthetic { spec: SynthSpec, n_episodes: usize },
    Packs { packs: String, files: Vec<String>, episodes_available: usize },
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub run: RunConfig,
    pub source: SourceConfig,
}

enum Source {
    Synthetic(crate::synth::SyntheticBenchmark),
    Packs(PackSet),
}

impl Source {
    fn as_dyn(&self) -> &dyn EpisodeSource {
        match self {
            Source::Synthetic(b) => b,
            Source::Packs(p) => p,
        }
    }
}

fn open_source(args: &SourceArgs) -> Result<(Source, SourceConfig, usize)> {
    match &args.packs {
        Some(pattern) => {
            let paths = resolve_pack_paths(pattern)?;
            let set = PackSet::open(&paths)?;
            let n = args.episodes.unwrap_or(set.len());
            let config = SourceConfig::Packs {
                packs: pattern.clone(),
                files: paths.iter().map(|p| p.display().to_string()).collect(),
                episodes_available: set.len(),
            };
            Ok((Source::Packs(set), config, n))
        }
        None => {
            let n = args.episodes.unwrap_or(DEFAULT_EPISODES);
            let spec = args.synth.spec(args.seed);
            let bench = generate_benchmark(&spec, n)?;
            Ok((Source::Synthetic(bench), SourceConfig::Synthetic { spec, n_episodes: n }, n))
        }
    }
}

fn run_config(filter: &FilterArgs, k: usize, n_episodes: usize, seed: u64) -> Result<RunConfig> {
    let config = RunConfig {
        k_neighbors: k,
        filtering_enabled: !filter.no_filter,
        filter: filter.filter.clone(),
        pooling_mode: filter.pooling.parse()?,
        n_episodes,
        seed,
        workers: filter.workers,
    };
    config.validate()?;
    FilterRegistry::with_defaults().get(&config.filter)?;
    Ok(config)
}

fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    config: &'a ResolvedConfig,
    report: &'a crate::harness::EvaluationReport,
}

fn eval(args: EvalArgs) -> Result<()> {
    let (source, source_config, n) = open_source(&args.source)?;
    let run = run_config(&args.filter, args.k, n, args.source.seed)?;
    let resolved = ResolvedConfig {
        tool: "watf",
        version: env!("CARGO_PKG_VERSION"),
        command: "eval",
        run: run.clone(),
        source: source_config,
    };
    if args.print_config {
        return write_output(args.out.as_deref(), &to_json(&resolved));
    }
    let report = Harness::new(run)?.evaluate(source.as_dyn())?;
    let text = match args.report {
        ReportFormat::Json => to_json(&EvalDocument { config: &resolved, report: &report }),
        ReportFormat::Text => report.to_text(),
    };
    eprintln!("evaluated {} episodes in {:.2}s", n, report.wall_time_secs);
    write_output(args.out.as_deref(), &text)
}

fn synth(args: SynthArgs) -> Result<()> {
    let dtype: Dtype = args.dtype.parse()?;
    let bench = generate_benchmark(&args.synth.spec(args.seed), args.episodes)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let provenance = Provenance { backbone: Some("synthetic".into()), ..Provenance::default() };
    let mut bytes = 0;
    for i in 0..args.episodes {
        let episode = bench.episode(i)?;
        let path = args.out.join(format!("episode-{i:05}.{PACK_EXTENSION}"));
        bytes += write_pack(&[episode], dtype, &provenance, &path)?;
    }
    println!("wrote {} packs ({} bytes) to {}", args.episodes, bytes, args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsSummary {
    pub episodes: usize,
    pub pool_size: usize,
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
    pub skewness: f64,
    pub threshold_retention: f64,
    pub support_retention: f64,
    pub query_retention: f64,
    pub fallback_rate: f64,
    pub silhouette_before: f64,
    pub silhouette_after: f64,
    pub intra_inter_before: f64,
    pub intra_inter_after: f64,
    pub silhouette_improved_fraction: f64,
}

impl StatsSummary {
    fn to_csv(&self) -> String {
        let value = serde_json::to_value(self).expect("summary serializes");
        let mut out = String::from("metric,value\n");
        // struct field order, not map order
        for key in [
            "episodes",
            "pool_size",
            "mu",
            "sigma",
            "tau",
            "skewness",
            "threshold_retention",
            "support_retention",
            "query_retention",
            "fallback_rate",
            "silhouette_before",
            "silhouette_after",
            "intra_inter_before",
            "intra_inter_after",
            "silhouette_improved_fraction",
        ] {
            out.push_str(&format!("{key},{}\n", value[key]));
        }
        out
    }
}

struct EpisodeStats {
    pool: Vec<f64>,
    support_retention: f64,
    query_retention: f64,
    fallbacks: usize,
    samples: usize,
    before: crate::harness::Compactness,
    after: crate::harness::Compactness,
}

/// Support-stage weight histogram plus retention and compactness over the
/// first `n` episodes of `source`.
pub fn collect_stats(
    source: &dyn EpisodeSource,
    n: usize,
    pooling: PoolingMode,
    bins: usize,
) -> Result<(WeightHistogram, StatsSummary)> {
    if n == 0 || source.len() < n {
        return Err(Error::Config(format!("stats needs 1..={} episodes, got {n}", source.len())));
    }
    let per_episode = (0..n)
        .into_par_iter()
        .map(|i| -> Result<EpisodeStats> {
            let wrap = |e: Error| Error::Episode { index: i, source: Box::new(e) };
            let episode = source.episode(i).map_err(wrap)?;
            let selection = crate::filter::Watf.select(&episode, pooling).map_err(wrap)?;
            let detail = selection.detail.as_ref().expect("watf records its weights");
            let (before, after) = compactness_before_after(&episode, &selection).map_err(wrap)?;
            Ok(EpisodeStats {
                pool: detail.support_weights.pool(),
                support_retention: detail.support.retention_fraction,
                query_retention: detail.query.retention_fraction,
                fallbacks: detail.support.fallback_samples.len() + detail.query.fallback_samples.len(),
                samples: episode.support().len() + episode.query().len(),
                before,
                after,
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let pool: Vec<f64> = per_episode.iter().flat_map(|s| s.pool.iter().copied()).collect();
    let histogram = weight_histogram(&pool, bins)?;
    let stats = pooled_stats(&pool)?;
    let count = per_episode.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeStats) -> f64| per_episode.iter().map(f).sum::<f64>() / count;
    let summary = StatsSummary {
        episodes: n,
        pool_size: pool.len(),
        mu: stats.mu,
        sigma: stats.sigma,
        tau: adaptive_threshold(stats.mu, stats.sigma),
        skewness: histogram.skewness,
        threshold_retention: threshold_retention(&pool)?,
        support_retention: mean(&|s| s.support_retention),
        query_retention: mean(&|s| s.query_retention),
        fallback_rate: per_episode.iter().map(|s| s.fallbacks).sum::<usize>() as f64
            / per_episode.iter().map(|s| s.samples).sum::<usize>() as f64,
        silhouette_before: mean(&|s| s.before.silhouette),
        silhouette_after: mean(&|s| s.after.silhouette),
        intra_inter_before: mean(&|s| s.before.intra_inter_ratio),
        intra_inter_after: mean(&|s| s.after.intra_inter_ratio),
        silhouette_improved_fraction: per_episode.iter().filter(|s| s.after.silhouette >= s.before.silhouette).count()
            as f64
            / count,
    };
    Ok((histogram, summary))
}

fn stats(args: StatsArgs) -> Result<()> {
    let (source, _, n) = open_source(&args.source)?;
    let pooling: PoolingMode = args.pooling.parse()?;
    let (histogram, summary) = collect_stats(source.as_dyn(), n, pooling, args.histogram_bins)?;
    let mut csv = format!("{}\n", WeightHistogram::CSV_HEADER);
    for line in histogram.csv_lines() {
        csv.push_str(&line);
        csv.push('\n');
    }
    write_output(Some(&args.out), &csv)?;
    write_output(args.summary.as_deref(), &summary.to_csv())
}

fn sweep_k(args: SweepArgs) -> Result<()> {
    let (source, _, n) = open_source(&args.source)?;
    let run = run_config(&args.filter, DEFAULT_K, n, args.source.seed)?;
    let rows = Harness::new(run)?.k_sweep(source.as_dyn(), &args.ks)?;
    let mut csv = format!("{}\n", KSweepRow::CSV_HEADER);
    for row in &rows {
        csv.push_str(&row.to_csv_line());
        csv.push('\n');
        println!(
            "k={:<3} accuracy {:.2} +- {:.2} %",
            row.k,
            100.0 * row.report.mean_accuracy,
            100.0 * row.report.ci95_half_width
        );
    }
    write_output(Some(&args.out), &csv)
}

fn validate(args: ValidateArgs) -> Result<()> {
    let (manifest, episodes) = read_pack(&args.pack)?;
    println!(
        "ok: {} episode(s), {}-way {}-shot, {} queries per class, M = {}, C = {}, dtype {:?}",
        episodes.len(),
        manifest.n_way,
        manifest.k_shot,
        manifest.n_query,
        manifest.m_descriptors,
        manifest.c_dim,
        manifest.dtype
    );
    Ok(())
}

/// Parse `args` and run the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::SweepK(a) => sweep_k(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
