use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use xalign::align::{layer_scores, LayerSelection};
use xalign::baseline::{baseline_scores, BaselineMethod, DEFAULT_VARIANCE_RETAINED};
use xalign::dump::{read_dump_file, write_dump_file, ActivationDump, DumpKind};
use xalign::repr::{
    build_sentence_matrices_for, write_sentence_matrix_csv, PoolingStrategy, ReprKind,
};
use xalign::retrieval::{retrieve, LayerAggregation};
use xalign::stats::{correlate_tables, robustness_pvalue, ScoreTable};
use xalign::synth::{generate_pair, SynthSpec};

#[derive(Debug, Parser)]
#[command(
    name = "xalign",
    version,
    about = "Cross-lingual alignment scoring over activation dumps"
)]
struct Cli {
    /// Worker threads for layer-parallel work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Weak-alignment score (NASCA / NAVCA / MEXA-style) of a dump pair.
    Score(ScoreArgs),
    /// Parallel-sentence retrieval accuracy in both directions.
    Retrieve(RetrieveArgs),
    /// Linear CKA, SVCCA or ANC between a dump pair.
    Baseline(BaselineArgs),
    /// Pearson correlation of two `language,value` tables.
    Correlate(CorrelateArgs),
    /// Chance probability of reaching score k/n on a random n x n matrix.
    Robustness(RobustnessArgs),
    /// Generate a synthetic parallel dump pair.
    Synth(SynthArgs),
    /// Export one layer's sentence representations as CSV.
    ExportCsv(ExportArgs),
}

#[derive(Debug, Args)]
struct PairArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value = "nas")]
    repr: ReprKind,
    #[arg(long, default_value = "weighted")]
    pooling: PoolingStrategy,
    /// `all` or a comma-separated list of layer indices.
    #[arg(long, default_value = "all")]
    layers: LayerSelection,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Only `mean` is supported.
    #[arg(long, default_value = "mean")]
    layer_agg: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// `max` (over selected layers) or a single layer index.
    #[arg(long, default_value = "max")]
    layer_agg: String,
    /// Per-sentence hit/miss CSV.
    #[arg(long)]
    hits_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    method: BaselineMethod,
    #[arg(long, default_value_t = DEFAULT_VARIANCE_RETAINED)]
    variance_retained: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    perf: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RobustnessArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    k: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Ffn,
    Hidden,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    n_sentences: usize,
    #[arg(long, default_value_t = 256)]
    n_units: usize,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 0.0)]
    anisotropy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "ffn")]
    kind: KindArg,
    #[arg(long, default_value = "src")]
    src_lang: String,
    #[arg(long, default_value = "tgt")]
    tgt_lang: String,
    /// Output directory for both dumps and `synth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, default_value = "nas")]
    repr: ReprKind,
    #[arg(long, default_value = "weighted")]
    pooling: PoolingStrategy,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load(path: &Path) -> Result<ActivationDump> {
    read_dump_file(path)
        .map_err(xalign::Error::from)
        .with_context(|| format!("reading {}", path.display()))
}

fn load_pair(pair: &PairArgs) -> Result<(ActivationDump, ActivationDump)> {
    Ok((load(&pair.src)?, load(&pair.tgt)?))
}

/// Prints the summary line, then writes the JSON report to `out` or stdout.
fn emit<T: Serialize>(summary: &str, report: &T, out: Option<&Path>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    writeln!(stdout, "{summary}")?;
    match out {
        Some(path) => {
            fs::write(path, json).with_context(|| format!("writing {}", path.display()))?
        }
        None => stdout.write_all(json.as_bytes())?,
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    if args.layer_agg != "mean" {
        bail!(
            "score: unsupported --layer-agg {:?} (only `mean`)",
            args.layer_agg
        );
    }
    let (src, tgt) = load_pair(&args.pair)?;
    let p = &args.pair;
    let report = layer_scores(&src, &tgt, p.repr, p.pooling, &p.layers)?;
    emit(&report.summary(), &report, args.out.as_deref())
}

fn parse_layer_agg(s: &str) -> Result<LayerAggregation> {
    if s == "max" {
        return Ok(LayerAggregation::MaxOverLayers);
    }
    s.parse::<usize>()
        .map(LayerAggregation::SingleLayer)
        .with_context(|| format!("retrieve: --layer-agg must be `max` or a layer index, got {s:?}"))
}

fn retrieve_cmd(args: RetrieveArgs) -> Result<()> {
    let aggregation = parse_layer_agg(&args.layer_agg)?;
    let (src, tgt) = load_pair(&args.pair)?;
    let p = &args.pair;
    let summary = retrieve(&src, &tgt, p.repr, p.pooling, &p.layers, aggregation)?;
    if let Some(path) = &args.hits_csv {
        let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        summary
            .write_hits_csv(BufWriter::new(file))
            .map_err(xalign::Error::from)?;
    }
    emit(&summary.summary(), &summary, args.out.as_deref())
}

fn baseline(args: BaselineArgs) -> Result<()> {
    let (src, tgt) = load_pair(&args.pair)?;
    let p = &args.pair;
    let report = baseline_scores(
        &src,
        &tgt,
        p.repr,
        p.pooling,
        &p.layers,
        args.method,
        args.variance_retained,
    )?;
    emit(&report.summary(), &report, args.out.as_deref())
}

fn correlate(args: CorrelateArgs) -> Result<()> {
    let scores = ScoreTable::from_path(&args.scores).map_err(xalign::Error::from)?;
    let perf = ScoreTable::from_path(&args.perf).map_err(xalign::Error::from)?;
    let report = correlate_tables(&scores, &perf).map_err(xalign::Error::from)?;
    emit(&report.summary(), &report, args.out.as_deref())
}

#[derive(Serialize)]
struct RobustnessReport {
    n: u64,
    k: u64,
    p_single: f64,
    probability: f64,
}

fn robustness(args: RobustnessArgs) -> Result<()> {
    let probability = robustness_pvalue(args.n, args.k).map_err(xalign::Error::from)?;
    let report = RobustnessReport {
        n: args.n,
        k: args.k,
        p_single: xalign::stats::chance_alignment_probability(args.n),
        probability,
    };
    let summary = format!(
        "P(score >= {}/{}) = {:.5} ({:e})",
        args.k, args.n, probability, probability
    );
    emit(&summary, &report, args.out.as_deref())
}

#[derive(Serialize)]
struct SynthReport<'a> {
    spec: &'a SynthSpec,
    src_path: String,
    tgt_path: String,
    bytes_written: u64,
}

fn synth(args: SynthArgs) -> Result<()> {
    let kind = match args.kind {
        KindArg::Ffn => DumpKind::FfnActivation,
        KindArg::Hidden => DumpKind::HiddenState,
    };
    let spec = SynthSpec::new(
        args.n_sentences,
        args.n_units,
        args.n_layers,
        args.rho,
        args.seed,
    )
    .with_anisotropy(args.anisotropy)
    .with_kind(kind)
    .with_languages(args.src_lang, args.tgt_lang);
    let (a, b) = generate_pair(&spec).map_err(xalign::Error::from)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let src_path = args.out.join(format!("{}.nxad", spec.src_language));
    let tgt_path = args.out.join(format!("{}.nxad", spec.tgt_language));
    let mut bytes_written = 0;
    for (dump, path) in [(&a, &src_path), (&b, &tgt_path)] {
        bytes_written += write_dump_file(dump, path)
            .map_err(xalign::Error::from)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let report = SynthReport {
        spec: &spec,
        src_path: src_path.display().to_string(),
        tgt_path: tgt_path.display().to_string(),
        bytes_written,
    };
    let summary = format!(
        "synth: {} sentences x {} layers x {} units (rho = {}, anisotropy = {}, seed = {}) -> {}",
        spec.n_sentences,
        spec.n_layers,
        spec.n_units,
        spec.rho,
        spec.anisotropy,
        spec.seed,
        args.out.display()
    );
    emit(&summary, &report, Some(&args.out.join("synth.json")))
}

fn export_csv(args: ExportArgs) -> Result<()> {
    let dump = load(&args.dump)?;
    let matrices = build_sentence_matrices_for(&dump, args.repr, args.pooling, &[args.layer])
        .map_err(xalign::Error::from)?;
    let file =
        File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    write_sentence_matrix_csv(&matrices[0], BufWriter::new(file)).map_err(xalign::Error::from)?;
    println!(
        "export-csv: layer {} of {} ({} {}) -> {} rows in {}",
        args.layer,
        dump.manifest().language,
        args.repr,
        args.pooling,
        dump.manifest().n_sentences,
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Score(a) => score(a),
        Command::Retrieve(a) => retrieve_cmd(a),
        Command::Baseline(a) => baseline(a),
        Command::Correlate(a) => correlate(a),
        Command::Robustness(a) => robustness(a),
        Command::Synth(a) => synth(a),
        Command::ExportCsv(a) => export_csv(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
