//! Command-line entry point: data generation, training, sweeps, analysis,
//! similarity, manifold export, and the self-verification suite.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::checkpoint;
use crate::config::{build_run_config, KeyMap};
use crate::data::{self, SyntheticKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::oracle;
use crate::similarity;
use crate::trainer;

#[derive(Parser)]
#[command(
    name = "bilinear-ae",
    about = "Bilinear autoencoders trained in product space via the kernel trick",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic activation dump
    GenData(GenDataArgs),
    /// Train one model from a config file and/or flags
    Train(TrainArgs),
    /// Train at several sparsity penalties and emit a pareto CSV
    Sweep(SweepArgs),
    /// Weight/activation analyses of a trained checkpoint
    Analyze(AnalyzeArgs),
    /// Compare two checkpoints by their reconstruction weights
    Similarity(SimilarityArgs),
    /// Discover a latent cluster and export its projected manifold
    ExportManifold(ExportManifoldArgs),
    /// Run the built-in brute-force equivalence checks
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// superposed_sparse | circle_manifold | sphere_manifold | clustered_directions | gaussian_noise
    #[arg(long)]
    kind: String,
    #[arg(long)]
    d_in: usize,
    /// number of samples
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    n_features: usize,
    /// comma-separated coordinate indices of the planted subspace
    #[arg(long, default_value = "")]
    subspace: String,
    #[arg(long, default_value_t = 0.1)]
    sparsity: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// flat key = value config file; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla | ordered | mixed | combined | topk
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_lat: Option<usize>,
    #[arg(long)]
    d_mix: Option<usize>,
    /// active latents for the topk variant
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// activation dump path
    #[arg(long)]
    data: Option<PathBuf>,
    /// synthetic data kind (alternative to --data)
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl TrainFlags {
    fn to_keymap(&self) -> Result<KeyMap> {
        let mut map = match &self.config {
            Some(path) => KeyMap::parse_file(path)?,
            None => KeyMap::default(),
        };
        let mut overlay = KeyMap::default();
        if let Some(v) = &self.variant {
            overlay.set("variant", v.clone());
        }
        if let Some(v) = self.d_in {
            overlay.set("d_in", v.to_string());
        }
        if let Some(v) = self.d_lat {
            overlay.set("d_lat", v.to_string());
        }
        if let Some(v) = self.d_mix {
            overlay.set("d_mix", v.to_string());
        }
        if let Some(v) = self.k {
            overlay.set("k", v.to_string());
        }
        if let Some(v) = self.alpha {
            overlay.set("alpha", v.to_string());
        }
        if let Some(v) = self.lr {
            overlay.set("lr", v.to_string());
        }
        if let Some(v) = self.steps {
            overlay.set("steps", v.to_string());
        }
        if let Some(v) = self.batch_size {
            overlay.set("batch_size", v.to_string());
        }
        if let Some(v) = self.seed {
            overlay.set("seed", v.to_string());
        }
        if let Some(v) = &self.data {
            overlay.set("data", v.display().to_string());
        }
        if let Some(v) = &self.synthetic {
            overlay.set("synthetic", v.clone());
        }
        if let Some(v) = self.n_samples {
            overlay.set("n_samples", v.to_string());
        }
        if let Some(v) = &self.checkpoint {
            overlay.set("checkpoint", v.display().to_string());
        }
        map.merge(&overlay);
        Ok(map)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// write the per-step metrics CSV here
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// comma-separated sparsity penalties, e.g. 0,0.1,1
    #[arg(long)]
    alphas: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// density | manifold | prefix | activation-hist
    #[arg(long)]
    what: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    latent: usize,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long, default_value_t = false)]
    log_scale: bool,
    #[arg(long, default_value_t = analysis::DEFAULT_TOP_FRACTION)]
    top_fraction: f64,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// frobenius | permutation
    #[arg(long, default_value = "frobenius")]
    metric: String,
    /// write the recovered permutation as CSV (permutation metric only)
    #[arg(long)]
    perm_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportManifoldArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON output path; a CSV mirror is written next to it
    #[arg(long)]
    out: PathBuf,
    /// pick this interaction row as the cluster seed instead of the
    /// best-scoring candidate
    #[arg(long)]
    seed_row: Option<usize>,
    #[arg(long, default_value_t = analysis::DEFAULT_TOP_FRACTION)]
    top_fraction: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    trials: usize,
}

/// Write `contents` atomically: temp file in the target directory, then
/// rename over the destination.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    std::io::Write::write_all(&mut tmp, contents.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::Variant(_) => 1,
        Error::Shape { .. } | Error::Index { .. } => 1,
        Error::Io(_) | Error::Format(_) | Error::NonFinite(_) | Error::Guard(_) => 2,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Sweep(args) => sweep(args),
        Command::Analyze(args) => analyze(args),
        Command::Similarity(args) => similarity_cmd(args),
        Command::ExportManifold(args) => export_manifold(args),
        Command::Verify(args) => verify(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let subspace = if args.subspace.trim().is_empty() {
        vec![]
    } else {
        args.subspace
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("--subspace: bad index '{s}'")))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    let spec = SyntheticSpec {
        kind: SyntheticKind::parse(&args.kind)?,
        d_in: args.d_in,
        n_features: if args.n_features == 0 { args.d_in } else { args.n_features },
        subspace,
        sparsity: args.sparsity,
        noise: args.noise,
        seed: args.seed,
    };
    let (batch, _) = data::generate(&spec, args.n)?;
    data::write_dump(&args.out, &batch.rows)?;
    println!(
        "wrote {} samples of dimension {} to {}",
        batch.n_samples(),
        batch.d_in(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let map = args.flags.to_keymap()?;
    let run = build_run_config(&map)?;
    let report = if let Some(k) = run.topk_k {
        let (_, report) = trainer::train_topk(&run.train, k)?;
        report
    } else {
        let (_, report) = trainer::train(&run.train)?;
        report
    };
    if let Some(path) = &args.metrics {
        write_atomic(path, &report.metrics_csv())?;
    }
    if let Some(last) = report.records.last() {
        println!(
            "final step {}: error {:.6} density {:.6} total {:.6}",
            last.step, last.error, last.density, last.total
        );
    }
    if let Some(eval) = &report.held_out {
        println!("held-out: error {:.6} density {:.6}", eval.error, eval.density);
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let map = args.flags.to_keymap()?;
    let run = build_run_config(&map)?;
    if run.topk_k.is_some() {
        return Err(Error::Config("sweep applies to bilinear variants, not topk".into()));
    }
    let alphas = args
        .alphas
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("--alphas: bad value '{s}'")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows = trainer::pareto_sweep(&run.train, &alphas)?;
    write_atomic(&args.out, &trainer::pareto_csv(&rows))?;
    println!("wrote {} pareto rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn load_model_and_data(
    model: &Path,
    dump: &Path,
) -> Result<(crate::model::BilinearModel, crate::data::ActivationBatch)> {
    let model = checkpoint::load(model)?.bilinear()?;
    let rows = data::load_dump_all(dump)?;
    let batch = data::normalize(&rows)?;
    Ok((model, batch))
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let (model, batch) = load_model_and_data(&args.model, &args.data)?;
    match args.what.as_str() {
        "density" => {
            let rep = analysis::density_histogram(&model, &batch, args.bins)?;
            let mut csv = String::from("latent,density\n");
            for (i, d) in rep.densities.iter().enumerate() {
                csv.push_str(&format!("{i},{d}\n"));
            }
            write_atomic(&args.out, &csv)?;
            println!("dense fraction (> {}): {:.4}", analysis::DENSE_THRESHOLD, rep.dense_fraction);
        }
        "prefix" => {
            let plain = analysis::prefix_curve(&model, &batch)?;
            let greedy = analysis::greedy_reorder(&model, &batch)?;
            let mut csv = String::from("k,prefix_error,greedy_error,greedy_latent\n");
            for (k, (p, g)) in plain.iter().zip(greedy.curve.iter()).enumerate() {
                csv.push_str(&format!("{k},{p},{g},{}\n", greedy.permutation[k]));
            }
            write_atomic(&args.out, &csv)?;
            println!("prefix endpoint error {:.6}", plain.last().copied().unwrap_or(1.0));
        }
        "activation-hist" => {
            let rep =
                analysis::activation_histogram(&model, &batch, args.latent, args.bins, args.log_scale)?;
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (i, c) in rep.histogram.counts.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{c}\n",
                    rep.histogram.edges[i],
                    rep.histogram.edges[i + 1]
                ));
            }
            write_atomic(&args.out, &csv)?;
            for (q, v) in rep.quantiles {
                println!("p{:.0}: {v:.6}", q * 100.0);
            }
        }
        "manifold" => {
            let export = best_manifold(&model, &batch, None, args.top_fraction)?;
            write_atomic(&args.out, &export.to_json())?;
            println!("exported {} projected points", export.points.nrows());
        }
        other => {
            return Err(Error::Config(format!(
                "--what must be density|manifold|prefix|activation-hist, got '{other}'"
            )))
        }
    }
    Ok(())
}

fn best_manifold(
    model: &crate::model::BilinearModel,
    batch: &crate::data::ActivationBatch,
    seed_row: Option<usize>,
    top_fraction: f64,
) -> Result<analysis::ManifoldExport> {
    let composite = match seed_row {
        Some(row) => analysis::build_composite(model, row, analysis::COMPOSITE_TOP_K)?,
        None => analysis::most_planar_composite(model)?,
    };
    analysis::export_manifold(&composite, model, batch, top_fraction)
}

fn similarity_cmd(args: SimilarityArgs) -> Result<()> {
    let a = checkpoint::load(&args.a)?.bilinear()?;
    let b = checkpoint::load(&args.b)?.bilinear()?;
    match args.metric.as_str() {
        "frobenius" => {
            let s = similarity::frobenius_similarity(&a, &b)?;
            println!("{s}");
        }
        "permutation" => {
            let (s, perm) = similarity::permutation_similarity(&a, &b)?;
            println!("{s}");
            if let Some(path) = &args.perm_out {
                let mut csv = String::from("latent_a,latent_b\n");
                for (i, j) in perm.iter().enumerate() {
                    csv.push_str(&format!("{i},{j}\n"));
                }
                write_atomic(path, &csv)?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "--metric must be frobenius|permutation, got '{other}'"
            )))
        }
    }
    Ok(())
}

fn export_manifold(args: ExportManifoldArgs) -> Result<()> {
    let (model, batch) = load_model_and_data(&args.model, &args.data)?;
    let export = best_manifold(&model, &batch, args.seed_row, args.top_fraction)?;
    write_atomic(&args.out, &export.to_json())?;
    let csv_path = args.out.with_extension("csv");
    write_atomic(&csv_path, &export.to_csv())?;
    println!(
        "exported {} points to {} (+ CSV mirror)",
        export.points.nrows(),
        args.out.display()
    );
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<()> {
    let results = oracle::run_verification(args.seed, args.trials);
    let mut all_ok = true;
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("[{status}] {}: {}", r.name, r.detail);
        all_ok &= r.passed;
    }
    if !all_ok {
        return Err(Error::Invalid("verification failed".into()));
    }
    Ok(())
}
