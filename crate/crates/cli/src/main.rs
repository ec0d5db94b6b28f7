use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ooal_core::analysis::{self, Colormap};
use ooal_core::data::{
    build_oneshot_trainset, densify, split_eval_sets, write_synthetic_dataset, DatasetManifest,
    KeypointAnnotation, SynthDatasetOptions, DEFAULT_SIGMA,
};
use ooal_core::features::{load_features, save_features, SynthWorldSpec, WorldConfig};
use ooal_core::metrics::{evaluate, EvalMode, SplitReport};
use ooal_core::model::Ablation;
use ooal_core::training::{load_checkpoint, save_checkpoint, train, TextInput, TrainConfig};
use ooal_core::gradcheck;

#[derive(Parser)]
#[command(name = "ooal", version, about = "One-shot open affordance learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: manifest, feature files and dense targets.
    GenSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of base objects.
        #[arg(long, default_value_t = 8)]
        objects: usize,
        #[arg(long, default_value_t = 2)]
        novel: usize,
        #[arg(long, default_value_t = 4)]
        parts: usize,
        #[arg(long, default_value_t = 3)]
        items_per_object: u32,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a keypoint annotation (JSON) into a dense target file.
    Densify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the one-shot split of a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable a module; may be repeated.
        #[arg(long, value_enum)]
        ablate: Vec<Module>,
        /// Write the loss log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the seen and unseen splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Dense)]
        mode: Mode,
        #[arg(long)]
        report: PathBuf,
        /// Seed used to draw the one-shot training items (excluded from "seen").
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Feature analysis.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Finite-difference check of every analytic gradient.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// PCA of patch features; writes the first three components as RGB.
    Pca(PcaArgs),
    /// Cosine similarity of one query patch against another image's patches.
    Simmap(SimmapArgs),
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long, required = true, num_args = 1..)]
    features: Vec<PathBuf>,
    /// Encoder layer (default: last).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Fit one PCA across all inputs instead of one per image.
    #[arg(long)]
    cross_image: bool,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also dump the scores as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SimmapArgs {
    #[arg(long)]
    query: PathBuf,
    /// Row-major patch index in the query image.
    #[arg(long)]
    patch: usize,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, value_enum, default_value_t = Cmap::Heat)]
    colormap: Cmap,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    Tpl,
    Mlff,
    Td,
    Ctm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Heatmap,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cmap {
    Heat,
    Diverging,
    Gray,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointFile {
    height: usize,
    width: usize,
    points: Vec<Vec<(f64, f64)>>,
}

fn threads() -> Result<usize> {
    match std::env::var("OOAL_THREADS") {
        Ok(v) => v
            .parse()
            .with_context(|| format!("OOAL_THREADS must be a non-negative integer, got `{v}`")),
        Err(_) => Ok(0),
    }
}

fn text_input(manifest: &DatasetManifest) -> Result<TextInput> {
    if let Some(table) = manifest.class_tokens()? {
        return Ok(TextInput::Tokens(table));
    }
    let embeddings = manifest
        .text_embeddings()?
        .context("manifest provides neither class tokens nor text embeddings")?;
    Ok(TextInput::Embeddings {
        names: manifest.affordances.clone(),
        embeddings,
    })
}

fn gen_synth(cfg: WorldConfig, opts: SynthDatasetOptions, out: &Path) -> Result<()> {
    let world = SynthWorldSpec::generate(&cfg)?;
    let manifest = write_synthetic_dataset(&world, out, &opts)?;
    println!(
        "wrote {} items for {} objects to {}",
        manifest.items.len(),
        manifest.objects.len(),
        out.display()
    );
    Ok(())
}

fn run_densify(input: &Path, sigma: f64, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let kp: KeypointFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", input.display()))?;
    let target = densify(&KeypointAnnotation { points: kp.points }, sigma, kp.height, kp.width)?;
    save_features(&target.to_stack()?, out)?;
    Ok(())
}

fn run_train(config: &Path, manifest: &Path, out: &Path, ablate: &[Module], log: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let manifest = DatasetManifest::load(manifest)?;
    let mut ab = Ablation::none();
    for m in ablate {
        match m {
            Module::Tpl => ab.tpl = true,
            Module::Mlff => ab.mlff = true,
            Module::Td => ab.td = true,
            Module::Ctm => ab.ctm = true,
        }
    }
    let items = manifest.load_items(&build_oneshot_trainset(&manifest, cfg.seed)?)?;
    let (model, losses) = train(&cfg, &items, text_input(&manifest)?, ab)?;
    save_checkpoint(&model, out)?;
    if let Some(path) = log {
        std::fs::write(path, losses.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some((it, loss)) = losses.entries.last() {
        println!("trained {} iterations; loss {loss:.6} at iteration {it}", cfg.iterations);
    }
    Ok(())
}

fn run_eval(ckpt: &Path, manifest: &Path, mode: Mode, report: &Path, seed: u64) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let manifest = DatasetManifest::load(manifest)?;
    if model.text.names() != manifest.affordances.as_slice() {
        bail!("checkpoint affordances {:?} differ from manifest {:?}", model.text.names(), manifest.affordances);
    }
    let mode = match mode {
        Mode::Heatmap => EvalMode::Heatmap,
        Mode::Dense => EvalMode::Dense,
    };
    let threads = threads()?;
    let (seen, unseen) = split_eval_sets(&manifest, seed)?;
    let seen = evaluate(&model, &manifest.load_items(&seen)?, mode, threads)?;
    let unseen = evaluate(&model, &manifest.load_items(&unseen)?, mode, threads)?;
    let split = SplitReport::new(seen, unseen)?;
    std::fs::write(report, serde_json::to_string_pretty(&split)?)
        .with_context(|| format!("writing {}", report.display()))?;
    print!("{}", split.to_table());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "features".into(), |s| s.to_string_lossy().into_owned())
}

fn run_pca(a: &PcaArgs) -> Result<()> {
    let stacks = a
        .features
        .iter()
        .map(|p| load_features(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let layer = a.layer.unwrap_or(stacks[0].n_layers() - 1);
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let write = |i: usize, scores: &ooal_core::Mat, csv: Option<String>| -> Result<()> {
        let name = stem(&a.features[i]);
        let img = analysis::pca_rgb_ppm(scores, stacks[i].grid)?;
        let path = a.out_dir.join(format!("{name}_pca.ppm"));
        std::fs::write(&path, img).with_context(|| format!("writing {}", path.display()))?;
        if let Some(csv) = csv {
            let path = a.out_dir.join(format!("{name}_pca.csv"));
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    };
    if a.cross_image {
        let (pca, per) = analysis::pca_cross_image(&stacks, layer, a.k)?;
        for (i, scores) in per.iter().enumerate() {
            let csv = a.csv.then(|| {
                analysis::Pca {
                    scores: scores.clone(),
                    ..pca.clone()
                }
                .scores_csv()
            });
            write(i, scores, csv)?;
        }
        println!("explained variance ratio: {:?}", pca.explained_variance_ratio);
    } else {
        for (i, pca) in analysis::pca_per_image(&stacks, layer, a.k)?.iter().enumerate() {
            write(i, &pca.scores, a.csv.then(|| pca.scores_csv()))?;
            println!("{}: explained variance ratio {:?}", a.features[i].display(), pca.explained_variance_ratio);
        }
    }
    Ok(())
}

fn run_simmap(a: &SimmapArgs) -> Result<()> {
    let query = load_features(&a.query)?;
    let target = load_features(&a.target)?;
    let layer = a.layer.unwrap_or(query.n_layers() - 1);
    let q = query
        .layers
        .get(layer)
        .context("layer out of range for the query stack")?;
    if a.patch >= q.rows() {
        bail!("patch {} out of range (query has {} patches)", a.patch, q.rows());
    }
    let map = analysis::similarity_map(q.row(a.patch), &target, layer)?;
    if map.zero_patches > 0 {
        eprintln!("warning: {} zero-norm patches reported as similarity 0", map.zero_patches);
    }
    let cmap = match a.colormap {
        Cmap::Heat => Colormap::Heat,
        Cmap::Diverging => Colormap::Diverging,
        Cmap::Gray => Colormap::Gray,
    };
    analysis::render_heatmap(&map.values, map.grid.0, map.grid.1, &a.out, cmap)?;
    Ok(())
}

fn run_check_grad(seed: u64) -> Result<bool> {
    let report = gradcheck::run(seed)?;
    for t in &report.tensors {
        println!("{:<24} {:>6} {:.3e}", t.name, t.len, t.max_rel_error);
    }
    println!("max relative error: {:.3e}", report.max_rel_error);
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSynth {
            seed,
            objects,
            novel,
            parts,
            items_per_object,
            noise,
            out,
        } => {
            let cfg = WorldConfig {
                seed,
                n_base: objects,
                n_novel: novel,
                n_parts: parts,
                ..WorldConfig::default()
            };
            let opts = SynthDatasetOptions {
                items_per_object,
                noise_scale: noise,
                ..SynthDatasetOptions::default()
            };
            gen_synth(cfg, opts, &out)?;
        }
        Command::Densify { input, sigma, out } => run_densify(&input, sigma, &out)?,
        Command::Train {
            config,
            manifest,
            out,
            ablate,
            log,
        } => run_train(&config, &manifest, &out, &ablate, log.as_deref())?,
        Command::Eval {
            ckpt,
            manifest,
            mode,
            report,
            seed,
        } => run_eval(&ckpt, &manifest, mode, &report, seed)?,
        Command::Analyze(Analyze::Pca(a)) => run_pca(&a)?,
        Command::Analyze(Analyze::Simmap(a)) => run_simmap(&a)?,
        Command::CheckGrad { seed } => return run_check_grad(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            {
                e.exit();
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
