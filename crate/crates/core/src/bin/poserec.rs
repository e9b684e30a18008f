use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poserec::checkpoint::Checkpoint;
use poserec::config::TrainConfig;
use poserec::dataio::{
    load_items, load_poses, split_dataset, write_synthetic, Dataset, DatasetPaths, Split, SynthSpec,
};
use poserec::evaluator::{
    build_item_index, evaluate, evaluate_pop, evaluate_random, export_embeddings, recommend, sweep, sweep_points,
    EvalReport, EvalSet, Protocol, SweepAxis,
};
use poserec::item_encoder::ItemRecord;
use poserec::model::PoseRecModel;
use poserec::numerics::GradcheckOptions;
use poserec::trainer::{item_catalog, micro_batch_gradcheck, train, TrainOptions};
use poserec::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const MANIFEST: &str = "dataset.txt";
const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Parser)]
#[command(
    name = "poserec",
    version,
    about = "Pose-driven item recommendation: synthesize, train, evaluate, recommend"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and logs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Print the top items for one video.
    Recommend(RecommendArgs),
    /// Retrain along one configuration axis and tabulate test metrics.
    Sweep(SweepArgs),
    /// Check analytic gradients of the full loss on a micro-batch.
    Gradcheck(GradcheckArgs),
    /// Write item and prototype embeddings as CSV.
    ExportEmb(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Spec file of key=value lines.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override one spec key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding poses.jsonl, items.pobi, labels.csv and optionally classes.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Reuse an existing split.csv instead of splitting 6:2:2.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Skip per-epoch validation.
    #[arg(long)]
    no_validate: bool,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset override; defaults to the manifest next to the checkpoint.
    #[command(flatten)]
    data: DataArgs,
    /// split.csv to use; defaults to the one next to the checkpoint.
    #[arg(long)]
    split_file: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "ins")]
    protocol: String,
    #[arg(long, default_value = "5,10,20")]
    k: String,
    /// Add Random and Pop rows.
    #[arg(long)]
    baselines: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write eval.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pose file (JSON Lines) holding the query video.
    #[arg(long)]
    video: PathBuf,
    /// Which video of the pose file; needed when it holds more than one.
    #[arg(long)]
    video_id: Option<String>,
    /// Item file; defaults to the one in the manifest next to the checkpoint.
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// K, factors or items.
    #[arg(long)]
    axis: String,
    /// Comma-separated values; for factors, factor indices or `all`.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "ins")]
    protocol: String,
    #[arg(long, default_value = "5,10,20")]
    k: String,
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Coordinates checked per parameter; 0 checks all.
    #[arg(long, default_value_t = 32)]
    entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write gradcheck.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    items: Option<PathBuf>,
    /// Output directory; embeddings.csv is written inside.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Recommend(a) => recommend_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::ExportEmb(a) => export_cmd(a),
    }
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_ks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::Usage(format!("bad cutoff {v:?} in --k")))
        })
        .collect()
}

fn parse_protocols(s: &str) -> Result<Vec<Protocol>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

impl ConfigArgs {
    /// Defaults, then the file, then `--set`, then `--seed`.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        let lines: Vec<String> = self
            .sets
            .iter()
            .map(|s| split_kv(s).map(|(k, v)| format!("{k}={v}")))
            .collect::<Result<_>>()?;
        cfg.apply_text(&lines.join("\n"))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl DataArgs {
    fn explicit(&self) -> Result<Option<DatasetPaths>> {
        let mut paths = match &self.data {
            Some(dir) => DatasetPaths::in_dir(dir),
            None => match (&self.poses, &self.items, &self.labels) {
                (None, None, None) => return Ok(None),
                (Some(p), Some(i), Some(l)) => DatasetPaths {
                    poses: p.clone(),
                    items: i.clone(),
                    labels: l.clone(),
                    classes: None,
                },
                _ => {
                    return Err(Error::Usage(
                        "give --data, or all of --poses, --items and --labels".into(),
                    ))
                }
            },
        };
        if self.data.is_some() {
            paths.poses = self.poses.clone().unwrap_or(paths.poses);
            paths.items = self.items.clone().unwrap_or(paths.items);
            paths.labels = self.labels.clone().unwrap_or(paths.labels);
        }
        if self.classes.is_some() {
            paths.classes = self.classes.clone();
        }
        Ok(Some(paths))
    }

    fn required(&self) -> Result<DatasetPaths> {
        self.explicit()?
            .ok_or_else(|| Error::Usage("give --data, or all of --poses, --items and --labels".into()))
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_split(dataset: &Dataset, path: Option<&Path>, seed: u64) -> Result<Split> {
    match path {
        Some(p) => Split::load(p),
        None => split_dataset(&dataset.video_ids(), dataset.classes.as_ref(), SPLIT_RATIOS, seed),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::default();
    if let Some(p) = &a.spec {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        spec.apply_text(&text)?;
    }
    for s in &a.sets {
        let (k, v) = split_kv(s)?;
        spec.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let paths = write_synthetic(&spec, &a.out)?;
    println!("wrote {}", paths.poses.parent().unwrap_or(&a.out).display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let paths = a.data.required()?;
    let dataset = Dataset::load(&paths)?;
    let split = load_split(&dataset, a.split.as_deref(), cfg.seed)?;
    create_dir(&a.out)?;
    let manifest = DatasetPaths {
        poses: absolute(&paths.poses),
        items: absolute(&paths.items),
        labels: absolute(&paths.labels),
        classes: paths.classes.as_deref().map(absolute),
    };
    write(&a.out.join(MANIFEST), &manifest.to_manifest())?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        validate: !a.no_validate,
        verbose: !a.quiet,
    };
    let outcome = train(&dataset, &split, &cfg, &opts)?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "trained {} epochs, final loss {:.6}, val R@5 {:.4}",
            cfg.epochs, last.mean.l_total, last.val_recall5
        );
    }
    println!("checkpoint {}", a.out.join("model.psrc").display());
    Ok(())
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn manifest_for(checkpoint: &Path) -> Result<DatasetPaths> {
    let path = checkpoint_dir(checkpoint).join(MANIFEST);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no {MANIFEST} next to the checkpoint; pass the dataset explicitly"
        )));
    }
    DatasetPaths::load_manifest(&path)
}

fn load_model(path: &Path) -> Result<(PoseRecModel, TrainConfig)> {
    PoseRecModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let protocols = parse_protocols(&a.protocol)?;
    let ks = parse_ks(&a.k)?;
    let (model, cfg) = load_model(&a.checkpoint)?;
    let paths = match a.data.explicit()? {
        Some(p) => p,
        None => manifest_for(&a.checkpoint)?,
    };
    let dataset = Dataset::load(&paths)?;
    let split = match &a.split_file {
        Some(p) => Split::load(p)?,
        None => {
            let p = checkpoint_dir(&a.checkpoint).join("split.csv");
            if p.exists() {
                Split::load(&p)?
            } else {
                load_split(&dataset, None, cfg.seed)?
            }
        }
    };
    let videos = split.part(&a.split)?;
    let catalog = item_catalog(dataset.items.len(), cfg.item_fraction, cfg.seed);
    let set = EvalSet {
        dataset: &dataset,
        videos,
        catalog: &catalog,
        ks: &ks,
    };
    let mut report = EvalReport::default();
    for &p in &protocols {
        report.extend(evaluate(&model, &set, p, cfg.window_step, &cfg.factor_mask)?);
        if a.baselines {
            report.extend(evaluate_random(&set, p, a.seed.unwrap_or(cfg.seed))?);
            report.extend(evaluate_pop(&set, p, &split.train)?);
        }
    }
    print!("{}", report.to_csv());
    if report.skipped_videos > 0 {
        eprintln!(
            "skipped {} videos without positives or a full window",
            report.skipped_videos
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        report.save(&out.join("eval.csv"))?;
        write(&out.join("config.txt"), &cfg.to_text())?;
    }
    Ok(())
}

fn items_for(checkpoint: &Path, items: Option<&Path>) -> Result<Vec<ItemRecord>> {
    match items {
        Some(p) => load_items(p),
        None => load_items(&manifest_for(checkpoint)?.items),
    }
}

fn recommend_cmd(a: RecommendArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let items = items_for(&a.checkpoint, a.items.as_deref())?;
    let poses = load_poses(&a.video)?;
    let traj = match &a.video_id {
        Some(id) => poses
            .iter()
            .find(|p| &p.video_id == id)
            .ok_or_else(|| Error::Data(format!("video {id} not in {}", a.video.display())))?,
        None => match poses.as_slice() {
            [one] => one,
            _ => {
                return Err(Error::Usage(format!(
                    "{} holds {} videos; pick one with --video-id",
                    a.video.display(),
                    poses.len()
                )))
            }
        },
    };
    let catalog = item_catalog(items.len(), cfg.item_fraction, cfg.seed);
    let refs: Vec<&ItemRecord> = catalog.iter().map(|&i| &items[i]).collect();
    let index = build_item_index(&model, &refs, &cfg.factor_mask)?;
    let rec = recommend(&model, &index, traj, cfg.window_step, a.top)?;
    if rec.truncated {
        eprintln!("only {} items in the index", rec.items.len());
    }
    for (r, (id, score)) in rec.items.iter().enumerate() {
        println!("{},{id},{score}", r + 1);
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let axis: SweepAxis = a.axis.parse()?;
    let protocols = parse_protocols(&a.protocol)?;
    let ks = parse_ks(&a.k)?;
    let cfg = a.config.resolve()?;
    let dataset = Dataset::load(&a.data.required()?)?;
    let f = dataset
        .items
        .first()
        .ok_or_else(|| Error::Data("dataset has no items".into()))?
        .factor_count();
    let points = sweep_points(&cfg, axis, &a.values, f)?;
    let split = load_split(&dataset, a.split.as_deref(), cfg.seed)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), &cfg.to_text())?;
    let report = sweep(&dataset, &split, axis, &points, &protocols, &ks, Some(&a.out), !a.quiet)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        max_entries_per_param: (a.entries > 0).then_some(a.entries),
        seed: cfg.seed,
        ..Default::default()
    };
    let report = micro_batch_gradcheck(&cfg, &opts)?;
    let mut csv = String::from("param,checked,max_rel_err,analytic,numeric\n");
    for p in &report.params {
        csv.push_str(&format!(
            "{},{},{:e},{:e},{:e}\n",
            p.name, p.checked, p.max_rel_err, p.worst_analytic, p.worst_numeric
        ));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("gradcheck.csv"), &csv)?;
        write(&out.join("config.txt"), &cfg.to_text())?;
    }
    let worst = report.max_rel_err();
    if report.passed() {
        println!("max relative error {worst:e} < {:e}: ok", a.tolerance);
        Ok(())
    } else {
        Err(Error::GradcheckFailed {
            max_rel_err: worst,
            tolerance: a.tolerance,
        })
    }
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.checkpoint)?;
    let items = items_for(&a.checkpoint, a.items.as_deref())?;
    let catalog = item_catalog(items.len(), cfg.item_fraction, cfg.seed);
    let refs: Vec<&ItemRecord> = catalog.iter().map(|&i| &items[i]).collect();
    create_dir(&a.out)?;
    let path = a.out.join("embeddings.csv");
    let n = export_embeddings(&model, &refs, &cfg.factor_mask, &path)?;
    println!("wrote {n} rows to {}", path.display());
    Ok(())
}
