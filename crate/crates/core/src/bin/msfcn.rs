use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use msfcn::arch::{LayerGraph, ModelConfig};
use msfcn::augment::augment_dataset;
use msfcn::data::{
    read_manifest, save_contour_text, save_image_pgm, save_mask_pgm, synth_phantoms,
    write_manifest, Defaults, Entry, Manifest, PhantomSpec, Split, CLASSES,
};
use msfcn::gradcheck::{model_check, op_suite, GradCheckConfig};
use msfcn::train::{
    load_model, load_split, prepare_training_set, run_ablation, train, AblationSuite, TrainConfig,
    CHECKPOINT_FILE, MODEL_FILE,
};
use msfcn::{Error, Result};

/// Multi-scale pooling FCN for left-ventricle segmentation.
#[derive(Parser)]
#[command(name = "msfcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => vec![Split::Train, Split::Test],
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantoms with masks, contours and a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Phantom settings as TOML (fields of `PhantomSpec`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split recorded for every generated entry.
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Expand a manifest 40x (5 displacements x 8 symmetries, cropped to 108).
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train a model; writes the log, checkpoints and model config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train_manifest` from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and write report.csv / report.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model config; defaults to model.toml next to the checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = msfcn::metrics::GOOD_APD_MM)]
        threshold_mm: f64,
        #[arg(long, default_value = "MS-FCN")]
        method: String,
    },
    /// Finite-difference gradient checks of every op and the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        skip_model: bool,
        /// Report raw central differences, including probes across ReLU or
        /// max-pool branch points.
        #[arg(long)]
        no_kink_guard: bool,
    },
    /// Train and evaluate the ablation presets and print comparison tables.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// ms_pooling, upsample_mode, dense_decoder or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the layer table of a model config.
    Describe {
        /// `default`, `toy` or a TOML file.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads a train config; manifest paths are taken relative to the file.
fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let mut cfg = TrainConfig::from_toml(&read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for m in [&mut cfg.train_manifest, &mut cfg.test_manifest]
        .into_iter()
        .flatten()
    {
        if m.is_relative() {
            *m = base.join(&*m);
        }
    }
    Ok(cfg)
}

fn synth(n: usize, seed: u64, out: &Path, config: Option<&Path>, split: SplitArg) -> Result<()> {
    let mut spec = match config {
        Some(p) => {
            toml::from_str(&read_text(p)?).map_err(|e| Error::config("phantom", e.to_string()))?
        }
        None => PhantomSpec::default(),
    };
    spec.seed = seed;
    let split = match split {
        SplitArg::Test => Split::Test,
        _ => Split::Train,
    };
    create_dir(out)?;
    let mut manifest = Manifest::new(out);
    manifest.defaults = Defaults {
        spacing: Some([spec.spacing_mm, spec.spacing_mm]),
        split: Some(split),
    };
    for p in synth_phantoms(&spec, n)? {
        let id = &p.sample.id;
        let files = [
            format!("{id}.pgm"),
            format!("{id}_mask.pgm"),
            format!("{id}_endo.txt"),
            format!("{id}_epi.txt"),
        ];
        save_image_pgm(&p.sample.image, &out.join(&files[0]))?;
        save_mask_pgm(&p.sample.mask, CLASSES, &out.join(&files[1]))?;
        save_contour_text(&p.endo, &out.join(&files[2]))?;
        save_contour_text(&p.epi, &out.join(&files[3]))?;
        let mut e = Entry::new(id.clone(), &files[0]);
        e.mask = Some(files[1].clone().into());
        e.endo = Some(files[2].clone().into());
        e.epi = Some(files[3].clone().into());
        manifest.entries.push(e);
    }
    write_manifest(&manifest, &out.join("manifest.toml"))?;
    println!("wrote {n} phantoms and manifest.toml to {}", out.display());
    Ok(())
}

fn augment(input: &Path, out: &Path, split: SplitArg) -> Result<()> {
    let src = read_manifest(input)?;
    create_dir(out)?;
    let mut manifest = Manifest::new(out);
    manifest.defaults.split = Some(Split::Train);
    for s in split.splits() {
        for entry in src.select(s) {
            let slice = src.load(entry)?;
            let augmented = augment_dataset(std::slice::from_ref(&slice.sample))
                .map_err(|e| Error::invalid(format!("entry `{}`: {e}", entry.id)))?;
            for a in augmented {
                let image = format!("{}.pgm", a.id);
                let mask = format!("{}_mask.pgm", a.id);
                save_image_pgm(&a.image, &out.join(&image))?;
                save_mask_pgm(&a.mask, CLASSES, &out.join(&mask))?;
                let mut e = Entry::new(a.id.clone(), image);
                e.mask = Some(mask.into());
                e.spacing = Some([a.spacing.row_mm, a.spacing.col_mm]);
                e.split = Some(s);
                e.case = Some(slice.case.clone());
                manifest.entries.push(e);
            }
        }
    }
    write_manifest(&manifest, &out.join("manifest.toml"))?;
    println!(
        "wrote {} augmented samples and manifest.toml to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn run_train(
    config: Option<&Path>,
    manifest: Option<PathBuf>,
    out: &Path,
    max_iter: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_train_config(config)?;
    if manifest.is_some() {
        cfg.train_manifest = manifest;
    }
    if max_iter.is_some() {
        cfg.max_iter = max_iter;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let path = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::config("train_manifest", "no training manifest given"))?;
    let samples = prepare_training_set(&cfg, &load_split(&path, Split::Train)?)?;
    create_dir(out)?;
    write_text(&out.join("train_config.toml"), &cfg.to_toml())?;
    let total = cfg.iterations(samples.len());
    let start = Instant::now();
    let outcome = train(&cfg, &samples, Some(out), |r| {
        if r.iter % 10 == 0 || r.iter + 1 == total {
            eprintln!(
                "iter {:>6}/{total} lr {:.6} loss {:.5} ({:.0}s)",
                r.iter,
                r.lr,
                r.loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "samples={} iterations={} data_hash={}",
        samples.len(),
        outcome.iterations,
        outcome.data_hash
    );
    if let Some(last) = outcome.log.last() {
        println!("final_loss={}", last.loss);
    }
    println!("checkpoint={}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    model: Option<PathBuf>,
    manifest: &Path,
    split: SplitArg,
    out: Option<PathBuf>,
    threshold_mm: f64,
    method: &str,
) -> Result<()> {
    let model_path = model.unwrap_or_else(|| checkpoint.with_file_name(MODEL_FILE));
    let model = load_model(&model_path, checkpoint)?;
    let mut slices = Vec::new();
    for s in split.splits() {
        slices.extend(load_split(manifest, s)?);
    }
    if slices.is_empty() {
        return Err(Error::invalid(format!(
            "manifest {} has no entries in the selected split",
            manifest.display()
        )));
    }
    let report = msfcn::train::evaluate(&model, &slices, threshold_mm)?;
    let table = report.table(method);
    print!("{table}");
    if let Some(dir) = out {
        create_dir(&dir)?;
        write_text(&dir.join("report.csv"), &report.to_csv())?;
        write_text(&dir.join("report.txt"), &table)?;
    }
    Ok(())
}

fn gradcheck(seed: u64, samples: usize, skip_model: bool, no_kink_guard: bool) -> Result<()> {
    let cfg = GradCheckConfig {
        seed,
        samples,
        kink_guard: !no_kink_guard,
        ..Default::default()
    };
    let mut failed = Vec::new();
    println!(
        "{:<26} {:>14} {:>8} {:>6}",
        "op", "max_rel_error", "checked", "status"
    );
    for (name, r) in op_suite(cfg)? {
        let ok = r.max_rel_error < 1e-4;
        println!(
            "{name:<26} {:>14.3e} {:>8} {:>6}",
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if !skip_model {
        let r = model_check(&ModelConfig::toy(), cfg)?;
        let ok = r.max_rel_error < 1e-3;
        println!(
            "{:<26} {:>14.3e} {:>8} {:>6}  (refined {}, kinks excluded {})",
            "model_toy_36x36",
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" },
            r.refined,
            r.kinks
        );
        if !ok {
            failed.push("model_toy_36x36".into());
        }
    }
    if !failed.is_empty() {
        return Err(Error::NonFinite(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn ablate(config: Option<&Path>, manifest: Option<PathBuf>, suite: &str, out: &Path) -> Result<()> {
    let mut base = load_train_config(config)?;
    if manifest.is_some() {
        base.train_manifest = manifest;
    }
    let suites: Vec<AblationSuite> = if suite == "all" {
        AblationSuite::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let train_path = base
        .train_manifest
        .clone()
        .ok_or_else(|| Error::config("train_manifest", "no training manifest given"))?;
    let train_slices = load_split(&train_path, Split::Train)?;
    let samples = prepare_training_set(&base, &train_slices)?;
    // without a test manifest the presets are scored on the training slices
    let test_slices = match &base.test_manifest {
        Some(p) => load_split(p, Split::Test)?,
        None => train_slices,
    };
    create_dir(out)?;
    let mut log = String::new();
    for s in suites {
        let result = run_ablation(s, &base, &samples, &test_slices, Some(out), |label, msg| {
            let line = format!("{} | {label} | {msg}", s.as_str());
            eprintln!("{line}");
            log.push_str(&line);
            log.push('\n');
        });
        let table = result.table();
        println!("[{}]\n{table}", s.as_str());
        write_text(&out.join(format!("ablation_{}.txt", s.as_str())), &table)?;
    }
    write_text(&out.join("ablation.log"), &log)?;
    Ok(())
}

fn describe(config: &str, batch: usize) -> Result<()> {
    let cfg = match config {
        "default" => ModelConfig::default(),
        "toy" => ModelConfig::toy(),
        path => ModelConfig::from_toml(&read_text(Path::new(path))?)?,
    };
    cfg.validate()?;
    print!("{}", LayerGraph::build(&cfg)?.describe(batch));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            config,
            split,
        } => synth(n, seed, &out, config.as_deref(), split),
        Command::Augment { input, out, split } => augment(&input, &out, split),
        Command::Train {
            config,
            manifest,
            out,
            max_iter,
            seed,
        } => run_train(config.as_deref(), manifest, &out, max_iter, seed),
        Command::Eval {
            checkpoint,
            model,
            manifest,
            split,
            out,
            threshold_mm,
            method,
        } => eval(
            &checkpoint,
            model,
            &manifest,
            split,
            out,
            threshold_mm,
            &method,
        ),
        Command::Gradcheck {
            seed,
            samples,
            skip_model,
            no_kink_guard,
        } => gradcheck(seed, samples, skip_model, no_kink_guard),
        Command::Ablate {
            config,
            manifest,
            suite,
            out,
        } => ablate(config.as_deref(), manifest, &suite, &out),
        Command::Describe { config, batch } => describe(&config, batch),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MSFCN_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::invalid(format!(
            "MSFCN_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
