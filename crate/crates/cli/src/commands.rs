use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use segformer::checkpoint;
use segformer::config::{MitConfig, DEFAULT_NUM_CLASSES};
use segformer::cost::count_macs_for;
use segformer::data::{image_tensor, load_dataset, make_toy_dataset, save_dataset};
use segformer::erf::{compute_erf_with, erf_radius, ErfOptions, ErfTarget};
use segformer::netpbm::Image8;
use segformer::selftest::{self, Level};
use segformer::train::{argmax_classes, infer_full, miou, sliding_window_infer, train_toy, ConfusionMatrix, TrainSpec};
use segformer::{Error, Result, SegFormer};

use crate::settings::{builtin, echo_model, echo_train, ConfigFile};

#[derive(Parser, Debug)]
#[command(name = "segformer", version, about = "SegFormer model tooling: costs, training, inference and receptive fields")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// B0..B5, or B0-micro.
    #[arg(long)]
    pub variant: Option<String>,
    /// `key = value` file; model keys plus `train.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_classes: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print parameter and MAC counts.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input side, or height when --input-width is given.
        #[arg(long, default_value_t = 512)]
        input_size: usize,
        #[arg(long)]
        input_width: Option<usize>,
    },
    /// Write a freshly initialized checkpoint.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[arg(long, default_value = "quick")]
        level: String,
    },
    /// Write a synthetic shapes dataset.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Square crop side.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        weight_decay: Option<f64>,
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        eval_every: Option<usize>,
        /// Continue from this checkpoint instead of a fresh build.
        #[arg(long)]
        init: Option<PathBuf>,
        /// CSV log path; defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a label map for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Square sliding window side; whole-image inference when omitted.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Ground-truth PGM to score against.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Effective receptive field of a stage (1..4) or the decoder head.
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        images_dir: PathBuf,
        /// Use at most this many images.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Name the file in I/O errors.
fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    println!("threads: {threads}");
    match cli.command {
        Command::Describe { model, input_size, input_width } => describe(&model, input_size, input_width.unwrap_or(input_size)),
        Command::Build { model, seed, out } => build(&model, seed, &out),
        Command::Selftest { level } => run_selftest(level.parse()?),
        Command::MakeData { out, count, size, classes, seed } => make_data(&out, count, size, classes, seed),
        Command::Train {
            model,
            data_dir,
            iters,
            seed,
            lr,
            batch_size,
            crop,
            weight_decay,
            no_augment,
            eval_every,
            init,
            log,
            out,
        } => {
            let flags = TrainFlags { iters, seed, lr, batch_size, crop, weight_decay, no_augment, eval_every };
            train(&model, &data_dir, flags, init.as_deref(), log, &out)
        }
        Command::Infer { ckpt, image, window, stride, labels, out } => infer(&ckpt, &image, window, stride, labels.as_deref(), &out),
        Command::Erf { ckpt, stage, images_dir, count, out } => erf(&ckpt, &stage, &images_dir, count, &out, threads),
    }
}

/// Built-in < file < flags. `default_variant` and `inferred_classes` apply when nothing else sets them.
fn resolve_model(args: &ModelArgs, default_variant: &str, inferred_classes: Option<usize>) -> Result<(MitConfig, Option<ConfigFile>)> {
    let file = args.config.as_deref().map(ConfigFile::read).transpose()?;
    let classes = inferred_classes.unwrap_or(DEFAULT_NUM_CLASSES);
    let mut cfg = builtin(args.variant.as_deref().unwrap_or(default_variant), classes)?;
    if let Some(f) = &file {
        // a variant named in the file is overridden by an explicit --variant
        let keep = args.variant.is_some().then(|| cfg.clone());
        f.apply_model(&mut cfg)?;
        if let (Some(base), true) = (keep, f.sets_model_key("variant")) {
            let mut again = base;
            let rest = ConfigFile {
                model: f.model.iter().filter(|(k, _)| k != "variant").cloned().collect(),
                train: Vec::new(),
            };
            rest.apply_model(&mut again)?;
            cfg = again;
        }
    }
    if let Some(n) = args.num_classes {
        cfg.num_classes = n;
    }
    cfg.check()?;
    Ok((cfg, file))
}

fn describe(args: &ModelArgs, h: usize, w: usize) -> Result<()> {
    let (cfg, _) = resolve_model(args, "B0", None)?;
    echo_model(&cfg);
    print!("{}", count_macs_for(&cfg, h, w)?.render());
    Ok(())
}

fn build(args: &ModelArgs, seed: u64, out: &Path) -> Result<()> {
    let (cfg, _) = resolve_model(args, "B0", None)?;
    echo_model(&cfg);
    let model = SegFormer::build(cfg, seed)?;
    checkpoint::save(&model, out).map_err(|e| with_path(out, e))?;
    println!("seed: {seed}");
    println!("params: {}", model.num_params());
    println!("checksum: {:016x}", model.params.checksum());
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn run_selftest(level: Level) -> Result<()> {
    println!("level: {}", if level == Level::Quick { "quick" } else { "full" });
    let checks = selftest::run(level);
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    println!("checks: {}", checks.len());
    println!("failed: {failed}");
    if failed > 0 {
        return Err(Error::Numerical(format!("{failed} selftest check(s) failed")));
    }
    Ok(())
}

fn make_data(out: &Path, count: usize, size: usize, classes: usize, seed: u64) -> Result<()> {
    let set = make_toy_dataset(count, size, classes, seed).map_err(|e| Error::Usage(e.to_string()))?;
    save_dataset(out, &set)?;
    println!("images: {count}");
    println!("size: {size}");
    println!("classes: {classes}");
    println!("seed: {seed}");
    println!("dir: {}", out.display());
    Ok(())
}

struct TrainFlags {
    iters: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    crop: Option<usize>,
    weight_decay: Option<f64>,
    no_augment: bool,
    eval_every: Option<usize>,
}

fn train(args: &ModelArgs, data_dir: &Path, flags: TrainFlags, init: Option<&Path>, log: Option<PathBuf>, out: &Path) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let max_label = data
        .iter()
        .flat_map(|s| s.labels.iter())
        .filter(|&&l| l != segformer::kernels::IGNORE_INDEX)
        .max()
        .copied()
        .unwrap_or(0);
    let (cfg, file) = resolve_model(args, "B0-micro", Some(max_label as usize + 1))?;
    if max_label as usize >= cfg.num_classes {
        return Err(Error::Data(format!("dataset uses label {max_label} but the model has {} classes", cfg.num_classes)));
    }

    let mut spec = TrainSpec {
        crop: (data[0].height(), data[0].width()),
        ..TrainSpec::default()
    };
    if let Some(f) = &file {
        f.apply_train(&mut spec)?;
    }
    if let Some(v) = flags.iters {
        spec.total_iters = v;
    }
    if let Some(v) = flags.seed {
        spec.seed = v;
    }
    if let Some(v) = flags.lr {
        spec.base_lr = v;
    }
    if let Some(v) = flags.batch_size {
        spec.batch_size = v;
    }
    if let Some(v) = flags.crop {
        spec.crop = (v, v);
    }
    if let Some(v) = flags.weight_decay {
        spec.weight_decay = v;
    }
    if flags.no_augment {
        spec.augment = false;
    }
    if let Some(v) = flags.eval_every {
        spec.eval_every = v;
    }
    spec.check().map_err(|e| Error::Usage(e.to_string()))?;

    let mut model = match init {
        Some(p) => checkpoint::load_expecting(p, &cfg).map_err(|e| with_path(p, e))?,
        None => SegFormer::build(cfg, spec.seed)?,
    };
    echo_model(&model.config);
    echo_train(&spec);
    println!("images: {}", data.len());

    let log_rows = train_toy(&mut model, &data, &spec)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    fs::write(&log_path, log_rows.to_csv()).map_err(|e| with_path(&log_path, e.into()))?;
    checkpoint::save(&model, out).map_err(|e| with_path(out, e))?;

    let last = log_rows.rows.last().expect("at least one iteration");
    println!("iterations: {}", last.iter);
    println!("final_loss: {:.6}", last.loss);
    if let Some(m) = log_rows.final_miou() {
        println!("final_miou: {m:.6}");
    }
    println!("log: {}", log_path.display());
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, window: Option<usize>, stride: Option<usize>, labels: Option<&Path>, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt).map_err(|e| with_path(ckpt, e))?;
    echo_model(&model.config);
    let rgb = Image8::read(image)?;
    let x = image_tensor(&rgb)?;
    let logits = match window {
        Some(win) => {
            let stride = stride.unwrap_or(win / 2).max(1);
            println!("window: {win}");
            println!("stride: {stride}");
            sliding_window_infer(&model, &x, (win, win), (stride, stride))?
        }
        None => {
            if stride.is_some() {
                return Err(Error::Usage("--stride needs --window".into()));
            }
            infer_full(&model, &x)?
        }
    };
    if !logits.all_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let pred = argmax_classes(&logits);
    Image8::gray(rgb.width, rgb.height, pred.clone()).write(out)?;
    println!("height: {}", rgb.height);
    println!("width: {}", rgb.width);
    if let Some(path) = labels {
        let truth = Image8::read(path)?;
        if (truth.width, truth.height, truth.channels) != (rgb.width, rgb.height, 1) {
            return Err(Error::Data("label map does not match the image".into()));
        }
        let mut cm = ConfusionMatrix::new(model.config.num_classes);
        cm.add(&pred, &truth.data)?;
        println!("pixel_accuracy: {:.6}", cm.pixel_accuracy());
        println!("miou: {:.6}", miou(&cm).1);
    }
    println!("prediction: {}", out.display());
    Ok(())
}

fn erf(ckpt: &Path, stage: &str, dir: &Path, count: Option<usize>, out: &Path, threads: usize) -> Result<()> {
    let target: ErfTarget = stage.parse()?;
    let model = checkpoint::load(ckpt).map_err(|e| with_path(ckpt, e))?;
    echo_model(&model.config);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if let Some(n) = count {
        paths.truncate(n);
    }
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm images", dir.display())));
    }
    let images = paths.iter().map(|p| image_tensor(&Image8::read(p)?)).collect::<Result<Vec<_>>>()?;
    let map = compute_erf_with(&model, target, &images, ErfOptions { batched: false, threads })?;
    map.to_pgm().write(out)?;
    let sidecar = out.with_extension("txt");
    fs::write(&sidecar, map.sidecar()).map_err(|e| with_path(&sidecar, e.into()))?;
    println!("target: {target}");
    println!("images: {}", map.images);
    println!("r50: {:.4}", erf_radius(&map, 0.5));
    println!("r90: {:.4}", erf_radius(&map, 0.9));
    println!("map: {}", out.display());
    println!("sidecar: {}", sidecar.display());
    Ok(())
}
