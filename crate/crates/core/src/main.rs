use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gdnet::data::{self, pnm, SyntheticSceneSpec};
use gdnet::error::{Error, Result};
use gdnet::infer::predict;
use gdnet::kv::KvMap;
use gdnet::mask::Mask;
use gdnet::metrics::{evaluate, EvalSample};
use gdnet::nn::{Checkpoint, Gdnet};
use gdnet::trainer::{log_csv, train, TrainConfig};
use gdnet::{gradcheck, selftest};

const CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "gdnet", version, about = "Glass detection network: data, training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic glass-scene dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config file; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV (default: next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        base_lr: Option<f64>,
        /// Extra `key=value` overrides, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict glass maps for every `.ppm` image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Maps::Final)]
        maps: Maps,
    },
    /// Score predicted maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Table path; `.csv` and `_curve.csv` siblings are written too.
        #[arg(long)]
        report: PathBuf,
    },
    /// Location probability map and area histogram of a mask set.
    Stats {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Finite-difference gradient checks of every op and module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
        size: Vec<usize>,
    },
    /// Run the built-in example suite.
    Selftest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Maps {
    Final,
    All,
}

fn print_config(command: &str, pairs: &[(&str, String)]) {
    println!("[{command}]");
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
}

fn pair(size: &[usize]) -> (usize, usize) {
    (size[0], size[1])
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `DIR/masks` when it exists, else `DIR` itself.
fn mask_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("masks");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn gen(out: &Path, count: usize, size: (usize, usize), seed: u64) -> Result<()> {
    print_config(
        "gen",
        &[
            ("out", out.display().to_string()),
            ("count", count.to_string()),
            ("size", format!("{},{}", size.0, size.1)),
            ("seed", seed.to_string()),
        ],
    );
    if count == 0 {
        return Err(Error::usage("count must be positive"));
    }
    let samples = (0..count)
        .map(|i| {
            let spec = SyntheticSceneSpec::sampled(size, seed, i);
            Ok((format!("{i:05}"), data::generate(&spec, seed.wrapping_add(i as u64))?))
        })
        .collect::<Result<Vec<_>>>()?;
    data::save_dataset(out, &samples)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    base_lr: Option<f64>,
    overrides: &[String],
) -> Result<()> {
    let text = match config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut kv = KvMap::parse(&text)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    if let Some(v) = epochs {
        kv.insert("epochs", v);
    }
    if let Some(v) = batch_size {
        kv.insert("batch_size", v);
    }
    if let Some(v) = seed {
        kv.insert("seed", v);
    }
    if let Some(v) = base_lr {
        kv.insert("base_lr", v);
    }
    let mut cfg = TrainConfig::default();
    cfg.apply(&mut kv)?;
    kv.finish()?;
    cfg.checkpoint_path = Some(out.to_path_buf());
    cfg.log_path = Some(log.or(cfg.log_path.clone()).unwrap_or_else(|| out.with_extension("log.csv")));
    cfg.validate()?;
    println!("[train]\ndata = {}", data_dir.display());
    print!("{}", cfg.to_text());

    let dataset = data::load_dataset(data_dir)?;
    let (net, mut store) = Gdnet::new(&cfg.net, cfg.seed)?;
    println!("parameters = {}", store.num_scalars());
    let outcome = train(&net, &mut store, &dataset, &cfg, |e, _| {
        println!("epoch {:>4}  loss {:.6}", e.epoch + 1, e.mean_total);
        ControlFlow::Continue(())
    })?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    outcome.checkpoint.save(out)?;
    let log_path = cfg.log_path.as_deref().expect("log path set");
    write_text(log_path, &log_csv(&outcome.log))?;
    println!("checkpoint {}\nlog {}", out.display(), log_path.display());
    Ok(())
}

fn infer(ckpt: &Path, images: &Path, out: &Path, maps: Maps) -> Result<()> {
    print_config(
        "infer",
        &[
            ("ckpt", ckpt.display().to_string()),
            ("images", images.display().to_string()),
            ("out", out.display().to_string()),
            ("maps", if maps == Maps::All { "all" } else { "final" }.to_string()),
        ],
    );
    let (net, mut store) = Checkpoint::load(ckpt)?.into_model()?;
    let dir = if images.join("images").is_dir() {
        images.join("images")
    } else {
        images.to_path_buf()
    };
    let ids = data::list_ids(&dir, "ppm")?;
    if ids.is_empty() {
        return Err(Error::usage(format!("no .ppm images in {}", dir.display())));
    }
    create_dir(out)?;
    for id in &ids {
        let image = pnm::read_image(&dir.join(format!("{id}.ppm")))?;
        let p = predict(&net, &mut store, &image)?;
        if !p.final_map.all_finite() {
            return Err(Error::Numeric(format!("non-finite prediction for {id}")));
        }
        pnm::write_gray(&out.join(format!("{id}.pgm")), &p.final_map)?;
        if maps == Maps::All {
            for (name, map) in p.named().into_iter().skip(1) {
                let sub = out.join(name);
                create_dir(&sub)?;
                pnm::write_gray(&sub.join(format!("{id}.pgm")), map)?;
            }
        }
    }
    println!("predicted {} images", ids.len());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, report: &Path) -> Result<()> {
    let gt_dir = mask_dir(gt);
    print_config(
        "eval",
        &[
            ("pred", pred.display().to_string()),
            ("gt", gt_dir.display().to_string()),
            ("report", report.display().to_string()),
        ],
    );
    let pred_ids = data::list_ids(pred, "pgm")?;
    let gt_ids = data::list_ids(&gt_dir, "pgm")?;
    let ids: Vec<&String> = pred_ids.iter().filter(|id| gt_ids.binary_search(id).is_ok()).collect();
    if ids.is_empty() {
        return Err(Error::usage(format!(
            "no common ids between {} and {}",
            pred.display(),
            gt_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in &ids {
        let p = pnm::read_gray(&pred.join(format!("{id}.pgm")))?;
        let g: Mask = pnm::read_mask(&gt_dir.join(format!("{id}.pgm")))?;
        let s = p.shape();
        if (s.h, s.w) != (g.height(), g.width()) {
            return Err(Error::input(format!(
                "{id}: prediction {}x{} vs ground truth {}x{}",
                s.h,
                s.w,
                g.height(),
                g.width()
            )));
        }
        samples.push(EvalSample::new(p.into_data(), g)?);
    }
    let r = evaluate(&samples)?;
    let table = r.to_table();
    print!("{table}");
    write_text(report, &table)?;
    write_text(&report.with_extension("csv"), &r.to_csv())?;
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    write_text(&report.with_file_name(format!("{stem}_curve.csv")), &r.curve_csv())?;
    Ok(())
}

fn stats(masks: &Path, out: &Path, size: (usize, usize), bins: usize) -> Result<()> {
    let dir = mask_dir(masks);
    print_config(
        "stats",
        &[
            ("masks", dir.display().to_string()),
            ("out", out.display().to_string()),
            ("size", format!("{},{}", size.0, size.1)),
            ("bins", bins.to_string()),
        ],
    );
    let ids = data::list_ids(&dir, "pgm")?;
    let masks = ids
        .iter()
        .map(|id| pnm::read_mask(&dir.join(format!("{id}.pgm"))))
        .collect::<Result<Vec<_>>>()?;
    let map = data::location_probability_map(&masks, size.0, size.1)?;
    let hist = data::area_histogram(&masks, bins)?;
    create_dir(out)?;
    pnm::write_gray(&out.join("location_probability.pgm"), &map)?;
    write_text(&out.join("area_histogram.csv"), &hist.to_csv())?;
    print!("{}", hist.to_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { out, count, size, seed } => gen(&out, count, pair(&size), seed)?,
        Command::Train {
            data,
            config,
            out,
            log,
            epochs,
            batch_size,
            seed,
            base_lr,
            overrides,
        } => train_cmd(&data, config.as_deref(), &out, log, epochs, batch_size, seed, base_lr, &overrides)?,
        Command::Infer { ckpt, images, out, maps } => infer(&ckpt, &images, &out, maps)?,
        Command::Eval { pred, gt, report } => eval(&pred, &gt, &report)?,
        Command::Stats { masks, out, size, bins } => stats(&masks, &out, pair(&size), bins)?,
        Command::Gradcheck { seed, size } => {
            print_config(
                "gradcheck",
                &[("seed", seed.to_string()), ("size", format!("{},{}", size[0], size[1]))],
            );
            let results = gradcheck::suite(seed, pair(&size))?;
            print!("{}", gradcheck::table(&results));
            if results.iter().any(|r| !r.passed()) {
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
        Command::Selftest => {
            print_config("selftest", &[]);
            let results = selftest::run_all();
            let mut failed = 0;
            for r in &results {
                match &r.outcome {
                    Ok(()) => println!("PASS  {}", r.name),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL  {}: {msg}", r.name);
                    }
                }
            }
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
