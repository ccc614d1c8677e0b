use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use coevo_core::autodiff::{GradCheckOptions, Graph};
use coevo_core::body::write_obj;
use coevo_core::checkpoint::Checkpoint;
use coevo_core::config::{Preset, TrainConfig};
use coevo_core::dataset::{generate_dataset, read_dataset};
use coevo_core::decoder::write_matrix_csv;
use coevo_core::error::{Error, Result};
use coevo_core::grad_suite::run_suite;
use coevo_core::train::{window_input, Trainer};

#[derive(Parser)]
#[command(name = "coevo", version, about = "Pose and mesh co-evolution on synthetic motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// toy or paper
    #[arg(long, default_value = "toy")]
    preset: String,
    /// `key = value` settings file applied over the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
    /// Train one stage and save a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint whose pose stream starts stage 2
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from a checkpoint of the same stage
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write `step,loss,grad_norm` for every step
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Also save the checkpoint every N steps
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// Sliding-window metrics of a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a predicted (or ground-truth) mesh as OBJ
    ExportObj {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ground_truth: bool,
    },
    /// Write head-averaged decoder attention maps as CSV
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and the full model
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Probed coordinates per full-model parameter tensor
        #[arg(long, default_value_t = 4)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(common: &Common, stage: u8) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(Preset::parse(&common.preset)?).for_stage(stage);
    if let Some(path) = &common.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(c) = &common.checkpoint {
        cfg.checkpoint = c.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model rebuilt from the checkpoint's own configuration; command-line
/// overrides still apply.
fn load_trainer(common: &Common) -> Result<(Trainer, TrainConfig)> {
    let cfg = config(common, 1)?;
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    let mut model_cfg = ckpt.config.clone();
    for pair in &common.overrides {
        model_cfg.set_pair(pair)?;
    }
    model_cfg.dataset = cfg.dataset.clone();
    model_cfg.checkpoint = cfg.checkpoint.clone();
    let trainer = Trainer::for_evaluation(model_cfg.clone(), &ckpt)?;
    Ok((trainer, model_cfg))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn pick_clip(clips: usize, clip: usize) -> Result<()> {
    if clip >= clips {
        return Err(Error::Config(format!("clip {clip} out of range, dataset has {clips}")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed, clips } => {
            let cfg = config(&common, 1)?;
            let data = generate_dataset(&cfg.dataset, cfg.synth(), seed, clips)?;
            println!("wrote {} clips to {}", data.clips.len(), cfg.dataset.display());
        }
        Command::Train {
            common,
            stage,
            init,
            resume,
            curve,
            save_every,
        } => {
            let cfg = config(&common, stage)?;
            if stage == 2 && init.is_none() && resume.is_none() {
                return Err(Error::Config("stage 2 needs --init <stage-1 checkpoint> or --resume".into()));
            }
            let data = read_dataset(&cfg.dataset)?;
            let mut trainer = match (&resume, &init) {
                (Some(path), _) => Trainer::resume(cfg.clone(), &Checkpoint::load(path)?)?,
                (None, Some(path)) if stage == 2 => Trainer::from_stage1(cfg.clone(), &Checkpoint::load(path)?)?,
                _ => Trainer::new(cfg.clone())?,
            };
            let samples = trainer.samples(&data.clips)?;
            let total = trainer.planned_steps(samples.len());
            log::info!("stage {stage}: {} samples, steps {}..{total}", samples.len(), trainer.step);
            let mut curve_out = curve.as_deref().map(create).transpose()?;
            if let Some(out) = curve_out.as_mut() {
                writeln!(out, "step,loss,grad_norm")?;
            }
            let started = Instant::now();
            while trainer.step < total {
                let log = trainer.train_step(&samples)?;
                if let Some(out) = curve_out.as_mut() {
                    writeln!(out, "{},{:e},{:e}", log.step, log.loss, log.grad_norm)?;
                }
                let every = cfg.log_every.max(1) as u64;
                if log.step % every == 0 || trainer.step == total {
                    println!("step={} loss={:.6e} grad_norm={:.3e}", log.step, log.loss, log.grad_norm);
                }
                if save_every.is_some_and(|n| n > 0 && trainer.step % n == 0) {
                    trainer.checkpoint().save(&cfg.checkpoint)?;
                }
            }
            if let Some(mut out) = curve_out {
                out.flush()?;
            }
            trainer.checkpoint().save(&cfg.checkpoint)?;
            let final_loss = trainer.mean_loss(&samples)?;
            if stage == 2 {
                let l = trainer.mean_losses(&samples)?;
                println!(
                    "terms mesh={:.4e} joint={:.4e} normal={:.4e} edge={:.4e} joint_int={:.4e}",
                    l.mesh, l.joint, l.normal, l.edge, l.joint_int
                );
            }
            println!(
                "done steps={} final_loss={final_loss:.6e} seconds={:.1} checkpoint={}",
                trainer.step,
                started.elapsed().as_secs_f64(),
                cfg.checkpoint.display()
            );
        }
        Command::Eval { common, json, report } => {
            let (trainer, cfg) = load_trainer(&common)?;
            let data = read_dataset(&cfg.dataset)?;
            let eval = trainer.evaluate(&data.clips)?;
            let text = eval.to_text();
            if let Some(path) = report {
                fs::write(path, &text)?;
            }
            if let Some(path) = json {
                let body = serde_json::to_string_pretty(&eval.to_json()).map_err(|e| Error::Malformed {
                    what: "report",
                    detail: e.to_string(),
                })?;
                fs::write(path, body)?;
            }
            match &eval.aggregate {
                Some(a) => print!("{}", a.to_text()),
                None => println!("no clip long enough for a window of {} frames", cfg.frames),
            }
        }
        Command::ExportObj {
            common,
            clip,
            start,
            out,
            ground_truth,
        } => {
            let cfg = config(&common, 1)?;
            let data = read_dataset(&cfg.dataset)?;
            pick_clip(data.clips.len(), clip)?;
            let c = &data.clips[clip];
            if start + cfg.frames > c.frames() {
                return Err(Error::Config(format!(
                    "window at {start} runs past the clip's {} frames",
                    c.frames()
                )));
            }
            let (mesh, faces) = if ground_truth {
                let body = coevo_core::body::BodyModel::build(cfg.body)?;
                (c.target_mesh(start + coevo_core::feature_stream::mid_frame(cfg.frames)), body.faces)
            } else {
                let (trainer, cfg) = load_trainer(&common)?;
                let input = window_input(c, start, cfg.frames, cfg.zero_features)?;
                (trainer.predict(&input)?.mesh, trainer.model.body.faces.clone())
            };
            let mut w = create(&out)?;
            write_obj(&mut w, &mesh, &faces)?;
            w.flush()?;
            println!("wrote {}", out.display());
        }
        Command::ExportAttn { common, clip, start, out } => {
            let (trainer, cfg) = load_trainer(&common)?;
            let data = read_dataset(&cfg.dataset)?;
            pick_clip(data.clips.len(), clip)?;
            let c = &data.clips[clip];
            if start + cfg.frames > c.frames() {
                return Err(Error::Config(format!(
                    "window at {start} runs past the clip's {} frames",
                    c.frames()
                )));
            }
            let input = window_input(c, start, cfg.frames, cfg.zero_features)?;
            let mut g = Graph::with_params(&trainer.store);
            let p = g.constant(input.pose_2d)?;
            let f = g.constant(input.features)?;
            let (_, maps) = trainer.model.forward_with_attention(&mut g, p, f)?;
            fs::create_dir_all(&out)?;
            for (i, block) in maps.iter().enumerate() {
                for (name, m) in block.maps() {
                    let path = out.join(format!("block{i}_{name}.csv"));
                    let mut w = create(&path)?;
                    write_matrix_csv(&mut w, m)?;
                    w.flush()?;
                }
            }
            println!("wrote {} blocks to {}", maps.len(), out.display());
        }
        Command::GradCheck { common, probes, seed } => {
            let cfg = config(&common, 1)?;
            let opts = GradCheckOptions {
                max_probes: Some(probes),
                seed,
                ..Default::default()
            };
            let started = Instant::now();
            let report = run_suite(&cfg, &opts)?;
            for e in &report.entries {
                println!(
                    "{:<32} max_rel_error={:.3e} probes={} {}",
                    e.name,
                    e.report.max_rel_error,
                    e.report.probes,
                    if e.report.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max_rel_error = {:.3e}\nprobes = {}\nseconds = {:.1}\npassed = {}",
                report.max_rel_error(),
                report.probes(),
                started.elapsed().as_secs_f64(),
                report.passed()
            );
            if !report.passed() {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
                    report.max_rel_error(),
                    opts.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
