use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bicovg::checkpoint;
use bicovg::config::{load_config, preset_source, Config, Split};
use bicovg::data::{load_split, save_split, DataFormat, Dataset, SyntheticSpec};
use bicovg::diagnostics::{read_curve_csv, report, LayerCurve};
use bicovg::memmodel;
use bicovg::run::{self, FitOptions, RunSummary};
use bicovg::training::TrainState;

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "bicovg", version, about = "Local goodness training for convolutional networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset (vgg16-tiny-in, vgg16-in100, vgg8-cifar100, desk8, desk16).
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, e.g. `train.hgb_m=4` or `arch.blocks.0.out=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<Config> {
        match (&self.config, &self.preset) {
            (Some(path), _) => Ok(load_config(path, &self.overrides)?),
            (None, Some(name)) => Ok(Config::from_toml_with(preset_source(name)?, &self.overrides)?),
            (None, None) => Err("pass --config or --preset".into()),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and run the fusion stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data directory, or `synthetic[:SEED]` for the built-in corpus.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Track engine tensor bytes and report the observed peak.
        #[arg(long)]
        measure_mem: bool,
        /// Score the test split after every epoch.
        #[arg(long)]
        eval_each_epoch: bool,
    },
    /// Fit fusion weights for a trained checkpoint on its training split.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
    },
    /// Per-layer, Best Pred and fused top-1 of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also write a `layer,top1` curve.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Curve metrics and pairwise deltas for per-layer accuracy CSVs.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic peak-memory estimates.
    Memplan {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        batch: usize,
        /// Block sizes to tabulate; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        sweep_m: Vec<usize>,
    },
    /// Summarise a run directory into report.md and diagnostics.json.
    ExportReport {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write the synthetic corpus to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Idx)]
        format: FormatArg,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 28)]
        size: usize,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Idx,
    Raw,
}

fn synthetic_for(cfg: &Config, seed: u64) -> CliResult<(Dataset, Dataset)> {
    let [c, h, w] = cfg.arch.input;
    if h != w {
        return Err("the synthetic corpus needs square inputs".into());
    }
    Ok(SyntheticSpec {
        classes: cfg.arch.num_classes,
        channels: c,
        size: h,
        seed,
        ..SyntheticSpec::default()
    }
    .generate()?)
}

/// Train and optional test split for `cfg` from `--data`.
fn load_data(spec: &str, cfg: &Config) -> CliResult<(Dataset, Option<Dataset>)> {
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let seed = rest.strip_prefix(':').map(str::parse).transpose()?.unwrap_or(0);
        let (tr, te) = synthetic_for(cfg, seed)?;
        return Ok((tr, Some(te)));
    }
    let dir = Path::new(spec);
    let k = cfg.arch.num_classes;
    let train = load_split(dir, Split::Train, k)?;
    let test = match load_split(dir, Split::Test, k) {
        Ok(t) => Some(t),
        Err(bicovg::Error::Format { .. }) => None,
        Err(e) => return Err(e.into()),
    };
    Ok((train, test))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train(cfg: Config, data: &str, out: &Path, measure_mem: bool, eval_each_epoch: bool) -> CliResult<()> {
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let (train, test) = load_data(data, &cfg)?;
    eprintln!(
        "{}: {} blocks, m = {}, {} train / {} test samples",
        cfg.name,
        cfg.arch.num_blocks(),
        cfg.train.hgb_m,
        train.len(),
        test.as_ref().map_or(0, Dataset::len)
    );
    let mut state = TrainState::new(cfg)?;
    let opts = FitOptions {
        epochs: None,
        eval_each_epoch,
        measure_mem,
    };
    let summary = run::fit(&mut state, &train, test.as_ref(), &opts, |records| {
        let cells: Vec<String> = records
            .iter()
            .map(|r| format!("{}{}={:.1}", if r.split == Split::Train { "tr" } else { "te" }, r.layer, r.top1))
            .collect();
        eprintln!("epoch {:>3}  {}", records.first().map_or(0, |r| r.epoch), cells.join(" "));
    })?;
    run::write_history_csv(&out.join("metrics.csv"), &summary.history)?;
    let shown = summary.test.as_ref().unwrap_or(&summary.fusion.train);
    run::write_fusion_csv(&out.join("fusion.csv"), &summary.fusion.weights, shown)?;
    checkpoint::save(&state, &out.join("model.ckpt"))?;
    let mut report = serde_json::to_value(&summary)?;
    if measure_mem {
        let est = memmodel::estimate_plan(&state.config.arch, &state.config.train, state.config.train.batch_size)?;
        report["estimated_peak_bytes"] = est.peak_bytes.into();
        report["memory_estimate"] = serde_json::to_value(est)?;
    }
    write_json(&out.join("report.json"), &report)?;
    if let Some(t) = &summary.test {
        println!(
            "best pred {:.2}% (layer {}), fusion {:.2}%",
            t.best_pred_top1.unwrap_or(0.0),
            t.best_pred_layer.unwrap_or(0),
            t.fused_top1.unwrap_or(0.0)
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn fuse(ckpt: &Path, data: &str) -> CliResult<()> {
    let mut state = checkpoint::load(ckpt)?;
    let (train, test) = load_data(data, &state.config)?;
    let summary = run::fit_fusion(&mut state, &train)?;
    let shown = match &test {
        Some(t) => run::evaluate(&mut state, t)?,
        None => summary.train.clone(),
    };
    checkpoint::save(&state, ckpt)?;
    let csv = ckpt.with_file_name("fusion.csv");
    run::write_fusion_csv(&csv, &summary.weights, &shown)?;
    println!("layer,w_l,top1");
    for (s, w) in shown.layers.iter().zip(&summary.weights) {
        println!("{},{:.6},{:.2}", s.layer, w, s.top1);
    }
    println!("fused top1 {:.2}%  N_eff {:.3}", shown.fused_top1.unwrap_or(0.0), summary.n_eff);
    Ok(())
}

fn eval(ckpt: &Path, data: &str, split: Split, curve: Option<&Path>) -> CliResult<()> {
    let mut state = checkpoint::load(ckpt)?;
    let (train, test) = load_data(data, &state.config)?;
    let ds = match split {
        Split::Train => train,
        Split::Test => test.ok_or("data has no test split")?,
    };
    let report = run::evaluate(&mut state, &ds)?;
    if let Some(path) = curve {
        let mut out = String::from("layer,top1\n");
        for s in &report.layers {
            out.push_str(&format!("{},{}\n", s.layer, s.top1));
        }
        fs::write(path, out)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn diagnose(curves: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let curves: Vec<LayerCurve> = curves.iter().map(|p| read_curve_csv(p)).collect::<Result<_, _>>()?;
    let r = report(&curves)?;
    let text = serde_json::to_string_pretty(&r)?;
    match out {
        Some(p) => fs::write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn memplan(cfg: Config, batch: usize, sweep: &[usize]) -> CliResult<()> {
    let ms = if sweep.is_empty() { vec![cfg.train.hgb_m] } else { sweep.to_vec() };
    let valid: Vec<usize> = ms.iter().copied().filter(|&m| m > 0 && cfg.arch.num_blocks().is_multiple_of(m)).collect();
    for m in ms.iter().filter(|m| !valid.contains(m)) {
        eprintln!("skipping m = {m}: does not divide {} blocks", cfg.arch.num_blocks());
    }
    print!("{}", memmodel::sweep_csv(&cfg.arch, &cfg.train, batch, &valid)?);
    Ok(())
}

fn export_report(dir: &Path) -> CliResult<()> {
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
    let mut curves = Vec::new();
    let mut md = format!("# {}\n\n", summary.name);
    md.push_str(&format!(
        "{} epochs, {} steps, {:.1} s, {} parameters\n\n",
        summary.epochs, summary.steps, summary.seconds, summary.param_count
    ));
    md.push_str("| layer | w_l | train top-1 |");
    let test = summary.test.as_ref();
    if test.is_some() {
        md.push_str(" test top-1 |");
    }
    md.push_str("\n|---|---|---|");
    if test.is_some() {
        md.push_str("---|");
    }
    md.push('\n');
    for (i, s) in summary.fusion.train.layers.iter().enumerate() {
        md.push_str(&format!("| {} | {:.4} | {:.2} |", s.layer, summary.fusion.weights[i], s.top1));
        if let Some(t) = test {
            md.push_str(&format!(" {:.2} |", t.layers[i].top1));
        }
        md.push('\n');
    }
    let mut train_curve = summary.fusion.train.curve("train")?;
    train_curve.weights = Some(summary.fusion.weights.clone());
    curves.push(train_curve);
    if let Some(t) = test {
        md.push_str(&format!(
            "\nBest Pred {:.2}% (layer {}), Logistic Fusion {:.2}%, N_eff {:.3}\n",
            t.best_pred_top1.unwrap_or(0.0),
            t.best_pred_layer.unwrap_or(0),
            t.fused_top1.unwrap_or(0.0),
            summary.fusion.n_eff
        ));
        let mut c = t.curve("test")?;
        c.weights = Some(summary.fusion.weights.clone());
        curves.push(c);
    }
    if let Some(peak) = summary.measured_peak_bytes {
        md.push_str(&format!("\nMeasured peak: {:.2} MiB\n", peak as f64 / (1 << 20) as f64));
    }
    let diag = report(&curves)?;
    write_json(&dir.join("diagnostics.json"), &diag)?;
    fs::write(dir.join("report.md"), md)?;
    println!("wrote {} and {}", dir.join("report.md").display(), dir.join("diagnostics.json").display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Train {
            cfg,
            data,
            out,
            measure_mem,
            eval_each_epoch,
        } => train(cfg.load()?, &data, &out, measure_mem, eval_each_epoch),
        Cmd::Fuse { ckpt, data } => fuse(&ckpt, &data),
        Cmd::Eval { ckpt, data, split, curve } => eval(&ckpt, &data, split.into(), curve.as_deref()),
        Cmd::Diagnose { curves, out } => diagnose(&curves, out.as_deref()),
        Cmd::Memplan { cfg, batch, sweep_m } => memplan(cfg.load()?, batch, &sweep_m),
        Cmd::ExportReport { run_dir } => export_report(&run_dir),
        Cmd::Synth {
            out,
            format,
            classes,
            channels,
            size,
            train,
            test,
            seed,
        } => {
            let (tr, te) = SyntheticSpec {
                classes,
                channels,
                size,
                train,
                test,
                seed,
                ..SyntheticSpec::default()
            }
            .generate()?;
            let fmt = match format {
                FormatArg::Idx => DataFormat::Idx,
                FormatArg::Raw => DataFormat::Raw,
            };
            save_split(&tr, &out, Split::Train, fmt)?;
            save_split(&te, &out, Split::Test, fmt)?;
            println!("wrote {} train / {} test samples to {}", tr.len(), te.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
