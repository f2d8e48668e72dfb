use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use zsar_core::gradcheck::suite::run_suite;
use zsar_core::harness::ablate::mean_std;
use zsar_core::harness::config::parse_seeds;
use zsar_core::harness::dataset::model_stream;
use zsar_core::harness::report::{
    write_ablation_csv, write_epoch_csv, write_inspection_csv, AblationSummary, SeedSummary, TrainSummary,
};
use zsar_core::harness::{
    baseline_predictions, build_dataset, cross_product, loss_preset, module_preset, run_ablation_matrix, train,
    train_model, workers_from_env, AblationCell, ExperimentConfig, Model, Splitting,
};
use zsar_core::losses::LossFlags;
use zsar_core::msm::{inspect, MsmSettings};

/// Zero-shot action recognition experiments on synthetic frozen-backbone features.
///
/// Worker threads are taken from ZSAR_WORKERS (default: all cores); results do not
/// depend on it.
#[derive(Parser)]
#[command(name = "zsar", version)]
struct Cli {
    #[command(flatten)]
    opts: ConfigOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seeds, e.g. `0,1,2` or `0..10`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long = "lambda-n", global = true)]
    lambda_n: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Class list file (`id, name[, desc_seed]` per line).
    #[arg(long, global = true)]
    classes: Option<PathBuf>,
    #[arg(long = "no-ce", global = true)]
    no_ce: bool,
    #[arg(long = "no-cl", global = true)]
    no_cl: bool,
    #[arg(long = "no-clip-loss", global = true)]
    no_clip_loss: bool,
    #[arg(long = "no-proj", global = true)]
    no_proj: bool,
    #[arg(long = "no-neg", global = true)]
    no_neg: bool,
    #[arg(long = "no-da", global = true)]
    no_da: bool,
    #[arg(long = "no-msm", global = true)]
    no_msm: bool,
    #[arg(long = "no-mab", global = true)]
    no_mab: bool,
    /// `offsets` or `fixed`.
    #[arg(long, global = true)]
    splitting: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed; write per-epoch CSV and a JSON summary.
    Train {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train (for the configured epochs) and report zero-shot accuracy against the frozen baseline.
    Eval {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation matrix; one CSV row per (configuration, seed) plus a JSON summary.
    Ablate {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// `modules` or `losses`; overrides the toggle lists.
        #[arg(long)]
        preset: Option<String>,
        /// Comma list of on/off for the Dual Adapter.
        #[arg(long = "da-set")]
        da_set: Option<String>,
        #[arg(long = "msm-set")]
        msm_set: Option<String>,
        #[arg(long = "mab-set")]
        mab_set: Option<String>,
        /// Comma list of offsets/fixed.
        #[arg(long = "splitting-set")]
        splitting_set: Option<String>,
        /// Comma list of loss sets such as `all`, `ce`, `ce+neg`, `clip`.
        #[arg(long = "loss-set")]
        loss_set: Option<String>,
    },
    /// Finite-difference check of every differentiable op and the end-to-end loss.
    Gradcheck {
        #[arg(long = "check-seeds", default_value_t = 5)]
        check_seeds: u64,
    },
    /// Per-frame saliency, offsets and sampling positions for one clip.
    InspectMsm {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index into the chosen split.
        #[arg(long, default_value_t = 0)]
        video: usize,
        /// `train` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(o: &ConfigOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &o.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = &o.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(v) = o.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = o.lambda_n {
        cfg.lambda_n = v;
    }
    if let Some(v) = o.temperature {
        cfg.temperature = v;
    }
    if let Some(p) = &o.classes {
        cfg.classes_file = Some(p.clone());
    }
    let l = &mut cfg.losses;
    l.ce &= !o.no_ce;
    l.cl &= !o.no_cl;
    l.clip &= !o.no_clip_loss;
    l.proj &= !o.no_proj;
    l.neg &= !o.no_neg;
    let a = &mut cfg.architecture;
    a.da &= !o.no_da;
    a.msm &= !o.no_msm;
    a.mab &= !o.no_mab;
    if let Some(s) = &o.splitting {
        a.splitting = s.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let results: Vec<_> = pool(workers_from_env())?
        .install(|| cfg.seeds.par_iter().map(|&s| train(cfg, s)).collect::<Vec<_>>())
        .into_iter()
        .collect::<zsar_core::Result<_>>()?;
    let records: Vec<_> = results.iter().flat_map(|(_, o)| o.records.iter().cloned()).collect();
    write_epoch_csv(create(&out.join("metrics.csv"))?, &records)?;
    let finals: Vec<_> = results.iter().map(|(_, o)| o.records.last().expect("epoch 0")).collect();
    let (unseen_mean, unseen_std) = mean_std(&finals.iter().map(|r| r.unseen_accuracy).collect::<Vec<_>>());
    let (seen_mean, seen_std) = mean_std(&finals.iter().map(|r| r.seen_accuracy).collect::<Vec<_>>());
    let summary = TrainSummary {
        config: cfg,
        seeds: results
            .iter()
            .zip(&finals)
            .map(|((ds, o), r)| SeedSummary {
                seed: ds.seed,
                final_record: r,
                training_view_sha256: &o.training_view,
            })
            .collect(),
        unseen_mean,
        unseen_std,
        seen_mean,
        seen_std,
    };
    serde_json::to_writer_pretty(create(&out.join("summary.json"))?, &summary)?;
    for r in &finals {
        println!(
            "seed {:>3}  loss {:.4}  seen {:.3}  unseen {:.3}",
            r.seed, r.loss.total, r.seen_accuracy, r.unseen_accuracy
        );
    }
    println!("unseen accuracy {unseen_mean:.4} +- {unseen_std:.4} over {} seeds", finals.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalRow {
    seed: u64,
    epochs: usize,
    accuracy: f64,
    baseline_accuracy: f64,
    agreement_with_baseline: f64,
    predictions: Vec<usize>,
    baseline_predictions: Vec<usize>,
    labels: Vec<usize>,
}

fn cmd_eval(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let rows: Vec<EvalRow> = pool(workers_from_env())?
        .install(|| {
            cfg.seeds
                .par_iter()
                .map(|&seed| -> zsar_core::Result<EvalRow> {
                    let ds = build_dataset(cfg, seed)?;
                    let model = Model::init(cfg, ds.train.classes.len(), model_stream(seed));
                    let trained = train_model(cfg, &ds, model)?;
                    let base = baseline_predictions(&ds.test)?;
                    let pred = trained.evaluation.predictions;
                    let agree = pred.iter().zip(&base).filter(|(a, b)| a == b).count() as f64 / base.len() as f64;
                    Ok(EvalRow {
                        seed,
                        epochs: cfg.epochs,
                        accuracy: trained.evaluation.accuracy,
                        baseline_accuracy: zsar_core::harness::train::accuracy(&base, &ds.test.labels),
                        agreement_with_baseline: agree,
                        predictions: pred,
                        baseline_predictions: base,
                        labels: ds.test.labels.clone(),
                    })
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<zsar_core::Result<_>>()?;
    for r in &rows {
        println!(
            "seed {:>3}  unseen {:.3}  baseline {:.3}  agreement {:.3}",
            r.seed, r.accuracy, r.baseline_accuracy, r.agreement_with_baseline
        );
    }
    let (m, s) = mean_std(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let (bm, _) = mean_std(&rows.iter().map(|r| r.baseline_accuracy).collect::<Vec<_>>());
    println!("unseen accuracy {m:.4} +- {s:.4}; frozen baseline {bm:.4}");
    if let Some(dir) = out {
        serde_json::to_writer_pretty(create(&dir.join("eval.json"))?, &rows)?;
    }
    Ok(())
}

fn parse_bools(s: &str) -> Result<Vec<bool>> {
    s.split(',')
        .map(|v| match v.trim() {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            o => bail!("expected on/off, got {o:?}"),
        })
        .collect()
}

fn parse_losses(s: &str) -> Result<LossFlags> {
    if s == "all" {
        return Ok(LossFlags::ALL);
    }
    let mut f = LossFlags {
        ce: false,
        cl: false,
        clip: false,
        proj: false,
        neg: false,
    };
    for part in s.split('+') {
        match part.trim() {
            "ce" => f.ce = true,
            "cl" => f.cl = true,
            "clip" => f.clip = true,
            "proj" => f.proj = true,
            "neg" => f.neg = true,
            o => bail!("unknown loss {o:?}"),
        }
    }
    Ok(f)
}

fn ablation_cells(
    cfg: &ExperimentConfig,
    preset: Option<&str>,
    lists: [Option<&String>; 5],
) -> Result<Vec<AblationCell>> {
    match preset {
        Some("modules") => return Ok(module_preset(cfg.losses)),
        Some("losses") => return Ok(loss_preset(cfg.architecture)),
        Some(o) => bail!("unknown preset {o:?} (modules, losses)"),
        None => {}
    }
    let a = cfg.architecture;
    let [da, msm, mab, split, loss] = lists;
    let bools = |v: Option<&String>, d: bool| v.map_or(Ok(vec![d]), |s| parse_bools(s));
    let splits: Vec<Splitting> = match split {
        Some(s) => s.split(',').map(|x| x.trim().parse()).collect::<zsar_core::Result<_>>()?,
        None => vec![a.splitting],
    };
    let losses: Vec<LossFlags> = match loss {
        Some(s) => s.split(',').map(|x| parse_losses(x.trim())).collect::<Result<_>>()?,
        None => vec![cfg.losses],
    };
    Ok(cross_product(
        &bools(da, a.da)?,
        &bools(msm, a.msm)?,
        &bools(mab, a.mab)?,
        &splits,
        &losses,
    ))
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, cells: &[AblationCell]) -> Result<()> {
    let table = run_ablation_matrix(cfg, cells, workers_from_env())?;
    write_ablation_csv(create(&out.join("ablation.csv"))?, &table)?;
    serde_json::to_writer_pretty(
        create(&out.join("ablation.json"))?,
        &AblationSummary {
            config: cfg,
            table: &table,
        },
    )?;
    for s in &table.summary {
        println!(
            "{:<44} unseen {:.4} +- {:.4}  seen {:.4}",
            s.label, s.unseen_mean, s.unseen_std, s.seen_mean
        );
    }
    if table.equivalence_checks > 0 {
        println!("fixed split == zero-frozen offsets: {} runs identical", table.equivalence_checks);
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<bool> {
    let reports = run_suite(seeds)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    println!("{}", if ok { "all gradients verified" } else { "gradient check FAILED" });
    Ok(ok)
}

fn cmd_inspect(cfg: &ExperimentConfig, seed: u64, video: usize, split: &str, out: Option<&Path>) -> Result<()> {
    if !cfg.architecture.msm {
        bail!("inspect-msm needs the MSM enabled");
    }
    let (ds, trained) = train(cfg, seed)?;
    let part = match split {
        "train" => &ds.train,
        "test" => &ds.test,
        o => bail!("split must be train or test, got {o:?}"),
    };
    let clip = part
        .videos
        .get(video)
        .with_context(|| format!("video {video} out of range ({} videos)", part.len()))?;
    let m = &trained.model;
    let head = match m.arch.splitting {
        Splitting::Offsets => m.offsets.clone(),
        _ => zsar_core::msm::OffsetHead::zeros(cfg.max_offset),
    };
    let input = if m.arch.da {
        let shape = clip.tensor().shape().to_vec();
        let tokens = clip.tensor().reshape(&[shape[0] * shape[1] * shape[2], shape[3]])?;
        let adapted = zsar_core::backbone_sim::apply_dual_adapter(&m.adapter, &tokens)?;
        zsar_core::backbone_sim::FrameFeatures::new(adapted.reshape(&shape)?)?
    } else {
        clip.clone()
    };
    let rows = inspect(
        &input,
        &head,
        MsmSettings {
            alpha: cfg.alpha,
            beta: cfg.beta,
        },
    )?;
    match out {
        Some(p) => write_inspection_csv(create(p)?, &rows)?,
        None => write_inspection_csv(std::io::stdout().lock(), &rows)?,
    }
    eprintln!(
        "seed {seed} {split} video {video}: label {}, motion frames {:?}",
        part.labels[video], part.motion_frames[video]
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.opts)?;
    match cli.command {
        Command::Train { out } => cmd_train(&cfg, &out)?,
        Command::Eval { out } => cmd_eval(&cfg, out.as_deref())?,
        Command::Ablate {
            out,
            preset,
            da_set,
            msm_set,
            mab_set,
            splitting_set,
            loss_set,
        } => {
            let cells = ablation_cells(
                &cfg,
                preset.as_deref(),
                [da_set.as_ref(), msm_set.as_ref(), mab_set.as_ref(), splitting_set.as_ref(), loss_set.as_ref()],
            )?;
            cmd_ablate(&cfg, &out, &cells)?
        }
        Command::Gradcheck { check_seeds } => return cmd_gradcheck(check_seeds),
        Command::InspectMsm { seed, video, split, out } => cmd_inspect(&cfg, seed, video, &split, out.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
