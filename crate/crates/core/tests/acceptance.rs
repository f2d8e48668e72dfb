//! Acceptance criteria 1-10. Runs as a plain binary (no libtest harness) so every
//! criterion prints exactly one PASS/FAIL line; the process fails if any does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};

use zsar_core::autograd::Graph;
use zsar_core::backbone_sim::{generate_video, FrameFeatures, SyntheticVideoSpec, VideoDims};
use zsar_core::gradcheck::suite::{run_suite, CASES};
use zsar_core::harness::ablate::{run_ablation_matrix, workers_from_env, AblationCell, AblationTable};
use zsar_core::harness::dataset::model_stream;
use zsar_core::harness::model::{batch_forward, text_forward, Model};
use zsar_core::harness::{
    baseline_predictions, build_dataset, evaluate_zero_shot, Architecture, ExperimentConfig, Splitting,
};
use zsar_core::losses::{objective_forward, LossFlags, ObjectiveInputs};
use zsar_core::mab::{fuse, GateParams};
use zsar_core::msm::{msm_forward, saliency_profile, OffsetHead, MsmSettings};
use zsar_core::numerics::{layer_norm, RngStream, Sampler, Tensor, LAYER_NORM_EPS};
use zsar_core::text_space::PromptVars;

const CONFIG_BUDGET: Duration = Duration::from_secs(120);

fn flags(ce: bool, cl: bool, neg: bool, clip: bool, proj: bool) -> LossFlags {
    LossFlags { ce, cl, clip, proj, neg }
}

fn arch(da: bool, msm: bool, mab: bool, splitting: Splitting) -> Architecture {
    Architecture { da, msm, mab, splitting }
}

fn unseen(table: &AblationTable) -> Vec<f64> {
    table.rows.iter().map(|r| r.final_record.unseen_accuracy).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One cell over the default seeds, timed on its own.
fn timed_cell(cfg: &ExperimentConfig, cell: AblationCell) -> Result<(AblationTable, Duration)> {
    let start = Instant::now();
    let table = run_ablation_matrix(cfg, &[cell], workers_from_env())?;
    Ok((table, start.elapsed()))
}

fn c1_gradcheck() -> Result<String> {
    let start = Instant::now();
    let reports = run_suite(5)?;
    let elapsed = start.elapsed();
    ensure!(reports.len() == CASES.len(), "suite returned {} reports", reports.len());
    ensure!(
        reports.iter().any(|r| r.op_name == "end_to_end_total_loss"),
        "end-to-end loss not covered"
    );
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .context("empty suite")?;
    for r in &reports {
        ensure!(r.passed(), "{r}");
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{} checks x 5 seeds, worst {} rel {:.2e}, {:.1?}",
        reports.len(),
        worst.op_name,
        worst.max_rel_error,
        elapsed
    ))
}

fn c2_zero_offset_identity() -> Result<String> {
    let mut checked = 0;
    for t in [4, 8, 16] {
        for seed in 0..5 {
            let mut s = RngStream::new(seed, t as u64).generator();
            let x = s.gaussian(&[t, 2, 3, 4], 1.0);
            for head in [OffsetHead::zeros(1.5), OffsetHead::zero_output_init(1.5, &mut s)] {
                let mut g = Graph::new();
                let hv = head.register(&mut g);
                let xv = g.leaf(x.clone());
                let out = msm_forward(&mut g, &hv, xv, MsmSettings::default())?;
                let (xg, xd) = (g.value(out.streams.x_global), g.value(out.streams.x_dynamic));
                let frame = 2 * 3 * 4;
                for i in 0..t / 2 {
                    let odd = &x.data()[2 * i * frame..(2 * i + 1) * frame];
                    let even = &x.data()[(2 * i + 1) * frame..(2 * i + 2) * frame];
                    ensure!(&xg.data()[i * frame..(i + 1) * frame] == odd, "T={t}: global stream differs at {i}");
                    ensure!(&xd.data()[i * frame..(i + 1) * frame] == even, "T={t}: dynamic stream differs at {i}");
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} clips, T in {{4, 8, 16}}, bit-exact"))
}

fn random_head(s: &mut Sampler, delta: f64) -> OffsetHead {
    let scale = s.uniform(0.1, 4.0);
    let mut head = OffsetHead::zeros(delta);
    for t in head.tensors_mut() {
        *t = s.gaussian(t.shape(), scale);
    }
    head
}

fn c3_clamp_safety() -> Result<String> {
    let trials = 10_000;
    let mut s = RngStream::new(3, 3).generator();
    for trial in 0..trials {
        let t = [4, 6, 8, 16][s.below(4)];
        let delta = 5.0 * (1.0 - s.uniform(0.0, 1.0));
        let head = random_head(&mut s, delta);
        let scale = s.uniform(0.1, 3.0);
        let x = s.gaussian(&[t, 1, 2, 3], scale);
        let mut g = Graph::new();
        let hv = head.register(&mut g);
        let xv = g.leaf(x.clone());
        let out = msm_forward(&mut g, &hv, xv, MsmSettings::default())?;
        let frame = 6;
        for (idx, samples) in [
            (out.streams.idx_global, out.streams.x_global),
            (out.streams.idx_dynamic, out.streams.x_dynamic),
        ] {
            let pos = g.value(idx).data().to_vec();
            let vals = g.value(samples).data();
            for (i, &p) in pos.iter().enumerate() {
                ensure!((1.0..=t as f64).contains(&p), "trial {trial}: index {p} outside [1, {t}]");
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(t);
                for j in 0..frame {
                    let a = x.data()[(lo - 1) * frame + j];
                    let b = x.data()[(hi - 1) * frame + j];
                    let v = vals[i * frame + j];
                    let tol = 1e-12 * a.abs().max(b.abs()).max(1.0);
                    ensure!(
                        v >= a.min(b) - tol && v <= a.max(b) + tol,
                        "trial {trial}: sample {v} outside [{}, {}]",
                        a.min(b),
                        a.max(b)
                    );
                }
            }
        }
    }
    Ok(format!("{trials} trials, delta in (0, 5]"))
}

fn c4_constant_clip() -> Result<String> {
    let mut checked = 0;
    for seed in 0..5 {
        let mut s = RngStream::new(seed, 4).generator();
        let frame = s.gaussian(&[2, 2, 16], 1.0);
        let data: Vec<f64> = (0..8).flat_map(|_| frame.data().iter().copied()).collect();
        let clip = FrameFeatures::new(Tensor::new(vec![8, 2, 2, 16], data)?)?;
        let p = saliency_profile(&clip, 0.75, 0.25)?;
        for (name, t) in [("v", &p.v), ("c", &p.c), ("m", &p.m)] {
            ensure!(t.data().iter().all(|&x| x == 0.0), "{name} = {:?}", t.data());
        }

        let cfg = ExperimentConfig::default();
        let ds = build_dataset(&cfg, seed)?;
        let mut model = Model::init(&cfg, cfg.k_seen, model_stream(seed));
        for t in model.trainable_mut() {
            let noise = s.gaussian(t.shape(), 0.1);
            *t = t.add(&noise)?;
        }
        let mut g = Graph::new();
        let vars = model.register(&mut g);
        let ctx = model.context.as_ref().map(|c| g.leaf(c.clone()));
        let bank = PromptVars {
            context: ctx,
            desc: g.leaf(ds.train.classes.semantic.clone()),
            neg_desc: g.leaf(ds.train.classes.negative.clone()),
        };
        let reference = g.leaf(ds.train.classes.semantic.clone());
        let (e_t, e_n) = text_forward(&mut g, &bank, &vars)?;
        let clips: Vec<&Tensor> = (0..cfg.k_seen).map(|_| clip.tensor()).collect();
        let e_v = batch_forward(&mut g, &model, &vars, &clips)?;
        let labels: Vec<usize> = (0..cfg.k_seen).collect();
        let obj = objective_forward(
            &mut g,
            ObjectiveInputs { e_v, e_t, e_n, reference },
            &labels,
            &cfg.loss_settings(),
        )?;
        ensure!(g.value(e_v).is_finite() && g.scalar(obj.total).is_finite(), "non-finite forward");
        let grads = g.backward(obj.total);
        for v in model.trainable_vars(&vars, ctx) {
            ensure!(grads.try_get(v).is_none_or(Tensor::is_finite), "non-finite gradient");
        }
        checked += 1;
    }
    Ok(format!("{checked} constant clips: v=c=m=0, finite loss and gradients"))
}

fn c5_mab_identities() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut s = RngStream::new(seed, 5).generator();
        let c = 16;
        let xd = s.gaussian(&[4, 2, 2, c], 1.0);
        let xg = s.gaussian(&[4, 2, 2, c], 1.0);
        let mut p = GateParams::new(c);
        p.gain = s.gaussian(&[c], 1.0);
        p.bias = s.gaussian(&[c], 1.0);
        let flat = |t: &Tensor| t.reshape(&[16, c]);

        let mut gated = p.clone();
        gated.w_g = s.gaussian(&[3 * c, c], 1.0);
        let out = fuse(&xd, &Tensor::zeros(xd.shape()), &gated)?;
        let want = layer_norm(&flat(&xd)?, &p.gain, &p.bias, LAYER_NORM_EPS)?;
        worst = worst.max(flat(&out)?.sub(&want)?.max_abs());

        let out = fuse(&xd, &xg, &p)?;
        let want = layer_norm(&flat(&xd)?.add(&flat(&xg)?.scale(0.5))?, &p.gain, &p.bias, LAYER_NORM_EPS)?;
        worst = worst.max(flat(&out)?.sub(&want)?.max_abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("20 seeds, max deviation {worst:.1e}"))
}

fn c6_baseline_reproduction() -> Result<String> {
    let mut compared = 0;
    let identity_archs = [
        arch(false, false, false, Splitting::Offsets),
        arch(true, false, false, Splitting::Offsets),
        arch(false, true, false, Splitting::Offsets),
        arch(true, true, false, Splitting::Offsets),
        arch(true, true, false, Splitting::Fixed),
    ];
    for a in identity_archs {
        let cfg = ExperimentConfig {
            architecture: a,
            context_init_std: 0.0,
            epochs: 0,
            ..ExperimentConfig::default()
        };
        for &seed in &cfg.seeds {
            let ds = build_dataset(&cfg, seed)?;
            let model = Model::init(&cfg, cfg.k_seen, model_stream(seed));
            let got = evaluate_zero_shot(&model, &ds.test)?.predictions;
            ensure!(got == baseline_predictions(&ds.test)?, "{} seed {seed} differs", a.label());
            compared += got.len();
        }
    }

    let dir = tempfile::tempdir()?;
    let out = Command::new(env!("CARGO_BIN_EXE_zsar"))
        .args(["--epochs", "0", "--set", "context_init_std=0", "--no-mab", "eval", "--out"])
        .arg(dir.path())
        .output()?;
    ensure!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval.json"))?)?;
    let rows = rows.as_array().context("eval.json is not an array")?;
    ensure!(rows.len() == 10, "expected 10 seeds");
    for r in rows {
        ensure!(r["predictions"] == r["baseline_predictions"], "CLI eval differs for seed {}", r["seed"]);
        ensure!(r["agreement_with_baseline"] == 1.0, "agreement below 1");
    }
    Ok(format!("{compared} library predictions + `zsar eval` on 10 seeds match the frozen baseline"))
}

fn c7_loss_trend(full: &AblationTable, full_time: Duration) -> Result<String> {
    let cfg = ExperimentConfig::default();
    let a = Architecture::FULL;
    let (ce, ce_time) = timed_cell(&cfg, AblationCell { arch: a, losses: flags(true, false, false, false, false) })?;
    let (neg, neg_time) = timed_cell(&cfg, AblationCell { arch: a, losses: flags(true, false, true, false, false) })?;
    let (f, c, n) = (unseen(full), unseen(&ce), unseen(&neg));
    let wins = n.iter().zip(&c).filter(|(x, y)| x > y).count();
    let detail = format!(
        "full {:.4} vs ce {:.4}; ce+neg > ce in {wins}/10 seeds (ce+neg mean {:.4}); times {:.0?}/{:.0?}/{:.0?}",
        mean(&f),
        mean(&c),
        mean(&n),
        full_time,
        ce_time,
        neg_time
    );
    ensure!(mean(&f) > mean(&c), "full objective not above CE-only: {detail}");
    ensure!(wins >= 8, "negative prompts help in too few seeds: {detail}");
    for t in [full_time, ce_time, neg_time] {
        ensure!(t < CONFIG_BUDGET, "configuration over budget: {detail}");
    }
    Ok(detail)
}

fn c8_module_trend(full: &AblationTable) -> Result<String> {
    let cfg = ExperimentConfig::default();
    let l = LossFlags::ALL;
    let singles = [
        arch(true, false, false, Splitting::Offsets),
        arch(false, true, false, Splitting::Offsets),
        arch(false, false, true, Splitting::Offsets),
    ];
    let full_mean = mean(&unseen(full));
    let mut parts = vec![format!("full {full_mean:.4}")];
    let mut failures = Vec::new();
    for a in singles {
        let (t, elapsed) = timed_cell(&cfg, AblationCell { arch: a, losses: l })?;
        let m = mean(&unseen(&t));
        parts.push(format!("{} {m:.4} ({elapsed:.0?})", a.label()));
        if full_mean < m {
            failures.push(a.label());
        }
    }
    let fixed = AblationCell { arch: arch(false, true, true, Splitting::Fixed), losses: l };
    let frozen = AblationCell { arch: arch(false, true, true, Splitting::FrozenOffsets), losses: l };
    let pair = run_ablation_matrix(&cfg, &[fixed, frozen], workers_from_env())?;
    let n = cfg.seeds.len();
    ensure!(pair.equivalence_checks == n, "harness checked {} pairs", pair.equivalence_checks);
    for i in 0..n {
        let (a, b) = (&pair.rows[i], &pair.rows[n + i]);
        ensure!(a.seed == b.seed && a.final_record == b.final_record, "seed {}: rows differ", a.seed);
    }
    parts.push(format!("fixed == frozen offsets on {n} seeds"));
    let detail = parts.join(", ");
    ensure!(failures.is_empty(), "full below {}: {detail}", failures.join(", "));
    Ok(detail)
}

fn c9_saliency_routing() -> Result<String> {
    let trials: u64 = 1000;
    let (sigma, amplitude) = (0.3, 1.5);
    let dims = VideoDims { frames: 8, height: 2, width: 2 };
    let mut hits = 0;
    for trial in 0..trials {
        let root = RngStream::new(trial, 9);
        let mut s = root.derive(0).generator();
        let protos = s.gaussian(&[1, 16], 0.25);
        let motion: Vec<usize> = s.subset(8, 2).into_iter().map(|f| f + 1).collect();
        let spec = SyntheticVideoSpec {
            class_id: 0,
            motion_frames: motion.clone(),
            motion_amplitude: amplitude,
            noise_sigma: sigma,
        };
        let clip = generate_video(&spec, &protos, dims, root.derive(1))?;
        let m = saliency_profile(&clip, 0.75, 0.25)?.m;
        let (mut lo_motion, mut hi_still) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 1..=8 {
            let v = m.data()[t - 1];
            if motion.contains(&t) {
                lo_motion = lo_motion.min(v);
            } else {
                hi_still = hi_still.max(v);
            }
        }
        hits += usize::from(lo_motion > hi_still);
    }
    let rate = hits as f64 / trials as f64;
    ensure!(rate >= 0.95, "motion frames on top in {rate:.3} of trials");
    Ok(format!("amplitude = 5 sigma, 2 motion frames: {hits}/{trials} trials"))
}

fn run_ablate(workers: &str, dir: &Path) -> Result<Vec<u8>> {
    let out = Command::new(env!("CARGO_BIN_EXE_zsar"))
        .env("ZSAR_WORKERS", workers)
        .args(["--seeds", "0..3", "--epochs", "15", "ablate", "--preset", "modules", "--out"])
        .arg(dir)
        .output()?;
    ensure!(out.status.success(), "ablate failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(std::fs::read(dir.join("ablation.csv"))?)
}

fn c10_determinism() -> Result<String> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let one = run_ablate("1", a.path())?;
    let four = run_ablate("4", b.path())?;
    ensure!(one == four, "CSV differs between 1 and 4 workers");
    let rows = one.iter().filter(|&&c| c == b'\n').count() - 1;
    Ok(format!("module preset, 3 seeds: {rows} rows byte-identical for 1 and 4 workers"))
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Result<String>) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, format!("{e:#}")),
        Err(_) => (false, "panicked".to_string()),
    };
    println!(
        "{} criterion {n:>2}: {title} [{detail}] ({:.1?})",
        if ok { "PASS" } else { "FAIL" },
        elapsed
    );
    ok
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient check suite", c1_gradcheck);
    ok &= report(2, "zero-offset identity", c2_zero_offset_identity);
    ok &= report(3, "clamp safety", c3_clamp_safety);
    ok &= report(4, "degenerate constant clip", c4_constant_clip);
    ok &= report(5, "MAB residual identities", c5_mab_identities);
    ok &= report(6, "baseline reproduction", c6_baseline_reproduction);

    let cfg = ExperimentConfig::default();
    let full = timed_cell(&cfg, AblationCell { arch: Architecture::FULL, losses: LossFlags::ALL });
    let full = full.map_err(|e| anyhow::anyhow!("{e}"));
    ok &= report(7, "loss ablation trend", || {
        let (t, d) = full.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        c7_loss_trend(t, *d)
    });
    ok &= report(8, "module ablation trend", || {
        let (t, _) = full.as_ref().map_err(|e| anyhow::anyhow!("{e}"))?;
        c8_module_trend(t)
    });
    ok &= report(9, "saliency routing", c9_saliency_routing);
    ok &= report(10, "ablation determinism across worker counts", c10_determinism);
    if !ok {
        std::process::exit(1);
    }
}
