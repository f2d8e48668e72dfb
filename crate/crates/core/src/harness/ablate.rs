//! Ablation matrix: configurations x seeds, run in parallel, collected in a fixed order.

use serde::Serialize;

use super::config::{Architecture, ExperimentConfig, Splitting};
use super::train::{train, MetricsRecord};
use crate::error::{Error, Result};
use crate::losses::LossFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationCell {
    pub arch: Architecture,
    pub losses: LossFlags,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{} [{}]", self.arch.label(), self.losses.label())
    }

    fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            architecture: self.arch,
            losses: self.losses,
            ..base.clone()
        }
    }

    /// Fixed-split cells with the MSM on are paired with a zero-frozen-offset run.
    pub fn shadow(&self) -> Option<AblationCell> {
        (self.arch.msm && self.arch.splitting == Splitting::Fixed).then_some(AblationCell {
            arch: Architecture {
                splitting: Splitting::FrozenOffsets,
                ..self.arch
            },
            losses: self.losses,
        })
    }
}

/// Cross-product of the requested toggles. Duplicate cells (e.g. splitting
/// variants with MSM and MAB both off) are kept once.
pub fn cross_product(
    da: &[bool],
    msm: &[bool],
    mab: &[bool],
    splitting: &[Splitting],
    losses: &[LossFlags],
) -> Vec<AblationCell> {
    let mut out: Vec<AblationCell> = Vec::new();
    for &l in losses {
        for &d in da {
            for &m in msm {
                for &b in mab {
                    for &s in splitting {
                        let arch = Architecture {
                            da: d,
                            msm: m,
                            mab: b,
                            splitting: if m || b { s } else { Splitting::Offsets },
                        };
                        let cell = AblationCell { arch, losses: l };
                        if !out.contains(&cell) {
                            out.push(cell);
                        }
                    }
                }
            }
        }
    }
    out
}

fn arch(da: bool, msm: bool, mab: bool, splitting: Splitting) -> Architecture {
    Architecture { da, msm, mab, splitting }
}

/// Module ablation rows: baseline, each component alone, MSM+MAB, full, full minus DA with fixed split.
pub fn module_preset(losses: LossFlags) -> Vec<AblationCell> {
    use Splitting::*;
    [
        arch(false, false, false, Offsets),
        arch(true, false, false, Offsets),
        arch(false, true, false, Offsets),
        arch(false, false, true, Offsets),
        arch(false, true, true, Offsets),
        arch(true, true, true, Offsets),
        arch(false, true, true, Fixed),
        arch(true, true, true, Fixed),
    ]
    .into_iter()
    .map(|arch| AblationCell { arch, losses })
    .collect()
}

/// Loss ablation rows on the full architecture.
pub fn loss_preset(arch: Architecture) -> Vec<AblationCell> {
    let f = |ce, cl, neg, clip, proj| LossFlags { ce, cl, clip, proj, neg };
    [
        f(true, false, false, false, false),
        f(true, false, true, false, false),
        f(false, false, false, true, false),
        f(true, true, true, true, false),
        f(true, true, true, true, true),
    ]
    .into_iter()
    .map(|losses| AblationCell { arch, losses })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub final_record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub label: String,
    pub cell: AblationCell,
    pub seeds: usize,
    pub unseen_mean: f64,
    pub unseen_std: f64,
    pub seen_mean: f64,
    pub seen_std: f64,
    pub final_loss_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<CellSummary>,
    /// Number of (fixed, zero-frozen offsets) pairs verified bit-identical.
    pub equivalence_checks: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker count from `ZSAR_WORKERS`, else the machine's parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("ZSAR_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_cell(base: &ExperimentConfig, cell: &AblationCell, seed: u64) -> Result<Vec<MetricsRecord>> {
    let cfg = cell.config(base);
    let (_, out) = train(&cfg, seed)?;
    Ok(out.records)
}

/// Trains every `(cell, seed)` pair on `workers` threads. Rows come back in
/// cell-major, seed-minor order whatever the scheduling.
pub fn run_ablation_matrix(base: &ExperimentConfig, cells: &[AblationCell], workers: usize) -> Result<AblationTable> {
    use rayon::prelude::*;

    base.validate()?;
    for c in cells {
        c.config(base).validate()?;
    }
    let mut unique: Vec<AblationCell> = Vec::new();
    for c in cells.iter().copied().chain(cells.iter().filter_map(AblationCell::shadow)) {
        if !unique.contains(&c) {
            unique.push(c);
        }
    }
    let jobs: Vec<(AblationCell, u64)> = unique
        .iter()
        .flat_map(|c| base.seeds.iter().map(move |&s| (*c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::param("workers", e.to_string()))?;
    let results: Vec<Result<Vec<MetricsRecord>>> =
        pool.install(|| jobs.par_iter().map(|(c, s)| run_cell(base, c, *s)).collect());
    let mut finished: Vec<((AblationCell, u64), Vec<MetricsRecord>)> = Vec::with_capacity(jobs.len());
    for (job, r) in jobs.into_iter().zip(results) {
        finished.push((job, r?));
    }
    let lookup = |cell: AblationCell, seed: u64| -> &Vec<MetricsRecord> {
        &finished
            .iter()
            .find(|((c, s), _)| *c == cell && *s == seed)
            .expect("every job ran")
            .1
    };

    let mut rows = Vec::new();
    let mut equivalence_checks = 0;
    for cell in cells {
        for &seed in &base.seeds {
            let records = lookup(*cell, seed);
            if let Some(shadow) = cell.shadow() {
                if lookup(shadow, seed) != records {
                    return Err(Error::degenerate(
                        "run_ablation_matrix",
                        format!("{} seed {seed}: fixed split and zero-frozen offsets diverged", cell.label()),
                    ));
                }
                equivalence_checks += 1;
            }
            rows.push(AblationRow {
                cell: *cell,
                seed,
                final_record: records.last().expect("at least epoch 0").clone(),
            });
        }
    }

    let summary = cells
        .iter()
        .map(|c| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == *c).collect();
            let unseen: Vec<f64> = mine.iter().map(|r| r.final_record.unseen_accuracy).collect();
            let seen: Vec<f64> = mine.iter().map(|r| r.final_record.seen_accuracy).collect();
            let loss: Vec<f64> = mine.iter().map(|r| r.final_record.loss.total).collect();
            let (unseen_mean, unseen_std) = mean_std(&unseen);
            let (seen_mean, seen_std) = mean_std(&seen);
            CellSummary {
                label: c.label(),
                cell: *c,
                seeds: mine.len(),
                unseen_mean,
                unseen_std,
                seen_mean,
                seen_std,
                final_loss_mean: mean_std(&loss).0,
            }
        })
        .collect();

    Ok(AblationTable {
        rows,
        summary,
        equivalence_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_product_counts() {
        let cells = cross_product(
            &[true],
            &[true],
            &[true, false],
            &[Splitting::Offsets, Splitting::Fixed],
            &[LossFlags::ALL],
        );
        assert_eq!(cells.len(), 4);
        let dedup = cross_product(
            &[false],
            &[false],
            &[false],
            &[Splitting::Offsets, Splitting::Fixed],
            &[LossFlags::ALL],
        );
        assert_eq!(dedup.len(), 1);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn single_cell_matches_direct_run_and_checks_equivalence() {
        let base = ExperimentConfig {
            seeds: vec![4],
            videos_per_class: 2,
            epochs: 3,
            ..ExperimentConfig::default()
        };
        let cells = [
            AblationCell {
                arch: Architecture::FULL,
                losses: LossFlags::ALL,
            },
            AblationCell {
                arch: Architecture {
                    splitting: Splitting::Fixed,
                    ..Architecture::FULL
                },
                losses: LossFlags::ALL,
            },
        ];
        let table = run_ablation_matrix(&base, &cells, 2).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.equivalence_checks, 1);
        let (_, direct) = train(&base, 4).unwrap();
        assert_eq!(&table.rows[0].final_record, direct.records.last().unwrap());
    }
}
