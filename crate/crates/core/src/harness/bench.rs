//! FLOPs of the diffusion strategies on shared BEV maps.
//!
//! The 3D part runs once per scene; every strategy then runs diffusion, the
//! 2D EDB and the head on the same BEV map. Reported FLOPs exclude the 3D
//! backbone and BEV compression.

use std::fmt::Write;
use std::time::Instant;

use rayon::prelude::*;

use super::train::PreparedScene;
use crate::afd::{dilate_mask, AfdMode};
use crate::error::{Error, Result};
use crate::model::{Detector, MaskSource, BACKBONE_PREFIXES};
use crate::sparse::{Coord, Mode};

#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub label: String,
    pub mode: AfdMode,
    /// `None` keeps the configured group kernels.
    pub alpha: Option<f64>,
    pub ufd_kernel: usize,
}

impl Strategy {
    pub fn new(mode: AfdMode, alpha: Option<f64>, ufd_kernel: usize) -> Self {
        let label = match (mode, alpha) {
            (AfdMode::Afd, Some(a)) => format!("afd_alpha_{a}"),
            (AfdMode::UfdPb | AfdMode::UfdPf, _) => format!("{mode}_k{ufd_kernel}"),
            _ => mode.to_string(),
        };
        Strategy {
            label,
            mode,
            alpha,
            ufd_kernel,
        }
    }
}

/// No diffusion, AFD with configured kernels, then both uniform baselines.
pub fn diffusion_strategies(ufd_kernel: usize) -> Vec<Strategy> {
    vec![
        Strategy::new(AfdMode::None, None, ufd_kernel),
        Strategy::new(AfdMode::Afd, None, ufd_kernel),
        Strategy::new(AfdMode::UfdPf, None, ufd_kernel),
        Strategy::new(AfdMode::UfdPb, None, ufd_kernel),
    ]
}

/// AFD with kernels from `alpha * S_i` for each alpha.
pub fn alpha_strategies(alphas: &[f64], ufd_kernel: usize) -> Vec<Strategy> {
    alphas
        .iter()
        .map(|&a| Strategy::new(AfdMode::Afd, Some(a), ufd_kernel))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskChoice {
    Predicted,
    /// Group masks from ground-truth footprints.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: Strategy,
    /// Diffusion kernels per group (AFD), or the uniform kernel.
    pub kernels: Vec<usize>,
    pub mean_flops: f64,
    /// FLOPs per scene, in scene order.
    pub flops: Vec<u64>,
    pub mean_active_sites: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub scenes: usize,
    /// Mean BEV sites before diffusion.
    pub mean_bev_sites: f64,
}

impl BenchReport {
    pub fn row(&self, label: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy.label == label)
    }

    pub fn to_tsv(&self) -> String {
        let mut o = String::from("strategy\tmode\talpha\tkernels\tmean_flops\tmean_active_sites\twall_ms\n");
        for r in &self.rows {
            let k: Vec<String> = r.kernels.iter().map(|k| k.to_string()).collect();
            let _ = writeln!(
                o,
                "{}\t{}\t{}\t{}\t{:.1}\t{:.2}\t{:.3}",
                r.strategy.label,
                r.strategy.mode,
                r.strategy.alpha.map_or("-".to_string(), |a| a.to_string()),
                k.join(","),
                r.mean_flops,
                r.mean_active_sites,
                r.wall_ms
            );
        }
        o
    }

    /// Horizontal bar chart of mean FLOPs per strategy.
    pub fn to_svg(&self) -> String {
        let bar_h = 24.0;
        let left = 150.0;
        let width = 420.0;
        let height = 40.0 + bar_h * self.rows.len() as f64;
        let max = self.rows.iter().map(|r| r.mean_flops).fold(0.0, f64::max).max(1.0);
        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="monospace" font-size="12">"#,
            left + width + 110.0
        );
        let _ = writeln!(o, r#"<text x="4" y="16">mean FLOPs after the 3D backbone ({} scenes)</text>"#, self.scenes);
        for (i, r) in self.rows.iter().enumerate() {
            let y = 28.0 + i as f64 * bar_h;
            let w = width * r.mean_flops / max;
            let _ = writeln!(o, r#"<text x="4" y="{:.1}">{}</text>"#, y + 15.0, r.strategy.label);
            let _ = writeln!(o, r##"<rect x="{left}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="#4a7bb7"/>"##, bar_h - 6.0);
            let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}">{:.3e}</text>"#, left + w + 6.0, y + 15.0, r.mean_flops);
        }
        o.push_str("</svg>\n");
        o
    }
}

fn is_subset(a: &[Coord], b: &[Coord]) -> bool {
    a.iter().all(|c| b.binary_search(c).is_ok())
}

struct SceneRun {
    flops: Vec<u64>,
    sites: Vec<usize>,
    wall_ms: Vec<f64>,
    bev_sites: usize,
}

/// Runs every strategy on every scene. Whenever the list holds `none`, AFD
/// with configured kernels and PF-UFD, checks per scene that their active
/// sites nest, against PF-UFD at the largest AFD kernel.
pub fn bench_flops(
    base: &Detector,
    data: &[PreparedScene],
    strategies: &[Strategy],
    masks: MaskChoice,
    seed: u64,
) -> Result<BenchReport> {
    let models = strategies
        .iter()
        .map(|s| base.with_diffusion(s.mode, s.alpha, s.ufd_kernel, seed))
        .collect::<Result<Vec<_>>>()?;
    let pos = |mode: AfdMode| strategies.iter().position(|s| s.mode == mode && s.alpha.is_none());
    let nest = match (pos(AfdMode::None), pos(AfdMode::Afd)) {
        (Some(n), Some(a)) => Some((n, a, models[a].cfg.kernels().into_iter().max().unwrap_or(1))),
        _ => None,
    };

    let runs = data
        .par_iter()
        .enumerate()
        .map_init(
            || (base.clone(), models.clone()),
            |(b, ms), (i, s)| -> Result<SceneRun> {
                let stage = b.forward_bev(&s.input, Mode::Eval)?;
                let mut run = SceneRun {
                    flops: Vec::new(),
                    sites: Vec::new(),
                    wall_ms: Vec::new(),
                    bev_sites: stage.bev.len(),
                };
                let mut diffused = Vec::with_capacity(ms.len());
                for m in ms.iter_mut() {
                    let src = match masks {
                        MaskChoice::Predicted => MaskSource::Predicted,
                        MaskChoice::Oracle => MaskSource::Oracle(&s.boxes),
                    };
                    let t0 = Instant::now();
                    let fwd = m.forward_post(&stage.bev, Mode::Eval, src)?;
                    run.wall_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                    run.flops.push(fwd.flops.total_excluding(&BACKBONE_PREFIXES));
                    run.sites.push(fwd.diffused.len());
                    diffused.push(fwd.diffused.coords().to_vec());
                }
                if let Some((n, a, k)) = nest {
                    let all = vec![true; stage.bev.len()];
                    let pf = dilate_mask(stage.bev.coords(), &all, k, stage.bev.grid());
                    if !is_subset(&diffused[n], &diffused[a]) || !is_subset(&diffused[a], &pf.coords()) {
                        return Err(Error::CoordMismatch(format!(
                            "scene {i}: active sites of none, AFD and PF-UFD (K = {k}) do not nest"
                        )));
                    }
                }
                Ok(run)
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let n = data.len().max(1) as f64;
    let rows = strategies
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let flops: Vec<u64> = runs.iter().map(|r| r.flops[j]).collect();
            BenchRow {
                strategy: s.clone(),
                kernels: match s.mode {
                    AfdMode::Afd => models[j].cfg.kernels(),
                    AfdMode::UfdPb | AfdMode::UfdPf => vec![s.ufd_kernel],
                    AfdMode::None => Vec::new(),
                },
                mean_flops: flops.iter().map(|&f| f as f64).sum::<f64>() / n,
                flops,
                mean_active_sites: runs.iter().map(|r| r.sites[j] as f64).sum::<f64>() / n,
                wall_ms: runs.iter().map(|r| r.wall_ms[j]).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(BenchReport {
        rows,
        scenes: data.len(),
        mean_bev_sites: runs.iter().map(|r| r.bev_sites as f64).sum::<f64>() / n,
    })
}
