//! Detection metrics: 11-point AP at BEV IoU 0.5 with greedy matching,
//! center recall within one BEV voxel and mean center error.

use std::fmt::Write;

use rayon::prelude::*;

use super::train::PreparedScene;
use crate::boxes::{rotated_iou_bev, Box3D};
use crate::error::Result;
use crate::model::{Detector, MaskSource, BACKBONE_PREFIXES};
use crate::sparse::Mode;

pub const MATCH_IOU: f64 = 0.5;

/// Detections and ground truth of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub detections: Vec<Box3D>,
    pub ground_truth: Vec<Box3D>,
    pub flops_total: u64,
    pub flops_post_backbone: u64,
    pub active_sites: Vec<(String, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub class_names: Vec<String>,
    /// `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    /// Mean AP over classes with ground truth.
    pub map: f64,
    pub center_recall: f64,
    /// Meters, over recalled objects; `None` when nothing was recalled.
    pub mean_center_error: Option<f64>,
    pub num_scenes: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    pub mean_flops_total: f64,
    pub mean_flops_post_backbone: f64,
    /// Mean active sites per stage.
    pub active_sites: Vec<(String, f64)>,
}

impl Metrics {
    /// `key<TAB>value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:?}"));
        let _ = writeln!(o, "scenes\t{}", self.num_scenes);
        let _ = writeln!(o, "ground_truth\t{}", self.num_ground_truth);
        let _ = writeln!(o, "detections\t{}", self.num_detections);
        let _ = writeln!(o, "map\t{:?}", self.map);
        for (name, ap) in self.class_names.iter().zip(&self.ap) {
            let _ = writeln!(o, "ap.{name}\t{}", opt(*ap));
        }
        let _ = writeln!(o, "center_recall\t{:?}", self.center_recall);
        let _ = writeln!(o, "mean_center_error\t{}", opt(self.mean_center_error));
        let _ = writeln!(o, "flops.total\t{:?}", self.mean_flops_total);
        let _ = writeln!(o, "flops.post_backbone\t{:?}", self.mean_flops_post_backbone);
        for (stage, n) in &self.active_sites {
            let _ = writeln!(o, "active_sites.{stage}\t{n:?}");
        }
        o
    }
}

/// 11-point interpolated AP of detections sorted by descending score.
/// `tp[i]` marks whether the i-th detection matched.
pub fn average_precision_11(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Greedy matching per class across scenes by descending score; each
/// detection takes the unmatched ground truth of highest IoU if it reaches
/// [`MATCH_IOU`]. Returns the TP flags in score order and the GT count.
pub fn match_class(results: &[SceneResult], class_id: usize) -> (Vec<bool>, usize) {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    let mut num_gt = 0;
    for (s, r) in results.iter().enumerate() {
        for (i, d) in r.detections.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, s, i));
            }
        }
        num_gt += r.ground_truth.iter().filter(|g| g.class_id == class_id).count();
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = results.iter().map(|r| vec![false; r.ground_truth.len()]).collect();
    let tp = dets
        .iter()
        .map(|&(_, s, i)| {
            let d = &results[s].detections[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in results[s].ground_truth.iter().enumerate() {
                if g.class_id != class_id || used[s][j] {
                    continue;
                }
                let iou = rotated_iou_bev(d, g);
                if iou >= MATCH_IOU && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, num_gt)
}

/// Aggregates per-scene results. `center_radius` is the recall distance in
/// meters (one BEV voxel).
pub fn compute_metrics(results: &[SceneResult], class_names: &[String], center_radius: f64) -> Metrics {
    let mut ap = Vec::with_capacity(class_names.len());
    for c in 0..class_names.len() {
        let (tp, n) = match_class(results, c);
        ap.push((n > 0).then(|| average_precision_11(&tp, n)));
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };

    let mut num_gt = 0;
    let mut recalled = 0;
    let mut err_sum = 0.0;
    for r in results {
        for g in &r.ground_truth {
            num_gt += 1;
            let nearest = r
                .detections
                .iter()
                .filter(|d| d.class_id == g.class_id)
                .map(|d| d.bev_distance(g))
                .fold(f64::INFINITY, f64::min);
            if nearest <= center_radius {
                recalled += 1;
                err_sum += nearest;
            }
        }
    }
    let n = results.len().max(1) as f64;
    let mut active_sites: Vec<(String, f64)> = Vec::new();
    for r in results {
        for (k, (stage, count)) in r.active_sites.iter().enumerate() {
            match active_sites.get_mut(k) {
                Some(e) if e.0 == *stage => e.1 += *count as f64 / n,
                _ => active_sites.push((stage.clone(), *count as f64 / n)),
            }
        }
    }
    Metrics {
        class_names: class_names.to_vec(),
        ap,
        map,
        center_recall: if num_gt == 0 { 0.0 } else { recalled as f64 / num_gt as f64 },
        mean_center_error: (recalled > 0).then(|| err_sum / recalled as f64),
        num_scenes: results.len(),
        num_ground_truth: num_gt,
        num_detections: results.iter().map(|r| r.detections.len()).sum(),
        mean_flops_total: results.iter().map(|r| r.flops_total as f64).sum::<f64>() / n,
        mean_flops_post_backbone: results.iter().map(|r| r.flops_post_backbone as f64).sum::<f64>() / n,
        active_sites,
    }
}

/// Runs the detector in eval mode on every scene.
pub fn run_scenes(model: &Detector, data: &[PreparedScene]) -> Result<Vec<SceneResult>> {
    data.par_iter()
        .map_init(
            || model.clone(),
            |m, s| {
                let fwd = m.forward(&s.input, Mode::Eval, MaskSource::Predicted)?;
                Ok(SceneResult {
                    detections: m.decode(&fwd)?,
                    ground_truth: s.boxes.clone(),
                    flops_total: fwd.flops.total(),
                    flops_post_backbone: fwd.flops.total_excluding(&BACKBONE_PREFIXES),
                    active_sites: fwd.active_sites.clone(),
                })
            },
        )
        .collect()
}

pub fn evaluate(model: &Detector, data: &[PreparedScene], class_names: &[String]) -> Result<Metrics> {
    let results = run_scenes(model, data)?;
    let radius = model.cfg.bev_spec().voxel_size[0];
    Ok(compute_metrics(&results, class_names, radius))
}

/// One detection per line: `class score cx cy cz l w h yaw`, tab-separated.
pub fn detections_to_tsv(boxes: &[Box3D], class_names: &[String]) -> String {
    let mut o = String::from("class\tscore\tcx\tcy\tcz\tl\tw\th\tyaw\n");
    for b in boxes {
        let name = class_names.get(b.class_id).cloned().unwrap_or_else(|| b.class_id.to_string());
        let _ = writeln!(
            o,
            "{name}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}",
            b.score, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
        );
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, class_id: usize, score: f64) -> Box3D {
        Box3D::new([x, y, 1.0], [4.0, 2.0, 1.5], 0.0, class_id).unwrap().with_score(score)
    }

    fn result(dets: Vec<Box3D>, gts: Vec<Box3D>) -> SceneResult {
        SceneResult {
            detections: dets,
            ground_truth: gts,
            flops_total: 0,
            flops_post_backbone: 0,
            active_sites: Vec::new(),
        }
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![bx(0.0, 0.0, 0, 1.0), bx(10.0, 0.0, 0, 1.0)];
        let m = compute_metrics(&[result(gts.clone(), gts)], &names(), 0.8);
        assert_eq!(m.ap, vec![Some(1.0), None]);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.center_recall, 1.0);
        assert_eq!(m.mean_center_error, Some(0.0));
    }

    #[test]
    fn no_detections() {
        let m = compute_metrics(&[result(vec![], vec![bx(0.0, 0.0, 0, 1.0)])], &names(), 0.8);
        assert_eq!(m.ap[0], Some(0.0));
        assert_eq!(m.center_recall, 0.0);
        assert_eq!(m.mean_center_error, None);
    }

    #[test]
    fn hand_computed_fixture() {
        // Scores 0.9 TP, 0.8 FP, 0.7 TP with 3 GT.
        // Curve: (1/3, 1), (1/3, 1/2), (2/3, 2/3).
        // r in {0..0.3}: 1 (4 points); {0.4..0.6}: 2/3 (3 points); {0.7..1}: 0.
        let ap = average_precision_11(&[true, false, true], 3);
        assert!((ap - (4.0 + 2.0) / 11.0).abs() < 1e-12);
        let gts = vec![bx(0.0, 0.0, 0, 1.0), bx(10.0, 0.0, 0, 1.0), bx(20.0, 0.0, 0, 1.0)];
        let dets = vec![bx(0.0, 0.0, 0, 0.9), bx(30.0, 0.0, 0, 0.8), bx(10.3, 0.0, 0, 0.7)];
        let m = compute_metrics(&[result(dets, gts)], &names(), 0.8);
        assert!((m.ap[0].unwrap() - ap).abs() < 1e-15);
        assert!((m.center_recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.mean_center_error.unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let g = bx(0.0, 0.0, 0, 1.0);
        let (tp, n) = match_class(&[result(vec![bx(0.0, 0.0, 0, 0.9), bx(0.1, 0.0, 0, 0.8)], vec![g])], 0);
        assert_eq!((tp, n), (vec![true, false], 1));
    }

    #[test]
    fn wrong_class_does_not_match() {
        let (tp, _) = match_class(&[result(vec![bx(0.0, 0.0, 1, 0.9)], vec![bx(0.0, 0.0, 0, 1.0)])], 1);
        assert_eq!(tp, vec![false]);
    }

    #[test]
    fn text_is_stable() {
        let gts = vec![bx(0.0, 0.0, 0, 1.0)];
        let m = compute_metrics(&[result(gts.clone(), gts)], &names(), 0.8);
        let t = m.to_text();
        assert!(t.contains("map\t1.0\n") && t.contains("ap.b\tnan\n"));
    }
}
