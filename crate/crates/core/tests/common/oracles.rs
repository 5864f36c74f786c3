//! Brute-force references for mask dilation, mask union, group targets and
//! NMS, each run over randomized small instances.

use rand::Rng;

use super::rng;
use sparsedet::afd::{build_group_targets, dilate_mask, union_masks, CategoryGroups, GridMask, Group};
use sparsedet::boxes::{nms, rotated_iou_bev, Box3D, NmsConfig};
use sparsedet::sparse::{Coord, Grid};
use sparsedet::voxel::VoxelGridSpec;

fn random_sites<R: Rng>(r: &mut R, grid: Grid, batches: usize, density: f64) -> Vec<Coord> {
    let [dx, dy, _] = grid.dims();
    let mut out = Vec::new();
    for b in 0..batches {
        for y in 0..dy {
            for x in 0..dx {
                if r.gen_bool(density) {
                    out.push(Coord::new2(b as i32, x as i32, y as i32));
                }
            }
        }
    }
    out
}

fn all_sites(grid: Grid, batches: usize) -> Vec<Coord> {
    let [dx, dy, _] = grid.dims();
    (0..batches)
        .flat_map(|b| (0..dy).flat_map(move |y| (0..dx).map(move |x| Coord::new2(b as i32, x as i32, y as i32))))
        .collect()
}

pub fn dilation(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let grid = Grid::new2(r.gen_range(1..=12), r.gen_range(1..=12)).unwrap();
        let batches = r.gen_range(1..=2);
        let density = r.gen_range(0.0..0.3);
        let coords = random_sites(&mut r, grid, batches, density);
        let mask: Vec<bool> = coords.iter().map(|_| r.gen_bool(0.5)).collect();
        let k = [1, 3, 5, 7, 9][r.gen_range(0..5)];
        let got = dilate_mask(&coords, &mask, k, grid);
        let reach = (k / 2) as i32;
        let planes = coords.iter().map(|c| c.batch as usize + 1).max().unwrap_or(1);
        if got.batches() != planes {
            return Err(format!("instance {n}: {} planes, expected {planes}", got.batches()));
        }
        for s in all_sites(grid, planes) {
            let want = coords
                .iter()
                .zip(&mask)
                .any(|(c, &m)| m && c.batch == s.batch && (c.x() - s.x()).abs() <= reach && (c.y() - s.y()).abs() <= reach);
            if got.get(&s) != want {
                return Err(format!("instance {n}: site {s:?} is {} (k = {k})", got.get(&s)));
            }
        }
    }
    Ok(())
}

pub fn union(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let grid = Grid::new2(r.gen_range(1..=12), r.gen_range(1..=12)).unwrap();
        let parts: Vec<(usize, Vec<Coord>)> = (0..r.gen_range(1..=4))
            .map(|_| {
                let b = r.gen_range(1..=2);
                let density = r.gen_range(0.0..0.4);
                (b, random_sites(&mut r, grid, b, density))
            })
            .collect();
        let masks: Vec<GridMask> = parts
            .iter()
            .map(|(b, sites)| {
                let mut m = GridMask::new(grid, *b);
                sites.iter().for_each(|s| m.set(s));
                m
            })
            .collect();
        let got = union_masks(&masks).map_err(|e| e.to_string())?;
        let planes = parts.iter().map(|p| p.0).max().unwrap();
        for s in all_sites(grid, planes) {
            let want = parts.iter().any(|(_, sites)| sites.contains(&s));
            if got.get(&s) != want {
                return Err(format!("instance {n}: site {s:?}"));
            }
        }
        if got.count() != all_sites(grid, planes).iter().filter(|s| got.get(s)).count() {
            return Err(format!("instance {n}: bits outside the grid"));
        }
    }
    Ok(())
}

fn random_box<R: Rng>(r: &mut R, extent: f64, classes: usize) -> Box3D {
    Box3D::new(
        [r.gen_range(0.0..extent), r.gen_range(0.0..extent), 0.5],
        [r.gen_range(0.3..4.0), r.gen_range(0.3..3.0), 1.0],
        r.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        r.gen_range(0..classes),
    )
    .unwrap()
}

/// Point-in-rectangle in the box frame.
fn inside(b: &Box3D, p: [f64; 2]) -> bool {
    let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
    let (s, c) = b.yaw.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0
}

pub fn group_targets(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let bev = VoxelGridSpec::new([0.0, 0.0, -1.0], [0.5, 0.5, 2.0], [12, 12, 1]).unwrap();
    let groups = CategoryGroups::new(
        vec![
            Group { name: "a".into(), classes: vec![0, 2], size: 4.0, kernel: 5, background: false },
            Group { name: "bg".into(), classes: vec![], size: 1.0, kernel: 3, background: true },
            Group { name: "b".into(), classes: vec![1], size: 2.0, kernel: 3, background: false },
        ],
        3,
    )
    .unwrap();
    let grid = Grid::new2(12, 12).unwrap();
    for n in 0..instances {
        let boxes: Vec<Box3D> = (0..r.gen_range(0..5)).map(|_| random_box(&mut r, 6.0, 3)).collect();
        let density = r.gen_range(0.05..0.6);
        let coords = random_sites(&mut r, grid, 1, density);
        let got = build_group_targets(&boxes, &coords, &bev, &groups).map_err(|e| e.to_string())?;
        for (j, c) in coords.iter().enumerate() {
            let p = [(c.x() as f64 + 0.5) * 0.5, (c.y() as f64 + 0.5) * 0.5];
            let a = boxes.iter().any(|b| (b.class_id == 0 || b.class_id == 2) && inside(b, p));
            let b = boxes.iter().any(|b| b.class_id == 1 && inside(b, p));
            let want = [a, !a && !b, b];
            if got[j * 3..j * 3 + 3] != want {
                return Err(format!("instance {n}: row {j} {:?} vs {want:?}", &got[j * 3..j * 3 + 3]));
            }
        }
    }
    Ok(())
}

pub fn suppression(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for n in 0..instances {
        let classes = r.gen_range(1..=3);
        let cfg = NmsConfig {
            iou_thresholds: (0..classes).map(|_| r.gen_range(0.05..0.9)).collect(),
            ..NmsConfig::default()
        };
        let boxes: Vec<Box3D> = (0..r.gen_range(0..25))
            .map(|_| {
                // coarse scores force ties
                let s = r.gen_range(0..6) as f64 / 5.0;
                random_box(&mut r, 5.0, classes).with_score(s)
            })
            .collect();
        let got = nms(&boxes, &cfg).map_err(|e| e.to_string())?;

        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&i, &j| boxes[j].score.partial_cmp(&boxes[i].score).unwrap().then(i.cmp(&j)));
        let mut kept: Vec<usize> = Vec::new();
        for &i in &order {
            let blocked = kept.iter().any(|&k| {
                boxes[k].class_id == boxes[i].class_id
                    && rotated_iou_bev(&boxes[k], &boxes[i]) >= cfg.iou_thresholds[boxes[i].class_id]
            });
            if !blocked {
                kept.push(i);
            }
        }
        let want: Vec<Box3D> = kept.iter().map(|&i| boxes[i]).collect();
        if got != want {
            return Err(format!("instance {n}: kept {} boxes, expected {}", got.len(), want.len()));
        }
        // every dropped box overlaps a kept box of its class that outranks it
        for &i in &order {
            if kept.contains(&i) {
                continue;
            }
            let rank = |x: usize| order.iter().position(|&o| o == x).unwrap();
            let cover = kept.iter().any(|&k| {
                rank(k) < rank(i)
                    && boxes[k].class_id == boxes[i].class_id
                    && rotated_iou_bev(&boxes[k], &boxes[i]) >= cfg.iou_thresholds[boxes[i].class_id]
            });
            if !cover {
                return Err(format!("instance {n}: box {i} dropped without cause"));
            }
        }
    }
    Ok(())
}
