//! Synthetic LiDAR scenes: boxes on a ground plane, sampled on the faces a
//! sensor at the scene center can see.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::boxes::{clip_polygon, polygon_area, Box3D};
use crate::error::{Error, Result};
use crate::sparse::Coord;
use crate::voxel::{bev_center, load_point_cloud, save_point_cloud, PointCloud, PointFormat, VoxelGridSpec};

const MAX_PLACEMENT_TRIES: usize = 100;
/// Minimum BEV gap kept between boxes and around the sensor.
const CLEARANCE: f64 = 0.3;
/// Radius of the innermost ground ring.
const MIN_RING_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub count: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ground_z: f64,
    pub classes: Vec<ClassSpec>,
    pub points_per_object: (usize, usize),
    pub background_points: usize,
    /// Ground points lie on this many concentric rings around the sensor,
    /// spaced geometrically out to the farthest corner; 0 spreads them
    /// uniformly.
    pub ground_rings: usize,
    pub noise: f64,
    pub yaw_range: (f64, f64),
    /// Boxes stay this far inside the x/y range.
    pub margin: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !range_ok(self.x_range) || !range_ok(self.y_range) || !range_ok(self.yaw_range) {
            return Err(Error::Config("scene ranges must be finite and ordered".into()));
        }
        for c in &self.classes {
            for r in [c.length, c.width, c.height] {
                if !range_ok(r) || r.0 <= 0.0 {
                    return Err(Error::Config(format!("class {}: sizes must be positive ranges", c.name)));
                }
            }
            if c.count.0 > c.count.1 {
                return Err(Error::Config(format!("class {}: empty count range", c.name)));
            }
        }
        if self.points_per_object.0 > self.points_per_object.1 || !(self.noise >= 0.0) {
            return Err(Error::Config("invalid point count range or noise".into()));
        }
        Ok(())
    }

    pub fn sensor(&self) -> [f64; 2] {
        [
            (self.x_range.0 + self.x_range.1) / 2.0,
            (self.y_range.0 + self.y_range.1) / 2.0,
        ]
    }

    /// Vehicle, pedestrian and cyclist boxes on the x/y extent of `grid`.
    pub fn desk(grid: &VoxelGridSpec) -> Self {
        let hi = grid.extent_max();
        let class = |name: &str, l, w, h, count| ClassSpec {
            name: name.into(),
            length: l,
            width: w,
            height: h,
            count,
        };
        SceneSpec {
            x_range: (grid.origin[0], hi[0]),
            y_range: (grid.origin[1], hi[1]),
            ground_z: grid.origin[2] + 0.1,
            classes: vec![
                class("vehicle", (3.8, 5.0), (1.7, 2.1), (1.4, 1.8), (2, 4)),
                class("pedestrian", (0.6, 0.9), (0.5, 0.8), (1.6, 1.9), (0, 3)),
                class("cyclist", (1.6, 1.9), (0.5, 0.8), (1.5, 1.8), (0, 2)),
            ],
            points_per_object: (150, 300),
            background_points: 4000,
            ground_rings: 8,
            noise: 0.02,
            // Boxes are symmetric under a half turn; a quarter-turn range keeps
            // the heading target continuous.
            yaw_range: (-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4),
            margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: PointCloud,
    pub boxes: Vec<Box3D>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

fn overlaps(a: &Box3D, b: &Box3D) -> bool {
    let grow = |x: &Box3D| {
        let mut g = *x;
        g.size[0] += 2.0 * CLEARANCE;
        g.size[1] += 2.0 * CLEARANCE;
        g
    };
    let (a, b) = (grow(a), grow(b));
    let reach = (a.size[0].hypot(a.size[1]) + b.size[0].hypot(b.size[1])) / 2.0;
    a.bev_distance(&b) <= reach && polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners())) > 0.0
}

fn place_boxes<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Vec<Box3D> {
    let sensor = spec.sensor();
    let mut boxes: Vec<Box3D> = Vec::new();
    for (class_id, c) in spec.classes.iter().enumerate() {
        let n = rng.gen_range(c.count.0..=c.count.1);
        for _ in 0..n {
            let l = uniform(rng, c.length);
            let w = uniform(rng, c.width);
            let h = uniform(rng, c.height);
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let cand = Box3D {
                    center: [
                        uniform(rng, spec.x_range),
                        uniform(rng, spec.y_range),
                        spec.ground_z + h / 2.0,
                    ],
                    size: [l, w, h],
                    yaw: crate::boxes::normalize_yaw(uniform(rng, spec.yaw_range)),
                    class_id,
                    score: 1.0,
                };
                let inside = cand.bev_corners().iter().all(|p| {
                    p[0] >= spec.x_range.0 + spec.margin
                        && p[0] <= spec.x_range.1 - spec.margin
                        && p[1] >= spec.y_range.0 + spec.margin
                        && p[1] <= spec.y_range.1 - spec.margin
                });
                let mut around_sensor = cand;
                around_sensor.size[0] += 2.0 * CLEARANCE;
                around_sensor.size[1] += 2.0 * CLEARANCE;
                if inside && !around_sensor.contains_bev(sensor) && boxes.iter().all(|b| !overlaps(b, &cand)) {
                    boxes.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                log::info!("could not place a {} box after {MAX_PLACEMENT_TRIES} tries", c.name);
            }
        }
    }
    boxes
}

/// Vertical faces of `b` facing `sensor`, as `(start, end)` BEV segments.
pub fn visible_faces(b: &Box3D, sensor: [f64; 2]) -> Vec<([f64; 2], [f64; 2])> {
    let c = b.bev_corners();
    let mut out = Vec::new();
    for i in 0..4 {
        let p = c[i];
        let q = c[(i + 1) % 4];
        // corners are counter-clockwise, so the outward normal is (dy, -dx)
        let n = [q[1] - p[1], p[0] - q[0]];
        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        if (sensor[0] - mid[0]) * n[0] + (sensor[1] - mid[1]) * n[1] > 0.0 {
            out.push((p, q));
        }
    }
    out
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    let boxes = place_boxes(spec, rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = |rng: &mut R| if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
    let sensor = spec.sensor();
    let mut pts: Vec<f32> = Vec::new();
    for b in &boxes {
        let faces = visible_faces(b, sensor);
        let lengths: Vec<f64> = faces.iter().map(|(p, q)| (q[0] - p[0]).hypot(q[1] - p[1])).collect();
        let total: f64 = lengths.iter().sum();
        let n = rng.gen_range(spec.points_per_object.0..=spec.points_per_object.1);
        if faces.is_empty() || total <= 0.0 {
            continue;
        }
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut f = 0;
            while f + 1 < faces.len() && pick >= lengths[f] {
                pick -= lengths[f];
                f += 1;
            }
            let (p, q) = faces[f];
            let t = rng.gen_range(0.0..1.0);
            let z = spec.ground_z + rng.gen_range(0.0..b.size[2]);
            let x = p[0] + t * (q[0] - p[0]) + jitter(rng);
            let y = p[1] + t * (q[1] - p[1]) + jitter(rng);
            let z = z + jitter(rng);
            pts.extend_from_slice(&[x as f32, y as f32, z as f32, rng.gen_range(0.3f32..1.0)]);
        }
    }
    let far = (spec.x_range.1 - sensor[0]).hypot(spec.y_range.1 - sensor[1]).max(MIN_RING_RADIUS);
    let ring_radius = |k: usize| {
        if spec.ground_rings < 2 {
            return far;
        }
        MIN_RING_RADIUS * (far / MIN_RING_RADIUS).powf(k as f64 / (spec.ground_rings - 1) as f64)
    };
    let mut ground = 0;
    let mut attempts = 0;
    while ground < spec.background_points && attempts < 10 * spec.background_points {
        attempts += 1;
        let (x, y) = if spec.ground_rings == 0 {
            (uniform(rng, spec.x_range), uniform(rng, spec.y_range))
        } else {
            let r = ring_radius(attempts % spec.ground_rings);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (sensor[0] + r * a.cos(), sensor[1] + r * a.sin())
        };
        let inside = x >= spec.x_range.0 && x < spec.x_range.1 && y >= spec.y_range.0 && y < spec.y_range.1;
        if !inside || boxes.iter().any(|b| b.contains_bev([x, y])) {
            continue;
        }
        let z = spec.ground_z + jitter(rng);
        pts.extend_from_slice(&[
            (x + jitter(rng)) as f32,
            (y + jitter(rng)) as f32,
            z as f32,
            rng.gen_range(0.0f32..0.4),
        ]);
        ground += 1;
    }
    Ok(Scene {
        points: PointCloud::new(4, pts)?,
        boxes,
    })
}

/// Scene `i` uses stream `i` of the generator seeded with `seed`.
pub fn generate_scenes(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(spec, &mut rng)
        })
        .collect()
}

/// Fraction of BEV sites whose centers lie inside some box footprint.
pub fn foreground_fraction(coords: &[Coord], boxes: &[Box3D], bev: &VoxelGridSpec) -> f64 {
    if coords.is_empty() {
        return 0.0;
    }
    let fg = coords
        .iter()
        .filter(|c| {
            let p = bev_center(c, bev);
            boxes.iter().any(|b| b.contains_bev(p))
        })
        .count();
    fg as f64 / coords.len() as f64
}

pub fn boxes_to_text(boxes: &[Box3D]) -> String {
    let mut s = String::from("# class_id cx cy cz l w h yaw\n");
    for b in boxes {
        s.push_str(&format!(
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            b.class_id, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
        ));
    }
    s
}

pub fn boxes_from_text(text: &str) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let parse = |k: usize| -> Result<f64> {
            f[k].parse().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("field {k}: {e}"),
            })
        };
        if f.len() != 8 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 8 fields, found {}", f.len()),
            });
        }
        let class_id = f[0].parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("class id: {e}"),
        })?;
        out.push(Box3D::new(
            [parse(1)?, parse(2)?, parse(3)?],
            [parse(4)?, parse(5)?, parse(6)?],
            parse(7)?,
            class_id,
        )?);
    }
    Ok(out)
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_point_cloud(&scene.points, dir.join("points.pcbn"), PointFormat::Binary)?;
    let path = dir.join("boxes.txt");
    fs::write(&path, boxes_to_text(&scene.boxes)).map_err(|e| Error::io(&path, e))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let points = load_point_cloud(dir.join("points.pcbn"), PointFormat::Binary)?;
    let path = dir.join("boxes.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Scene {
        points,
        boxes: boxes_from_text(&text)?,
    })
}

/// Writes scenes as `scene_0000/`, `scene_0001/`, ... under `root`.
pub fn save_scenes(root: &Path, scenes: &[Scene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        save_scene(&root.join(format!("scene_{i:04}")), s)?;
    }
    Ok(())
}

/// Loads every `scene_*` directory under `root` in name order.
pub fn load_scenes(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], [0.2, 0.2, 0.25], [128, 128, 16]).unwrap()
    }

    #[test]
    fn empty_spec_gives_empty_cloud() {
        let mut spec = SceneSpec::desk(&grid());
        spec.classes.clear();
        spec.background_points = 0;
        let s = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.points.is_empty() && s.boxes.is_empty());
    }

    #[test]
    fn scenes_are_seeded() {
        let spec = SceneSpec::desk(&grid());
        let a = generate_scenes(&spec, 3, 7).unwrap();
        let b = generate_scenes(&spec, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn boxes_do_not_overlap_and_stay_inside() {
        let spec = SceneSpec::desk(&grid());
        for s in generate_scenes(&spec, 10, 3).unwrap() {
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    assert_eq!(crate::boxes::rotated_iou_bev(a, b), 0.0);
                }
                for p in a.bev_corners() {
                    assert!(p[0] >= 1.0 && p[0] <= 24.6 && p[1] >= 1.0 && p[1] <= 24.6);
                }
            }
        }
    }

    #[test]
    fn faces_toward_sensor() {
        let b = Box3D::new([10.0, 0.0, 0.0], [4.0, 2.0, 1.0], 0.0, 0).unwrap();
        let f = visible_faces(&b, [0.0, 0.0]);
        assert_eq!(f.len(), 1);
        assert!((f[0].0[0] - 8.0).abs() < 1e-12 && (f[0].1[0] - 8.0).abs() < 1e-12);
        let g = visible_faces(&b, [0.0, 5.0]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn surface_sampling_leaves_center_empty() {
        let spec = SceneSpec {
            classes: vec![ClassSpec {
                name: "car".into(),
                length: (4.0, 4.0),
                width: (2.0, 2.0),
                height: (1.5, 1.5),
                count: (1, 1),
            }],
            points_per_object: (300, 300),
            background_points: 0,
            noise: 0.0,
            ..SceneSpec::desk(&grid())
        };
        let s = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.points.count(), 300);
        let b = s.boxes[0];
        let center = grid().locate([b.center[0], b.center[1], spec.ground_z]).unwrap();
        for p in s.points.iter() {
            let v = grid().locate([p[0] as f64, p[1] as f64, p[2] as f64]).unwrap();
            assert!(!(v[0] == center[0] && v[1] == center[1]));
        }
    }

    #[test]
    fn box_text_round_trip() {
        let spec = SceneSpec::desk(&grid());
        let s = generate_scenes(&spec, 1, 9).unwrap().remove(0);
        let back = boxes_from_text(&boxes_to_text(&s.boxes)).unwrap();
        assert_eq!(back, s.boxes);
        assert!(matches!(boxes_from_text("0 1 2"), Err(Error::Parse { line: 1, .. })));
    }
}
