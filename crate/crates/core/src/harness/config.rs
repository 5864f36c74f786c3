//! Run configuration as an INI file.
//!
//! Sections: `grid`, `backbone`, `groups`, `afd`, `head`, `train`, `scene`.
//! Unknown sections and keys are rejected. Group sizes are in BEV voxels.
//! [`Config::to_ini`] writes every field, and parsing its output gives back an
//! equal config.

use std::collections::BTreeMap;
use std::fmt::{Debug, Write};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use super::optim::AdamConfig;
use super::scene::{ClassSpec, SceneSpec};
use crate::afd::{AfdConfig, CategoryGroups, Group};
use crate::backbone::BackboneConfig;
use crate::boxes::NmsConfig;
use crate::error::{Error, Result};
use crate::head::HeatmapMode;
use crate::model::{LossWeights, ModelConfig};
use crate::voxel::VoxelGridSpec;

/// Only f64 is implemented for training; the key exists so files state it.
pub const DTYPE: &str = "f64";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub iterations: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Seeds model initialization and the scene order.
    pub seed: u64,
    /// Scenes per optimizer step.
    pub accumulate: usize,
    /// Linear warm-up steps before the constant learning rate.
    pub warmup: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            accumulate: 1,
            warmup: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.iterations == 0 || self.accumulate == 0 || self.log_every == 0 {
            return Err(Error::Config("iterations, accumulate and log_every must be >= 1".into()));
        }
        let w = &self.weights;
        if [w.afd, w.heatmap, w.reg].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for the 0-based optimizer step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.adam.lr * (step + 1) as f64 / (self.warmup + 1) as f64
        } else {
            self.adam.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub spec: SceneSpec,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl Config {
    /// Desk-scale defaults: a 25.6 m square at 0.2 m, one backbone level
    /// and a 0.4 m BEV map.
    pub fn desk_default() -> Self {
        let grid = VoxelGridSpec::new([0.0, 0.0, 0.0], [0.2, 0.2, 0.25], [128, 128, 16]).expect("static grid");
        let backbone = BackboneConfig {
            in_channels: 4,
            stage_channels: vec![16],
            srbs_per_stage: 1,
            edb_m: 1,
            edb_n: 1,
            bev_channels: 24,
        };
        let bev_voxel = grid.strided(backbone.levels()).voxel_size[0];
        let spec = SceneSpec::desk(&grid);
        Config {
            model: ModelConfig {
                grid,
                backbone,
                groups: CategoryGroups::three_class(bev_voxel),
                afd: AfdConfig::default(),
                heatmap_mode: HeatmapMode::Normalized,
                nms: NmsConfig::default(),
            },
            class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
            train: TrainConfig::default(),
            scene: SceneConfig {
                spec,
                seed: 0,
                train_scenes: 20,
                eval_scenes: 20,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.spec.validate()?;
        let n = self.model.num_classes();
        if self.class_names.len() != n || self.scene.spec.classes.len() != n {
            return Err(Error::Config(format!(
                "{n} classes in the groups, {} class names, {} scene classes",
                self.class_names.len(),
                self.scene.spec.classes.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            line: e.line,
            msg: e.msg.into_owned(),
        })?;
        let mut sections: BTreeMap<String, Section> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.iter().next().is_some() {
                    return Err(Error::Config("keys outside a section".into()));
                }
                continue;
            };
            let s = sections.entry(name.to_string()).or_insert_with(|| Section::new(name));
            for (k, v) in props.iter() {
                s.values.insert(k.to_string(), v.trim().to_string());
            }
        }
        let d = Config::desk_default();
        let mut take = |name: &str| sections.remove(name).unwrap_or_else(|| Section::new(name));

        let mut s = take("grid");
        let grid = VoxelGridSpec::new(
            s.array("origin", d.model.grid.origin)?,
            s.array("voxel_size", d.model.grid.voxel_size)?,
            s.array("dims", d.model.grid.dims)?,
        )?;
        s.finish()?;

        let mut s = take("backbone");
        let db = &d.model.backbone;
        let backbone = BackboneConfig {
            in_channels: s.value("in_channels", db.in_channels)?,
            stage_channels: s.list("stage_channels", &db.stage_channels)?,
            srbs_per_stage: s.value("srbs_per_stage", db.srbs_per_stage)?,
            edb_m: s.value("edb_m", db.edb_m)?,
            edb_n: s.value("edb_n", db.edb_n)?,
            bev_channels: s.value("bev_channels", db.bev_channels)?,
        };
        s.finish()?;

        let mut s = take("head");
        let class_names: Vec<String> = s.list("class_names", &d.class_names)?;
        let heatmap_mode = s.value("heatmap_mode", d.model.heatmap_mode)?;
        let nms = NmsConfig {
            iou_thresholds: s.list("nms_iou", &d.model.nms.iou_thresholds)?,
            score_threshold: s.value("score_threshold", d.model.nms.score_threshold)?,
            max_detections: s.value("max_detections", d.model.nms.max_detections)?,
        };
        s.finish()?;

        let mut s = take("groups");
        let groups = if s.values.is_empty() {
            d.model.groups.clone()
        } else {
            let order: Vec<String> = s.required_list("order")?;
            let background: String = s.required("background")?;
            let mut list = Vec::new();
            for name in order {
                let is_bg = name == background;
                list.push(Group {
                    classes: if is_bg {
                        s.list(&format!("{name}.classes"), &[])?
                    } else {
                        s.required_list(&format!("{name}.classes"))?
                    },
                    size: if is_bg {
                        s.value(&format!("{name}.size"), 1.0)?
                    } else {
                        s.required(&format!("{name}.size"))?
                    },
                    kernel: s.required(&format!("{name}.kernel"))?,
                    background: is_bg,
                    name,
                });
            }
            CategoryGroups::new(list, class_names.len())?
        };
        s.finish()?;

        let mut s = take("afd");
        let alpha = match s.raw("alpha") {
            None => d.model.afd.alpha,
            Some(v) if v == "none" => None,
            Some(v) => Some(parse_value::<f64>("afd", "alpha", &v)?),
        };
        let afd = AfdConfig {
            threshold: s.value("threshold", d.model.afd.threshold)?,
            alpha,
            mode: s.value("mode", d.model.afd.mode)?,
            ufd_kernel: s.value("ufd_kernel", d.model.afd.ufd_kernel)?,
        };
        s.finish()?;

        let mut s = take("train");
        let dt = &d.train;
        let dtype: String = s.value("dtype", DTYPE.to_string())?;
        if dtype != DTYPE {
            return Err(Error::Config(format!("train.dtype `{dtype}` is not supported; only f64 is")));
        }
        let train = TrainConfig {
            iterations: s.value("iterations", dt.iterations)?,
            adam: AdamConfig {
                lr: s.value("lr", dt.adam.lr)?,
                beta1: s.value("beta1", dt.adam.beta1)?,
                beta2: s.value("beta2", dt.adam.beta2)?,
                eps: s.value("eps", dt.adam.eps)?,
                weight_decay: s.value("weight_decay", dt.adam.weight_decay)?,
            },
            weights: LossWeights {
                afd: s.value("w_afd", dt.weights.afd)?,
                heatmap: s.value("w_heatmap", dt.weights.heatmap)?,
                reg: s.value("w_reg", dt.weights.reg)?,
            },
            seed: s.value("seed", dt.seed)?,
            accumulate: s.value("accumulate", dt.accumulate)?,
            warmup: s.value("warmup", dt.warmup)?,
            log_every: s.value("log_every", dt.log_every)?,
        };
        s.finish()?;

        let mut s = take("scene");
        let ds = &d.scene.spec;
        let class_specs = if s.values.contains_key("classes") {
            let names: Vec<String> = s.required_list("classes")?;
            let mut out = Vec::new();
            for name in names {
                out.push(ClassSpec {
                    length: s.required_pair(&format!("{name}.length"))?,
                    width: s.required_pair(&format!("{name}.width"))?,
                    height: s.required_pair(&format!("{name}.height"))?,
                    count: s.required_pair(&format!("{name}.count"))?,
                    name,
                });
            }
            out
        } else {
            ds.classes.clone()
        };
        let scene = SceneConfig {
            spec: SceneSpec {
                x_range: s.pair("x_range", ds.x_range)?,
                y_range: s.pair("y_range", ds.y_range)?,
                ground_z: s.value("ground_z", ds.ground_z)?,
                classes: class_specs,
                points_per_object: s.pair("points_per_object", ds.points_per_object)?,
                background_points: s.value("background_points", ds.background_points)?,
                ground_rings: s.value("ground_rings", ds.ground_rings)?,
                noise: s.value("noise", ds.noise)?,
                yaw_range: s.pair("yaw_range", ds.yaw_range)?,
                margin: s.value("margin", ds.margin)?,
            },
            seed: s.value("seed", d.scene.seed)?,
            train_scenes: s.value("train_scenes", d.scene.train_scenes)?,
            eval_scenes: s.value("eval_scenes", d.scene.eval_scenes)?,
        };
        s.finish()?;

        if let Some(name) = sections.keys().next() {
            return Err(Error::Config(format!("unknown section [{name}]")));
        }
        let cfg = Config {
            model: ModelConfig {
                grid,
                backbone,
                groups,
                afd,
                heatmap_mode,
                nms,
            },
            class_names,
            train,
            scene,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text; floats use the shortest round-trip representation.
    pub fn to_ini(&self) -> String {
        let m = &self.model;
        let mut o = String::new();
        let w = &mut o;
        let _ = writeln!(w, "[grid]");
        kv(w, "origin", join(&m.grid.origin));
        kv(w, "voxel_size", join(&m.grid.voxel_size));
        kv(w, "dims", join(&m.grid.dims));

        let b = &m.backbone;
        let _ = writeln!(w, "\n[backbone]");
        kv(w, "in_channels", b.in_channels);
        kv(w, "stage_channels", join(&b.stage_channels));
        kv(w, "srbs_per_stage", b.srbs_per_stage);
        kv(w, "edb_m", b.edb_m);
        kv(w, "edb_n", b.edb_n);
        kv(w, "bev_channels", b.bev_channels);

        let g = &m.groups;
        let _ = writeln!(w, "\n[groups]");
        let names: Vec<&str> = g.groups().iter().map(|g| g.name.as_str()).collect();
        kv(w, "order", names.join(", "));
        kv(w, "background", &g.groups()[g.background()].name);
        for grp in g.groups() {
            if !grp.background {
                kv(w, &format!("{}.classes", grp.name), join(&grp.classes));
            }
            kv(w, &format!("{}.size", grp.name), format!("{:?}", grp.size));
            kv(w, &format!("{}.kernel", grp.name), grp.kernel);
        }

        let a = &m.afd;
        let _ = writeln!(w, "\n[afd]");
        kv(w, "threshold", format!("{:?}", a.threshold));
        kv(w, "alpha", a.alpha.map_or("none".to_string(), |v| format!("{v:?}")));
        kv(w, "mode", a.mode);
        kv(w, "ufd_kernel", a.ufd_kernel);

        let _ = writeln!(w, "\n[head]");
        kv(w, "class_names", self.class_names.join(", "));
        kv(w, "heatmap_mode", m.heatmap_mode);
        kv(w, "nms_iou", join(&m.nms.iou_thresholds));
        kv(w, "score_threshold", format!("{:?}", m.nms.score_threshold));
        kv(w, "max_detections", m.nms.max_detections);

        let t = &self.train;
        let _ = writeln!(w, "\n[train]");
        kv(w, "iterations", t.iterations);
        kv(w, "lr", format!("{:?}", t.adam.lr));
        kv(w, "beta1", format!("{:?}", t.adam.beta1));
        kv(w, "beta2", format!("{:?}", t.adam.beta2));
        kv(w, "eps", format!("{:?}", t.adam.eps));
        kv(w, "weight_decay", format!("{:?}", t.adam.weight_decay));
        kv(w, "w_afd", format!("{:?}", t.weights.afd));
        kv(w, "w_heatmap", format!("{:?}", t.weights.heatmap));
        kv(w, "w_reg", format!("{:?}", t.weights.reg));
        kv(w, "seed", t.seed);
        kv(w, "dtype", DTYPE);
        kv(w, "accumulate", t.accumulate);
        kv(w, "warmup", t.warmup);
        kv(w, "log_every", t.log_every);

        let s = &self.scene;
        let p = &s.spec;
        let _ = writeln!(w, "\n[scene]");
        kv(w, "seed", s.seed);
        kv(w, "train_scenes", s.train_scenes);
        kv(w, "eval_scenes", s.eval_scenes);
        kv(w, "x_range", pair(p.x_range));
        kv(w, "y_range", pair(p.y_range));
        kv(w, "ground_z", format!("{:?}", p.ground_z));
        kv(w, "points_per_object", pair(p.points_per_object));
        kv(w, "background_points", p.background_points);
        kv(w, "ground_rings", p.ground_rings);
        kv(w, "noise", format!("{:?}", p.noise));
        kv(w, "yaw_range", pair(p.yaw_range));
        kv(w, "margin", format!("{:?}", p.margin));
        let names: Vec<&str> = p.classes.iter().map(|c| c.name.as_str()).collect();
        kv(w, "classes", names.join(", "));
        for c in &p.classes {
            kv(w, &format!("{}.length", c.name), pair(c.length));
            kv(w, &format!("{}.width", c.name), pair(c.width));
            kv(w, &format!("{}.height", c.name), pair(c.height));
            kv(w, &format!("{}.count", c.name), pair(c.count));
        }
        o
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_ini().as_bytes()).into()
    }

    /// Whether a checkpoint written under `self` can continue under `other`:
    /// everything but the iteration budget and logging must agree.
    pub fn resumable_as(&self, other: &Config) -> bool {
        let strip = |c: &Config| {
            let mut c = c.clone();
            c.train.iterations = 0;
            c.train.log_every = 1;
            c
        };
        strip(self) == strip(other)
    }
}

fn kv(w: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(w, "{key} = {value}");
}

fn join<T: Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

fn pair<T: Debug>(p: (T, T)) -> String {
    format!("{:?}, {:?}", p.0, p.1)
}

fn parse_value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse `{v}`")))
}

struct Section {
    name: String,
    values: BTreeMap<String, String>,
}

impl Section {
    fn new(name: &str) -> Self {
        Section {
            name: name.into(),
            values: BTreeMap::new(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn value<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => parse_value(&self.name, key, &v),
            None => Ok(default),
        }
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{}.{key} is required", self.name)))?;
        parse_value(&self.name, key, &v)
    }

    fn parse_list<T: FromStr>(&self, key: &str, v: &str) -> Result<Vec<T>> {
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|x| parse_value(&self.name, key, x)).collect()
    }

    fn list<T: FromStr + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.raw(key) {
            Some(v) => self.parse_list(key, &v),
            None => Ok(default.to_vec()),
        }
    }

    fn required_list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{}.{key} is required", self.name)))?;
        self.parse_list(key, &v)
    }

    fn array<T: FromStr + Copy, const N: usize>(&mut self, key: &str, default: [T; N]) -> Result<[T; N]> {
        let v = self.list(key, &default)?;
        v.try_into()
            .map_err(|_| Error::Config(format!("{}.{key} needs {N} values", self.name)))
    }

    fn pair<T: FromStr + Copy>(&mut self, key: &str, default: (T, T)) -> Result<(T, T)> {
        let [a, b] = self.array(key, [default.0, default.1])?;
        Ok((a, b))
    }

    fn required_pair<T: FromStr + Copy>(&mut self, key: &str) -> Result<(T, T)> {
        let v: Vec<T> = self.required_list(key)?;
        match v[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Config(format!("{}.{key} needs 2 values", self.name))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key {}.{k}", self.name))),
            None => Ok(()),
        }
    }
}
