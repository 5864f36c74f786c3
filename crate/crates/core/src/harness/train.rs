//! Single-writer training loop.
//!
//! Each optimizer step consumes `accumulate` scenes. Scenes are visited in a
//! fresh seeded permutation per epoch, so the order depends only on the seed
//! and the step index, and a resumed run replays the same sequence.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::optim::Adam;
use super::scene::Scene;
use crate::boxes::Box3D;
use crate::error::{Error, Result};
use crate::model::{Detector, LossBreakdown, LossWeights, MaskSource};
use crate::nn::Tensor;
use crate::sparse::{Mode, Parameters};

/// A scene voxelized once up front.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub input: Tensor,
    pub boxes: Vec<Box3D>,
}

pub fn prepare_scenes(model: &Detector, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes
        .par_iter()
        .map(|s| {
            Ok(PreparedScene {
                input: model.voxelize(&s.points)?,
                boxes: s.boxes.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    /// 0-based optimizer step.
    pub iteration: usize,
    pub scenes: Vec<usize>,
    /// Mean over the accumulated scenes.
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub const TSV_HEADER: &'static str = "iteration\ttotal\tafd\theatmap\treg\tpositives";

    pub fn to_tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            self.iteration, l.total, l.afd, l.heatmap, l.reg, l.positives
        )
    }
}

/// Scene visited at micro-step `u` over `n` scenes.
pub fn scene_index(seed: u64, u: usize, n: usize) -> usize {
    let epoch = u / n;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    perm.shuffle(&mut rng);
    perm[u % n]
}

fn check_finite(l: &LossBreakdown, iteration: usize) -> Result<()> {
    for (term, value) in [("afd", l.afd), ("heatmap", l.heatmap), ("reg", l.reg), ("total", l.total)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, iteration, value });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: Config,
    pub model: Detector,
    pub adam: Adam,
    /// Optimizer steps taken so far.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let model = Detector::new(cfg.model.clone(), cfg.train.seed)?;
        Ok(Trainer {
            adam: Adam::new(cfg.train.adam),
            model,
            cfg,
            iteration: 0,
        })
    }

    /// Continues from `ckpt`, which must come from a compatible config.
    pub fn resume(cfg: Config, ckpt: &Checkpoint) -> Result<Self> {
        let saved = Config::parse(&ckpt.config_text()?)?;
        if !saved.resumable_as(&cfg) {
            return Err(Error::ConfigMismatch);
        }
        let mut t = Trainer::new(cfg)?;
        ckpt.restore_model(&mut t.model)?;
        ckpt.restore_adam(&mut t.model, &mut t.adam)?;
        t.iteration = ckpt.iteration()? as usize;
        Ok(t)
    }

    /// One optimizer step over the next `accumulate` scenes.
    pub fn step(&mut self, data: &[PreparedScene]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Config("no training scenes".into()));
        }
        let acc = self.cfg.train.accumulate;
        let scale = 1.0 / acc as f64;
        self.model.zero_grad();
        let mut mean = LossBreakdown::default();
        let mut scenes = Vec::with_capacity(acc);
        for k in 0..acc {
            let idx = scene_index(self.cfg.train.seed, self.iteration * acc + k, data.len());
            let s = &data[idx];
            let fwd = self.model.forward(&s.input, Mode::Train, MaskSource::Predicted)?;
            let (l, mut g) = self.model.losses(&fwd, &s.boxes, &self.cfg.train.weights)?;
            check_finite(&l, self.iteration)?;
            if acc > 1 {
                g.heat.iter_mut().chain(g.reg.iter_mut()).for_each(|v| *v *= scale);
                if let Some(a) = &mut g.afd {
                    a.iter_mut().for_each(|v| *v *= scale);
                }
            }
            self.model.backward(&fwd, &g)?;
            mean.total += l.total * scale;
            mean.afd += l.afd * scale;
            mean.heatmap += l.heatmap * scale;
            mean.reg += l.reg * scale;
            mean.positives += l.positives;
            mean.dropped += l.dropped;
            scenes.push(idx);
        }
        let lr = self.cfg.train.lr_at(self.iteration);
        self.adam.update(&mut self.model, lr)?;
        let rec = LossRecord {
            iteration: self.iteration,
            scenes,
            loss: mean,
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// Steps until `until` optimizer steps have been taken.
    pub fn run(&mut self, data: &[PreparedScene], until: usize) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.iteration < until {
            let rec = self.step(data)?;
            if rec.iteration % self.cfg.train.log_every == 0 || self.iteration == until {
                let l = &rec.loss;
                info!(
                    "iter {} loss {:.5} (afd {:.5} heatmap {:.5} reg {:.5})",
                    rec.iteration, l.total, l.afd, l.heatmap, l.reg
                );
            }
            records.push(rec);
        }
        Ok(records)
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(&mut self.model, &self.adam, self.iteration as u64, &self.cfg.to_ini())
    }
}

/// Mean training-mode loss over `data` with the current weights. Works on a
/// copy, so normalization statistics of `model` are untouched.
pub fn dataset_loss(model: &Detector, data: &[PreparedScene], weights: &LossWeights) -> Result<LossBreakdown> {
    let mut m = model.clone();
    let n = data.len().max(1) as f64;
    let mut mean = LossBreakdown::default();
    for s in data {
        let fwd = m.forward(&s.input, Mode::Train, MaskSource::Predicted)?;
        let (l, _) = m.losses(&fwd, &s.boxes, weights)?;
        mean.total += l.total / n;
        mean.afd += l.afd / n;
        mean.heatmap += l.heatmap / n;
        mean.reg += l.reg / n;
        mean.positives += l.positives;
        mean.dropped += l.dropped;
    }
    Ok(mean)
}

/// Trains from scratch for `cfg.train.iterations` steps.
pub fn train(cfg: &Config, scenes: &[Scene]) -> Result<(Trainer, Vec<LossRecord>)> {
    let mut t = Trainer::new(cfg.clone())?;
    let data = prepare_scenes(&t.model, scenes)?;
    let records = t.run(&data, cfg.train.iterations)?;
    Ok((t, records))
}

/// A detector with the weights and buffers stored in `ckpt`.
pub fn load_model(cfg: &Config, ckpt: &Checkpoint) -> Result<Detector> {
    let saved = Config::parse(&ckpt.config_text()?)?;
    if saved.model != cfg.model {
        return Err(Error::ConfigMismatch);
    }
    let mut model = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    ckpt.restore_model(&mut model)?;
    Ok(model)
}
