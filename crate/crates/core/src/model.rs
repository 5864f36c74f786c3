//! The full detector: 3D backbone, BEV compression, feature diffusion, 2D
//! encoder-decoder block and sparse head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afd::{
    afd_loss, build_group_targets, diffusion_region, dilate_mask, expand_features, group_masks,
    target_masks, AfdConfig, AfdMode, CategoryGroups, ClassifierCache, DiffusionRegion, Expansion,
    VoxelClassifier,
};
use crate::backbone::{Backbone3d, Backbone3dCache, BackboneConfig, BevCache, BevCompress, Edb, EdbCache, EdbConfig};
use crate::boxes::{Box3D, NmsConfig};
use crate::error::{Error, Result};
use crate::head::{
    build_heatmap_targets, build_regression_targets, decode_boxes, heatmap_loss, reg_loss, Head, HeadCache,
    HeadOutput, HeatmapMode, REG_DIMS,
};
use crate::nn::{add_into, ConvKind, ConvUnit, ConvUnitCache, Ctx, Tensor};
use crate::sparse::{regular_rulebook, submanifold_rulebook, ConvSpec, FlopsReport, Mode, ParamView, Parameters, Rulebook};
use crate::voxel::{voxelize, PointCloud, VoxelGridSpec};

/// Layer-name prefixes of the 3D part, excluded from diffusion FLOPs.
pub const BACKBONE_PREFIXES: [&str; 2] = ["backbone3d.", "bev."];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: VoxelGridSpec,
    pub backbone: BackboneConfig,
    pub groups: CategoryGroups,
    pub afd: AfdConfig,
    pub heatmap_mode: HeatmapMode,
    pub nms: NmsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.backbone.validate()?;
        self.afd.validate()?;
        self.nms.validate()?;
        if self.nms.iou_thresholds.len() != self.num_classes() {
            return Err(Error::Config(format!(
                "{} NMS thresholds for {} classes",
                self.nms.iou_thresholds.len(),
                self.num_classes()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.groups.num_classes()
    }

    /// Placement of the BEV map produced by the backbone.
    pub fn bev_spec(&self) -> VoxelGridSpec {
        self.grid.strided(self.backbone.levels())
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.groups.kernels(self.afd.alpha)
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone3d,
    pub bev: BevCompress,
    pub classifier: VoxelClassifier,
    /// Present only for parameter-based uniform diffusion.
    pub ufd_conv: Option<ConvUnit>,
    pub edb2d: Edb,
    pub head: Head,
}

/// Where diffusion masks come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    Predicted,
    /// Group masks from ground-truth footprints.
    Oracle(&'a [Box3D]),
}

#[derive(Clone, Debug)]
enum DiffusionCache {
    Identity,
    Expanded(Expansion),
    ParamBased { rb: Rulebook, cache: ConvUnitCache },
}

#[derive(Clone, Debug)]
struct ForwardCache {
    encoder: Option<(Backbone3dCache, BevCache)>,
    classifier: Option<(Rulebook, ClassifierCache)>,
    diffusion: DiffusionCache,
    edb: EdbCache,
    rb_head: Rulebook,
    head: HeadCache,
}

/// Output of the 3D part of the network.
#[derive(Clone, Debug)]
pub struct BevStage {
    pub bev: Tensor,
    pub flops: FlopsReport,
    pub active_sites: Vec<(String, usize)>,
    backbone: Backbone3dCache,
    bev_cache: BevCache,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    /// BEV map entering diffusion.
    pub bev: Tensor,
    /// `N x G` voxel-classification logits over `bev` rows (AFD mode only).
    pub afd_logits: Option<Vec<f64>>,
    pub region: Option<DiffusionRegion>,
    /// BEV map after diffusion, entering the 2D EDB.
    pub diffused: Tensor,
    /// Head input; same sites as `diffused`.
    pub features: Tensor,
    pub out: HeadOutput,
    pub flops: FlopsReport,
    /// `(stage, active sites)` in pipeline order.
    pub active_sites: Vec<(String, usize)>,
    cache: ForwardCache,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub afd: f64,
    pub heatmap: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            afd: 1.0,
            heatmap: 1.0,
            reg: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub afd: f64,
    pub heatmap: f64,
    pub reg: f64,
    pub positives: usize,
    pub dropped: usize,
}

/// Loss gradients w.r.t. the forward outputs, already weighted.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub heat: Vec<f64>,
    pub reg: Vec<f64>,
    pub afd: Option<Vec<f64>>,
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &cfg.backbone;
        let backbone = Backbone3d::new(b, &mut rng);
        let bev = BevCompress::new(b.last_channels(), b.bev_channels, &mut rng);
        let c = b.bev_channels;
        let classifier = VoxelClassifier::new(c, cfg.groups.len(), &mut rng);
        let ufd_conv = (cfg.afd.mode == AfdMode::UfdPb).then(|| {
            let k = cfg.afd.ufd_kernel;
            ConvUnit::new(
                "diffusion.ufd_pb",
                ConvKind::Sparse,
                ConvSpec::regular(2, k, 1, (k - 1) / 2),
                c,
                c,
                true,
                true,
                &mut rng,
            )
        });
        let edb2d = Edb::new(
            "edb2d",
            EdbConfig {
                m: b.edb_m,
                n: b.edb_n,
                channels: c,
                ndim: 2,
            },
            &mut rng,
        );
        let head = Head::new(c, cfg.num_classes(), &mut rng);
        Ok(Detector {
            cfg,
            backbone,
            bev,
            classifier,
            ufd_conv,
            edb2d,
            head,
        })
    }

    pub fn voxelize(&self, pc: &PointCloud) -> Result<Tensor> {
        let t = voxelize(pc, &self.cfg.grid)?;
        if t.channels() != self.cfg.backbone.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "points carry {} channels, backbone expects {}",
                t.channels(),
                self.cfg.backbone.in_channels
            )));
        }
        Ok(t)
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode, masks: MaskSource<'_>) -> Result<Forward> {
        let stage = self.forward_bev(input, mode)?;
        let mut fwd = self.forward_post(&stage.bev, mode, masks)?;
        let mut flops = stage.flops;
        flops.merge(fwd.flops);
        fwd.flops = flops;
        let mut sites = stage.active_sites;
        sites.append(&mut fwd.active_sites);
        fwd.active_sites = sites;
        fwd.cache.encoder = Some((stage.backbone, stage.bev_cache));
        Ok(fwd)
    }

    /// 3D backbone and BEV compression.
    pub fn forward_bev(&mut self, input: &Tensor, mode: Mode) -> Result<BevStage> {
        let mut ctx = Ctx::new(mode);
        let mut active_sites = vec![("input".to_string(), input.len())];
        let (h3, backbone) = self.backbone.forward(input, &mut ctx)?;
        for (s, n) in backbone.active_sites.iter().enumerate() {
            active_sites.push((format!("backbone3d.level{s}"), *n));
        }
        let (bev, bev_cache) = self.bev.forward(&h3, &mut ctx)?;
        active_sites.push(("bev".into(), bev.len()));
        Ok(BevStage {
            bev,
            flops: ctx.flops,
            active_sites,
            backbone,
            bev_cache,
        })
    }

    /// Diffusion, 2D EDB and head on a BEV map. The result cannot be
    /// back-propagated past `bev`.
    pub fn forward_post(&mut self, bev: &Tensor, mode: Mode, masks: MaskSource<'_>) -> Result<Forward> {
        let mut ctx = Ctx::new(mode);
        let bev = bev.clone();
        let mut active_sites = Vec::new();
        let mut afd_logits = None;
        let mut region = None;
        let mut classifier = None;
        let (diffused, diffusion) = match self.cfg.afd.mode {
            AfdMode::None => (bev.clone(), DiffusionCache::Identity),
            AfdMode::Afd => {
                let rb = submanifold_rulebook(bev.grid(), bev.coords(), &ConvSpec::submanifold(2, 3))?;
                let (logits, cache) = self.classifier.forward(&bev, &rb, &mut ctx)?;
                let group_mask = match masks {
                    MaskSource::Predicted => group_masks(&logits, &self.cfg.groups, self.cfg.afd.threshold),
                    MaskSource::Oracle(boxes) => {
                        let t = build_group_targets(boxes, bev.coords(), &self.cfg.bev_spec(), &self.cfg.groups)?;
                        target_masks(&t, &self.cfg.groups)
                    }
                };
                let r = diffusion_region(&bev, group_mask, &self.cfg.kernels())?;
                let e = expand_features(&bev, &r.union)?;
                classifier = Some((rb, cache));
                afd_logits = Some(logits);
                region = Some(r);
                (e.tensor.clone(), DiffusionCache::Expanded(e))
            }
            AfdMode::UfdPf => {
                let all = vec![true; bev.len()];
                let r = dilate_mask(bev.coords(), &all, self.cfg.afd.ufd_kernel, bev.grid());
                let e = expand_features(&bev, &r)?;
                (e.tensor.clone(), DiffusionCache::Expanded(e))
            }
            AfdMode::UfdPb => {
                let unit = self
                    .ufd_conv
                    .as_mut()
                    .ok_or_else(|| Error::Config("parameter-based diffusion conv missing".into()))?;
                let rb = regular_rulebook(bev.grid(), bev.coords(), &unit.spec)?;
                let (y, cache) = unit.forward(&bev, &rb, &mut ctx)?;
                (y, DiffusionCache::ParamBased { rb, cache })
            }
        };
        active_sites.push(("diffused".into(), diffused.len()));
        let (features, edb) = self.edb2d.forward(&diffused, &mut ctx)?;
        let rb_head = submanifold_rulebook(features.grid(), features.coords(), &ConvSpec::submanifold(2, 3))?;
        let (out, head) = self.head.forward(&features, &rb_head, &mut ctx)?;
        Ok(Forward {
            bev,
            afd_logits,
            region,
            diffused,
            features,
            out,
            flops: ctx.flops,
            active_sites,
            cache: ForwardCache {
                encoder: None,
                classifier,
                diffusion,
                edb,
                rb_head,
                head,
            },
        })
    }

    /// Copy with another diffusion strategy. Shared layers keep their
    /// weights; a parameter-based diffusion conv is drawn from `seed`.
    pub fn with_diffusion(&self, mode: AfdMode, alpha: Option<f64>, ufd_kernel: usize, seed: u64) -> Result<Self> {
        let mut d = self.clone();
        d.cfg.afd.mode = mode;
        d.cfg.afd.alpha = alpha;
        d.cfg.afd.ufd_kernel = ufd_kernel;
        d.cfg.validate()?;
        d.ufd_conv = (mode == AfdMode::UfdPb).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = d.cfg.backbone.bev_channels;
            ConvUnit::new(
                "diffusion.ufd_pb",
                ConvKind::Sparse,
                ConvSpec::regular(2, ufd_kernel, 1, (ufd_kernel - 1) / 2),
                c,
                c,
                true,
                true,
                &mut rng,
            )
        });
        Ok(d)
    }

    /// Losses and weighted output gradients for one scene.
    pub fn losses(&self, fwd: &Forward, boxes: &[Box3D], w: &LossWeights) -> Result<(LossBreakdown, OutputGrads)> {
        let bev_spec = self.cfg.bev_spec();
        let coords = fwd.features.coords();
        let hm = build_heatmap_targets(boxes, coords, &bev_spec, self.cfg.heatmap_mode, self.cfg.num_classes())?;
        let rt = build_regression_targets(boxes, &hm.designated, coords, &bev_spec)?;
        let (l_hm, mut g_hm) = heatmap_loss(&fwd.out.heat, &hm)?;
        let (l_reg, mut g_reg) = reg_loss(&fwd.out.reg, &rt)?;
        g_hm.iter_mut().for_each(|g| *g *= w.heatmap);
        g_reg.iter_mut().for_each(|g| *g *= w.reg);
        let (l_afd, g_afd) = match &fwd.afd_logits {
            Some(logits) => {
                let t = build_group_targets(boxes, fwd.bev.coords(), &bev_spec, &self.cfg.groups)?;
                let (l, mut g) = afd_loss(logits, &t, self.cfg.groups.len())?;
                g.iter_mut().for_each(|v| *v *= w.afd);
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let breakdown = LossBreakdown {
            total: w.afd * l_afd + w.heatmap * l_hm + w.reg * l_reg,
            afd: l_afd,
            heatmap: l_hm,
            reg: l_reg,
            positives: hm.num_positive(),
            dropped: hm.dropped,
        };
        Ok((
            breakdown,
            OutputGrads {
                heat: g_hm,
                reg: g_reg,
                afd: g_afd,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input
    /// voxel features.
    pub fn backward(&mut self, fwd: &Forward, grads: &OutputGrads) -> Result<Vec<f64>> {
        let c = &fwd.cache;
        if grads.heat.len() != fwd.out.heat.len() || grads.reg.len() != fwd.features.len() * REG_DIMS {
            return Err(Error::ShapeMismatch("output gradients do not match the forward pass".into()));
        }
        let g = self.head.backward(&c.head, &c.rb_head, &grads.heat, &grads.reg)?;
        let g = self.edb2d.backward(&c.edb, &g)?;
        let mut g_bev = match &c.diffusion {
            DiffusionCache::Identity => g,
            DiffusionCache::Expanded(e) => e.backward(&g, fwd.bev.len()),
            DiffusionCache::ParamBased { rb, cache } => self
                .ufd_conv
                .as_mut()
                .ok_or_else(|| Error::Config("parameter-based diffusion conv missing".into()))?
                .backward(cache, rb, &g)?,
        };
        if let (Some((rb, cache)), Some(ga)) = (&c.classifier, &grads.afd) {
            add_into(&mut g_bev, &self.classifier.backward(cache, rb, ga)?);
        }
        let (bb, bev) = c
            .encoder
            .as_ref()
            .ok_or_else(|| Error::ShapeMismatch("forward pass started from a BEV map".into()))?;
        let g3 = self.bev.backward(bev, &g_bev)?;
        self.backbone.backward(bb, &g3)
    }

    pub fn detect(&mut self, pc: &PointCloud) -> Result<Vec<Box3D>> {
        let x = self.voxelize(pc)?;
        let fwd = self.forward(&x, Mode::Eval, MaskSource::Predicted)?;
        self.decode(&fwd)
    }

    pub fn decode(&self, fwd: &Forward) -> Result<Vec<Box3D>> {
        decode_boxes(
            &fwd.out.heat,
            &fwd.out.reg,
            fwd.features.coords(),
            &self.cfg.bev_spec(),
            &self.cfg.nms,
        )
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v| {
            if v.grad.is_some() {
                n += v.value.len();
            }
        });
        n
    }
}

impl Parameters<f64> for Detector {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.backbone.visit_params(f);
        self.bev.visit_params(f);
        self.classifier.visit_params(f);
        if let Some(u) = &mut self.ufd_conv {
            u.visit_params(f);
        }
        self.edb2d.visit_params(f);
        self.head.visit_params(f);
    }
}
