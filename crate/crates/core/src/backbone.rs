//! Sparse residual blocks, encoder-decoder blocks, the 3D backbone and BEV
//! compression.
//!
//! Every conv is followed by feature norm and ReLU, except the second conv of
//! a residual block whose ReLU comes after the skip add.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{add_into, ConvKind, ConvUnit, ConvUnitCache, Ctx, Tensor};
use crate::sparse::{
    regular_rulebook, relu, relu_backward, sparse_add, submanifold_rulebook, ConvSpec, Coord,
    ParamView, Parameters, Rulebook, SparseTensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrbConfig {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdbConfig {
    pub m: usize,
    pub n: usize,
    pub channels: usize,
    pub ndim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Width of each stage; stage `s` down-samples to `stage_channels[s + 1]`
    /// (the last stage keeps its width).
    pub stage_channels: Vec<usize>,
    pub srbs_per_stage: usize,
    pub edb_m: usize,
    pub edb_n: usize,
    pub bev_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 4,
            stage_channels: vec![16, 32, 64],
            srbs_per_stage: 2,
            edb_m: 4,
            edb_n: 2,
            bev_channels: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one non-empty stage".into()));
        }
        if self.edb_m == 0 || self.edb_n == 0 {
            return Err(Error::Config("EDB m and n must be >= 1".into()));
        }
        if self.in_channels < 3 || self.bev_channels == 0 {
            return Err(Error::Config("invalid backbone channel counts".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        self.stage_channels.len() as u32
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }
}

/// Two submanifold convolutions with an identity skip.
#[derive(Clone, Debug)]
pub struct Srb {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
}

#[derive(Clone, Debug)]
pub struct SrbCache {
    c1: ConvUnitCache,
    c2: ConvUnitCache,
    pre_relu: Vec<f64>,
}

impl Srb {
    pub fn new<R: Rng + ?Sized>(name: &str, ndim: usize, cfg: SrbConfig, rng: &mut R) -> Self {
        let spec = ConvSpec::submanifold(ndim, cfg.kernel);
        let c = cfg.channels;
        Srb {
            conv1: ConvUnit::new(&format!("{name}.conv1"), ConvKind::Sparse, spec, c, c, true, true, rng),
            conv2: ConvUnit::new(&format!("{name}.conv2"), ConvKind::Sparse, spec, c, c, true, false, rng),
        }
    }

    /// `relu(norm(conv2(relu(norm(conv1(x))))) + x)` over `rb`, the
    /// submanifold rulebook of `x`'s sites.
    pub fn forward(&mut self, x: &Tensor, rb: &Rulebook, ctx: &mut Ctx) -> Result<(Tensor, SrbCache)> {
        if x.channels() != self.conv1.conv.c_in {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {} channels, got {}",
                self.conv1.conv.name,
                self.conv1.conv.c_in,
                x.channels()
            )));
        }
        let (a, c1) = self.conv1.forward(x, rb, ctx)?;
        let (h, c2) = self.conv2.forward(&a, rb, ctx)?;
        let s = sparse_add(&h, x)?;
        let pre_relu = s.features().to_vec();
        Ok((relu(&s), SrbCache { c1, c2, pre_relu }))
    }

    pub fn backward(&mut self, cache: &SrbCache, rb: &Rulebook, grad: &[f64]) -> Result<Vec<f64>> {
        let gs = relu_backward(&cache.pre_relu, grad);
        let ga = self.conv2.backward(&cache.c2, rb, &gs)?;
        let mut gx = self.conv1.backward(&cache.c1, rb, &ga)?;
        add_into(&mut gx, &gs);
        Ok(gx)
    }
}

impl Parameters<f64> for Srb {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
    }
}

fn srb_chain_forward(
    blocks: &mut [Srb],
    x: Tensor,
    rb: &Rulebook,
    ctx: &mut Ctx,
) -> Result<(Tensor, Vec<SrbCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks.iter_mut() {
        let (y, c) = b.forward(&h, rb, ctx)?;
        caches.push(c);
        h = y;
    }
    Ok((h, caches))
}

fn srb_chain_backward(
    blocks: &mut [Srb],
    caches: &[SrbCache],
    rb: &Rulebook,
    grad: Vec<f64>,
) -> Result<Vec<f64>> {
    let mut g = grad;
    for (b, c) in blocks.iter_mut().zip(caches).rev() {
        g = b.backward(c, rb, &g)?;
    }
    Ok(g)
}

/// Encoder-decoder block: `m` SRBs, stride-2 down-sampling, `n` SRBs,
/// inverse convolution back onto the input sites, additive skip, fusion SRB.
#[derive(Clone, Debug)]
pub struct Edb {
    pub cfg: EdbConfig,
    pub pre: Vec<Srb>,
    pub down: ConvUnit,
    pub mid: Vec<Srb>,
    pub up: ConvUnit,
    pub fuse: Srb,
}

#[derive(Clone, Debug)]
pub struct EdbCache {
    rb_full: Rulebook,
    rb_down: Rulebook,
    rb_half: Rulebook,
    pre: Vec<SrbCache>,
    down: ConvUnitCache,
    mid: Vec<SrbCache>,
    up: ConvUnitCache,
    fuse: SrbCache,
}

impl Edb {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: EdbConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let srb = SrbConfig {
            channels: c,
            kernel: 3,
        };
        let pre = (0..cfg.m)
            .map(|i| Srb::new(&format!("{name}.pre{i}"), cfg.ndim, srb, rng))
            .collect();
        let down_spec = ConvSpec::regular(cfg.ndim, 3, 2, 1);
        let down = ConvUnit::new(&format!("{name}.down"), ConvKind::Sparse, down_spec, c, c, true, true, rng);
        let mid = (0..cfg.n)
            .map(|i| Srb::new(&format!("{name}.mid{i}"), cfg.ndim, srb, rng))
            .collect();
        let up = ConvUnit::new(&format!("{name}.up"), ConvKind::Inverse, down_spec, c, c, true, true, rng);
        let fuse = Srb::new(&format!("{name}.fuse"), cfg.ndim, srb, rng);
        Edb {
            cfg,
            pre,
            down,
            mid,
            up,
            fuse,
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, EdbCache)> {
        let ndim = self.cfg.ndim;
        let rb_full = submanifold_rulebook(x.grid(), x.coords(), &ConvSpec::submanifold(ndim, 3))?;
        let (skip, pre) = srb_chain_forward(&mut self.pre, x.clone(), &rb_full, ctx)?;
        let rb_down = regular_rulebook(skip.grid(), skip.coords(), &self.down.spec)?;
        let (low, down) = self.down.forward(&skip, &rb_down, ctx)?;
        let rb_half = submanifold_rulebook(low.grid(), low.coords(), &ConvSpec::submanifold(ndim, 3))?;
        let (low, mid) = srb_chain_forward(&mut self.mid, low, &rb_half, ctx)?;
        let (restored, up) = self.up.forward(&low, &rb_down, ctx)?;
        let merged = sparse_add(&restored, &skip)?;
        let (out, fuse) = self.fuse.forward(&merged, &rb_full, ctx)?;
        Ok((
            out,
            EdbCache {
                rb_full,
                rb_down,
                rb_half,
                pre,
                down,
                mid,
                up,
                fuse,
            },
        ))
    }

    pub fn backward(&mut self, cache: &EdbCache, grad: &[f64]) -> Result<Vec<f64>> {
        let g_merged = self.fuse.backward(&cache.fuse, &cache.rb_full, grad)?;
        let g_low = self.up.backward(&cache.up, &cache.rb_down, &g_merged)?;
        let g_low = srb_chain_backward(&mut self.mid, &cache.mid, &cache.rb_half, g_low)?;
        let mut g_skip = self.down.backward(&cache.down, &cache.rb_down, &g_low)?;
        add_into(&mut g_skip, &g_merged);
        srb_chain_backward(&mut self.pre, &cache.pre, &cache.rb_full, g_skip)
    }
}

impl Parameters<f64> for Edb {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        for b in &mut self.pre {
            b.visit_params(f);
        }
        self.down.visit_params(f);
        for b in &mut self.mid {
            b.visit_params(f);
        }
        self.up.visit_params(f);
        self.fuse.visit_params(f);
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub srbs: Vec<Srb>,
    pub down: ConvUnit,
}

/// Stem conv, stages of (SRBs, stride-2 regular conv), then a 3D EDB.
#[derive(Clone, Debug)]
pub struct Backbone3d {
    pub stem: ConvUnit,
    pub stages: Vec<Stage>,
    pub edb: Edb,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    rb_subm: Rulebook,
    srbs: Vec<SrbCache>,
    rb_down: Rulebook,
    down: ConvUnitCache,
}

#[derive(Clone, Debug)]
pub struct Backbone3dCache {
    rb_stem: Rulebook,
    stem: ConvUnitCache,
    stages: Vec<StageCache>,
    edb: EdbCache,
    /// Active sites entering each stage, then after the EDB.
    pub active_sites: Vec<usize>,
}

impl Backbone3d {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let c0 = cfg.stage_channels[0];
        let stem = ConvUnit::new(
            "backbone3d.stem",
            ConvKind::Sparse,
            ConvSpec::submanifold(3, 3),
            cfg.in_channels,
            c0,
            true,
            true,
            rng,
        );
        let n = cfg.stage_channels.len();
        let stages = (0..n)
            .map(|s| {
                let c = cfg.stage_channels[s];
                let c_next = cfg.stage_channels[(s + 1).min(n - 1)];
                let srbs = (0..cfg.srbs_per_stage)
                    .map(|i| {
                        Srb::new(
                            &format!("backbone3d.stage{s}.srb{i}"),
                            3,
                            SrbConfig {
                                channels: c,
                                kernel: 3,
                            },
                            rng,
                        )
                    })
                    .collect();
                let down = ConvUnit::new(
                    &format!("backbone3d.stage{s}.down"),
                    ConvKind::Sparse,
                    ConvSpec::regular(3, 3, 2, 1),
                    c,
                    c_next,
                    true,
                    true,
                    rng,
                );
                Stage { srbs, down }
            })
            .collect();
        let edb = Edb::new(
            "backbone3d.edb",
            EdbConfig {
                m: cfg.edb_m,
                n: cfg.edb_n,
                channels: cfg.last_channels(),
                ndim: 3,
            },
            rng,
        );
        Backbone3d { stem, stages, edb }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Backbone3dCache)> {
        let rb_stem = submanifold_rulebook(x.grid(), x.coords(), &self.stem.spec)?;
        let (mut h, stem) = self.stem.forward(x, &rb_stem, ctx)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut active_sites = Vec::new();
        for st in &mut self.stages {
            active_sites.push(h.len());
            let rb_subm = submanifold_rulebook(h.grid(), h.coords(), &ConvSpec::submanifold(3, 3))?;
            let (y, srbs) = srb_chain_forward(&mut st.srbs, h, &rb_subm, ctx)?;
            let rb_down = regular_rulebook(y.grid(), y.coords(), &st.down.spec)?;
            let (y2, down) = st.down.forward(&y, &rb_down, ctx)?;
            stages.push(StageCache {
                rb_subm,
                srbs,
                rb_down,
                down,
            });
            h = y2;
        }
        let (out, edb) = self.edb.forward(&h, ctx)?;
        active_sites.push(out.len());
        Ok((
            out,
            Backbone3dCache {
                rb_stem,
                stem,
                stages,
                edb,
                active_sites,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Backbone3dCache, grad: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.edb.backward(&cache.edb, grad)?;
        for (st, c) in self.stages.iter_mut().zip(&cache.stages).rev() {
            g = st.down.backward(&c.down, &c.rb_down, &g)?;
            g = srb_chain_backward(&mut st.srbs, &c.srbs, &c.rb_subm, g)?;
        }
        self.stem.backward(&cache.stem, &cache.rb_stem, &g)
    }
}

impl Parameters<f64> for Backbone3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.stem.visit_params(f);
        for st in &mut self.stages {
            for b in &mut st.srbs {
                b.visit_params(f);
            }
            st.down.visit_params(f);
        }
        self.edb.visit_params(f);
    }
}

/// Output sites of the 3D backbone for the given input sites. The backbone
/// only changes occupancy at its stride-2 convolutions.
pub fn backbone_output_coords(
    grid: crate::sparse::Grid,
    coords: &[Coord],
    levels: u32,
) -> Result<(crate::sparse::Grid, Vec<Coord>)> {
    let spec = ConvSpec::regular(3, 3, 2, 1);
    let mut g = grid;
    let mut c = coords.to_vec();
    for _ in 0..levels {
        let rb = regular_rulebook(g, &c, &spec)?;
        g = rb.out_grid();
        c = rb.out_coords().to_vec();
    }
    Ok((g, c))
}

/// Two z-strided regular convolutions, then a sum over each BEV column.
#[derive(Clone, Debug)]
pub struct BevCompress {
    pub z1: ConvUnit,
    pub z2: ConvUnit,
}

#[derive(Clone, Debug)]
pub struct BevCache {
    rb1: Rulebook,
    c1: ConvUnitCache,
    rb2: Rulebook,
    c2: ConvUnitCache,
    /// For each 3D row after the z convs, its BEV row.
    column_of: Vec<usize>,
}

impl BevCompress {
    pub fn z_spec() -> ConvSpec {
        ConvSpec::per_axis(3, [1, 1, 3], [1, 1, 2], [0, 0, 1])
    }

    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let spec = Self::z_spec();
        BevCompress {
            z1: ConvUnit::new("bev.z1", ConvKind::Sparse, spec, c_in, c_out, true, true, rng),
            z2: ConvUnit::new("bev.z2", ConvKind::Sparse, spec, c_out, c_out, true, true, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, BevCache)> {
        if x.ndim() != 3 {
            return Err(Error::ShapeMismatch("BEV compression expects a 3D tensor".into()));
        }
        let rb1 = regular_rulebook(x.grid(), x.coords(), &self.z1.spec)?;
        let (h, c1) = self.z1.forward(x, &rb1, ctx)?;
        let rb2 = regular_rulebook(h.grid(), h.coords(), &self.z2.spec)?;
        let (h, c2) = self.z2.forward(&h, &rb2, ctx)?;
        let (bev, column_of) = sum_columns(&h);
        Ok((
            bev,
            BevCache {
                rb1,
                c1,
                rb2,
                c2,
                column_of,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BevCache, grad: &[f64]) -> Result<Vec<f64>> {
        let c = self.z2.c_out();
        let mut g3 = Vec::with_capacity(cache.column_of.len() * c);
        for &col in &cache.column_of {
            g3.extend_from_slice(&grad[col * c..(col + 1) * c]);
        }
        let g = self.z2.backward(&cache.c2, &cache.rb2, &g3)?;
        self.z1.backward(&cache.c1, &cache.rb1, &g)
    }
}

impl Parameters<f64> for BevCompress {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_, f64>)) {
        self.z1.visit_params(f);
        self.z2.visit_params(f);
    }
}

/// Sums rows sharing `(batch, x, y)` into a 2D tensor.
pub fn sum_columns(t: &Tensor) -> (Tensor, Vec<usize>) {
    let c = t.channels();
    let mut order: Vec<usize> = (0..t.len()).collect();
    let bev_key = |co: &Coord| Coord::new2(co.batch, co.x(), co.y()).key();
    order.sort_by_key(|&r| (bev_key(&t.coords()[r]), r));
    let mut coords = Vec::new();
    let mut feats: Vec<f64> = Vec::new();
    let mut column_of = vec![0usize; t.len()];
    let mut last = None;
    for &r in &order {
        let k = bev_key(&t.coords()[r]);
        if last != Some(k) {
            last = Some(k);
            coords.push(Coord::from_key(k));
            feats.extend(std::iter::repeat_n(0.0, c));
        }
        let col = coords.len() - 1;
        column_of[r] = col;
        add_into(&mut feats[col * c..(col + 1) * c], t.row(r));
    }
    (
        SparseTensor::from_canonical(t.grid().bev(), coords, feats, c),
        column_of,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Grid, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(grid: Grid, n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = grid.dims();
        let mut set = std::collections::BTreeSet::new();
        while set.len() < n {
            set.insert(Coord::new3(
                0,
                rng.gen_range(0..d[0] as i32),
                rng.gen_range(0..d[1] as i32),
                rng.gen_range(0..d[2] as i32),
            ));
        }
        let feats = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SparseTensor::new(grid, set.into_iter().collect(), feats, c).unwrap()
    }

    fn zero_params<P: Parameters<f64>>(p: &mut P) {
        p.visit_params(&mut |v| {
            if v.name.ends_with(".weight") || v.name.ends_with(".bias") {
                v.value.iter_mut().for_each(|x| *x = 0.0);
            }
        });
    }

    #[test]
    fn srb_with_zero_weights_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_sparse(Grid::new3(6, 6, 4).unwrap(), 30, 4, 2);
        let mut srb = Srb::new("s", 3, SrbConfig { channels: 4, kernel: 3 }, &mut rng);
        zero_params(&mut srb);
        let rb = submanifold_rulebook(x.grid(), x.coords(), &ConvSpec::submanifold(3, 3)).unwrap();
        // Eval mode with default running stats and unit gamma is an identity norm.
        let (y, _) = srb.forward(&x, &rb, &mut Ctx::eval()).unwrap();
        let want = relu(&x);
        for (a, b) in y.features().iter().zip(want.features()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(y.coords(), x.coords());
    }

    #[test]
    fn edb_preserves_sites_and_handles_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EdbConfig { m: 2, n: 1, channels: 3, ndim: 3 };
        let mut edb = Edb::new("e", cfg, &mut rng);
        let x = random_sparse(Grid::new3(8, 8, 4).unwrap(), 40, 3, 4);
        let (y, _) = edb.forward(&x, &mut Ctx::train()).unwrap();
        assert_eq!(y.coords(), x.coords());
        assert!(y.features().iter().all(|v| v.is_finite()));

        let empty = SparseTensor::empty(Grid::new3(8, 8, 4).unwrap(), 3);
        let (y, _) = edb.forward(&empty, &mut Ctx::train()).unwrap();
        assert!(y.is_empty());
    }

    #[test]
    fn backbone_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BackboneConfig {
            in_channels: 4,
            stage_channels: vec![4, 4],
            srbs_per_stage: 1,
            edb_m: 1,
            edb_n: 1,
            bev_channels: 4,
        };
        let mut bb = Backbone3d::new(&cfg, &mut rng);
        let empty = SparseTensor::empty(Grid::new3(16, 16, 8).unwrap(), 4);
        let (y, _) = bb.forward(&empty, &mut Ctx::new(Mode::Train)).unwrap();
        assert!(y.is_empty());
        assert_eq!(y.grid().dims(), [4, 4, 2]);
    }

    #[test]
    fn bev_single_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Grid::new3(4, 4, 4).unwrap();
        let x = SparseTensor::new(g, vec![Coord::new3(0, 2, 3, 1)], vec![1.0, 2.0], 2).unwrap();
        let mut bev = BevCompress::new(2, 3, &mut rng);
        let (y, _) = bev.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(y.len(), 1);
        assert_eq!(y.coords()[0], Coord::new2(0, 2, 3));
        assert_eq!(y.ndim(), 2);
    }

    #[test]
    fn bev_sums_columns_with_identity_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Grid::new3(4, 4, 4).unwrap();
        let x = SparseTensor::new(
            g,
            vec![Coord::new3(0, 1, 1, 0), Coord::new3(0, 1, 1, 3)],
            vec![1.0, 2.0, 10.0, 20.0],
            2,
        )
        .unwrap();
        let mut bev = BevCompress::new(2, 2, &mut rng);
        for unit in [&mut bev.z1, &mut bev.z2] {
            unit.conv.weight.iter_mut().for_each(|w| *w = 0.0);
            // identity at every z tap
            for o in 0..3 {
                unit.conv.weight[o * 4] = 1.0;
                unit.conv.weight[o * 4 + 3] = 1.0;
            }
            unit.relu = false;
        }
        let (y, _) = bev.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(y.len(), 1);
        let want = [11.0, 22.0];
        for k in 0..2 {
            // eval-mode norm with default stats scales by 1/sqrt(1 + eps) twice
            assert!((y.row(0)[k] - want[k]).abs() < 1e-5, "{:?}", y.row(0));
        }
    }

    #[test]
    fn output_coords_helper_matches_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = BackboneConfig {
            in_channels: 2,
            stage_channels: vec![2, 2, 2],
            srbs_per_stage: 1,
            edb_m: 1,
            edb_n: 1,
            bev_channels: 2,
        };
        let mut bb = Backbone3d::new(&cfg, &mut rng);
        let x = random_sparse(Grid::new3(16, 16, 8).unwrap(), 60, 2, 9);
        let (y, _) = bb.forward(&x, &mut Ctx::train()).unwrap();
        let (g, c) = backbone_output_coords(x.grid(), x.coords(), 3).unwrap();
        assert_eq!(g, y.grid());
        assert_eq!(c, y.coords());
    }
}
