//! Network assembly: per-scale VFE encoders, the bottom-up multi-scale
//! aggregation backbone (C1/C2/C3), the top-down feature pyramid
//! (P1/P2/P3) and the detection heads, with the ablation switches from
//! the experiments (scale count, pyramid on/off, heads on all levels vs.
//! finest only, add vs. concat merging).

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, BnStats, Graph, Tensor, TensorId};
use crate::voxel::{VoxelConfig, VoxelSet, POINT_FEATURES};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of voxel scales aggregated in the backbone (1..=3).
    pub n_scales: usize,
    pub fpn_enabled: bool,
    /// Heads on every pyramid level (true) or the finest only (false).
    pub ssd_heads: bool,
    pub merge_mode: MergeMode,
    /// Output widths of the two VFE blocks; the first must be even (half
    /// comes from the linear layer, half from the broadcast max).
    pub vfe_channels: Vec<usize>,
    /// Anchors per grid cell (yaw 0 and pi/2).
    pub anchors_per_cell: usize,
    pub n_classes: usize,
    /// Pyramid output width; also the lateral width in add mode.
    pub fpn_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_scales: 2,
            fpn_enabled: true,
            ssd_heads: true,
            merge_mode: MergeMode::Concat,
            vfe_channels: vec![64, 64],
            anchors_per_cell: 2,
            n_classes: 1,
            fpn_channels: 128,
            bn_momentum: 0.9,
            bn_eps: 1e-3,
        }
    }
}

const BLOCK_CHANNELS: [usize; 3] = [64, 128, 256];
const BLOCK_DEPTHS: [usize; 3] = [3, 5, 5];

impl NetworkConfig {
    pub fn validate(&self, vcfg: &VoxelConfig) -> Result<(), String> {
        if !(1..=3).contains(&self.n_scales) {
            return Err(format!("n_scales must be 1..=3, got {}", self.n_scales));
        }
        if self.n_scales > vcfg.n_scales() {
            return Err(format!(
                "n_scales {} exceeds the {} configured voxel scales",
                self.n_scales,
                vcfg.n_scales()
            ));
        }
        if self.vfe_channels.len() != 2 {
            return Err("exactly two VFE blocks are supported".into());
        }
        if self.vfe_channels[0] % 2 != 0 {
            return Err("first VFE width must be even (linear + max halves)".into());
        }
        if self.anchors_per_cell == 0 || self.n_classes == 0 {
            return Err("anchors_per_cell and n_classes must be positive".into());
        }
        Ok(())
    }
}

/// Expected feature-map shapes implied by the config, computed by stride
/// arithmetic alone. Construction runs this as a hard audit; tests use it
/// as the shape oracle for the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAudit {
    /// (channels, ny, nx) of the scattered pseudo-image per scale.
    pub pseudo: Vec<(usize, usize, usize)>,
    /// (channels, ny, nx) of C1, C2, C3.
    pub c: [(usize, usize, usize); 3],
    /// (channels, ny, nx) of the maps the heads read, finest first.
    pub levels: Vec<(usize, usize, usize)>,
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn audit_shapes(cfg: &NetworkConfig, vcfg: &VoxelConfig) -> Result<ShapeAudit, String> {
    cfg.validate(vcfg)?;
    let vfe_out = cfg.vfe_channels[1];
    let mut pseudo = Vec::new();
    for s in 0..cfg.n_scales {
        let (nx, ny) = vcfg.grid_dims(s);
        pseudo.push((vfe_out, ny, nx));
    }
    let mut c = [(0, 0, 0); 3];
    let (_, mut ny, mut nx) = pseudo[0];
    for b in 0..3 {
        ny = conv_out(ny, 3, 2, 1);
        nx = conv_out(nx, 3, 2, 1);
        c[b] = (BLOCK_CHANNELS[b], ny, nx);
        // each downsampled output must line up with the next-scale map
        if b + 1 < cfg.n_scales {
            let (_, py, px) = pseudo[b + 1];
            if (py, px) != (ny, nx) {
                return Err(format!(
                    "junction {}: block output ({ny}, {nx}) vs scale-{} map ({py}, {px})",
                    b + 1,
                    b + 1
                ));
            }
        }
    }
    let levels = if cfg.fpn_enabled {
        let n = if cfg.ssd_heads { 3 } else { 1 };
        (0..n).map(|i| (cfg.fpn_channels, c[i].1, c[i].2)).collect()
    } else if cfg.ssd_heads {
        c.to_vec()
    } else {
        vec![c[0]]
    };
    Ok(ShapeAudit { pseudo, c: [c[0], c[1], c[2]], levels })
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    pub bn: HashMap<String, BnStats>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, t: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.tensors.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn add_bn(&mut self, name: &str, channels: usize, momentum: f64, eps: f64) {
        self.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        self.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        let stats = BnStats::new(channels, momentum as Real, eps as Real);
        assert!(self.bn.insert(name.to_string(), stats).is_none(), "duplicate bn {name}");
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Persist parameters and BN running statistics in one checkpoint.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut entries: Vec<(String, Tensor)> =
            self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect();
        for (name, stats) in &self.bn {
            let c = stats.running_mean.len();
            entries.push((
                format!("{name}.running_mean"),
                Tensor::from_vec(&[c], stats.running_mean.clone()),
            ));
            entries.push((
                format!("{name}.running_var"),
                Tensor::from_vec(&[c], stats.running_var.clone()),
            ));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        write_checkpoint(path, &entries)
    }

    /// Load a checkpoint into an already-constructed store; shapes must
    /// match and every stored entry must be known.
    pub fn load(&mut self, path: &Path) -> std::io::Result<()> {
        let entries = read_checkpoint(path)?;
        for (name, t) in entries {
            if let Some(base) = name.strip_suffix(".running_mean") {
                let stats = self.bn.get_mut(base).unwrap_or_else(|| panic!("unknown bn {base}"));
                assert_eq!(stats.running_mean.len(), t.numel());
                stats.running_mean = t.data;
            } else if let Some(base) = name.strip_suffix(".running_var") {
                let stats = self.bn.get_mut(base).unwrap_or_else(|| panic!("unknown bn {base}"));
                assert_eq!(stats.running_var.len(), t.numel());
                stats.running_var = t.data;
            } else {
                let i = self.idx(&name);
                assert_eq!(self.tensors[i].shape, t.shape, "shape mismatch loading {name}");
                self.tensors[i] = t;
            }
        }
        Ok(())
    }
}

/// One detection head's raw outputs. Channel layouts, with A anchors per
/// cell and a = anchor index within the cell:
/// cls channel = a * n_classes + class, box channel = a * 7 + residual
/// (x, y, z, w, l, h, theta), dir channel = a * 2 + direction bit.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub cls: TensorId,
    pub boxr: TensorId,
    pub dir: TensorId,
    pub ny: usize,
    pub nx: usize,
    /// Downsampling factor relative to the finest voxel grid.
    pub stride_cells: usize,
}

/// A completed forward pass: the graph, head outputs per level (finest
/// first), and the graph leaf of every parameter for gradient readout.
pub struct Forward {
    pub graph: Graph,
    pub levels: Vec<LevelOutput>,
    pub param_ids: HashMap<String, TensorId>,
}

impl Forward {
    /// Run backward from per-head seed gradients, then collect parameter
    /// gradients aligned with the store's parameter order.
    pub fn grads(&mut self, seeds: Vec<(TensorId, Tensor)>, store: &ParamStore) -> Vec<Option<Tensor>> {
        self.graph.backward(seeds);
        store
            .names
            .iter()
            .map(|n| self.graph.grad(self.param_ids[n]).cloned())
            .collect()
    }
}

pub struct Network {
    pub cfg: NetworkConfig,
    pub vcfg: VoxelConfig,
    pub params: ParamStore,
    pub audit: ShapeAudit,
}

struct Ctx {
    g: Graph,
    ids: HashMap<String, TensorId>,
}

impl Ctx {
    fn p(&mut self, name: &str) -> TensorId {
        self.ids[name]
    }
    fn zero_bias(&mut self, c: usize) -> TensorId {
        self.g.leaf(Tensor::zeros(&[c]))
    }
}

impl Network {
    /// Construct with randomly initialized parameters. Panics if the
    /// config and voxel grids do not produce conformant shapes.
    pub fn new<R: Rng>(cfg: NetworkConfig, vcfg: VoxelConfig, rng: &mut R) -> Self {
        let audit = audit_shapes(&cfg, &vcfg).expect("network shape audit failed");
        let mut params = ParamStore::default();
        let (mom, eps) = (cfg.bn_momentum, cfg.bn_eps);

        // VFE encoders, one per scale
        for s in 0..cfg.n_scales {
            let c1 = cfg.vfe_channels[0] / 2;
            let c2 = cfg.vfe_channels[1];
            params.add(
                &format!("vfe{s}.fc1.w"),
                Tensor::rand_fan_in(&[POINT_FEATURES, c1], POINT_FEATURES, rng),
            );
            params.add_bn(&format!("vfe{s}.bn1"), c1, mom, eps);
            params.add(
                &format!("vfe{s}.fc2.w"),
                Tensor::rand_fan_in(&[cfg.vfe_channels[0], c2], cfg.vfe_channels[0], rng),
            );
            params.add_bn(&format!("vfe{s}.bn2"), c2, mom, eps);
        }

        // backbone blocks; input widths account for the concat junctions
        let vfe_out = cfg.vfe_channels[1];
        let mut cin = vfe_out;
        for b in 0..3 {
            let cout = BLOCK_CHANNELS[b];
            for l in 0..BLOCK_DEPTHS[b] {
                let ci = if l == 0 { cin } else { cout };
                params.add(
                    &format!("block{}.conv{l}.w", b + 1),
                    Tensor::rand_fan_in(&[cout, ci, 3, 3], ci * 9, rng),
                );
                params.add_bn(&format!("block{}.bn{l}", b + 1), cout, mom, eps);
            }
            cin = cout;
            if b + 1 < cfg.n_scales {
                cin += vfe_out;
            }
        }

        // FPN laterals and post-convs
        if cfg.fpn_enabled {
            let latc: Vec<usize> = (0..3)
                .map(|i| match cfg.merge_mode {
                    MergeMode::Add => cfg.fpn_channels,
                    MergeMode::Concat => BLOCK_CHANNELS[i],
                })
                .collect();
            for i in 0..3 {
                params.add(
                    &format!("fpn.lat{}.w", i + 1),
                    Tensor::rand_fan_in(&[latc[i], BLOCK_CHANNELS[i], 1, 1], BLOCK_CHANNELS[i], rng),
                );
                let post_in = if i == 2 {
                    latc[2]
                } else {
                    match cfg.merge_mode {
                        MergeMode::Add => cfg.fpn_channels,
                        MergeMode::Concat => cfg.fpn_channels + latc[i],
                    }
                };
                params.add(
                    &format!("fpn.post{}.w", i + 1),
                    Tensor::rand_fan_in(&[cfg.fpn_channels, post_in, 3, 3], post_in * 9, rng),
                );
                params.add_bn(&format!("fpn.postbn{}", i + 1), cfg.fpn_channels, mom, eps);
            }
        }

        // heads: 1x1 conv triple per level, biases kept (no BN after)
        let (a, k) = (cfg.anchors_per_cell, cfg.n_classes);
        for (i, &(cin, _, _)) in audit.levels.iter().enumerate() {
            let mk = |co: usize, rng: &mut R| Tensor::rand_fan_in(&[co, cin, 1, 1], cin, rng);
            params.add(&format!("head{i}.cls.w"), mk(a * k, rng));
            // rare-positive prior: start predictions near p = 0.01
            params.add(&format!("head{i}.cls.b"), Tensor::full(&[a * k], -(99f64.ln()) as Real));
            params.add(&format!("head{i}.box.w"), mk(a * 7, rng));
            params.add(&format!("head{i}.box.b"), Tensor::zeros(&[a * 7]));
            params.add(&format!("head{i}.dir.w"), mk(a * 2, rng));
            params.add(&format!("head{i}.dir.b"), Tensor::zeros(&[a * 2]));
        }

        Network { cfg, vcfg, params, audit }
    }

    fn conv_bn_relu(
        &mut self,
        ctx: &mut Ctx,
        x: TensorId,
        conv: &str,
        bn: &str,
        stride: usize,
        training: bool,
    ) -> TensorId {
        let w = ctx.p(conv);
        let cout = ctx.g.value(w).shape[0];
        let b = ctx.zero_bias(cout);
        let y = ctx.g.conv2d(x, w, b, stride, 1);
        let (gamma, beta) = (ctx.p(&format!("{bn}.gamma")), ctx.p(&format!("{bn}.beta")));
        let stats = self.params.bn.get_mut(bn).unwrap();
        let y = ctx.g.batchnorm2d(y, gamma, beta, stats, training);
        ctx.g.relu(y)
    }

    fn vfe_encode(&mut self, ctx: &mut Ctx, s: usize, vs: &VoxelSet, training: bool) -> TensorId {
        let k = vs.n_voxels();
        let n = vs.n_max;
        let x = ctx.g.leaf(Tensor::from_vec(&[k, n, POINT_FEATURES], vs.features.clone()));

        // block 1: pointwise linear, BN over valid slots, relu, masked
        // max, broadcast-concat back onto each point
        let c1 = self.cfg.vfe_channels[0] / 2;
        let flat = ctx.g.reshape(x, &[k * n, POINT_FEATURES]);
        let b = ctx.zero_bias(c1);
        let w = ctx.p(&format!("vfe{s}.fc1.w"));
        let h = ctx.g.linear(flat, w, b);
        let h = ctx.g.reshape(h, &[k, n, c1]);
        let bn = format!("vfe{s}.bn1");
        let (gamma, beta) = (ctx.p(&format!("{bn}.gamma")), ctx.p(&format!("{bn}.beta")));
        let stats = self.params.bn.get_mut(&bn).unwrap();
        let h = ctx.g.batchnorm_points(h, gamma, beta, &vs.counts, stats, training);
        let h = ctx.g.relu(h);
        let vmax = ctx.g.masked_max_points(h, &vs.counts);
        let bmax = ctx.g.broadcast_points(vmax, n);
        let h = ctx.g.concat(&[h, bmax], 2);

        // block 2: linear to the final width, BN, relu, masked max
        let c2 = self.cfg.vfe_channels[1];
        let flat = ctx.g.reshape(h, &[k * n, self.cfg.vfe_channels[0]]);
        let b = ctx.zero_bias(c2);
        let w = ctx.p(&format!("vfe{s}.fc2.w"));
        let h = ctx.g.linear(flat, w, b);
        let h = ctx.g.reshape(h, &[k, n, c2]);
        let bn = format!("vfe{s}.bn2");
        let (gamma, beta) = (ctx.p(&format!("{bn}.gamma")), ctx.p(&format!("{bn}.beta")));
        let stats = self.params.bn.get_mut(&bn).unwrap();
        let h = ctx.g.batchnorm_points(h, gamma, beta, &vs.counts, stats, training);
        let h = ctx.g.relu(h);
        let feats = ctx.g.masked_max_points(h, &vs.counts);

        let (nx, ny) = vs.grid_dims;
        ctx.g.scatter(feats, &vs.coords, ny, nx)
    }

    /// Forward one frame. `voxels` must hold at least n_scales sets,
    /// finest first, voxelized with this network's VoxelConfig.
    pub fn forward(&mut self, voxels: &[VoxelSet], training: bool) -> Forward {
        assert!(voxels.len() >= self.cfg.n_scales, "not enough voxel scales");
        let mut ctx = Ctx { g: Graph::new(), ids: HashMap::new() };
        // leaf every parameter up front so gradients can be read back
        for (name, t) in self.params.names.clone().iter().zip(self.params.tensors.clone()) {
            let id = ctx.g.leaf(t);
            ctx.ids.insert(name.clone(), id);
        }
        let param_ids = ctx.ids.clone();

        let mut pseudo = Vec::new();
        for s in 0..self.cfg.n_scales {
            let m = self.vfe_encode(&mut ctx, s, &voxels[s], training);
            assert_eq!(
                ctx.g.value(m).shape,
                vec![self.audit.pseudo[s].0, self.audit.pseudo[s].1, self.audit.pseudo[s].2],
                "pseudo-image shape mismatch at scale {s}"
            );
            pseudo.push(m);
        }

        // bottom-up aggregation
        let mut c_maps = Vec::with_capacity(3);
        let mut x = pseudo[0];
        for b in 0..3 {
            for l in 0..BLOCK_DEPTHS[b] {
                let stride = if l == 0 { 2 } else { 1 };
                x = self.conv_bn_relu(
                    &mut ctx,
                    x,
                    &format!("block{}.conv{l}.w", b + 1),
                    &format!("block{}.bn{l}", b + 1),
                    stride,
                    training,
                );
            }
            c_maps.push(x);
            if b + 1 < self.cfg.n_scales {
                x = ctx.g.concat(&[x, pseudo[b + 1]], 0);
            }
        }
        for (b, &m) in c_maps.iter().enumerate() {
            let (c, ny, nx) = self.audit.c[b];
            assert_eq!(ctx.g.value(m).shape, vec![c, ny, nx], "C{} shape mismatch", b + 1);
        }

        // top-down pyramid
        let head_inputs: Vec<TensorId> = if self.cfg.fpn_enabled {
            let lats: Vec<TensorId> = (0..3)
                .map(|i| {
                    let w = ctx.p(&format!("fpn.lat{}.w", i + 1));
                    let cout = ctx.g.value(w).shape[0];
                    let b = ctx.zero_bias(cout);
                    ctx.g.conv2d(c_maps[i], w, b, 1, 0)
                })
                .collect();
            let mut p = vec![TensorId(0); 3];
            for i in (0..3).rev() {
                let merged = if i == 2 {
                    lats[2]
                } else {
                    let up = ctx.g.upsample2x(p[i + 1]);
                    let (_, ny, nx) = self.audit.c[i];
                    let up = ctx.g.crop_hw(up, ny, nx);
                    match self.cfg.merge_mode {
                        MergeMode::Add => ctx.g.add(up, lats[i]),
                        MergeMode::Concat => ctx.g.concat(&[up, lats[i]], 0),
                    }
                };
                p[i] = self.conv_bn_relu(
                    &mut ctx,
                    merged,
                    &format!("fpn.post{}.w", i + 1),
                    &format!("fpn.postbn{}", i + 1),
                    1,
                    training,
                );
            }
            p
        } else {
            c_maps.clone()
        };
        let n_levels = self.audit.levels.len();

        let mut levels = Vec::with_capacity(n_levels);
        for (i, &m) in head_inputs.iter().take(n_levels).enumerate() {
            let (c, ny, nx) = self.audit.levels[i];
            assert_eq!(ctx.g.value(m).shape, vec![c, ny, nx], "level {i} shape mismatch");
            let head = |kind: &str, ctx: &mut Ctx| {
                let w = ctx.p(&format!("head{i}.{kind}.w"));
                let b = ctx.p(&format!("head{i}.{kind}.b"));
                ctx.g.conv2d(m, w, b, 1, 0)
            };
            let cls = head("cls", &mut ctx);
            let boxr = head("box", &mut ctx);
            let dir = head("dir", &mut ctx);
            levels.push(LevelOutput { cls, boxr, dir, ny, nx, stride_cells: 2 << i });
        }

        Forward { graph: ctx.g, levels, param_ids }
    }
}
