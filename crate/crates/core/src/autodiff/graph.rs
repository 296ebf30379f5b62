use ndarray::ArrayView2;

use super::tensor::Tensor;
use crate::Real;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

/// Running batch-norm statistics, owned by the parameter store (they are
/// state, not trained parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub eps: Real,
}

impl BnStats {
    pub fn new(channels: usize, momentum: Real, eps: Real) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BnLayout {
    /// (C, H, W): statistics per channel over H*W.
    Chw,
    /// (K, N, C): statistics per channel over valid (k, n) slots.
    Knc,
}

enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    Upsample2x { x: usize },
    CropHw { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    Add { a: usize, b: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape { x: usize },
    MaskedMax { x: usize, argmax: Vec<usize> },
    BroadcastPoints { x: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        layout: BnLayout,
        counts: Vec<usize>,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        training: bool,
    },
    Scatter { feats: usize, coords: Vec<(usize, usize)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward pass: append-only operation tape, reverse-order
/// backward. Node indices are already a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn matmul(m: usize, k: usize, n: usize, a: ArrayView2<Real>, b: ArrayView2<Real>) -> Vec<Real> {
    debug_assert_eq!(a.shape(), &[m, k]);
    debug_assert_eq!(b.shape(), &[k, n]);
    // iterate in logical order: dot may hand back a column-major array
    // (e.g. when an operand is a transposed view), so the raw vec order
    // is not trustworthy
    a.dot(&b).into_iter().collect()
}

fn view2(data: &[Real], rows: usize, cols: usize) -> ArrayView2<'_, Real> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape mismatch")
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// y = x W + b for x: (B, Cin), W: (Cin, Cout), b: (Cout).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xt.rank(), 2, "linear input must be 2-d");
        let (bsz, cin) = (xt.shape[0], xt.shape[1]);
        assert_eq!(wt.shape, vec![cin, wt.shape[1]], "linear weight shape mismatch");
        let cout = wt.shape[1];
        assert_eq!(bt.shape, vec![cout], "linear bias shape mismatch");
        let mut y = matmul(bsz, cin, cout, view2(&xt.data, bsz, cin), view2(&wt.data, cin, cout));
        for r in 0..bsz {
            for c in 0..cout {
                y[r * cout + c] += bt.data[c];
            }
        }
        self.push(Tensor::from_vec(&[bsz, cout], y), Op::Linear { x: x.0, w: w.0, b: b.0 })
    }

    /// Cross-correlation conv2d: x (Cin, H, W), w (Cout, Cin, k, k), b (Cout).
    /// Output size floor((H + 2p - k)/s) + 1, matching the standard
    /// framework convention (496 -> 248 for k=3, s=2, p=1).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> TensorId {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xt.rank(), 3, "conv2d input must be (C, H, W)");
        assert_eq!(wt.rank(), 4, "conv2d kernel must be (Cout, Cin, k, k)");
        let (cin, h, wd) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let (cout, k) = (wt.shape[0], wt.shape[2]);
        assert_eq!(wt.shape[1], cin, "conv2d kernel Cin mismatch");
        assert_eq!(wt.shape[2], wt.shape[3], "conv2d kernel must be square");
        assert_eq!(bt.shape, vec![cout]);
        assert!(
            h + 2 * pad >= k && wd + 2 * pad >= k,
            "conv2d input ({h}, {wd}) too small for k={k}, p={pad}"
        );
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = cin * k * k;
        let total = ho * wo;
        let mut y = vec![0.0; cout * total];
        let chunk = conv_chunk_cols(kk);
        let mut col = vec![0.0; kk * chunk];
        let mut p0 = 0;
        while p0 < total {
            let p1 = (p0 + chunk).min(total);
            let cols = p1 - p0;
            im2col(&xt.data, cin, h, wd, k, stride, pad, wo, p0, p1, &mut col);
            let yc = matmul(cout, kk, cols, view2(&wt.data, cout, kk), view2(&col[..kk * cols], kk, cols));
            for co in 0..cout {
                let bias = bt.data[co];
                for (j, &v) in yc[co * cols..(co + 1) * cols].iter().enumerate() {
                    y[co * total + p0 + j] = v + bias;
                }
            }
            p0 = p1;
        }
        self.push(
            Tensor::from_vec(&[cout, ho, wo], y),
            Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// Nearest-neighbor 2x upsampling of (C, H, W).
    pub fn upsample2x(&mut self, x: TensorId) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.rank(), 3);
        let (c, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let mut y = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for iy in 0..2 * h {
                for ix in 0..2 * w {
                    y[(ci * 2 * h + iy) * 2 * w + ix] = xt.data[(ci * h + iy / 2) * w + ix / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[c, 2 * h, 2 * w], y), Op::Upsample2x { x: x.0 })
    }

    /// Keep the first `h` rows and `w` columns of (C, H, W).
    pub fn crop_hw(&mut self, x: TensorId, h: usize, w: usize) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.rank(), 3);
        let (c, h0, w0) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        assert!(h <= h0 && w <= w0, "crop target larger than input");
        if h == h0 && w == w0 {
            return x;
        }
        let mut y = vec![0.0; c * h * w];
        for ci in 0..c {
            for iy in 0..h {
                let src = (ci * h0 + iy) * w0;
                let dst = (ci * h + iy) * w;
                y[dst..dst + w].copy_from_slice(&xt.data[src..src + w]);
            }
        }
        self.push(Tensor::from_vec(&[c, h, w], y), Op::CropHw { x: x.0 })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let xt = self.value(x);
        let y = xt.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = xt.shape.clone();
        self.push(Tensor::from_vec(&shape, y), Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let xt = self.value(x);
        let y = xt.data.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = xt.shape.clone();
        self.push(Tensor::from_vec(&shape, y), Op::Sigmoid { x: x.0 })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let xt = self.value(x);
        let last = *xt.shape.last().expect("softmax needs rank >= 1");
        let mut y = xt.data.clone();
        for row in y.chunks_mut(last) {
            let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = xt.shape.clone();
        self.push(Tensor::from_vec(&shape, y), Op::Softmax { x: x.0 })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.shape, bt.shape, "elementwise add shape mismatch");
        let y = at.data.iter().zip(&bt.data).map(|(&u, &v)| u + v).collect();
        let shape = at.shape.clone();
        self.push(Tensor::from_vec(&shape, y), Op::Add { a: a.0, b: b.0 })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> TensorId {
        assert!(!inputs.is_empty());
        let first = self.value(inputs[0]).shape.clone();
        let mut total_axis = 0;
        for &id in inputs {
            let s = &self.value(id).shape;
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat non-axis dim mismatch at {d}");
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let mut y = vec![0.0; outer * total_axis * inner];
        for o in 0..outer {
            let mut off = 0;
            for &id in inputs {
                let t = self.value(id);
                let ax = t.shape[axis];
                let src = o * ax * inner;
                let dst = (o * total_axis + off) * inner;
                y[dst..dst + ax * inner].copy_from_slice(&t.data[src..src + ax * inner]);
                off += ax;
            }
        }
        self.push(
            Tensor::from_vec(&shape, y),
            Op::Concat { inputs: inputs.iter().map(|t| t.0).collect(), axis },
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.numel(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let y = Tensor::from_vec(shape, xt.data.clone());
        self.push(y, Op::Reshape { x: x.0 })
    }

    /// Max over the points axis of (K, N, C) honoring per-voxel counts;
    /// padded slots (n >= counts[k]) are ignored. counts[k] must be >= 1.
    pub fn masked_max_points(&mut self, x: TensorId, counts: &[usize]) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.rank(), 3, "masked max input must be (K, N, C)");
        let (kn, n, c) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        assert_eq!(counts.len(), kn);
        assert!(counts.iter().all(|&cnt| cnt >= 1 && cnt <= n), "voxel count out of [1, N]");
        let mut y = vec![0.0; kn * c];
        let mut argmax = vec![0usize; kn * c];
        for ki in 0..kn {
            for ci in 0..c {
                let mut best = Real::NEG_INFINITY;
                let mut best_n = 0;
                for ni in 0..counts[ki] {
                    let v = xt.data[(ki * n + ni) * c + ci];
                    if v > best {
                        best = v;
                        best_n = ni;
                    }
                }
                y[ki * c + ci] = best;
                argmax[ki * c + ci] = best_n;
            }
        }
        self.push(Tensor::from_vec(&[kn, c], y), Op::MaskedMax { x: x.0, argmax })
    }

    /// Broadcast (K, C) to (K, N, C) by repetition along the points axis.
    pub fn broadcast_points(&mut self, x: TensorId, n: usize) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.rank(), 2);
        let (kn, c) = (xt.shape[0], xt.shape[1]);
        let mut y = vec![0.0; kn * n * c];
        for ki in 0..kn {
            let row = &xt.data[ki * c..(ki + 1) * c];
            for ni in 0..n {
                y[(ki * n + ni) * c..(ki * n + ni + 1) * c].copy_from_slice(row);
            }
        }
        self.push(Tensor::from_vec(&[kn, n, c], y), Op::BroadcastPoints { x: x.0 })
    }

    /// Batch norm over the spatial positions of (C, H, W).
    pub fn batchnorm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        training: bool,
    ) -> TensorId {
        let c = self.value(x).shape[0];
        assert_eq!(self.value(x).rank(), 3);
        self.batchnorm_impl(x, gamma, beta, stats, training, BnLayout::Chw, vec![], c)
    }

    /// Batch norm over the valid point slots of (K, N, C), per channel.
    pub fn batchnorm_points(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        counts: &[usize],
        stats: &mut BnStats,
        training: bool,
    ) -> TensorId {
        let xt = self.value(x);
        assert_eq!(xt.rank(), 3);
        assert_eq!(counts.len(), xt.shape[0]);
        let c = xt.shape[2];
        self.batchnorm_impl(x, gamma, beta, stats, training, BnLayout::Knc, counts.to_vec(), c)
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_impl(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        training: bool,
        layout: BnLayout,
        counts: Vec<usize>,
        c: usize,
    ) -> TensorId {
        assert_eq!(self.value(gamma).shape, vec![c]);
        assert_eq!(self.value(beta).shape, vec![c]);
        assert_eq!(stats.running_mean.len(), c, "batchnorm stats channel mismatch");
        let xt = self.value(x);
        let shape = xt.shape.clone();
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            let mut m = vec![0usize; c];
            bn_for_each(&shape, layout, &counts, |idx, ch| {
                mean[ch] += xt.data[idx];
                m[ch] += 1;
            });
            for ch in 0..c {
                mean[ch] /= (m[ch].max(1)) as Real;
            }
            bn_for_each(&shape, layout, &counts, |idx, ch| {
                let d = xt.data[idx] - mean[ch];
                var[ch] += d * d;
            });
            for ch in 0..c {
                var[ch] /= (m[ch].max(1)) as Real;
            }
            for ch in 0..c {
                stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (1.0 - stats.momentum) * mean[ch];
                stats.running_var[ch] = stats.momentum * stats.running_var[ch] + (1.0 - stats.momentum) * var[ch];
            }
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / (v + stats.eps).sqrt()).collect();
        let xt = self.value(x);
        let (gt, bt) = (self.value(gamma).data.clone(), self.value(beta).data.clone());
        // only the valid slots are normalized; padding slots are zeroed so
        // they carry no gradient path through the batch statistics
        let mut valid = vec![false; xt.numel()];
        bn_for_each(&shape, layout, &counts, |idx, _| valid[idx] = true);
        let mut xhat = vec![0.0; xt.numel()];
        let mut y = vec![0.0; xt.numel()];
        let ch_of = bn_channel_fn(&shape, layout);
        for idx in 0..xt.numel() {
            if !valid[idx] {
                continue;
            }
            let ch = ch_of(idx);
            xhat[idx] = (xt.data[idx] - mean[ch]) * inv_std[ch];
            y[idx] = gt[ch] * xhat[idx] + bt[ch];
        }
        self.push(
            Tensor::from_vec(&shape, y),
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, layout, counts, xhat, inv_std, training },
        )
    }

    /// Scatter voxel features (K, C) to a dense pseudo-image (C, ny, nx)
    /// at the given (ix, iy) grid coordinates. Coordinates must be unique
    /// and in-grid.
    pub fn scatter(&mut self, feats: TensorId, coords: &[(usize, usize)], ny: usize, nx: usize) -> TensorId {
        let ft = self.value(feats);
        assert_eq!(ft.rank(), 2);
        let (kn, c) = (ft.shape[0], ft.shape[1]);
        assert_eq!(coords.len(), kn, "one coordinate per voxel required");
        let mut seen = vec![false; ny * nx];
        let mut y = vec![0.0; c * ny * nx];
        for (ki, &(ix, iy)) in coords.iter().enumerate() {
            assert!(ix < nx && iy < ny, "scatter coordinate ({ix}, {iy}) out of grid ({nx}, {ny})");
            assert!(!seen[iy * nx + ix], "duplicate scatter coordinate ({ix}, {iy})");
            seen[iy * nx + ix] = true;
            for ci in 0..c {
                y[(ci * ny + iy) * nx + ix] = ft.data[ki * c + ci];
            }
        }
        self.push(
            Tensor::from_vec(&[c, ny, nx], y),
            Op::Scatter { feats: feats.0, coords: coords.to_vec() },
        )
    }

    /// Reverse sweep from the given seed gradients. Multiple seeds allow
    /// injecting loss gradients at several head outputs at once.
    pub fn backward(&mut self, seeds: Vec<(TensorId, Tensor)>) {
        for (id, seed) in seeds {
            assert_eq!(seed.shape, self.nodes[id.0].value.shape, "seed gradient shape mismatch");
            self.accumulate(id.0, seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let gout = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let contributions = self.backward_node(i, &gout);
            self.grads[i] = Some(gout);
            for (id, g) in contributions {
                self.accumulate(id, g);
            }
        }
    }

    fn accumulate(&mut self, id: usize, g: Tensor) {
        match &mut self.grads[id] {
            Some(acc) => {
                assert_eq!(acc.shape, g.shape);
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, gout: &Tensor) -> Vec<(usize, Tensor)> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (bsz, cin) = (xt.shape[0], xt.shape[1]);
                let cout = wt.shape[1];
                let gy = view2(&gout.data, bsz, cout);
                let dx = matmul(bsz, cout, cin, gy, view2(&wt.data, cin, cout).reversed_axes());
                let dw = matmul(cin, bsz, cout, view2(&xt.data, bsz, cin).reversed_axes(), gy);
                let mut db = vec![0.0; cout];
                for r in 0..bsz {
                    for c in 0..cout {
                        db[c] += gout.data[r * cout + c];
                    }
                }
                vec![
                    (*x, Tensor::from_vec(&[bsz, cin], dx)),
                    (*w, Tensor::from_vec(&[cin, cout], dw)),
                    (*b, Tensor::from_vec(&[cout], db)),
                ]
            }
            Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(val(*x), val(*w), gout, *stride, *pad, *x, *w, *b),
            Op::Upsample2x { x } => {
                let xt = val(*x);
                let (c, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let mut dx = vec![0.0; xt.numel()];
                for ci in 0..c {
                    for iy in 0..2 * h {
                        for ix in 0..2 * w {
                            dx[(ci * h + iy / 2) * w + ix / 2] += gout.data[(ci * 2 * h + iy) * 2 * w + ix];
                        }
                    }
                }
                vec![(*x, Tensor::from_vec(&xt.shape, dx))]
            }
            Op::CropHw { x } => {
                let xt = val(*x);
                let (c, h0, w0) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let (h, w) = (gout.shape[1], gout.shape[2]);
                let mut dx = vec![0.0; xt.numel()];
                for ci in 0..c {
                    for iy in 0..h {
                        let dst = (ci * h0 + iy) * w0;
                        let src = (ci * h + iy) * w;
                        dx[dst..dst + w].copy_from_slice(&gout.data[src..src + w]);
                    }
                }
                vec![(*x, Tensor::from_vec(&xt.shape, dx))]
            }
            Op::Relu { x } => {
                let xt = val(*x);
                let dx = xt.data.iter().zip(&gout.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                vec![(*x, Tensor::from_vec(&xt.shape, dx))]
            }
            Op::Sigmoid { x } => {
                let yt = &self.nodes[i].value;
                let dx = yt.data.iter().zip(&gout.data).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                vec![(*x, Tensor::from_vec(&yt.shape, dx))]
            }
            Op::Softmax { x } => {
                let yt = &self.nodes[i].value;
                let last = *yt.shape.last().unwrap();
                let mut dx = vec![0.0; yt.numel()];
                for (row, (yrow, grow)) in yt.data.chunks(last).zip(gout.data.chunks(last)).enumerate() {
                    let dot: Real = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                    for j in 0..last {
                        dx[row * last + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*x, Tensor::from_vec(&yt.shape, dx))]
            }
            Op::Add { a, b } => vec![(*a, gout.clone()), (*b, gout.clone())],
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let out_shape = &self.nodes[i].value.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let mut grads = Vec::with_capacity(inputs.len());
                let mut off = 0;
                for &id in inputs {
                    let s = &val(id).shape;
                    let ax = s[axis];
                    let mut dx = vec![0.0; val(id).numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + off) * inner;
                        let dst = o * ax * inner;
                        dx[dst..dst + ax * inner].copy_from_slice(&gout.data[src..src + ax * inner]);
                    }
                    grads.push((id, Tensor::from_vec(s, dx)));
                    off += ax;
                }
                grads
            }
            Op::Reshape { x } => {
                let xt = val(*x);
                vec![(*x, Tensor::from_vec(&xt.shape, gout.data.clone()))]
            }
            Op::MaskedMax { x, argmax } => {
                let xt = val(*x);
                let (_kn, n, c) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let mut dx = vec![0.0; xt.numel()];
                for (kc, &ni) in argmax.iter().enumerate() {
                    let (ki, ci) = (kc / c, kc % c);
                    dx[(ki * n + ni) * c + ci] += gout.data[kc];
                }
                vec![(*x, Tensor::from_vec(&xt.shape, dx))]
            }
            Op::BroadcastPoints { x } => {
                let xt = val(*x);
                let (kn, c) = (xt.shape[0], xt.shape[1]);
                let n = gout.shape[1];
                let mut dx = vec![0.0; kn * c];
                for ki in 0..kn {
                    for ni in 0..n {
                        for ci in 0..c {
                            dx[ki * c + ci] += gout.data[(ki * n + ni) * c + ci];
                        }
                    }
                }
                vec![(*x, Tensor::from_vec(&[kn, c], dx))]
            }
            Op::BatchNorm { x, gamma, beta, layout, counts, xhat, inv_std, training } => {
                let xt = val(*x);
                let gt = &val(*gamma).data;
                let c = gt.len();
                let shape = &xt.shape;
                let ch_of = bn_channel_fn(shape, *layout);
                let mut valid = vec![false; xt.numel()];
                bn_for_each(shape, *layout, counts, |idx, _| valid[idx] = true);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for idx in 0..xt.numel() {
                    if !valid[idx] {
                        continue;
                    }
                    let ch = ch_of(idx);
                    dgamma[ch] += gout.data[idx] * xhat[idx];
                    dbeta[ch] += gout.data[idx];
                }
                // padding slots were zeroed in the forward pass and get no
                // gradient; valid slots use the full (training) or frozen
                // (eval) statistics formula
                let mut dx = vec![0.0; xt.numel()];
                if *training {
                    let mut sum_dy = vec![0.0; c];
                    let mut sum_dy_xhat = vec![0.0; c];
                    let mut m = vec![0usize; c];
                    bn_for_each(shape, *layout, counts, |idx, ch| {
                        sum_dy[ch] += gout.data[idx];
                        sum_dy_xhat[ch] += gout.data[idx] * xhat[idx];
                        m[ch] += 1;
                    });
                    for idx in 0..xt.numel() {
                        if !valid[idx] {
                            continue;
                        }
                        let ch = ch_of(idx);
                        let mch = m[ch].max(1) as Real;
                        dx[idx] = gt[ch] * inv_std[ch]
                            * (gout.data[idx] - sum_dy[ch] / mch - xhat[idx] * sum_dy_xhat[ch] / mch);
                    }
                } else {
                    for idx in 0..xt.numel() {
                        if !valid[idx] {
                            continue;
                        }
                        let ch = ch_of(idx);
                        dx[idx] = gt[ch] * inv_std[ch] * gout.data[idx];
                    }
                }
                vec![
                    (*x, Tensor::from_vec(shape, dx)),
                    (*gamma, Tensor::from_vec(&[c], dgamma)),
                    (*beta, Tensor::from_vec(&[c], dbeta)),
                ]
            }
            Op::Scatter { feats, coords } => {
                let ft = val(*feats);
                let (kn, c) = (ft.shape[0], ft.shape[1]);
                let (ny, nx) = (gout.shape[1], gout.shape[2]);
                let mut dx = vec![0.0; kn * c];
                for (ki, &(ix, iy)) in coords.iter().enumerate() {
                    for ci in 0..c {
                        dx[ki * c + ci] = gout.data[(ci * ny + iy) * nx + ix];
                    }
                }
                vec![(*feats, Tensor::from_vec(&[kn, c], dx))]
            }
        }
    }
}

pub(crate) fn stable_sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn bn_channel_fn(shape: &[usize], layout: BnLayout) -> Box<dyn Fn(usize) -> usize> {
    match layout {
        BnLayout::Chw => {
            let hw = shape[1] * shape[2];
            Box::new(move |idx| idx / hw)
        }
        BnLayout::Knc => {
            let c = shape[2];
            Box::new(move |idx| idx % c)
        }
    }
}

fn bn_for_each(shape: &[usize], layout: BnLayout, counts: &[usize], mut f: impl FnMut(usize, usize)) {
    match layout {
        BnLayout::Chw => {
            let (c, hw) = (shape[0], shape[1] * shape[2]);
            for ch in 0..c {
                for p in 0..hw {
                    f(ch * hw + p, ch);
                }
            }
        }
        BnLayout::Knc => {
            let (_k, n, c) = (shape[0], shape[1], shape[2]);
            for (ki, &cnt) in counts.iter().enumerate() {
                for ni in 0..cnt {
                    for ci in 0..c {
                        f((ki * n + ni) * c + ci, ci);
                    }
                }
            }
        }
    }
}

/// Columns per im2col chunk, capped so the scratch buffer stays ~30 MB.
fn conv_chunk_cols(kk: usize) -> usize {
    (4_000_000 / kk).clamp(64, 65536)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[Real],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    p0: usize,
    p1: usize,
    col: &mut [Real],
) {
    let cols = p1 - p0;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * cols;
                for p in p0..p1 {
                    let (oy, ox) = (p / wo, p % wo);
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    col[base + (p - p0)] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        x[(ci * h + iy as usize) * w + ix as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_accumulate(
    dcol: &[Real],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    p0: usize,
    p1: usize,
    dx: &mut [Real],
) {
    let cols = p1 - p0;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * cols;
                for p in p0..p1 {
                    let (oy, ox) = (p / wo, p % wo);
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        dx[(ci * h + iy as usize) * w + ix as usize] += dcol[base + (p - p0)];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    xt: &Tensor,
    wt: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    x_id: usize,
    w_id: usize,
    b_id: usize,
) -> Vec<(usize, Tensor)> {
    let (cin, h, w) = (xt.shape[0], xt.shape[1], xt.shape[2]);
    let (cout, k) = (wt.shape[0], wt.shape[2]);
    let (ho, wo) = (gout.shape[1], gout.shape[2]);
    let kk = cin * k * k;
    let total = ho * wo;
    let mut dx = vec![0.0; xt.numel()];
    let mut dw = vec![0.0; wt.numel()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        db[co] = gout.data[co * total..(co + 1) * total].iter().sum();
    }
    let chunk = conv_chunk_cols(kk);
    let mut col = vec![0.0; kk * chunk];
    let mut gy_chunk = vec![0.0; cout * chunk];
    let mut p0 = 0;
    while p0 < total {
        let p1 = (p0 + chunk).min(total);
        let cols = p1 - p0;
        for co in 0..cout {
            gy_chunk[co * cols..(co + 1) * cols].copy_from_slice(&gout.data[co * total + p0..co * total + p1]);
        }
        let gy = view2(&gy_chunk[..cout * cols], cout, cols);
        im2col(&xt.data, cin, h, w, k, stride, pad, wo, p0, p1, &mut col);
        // dW += gy . col^T
        let dw_chunk = matmul(cout, cols, kk, gy, view2(&col[..kk * cols], kk, cols).reversed_axes());
        for (a, b) in dw.iter_mut().zip(&dw_chunk) {
            *a += b;
        }
        // dcol = W^T . gy, then scatter back into dx
        let dcol = matmul(kk, cout, cols, view2(&wt.data, cout, kk).reversed_axes(), gy);
        col2im_accumulate(&dcol, cin, h, w, k, stride, pad, wo, p0, p1, &mut dx);
        p0 = p1;
    }
    vec![
        (x_id, Tensor::from_vec(&xt.shape, dx)),
        (w_id, Tensor::from_vec(&wt.shape, dw)),
        (b_id, Tensor::from_vec(&[cout], db)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::check_op;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_identity_and_hand_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b);
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let w = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]));
        let b = g.leaf(Tensor::from_vec(&[1], vec![0.5]));
        let y = g.linear(x, w, b);
        assert_eq!(g.value(y).data, vec![3.5]);
    }

    #[test]
    fn conv_1x1_channel_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as Real).collect()));
        // 1x1 kernel = identity over channels
        let w = g.leaf(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1, 0);
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn conv_3x3_ones_on_one_hot() {
        let mut g = Graph::new();
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0;
        let x = g.leaf(Tensor::from_vec(&[1, 5, 5], img));
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1);
        assert_eq!(g.value(y).shape, vec![1, 5, 5]);
        for iy in 0..5 {
            for ix in 0..5 {
                let expect = if (1..=3).contains(&iy) && (1..=3).contains(&ix) { 1.0 } else { 0.0 };
                assert_eq!(g.value(y).data[iy * 5 + ix], expect, "at ({iy},{ix})");
            }
        }
    }

    #[test]
    fn upsample_nearest_and_mean_preserved() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 1], vec![5.0]));
        let y = g.upsample2x(x);
        assert_eq!(g.value(y).data, vec![5.0; 4]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.upsample2x(x);
        let mean_in: Real = 21.0 / 6.0;
        let mean_out: Real = g.value(y).data.iter().sum::<Real>() / 24.0;
        assert_abs_diff_eq!(mean_in, mean_out, epsilon = 1e-12);
    }

    #[test]
    fn masked_max_single_point_and_permutation() {
        let mut g = Graph::new();
        // one voxel, 3 slots, 2 channels, only slot 0 valid
        let x = g.leaf(Tensor::from_vec(&[1, 3, 2], vec![1.5, -2.0, 9.0, 9.0, 9.0, 9.0]));
        let y = g.masked_max_points(x, &[1]);
        assert_eq!(g.value(y).data, vec![1.5, -2.0]);

        let vals = [[1.0, 5.0], [3.0, 2.0], [2.0, 4.0]];
        let perms = [[0, 1, 2], [2, 0, 1], [1, 2, 0]];
        let mut outs = Vec::new();
        for p in perms {
            let mut g = Graph::new();
            let data: Vec<Real> = p.iter().flat_map(|&i| vals[i]).collect();
            let x = g.leaf(Tensor::from_vec(&[1, 3, 2], data));
            let y = g.masked_max_points(x, &[3]);
            outs.push(g.value(y).data.clone());
        }
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 1, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let gamma = g.leaf(Tensor::full(&[2], 1.0));
        let beta = g.leaf(Tensor::zeros(&[2]));
        // zero running mean, unit running var, tiny eps
        let mut stats = BnStats::new(2, 0.99, 1e-12);
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, false);
        for (a, b) in g.value(x).data.clone().iter().zip(&g.value(y).data) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 100.0]));
        let y = g.softmax(x);
        for row in g.value(y).data.chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<Real>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scatter_conservation_and_placement() {
        let mut g = Graph::new();
        let feats = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let coords = [(5usize, 7usize), (0, 0)];
        let y = g.scatter(feats, &coords, 10, 12);
        assert_eq!(g.value(y).shape, vec![3, 10, 12]);
        let sum_feats: Real = g.value(feats).data.iter().sum();
        let sum_img: Real = g.value(y).data.iter().sum();
        assert_abs_diff_eq!(sum_feats, sum_img, epsilon = 1e-12);
        assert_eq!(g.value(y).data[(0 * 10 + 7) * 12 + 5], 1.0);
        assert_eq!(g.value(y).data[(2 * 10 + 7) * 12 + 5], 3.0);
    }

    #[test]
    #[should_panic(expected = "duplicate scatter coordinate")]
    fn scatter_rejects_duplicates() {
        let mut g = Graph::new();
        let feats = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]));
        g.scatter(feats, &[(3, 3), (3, 3)], 5, 5);
    }

    #[test]
    fn diamond_graph_linearity() {
        // y = relu(x) + relu(x): backward of the sum equals the sum of
        // the path gradients
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, 2.0, -2.0]));
        let a = g.relu(x);
        let b = g.relu(x);
        let y = g.add(a, b);
        let ones = Tensor::full(&[1, 2, 2], 1.0);
        g.backward(vec![(y, ones)]);
        assert_eq!(g.grad(x).unwrap().data, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn quick_gradient_checks() {
        // a smoke pass per op; exhaustive random-shape sweeps live in the
        // acceptance suite
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 0.7, 1.2, -0.2, 0.5]);
        let w = Tensor::from_vec(&[3, 2], vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.4]);
        let b = Tensor::from_vec(&[2], vec![0.05, -0.3]);
        check_op(&[x, w, b], 1e-5, 1e-6, |g, ids| g.linear(ids[0], ids[1], ids[2])).unwrap();

        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| (v as Real) * 0.1 - 0.8).collect());
        let w = Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|v| (v as Real) * 0.05 - 0.4).collect());
        let b = Tensor::from_vec(&[2], vec![0.1, -0.1]);
        check_op(&[x, w, b], 1e-5, 1e-6, |g, ids| g.conv2d(ids[0], ids[1], ids[2], 2, 1)).unwrap();

        let x = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| (v as Real) * 0.3 - 1.0).collect());
        check_op(&[x.clone()], 1e-5, 1e-6, |g, ids| g.upsample2x(ids[0])).unwrap();
        check_op(&[x.clone()], 1e-5, 1e-6, |g, ids| g.sigmoid(ids[0])).unwrap();
        check_op(&[x.clone()], 1e-5, 1e-6, |g, ids| g.softmax(ids[0])).unwrap();

        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]);
        let beta = Tensor::from_vec(&[2], vec![0.2, -0.1]);
        check_op(&[x, gamma, beta], 1e-5, 1e-5, |g, ids| {
            let mut stats = BnStats::new(2, 0.99, 1e-3);
            g.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, true)
        })
        .unwrap();
    }
}
