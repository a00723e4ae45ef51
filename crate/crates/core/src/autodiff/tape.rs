//! Reverse-mode tape over dense f64 tensors (rank <= 4). Every op records
//! its parents; `backward` walks the tape in reverse accumulating gradients.

use crate::error::{Error, Result};

use super::params::ParamStore;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxLastDim { x: Var, mask: Option<Vec<bool>> },
    SoftmaxNeighbors { x: Var, mask: Vec<bool> },
    ConcatLastDim(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    RepeatChunksLastDim { x: Var, times: usize },
    SumChunksLastDim { x: Var, chunks: usize },
    SumGroupRows { x: Var, group: usize },
    RowNorms(Var),
    RowNormalize(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<usize>,
        row_mask: Option<Vec<bool>>,
    },
    Conv3x3Stride2 { input: Var, weight: Var, bias: Var },
    BilinearSample { map: Var, points: Vec<(f64, f64)> },
    Reshape(Var),
    SumAll(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(numel(self.shape(v)), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        debug_assert!(shape.len() <= 4);
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        self.push(shape.to_vec(), data, Op::Leaf { param: None })
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(&[1], vec![v])
    }

    /// Leaf bound to a named parameter; gradients flow back to the name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf {
                param: Some(name.to_string()),
            },
        )
    }

    /// Elementwise add; `b`'s shape may be a suffix of `a`'s (broadcast over
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !sa.ends_with(&sb) {
            return Err(Error::shape("add", &sa, &sb));
        }
        let nb = numel(&sb);
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.value(b)[i % nb])
            .collect();
        Ok(self.push(sa, value, Op::Add(a, b)))
    }

    /// Elementwise multiply with the same suffix-broadcast rule as `add`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !sa.ends_with(&sb) {
            return Err(Error::shape("mul", &sa, &sb));
        }
        let nb = numel(&sb);
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.value(b)[i % nb])
            .collect();
        Ok(self.push(sa, value, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), value, Op::ScalarMul(a, c))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scalar_mul(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, p, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for kk in 0..p {
                    let x = av[i * p + kk];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut value[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += x * brow[j];
                    }
                }
            }
        }
        Ok(self.push(vec![m, n], value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("transpose", &sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], value, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Relu(a))
    }

    /// Softmax over the last axis of a rank-2 tensor. Masked slots get zero
    /// weight; a fully-masked row is an error.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("softmax_lastdim", &s, &[]));
        }
        let (r, d) = (s[0], s[1]);
        if let Some(m) = mask {
            if m.len() != r * d {
                return Err(Error::shape("softmax_lastdim mask", &s, &[m.len()]));
            }
        }
        let xv = self.value(x).to_vec();
        let mut value = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let live = |j: usize| mask.map(|m| m[i * d + j]).unwrap_or(true);
            let max = (0..d)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("softmax row {i} fully masked")));
            }
            let mut z = 0.0;
            for j in 0..d {
                if live(j) {
                    let e = (row[j] - max).exp();
                    value[i * d + j] = e;
                    z += e;
                }
            }
            for j in 0..d {
                value[i * d + j] /= z;
            }
        }
        Ok(self.push(
            s,
            value,
            Op::SoftmaxLastDim {
                x,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// Softmax over the neighbor axis (axis 1) of an [n, k, h] tensor, with a
    /// per-(node, slot) mask shared across heads.
    pub fn softmax_neighbors(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("softmax_neighbors", &s, &[]));
        }
        let (n, k, h) = (s[0], s[1], s[2]);
        if mask.len() != n * k {
            return Err(Error::shape("softmax_neighbors mask", &[n, k], &[mask.len()]));
        }
        let xv = self.value(x).to_vec();
        let mut value = vec![0.0; n * k * h];
        for i in 0..n {
            if !(0..k).any(|j| mask[i * k + j]) {
                return Err(Error::Numeric(format!("node {i}: all neighbor slots masked")));
            }
            for l in 0..h {
                let get = |j: usize| xv[(i * k + j) * h + l];
                let max = (0..k)
                    .filter(|&j| mask[i * k + j])
                    .map(get)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..k {
                    if mask[i * k + j] {
                        let e = (get(j) - max).exp();
                        value[(i * k + j) * h + l] = e;
                        z += e;
                    }
                }
                for j in 0..k {
                    value[(i * k + j) * h + l] /= z;
                }
            }
        }
        Ok(self.push(
            s,
            value,
            Op::SoftmaxNeighbors {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Numeric("concat of zero tensors".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total_last = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_lastdim", self.shape(parts[0]), s));
            }
            total_last += s[s.len() - 1];
        }
        let rows = numel(&lead);
        let mut value = vec![0.0; rows * total_last];
        let mut off = 0;
        for &p in parts {
            let d = *self.shape(p).last().unwrap();
            let pv = self.value(p);
            for r in 0..rows {
                value[r * total_last + off..r * total_last + off + d]
                    .copy_from_slice(&pv[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let mut shape = lead;
        shape.push(total_last);
        Ok(self.push(shape, value, Op::ConcatLastDim(parts.to_vec())))
    }

    /// Select rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows", &s, &[]));
        }
        let d = s[1];
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= s[0] {
                return Err(Error::Numeric(format!("gather_rows index {i} out of range")));
            }
            value.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// [r, h] -> [r, h*times]: each element repeated `times` times in place.
    pub fn repeat_chunks_lastdim(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("repeat_chunks_lastdim", &s, &[]));
        }
        let (r, h) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(r * h * times);
        for i in 0..r {
            for j in 0..h {
                for _ in 0..times {
                    value.push(xv[i * h + j]);
                }
            }
        }
        Ok(self.push(vec![r, h * times], value, Op::RepeatChunksLastDim { x, times }))
    }

    /// [r, d] -> [r, chunks]: sum of each of `chunks` contiguous length-(d/chunks) spans.
    pub fn sum_chunks_lastdim(&mut self, x: Var, chunks: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] % chunks != 0 {
            return Err(Error::shape("sum_chunks_lastdim", &s, &[chunks]));
        }
        let (r, d) = (s[0], s[1]);
        let span = d / chunks;
        let xv = self.value(x);
        let mut value = vec![0.0; r * chunks];
        for i in 0..r {
            for c in 0..chunks {
                value[i * chunks + c] = xv[i * d + c * span..i * d + (c + 1) * span]
                    .iter()
                    .sum();
            }
        }
        Ok(self.push(vec![r, chunks], value, Op::SumChunksLastDim { x, chunks }))
    }

    /// [g*group, d] -> [g, d]: sum over each consecutive block of `group` rows.
    pub fn sum_group_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] % group != 0 {
            return Err(Error::shape("sum_group_rows", &s, &[group]));
        }
        let (rows, d) = (s[0], s[1]);
        let g = rows / group;
        let xv = self.value(x);
        let mut value = vec![0.0; g * d];
        for i in 0..rows {
            let out = (i / group) * d;
            for j in 0..d {
                value[out + j] += xv[i * d + j];
            }
        }
        Ok(self.push(vec![g, d], value, Op::SumGroupRows { x, group }))
    }

    /// Euclidean norm of each row: [r, d] -> [r, 1].
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row_norms", &s, &[]));
        }
        let (r, d) = (s[0], s[1]);
        let xv = self.value(x);
        let value: Vec<f64> = (0..r)
            .map(|i| xv[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(vec![r, 1], value, Op::RowNorms(x)))
    }

    /// Rows scaled to unit Euclidean norm; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("row_normalize", &s, &[]));
        }
        let (r, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..d {
                    value[i * d + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push(s, value, Op::RowNormalize(x)))
    }

    /// Pre-norm transformer style layer norm over the last axis with affine
    /// gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", &s, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm affine", &s, self.shape(gain)));
        }
        let rows = numel(&s) / d;
        let xv = self.value(x).to_vec();
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0; rows * d];
        for i in 0..rows {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                value[i * d + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        Ok(self.push(s, value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean cross-entropy between logits and integer targets over unmasked
    /// rows. Returns a scalar; 0 if every row is masked out.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        row_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy_logits", &s, &[targets.len()]));
        }
        let (r, c) = (s[0], s[1]);
        if targets.iter().any(|&t| t >= c) {
            return Err(Error::Numeric("target class out of range".into()));
        }
        let live = |i: usize| row_mask.map(|m| m[i]).unwrap_or(true);
        let count = (0..r).filter(|&i| live(i)).count();
        let xv = self.value(logits);
        let mut total = 0.0;
        for i in 0..r {
            if !live(i) {
                continue;
            }
            let row = &xv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logz = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += logz - row[targets[i]];
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropyLogits {
                logits,
                targets: targets.to_vec(),
                row_mask: row_mask.map(|m| m.to_vec()),
            },
        ))
    }

    /// 3x3 convolution, stride 2, zero padding 1. Input [h, w, cin], weight
    /// [cout, cin, 3, 3], bias [cout]; output [h/2, w/2, cout].
    pub fn conv3x3_stride2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[2] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv3x3_stride2", &si, &sw));
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let cout = sw[0];
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv3x3_stride2 bias", self.shape(bias), &[cout]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(input).to_vec();
        let wv = self.value(weight).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bv[co];
                    for ky in 0..3usize {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = (iy as usize * w + ix as usize) * cin;
                            let wbase = ((co * cin) * 3 + ky) * 3 + kx;
                            for ci in 0..cin {
                                acc += xv[ibase + ci] * wv[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                            let _ = wbase;
                        }
                    }
                    value[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        Ok(self.push(
            vec![oh, ow, cout],
            value,
            Op::Conv3x3Stride2 { input, weight, bias },
        ))
    }

    /// Bilinear interpolation of a [h, w, c] map at pixel-space points
    /// (x right, y down, cell centers at integer coordinates). Points outside
    /// the lattice are edge-clamped. Output [n, c].
    pub fn bilinear_sample(&mut self, map: Var, points: &[(f64, f64)]) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("bilinear_sample", &s, &[]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h < 2 || w < 2 {
            return Err(Error::shape("bilinear_sample: map too small", &s, &[2, 2]));
        }
        let mv = self.value(map);
        let mut value = vec![0.0; points.len() * c];
        for (n, &(px, py)) in points.iter().enumerate() {
            let (x0, y0, fx, fy) = clamped_cell(px, py, w, h);
            for ch in 0..c {
                let g = |yy: usize, xx: usize| mv[(yy * w + xx) * c + ch];
                value[n * c + ch] = g(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + g(y0, x0 + 1) * fx * (1.0 - fy)
                    + g(y0 + 1, x0) * (1.0 - fx) * fy
                    + g(y0 + 1, x0 + 1) * fx * fy;
            }
        }
        Ok(self.push(
            vec![points.len(), c],
            value,
            Op::BilinearSample {
                map,
                points: points.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(vec![1], vec![total], Op::SumAll(x))
    }

    /// Backward pass from a scalar loss. Accumulation is a single reverse
    /// sweep over the tape, so it is independent of expression order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape("backward: loss must be scalar", self.shape(loss), &[1]));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut bump = |v: Var, delta: Vec<f64>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                bump(*a, g.to_vec());
                let nb = numel(self.shape(*b));
                let mut db = vec![0.0; nb];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % nb] += gi;
                }
                bump(*b, db);
            }
            Op::Mul(a, b) => {
                let nb = numel(self.shape(*b));
                let av = self.value(*a);
                let bv = self.value(*b);
                let da: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % nb]).collect();
                let mut db = vec![0.0; nb];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % nb] += gi * av[i];
                }
                bump(*a, da);
                bump(*b, db);
            }
            Op::ScalarMul(a, c) => {
                bump(*a, g.iter().map(|&gi| gi * c).collect());
            }
            Op::Matmul(a, b) => {
                let (m, p) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = G * B^T
                let mut da = vec![0.0; m * p];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for kk in 0..p {
                            da[i * p + kk] += gij * bv[kk * n + j];
                        }
                    }
                }
                // dB = A^T * G
                let mut db = vec![0.0; p * n];
                for i in 0..m {
                    for kk in 0..p {
                        let aik = av[i * p + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                bump(*a, da);
                bump(*b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                bump(*a, da);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                bump(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::SoftmaxLastDim { x, mask } => {
                let s = self.shape(id_var(id));
                let (r, d) = (s[0], s[1]);
                let y = &node.value;
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let dot: f64 = (0..d).map(|j| g[i * d + j] * y[i * d + j]).sum();
                    for j in 0..d {
                        let live = mask.as_ref().map(|m| m[i * d + j]).unwrap_or(true);
                        if live {
                            dx[i * d + j] = y[i * d + j] * (g[i * d + j] - dot);
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::SoftmaxNeighbors { x, mask } => {
                let s = self.shape(id_var(id));
                let (n, k, h) = (s[0], s[1], s[2]);
                let y = &node.value;
                let mut dx = vec![0.0; n * k * h];
                for i in 0..n {
                    for l in 0..h {
                        let at = |j: usize| (i * k + j) * h + l;
                        let dot: f64 = (0..k).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..k {
                            if mask[i * k + j] {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::ConcatLastDim(parts) => {
                let total_last = *node.shape.last().unwrap();
                let rows = node.value.len() / total_last;
                let mut off = 0;
                for &p in parts {
                    let d = *self.shape(p).last().unwrap();
                    let mut dp = vec![0.0; rows * d];
                    for r in 0..rows {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&g[r * total_last + off..r * total_last + off + d]);
                    }
                    bump(p, dp);
                    off += d;
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; numel(self.shape(*x))];
                for (out_row, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[out_row * d + j];
                    }
                }
                bump(*x, dx);
            }
            Op::RepeatChunksLastDim { x, times } => {
                let (r, h) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; r * h];
                for i in 0..r {
                    for j in 0..h {
                        for t in 0..*times {
                            dx[i * h + j] += g[i * h * times + j * times + t];
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::SumChunksLastDim { x, chunks } => {
                let (r, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let span = d / chunks;
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    for c in 0..*chunks {
                        let gc = g[i * chunks + c];
                        for j in 0..span {
                            dx[i * d + c * span + j] = gc;
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::SumGroupRows { x, group } => {
                let (rows, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; rows * d];
                for i in 0..rows {
                    dx[i * d..(i + 1) * d].copy_from_slice(&g[(i / group) * d..(i / group + 1) * d]);
                }
                bump(*x, dx);
            }
            Op::RowNorms(x) => {
                let (r, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x);
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let norm = node.value[i];
                    if norm > 0.0 {
                        for j in 0..d {
                            dx[i * d + j] = g[i] * xv[i * d + j] / norm;
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::RowNormalize(x) => {
                let (r, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x);
                let u = &node.value;
                let mut dx = vec![0.0; r * d];
                for i in 0..r {
                    let norm = xv[i * d..(i + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if norm > 0.0 {
                        let dot: f64 = (0..d).map(|j| g[i * d + j] * u[i * d + j]).sum();
                        for j in 0..d {
                            dx[i * d + j] = (g[i * d + j] - u[i * d + j] * dot) / norm;
                        }
                    }
                }
                bump(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let s = self.shape(*x);
                let d = *s.last().unwrap();
                let rows = numel(s) / d;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..rows {
                    let row = &xv[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gt: Vec<f64> = (0..d).map(|j| g[i * d + j] * gv[j]).collect();
                    let sum_gt: f64 = gt.iter().sum();
                    let sum_gt_xhat: f64 = gt.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dgain[j] += g[i * d + j] * xhat[j];
                        dbias[j] += g[i * d + j];
                        dx[i * d + j] =
                            inv * (gt[j] - sum_gt / d as f64 - xhat[j] * sum_gt_xhat / d as f64);
                    }
                }
                bump(*x, dx);
                bump(*gain, dgain);
                bump(*bias, dbias);
            }
            Op::CrossEntropyLogits {
                logits,
                targets,
                row_mask,
            } => {
                let (r, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let live = |i: usize| row_mask.as_ref().map(|m| m[i]).unwrap_or(true);
                let count = (0..r).filter(|&i| live(i)).count();
                let mut dx = vec![0.0; r * c];
                if count > 0 {
                    let xv = self.value(*logits);
                    let scale = g[0] / count as f64;
                    for i in 0..r {
                        if !live(i) {
                            continue;
                        }
                        let row = &xv[i * c..(i + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / z;
                            dx[i * c + j] = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                }
                bump(*logits, dx);
            }
            Op::Conv3x3Stride2 { input, weight, bias } => {
                let si = self.shape(*input);
                let (h, w, cin) = (si[0], si[1], si[2]);
                let cout = self.shape(*weight)[0];
                let (oh, ow) = (h / 2, w / 2);
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let mut dx = vec![0.0; h * w * cin];
                let mut dw = vec![0.0; cout * cin * 9];
                let mut db = vec![0.0; cout];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for co in 0..cout {
                            let gout = g[(oy * ow + ox) * cout + co];
                            if gout == 0.0 {
                                continue;
                            }
                            db[co] += gout;
                            for ky in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let ibase = (iy as usize * w + ix as usize) * cin;
                                    for ci in 0..cin {
                                        let widx = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                        dx[ibase + ci] += gout * wv[widx];
                                        dw[widx] += gout * xv[ibase + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                bump(*input, dx);
                bump(*weight, dw);
                bump(*bias, db);
            }
            Op::BilinearSample { map, points } => {
                let s = self.shape(*map);
                let (h, w, c) = (s[0], s[1], s[2]);
                let mut dm = vec![0.0; h * w * c];
                for (n, &(px, py)) in points.iter().enumerate() {
                    let (x0, y0, fx, fy) = clamped_cell(px, py, w, h);
                    for ch in 0..c {
                        let gn = g[n * c + ch];
                        dm[(y0 * w + x0) * c + ch] += gn * (1.0 - fx) * (1.0 - fy);
                        dm[(y0 * w + x0 + 1) * c + ch] += gn * fx * (1.0 - fy);
                        dm[((y0 + 1) * w + x0) * c + ch] += gn * (1.0 - fx) * fy;
                        dm[((y0 + 1) * w + x0 + 1) * c + ch] += gn * fx * fy;
                    }
                }
                bump(*map, dm);
            }
            Op::Reshape(x) => {
                bump(*x, g.to_vec());
            }
            Op::SumAll(x) => {
                bump(*x, vec![g[0]; numel(self.shape(*x))]);
            }
        }
    }

    /// Collect gradients by parameter name, accumulating over every leaf
    /// bound to the same name.
    pub fn param_grads(
        &self,
        grads: &Gradients,
    ) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out = std::collections::BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = grads.grads[id].as_ref() {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Vec<f64>| {
                            for (a, &b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}

/// Clamped bilinear cell lookup shared by forward and backward.
fn clamped_cell(px: f64, py: f64, w: usize, h: usize) -> (usize, usize, f64, f64) {
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let x0 = (px.floor() as usize).min(w - 2);
    let y0 = (py.floor() as usize).min(h - 2);
    (x0, y0, px - x0 as f64, py - y0 as f64)
}
