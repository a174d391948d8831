//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to push gradients back to its inputs. Nodes are only ever appended,
//! so the node list is already in topological order and backward is a single
//! reverse sweep.

use super::fft::{self, ComplexGrid};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Radial filter shape; see [`crate::frequency`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterVariant {
    /// `α·exp(−β·(D/r)²)` exactly as printed.
    Literal,
    /// `1 − (1−α)·exp(−β·(D/r)²)`: the spectral center is scaled by α and the periphery passes.
    Notch,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRowGroups {
        x: Var,
        group: usize,
    },
    Sum(Var),
    Mean(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
    RadialFilter {
        alpha: Var,
        beta: Var,
        radius: Var,
        dist2: Vec<f64>,
        variant: FilterVariant,
    },
    SpectralFilter {
        x: Var,
        filter: Var,
        spectrum: ComplexGrid,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of the given length if nothing reached it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// The operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Its gradient is tracked iff the tensor requires it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).unwrap();
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x` [m×n] plus the row vector `b` [n] broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(b).numel() != n {
            return Err(self.mismatch("add_row", x, b));
        }
        let bias = self.data(b).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bias).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), op, rg)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = self.data(x).to_vec();
        kernels::softmax_axis(&mut out, &shape, axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        let stats = kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), eps, d, &mut out);
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let out: Vec<f64> = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0])?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pn != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            out.extend_from_slice(self.data(p));
            m += pm;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather_rows needs at least one index".into()));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let src = self.data(x);
        let out: Vec<f64> = index
            .iter()
            .flat_map(|&i| src[i * n..(i + 1) * n].iter().copied())
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![index.len(), n], out)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Averages each run of `group` consecutive rows into one row.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if group == 0 || m % group != 0 {
            return Err(Error::InvalidArgument(format!(
                "{m} rows cannot be split into groups of {group}"
            )));
        }
        let src = self.data(x);
        let mut out = vec![0.0; (m / group) * n];
        for (i, row) in src.chunks(n).enumerate() {
            let dst = &mut out[(i / group) * n..(i / group + 1) * n];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v / group as f64;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![m / group, n], out)?,
            Op::MeanRowGroups { x, group },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Splits an `h×w` grid into non-overlapping `patch×patch` blocks,
    /// one flattened block per row in raster order of the blocks.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (h, w) = self.dims2(x)?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "{h}x{w} grid is not divisible into {patch}x{patch} patches"
            )));
        }
        let out = patchify_values(self.data(x), h, w, patch);
        let rows = (h / patch) * (w / patch);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, patch * patch], out)?,
            Op::Patchify { x, patch },
            rg,
        ))
    }

    /// Builds an `h×w` radial filter field over the centered spectrum from
    /// scalar variables α, β and r. `dist2` holds D(u,v)² for every cell.
    pub fn radial_filter(
        &mut self,
        alpha: Var,
        beta: Var,
        radius: Var,
        dist2: Vec<f64>,
        shape: [usize; 2],
        variant: FilterVariant,
    ) -> Result<Var> {
        for v in [alpha, beta, radius] {
            if self.value(v).numel() != 1 {
                return Err(Error::InvalidArgument(
                    "radial filter parameters must be scalars".into(),
                ));
            }
        }
        let (a, b, r) = (self.data(alpha)[0], self.data(beta)[0], self.data(radius)[0]);
        let out: Vec<f64> = dist2.iter().map(|&d2| radial_value(a, b, r, d2, variant)).collect();
        let rg = self.any_grad(&[alpha, beta, radius]);
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::RadialFilter {
                alpha,
                beta,
                radius,
                dist2,
                variant,
            },
            rg,
        ))
    }

    /// `Re(IFFT(unshift(shift(FFT(x)) ⊙ filter)))` for a centered, radially
    /// symmetric real filter of the same size as `x`.
    pub fn spectral_filter(&mut self, x: Var, filter: Var) -> Result<Var> {
        let (h, w) = self.dims2(x)?;
        if self.shape(filter) != [h, w] {
            return Err(self.mismatch("spectral_filter", x, filter));
        }
        let spectrum = fft::fft2(self.data(x), h, w)?;
        let out = apply_centered_filter(&spectrum, self.data(filter))?;
        let rg = self.any_grad(&[x, filter]);
        Ok(self.push(
            Tensor::new(vec![h, w], out)?,
            Op::SpectralFilter { x, filter, spectrum },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = self.dims2(*b)?.1;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_a_bt(g, self.data(*b), &mut ga, m, n, k);
                    accumulate(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_at_b(self.data(*a), g, &mut gb, m, k, n);
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.data(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.data(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::AddRow(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims2(*x)?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Softplus(x) => {
                let d: Vec<f64> = g.iter().zip(self.data(*x)).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let y = node.value.data();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let k = base + j * inner;
                            d[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xs = self.data(*x);
                let gamma = self.data(*gain);
                let d = gamma.len();
                let mut dx = vec![0.0; xs.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let off = r * d;
                    for j in 0..d {
                        xhat[j] = (xs[off + j] - mean) * rstd;
                        dxhat[j] = g[off + j] * gamma[j];
                        dgain[j] += g[off + j] * xhat[j];
                        dbias[j] += g[off + j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[off + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], &dx);
                }
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], &dgain);
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], &dbias);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x)?;
                let len = node.value.shape()[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.wants(*p) {
                        let d: Vec<f64> = (0..m)
                            .flat_map(|i| g[i * n + offset..i * n + offset + w].iter().copied())
                            .collect();
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let (m, n) = self.dims2(*x)?;
                let mut d = vec![0.0; m * n];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += g[r * n + j];
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::MeanRowGroups { x, group } => {
                let (m, n) = self.dims2(*x)?;
                let scale = 1.0 / *group as f64;
                let d: Vec<f64> = (0..m)
                    .flat_map(|i| g[(i / group) * n..(i / group + 1) * n].iter().map(move |v| v * scale))
                    .collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = vec![g[0] / n as f64; n];
                accumulate(&mut grads[x.0], &d);
            }
            Op::Patchify { x, patch } => {
                let (h, w) = self.dims2(*x)?;
                let d = unpatchify_values(g, h, w, *patch);
                accumulate(&mut grads[x.0], &d);
            }
            Op::RadialFilter {
                alpha,
                beta,
                radius,
                dist2,
                variant,
            } => {
                let (a, b, r) = (self.data(*alpha)[0], self.data(*beta)[0], self.data(*radius)[0]);
                let (mut ga, mut gb, mut gr) = (0.0, 0.0, 0.0);
                // literal: H = a·e,         dH/dβ = -a·q·e,    dH/dr =  a·e·2βD²/r³
                // notch:   H = 1 - (1-a)·e, dH/dβ = (1-a)·q·e, dH/dr = -(1-a)·e·2βD²/r³
                let amp = match variant {
                    FilterVariant::Literal => -a,
                    FilterVariant::Notch => 1.0 - a,
                };
                for (&gv, &d2) in g.iter().zip(dist2) {
                    let q = d2 / (r * r);
                    let e = (-b * q).exp();
                    ga += gv * e;
                    gb += gv * amp * q * e;
                    gr -= gv * amp * e * 2.0 * b * q / r;
                }
                if self.wants(*alpha) {
                    accumulate(&mut grads[alpha.0], &[ga]);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], &[gb]);
                }
                if self.wants(*radius) {
                    accumulate(&mut grads[radius.0], &[gr]);
                }
            }
            Op::SpectralFilter { x, filter, spectrum } => {
                let (h, w) = self.dims2(*x)?;
                let g_spec = fft::fft2(g, h, w)?;
                if self.wants(*x) {
                    // A real, symmetric filter makes the operator self-adjoint.
                    let d = apply_centered_filter(&g_spec, self.data(*filter))?;
                    accumulate(&mut grads[x.0], &d);
                }
                if self.wants(*filter) {
                    let norm = 1.0 / (h * w) as f64;
                    let mut raw = ComplexGrid::zeros(h, w);
                    for i in 0..h * w {
                        raw.re[i] = (spectrum.re[i] * g_spec.re[i] + spectrum.im[i] * g_spec.im[i]) * norm;
                    }
                    let centered = fft::center_shift(&raw);
                    accumulate(&mut grads[filter.0], &centered.re);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn radial_value(alpha: f64, beta: f64, radius: f64, dist2: f64, variant: FilterVariant) -> f64 {
    let e = (-beta * (dist2 / (radius * radius))).exp();
    match variant {
        FilterVariant::Literal => alpha * e,
        FilterVariant::Notch => 1.0 - (1.0 - alpha) * e,
    }
}

/// Multiplies a raw (DC at origin) spectrum by a centered filter and inverts.
pub(crate) fn apply_centered_filter(spectrum: &ComplexGrid, centered: &[f64]) -> Result<Vec<f64>> {
    let mut shifted = fft::center_shift(spectrum);
    shifted.scale_by(centered);
    fft::ifft2(&fft::center_unshift(&shifted))
}

pub(crate) fn patchify_values(src: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let row = (pr * patch + r) * w + pc * patch;
                out.extend_from_slice(&src[row..row + patch]);
            }
        }
    }
    out
}

pub(crate) fn unpatchify_values(src: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0.0; h * w];
    let mut k = 0;
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let row = (pr * patch + r) * w + pc * patch;
                out[row..row + patch].copy_from_slice(&src[k..k + patch]);
                k += patch;
            }
        }
    }
    out
}
