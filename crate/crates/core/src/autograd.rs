//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. Nodes created
//! from constants do not require gradients and carry no backward closure,
//! so a network whose parameters are bound as constants is evaluated with
//! gradient flow stopped at those parameters.

use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not require gradients or does
    /// not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            value,
            &[a, b],
            Box::new(|g, inp, _| {
                vec![
                    Some(g.zip_map(inp[1], |g, y| g * y)),
                    Some(g.zip_map(inp[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, &[a], Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, &[a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _| vec![Some(g.zip_map(inp[0], |g, x| if x > 0.0 { g } else { 0.0 }))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(
            value,
            &[a],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, y| g * (1.0 - y * y)))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(
            value,
            &[a],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, y| g * y * (1.0 - y)))]),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _| vec![Some(g.zip_map(inp[0], |g, x| g / x))]),
        )
    }

    /// `|a|` with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _| {
                vec![Some(g.zip_map(inp[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| {
                vec![Some(g.zip_map(inp[0], |g, x| if x >= lo && x <= hi { g } else { 0.0 }))]
            }),
        )
    }

    // ----- reductions and indexing --------------------------------------

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len() as f64;
        let value = Tensor::scalar(t.sum() / n);
        self.push(
            value,
            &[a],
            Box::new(move |g, inp, _| {
                let gv = g.item() / n;
                vec![Some(Tensor::full(inp[0].shape(), gv))]
            }),
        )
    }

    /// `sum_i c_i * x_i` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = Tensor::scalar(terms.iter().map(|&(v, c)| c * self.value(v).item()).sum());
        let coeffs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            value,
            &vars,
            Box::new(move |g, _, _| coeffs.iter().map(|&c| Some(Tensor::scalar(g.item() * c))).collect()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.push(
            value,
            &[a],
            Box::new(|g, inp, _| vec![Some(g.clone().reshape(inp[0].shape().to_vec()))]),
        )
    }

    /// Row-wise softmax of a `[n, k]` matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "softmax expects [n, k]");
        let k = t.shape()[1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out);
        self.push(
            value,
            &[a],
            Box::new(move |g, _, p| {
                let mut dx = vec![0.0; p.len()];
                for ((drow, grow), prow) in dx
                    .chunks_mut(k)
                    .zip(g.data().chunks(k))
                    .zip(p.data().chunks(k))
                {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        drow[j] = prow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(Tensor::new(p.shape().to_vec(), dx))]
            }),
        )
    }

    /// Selects `a[i, index[i]]` from a `[n, k]` matrix.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let (n, k) = (t.shape()[0], t.shape()[1]);
        assert_eq!(index.len(), n);
        let value = Tensor::new(vec![n], index.iter().enumerate().map(|(i, &j)| t.data()[i * k + j]).collect());
        let index = index.to_vec();
        self.push(
            value,
            &[a],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[n, k]);
                for (i, &j) in index.iter().enumerate() {
                    dx.data_mut()[i * k + j] = g.data()[i];
                }
                vec![Some(dx)]
            }),
        )
    }

    // ----- layers --------------------------------------------------------

    /// 3-D convolution. `x: [n, ci, d, h, w]`, `w: [co, ci, k, k, k]`, `b: [co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, dims) = xt.dims5();
        let co = wt.shape()[0];
        let k = geom.kernel;
        assert_eq!(wt.shape(), &[co, ci, k, k, k], "conv3d weight shape");
        let out = geom.out_dims(dims).expect("conv3d kernel larger than input");
        let p_out: usize = out.iter().product();
        let p_in: usize = dims.iter().product();
        let ck = ci * k * k * k;
        let mut y = vec![0.0; n * co * p_out];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; ck * p_out] };
        for s in 0..n {
            let xs = &xt.data()[s * ci * p_in..(s + 1) * ci * p_in];
            let colsr: &[f64] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, ci, dims, geom, out, &mut cols);
                &cols
            };
            gemm(co, ck, p_out, wt.data(), false, colsr, false, 0.0, &mut y[s * co * p_out..(s + 1) * co * p_out]);
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), n, co, p_out);
            parents.push(b);
        }
        let value = Tensor::new(vec![n, co, out[0], out[1], out[2]], y);
        self.push(
            value,
            &parents,
            Box::new(move |g, inp, _| {
                let (xt, wt) = (inp[0], inp[1]);
                let gd = g.data();
                let mut dx = vec![0.0; n * ci * p_in];
                let mut dw = vec![0.0; co * ck];
                let mut cols = vec![0.0; ck * p_out];
                for s in 0..n {
                    let gs = &gd[s * co * p_out..(s + 1) * co * p_out];
                    let xs = &xt.data()[s * ci * p_in..(s + 1) * ci * p_in];
                    if geom.is_pointwise() {
                        gemm(co, p_out, ck, gs, false, xs, true, 1.0, &mut dw);
                        gemm(ck, co, p_out, wt.data(), true, gs, false, 0.0, &mut dx[s * ci * p_in..(s + 1) * ci * p_in]);
                    } else {
                        im2col(xs, ci, dims, geom, out, &mut cols);
                        gemm(co, p_out, ck, gs, false, &cols, true, 1.0, &mut dw);
                        gemm(ck, co, p_out, wt.data(), true, gs, false, 0.0, &mut cols);
                        col2im(&cols, ci, dims, geom, out, &mut dx[s * ci * p_in..(s + 1) * ci * p_in]);
                    }
                }
                let mut grads = vec![
                    Some(Tensor::new(xt.shape().to_vec(), dx)),
                    Some(Tensor::new(wt.shape().to_vec(), dw)),
                ];
                if inp.len() == 3 {
                    grads.push(Some(channel_sums(gd, n, co, p_out)));
                }
                grads
            }),
        )
    }

    /// Transposed 3-D convolution. `x: [n, ci, d, h, w]`, `w: [ci, co, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, out_pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, dims) = xt.dims5();
        let co = wt.shape()[1];
        let k = geom.kernel;
        assert_eq!(wt.shape(), &[ci, co, k, k, k], "conv_transpose3d weight shape");
        let out = [
            geom.transposed_len(dims[0], out_pad).expect("bad transposed geometry"),
            geom.transposed_len(dims[1], out_pad).expect("bad transposed geometry"),
            geom.transposed_len(dims[2], out_pad).expect("bad transposed geometry"),
        ];
        debug_assert_eq!(geom.out_dims(out), Some(dims));
        let p_in: usize = dims.iter().product();
        let p_out: usize = out.iter().product();
        let ck = co * k * k * k;
        let mut y = vec![0.0; n * co * p_out];
        let mut cols = vec![0.0; ck * p_in];
        for s in 0..n {
            let xs = &xt.data()[s * ci * p_in..(s + 1) * ci * p_in];
            gemm(ck, ci, p_in, wt.data(), true, xs, false, 0.0, &mut cols);
            col2im(&cols, co, out, geom, dims, &mut y[s * co * p_out..(s + 1) * co * p_out]);
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), n, co, p_out);
            parents.push(b);
        }
        let value = Tensor::new(vec![n, co, out[0], out[1], out[2]], y);
        self.push(
            value,
            &parents,
            Box::new(move |g, inp, _| {
                let (xt, wt) = (inp[0], inp[1]);
                let gd = g.data();
                let mut dx = vec![0.0; n * ci * p_in];
                let mut dw = vec![0.0; ci * ck];
                let mut cols = vec![0.0; ck * p_in];
                for s in 0..n {
                    let gs = &gd[s * co * p_out..(s + 1) * co * p_out];
                    let xs = &xt.data()[s * ci * p_in..(s + 1) * ci * p_in];
                    im2col(gs, co, out, geom, dims, &mut cols);
                    gemm(ci, ck, p_in, wt.data(), false, &cols, false, 0.0, &mut dx[s * ci * p_in..(s + 1) * ci * p_in]);
                    gemm(ci, p_in, ck, xs, false, &cols, true, 1.0, &mut dw);
                }
                let mut grads = vec![
                    Some(Tensor::new(xt.shape().to_vec(), dx)),
                    Some(Tensor::new(wt.shape().to_vec(), dw)),
                ];
                if inp.len() == 3 {
                    grads.push(Some(channel_sums(gd, n, co, p_out)));
                }
                grads
            }),
        )
    }

    /// Per-sample, per-channel normalization with affine `gamma`, `beta` of shape `[c]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        self.normalize(x, gamma, beta, true).0
    }

    /// Training-mode batch normalization; returns the batch statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        self.normalize(x, gamma, beta, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, per_sample: bool) -> (Var, BatchStats) {
        let xt = self.value(x);
        let (n, c, s) = channel_layout(xt.shape());
        let gt = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data();
        assert_eq!(gt.len(), c);
        assert_eq!(bt.len(), c);
        let groups = if per_sample { n * c } else { c };
        let mut y = vec![0.0; xt.len()];
        let mut xhat = vec![0.0; xt.len()];
        let mut inv_std = vec![0.0; groups];
        let mut stats = BatchStats {
            mean: vec![0.0; groups],
            var: vec![0.0; groups],
        };
        for grp in 0..groups {
            let blocks = group_blocks(grp, per_sample, n, c, s);
            let ch = if per_sample { grp % c } else { grp };
            let count = (blocks.len() * s) as f64;
            let mean = blocks.iter().map(|&o| xt.data()[o..o + s].iter().sum::<f64>()).sum::<f64>() / count;
            let var = blocks
                .iter()
                .map(|&o| xt.data()[o..o + s].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for &o in &blocks {
                for i in o..o + s {
                    let h = (xt.data()[i] - mean) * is;
                    xhat[i] = h;
                    y[i] = gt[ch] * h + bt[ch];
                }
            }
            inv_std[grp] = is;
            stats.mean[grp] = mean;
            stats.var[grp] = var;
        }
        let value = Tensor::new(xt.shape().to_vec(), y);
        let var = self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, inp, _| {
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for grp in 0..groups {
                    let blocks = group_blocks(grp, per_sample, n, c, s);
                    let ch = if per_sample { grp % c } else { grp };
                    let count = (blocks.len() * s) as f64;
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for &o in &blocks {
                        for i in o..o + s {
                            sum_g += gd[i];
                            sum_gx += gd[i] * xhat[i];
                        }
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    let scale = gt[ch] * inv_std[grp];
                    for &o in &blocks {
                        for i in o..o + s {
                            dx[i] = scale * (gd[i] - sum_g / count - xhat[i] * sum_gx / count);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), dx)),
                    Some(Tensor::new(vec![c], dgamma)),
                    Some(Tensor::new(vec![c], dbeta)),
                ]
            }),
        );
        (var, stats)
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let xt = self.value(x);
        let (n, c, s) = channel_layout(xt.shape());
        let gt = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mean = mean.to_vec();
        let mut y = vec![0.0; xt.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * s;
                for i in o..o + s {
                    y[i] = gt[ch] * (xt.data()[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), y);
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, inp, _| {
                let gd = g.data();
                let xd = inp[0].data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * s;
                        for i in o..o + s {
                            dx[i] = gd[i] * gt[ch] * inv_std[ch];
                            dgamma[ch] += gd[i] * (xd[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), dx)),
                    Some(Tensor::new(vec![c], dgamma)),
                    Some(Tensor::new(vec![c], dbeta)),
                ]
            }),
        )
    }

    /// Channel concatenation of two 5-D tensors with equal batch and spatial dims.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, ca, da) = at.dims5();
        let (nb, cb, db) = bt.dims5();
        assert_eq!((n, da), (nb, db), "concat_channels shape mismatch");
        let s: usize = da.iter().product();
        let mut out = Vec::with_capacity(at.len() + bt.len());
        for i in 0..n {
            out.extend_from_slice(&at.data()[i * ca * s..(i + 1) * ca * s]);
            out.extend_from_slice(&bt.data()[i * cb * s..(i + 1) * cb * s]);
        }
        let value = Tensor::new(vec![n, ca + cb, da[0], da[1], da[2]], out);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, inp, _| {
                let mut ga = Vec::with_capacity(n * ca * s);
                let mut gb = Vec::with_capacity(n * cb * s);
                for i in 0..n {
                    let o = i * (ca + cb) * s;
                    ga.extend_from_slice(&g.data()[o..o + ca * s]);
                    gb.extend_from_slice(&g.data()[o + ca * s..o + (ca + cb) * s]);
                }
                vec![
                    Some(Tensor::new(inp[0].shape().to_vec(), ga)),
                    Some(Tensor::new(inp[1].shape().to_vec(), gb)),
                ]
            }),
        )
    }

    /// Non-overlapping 2x2x2 average pooling (trailing odd voxels dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, c, [d, h, w]) = xt.dims5();
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        assert!(od > 0 && oh > 0 && ow > 0, "avg_pool2 on extent < 2");
        let mut y = vec![0.0; n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xt.data()[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut y[nc * od * oh * ow..(nc + 1) * od * oh * ow];
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for (dz, dy, dx) in OCTANT {
                            acc += src[((2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dx];
                        }
                        dst[(z * oh + yy) * ow + xx] = acc / 8.0;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, od, oh, ow], y);
        self.push(
            value,
            &[x],
            Box::new(move |g, inp, _| {
                let mut dx = vec![0.0; inp[0].len()];
                for nc in 0..n * c {
                    let src = &g.data()[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                    let dst = &mut dx[nc * d * h * w..(nc + 1) * d * h * w];
                    for z in 0..od {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let v = src[(z * oh + yy) * ow + xx] / 8.0;
                                for (dz, dy, dxx) in OCTANT {
                                    dst[((2 * z + dz) * h + 2 * yy + dy) * w + 2 * xx + dxx] = v;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(inp[0].shape().to_vec(), dx))]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, d, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (n, c, s) = channel_layout(xt.shape());
        let y: Vec<f64> = xt.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let value = Tensor::new(vec![n, c], y);
        self.push(
            value,
            &[x],
            Box::new(move |g, inp, _| {
                let mut dx = Vec::with_capacity(inp[0].len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv / s as f64).take(s));
                }
                vec![Some(Tensor::new(inp[0].shape().to_vec(), dx))]
            }),
        )
    }

    /// `x: [n, f]`, `w: [o, f]`, `b: [o]` -> `[n, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        let (n, f) = (xt.shape()[0], xt.shape()[1]);
        let o = wt.shape()[0];
        assert_eq!(wt.shape(), &[o, f]);
        let mut y = vec![0.0; n * o];
        gemm(n, f, o, xt.data(), false, wt.data(), true, 0.0, &mut y);
        for row in y.chunks_mut(o) {
            for (v, bias) in row.iter_mut().zip(bt.data()) {
                *v += bias;
            }
        }
        let value = Tensor::new(vec![n, o], y);
        self.push(
            value,
            &[x, w, b],
            Box::new(move |g, inp, _| {
                let mut dx = vec![0.0; n * f];
                gemm(n, o, f, g.data(), false, inp[1].data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; o * f];
                gemm(o, n, f, g.data(), true, inp[0].data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; o];
                for row in g.data().chunks(o) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    Some(Tensor::new(vec![n, f], dx)),
                    Some(Tensor::new(vec![o, f], dw)),
                    Some(Tensor::new(vec![o], db)),
                ]
            }),
        )
    }
}

const OCTANT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected [n, c, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

fn group_blocks(grp: usize, per_sample: bool, n: usize, c: usize, s: usize) -> Vec<usize> {
    if per_sample {
        vec![grp * s]
    } else {
        (0..n).map(|b| (b * c + grp) * s).collect()
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], n: usize, c: usize, s: usize) {
    for b in 0..n {
        for ch in 0..c {
            for v in &mut y[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, s: usize) -> Tensor {
    let mut db = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], db)
}
