//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! The tape is eager: each op computes its value immediately, so code can branch
//! on intermediate results while recording. `backward` walks the node list in
//! reverse and accumulates gradients for every node that (transitively)
//! depends on a parameter leaf.
//!
//! Spatial tensors are `[C, H, W]`, vectors `[K]`, scalars `[1]`. Binary ops
//! broadcast a scalar against anything and `[1, H, W]` against `[C, H, W]`.
//! Everything is single-threaded and deterministic: identical inputs replay
//! to identical bits.

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum UnaryKind {
    Neg,
    Abs,
    Sqrt,
    Exp,
    Ln,
    Sin,
    Cos,
    Sigmoid,
    Elu,
    Clamp { lo: f64, hi: f64 },
    Scale(f64),
    AddConst(f64),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

enum Op {
    Leaf,
    Unary { x: Var, kind: UnaryKind },
    Binary { a: Var, b: Var, kind: BinKind },
    Sum { x: Var },
    Mean { x: Var },
    ChannelMean { x: Var },
    GlobalMean { x: Var },
    Concat { parts: Vec<Var> },
    PickScalar { x: Var, index: usize },
    BroadcastScalar { x: Var, shape: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    BilinearUp2 { x: Var },
    AvgPool3x3 { x: Var },
    GridSample { src: Var, gu: Var, gv: Var, valid: Vec<bool> },
    DiffX { x: Var },
    DiffY { x: Var },
    Linear { x: Var, w: Var, b: Var },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Eager autodiff tape. One tape per forward pass; drop it to free storage.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node[v.0].as_ref()
    }
}

enum Bcast {
    Same,
    AScalar,
    BScalar,
    AChan,
    BChan,
}

fn classify(a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        Bcast::Same
    } else if a.len() == 1 && a[0] == 1 {
        Bcast::AScalar
    } else if b.len() == 1 && b[0] == 1 {
        Bcast::BScalar
    } else if a.len() == 3 && b.len() == 3 && a[0] == 1 && a[1..] == b[1..] {
        Bcast::AChan
    } else if a.len() == 3 && b.len() == 3 && b[0] == 1 && a[1..] == b[1..] {
        Bcast::BChan
    } else {
        panic!("tape: incompatible shapes {a:?} vs {b:?}");
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0].value;
        debug_assert_eq!(n.len(), 1);
        n.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Parameter leaf: gradients are tracked and reported under `param_id`.
    pub fn param(&mut self, value: ArrayD<f64>, param_id: usize) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((v, param_id));
        v
    }

    /// Leaf that tracks gradients but is not a named parameter (test inputs).
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `x`'s value with gradient flow cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = xv.mapv(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Abs => v.abs(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Sin => v.sin(),
            UnaryKind::Cos => v.cos(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Elu => elu(v),
            UnaryKind::Clamp { lo, hi } => v.clamp(lo, hi),
            UnaryKind::Scale(c) => c * v,
            UnaryKind::AddConst(c) => c + v,
        });
        let rg = self.requires(x);
        self.push(value, Op::Unary { x, kind }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sin)
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Cos)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Elu)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, UnaryKind::Clamp { lo, hi })
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::Scale(c))
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::AddConst(c))
    }
    pub fn sqr(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
            BinKind::Min => {
                if x <= y {
                    x
                } else {
                    y
                }
            }
            BinKind::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        let value = match classify(av.shape(), bv.shape()) {
            Bcast::Same => {
                let mut out = av.clone();
                out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
                out
            }
            Bcast::AScalar => {
                let s = av.iter().next().copied().unwrap();
                bv.mapv(|y| f(s, y))
            }
            Bcast::BScalar => {
                let s = bv.iter().next().copied().unwrap();
                av.mapv(|x| f(x, s))
            }
            Bcast::AChan | Bcast::BChan => {
                let (big, small, a_is_big) = if av.shape()[0] == 1 {
                    (bv, av, false)
                } else {
                    (av, bv, true)
                };
                let (c, h, w) = (big.shape()[0], big.shape()[1], big.shape()[2]);
                let bs = big.as_slice().expect("standard layout");
                let ss = small.as_slice().expect("standard layout");
                let mut out = vec![0.0; c * h * w];
                for ci in 0..c {
                    for i in 0..h * w {
                        let (x, y) = if a_is_big {
                            (bs[ci * h * w + i], ss[i])
                        } else {
                            (ss[i], bs[ci * h * w + i])
                        };
                        out[ci * h * w + i] = f(x, y);
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
            }
        };
        let rg = self.requires(a) || self.requires(b);
        self.push(value, Op::Binary { a, b, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Div)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Min)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Max)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.nodes[x.0].value.sum() / n;
        let rg = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Mean { x }, rg)
    }

    /// `[C,H,W] -> [1,H,W]` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; h * w];
        for ci in 0..c {
            for i in 0..h * w {
                out[i] += xs[ci * h * w + i];
            }
        }
        let inv = 1.0 / c as f64;
        for v in &mut out {
            *v *= inv;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[1, h, w]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::ChannelMean { x }, rg)
    }

    /// `[C,H,W] -> [C]` mean over the spatial extent.
    pub fn global_mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h * w {
                s += xs[ci * h * w + i];
            }
            out[ci] = s / (h * w) as f64;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::GlobalMean { x }, rg)
    }

    /// Concatenate `[Ci,H,W]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (_, h, w) = dims3(self.nodes[parts[0].0].value.shape());
        let ctot: usize = parts.iter().map(|p| self.nodes[p.0].value.shape()[0]).sum();
        let mut out = Vec::with_capacity(ctot * h * w);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(&v.shape()[1..], &[h, w], "concat spatial mismatch");
            out.extend_from_slice(v.as_slice().unwrap());
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[ctot, h, w]), out).unwrap();
        let rg = parts.iter().any(|p| self.requires(*p));
        self.push(value, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Extract element `index` of a vector as a `[1]` scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.nodes[x.0].value.as_slice().unwrap()[index];
        let rg = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::PickScalar { x, index }, rg)
    }

    /// Broadcast a `[1]` scalar to an arbitrary shape.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Var {
        let s = self.scalar_value(x);
        let rg = self.requires(x);
        self.push(
            ArrayD::from_elem(IxDyn(shape), s),
            Op::BroadcastScalar { x, shape: shape.to_vec() },
            rg,
        )
    }

    /// 3x3 convolution, padding 1, stride 1 or 2. `x: [Cin,H,W]`,
    /// `w: [Cout,Cin,3,3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2);
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let (cin, h, win) = dims3(xv.shape());
        let ws = wv.shape();
        assert_eq!(ws, &[ws[0], cin, 3, 3], "conv weight shape mismatch");
        let cout = ws[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(win, stride));
        let cols = im2col(xv.as_slice().unwrap(), cin, h, win, stride);
        let mut y = vec![0.0; cout * ho * wo];
        let k = cin * 9;
        let n = ho * wo;
        unsafe {
            matrixmultiply::dgemm(
                cout,
                k,
                n,
                1.0,
                wv.as_slice().unwrap().as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                0.0,
                y.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let bs = bv.as_slice().unwrap();
        for co in 0..cout {
            let base = co * n;
            let bias = bs[co];
            for i in 0..n {
                y[base + i] += bias;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[cout, ho, wo]), y).unwrap();
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, Op::Conv2d { x, w, b, stride }, rg)
    }

    /// Fully connected layer: `x: [K]`, `w: [M,K]`, `b: [M]` -> `[M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.as_slice().unwrap();
        let wv = &self.nodes[w.0].value;
        let bv = self.nodes[b.0].value.as_slice().unwrap();
        let (m, k) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), k);
        let ws = wv.as_slice().unwrap();
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut s = bv[i];
            for j in 0..k {
                s += ws[i * k + j] * xv[j];
            }
            y[i] = s;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[m]), y).unwrap();
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// 2x bilinear upsampling (align_corners = false, border clamped).
    pub fn bilinear_up2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        let xs = xv.as_slice().unwrap();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for oy in 0..ho {
            let (y0, y1, fy) = up2_coords(oy, h);
            for ox in 0..wo {
                let (x0, x1, fx) = up2_coords(ox, w);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                for ci in 0..c {
                    let base = ci * h * w;
                    out[ci * ho * wo + oy * wo + ox] = w00 * xs[base + y0 * w + x0]
                        + w01 * xs[base + y0 * w + x1]
                        + w10 * xs[base + y1 * w + x0]
                        + w11 * xs[base + y1 * w + x1];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, ho, wo]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::BilinearUp2 { x }, rg)
    }

    /// 3x3 mean pooling, stride 1, reflect padding (used by SSIM).
    pub fn avg_pool3x3(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        assert!(h >= 2 && w >= 2, "avg_pool3x3 needs at least 2x2 input");
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            let base = ci * h * w;
            for oy in 0..h {
                for ox in 0..w {
                    let mut s = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let iy = reflect(oy as i64 + dy, h);
                            let ix = reflect(ox as i64 + dx, w);
                            s += xs[base + iy * w + ix];
                        }
                    }
                    out[base + oy * w + ox] = s / 9.0;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::AvgPool3x3 { x }, rg)
    }

    /// Bilinear sampling of `src: [C,Hs,Ws]` at continuous pixel coordinates
    /// `gu, gv: [1,H,W]`. A pixel is valid iff its coordinates land inside
    /// `[0, Ws-1] x [0, Hs-1]` and `valid_extra` (if given) holds there;
    /// invalid pixels are zero-filled. Sampling clamps to the border after
    /// the validity decision. Returns the sampled tensor and the mask.
    pub fn grid_sample(
        &mut self,
        src: Var,
        gu: Var,
        gv: Var,
        valid_extra: Option<&[bool]>,
    ) -> (Var, Vec<bool>) {
        let sv = &self.nodes[src.0].value;
        let (c, hs, ws) = dims3(sv.shape());
        let guv = &self.nodes[gu.0].value;
        let gvv = &self.nodes[gv.0].value;
        let (_, h, w) = dims3(guv.shape());
        assert_eq!(guv.shape(), gvv.shape());
        let n = h * w;
        let us = guv.as_slice().unwrap();
        let vs = gvv.as_slice().unwrap();
        if let Some(m) = valid_extra {
            assert_eq!(m.len(), n);
        }
        let ss = sv.as_slice().unwrap();
        let mut valid = vec![false; n];
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let (u, v) = (us[i], vs[i]);
            let ok = valid_extra.map_or(true, |m| m[i])
                && u >= 0.0
                && u <= (ws - 1) as f64
                && v >= 0.0
                && v <= (hs - 1) as f64;
            valid[i] = ok;
            if !ok {
                continue;
            }
            let (x0, x1, fx) = sample_coords(u, ws);
            let (y0, y1, fy) = sample_coords(v, hs);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for ci in 0..c {
                let b = ci * hs * ws;
                out[ci * n + i] = w00 * ss[b + y0 * ws + x0]
                    + w01 * ss[b + y0 * ws + x1]
                    + w10 * ss[b + y1 * ws + x0]
                    + w11 * ss[b + y1 * ws + x1];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap();
        let rg = self.requires(src) || self.requires(gu) || self.requires(gv);
        let var = self.push(
            value,
            Op::GridSample { src, gu, gv, valid: valid.clone() },
            rg,
        );
        (var, valid)
    }

    /// Horizontal first differences: `out[..,y,x] = x[..,y,x+1] - x[..,y,x]`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; c * h * (w - 1)];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w - 1 {
                    out[ci * h * (w - 1) + y * (w - 1) + xx] =
                        xs[ci * h * w + y * w + xx + 1] - xs[ci * h * w + y * w + xx];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, h, w - 1]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::DiffX { x }, rg)
    }

    /// Vertical first differences: `out[..,y,x] = x[..,y+1,x] - x[..,y,x]`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, h, w) = dims3(xv.shape());
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; c * (h - 1) * w];
        for ci in 0..c {
            for y in 0..h - 1 {
                for xx in 0..w {
                    out[ci * (h - 1) * w + y * w + xx] =
                        xs[ci * h * w + (y + 1) * w + xx] - xs[ci * h * w + y * w + xx];
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c, h - 1, w]), out).unwrap();
        let rg = self.requires(x);
        self.push(value, Op::DiffY { x }, rg)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients for every
    /// node on a parameter path.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Gradients of parameter leaves, as `(param_id, grad)` pairs.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads) -> impl Iterator<Item = (usize, &'a ArrayD<f64>)> {
        self.params
            .iter()
            .filter_map(move |(v, id)| grads.by_node[v.0].as_ref().map(|g| (*id, g)))
    }

    fn accumulate(&self, i: usize, g: &ArrayD<f64>, grads: &mut Vec<Option<ArrayD<f64>>>) {
        let add_to = |grads: &mut Vec<Option<ArrayD<f64>>>, v: Var, delta: ArrayD<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Unary { x, kind } => {
                let xv = &self.nodes[x.0].value;
                let mut d = g.clone();
                match kind {
                    UnaryKind::Neg => d.mapv_inplace(|v| -v),
                    UnaryKind::Abs => d.zip_mut_with(xv, |gv, &v| {
                        *gv *= if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                    UnaryKind::Sqrt => d.zip_mut_with(xv, |gv, &v| *gv *= 0.5 / v.sqrt()),
                    UnaryKind::Exp => d.zip_mut_with(xv, |gv, &v| *gv *= v.exp()),
                    UnaryKind::Ln => d.zip_mut_with(xv, |gv, &v| *gv /= v),
                    UnaryKind::Sin => d.zip_mut_with(xv, |gv, &v| *gv *= v.cos()),
                    UnaryKind::Cos => d.zip_mut_with(xv, |gv, &v| *gv *= -v.sin()),
                    UnaryKind::Sigmoid => d.zip_mut_with(xv, |gv, &v| {
                        let s = sigmoid(v);
                        *gv *= s * (1.0 - s)
                    }),
                    UnaryKind::Elu => d.zip_mut_with(xv, |gv, &v| {
                        *gv *= if v > 0.0 { 1.0 } else { v.exp() }
                    }),
                    UnaryKind::Clamp { lo, hi } => d.zip_mut_with(xv, |gv, &v| {
                        if v <= *lo || v >= *hi {
                            *gv = 0.0
                        }
                    }),
                    UnaryKind::Scale(c) => d.mapv_inplace(|v| v * c),
                    UnaryKind::AddConst(_) => {}
                }
                add_to(grads, *x, d);
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (da, db) = binary_grads(av, bv, g, *kind);
                if self.requires(*a) {
                    add_to(grads, *a, reduce_to_shape(da, av.shape()));
                }
                if self.requires(*b) {
                    add_to(grads, *b, reduce_to_shape(db, bv.shape()));
                }
            }
            Op::Sum { x } => {
                let s = g.iter().next().copied().unwrap();
                add_to(grads, *x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), s));
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len() as f64;
                let s = g.iter().next().copied().unwrap() / n;
                add_to(grads, *x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), s));
            }
            Op::ChannelMean { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let gs = g.as_slice().unwrap();
                let mut d = vec![0.0; c * h * w];
                let inv = 1.0 / c as f64;
                for ci in 0..c {
                    for i in 0..h * w {
                        d[ci * h * w + i] = gs[i] * inv;
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
            Op::GlobalMean { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let gs = g.as_slice().unwrap();
                let inv = 1.0 / (h * w) as f64;
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    let gv = gs[ci] * inv;
                    for i in 0..h * w {
                        d[ci * h * w + i] = gv;
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
            Op::Concat { parts } => {
                let gs = g.as_slice().unwrap();
                let (_, h, w) = dims3(self.nodes[i].value.shape());
                let mut off = 0;
                for p in parts {
                    let cp = self.nodes[p.0].value.shape()[0];
                    let len = cp * h * w;
                    if self.requires(*p) {
                        let d = gs[off..off + len].to_vec();
                        add_to(
                            grads,
                            *p,
                            ArrayD::from_shape_vec(IxDyn(&[cp, h, w]), d).unwrap(),
                        );
                    }
                    off += len;
                }
            }
            Op::PickScalar { x, index } => {
                let mut d = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                d.as_slice_mut().unwrap()[*index] = g.iter().next().copied().unwrap();
                add_to(grads, *x, d);
            }
            Op::BroadcastScalar { x, .. } => {
                add_to(grads, *x, ArrayD::from_elem(IxDyn(&[1]), g.sum()));
            }
            Op::Conv2d { x, w, b, stride } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (cin, h, win) = dims3(xv.shape());
                let cout = wv.shape()[0];
                let (ho, wo) = (conv_out(h, *stride), conv_out(win, *stride));
                let k = cin * 9;
                let n = ho * wo;
                let gs = g.as_slice().unwrap();
                if self.requires(*b) {
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += gs[co * n + i];
                        }
                        db[co] = s;
                    }
                    add_to(grads, *b, ArrayD::from_shape_vec(IxDyn(&[cout]), db).unwrap());
                }
                if self.requires(*w) {
                    // dW = g [cout,n] x cols^T [n,k]
                    let cols = im2col(xv.as_slice().unwrap(), cin, h, win, *stride);
                    let mut dw = vec![0.0; cout * k];
                    unsafe {
                        matrixmultiply::dgemm(
                            cout,
                            n,
                            k,
                            1.0,
                            gs.as_ptr(),
                            n as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            n as isize,
                            0.0,
                            dw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    add_to(
                        grads,
                        *w,
                        ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3]), dw).unwrap(),
                    );
                }
                if self.requires(*x) {
                    // dcols = W^T [k,cout] x g [cout,n]
                    let ws = wv.as_slice().unwrap();
                    let mut dcols = vec![0.0; k * n];
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            cout,
                            n,
                            1.0,
                            ws.as_ptr(),
                            1,
                            k as isize,
                            gs.as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    let dx = col2im(&dcols, cin, h, win, *stride);
                    add_to(
                        grads,
                        *x,
                        ArrayD::from_shape_vec(IxDyn(&[cin, h, win]), dx).unwrap(),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.nodes[x.0].value.as_slice().unwrap();
                let wv = &self.nodes[w.0].value;
                let (m, k) = (wv.shape()[0], wv.shape()[1]);
                let gs = g.as_slice().unwrap();
                if self.requires(*b) {
                    add_to(grads, *b, g.clone());
                }
                if self.requires(*w) {
                    let mut dw = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            dw[i * k + j] = gs[i] * xv[j];
                        }
                    }
                    add_to(grads, *w, ArrayD::from_shape_vec(IxDyn(&[m, k]), dw).unwrap());
                }
                if self.requires(*x) {
                    let ws = wv.as_slice().unwrap();
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        for j in 0..k {
                            dx[j] += ws[i * k + j] * gs[i];
                        }
                    }
                    add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[k]), dx).unwrap());
                }
            }
            Op::BilinearUp2 { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let (ho, wo) = (2 * h, 2 * w);
                let gs = g.as_slice().unwrap();
                let mut d = vec![0.0; c * h * w];
                for oy in 0..ho {
                    let (y0, y1, fy) = up2_coords(oy, h);
                    for ox in 0..wo {
                        let (x0, x1, fx) = up2_coords(ox, w);
                        let w00 = (1.0 - fy) * (1.0 - fx);
                        let w01 = (1.0 - fy) * fx;
                        let w10 = fy * (1.0 - fx);
                        let w11 = fy * fx;
                        for ci in 0..c {
                            let gv = gs[ci * ho * wo + oy * wo + ox];
                            let base = ci * h * w;
                            d[base + y0 * w + x0] += w00 * gv;
                            d[base + y0 * w + x1] += w01 * gv;
                            d[base + y1 * w + x0] += w10 * gv;
                            d[base + y1 * w + x1] += w11 * gv;
                        }
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
            Op::AvgPool3x3 { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let gs = g.as_slice().unwrap();
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    let base = ci * h * w;
                    for oy in 0..h {
                        for ox in 0..w {
                            let gv = gs[base + oy * w + ox] / 9.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let iy = reflect(oy as i64 + dy, h);
                                    let ix = reflect(ox as i64 + dx, w);
                                    d[base + iy * w + ix] += gv;
                                }
                            }
                        }
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
            Op::GridSample { src, gu, gv, valid } => {
                let sv = &self.nodes[src.0].value;
                let (c, hs, ws) = dims3(sv.shape());
                let us = self.nodes[gu.0].value.as_slice().unwrap();
                let vs = self.nodes[gv.0].value.as_slice().unwrap();
                let ss = sv.as_slice().unwrap();
                let n = us.len();
                let gs = g.as_slice().unwrap();
                let need_src = self.requires(*src);
                let need_grid = self.requires(*gu) || self.requires(*gv);
                let mut dsrc = vec![0.0; c * hs * ws];
                let mut dgu = vec![0.0; n];
                let mut dgv = vec![0.0; n];
                for i in 0..n {
                    if !valid[i] {
                        continue;
                    }
                    let (x0, x1, fx) = sample_coords(us[i], ws);
                    let (y0, y1, fy) = sample_coords(vs[i], hs);
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    for ci in 0..c {
                        let gv_out = gs[ci * n + i];
                        let b = ci * hs * ws;
                        if need_src {
                            dsrc[b + y0 * ws + x0] += w00 * gv_out;
                            dsrc[b + y0 * ws + x1] += w01 * gv_out;
                            dsrc[b + y1 * ws + x0] += w10 * gv_out;
                            dsrc[b + y1 * ws + x1] += w11 * gv_out;
                        }
                        if need_grid {
                            let v00 = ss[b + y0 * ws + x0];
                            let v01 = ss[b + y0 * ws + x1];
                            let v10 = ss[b + y1 * ws + x0];
                            let v11 = ss[b + y1 * ws + x1];
                            dgu[i] += gv_out * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            dgv[i] += gv_out * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                }
                if need_src {
                    add_to(
                        grads,
                        *src,
                        ArrayD::from_shape_vec(IxDyn(&[c, hs, ws]), dsrc).unwrap(),
                    );
                }
                if need_grid {
                    let shape = self.nodes[gu.0].value.raw_dim();
                    add_to(grads, *gu, ArrayD::from_shape_vec(shape.clone(), dgu).unwrap());
                    add_to(grads, *gv, ArrayD::from_shape_vec(shape, dgv).unwrap());
                }
            }
            Op::DiffX { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let gs = g.as_slice().unwrap();
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w - 1 {
                            let gv = gs[ci * h * (w - 1) + y * (w - 1) + xx];
                            d[ci * h * w + y * w + xx + 1] += gv;
                            d[ci * h * w + y * w + xx] -= gv;
                        }
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
            Op::DiffY { x } => {
                let (c, h, w) = dims3(self.nodes[x.0].value.shape());
                let gs = g.as_slice().unwrap();
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h - 1 {
                        for xx in 0..w {
                            let gv = gs[ci * (h - 1) * w + y * w + xx];
                            d[ci * h * w + (y + 1) * w + xx] += gv;
                            d[ci * h * w + y * w + xx] -= gv;
                        }
                    }
                }
                add_to(grads, *x, ArrayD::from_shape_vec(IxDyn(&[c, h, w]), d).unwrap());
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Reflect an index into `[0, n)` across the edges (no edge repeat).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

fn up2_coords(o: usize, n: usize) -> (usize, usize, f64) {
    // align_corners=false: input coordinate (o + 0.5)/2 - 0.5, border clamped
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let clamped = src.clamp(0.0, (n - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, clamped - i0 as f64)
}

fn sample_coords(u: f64, n: usize) -> (usize, usize, f64) {
    let c = u.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = ho * wo;
    let mut cols = vec![0.0; cin * 9 * n];
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    let dst_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - 1;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[dst_row + ox] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let n = ho * wo;
    let mut dx = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - 1;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        dx[dst_row + ix as usize] += dcols[src_row + ox];
                    }
                }
            }
        }
    }
    dx
}

fn binary_grads(
    av: &ArrayD<f64>,
    bv: &ArrayD<f64>,
    g: &ArrayD<f64>,
    kind: BinKind,
) -> (ArrayD<f64>, ArrayD<f64>) {
    // Build full-shape gradients first; reduce_to_shape folds them back down.
    let full = |v: &ArrayD<f64>| -> ArrayD<f64> {
        if v.shape() == g.shape() {
            v.clone()
        } else if v.len() == 1 {
            ArrayD::from_elem(g.raw_dim(), v.iter().next().copied().unwrap())
        } else {
            // [1,H,W] -> [C,H,W]
            let (c, h, w) = dims3(g.shape());
            let vs = v.as_slice().unwrap();
            let mut out = vec![0.0; c * h * w];
            for ci in 0..c {
                out[ci * h * w..(ci + 1) * h * w].copy_from_slice(vs);
            }
            ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
        }
    };
    match kind {
        BinKind::Add => (g.clone(), g.clone()),
        BinKind::Sub => (g.clone(), g.mapv(|v| -v)),
        BinKind::Mul => {
            let (af, bf) = (full(av), full(bv));
            (g * &bf, g * &af)
        }
        BinKind::Div => {
            let (af, bf) = (full(av), full(bv));
            let da = g / &bf;
            let db = -(g * &af) / (&bf * &bf);
            (da, db)
        }
        BinKind::Min | BinKind::Max => {
            let (af, bf) = (full(av), full(bv));
            let mut da = g.clone();
            let mut db = g.clone();
            let a_sel = |x: f64, y: f64| match kind {
                BinKind::Min => x <= y,
                _ => x >= y,
            };
            ndarray::Zip::from(&mut da).and(&af).and(&bf).for_each(|d, &x, &y| {
                if !a_sel(x, y) {
                    *d = 0.0
                }
            });
            ndarray::Zip::from(&mut db).and(&af).and(&bf).for_each(|d, &x, &y| {
                if a_sel(x, y) {
                    *d = 0.0
                }
            });
            (da, db)
        }
    }
}

fn reduce_to_shape(g: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if g.shape() == shape {
        return g;
    }
    if shape.len() == 1 && shape[0] == 1 {
        return ArrayD::from_elem(IxDyn(&[1]), g.sum());
    }
    // [C,H,W] -> [1,H,W]
    let (c, h, w) = dims3(g.shape());
    let gs = g.as_slice().unwrap();
    let mut out = vec![0.0; h * w];
    for ci in 0..c {
        for i in 0..h * w {
            out[i] += gs[ci * h * w + i];
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[1, h, w]), out).unwrap()
}

/// Finite-difference utilities shared by tests and the acceptance suite.
pub mod check {
    /// Central finite differences of a scalar function at `x`.
    pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
        let mut xp = x.to_vec();
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Norm-based relative error between two gradient vectors.
    pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff, rel_error};
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        arr(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// FD-check the gradient of `build` w.r.t. a single input tensor.
    fn check_input_grad<F>(shape: &[usize], init: ArrayD<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.input(init.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("grad missing").as_slice().unwrap().to_vec();
        let flat: Vec<f64> = init.iter().copied().collect();
        let fd = finite_diff(
            |v| {
                let mut t = Tape::new();
                let xi = t.input(arr(shape, v.to_vec()));
                let l = build(&mut t, xi);
                t.scalar_value(l)
            },
            &flat,
            1e-6,
        );
        let err = rel_error(&analytic, &fd);
        assert!(err < tol, "gradient mismatch: rel err {err:.3e}");
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[3], vec![1.0, -2.0, 3.0]));
        let b = t.constant(arr(&[3], vec![0.5, 4.0, -1.0]));
        let s = t.add(a, b);
        assert_eq!(t.value(s).as_slice().unwrap(), &[1.5, 2.0, 2.0]);
        let m = t.min(a, b);
        assert_eq!(t.value(m).as_slice().unwrap(), &[0.5, -2.0, -1.0]);
        let sc = t.scalar(2.0);
        let p = t.mul(a, sc);
        assert_eq!(t.value(p).as_slice().unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn broadcast_channel() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let m = t.constant(arr(&[1, 1, 2], vec![10.0, 100.0]));
        let p = t.mul(a, m);
        assert_eq!(t.value(p).as_slice().unwrap(), &[10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn unary_grads_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_arr(&mut rng, &[2, 3, 4], 0.3, 1.7);
        check_input_grad(
            &[2, 3, 4],
            x,
            |t, v| {
                let a = t.sqrt(v);
                let b = t.exp(a);
                let c = t.ln(b);
                let d = t.sigmoid(c);
                let e = t.elu(d);
                let f = t.sin(e);
                let g = t.cos(f);
                t.mean(g)
            },
            1e-6,
        );
    }

    #[test]
    fn binary_grads_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_arr(&mut rng, &[3, 4, 2], 0.5, 2.0);
        let other = rand_arr(&mut rng, &[3, 4, 2], 0.8, 2.5);
        let chan = rand_arr(&mut rng, &[1, 4, 2], 0.5, 1.5);
        check_input_grad(
            &[3, 4, 2],
            x,
            move |t, v| {
                let o = t.constant(other.clone());
                let c = t.constant(chan.clone());
                let a = t.div(v, o);
                let b = t.mul(a, c);
                let d = t.max(b, o);
                let e = t.sub(d, c);
                t.mean(e)
            },
            1e-6,
        );
    }

    #[test]
    fn conv_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&mut rng, &[2, 5, 6], -1.0, 1.0);
        let w = rand_arr(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = rand_arr(&mut rng, &[3], -0.5, 0.5);
        for stride in [1usize, 2] {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(xv, wv, bv, stride);
            // direct convolution
            let (ho, wo) = (conv_out(5, stride), conv_out(6, stride));
            for co in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[[co]];
                        for ci in 0..2 {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = (oy * stride + ky) as i64 - 1;
                                    let ix = (ox * stride + kx) as i64 - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        s += x[[ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        let got = t.value(y)[[co, oy, ox]];
                        assert!((got - s).abs() < 1e-12, "conv mismatch at {co},{oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv_grads_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_arr(&mut rng, &[2, 4, 5], -1.0, 1.0);
        let w = rand_arr(&mut rng, &[3, 2, 3, 3], -0.7, 0.7);
        let b = rand_arr(&mut rng, &[3], -0.2, 0.2);
        for stride in [1usize, 2] {
            // w.r.t. input
            let (wc, bc) = (w.clone(), b.clone());
            check_input_grad(
                &[2, 4, 5],
                x.clone(),
                move |t, v| {
                    let wv = t.constant(wc.clone());
                    let bv = t.constant(bc.clone());
                    let y = t.conv2d(v, wv, bv, stride);
                    let e = t.elu(y);
                    t.mean(e)
                },
                1e-6,
            );
            // w.r.t. weight
            let (xc, bc) = (x.clone(), b.clone());
            check_input_grad(
                &[3, 2, 3, 3],
                w.clone(),
                move |t, v| {
                    let xv = t.constant(xc.clone());
                    let bv = t.constant(bc.clone());
                    let y = t.conv2d(xv, v, bv, stride);
                    let e = t.sqr(y);
                    t.mean(e)
                },
                1e-6,
            );
            // w.r.t. bias
            let (xc, wc) = (x.clone(), w.clone());
            check_input_grad(
                &[3],
                b.clone(),
                move |t, v| {
                    let xv = t.constant(xc.clone());
                    let wv = t.constant(wc.clone());
                    let y = t.conv2d(xv, wv, v, stride);
                    t.mean(y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn pool_upsample_diff_grads_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&mut rng, &[2, 4, 6], -1.0, 1.0);
        check_input_grad(
            &[2, 4, 6],
            x.clone(),
            |t, v| {
                let p = t.avg_pool3x3(v);
                let u = t.bilinear_up2(p);
                let dx = t.diff_x(u);
                let dy = t.diff_y(u);
                let ax = t.abs(dx);
                let ay = t.abs(dy);
                let mx = t.mean(ax);
                let my = t.mean(ay);
                let mu = t.mean(u);
                let s1 = t.add(mx, my);
                t.add(s1, mu)
            },
            1e-5,
        );
    }

    #[test]
    fn grid_sample_values_and_mask() {
        // 1x2x3 source, identity grid reproduces source; out-of-bounds invalid.
        let mut t = Tape::new();
        let src = t.constant(arr(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let gu = t.constant(arr(&[1, 2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 5.0]));
        let gv = t.constant(arr(&[1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let (out, valid) = t.grid_sample(src, gu, gv, None);
        assert_eq!(
            t.value(out).as_slice().unwrap(),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0]
        );
        assert_eq!(valid, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn grid_sample_grads_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = rand_arr(&mut rng, &[2, 5, 5], 0.0, 1.0);
        // keep coords interior and away from integers so FD stays smooth
        let gu0 = arr(&[1, 2, 2], vec![1.3, 2.6, 0.4, 3.3]);
        let gv0 = arr(&[1, 2, 2], vec![0.7, 1.4, 2.3, 3.6]);
        // w.r.t. source
        let (guc, gvc) = (gu0.clone(), gv0.clone());
        check_input_grad(
            &[2, 5, 5],
            src.clone(),
            move |t, v| {
                let gu = t.constant(guc.clone());
                let gv = t.constant(gvc.clone());
                let (o, _) = t.grid_sample(v, gu, gv, None);
                t.mean(o)
            },
            1e-6,
        );
        // w.r.t. grid u
        let (srcc, gvc) = (src.clone(), gv0.clone());
        check_input_grad(
            &[1, 2, 2],
            gu0.clone(),
            move |t, v| {
                let s = t.constant(srcc.clone());
                let gv = t.constant(gvc.clone());
                let (o, _) = t.grid_sample(s, v, gv, None);
                let sq = t.sqr(o);
                t.mean(sq)
            },
            1e-5,
        );
        // w.r.t. grid v
        let (srcc, guc) = (src.clone(), gu0.clone());
        check_input_grad(
            &[1, 2, 2],
            gv0,
            move |t, v| {
                let s = t.constant(srcc.clone());
                let gu = t.constant(guc.clone());
                let (o, _) = t.grid_sample(s, gu, v, None);
                let sq = t.sqr(o);
                t.mean(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn linear_and_reductions_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_arr(&mut rng, &[4], -1.0, 1.0);
        let w = rand_arr(&mut rng, &[3, 4], -1.0, 1.0);
        let (wc,) = (w.clone(),);
        check_input_grad(
            &[4],
            x.clone(),
            move |t, v| {
                let wv = t.constant(wc.clone());
                let b = t.constant(arr(&[3], vec![0.1, -0.2, 0.3]));
                let y = t.linear(v, wv, b);
                let p0 = t.pick(y, 0);
                let p2 = t.pick(y, 2);
                let m = t.mul(p0, p2);
                let bb = t.broadcast(m, &[2, 2, 2]);
                t.mean(bb)
            },
            1e-6,
        );
        let (xc,) = (x.clone(),);
        check_input_grad(
            &[3, 4],
            w,
            move |t, v| {
                let xv = t.constant(xc.clone());
                let b = t.constant(arr(&[3], vec![0.0; 3]));
                let y = t.linear(xv, v, b);
                t.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_channel_mean_global_mean_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_arr(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let other = rand_arr(&mut rng, &[1, 3, 3], -1.0, 1.0);
        check_input_grad(
            &[2, 3, 3],
            x,
            move |t, v| {
                let o = t.constant(other.clone());
                let c = t.concat(&[v, o]);
                let cm = t.channel_mean(c);
                let gm = t.global_mean(c);
                let m1 = t.mean(cm);
                let m2 = t.mean(gm);
                t.add(m1, m2)
            },
            1e-6,
        );
    }

    #[test]
    fn clamp_and_detach() {
        let mut t = Tape::new();
        let x = t.input(arr(&[3], vec![-2.0, 0.5, 2.0]));
        let c = t.clamp(x, -1.0, 1.0);
        assert_eq!(t.value(c).as_slice().unwrap(), &[-1.0, 0.5, 1.0]);
        let s = t.sum(c);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[0.0, 1.0, 0.0]);

        let mut t = Tape::new();
        let x = t.input(arr(&[2], vec![1.0, 2.0]));
        let d = t.detach(x);
        let p = t.mul(x, d);
        let s = t.sum(p);
        let g = t.backward(s);
        // detached branch contributes no gradient: d(x*const)/dx = const
        assert_eq!(g.get(x).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn requires_grad_skips_constants() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2], vec![1.0, 2.0]));
        let b = t.input(arr(&[2], vec![3.0, 4.0]));
        let p = t.mul(a, b);
        let s = t.sum(p);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn param_grads_reported_by_id() {
        let mut t = Tape::new();
        let w = t.param(arr(&[2], vec![1.0, 2.0]), 42);
        let w2 = t.param(arr(&[2], vec![1.0, 2.0]), 42); // same param used twice
        let s1 = t.sum(w);
        let s2 = t.sum(w2);
        let l = t.add(s1, s2);
        let g = t.backward(l);
        let collected: Vec<(usize, f64)> =
            t.param_grads(&g).map(|(id, gr)| (id, gr.sum())).collect();
        assert_eq!(collected, vec![(42, 2.0), (42, 2.0)]);
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let w = rand_arr(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_arr(&mut rng, &[4], -0.1, 0.1);
        let run = || {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(xv, wv, bv, 1);
            let e = t.elu(y);
            let m = t.mean(e);
            let g = t.backward(m);
            (
                t.scalar_value(m).to_bits(),
                g.get(xv)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<u64>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
