//! Reverse-mode automatic differentiation over `f64` ndarray values.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation records its
//! forward value plus a closure that routes the output gradient back to its
//! inputs. Creation order is a topological order, so [`Var::backward`] is a
//! single reverse sweep. One tape lives for one training step and is dropped
//! afterwards.
//!
//! The op set is exactly what the segmentation network and its losses need:
//! dense/convolutional linear algebra, softmax, layer norm, GELU, pooling,
//! bilinear resampling, and the scalar plumbing for loss assembly. Everything
//! is plain `f64`, which keeps the finite-difference checks in `check` honest.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackFn>,
    is_const: bool,
}

/// Append-only arena of autodiff nodes.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    fn push_node(&self, value: ArrayD<f64>, back: Option<BackFn>, is_const: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back,
            is_const,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.push_node(value, back, false)
    }

    /// Inserts a value that receives no gradient.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push_node(value, None, true)
    }

    /// Inserts a differentiable leaf (a parameter or an input under test).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push_node(value, None, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one node on a tape. Cloning is cheap; all clones alias the same
/// node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the swept scalar w.r.t. `var`; zeros if the variable never
    /// influenced it.
    pub fn get(&self, var: &Var) -> ArrayD<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(var.value().shape()))
    }

    pub fn contains(&self, var: &Var) -> bool {
        self.grads[var.id].is_some()
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, g: ArrayD<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Var {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The tape this variable lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a 0-dimensional node.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert!(v.ndim() == 0, "expected scalar, got shape {:?}", v.shape());
        *v.first().unwrap()
    }

    /// Reverse sweep from this scalar node.
    pub fn backward(&self) -> Gradients {
        let v = self.value();
        assert!(v.ndim() == 0, "backward requires a scalar loss");
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            if let Some(back) = &nodes[id].back {
                back(&g, &mut |parent, contribution| {
                    if !nodes[parent].is_const {
                        accumulate(&mut grads[parent], contribution);
                    }
                });
            }
        }
        Gradients { grads }
    }

    fn unary(&self, value: ArrayD<f64>, back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static) -> Var {
        let id = self.id;
        self.tape.push(
            value,
            Some(Box::new(move |g, sink| sink(id, back(g)))),
        )
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        self.tape.push(
            (&*a + &*b).into_dyn(),
            Some(Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.clone());
            })),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        self.tape.push(
            (&*a - &*b).into_dyn(),
            Some(Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (ac, bc) = (a.clone(), b.clone());
        self.tape.push(
            (&*a * &*b).into_dyn(),
            Some(Box::new(move |g, sink| {
                sink(ia, g * &*bc);
                sink(ib, g * &*ac);
            })),
        )
    }

    pub fn div(&self, rhs: &Var) -> Var {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let (ia, ib) = (self.id, rhs.id);
        let (ac, bc) = (a.clone(), b.clone());
        self.tape.push(
            (&*a / &*b).into_dyn(),
            Some(Box::new(move |g, sink| {
                sink(ia, g / &*bc);
                sink(ib, {
                    let mut d = g * &*ac;
                    d.zip_mut_with(&bc, |x, &b| *x = -*x / (b * b));
                    d
                });
            })),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        self.unary(self.value().mapv(|v| v + s), |g| g.clone())
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        self.unary(self.value().mapv(|v| v * s), move |g| g.mapv(|x| x * s))
    }

    pub fn neg(&self) -> Var {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Var {
        let out = self.value().mapv(f64::exp);
        let oc = out.clone();
        self.unary(out, move |g| g * &oc)
    }

    pub fn ln(&self) -> Var {
        let a = self.value();
        let ac = a.clone();
        self.unary(a.mapv(f64::ln), move |g| g / &*ac)
    }

    /// Square root with the subgradient 0 at 0.
    pub fn sqrt(&self) -> Var {
        let out = self.value().mapv(f64::sqrt);
        let oc = out.clone();
        self.unary(out, move |g| {
            let mut d = g.clone();
            d.zip_mut_with(&oc, |x, &s| *x = if s == 0.0 { 0.0 } else { *x / (2.0 * s) });
            d
        })
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn relu(&self) -> Var {
        let a = self.value();
        let ac = a.clone();
        self.unary(a.mapv(|v| v.max(0.0)), move |g| {
            let mut d = g.clone();
            d.zip_mut_with(&ac, |x, &v| {
                if v <= 0.0 {
                    *x = 0.0;
                }
            });
            d
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let a = self.value();
        let ac = a.clone();
        let out = a.mapv(|x| 0.5 * x * (1.0 + (K * (x + C * x.powi(3))).tanh()));
        self.unary(out, move |g| {
            let mut d = g.clone();
            d.zip_mut_with(&ac, |gx, &x| {
                let t = (K * (x + C * x.powi(3))).tanh();
                let dt = (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x);
                *gx *= 0.5 * (1.0 + t) + 0.5 * x * dt;
            });
            d
        })
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self) -> Var {
        let a = self.value();
        let shape = a.shape().to_vec();
        let total = a.sum();
        self.unary(ArrayD::from_elem(IxDyn(&[]), total), move |g| {
            ArrayD::from_elem(IxDyn(&shape), *g.first().unwrap())
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let a = self.value();
        let old: Vec<usize> = a.shape().to_vec();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let out = to_standard(a.as_ref().clone())
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.unary(out, move |g| {
            to_standard(g.clone())
                .into_shape_with_order(IxDyn(&old))
                .expect("reshape back")
        })
    }

    pub fn transpose2(&self) -> Var {
        let av = self.value();
        let a = as2(&av);
        self.unary(to_standard(a.t().to_owned()).into_dyn(), |g| {
            to_standard(as2(g).t().to_owned()).into_dyn()
        })
    }

    /// `[c, h, w]` feature map to `[h * w, c]` token matrix.
    pub fn tokens_from_chw(&self) -> Var {
        let av = self.value();
        let a = as3(&av);
        let (c, h, w) = a.dim();
        let mut out = Array2::zeros((h * w, c));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[i * w + j, ci]] = a[[ci, i, j]];
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g = as2(g);
            let mut d = Array3::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        d[[ci, i, j]] = g[[i * w + j, ci]];
                    }
                }
            }
            d.into_dyn()
        })
    }

    /// `[n, c]` token matrix back to `[c, h, w]` with `n = h * w`.
    pub fn tokens_to_chw(&self, h: usize, w: usize) -> Var {
        let av = self.value();
        let a = as2(&av);
        let (n, c) = a.dim();
        assert_eq!(n, h * w, "token count mismatch");
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i, j]] = a[[i * w + j, ci]];
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g = as3(g);
            let mut d = Array2::zeros((n, c));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        d[[i * w + j, ci]] = g[[ci, i, j]];
                    }
                }
            }
            d.into_dyn()
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let av = self.value();
        let a = as2(&av);
        let (n, m) = a.dim();
        assert!(start + len <= m, "column slice out of range");
        let out = a.slice(ndarray::s![.., start..start + len]).to_owned();
        self.unary(out.into_dyn(), move |g| {
            let g = as2(g);
            let mut d = Array2::zeros((n, m));
            d.slice_mut(ndarray::s![.., start..start + len]).assign(&g);
            d.into_dyn()
        })
    }

    pub fn crop_spatial(&self, r0: usize, c0: usize, hh: usize, ww: usize) -> Var {
        let av = self.value();
        let a = as3(&av);
        let (c, h, w) = a.dim();
        assert!(r0 + hh <= h && c0 + ww <= w, "crop out of range");
        let out = a
            .slice(ndarray::s![.., r0..r0 + hh, c0..c0 + ww])
            .to_owned();
        self.unary(out.into_dyn(), move |g| {
            let g = as3(g);
            let mut d = Array3::zeros((c, h, w));
            d.slice_mut(ndarray::s![.., r0..r0 + hh, c0..c0 + ww])
                .assign(&g);
            d.into_dyn()
        })
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, rhs: &Var) -> Var {
        let av = self.value();
        let a = as2(&av);
        let bv = rhs.value();
        let b = as2(&bv);
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
        let (ia, ib) = (self.id, rhs.id);
        let (ac, bc) = (self.value(), rhs.value());
        self.tape.push(
            a.dot(&b).into_dyn(),
            Some(Box::new(move |g, sink| {
                let g = as2(g);
                let a = as2(&ac);
                let b = as2(&bc);
                sink(ia, g.dot(&b.t()).into_dyn());
                sink(ib, a.t().dot(&g).into_dyn());
            })),
        )
    }

    /// Adds a `[k]` bias row-wise to a `[n, k]` matrix.
    pub fn add_row_broadcast(&self, bias: &Var) -> Var {
        let av = self.value();
        let a = as2(&av);
        let biasv = bias.value();
        let b = as1(&biasv);
        assert_eq!(a.ncols(), b.len(), "bias length mismatch");
        let (ia, ib) = (self.id, bias.id);
        self.tape.push(
            (&a + &b).into_dyn(),
            Some(Box::new(move |g, sink| {
                let g = as2(g);
                sink(ia, g.to_owned().into_dyn());
                sink(ib, g.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// `x.matmul(w) + b` for `[n, d] x [d, k] + [k]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Var {
        self.matmul(w).add_row_broadcast(b)
    }

    pub fn softmax_axis(&self, axis: usize) -> Var {
        let av = self.value();
        let a = as2(&av);
        assert!(axis < 2);
        let mut out = a.to_owned();
        let lanes_axis = Axis(axis);
        for mut lane in out.lanes_mut(lanes_axis) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let oc = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let g = as2(g);
            let mut d = g.to_owned();
            for (mut dl, sl) in d.lanes_mut(lanes_axis).into_iter().zip(oc.lanes(lanes_axis)) {
                let dot: f64 = dl.iter().zip(sl.iter()).map(|(x, s)| x * s).sum();
                for (x, &s) in dl.iter_mut().zip(sl.iter()) {
                    *x = (*x - dot) * s;
                }
            }
            d.into_dyn()
        })
    }

    /// Row-wise softmax of a `[n, m]` matrix.
    pub fn softmax_rows(&self) -> Var {
        self.softmax_axis(1)
    }

    /// Layer norm over the last axis of `[n, d]`, with learnable gain/bias.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let xv = self.value();
        let x = as2(&xv);
        let gammav = gamma.value();
        let g_ = as1(&gammav);
        let betav = beta.value();
        let b_ = as1(&betav);
        let (n, d) = x.dim();
        assert_eq!(g_.len(), d);
        assert_eq!(b_.len(), d);

        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                xhat[[i, j]] = (x[[i, j]] - mu) * istd;
            }
        }
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = xhat[[i, j]] * g_[j] + b_[j];
            }
        }

        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let gamma_c = g_.to_owned();
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g = as2(g);
                let mut dgamma = Array1::zeros(d);
                let mut dbeta = Array1::zeros(d);
                let mut dx = Array2::zeros((n, d));
                for i in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = g[[i, j]] * gamma_c[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[[i, j]];
                        dgamma[j] += g[[i, j]] * xhat[[i, j]];
                        dbeta[j] += g[[i, j]];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = g[[i, j]] * gamma_c[j];
                        dx[[i, j]] =
                            (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat) * inv_std[i];
                    }
                }
                sink(ix, dx.into_dyn());
                sink(ig, dgamma.into_dyn());
                sink(ib, dbeta.into_dyn());
            })),
        )
    }

    // ---- convolution -------------------------------------------------------

    /// 2D convolution: input `[cin, h, w]`, weight `[cout, cin, kh, kw]`,
    /// bias `[cout]`, zero padding.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let xv = self.value();
        let x = as3(&xv);
        let wv = weight.value();
        let w4 = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let biasv = bias.value();
        let b = as1(&biasv);
        let (cin, h, w) = x.dim();
        let (cout, wcin, kh, kw) = w4.dim();
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert_eq!(b.len(), cout);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel too large");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x.to_owned(), kh, kw, stride, pad, ho, wo);
        let wmat = w4
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let mut out_mat = wmat.dot(&cols);
        for c in 0..cout {
            out_mat.row_mut(c).mapv_inplace(|v| v + b[c]);
        }
        let out = out_mat.into_shape_with_order((cout, ho, wo)).unwrap();

        let (ix, iw, ibias) = (self.id, weight.id, bias.id);
        let cols_rc = Rc::new(cols);
        let wmat_rc = Rc::new(wmat);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let gmat = to_standard(as3(g).to_owned())
                    .into_shape_with_order((cout, ho * wo))
                    .expect("conv2d gradient reshape");
                // dot with a transposed rhs may hand back fortran layout.
                let dw = to_standard(gmat.dot(&cols_rc.t()));
                sink(
                    iw,
                    dw.into_shape_with_order((cout, cin, kh, kw))
                        .expect("conv2d weight-grad reshape")
                        .into_dyn(),
                );
                sink(ibias, gmat.sum_axis(Axis(1)).into_dyn());
                let dcols = wmat_rc.t().dot(&gmat);
                let dx = col2im(&dcols, cin, h, w, kh, kw, stride, pad, ho, wo);
                sink(ix, dx.into_dyn());
            })),
        )
    }

    // ---- resampling and pooling ---------------------------------------------

    /// Bilinear resize of `[c, h, w]` to `[c, oh, ow]` (half-pixel centers).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Var {
        let xv = self.value();
        let x = as3(&xv);
        let (c, h, w) = x.dim();
        let plan_r = bilinear_plan(h, oh);
        let plan_c = bilinear_plan(w, ow);
        let mut out = Array3::zeros((c, oh, ow));
        for ch in 0..c {
            for i in 0..oh {
                let (r0, r1, tr) = plan_r[i];
                for j in 0..ow {
                    let (c0, c1, tc) = plan_c[j];
                    let top = x[[ch, r0, c0]] * (1.0 - tc) + x[[ch, r0, c1]] * tc;
                    let bot = x[[ch, r1, c0]] * (1.0 - tc) + x[[ch, r1, c1]] * tc;
                    out[[ch, i, j]] = top * (1.0 - tr) + bot * tr;
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g = as3(g);
            let mut d = Array3::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..oh {
                    let (r0, r1, tr) = plan_r[i];
                    for j in 0..ow {
                        let (c0, c1, tc) = plan_c[j];
                        let gv = g[[ch, i, j]];
                        d[[ch, r0, c0]] += gv * (1.0 - tr) * (1.0 - tc);
                        d[[ch, r0, c1]] += gv * (1.0 - tr) * tc;
                        d[[ch, r1, c0]] += gv * tr * (1.0 - tc);
                        d[[ch, r1, c1]] += gv * tr * tc;
                    }
                }
            }
            d.into_dyn()
        })
    }

    /// Global max over the spatial axes of `[c, h, w]`; ties go to the first
    /// position in row-major order.
    pub fn global_max_pool(&self) -> Var {
        let xv = self.value();
        let x = as3(&xv);
        let (c, h, w) = x.dim();
        let mut out = Array1::zeros(c);
        let mut arg = vec![(0usize, 0usize); c];
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            for i in 0..h {
                for j in 0..w {
                    if x[[ch, i, j]] > best {
                        best = x[[ch, i, j]];
                        arg[ch] = (i, j);
                    }
                }
            }
            out[ch] = best;
        }
        self.unary(out.into_dyn(), move |g| {
            let g = as1(g);
            let mut d = Array3::zeros((c, h, w));
            for ch in 0..c {
                let (i, j) = arg[ch];
                d[[ch, i, j]] = g[ch];
            }
            d.into_dyn()
        })
    }

    /// Adaptive average pooling of `[c, h, w]` onto an `[c, s0, s1]` grid.
    pub fn adaptive_avg_pool(&self, s0: usize, s1: usize) -> Var {
        let xv = self.value();
        let x = as3(&xv);
        let (c, h, w) = x.dim();
        assert!(s0 <= h && s1 <= w, "pool output larger than input");
        let bounds = |n: usize, s: usize, i: usize| -> (usize, usize) {
            (i * n / s, ((i + 1) * n).div_ceil(s))
        };
        let mut out = Array3::zeros((c, s0, s1));
        for ch in 0..c {
            for i in 0..s0 {
                let (r0, r1) = bounds(h, s0, i);
                for j in 0..s1 {
                    let (c0, c1) = bounds(w, s1, j);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += x[[ch, r, cc]];
                        }
                    }
                    out[[ch, i, j]] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        self.unary(out.into_dyn(), move |g| {
            let g = as3(g);
            let mut d = Array3::zeros((c, h, w));
            for ch in 0..c {
                for i in 0..s0 {
                    let (r0, r1) = bounds(h, s0, i);
                    for j in 0..s1 {
                        let (c0, c1) = bounds(w, s1, j);
                        let share = g[[ch, i, j]] / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                d[[ch, r, cc]] += share;
                            }
                        }
                    }
                }
            }
            d.into_dyn()
        })
    }

    // ---- normalization ------------------------------------------------------

    /// Normalizes every column of `[d, m]` to unit L2 norm.
    pub fn l2_normalize_cols(&self) -> Var {
        let xv = self.value();
        let x = as2(&xv);
        let (d, m) = x.dim();
        let mut norms = Array1::zeros(m);
        let mut out = x.to_owned();
        for j in 0..m {
            let n = x.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = n.max(1e-12);
            norms[j] = n;
            out.column_mut(j).mapv_inplace(|v| v / n);
        }
        let oc = out.clone();
        self.unary(out.into_dyn(), move |g| {
            let g = as2(g);
            let mut dx = Array2::zeros((d, m));
            for j in 0..m {
                let dot: f64 = g.column(j).iter().zip(oc.column(j)).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    dx[[i, j]] = (g[[i, j]] - oc[[i, j]] * dot) / norms[j];
                }
            }
            dx.into_dyn()
        })
    }

    /// Normalizes a `[d]` vector to unit L2 norm.
    pub fn l2_normalize_vec(&self) -> Var {
        let d = self.value().len();
        self.reshape(&[d, 1]).l2_normalize_cols().reshape(&[d])
    }

    // ---- concatenation --------------------------------------------------------

    pub fn concat_channels(&self, rhs: &Var) -> Var {
        let av = self.value();
        let a = as3(&av);
        let bv = rhs.value();
        let b = as3(&bv);
        let (c1, h, w) = a.dim();
        let (c2, h2, w2) = b.dim();
        assert_eq!((h, w), (h2, w2), "concat spatial mismatch");
        let mut out = Array3::zeros((c1 + c2, h, w));
        out.slice_mut(ndarray::s![..c1, .., ..]).assign(&a);
        out.slice_mut(ndarray::s![c1.., .., ..]).assign(&b);
        let (ia, ib) = (self.id, rhs.id);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g = as3(g);
                sink(ia, g.slice(ndarray::s![..c1, .., ..]).to_owned().into_dyn());
                sink(ib, g.slice(ndarray::s![c1.., .., ..]).to_owned().into_dyn());
            })),
        )
    }

    pub fn concat_cols(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let mats: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = as2(&mats[0]).nrows();
        let widths: Vec<usize> = mats.iter().map(|m| as2(m).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::zeros((n, total));
        let mut off = 0;
        for m in &mats {
            let m = as2(m);
            out.slice_mut(ndarray::s![.., off..off + m.ncols()]).assign(&m);
            off += m.ncols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g = as2(g);
                let mut off = 0;
                for (id, w) in ids.iter().zip(&widths) {
                    sink(
                        *id,
                        g.slice(ndarray::s![.., off..off + w]).to_owned().into_dyn(),
                    );
                    off += w;
                }
            })),
        )
    }
}

/// Copies into standard (row-major) layout when needed; transposed views
/// otherwise leak fortran-layout buffers into reshape operations.
fn to_standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ndarray::Array::from_shape_vec(shape, a.iter().cloned().collect()).unwrap()
    }
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d value")
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3-d value")
}

fn im2col(
    x: &Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as i64 - pad as i64;
                    if ii < 0 || ii >= h as i64 {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as i64 - pad as i64;
                        if jj < 0 || jj >= w as i64 {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[c, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as i64 - pad as i64;
                    if ii < 0 || ii >= h as i64 {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as i64 - pad as i64;
                        if jj < 0 || jj >= w as i64 {
                            continue;
                        }
                        dx[[c, ii as usize, jj as usize]] += dcols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    dx
}

/// Precomputed source indices and weights for one bilinear output axis.
fn bilinear_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Finite-difference gradient checking.
pub mod check {
    use ndarray::ArrayD;

    /// Central-difference gradient of `f` w.r.t. each input element.
    pub fn numeric_gradient(
        f: &dyn Fn(&[ArrayD<f64>]) -> f64,
        inputs: &[ArrayD<f64>],
        eps: f64,
    ) -> Vec<ArrayD<f64>> {
        let mut grads = Vec::with_capacity(inputs.len());
        for k in 0..inputs.len() {
            let mut g = ArrayD::zeros(inputs[k].shape());
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                *plus[k].iter_mut().nth(idx).unwrap() += eps;
                *minus[k].iter_mut().nth(idx).unwrap() -= eps;
                let d = (f(&plus) - f(&minus)) / (2.0 * eps);
                *g.iter_mut().nth(idx).unwrap() = d;
            }
            grads.push(g);
        }
        grads
    }

    /// Relative error with an absolute floor of 1 so tiny gradients compare
    /// absolutely.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
    }

    /// Largest relative error between two gradient sets.
    pub fn max_relative_error(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .flat_map(|(a, n)| a.iter().zip(n.iter()))
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }
}
