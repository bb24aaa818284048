//! Differentiable operations on [`Graph`] nodes.
//!
//! Every method appends one node whose VJP closure captures the `Rc`'d
//! values it needs. Scalar-valued nodes use rank-0 tensors.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::conv::{
    bias_grad, conv2d_forward, conv2d_input_grad, conv2d_weight_grad, conv3d_forward,
    conv3d_input_grad, conv3d_weight_grad, Geom2d, Geom3d, Padding,
};
use crate::tensor::{Graph, Tensor, Var};

/// Scaled exponential linear unit constants (self-normalizing networks).
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Activation kinds used by the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Selu,
    Sigmoid,
    LeakyRelu(f64),
    Softmax(usize),
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert!(self.check_same_shape("add", a, b).is_ok());
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shapes");
        self.push_op(v, vec![a, b], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert!(self.check_same_shape("sub", a, b).is_ok());
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub shapes");
        self.push_op(v, vec![a, b], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert!(self.check_same_shape("mul", a, b).is_ok());
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let v = av.zip_map(&bv, |x, y| x * y).expect("mul shapes");
        self.push_op(v, vec![a, b], move |g| {
            vec![
                Some(g.zip_map(&bv, |gi, yi| gi * yi).expect("mul vjp")),
                Some(g.zip_map(&av, |gi, xi| gi * xi).expect("mul vjp")),
            ]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale_const(a, -1.0)
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(v, vec![a], move |g| vec![Some(g.scale(c))])
    }

    /// Elementwise product with a fixed tensor (dropout masks, derivative
    /// masks in adjoint chains).
    pub fn mul_const(&mut self, a: Var, mask: Rc<Tensor>) -> Var {
        let v = self.value(a).zip_map(&mask, |x, m| x * m).expect("mul_const shapes");
        self.push_op(v, vec![a], move |g| {
            vec![Some(g.zip_map(&mask, |gi, m| gi * m).expect("mul_const vjp"))]
        })
    }

    // ---- activations ----

    pub fn selu(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let v = av.map(|x| {
            if x > 0.0 {
                SELU_SCALE * x
            } else {
                SELU_SCALE * SELU_ALPHA * (x.exp() - 1.0)
            }
        });
        self.push_op(v, vec![a], move |g| {
            let gx = Tensor::from_fn(av.shape(), |i| {
                let x = av.data()[i];
                let d = if x > 0.0 { SELU_SCALE } else { SELU_SCALE * SELU_ALPHA * x.exp() };
                g.data()[i] * d
            });
            vec![Some(gx)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_scalar);
        let yv = Rc::new(v.clone());
        self.push_op(v, vec![a], move |g| {
            let gx = Tensor::from_fn(yv.shape(), |i| {
                let y = yv.data()[i];
                g.data()[i] * y * (1.0 - y)
            });
            vec![Some(gx)]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value_rc(a);
        let v = av.map(|x| if x > 0.0 { x } else { slope * x });
        self.push_op(v, vec![a], move |g| {
            let gx = Tensor::from_fn(av.shape(), |i| {
                let d = if av.data()[i] > 0.0 { 1.0 } else { slope };
                g.data()[i] * d
            });
            vec![Some(gx)]
        })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let v = av.map(softplus_scalar);
        self.push_op(v, vec![a], move |g| {
            let gx = Tensor::from_fn(av.shape(), |i| g.data()[i] * sigmoid_scalar(av.data()[i]));
            vec![Some(gx)]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let lanes = LaneIter::new(&shape, axis);
        let mut v = self.value(a).clone();
        lanes.for_each_lane(v.data_mut(), |lane, stride, len| {
            let mut m = f64::NEG_INFINITY;
            for j in 0..len {
                m = m.max(lane[j * stride]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (lane[j * stride] - m).exp();
                lane[j * stride] = e;
                sum += e;
            }
            for j in 0..len {
                lane[j * stride] /= sum;
            }
        });
        let yv = Rc::new(v.clone());
        let lanes_b = LaneIter::new(&shape, axis);
        Ok(self.push_op(v, vec![a], move |g| {
            let mut gx = g.clone();
            let y = yv.data();
            let base_of = |ptr: &[f64], lane_ptr: &[f64]| -> usize {
                (lane_ptr.as_ptr() as usize - ptr.as_ptr() as usize) / std::mem::size_of::<f64>()
            };
            lanes_b.for_each_lane(gx.data_mut(), |lane, stride, len| {
                let base = base_of(g.data(), lane);
                let mut s = 0.0;
                for j in 0..len {
                    s += lane[j * stride] * y[base + j * stride];
                }
                for j in 0..len {
                    let yj = y[base + j * stride];
                    lane[j * stride] = yj * (lane[j * stride] - s);
                }
            });
            vec![Some(gx)]
        }))
    }

    /// Dispatch for the model's activation set.
    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        Ok(match kind {
            Activation::Selu => self.selu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::LeakyRelu(slope) => self.leaky_relu(a, slope),
            Activation::Softmax(axis) => self.softmax(a, axis)?,
        })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, vec![a], move |g| {
            vec![Some(Tensor::full(&shape, g.scalar_value()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push_op(v, vec![a], move |g| {
            vec![Some(Tensor::full(&shape, g.scalar_value() / n))]
        })
    }

    /// Sum of squared elements, as a scalar node.
    pub fn sumsq(&mut self, a: Var) -> Var {
        let av = self.value_rc(a);
        let v = Tensor::scalar(av.data().iter().map(|x| x * x).sum());
        self.push_op(v, vec![a], move |g| {
            let gs = g.scalar_value();
            vec![Some(av.map(|x| 2.0 * gs * x))]
        })
    }

    /// Mean absolute deviation from a fixed target.
    pub fn mae(&mut self, a: Var, target: Rc<Tensor>) -> Var {
        let av = self.value_rc(a);
        debug_assert_eq!(av.shape(), target.shape());
        let n = av.numel() as f64;
        let v = Tensor::scalar(
            av.data().iter().zip(target.data()).map(|(x, t)| (x - t).abs()).sum::<f64>() / n,
        );
        self.push_op(v, vec![a], move |g| {
            let gs = g.scalar_value() / n;
            let gx = Tensor::from_fn(av.shape(), |i| {
                let d = av.data()[i] - target.data()[i];
                gs * if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![Some(gx)]
        })
    }

    /// Mean squared deviation from a fixed target.
    pub fn mse(&mut self, a: Var, target: Rc<Tensor>) -> Var {
        let av = self.value_rc(a);
        debug_assert_eq!(av.shape(), target.shape());
        let n = av.numel() as f64;
        let v = Tensor::scalar(
            av.data().iter().zip(target.data()).map(|(x, t)| (x - t) * (x - t)).sum::<f64>() / n,
        );
        self.push_op(v, vec![a], move |g| {
            let gs = 2.0 * g.scalar_value() / n;
            let gx = Tensor::from_fn(av.shape(), |i| gs * (av.data()[i] - target.data()[i]));
            vec![Some(gx)]
        })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        debug_assert!(self.check_same_shape("dot", a, b).is_ok());
        let av = self.value_rc(a);
        let bv = self.value_rc(b);
        let v = Tensor::scalar(av.dot(&bv));
        self.push_op(v, vec![a, b], move |g| {
            let gs = g.scalar_value();
            vec![Some(bv.scale(gs)), Some(av.scale(gs))]
        })
    }

    /// Euclidean norm as a scalar node. The derivative is guarded near zero.
    pub fn norm2(&mut self, a: Var) -> Var {
        let ss = self.sumsq(a);
        self.ssqrt(ss)
    }

    // ---- scalar nodes ----

    fn scalar_binary(
        &mut self,
        a: Var,
        b: Var,
        v: f64,
        da: f64,
        db: f64,
    ) -> Var {
        self.push_op(Tensor::scalar(v), vec![a, b], move |g| {
            let gs = g.scalar_value();
            vec![Some(Tensor::scalar(gs * da)), Some(Tensor::scalar(gs * db))]
        })
    }

    pub fn sadd(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).scalar_value(), self.value(b).scalar_value());
        self.scalar_binary(a, b, x + y, 1.0, 1.0)
    }

    pub fn ssub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).scalar_value(), self.value(b).scalar_value());
        self.scalar_binary(a, b, x - y, 1.0, -1.0)
    }

    pub fn smul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).scalar_value(), self.value(b).scalar_value());
        self.scalar_binary(a, b, x * y, y, x)
    }

    pub fn sdiv(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a).scalar_value(), self.value(b).scalar_value());
        self.scalar_binary(a, b, x / y, 1.0 / y, -x / (y * y))
    }

    pub fn sadd_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a).scalar_value();
        self.push_op(Tensor::scalar(x + c), vec![a], |g| vec![Some(g.clone())])
    }

    /// `max(a, c)` with a fixed floor; gradient passes only when `a > c`.
    pub fn smax_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a).scalar_value();
        let pass = x > c;
        self.push_op(Tensor::scalar(x.max(c)), vec![a], move |g| {
            vec![Some(Tensor::scalar(if pass { g.scalar_value() } else { 0.0 }))]
        })
    }

    /// Square root of a scalar; the exact value is kept but the derivative
    /// denominator is floored at 1e-12 so zero inputs stay finite.
    pub fn ssqrt(&mut self, a: Var) -> Var {
        let x = self.value(a).scalar_value();
        let y = x.max(0.0).sqrt();
        self.push_op(Tensor::scalar(y), vec![a], move |g| {
            vec![Some(Tensor::scalar(g.scalar_value() * 0.5 / y.max(1e-12)))]
        })
    }

    // ---- structure ----

    /// Concatenation along `axis`; every part must agree on the other axes.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0;
        let mut part_axis = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            part_axis.push(s[axis]);
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let mut offset = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let pd = self.value(p).data();
                let pa = part_axis[pi];
                for o in 0..outer {
                    let src = o * pa * inner;
                    let dst = (o * axis_total + offset) * inner;
                    od[dst..dst + pa * inner].copy_from_slice(&pd[src..src + pa * inner]);
                }
                offset += pa;
            }
        }
        let shapes: Vec<Vec<usize>> =
            parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        Ok(self.push_op(out, parts.to_vec(), move |g| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for s in &shapes {
                let pa = s[axis];
                let mut gp = Tensor::zeros(s);
                {
                    let gpd = gp.data_mut();
                    for o in 0..outer {
                        let src = (o * axis_total + offset) * inner;
                        let dst = o * pa * inner;
                        gpd[dst..dst + pa * inner].copy_from_slice(&gd[src..src + pa * inner]);
                    }
                }
                grads.push(Some(gp));
                offset += pa;
            }
            grads
        }))
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("stack0", "no parts".to_string()));
        }
        let inner_shape = self.value(parts[0]).shape().to_vec();
        let inner: usize = inner_shape.iter().product();
        let mut out_shape = vec![parts.len()];
        out_shape.extend_from_slice(&inner_shape);
        let mut out = Tensor::zeros(&out_shape);
        for (i, &p) in parts.iter().enumerate() {
            let s = self.value(p);
            if s.shape() != inner_shape.as_slice() {
                return Err(Error::shape("stack0", format!("{:?} vs {:?}", s.shape(), inner_shape)));
            }
            out.data_mut()[i * inner..(i + 1) * inner].copy_from_slice(s.data());
        }
        let n = parts.len();
        Ok(self.push_op(out, parts.to_vec(), move |g| {
            (0..n)
                .map(|i| {
                    Some(
                        Tensor::new(
                            inner_shape.clone(),
                            g.data()[i * inner..(i + 1) * inner].to_vec(),
                        )
                        .expect("stack0 vjp"),
                    )
                })
                .collect()
        }))
    }

    /// Selects `x[index]` along the leading axis, dropping that axis.
    pub fn index_axis0(&mut self, a: Var, index: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        debug_assert!(!shape.is_empty() && index < shape[0]);
        let inner: usize = shape[1..].iter().product();
        let v = Tensor::new(
            shape[1..].to_vec(),
            self.value(a).data()[index * inner..(index + 1) * inner].to_vec(),
        )
        .expect("index_axis0");
        self.push_op(v, vec![a], move |g| {
            let mut gx = Tensor::zeros(&shape);
            gx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        })
    }

    /// Gathers scalar nodes into a rank-1 tensor.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        let v = Tensor::new(
            vec![parts.len()],
            parts.iter().map(|&p| self.value(p).scalar_value()).collect(),
        )
        .expect("stack_scalars");
        let n = parts.len();
        self.push_op(v, parts.to_vec(), move |g| {
            (0..n).map(|i| Some(Tensor::scalar(g.data()[i]))).collect()
        })
    }

    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        debug_assert!(!shape.is_empty());
        let t = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut v = Tensor::zeros(&shape[1..]);
        {
            let vd = v.data_mut();
            let ad = self.value(a).data();
            for i in 0..t {
                for j in 0..inner {
                    vd[j] += ad[i * inner + j];
                }
            }
            for x in vd.iter_mut() {
                *x /= t as f64;
            }
        }
        self.push_op(v, vec![a], move |g| {
            let mut gx = Tensor::zeros(&shape);
            {
                let gxd = gx.data_mut();
                let gd = g.data();
                let s = 1.0 / t as f64;
                for i in 0..t {
                    for j in 0..inner {
                        gxd[i * inner + j] = gd[j] * s;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Repeats a tensor `t` times along a new leading axis.
    pub fn broadcast_axis0(&mut self, a: Var, t: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        let inner: usize = shape.iter().product();
        let mut out_shape = vec![t];
        out_shape.extend_from_slice(&shape);
        let mut v = Tensor::zeros(&out_shape);
        for i in 0..t {
            v.data_mut()[i * inner..(i + 1) * inner].copy_from_slice(self.value(a).data());
        }
        self.push_op(v, vec![a], move |g| {
            let mut gx = Tensor::zeros(&shape);
            {
                let gxd = gx.data_mut();
                for i in 0..t {
                    for j in 0..inner {
                        gxd[j] += g.data()[i * inner + j];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-channel spatial mean: `[h,w,c] -> [c]`.
    pub fn gap(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        debug_assert_eq!(shape.len(), 3);
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let n = (h * w) as f64;
        let mut v = Tensor::zeros(&[c]);
        {
            let vd = v.data_mut();
            for row in self.value(a).data().chunks_exact(c) {
                for (acc, &x) in vd.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            for x in vd.iter_mut() {
                *x /= n;
            }
        }
        self.push_op(v, vec![a], move |g| {
            let mut gx = Tensor::zeros(&shape);
            {
                let gd = g.data();
                for row in gx.data_mut().chunks_exact_mut(c) {
                    for (o, &gv) in row.iter_mut().zip(gd) {
                        *o = gv / n;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    // ---- scalar-tensor coupling ----

    /// `y = s * x` for a scalar node `s`.
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value_rc(x);
        let sv = self.value(s).scalar_value();
        let v = xv.scale(sv);
        self.push_op(v, vec![x, s], move |g| {
            let gs = g.dot(&xv);
            vec![Some(g.scale(sv)), Some(Tensor::scalar(gs))]
        })
    }

    /// `y = x / s` for a scalar node `s`.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value_rc(x);
        let sv = self.value(s).scalar_value();
        let v = xv.scale(1.0 / sv);
        self.push_op(v, vec![x, s], move |g| {
            let gs = -g.dot(&xv) / (sv * sv);
            vec![Some(g.scale(1.0 / sv)), Some(Tensor::scalar(gs))]
        })
    }

    /// Rayleigh quotient `u^T M v` of the matrix view `M[o, j] = w[j*rows + o]`
    /// of a kernel tensor `w` (rows = output channels, laid out innermost).
    /// `u` and `v` are fixed vectors.
    pub fn sn_sigma(&mut self, w: Var, u: Rc<Tensor>, v: Rc<Tensor>) -> Var {
        let rows = u.numel();
        let cols = v.numel();
        let wv = self.value_rc(w);
        debug_assert_eq!(wv.numel(), rows * cols);
        let mut sigma = 0.0;
        for j in 0..cols {
            let vj = v.data()[j];
            if vj == 0.0 {
                continue;
            }
            let base = j * rows;
            for o in 0..rows {
                sigma += u.data()[o] * wv.data()[base + o] * vj;
            }
        }
        let wshape = wv.shape().to_vec();
        self.push_op(Tensor::scalar(sigma), vec![w], move |g| {
            let gs = g.scalar_value();
            let mut gw = Tensor::zeros(&wshape);
            {
                let gwd = gw.data_mut();
                for j in 0..cols {
                    let vj = v.data()[j] * gs;
                    let base = j * rows;
                    for o in 0..rows {
                        gwd[base + o] = u.data()[o] * vj;
                    }
                }
            }
            vec![Some(gw)]
        })
    }

    /// Dense layer `y = W x + b` on vectors (`W` is `[out, in]`).
    pub fn dense(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        let wv = self.value_rc(w);
        let xv = self.value_rc(x);
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        debug_assert_eq!(xv.numel(), n);
        let mut y = Tensor::zeros(&[m]);
        for i in 0..m {
            let row = &wv.data()[i * n..(i + 1) * n];
            y.data_mut()[i] = row.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        }
        if let Some(bv) = b {
            y.add_assign(self.value(bv));
        }
        let mut parents = vec![w, x];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push_op(y, parents, move |g| {
            let gd = g.data();
            let mut gw = Tensor::zeros(&[m, n]);
            let mut gx = Tensor::zeros(&[n]);
            for i in 0..m {
                let gi = gd[i];
                let wr = &wv.data()[i * n..(i + 1) * n];
                let gwr = &mut gw.data_mut()[i * n..(i + 1) * n];
                for j in 0..n {
                    gwr[j] = gi * xv.data()[j];
                }
                for j in 0..n {
                    gx.data_mut()[j] += gi * wr[j];
                }
            }
            let mut out = vec![Some(gw), Some(gx)];
            if has_bias {
                out.push(Some(g.clone()));
            }
            out
        })
    }

    // ---- convolutions ----

    /// 2-D cross-correlation with optional bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = Geom2d::resolve(
            self.value(x).shape(),
            self.value(w).shape(),
            stride,
            dilation,
            padding,
        )?;
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let y = conv2d_forward(&xv, &wv, b.map(|bv| self.value(bv)), &geom);
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        let out_c = geom.out_c;
        Ok(self.push_op(y, parents, move |g| {
            let gx = conv2d_input_grad(&wv, g, &geom);
            let gw = conv2d_weight_grad(&xv, g, &geom);
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(bias_grad(g, out_c)));
            }
            out
        }))
    }

    /// Transposed (fractionally-strided) 2-D convolution: the exact adjoint
    /// of `conv2d` with the same kernel/stride/padding. Kernel layout is
    /// `[kh, kw, c_out, c_in]` where `c_in` is this layer's input channels.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d_transpose", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (kh, kw, out_c, in_c) = (ws[0], ws[1], ws[2], ws[3]);
        if xs[2] != in_c {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input has {} channels but kernel expects {in_c}", xs[2]),
            ));
        }
        // Output extent of the transpose = input extent of the matching conv.
        let (out_h, out_w) = match padding {
            Padding::Same => (xs[0] * stride, xs[1] * stride),
            Padding::Valid => ((xs[0] - 1) * stride + kh, (xs[1] - 1) * stride + kw),
            Padding::Explicit(p) => (
                (xs[0] - 1) * stride + kh - 2 * p,
                (xs[1] - 1) * stride + kw - 2 * p,
            ),
        };
        // Kernel as seen by the matching forward conv: maps out_c -> in_c.
        let conv_kernel_shape = [kh, kw, out_c, in_c];
        let geom = Geom2d::resolve(&[out_h, out_w, out_c], &conv_kernel_shape, stride, 1, padding)?;
        if geom.out_h != xs[0] || geom.out_w != xs[1] {
            return Err(Error::Config(format!(
                "conv2d_transpose geometry not invertible: stride {stride}, kernel {kh}x{kw}, input {}x{}",
                xs[0], xs[1]
            )));
        }
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let mut y = conv2d_input_grad(&wv, &xv, &geom);
        if let Some(bv) = b {
            let bd = self.value(bv);
            debug_assert_eq!(bd.numel(), out_c);
            for row in y.data_mut().chunks_exact_mut(out_c) {
                for (o, &bv) in row.iter_mut().zip(bd.data()) {
                    *o += bv;
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        Ok(self.push_op(y, parents, move |g| {
            let gx = conv2d_forward(g, &wv, None, &geom);
            let gw = conv2d_weight_grad(g, &xv, &geom);
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(bias_grad(g, out_c)));
            }
            out
        }))
    }

    /// Input-adjoint of an existing conv2d as a first-class differentiable
    /// node: maps an output-shaped `upstream` back through kernel `w`.
    /// Building gradients of critics as graph nodes uses this.
    pub fn conv2d_adjoint(&mut self, w: Var, upstream: Var, geom: Geom2d) -> Var {
        let wv = self.value_rc(w);
        let uv = self.value_rc(upstream);
        let y = conv2d_input_grad(&wv, &uv, &geom);
        self.push_op(y, vec![w, upstream], move |g| {
            let gw = conv2d_weight_grad(g, &uv, &geom);
            let gu = conv2d_forward(g, &wv, None, &geom);
            vec![Some(gw), Some(gu)]
        })
    }

    /// 3-D convolution over `[t, h, w, c]` with temporal kernel/stride and
    /// unpadded temporal axis.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spatial_stride: usize,
        temporal_stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = Geom3d::resolve(
            self.value(x).shape(),
            self.value(w).shape(),
            spatial_stride,
            temporal_stride,
            padding,
        )?;
        let xv = self.value_rc(x);
        let wv = self.value_rc(w);
        let y = conv3d_forward(&xv, &wv, b.map(|bv| self.value(bv)), &geom);
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        let out_c = geom.out_c;
        Ok(self.push_op(y, parents, move |g| {
            let gx = conv3d_input_grad(&wv, g, &geom);
            let gw = conv3d_weight_grad(&xv, g, &geom);
            let mut out = vec![Some(gx), Some(gw)];
            if has_bias {
                out.push(Some(bias_grad(g, out_c)));
            }
            out
        }))
    }

    /// Input-adjoint of an existing conv3d as a differentiable node.
    pub fn conv3d_adjoint(&mut self, w: Var, upstream: Var, geom: Geom3d) -> Var {
        let wv = self.value_rc(w);
        let uv = self.value_rc(upstream);
        let y = conv3d_input_grad(&wv, &uv, &geom);
        self.push_op(y, vec![w, upstream], move |g| {
            let gw = conv3d_weight_grad(g, &uv, &geom);
            let gu = conv3d_forward(g, &wv, None, &geom);
            vec![Some(gw), Some(gu)]
        })
    }
}

/// Iterates the lanes of one axis of a row-major tensor.
struct LaneIter {
    outer: usize,
    inner: usize,
    len: usize,
}

impl LaneIter {
    fn new(shape: &[usize], axis: usize) -> Self {
        LaneIter {
            outer: shape[..axis].iter().product(),
            inner: shape[axis + 1..].iter().product(),
            len: shape[axis],
        }
    }

    /// Calls `f(lane, stride, len)` for each lane; `lane` starts at the first
    /// element of the lane and elements sit at `lane[j * stride]`.
    fn for_each_lane(&self, data: &mut [f64], mut f: impl FnMut(&mut [f64], usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.len * self.inner + i;
                f(&mut data[base..], self.inner, self.len);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_constants_and_limits() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0, 1.0, -1e6]).unwrap(), false);
        let y = g.selu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - SELU_SCALE).abs() < 1e-15);
        // selu(-inf) -> -scale*alpha
        let limit = -SELU_SCALE * SELU_ALPHA;
        assert!((g.value(y).data()[2] - limit).abs() < 1e-9);
        assert!((limit - (-1.7581)).abs() < 1e-4);
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[4], 3.7), false);
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.0, -5.0]).unwrap(),
            false,
        );
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted = g.value(x).map(|v| v + 123.456);
        let xs = g.leaf(shifted, false);
        let ys = g.softmax(xs, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_axis_0_of_matrix() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(), false);
        let y = g.softmax(x, 0).unwrap();
        // Columns are (1,1) and (0,0): softmax over axis 0 gives 0.5 each.
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn gap_means_spatially() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let y = g.gap(x);
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn concat_and_grads_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![2, 1, 1], vec![5.0, 6.0]).unwrap(), true);
        let y = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 3]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap().data(), &[1.0; 2]);
    }

    #[test]
    fn mae_and_mse_examples() {
        let mut g = Graph::new();
        let target = Rc::new(Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let x = g.leaf(Tensor::new(vec![4], vec![1.5, 1.5, 1.5, 1.5]).unwrap(), false);
        let l1 = g.mae(x, Rc::clone(&target));
        assert!((g.value(l1).scalar_value() - 0.5).abs() < 1e-15);
        let l2 = g.mse(x, target);
        assert!((g.value(l2).scalar_value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scalar_chain_grads() {
        // d/dx of (x*x + 3)/x at x=2: (x^2-3)/x^2 = 0.25
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let sq = g.smul(x, x);
        let num = g.sadd_const(sq, 3.0);
        let y = g.sdiv(num, x);
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap().scalar_value() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn smax_const_floors_and_gates_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1e-20), true);
        let y = g.smax_const(x, 1e-12);
        assert_eq!(g.value(y).scalar_value(), 1e-12);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().scalar_value(), 0.0);
    }
}
