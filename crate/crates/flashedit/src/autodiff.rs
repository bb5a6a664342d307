//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Graph`] is a tape of nodes; each op records its value, parent ids, and
//! a backward closure that maps the node's adjoint to per-parent adjoint
//! contributions. The same op code runs with recording disabled for plain
//! inference, so training and inference share numerics bit-for-bit.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Scalar, Tensor};

type BackFn<E> = Box<dyn Fn(&Tensor<E>) -> Vec<Tensor<E>>>;

struct Node<E: Scalar> {
    value: Tensor<E>,
    parents: Vec<usize>,
    back: Option<BackFn<E>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var(usize);

pub struct Graph<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: bool,
}

/// Flat index map sentinel: gather positions mapping to `PAD` read zero and
/// propagate no gradient (used for zero-padded im2col).
pub const PAD: usize = usize::MAX;

impl<E: Scalar> Graph<E> {
    pub fn recording() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: true }
    }

    pub fn no_grad() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(
        &self,
        value: Tensor<E>,
        parents: Vec<usize>,
        back: impl FnOnce() -> BackFn<E>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let (parents, back) = if self.recording {
            (parents, Some(back()))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node { value, parents, back });
        Var(nodes.len() - 1)
    }

    /// Tensor entering the graph; gradients w.r.t. it may be requested.
    pub fn input(&self, t: Tensor<E>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, parents: Vec::new(), back: None });
        Var(nodes.len() - 1)
    }

    /// Alias of [`Graph::input`] for values treated as fixed data.
    pub fn constant(&self, t: Tensor<E>) -> Var {
        self.input(t)
    }

    pub fn tensor(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> E {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.numel(), 1, "expected scalar node");
        nodes[v.0].value.data()[0]
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor<E>, &Tensor<E>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor<E>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x.add(y));
        self.push(v, vec![a.0, b.0], || {
            Box::new(|g| vec![g.clone(), g.clone()])
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.with2(a, b, |x, y| x.sub(y));
        self.push(v, vec![a.0, b.0], || {
            Box::new(|g| vec![g.clone(), g.scale(E::of(-1.0))])
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (v, av, bv) = self.with2(a, b, |x, y| (x.mul_elem(y), x.clone(), y.clone()));
        self.push(v, vec![a.0, b.0], move || {
            Box::new(move |g| vec![g.mul_elem(&bv), g.mul_elem(&av)])
        })
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.with1(a, |x| x.scale(E::of(c)));
        self.push(v, vec![a.0], || Box::new(move |g| vec![g.scale(E::of(c))]))
    }

    pub fn silu(&self, a: Var) -> Var {
        let (v, xv) = self.with1(a, |x| {
            (x.map(|t| t / (E::one() + (-t).exp())), x.clone())
        });
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let d = xv.map(|t| {
                    let s = E::one() / (E::one() + (-t).exp());
                    s * (E::one() + t * (E::one() - s))
                });
                vec![g.mul_elem(&d)]
            })
        })
    }

    /// Elementwise 1/sqrt(x + eps).
    pub fn rsqrt_eps(&self, a: Var, eps: f64) -> Var {
        let v = self.with1(a, |x| x.map(|t| E::one() / (t + E::of(eps)).sqrt()));
        let yv = v.clone();
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let d = yv.map(|y| E::of(-0.5) * y * y * y);
                vec![g.mul_elem(&d)]
            })
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let (s, shape) = self.with1(a, |x| (x.sum(), x.shape().to_vec()));
        self.push(Tensor::scalar(s), vec![a.0], move || {
            Box::new(move |g| vec![Tensor::full(shape.clone(), g.data()[0])])
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with1(a, |x| x.numel());
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row means of an r x c matrix, result is r x 1.
    pub fn row_mean(&self, a: Var) -> Var {
        let (v, c) = self.with1(a, |x| {
            let (r, c) = (x.rows(), x.cols());
            let inv = E::one() / E::of(c as f64);
            let mut out = vec![E::zero(); r];
            for i in 0..r {
                out[i] = x.row(i).iter().fold(E::zero(), |acc, &t| acc + t) * inv;
            }
            (Tensor::new(vec![r, 1], out), c)
        });
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let r = g.rows();
                let inv = E::one() / E::of(c as f64);
                let mut out = vec![E::zero(); r * c];
                for i in 0..r {
                    let gi = g.data()[i] * inv;
                    for j in 0..c {
                        out[i * c + j] = gi;
                    }
                }
                vec![Tensor::new(vec![r, c], out)]
            })
        })
    }

    // ---- broadcast (per-row scalar / per-column vector) ----

    fn col_broadcast(&self, a: Var, col: Var, mul: bool) -> Var {
        let (v, av, cv) = self.with2(a, col, |x, c| {
            assert_eq!(c.shape(), [x.rows(), 1], "column broadcast shape");
            let (r, cc) = (x.rows(), x.cols());
            let mut out = vec![E::zero(); r * cc];
            for i in 0..r {
                let s = c.data()[i];
                for j in 0..cc {
                    let t = x.data()[i * cc + j];
                    out[i * cc + j] = if mul { t * s } else { t - s };
                }
            }
            (Tensor::new(vec![r, cc], out), x.clone(), c.clone())
        });
        self.push(v, vec![a.0, col.0], move || {
            Box::new(move |g| {
                let (r, c) = (g.rows(), g.cols());
                if mul {
                    let mut ga = vec![E::zero(); r * c];
                    let mut gc = vec![E::zero(); r];
                    for i in 0..r {
                        let s = cv.data()[i];
                        for j in 0..c {
                            ga[i * c + j] = g.data()[i * c + j] * s;
                            gc[i] = gc[i] + g.data()[i * c + j] * av.data()[i * c + j];
                        }
                    }
                    vec![Tensor::new(vec![r, c], ga), Tensor::new(vec![r, 1], gc)]
                } else {
                    let mut gc = vec![E::zero(); r];
                    for i in 0..r {
                        for j in 0..c {
                            gc[i] = gc[i] - g.data()[i * c + j];
                        }
                    }
                    vec![g.clone(), Tensor::new(vec![r, 1], gc)]
                }
            })
        })
    }

    /// a[i,j] - col[i]
    pub fn sub_col(&self, a: Var, col: Var) -> Var {
        self.col_broadcast(a, col, false)
    }

    /// a[i,j] * col[i]
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.col_broadcast(a, col, true)
    }

    fn row_broadcast(&self, a: Var, row: Var, mul: bool) -> Var {
        let (v, av, rv) = self.with2(a, row, |x, rw| {
            assert_eq!(rw.numel(), x.cols(), "row broadcast shape");
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![E::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    let t = x.data()[i * c + j];
                    let s = rw.data()[j];
                    out[i * c + j] = if mul { t * s } else { t + s };
                }
            }
            (Tensor::new(vec![r, c], out), x.clone(), rw.clone())
        });
        self.push(v, vec![a.0, row.0], move || {
            Box::new(move |g| {
                let (r, c) = (g.rows(), g.cols());
                let mut grow = vec![E::zero(); c];
                if mul {
                    let mut ga = vec![E::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g.data()[i * c + j] * rv.data()[j];
                            grow[j] = grow[j] + g.data()[i * c + j] * av.data()[i * c + j];
                        }
                    }
                    vec![
                        Tensor::new(vec![r, c], ga),
                        Tensor::new(rv.shape().to_vec(), grow),
                    ]
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            grow[j] = grow[j] + g.data()[i * c + j];
                        }
                    }
                    vec![g.clone(), Tensor::new(rv.shape().to_vec(), grow)]
                }
            })
        })
    }

    /// a[i,j] + row[j] (bias add)
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, false)
    }

    /// a[i,j] * row[j] (gain)
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, true)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (v, av, bv) = self.with2(a, b, |x, y| (x.matmul(y), x.clone(), y.clone()));
        self.push(v, vec![a.0, b.0], move || {
            Box::new(move |g| {
                vec![g.matmul(&bv.transpose()), av.transpose().matmul(g)]
            })
        })
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.transpose());
        self.push(v, vec![a.0], || Box::new(|g| vec![g.transpose()]))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.with1(a, |x| softmax_rows(x).expect("softmax on non-empty input"));
        let yv = v.clone();
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                // dL/dx_ij = y_ij * (g_ij - sum_k g_ik y_ik)
                let (r, c) = (yv.rows(), yv.cols());
                let mut out = vec![E::zero(); r * c];
                for i in 0..r {
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + g.data()[i * c + j] * yv.data()[i * c + j];
                    }
                    for j in 0..c {
                        out[i * c + j] =
                            yv.data()[i * c + j] * (g.data()[i * c + j] - dot);
                    }
                }
                vec![Tensor::new(vec![r, c], out)]
            })
        })
    }

    // ---- structural ----

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let (v, old) = self.with1(a, |x| {
            (x.clone().reshape(shape.clone()), x.shape().to_vec())
        });
        self.push(v, vec![a.0], move || {
            Box::new(move |g| vec![g.clone().reshape(old.clone())])
        })
    }

    pub fn gather_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let (v, rows, cols) = self.with1(a, |x| (x.gather_rows(&idx), x.rows(), x.cols()));
        let idx2 = idx.clone();
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let mut out = vec![E::zero(); rows * cols];
                for (oi, &si) in idx2.iter().enumerate() {
                    for j in 0..cols {
                        out[si * cols + j] = out[si * cols + j] + g.data()[oi * cols + j];
                    }
                }
                vec![Tensor::new(vec![rows, cols], out)]
            })
        })
    }

    /// Flat gather: out.flat[i] = a.flat[map[i]], with [`PAD`] entries reading
    /// zero. Backward is scatter-add. Covers patchify, unpatchify, and im2col.
    pub fn gather_elems(&self, a: Var, map: Rc<Vec<usize>>, out_shape: Vec<usize>) -> Var {
        let (v, in_shape) = self.with1(a, |x| {
            let data = map
                .iter()
                .map(|&i| if i == PAD { E::zero() } else { x.data()[i] })
                .collect();
            (Tensor::new(out_shape.clone(), data), x.shape().to_vec())
        });
        let map2 = map.clone();
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let mut out = Tensor::zeros(in_shape.clone());
                for (oi, &si) in map2.iter().enumerate() {
                    if si != PAD {
                        out.data_mut()[si] = out.data_mut()[si] + g.data()[oi];
                    }
                }
                vec![out]
            })
        })
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let (v, ra) = self.with2(a, b, |x, y| (x.concat_rows(y), x.rows()));
        self.push(v, vec![a.0, b.0], move || {
            Box::new(move |g| {
                let c = g.cols();
                let top = Tensor::new(vec![ra, c], g.data()[..ra * c].to_vec());
                let bot =
                    Tensor::new(vec![g.rows() - ra, c], g.data()[ra * c..].to_vec());
                vec![top, bot]
            })
        })
    }

    pub fn slice_rows(&self, a: Var, r0: usize, r1: usize) -> Var {
        let (v, rows) = self.with1(a, |x| {
            let c = x.cols();
            (
                Tensor::new(vec![r1 - r0, c], x.data()[r0 * c..r1 * c].to_vec()),
                x.rows(),
            )
        });
        self.push(v, vec![a.0], move || {
            Box::new(move |g| {
                let c = g.cols();
                let mut out = Tensor::zeros(vec![rows, c]);
                out.data_mut()[r0 * c..r1 * c].copy_from_slice(g.data());
                vec![out]
            })
        })
    }

    /// Identity in the forward pass; adjoints never cross it.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.clone());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: v, parents: Vec::new(), back: None });
        Var(nodes.len() - 1)
    }

    // ---- composites ----

    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// mean((a - b)^2)
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let mu = self.row_mean(x);
        let xc = self.sub_col(x, mu);
        let sq = self.mul(xc, xc);
        let var = self.row_mean(sq);
        let inv = self.rsqrt_eps(var, eps);
        let xn = self.mul_col(xc, inv);
        let scaled = self.mul_row(xn, gain);
        self.add_row(scaled, bias)
    }

    /// softmax(q k^T / sqrt(d)) v
    pub fn attention(&self, q: Var, k: Var, v: Var) -> Var {
        let d = self.shape(q)[1];
        let kt = self.transpose(k);
        let logits = self.matmul(q, kt);
        let scaled = self.scale(logits, 1.0 / (d as f64).sqrt());
        let probs = self.softmax_rows(scaled);
        self.matmul(probs, v)
    }

    /// Reverse sweep from a scalar loss; returns adjoints for `wrt` (zeros for
    /// inputs the loss does not depend on).
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<E>>> {
        if !self.recording {
            return Err(Error::Contract("backward on a non-recording graph".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(E::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if let Some(back) = &nodes[i].back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), nodes[i].parents.len());
                for (p, c) in nodes[i].parents.iter().zip(contribs) {
                    match &mut adj[*p] {
                        Some(acc) => *acc = acc.add(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
            if wrt.iter().any(|w| w.0 == i) {
                adj[i] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                adj[w.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[w.0].value.shape().to_vec()))
            })
            .collect())
    }
}

/// Result of comparing reverse-mode gradients to central finite differences.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub per_coord: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of a scalar loss against central finite
/// differences. Relative error per coordinate is |a-b| / max(1e-12, |a|+|b|).
pub fn check_gradient<E: Scalar>(
    loss_fn: &dyn Fn(&Graph<E>, Var) -> Var,
    params: &Tensor<E>,
    epsilon: f64,
) -> Result<GradCheck> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("check_gradient epsilon must be > 0".into()));
    }
    let g = Graph::<E>::recording();
    let x = g.input(params.clone());
    let loss = loss_fn(&g, x);
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::Contract("check_gradient needs a scalar-valued loss".into()));
    }
    let grad = g.backward(loss, &[x])?.remove(0);

    let eval = |p: &Tensor<E>| -> f64 {
        let g = Graph::<E>::no_grad();
        let x = g.input(p.clone());
        g.scalar_value(loss_fn(&g, x)).f64()
    };

    let mut numeric = Vec::with_capacity(params.numel());
    for i in 0..params.numel() {
        let mut plus = params.clone();
        plus.data_mut()[i] = plus.data()[i] + E::of(epsilon);
        let mut minus = params.clone();
        minus.data_mut()[i] = minus.data()[i] - E::of(epsilon);
        numeric.push((eval(&plus) - eval(&minus)) / (2.0 * epsilon));
    }
    let analytic: Vec<f64> = grad.data().iter().map(|v| v.f64()).collect();
    let per_coord: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &b)| (a - b).abs() / (a.abs() + b.abs()).max(1e-12))
        .collect();
    let max_rel_err = per_coord.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheck { max_rel_err, per_coord, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let p = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let f = |g: &Graph<f64>, x: Var| {
            let sq = g.mul(x, x);
            g.sum_all(sq)
        };
        let r = check_gradient(&f, &p, 1e-6).unwrap();
        assert!((r.analytic[0] - 2.0).abs() < 1e-12);
        assert!((r.analytic[1] - 4.0).abs() < 1e-12);
        assert!(r.max_rel_err < 1e-8, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn stop_gradient_blocks_adjoints() {
        let p = Tensor::new(vec![3], vec![0.5f64, -1.0, 2.0]);
        let g = Graph::<f64>::recording();
        let x = g.input(p.clone());
        let stopped = g.stop_gradient(x);
        let prod = g.mul(x, stopped);
        let loss = g.sum_all(prod);
        let grad = g.backward(loss, &[x]).unwrap().remove(0);
        // d/dx of x * sg(x) is sg(x) exactly, not 2x.
        assert_eq!(grad, p);

        // A loss made only of the stopped branch has exactly zero gradient.
        let g = Graph::<f64>::recording();
        let x = g.input(p.clone());
        let stopped = g.stop_gradient(x);
        let sq = g.mul(stopped, stopped);
        let loss = g.sum_all(sq);
        let grad = g.backward(loss, &[x]).unwrap().remove(0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = Rng::new(5);
        let p = rng.normal_tensor::<f64>(vec![12]);
        // Mix of matmul, softmax, layer_norm, silu, broadcasts on a 3x4 block.
        let f = |g: &Graph<f64>, x: Var| {
            let m = g.reshape(x, vec![3, 4]);
            let gain = g.constant(Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.2]));
            let bias = g.constant(Tensor::new(vec![4], vec![0.1, -0.2, 0.0, 0.3]));
            let n = g.layer_norm(m, gain, bias, 1e-5);
            let s = g.silu(n);
            let w = g.constant(Tensor::from_fn(vec![4, 4], |i| ((i % 5) as f64 - 2.0) * 0.3));
            let h = g.matmul(s, w);
            let a = g.attention(h, h, h);
            let sq = g.mul(a, a);
            g.mean_all(sq)
        };
        let r = check_gradient(&f, &p, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-7, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn gather_and_concat_gradients() {
        let mut rng = Rng::new(6);
        let p = rng.normal_tensor::<f64>(vec![8]);
        let f = |g: &Graph<f64>, x: Var| {
            let m = g.reshape(x, vec![4, 2]);
            let picked = g.gather_rows(m, Rc::new(vec![3, 1, 1, 0]));
            let both = g.concat_rows(m, picked);
            let sl = g.slice_rows(both, 2, 7);
            let mapped = g.gather_elems(
                sl,
                Rc::new(vec![0, 2, PAD, 5, 9, 9, 1, 4]),
                vec![8],
            );
            let sq = g.mul(mapped, mapped);
            g.sum_all(sq)
        };
        let r = check_gradient(&f, &p, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-8, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_violation() {
        let p = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        let f = |g: &Graph<f64>, x: Var| g.mul(x, x);
        assert!(check_gradient(&f, &p, 1e-6).is_err());
    }

    #[test]
    fn no_grad_matches_recording_values() {
        let mut rng = Rng::new(8);
        let t = rng.normal_tensor::<f32>(vec![4, 4]);
        let run = |g: &Graph<f32>| {
            let x = g.input(t.clone());
            let a = g.attention(x, x, x);
            let s = g.silu(a);
            g.tensor(s)
        };
        let rec = run(&Graph::recording());
        let inf = run(&Graph::no_grad());
        assert_eq!(rec, inf);
    }
}
