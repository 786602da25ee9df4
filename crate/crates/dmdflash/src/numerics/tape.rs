//! Reverse-mode gradient tape.
//!
//! Primitives record a node holding parent handles and a local-derivative
//! closure; `backward` walks nodes in reverse insertion order, which is a
//! reverse topological order because parents always precede children.
//!
//! The fixed primitive set is: add, sub, mul (elementwise), matmul, sum,
//! mean, relu, silu, tanh, exp, ln, softplus, square, bias_add, scale.
//! Everything else composes from these. Shape mismatches are programming
//! errors and panic; the fallible surface is `backward` itself.

use super::tensor::{NodeId, Tensor};
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<Option<NodeId>>,
    /// Computes local gradient contributions per parent (empty vec for
    /// constant parents) from the upstream gradient.
    backward: BackwardFn,
}

/// Records primitive ops for one logical training step.
pub struct Tape {
    nodes: Vec<Node>,
    enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: true,
        }
    }

    /// A tape that records nothing; forwards behave identically but every
    /// output is a constant. Used for inference paths.
    pub fn disabled() -> Self {
        Tape {
            nodes: Vec::new(),
            enabled: false,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a differentiable leaf (a parameter). Gradients accumulate
    /// against the returned tensor's handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.enabled {
            return t.detach();
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: vec![],
            backward: Box::new(|_| vec![]),
        });
        Tensor::from_parts(t.shape().to_vec(), t.data().to_vec(), Some(id))
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Option<NodeId>>,
        backward: BackwardFn,
    ) -> Tensor {
        let node = if self.enabled && parents.iter().any(|p| p.is_some()) {
            let id = self.nodes.len();
            self.nodes.push(Node { parents, backward });
            Some(id)
        } else {
            None
        };
        Tensor::from_parts(shape, data, node)
    }

    fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
        assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::same_shape(a, b, "add");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node, b.node],
            Box::new(|up| vec![up.to_vec(), up.to_vec()]),
        )
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::same_shape(a, b, "sub");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node, b.node],
            Box::new(|up| vec![up.to_vec(), up.iter().map(|g| -g).collect()]),
        )
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        Self::same_shape(a, b, "mul");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let av = a.data().to_vec();
        let bv = b.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node, b.node],
            Box::new(move |up| {
                vec![
                    up.iter().zip(&bv).map(|(g, y)| g * y).collect(),
                    up.iter().zip(&av).map(|(g, x)| g * x).collect(),
                ]
            }),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "matmul: lhs must be a matrix");
        assert_eq!(b.shape().len(), 2, "matmul: rhs must be a matrix");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let av = a.data().to_vec();
        let bv = b.data().to_vec();
        self.record(
            vec![m, n],
            data,
            vec![a.node, b.node],
            Box::new(move |up| {
                // dA = up . B^T ; dB = A^T . up
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = up[i * n + j];
                        if g != 0.0 {
                            let brow = &bv[..];
                            for kk in 0..k {
                                da[i * k + kk] += g * brow[kk * n + j];
                            }
                        }
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik != 0.0 {
                            let urow = &up[i * n..(i + 1) * n];
                            let drow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                drow[j] += aik * urow[j];
                            }
                        }
                    }
                }
                vec![da, db]
            }),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        let n = a.numel();
        self.record(
            vec![1],
            vec![s],
            vec![a.node],
            Box::new(move |up| vec![vec![up[0]; n]]),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel();
        assert!(n > 0, "mean of empty tensor");
        let s: f64 = a.data().iter().sum::<f64>() / n as f64;
        self.record(
            vec![1],
            vec![s],
            vec![a.node],
            Box::new(move |up| vec![vec![up[0] / n as f64; n]]),
        )
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
        let xs = a.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| {
                vec![up
                    .iter()
                    .zip(&xs)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()]
            }),
        )
    }

    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x * sigmoid(*x)).collect();
        let xs = a.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| {
                vec![up
                    .iter()
                    .zip(&xs)
                    .map(|(g, x)| {
                        let s = sigmoid(*x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect()]
            }),
        )
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x.tanh()).collect();
        let ys = data.clone();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().zip(&ys).map(|(g, y)| g * (1.0 - y * y)).collect()]),
        )
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x.exp()).collect();
        let ys = data.clone();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().zip(&ys).map(|(g, y)| g * y).collect()]),
        )
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x.ln()).collect();
        let xs = a.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().zip(&xs).map(|(g, x)| g / x).collect()]),
        )
    }

    pub fn softplus(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| softplus_stable(*x)).collect();
        let xs = a.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().zip(&xs).map(|(g, x)| g * sigmoid(*x)).collect()]),
        )
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|x| x * x).collect();
        let xs = a.data().to_vec();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().zip(&xs).map(|(g, x)| 2.0 * g * x).collect()]),
        )
    }

    /// Broadcast-add a `[n]` bias over the rows of a `[b, n]` matrix.
    pub fn bias_add(&mut self, m: &Tensor, bias: &Tensor) -> Tensor {
        assert_eq!(m.shape().len(), 2, "bias_add: lhs must be a matrix");
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        assert_eq!(bias.numel(), cols, "bias_add: bias length");
        let mut data = m.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias.data()[c];
            }
        }
        self.record(
            vec![rows, cols],
            data,
            vec![m.node, bias.node],
            Box::new(move |up| {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += up[r * cols + c];
                    }
                }
                vec![up.to_vec(), db]
            }),
        )
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        self.record(
            a.shape().to_vec(),
            data,
            vec![a.node],
            Box::new(move |up| vec![up.iter().map(|g| g * c).collect()]),
        )
    }

    /// Backpropagate from a scalar loss; every reachable leaf receives its
    /// gradient, unreachable leaves read back as exact zero.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node.ok_or(Error::OffTapeLoss)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(up) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            if node.parents.is_empty() {
                continue;
            }
            let locals = (node.backward)(&up);
            debug_assert_eq!(locals.len(), node.parents.len());
            for (parent, local) in node.parents.iter().zip(locals) {
                let Some(pid) = parent else { continue };
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, l) in acc.iter_mut().zip(&local) {
                            *a += l;
                        }
                    }
                    slot => *slot = Some(local),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient readback after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a tape-bound tensor; exact zeros when unreachable or
    /// when the tensor is a constant.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        t.node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    /// True if the tensor actually received a (possibly zero) contribution.
    pub fn reached(&self, t: &Tensor) -> bool {
        t.node
            .map(|id| self.grads.get(id).map(|g| g.is_some()).unwrap_or(false))
            .unwrap_or(false)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
