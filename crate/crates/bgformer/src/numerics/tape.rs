//! Reverse-mode gradient engine. A Wengert tape records each operation at
//! forward time (values are computed eagerly); `backward` replays it in
//! reverse, accumulating vector-Jacobian products.
//!
//! The op set is exactly what this model needs: dense and sparse matrix
//! products, bias/residual adds, scaling and branch fusion, GELU, layer
//! normalization, the clipped exponential map, pairwise hyperbolic distances
//! and the pairwise cross-entropy loss. No general broadcasting.

use std::rc::Rc;

use crate::batch_graph::SparseAdjacency;
use crate::error::{Error, Result};
use crate::hyperbolic;
use crate::numerics::matrix::{
    gelu_grad_scalar, gelu_scalar, layer_norm, matmul, row_moments, Matrix,
};

pub type NodeId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Fuse {
        a: NodeId,
        b: NodeId,
        lambda: f64,
    },
    Gelu {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SparseAgg {
        adj: Rc<SparseAdjacency>,
        x: NodeId,
    },
    Sum {
        a: NodeId,
    },
    ExpMap0 {
        v: NodeId,
        curvature: f64,
        max_arg: f64,
    },
    PairwiseDist {
        z: NodeId,
        curvature: f64,
    },
    PairwiseCeLoss {
        dist: NodeId,
        labels: Rc<Vec<i64>>,
        tau: f64,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        id
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.rows() * self.nodes[id].value.cols(), 1);
        self.nodes[id].value.data()[0]
    }

    /// Gradient accumulated at `id`, or zeros if nothing reached it.
    pub fn grad(&self, id: NodeId) -> Matrix {
        let v = &self.nodes[id].value;
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(v.rows(), v.cols()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    /// Adds a 1 x C bias row to every row of a B x C matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[bias].value;
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs_rows: av.rows(),
                lhs_cols: av.cols(),
                rhs_rows: bv.rows(),
                rhs_cols: bv.cols(),
            });
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(bv.row(0)) {
                *x += b;
            }
        }
        let ng = self.any_needs_grad(&[a, bias]);
        Ok(self.push(value, Op::AddBias { a, bias }, ng))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a].value.scale(factor);
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Scale { a, factor }, ng)
    }

    /// lambda * a + (1 - lambda) * b. The endpoints short-circuit so that a
    /// lambda of exactly 0 or 1 is bitwise independent of the unused branch.
    pub fn fuse(&mut self, a: NodeId, b: NodeId, lambda: f64) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::contract(format!(
                "fusion weight lambda must lie in [0, 1], got {lambda}"
            )));
        }
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        if !av.same_shape(bv) {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs_rows: av.rows(),
                lhs_cols: av.cols(),
                rhs_rows: bv.rows(),
                rhs_cols: bv.cols(),
            });
        }
        let value = if lambda == 1.0 {
            av.clone()
        } else if lambda == 0.0 {
            bv.clone()
        } else {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                .collect();
            Matrix::from_vec(av.rows(), av.cols(), data)
        };
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(value, Op::Fuse { a, b, lambda }, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(gelu_scalar);
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Gelu { a }, ng)
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let value = layer_norm(
            &self.nodes[a].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        )?;
        let ng = self.any_needs_grad(&[a, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
            },
            ng,
        ))
    }

    /// y = A x for a constant sparse adjacency; gradients flow into x only.
    pub fn sparse_agg(&mut self, adj: Rc<SparseAdjacency>, x: NodeId) -> Result<NodeId> {
        let mut madds = 0u64;
        let value = adj.aggregate(&self.nodes[x].value, &mut madds)?;
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(value, Op::SparseAgg { adj, x }, ng))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.nodes[a].value.sum()]);
        let ng = self.nodes[a].needs_grad;
        self.push(value, Op::Sum { a }, ng)
    }

    /// Row-wise clipped exponential map onto the curvature-c ball.
    pub fn exp_map0(&mut self, v: NodeId, curvature: f64, max_arg: f64) -> Result<NodeId> {
        if curvature <= 0.0 {
            return Err(Error::contract(format!(
                "curvature must be positive, got {curvature}"
            )));
        }
        let value = hyperbolic::exp_map0_clip_kernel(&self.nodes[v].value, curvature, max_arg);
        let ng = self.nodes[v].needs_grad;
        Ok(self.push(
            value,
            Op::ExpMap0 {
                v,
                curvature,
                max_arg,
            },
            ng,
        ))
    }

    /// B x B matrix of pairwise hyperbolic distances between the rows of z.
    pub fn pairwise_dist(&mut self, z: NodeId, curvature: f64) -> Result<NodeId> {
        if curvature <= 0.0 {
            return Err(Error::contract(format!(
                "curvature must be positive, got {curvature}"
            )));
        }
        let value = hyperbolic::pairwise_dist_kernel(&self.nodes[z].value, curvature);
        let ng = self.nodes[z].needs_grad;
        Ok(self.push(value, Op::PairwiseDist { z, curvature }, ng))
    }

    /// Scalar pairwise cross-entropy loss from a distance matrix.
    pub fn pairwise_ce_loss(
        &mut self,
        dist: NodeId,
        labels: Rc<Vec<i64>>,
        tau: f64,
    ) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::contract(format!(
                "temperature tau must be positive, got {tau}"
            )));
        }
        let loss = hyperbolic::ce_loss_from_distances(&self.nodes[dist].value, &labels, tau)?;
        let value = Matrix::from_vec(1, 1, vec![loss]);
        let ng = self.nodes[dist].needs_grad;
        Ok(self.push(value, Op::PairwiseCeLoss { dist, labels, tau }, ng))
    }

    fn accumulate(&mut self, id: NodeId, delta: Matrix) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => g
                .add_assign(&delta)
                .expect("gradient shape fixed by node value"),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss node. Fills gradients of every
    /// reachable grad-requiring node; unreachable ones read back as zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss].value;
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        self.nodes[loss].grad = Some(Matrix::from_vec(1, 1, vec![1.0]));
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let g = self.nodes[id].grad.clone().expect("checked above");
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    if self.nodes[a].needs_grad {
                        let da = matmul(&g, &self.nodes[b].value.transpose())?;
                        self.accumulate(a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let db = matmul(&self.nodes[a].value.transpose(), &g)?;
                        self.accumulate(b, db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::AddBias { a, bias } => {
                    if self.nodes[bias].needs_grad {
                        let mut db = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                                *acc += v;
                            }
                        }
                        self.accumulate(bias, db);
                    }
                    self.accumulate(a, g);
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, g.scale(factor));
                }
                Op::Fuse { a, b, lambda } => {
                    self.accumulate(a, g.scale(lambda));
                    self.accumulate(b, g.scale(1.0 - lambda));
                }
                Op::Gelu { a } => {
                    let av = &self.nodes[a].value;
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| gy * gelu_grad_scalar(x))
                        .collect();
                    let da = Matrix::from_vec(av.rows(), av.cols(), data);
                    self.accumulate(a, da);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (da, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[a].value,
                        &self.nodes[gamma].value,
                        eps,
                        &g,
                    );
                    self.accumulate(a, da);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::SparseAgg { adj, x } => {
                    let mut madds = 0u64;
                    let dx = adj.aggregate_transpose(&g, &mut madds)?;
                    self.accumulate(x, dx);
                }
                Op::Sum { a } => {
                    let av = &self.nodes[a].value;
                    let da = Matrix::filled(av.rows(), av.cols(), g.data()[0]);
                    self.accumulate(a, da);
                }
                Op::ExpMap0 {
                    v,
                    curvature,
                    max_arg,
                } => {
                    let dv = hyperbolic::exp_map0_clip_backward(
                        &self.nodes[v].value,
                        curvature,
                        max_arg,
                        &g,
                    );
                    self.accumulate(v, dv);
                }
                Op::PairwiseDist { z, curvature } => {
                    let dz =
                        hyperbolic::pairwise_dist_backward(&self.nodes[z].value, curvature, &g);
                    self.accumulate(z, dz);
                }
                Op::PairwiseCeLoss { dist, labels, tau } => {
                    let dd = hyperbolic::ce_loss_backward(
                        &self.nodes[dist].value,
                        &labels,
                        tau,
                        g.data()[0],
                    );
                    self.accumulate(dist, dd);
                }
            }
        }
        Ok(())
    }
}

/// Layer-norm VJP. Recomputes per-row moments from the saved input.
fn layer_norm_backward(
    x: &Matrix,
    gamma: &Matrix,
    eps: f64,
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (b, c) = (x.rows(), x.cols());
    let cf = c as f64;
    let mut dx = Matrix::zeros(b, c);
    let mut dgamma = Matrix::zeros(1, c);
    let mut dbeta = Matrix::zeros(1, c);
    for i in 0..b {
        let row = x.row(i);
        let grow = g.row(i);
        let (mean, rstd) = row_moments(row, eps);
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * rstd).collect();
        let gh: Vec<f64> = grow
            .iter()
            .zip(gamma.row(0))
            .map(|(&gy, &gm)| gy * gm)
            .collect();
        let m1 = gh.iter().sum::<f64>() / cf;
        let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
        for j in 0..c {
            dx.row_mut(i)[j] = rstd * (gh[j] - m1 - xhat[j] * m2);
            dgamma.row_mut(0)[j] += grow[j] * xhat[j];
            dbeta.row_mut(0)[j] += grow[j];
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradients of `build`'s scalar output with respect to each matrix in
/// `params`, via one tape forward/backward.
pub fn tape_gradients<F>(build: &F, params: &[Matrix]) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids.iter().map(|&id| tape.grad(id)).collect())
}

fn eval_loss<F>(build: &F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.scalar(loss))
}

/// Central finite differences of `build`'s scalar output, entry by entry.
pub fn numeric_gradients<F>(build: &F, params: &[Matrix], h: f64) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Matrix::zeros(params[p].rows(), params[p].cols());
        for e in 0..params[p].data().len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = eval_loss(build, &work)?;
            work[p].data_mut()[e] = orig - h;
            let minus = eval_loss(build, &work)?;
            work[p].data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Max over all entries of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
pub fn max_rel_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Compare reverse-mode gradients against central finite differences over
/// every entry of every parameter; returns the max relative error.
pub fn fd_check<F>(build: F, params: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let analytic = tape_gradients(&build, params)?;
    let numeric = numeric_gradients(&build, params, h)?;
    Ok(max_rel_error(&analytic, &numeric))
}
