//! BGFormer encoder: dual structure-constrained self-attention over the
//! batch graph, branch fusion, layer-normed FFN with residual, and N-block
//! stacking with a layer norm between consecutive blocks.
//!
//! Both SSA branches share one projection; attention weights are the fixed
//! normalized adjacencies, so there is no softmax anywhere.

use std::rc::Rc;

use crate::batch_graph::{BatchGraph, SparseAdjacency};
use crate::error::{Error, Result};
use crate::numerics::matrix::{gelu, layer_norm, matmul, Matrix};
use crate::numerics::params::{ParamGroup, ParamTensor};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// One BGFormer block: shared SSA projection, FFN weights/biases and the
/// pre-FFN layer-norm affine.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub w_ssa: ParamTensor,
    pub ffn_w1: ParamTensor,
    pub ffn_b1: ParamTensor,
    pub ffn_w2: ParamTensor,
    pub ffn_b2: ParamTensor,
    pub ln_gamma: ParamTensor,
    pub ln_beta: ParamTensor,
}

impl BlockParams {
    pub fn init(rng: &mut Rng, c: usize, hidden: usize, index: usize) -> Self {
        let g = ParamGroup::BgformerHead;
        let name = |field: &str| format!("block{index}.{field}");
        BlockParams {
            w_ssa: ParamTensor::new(name("w_ssa"), rng.normal_matrix(c, c, INIT_STD), g),
            ffn_w1: ParamTensor::new(name("ffn_w1"), rng.normal_matrix(c, hidden, INIT_STD), g),
            ffn_b1: ParamTensor::new(name("ffn_b1"), Matrix::zeros(1, hidden), g),
            ffn_w2: ParamTensor::new(name("ffn_w2"), rng.normal_matrix(hidden, c, INIT_STD), g),
            ffn_b2: ParamTensor::new(name("ffn_b2"), Matrix::zeros(1, c), g),
            ln_gamma: ParamTensor::new(name("ln_gamma"), Matrix::filled(1, c, 1.0), g),
            ln_beta: ParamTensor::new(name("ln_beta"), Matrix::zeros(1, c), g),
        }
    }

    pub fn width(&self) -> usize {
        self.w_ssa.value.rows()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![
            &self.w_ssa,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.w_ssa,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

/// N blocks plus the N-1 inter-block layer-norm affines and the branch
/// fusion weight.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub blocks: Vec<BlockParams>,
    pub inter_ln: Vec<(ParamTensor, ParamTensor)>,
    pub lambda: f64,
}

/// Tape handles for one registered block.
pub struct BlockIds {
    pub w_ssa: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
}

pub struct StackIds {
    pub blocks: Vec<BlockIds>,
    pub inter_ln: Vec<(NodeId, NodeId)>,
}

impl BlockParams {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockIds {
        let mut reg = |p: &ParamTensor| {
            if trainable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        };
        BlockIds {
            w_ssa: reg(&self.w_ssa),
            ffn_w1: reg(&self.ffn_w1),
            ffn_b1: reg(&self.ffn_b1),
            ffn_w2: reg(&self.ffn_w2),
            ffn_b2: reg(&self.ffn_b2),
            ln_gamma: reg(&self.ln_gamma),
            ln_beta: reg(&self.ln_beta),
        }
    }

    pub fn read_grads(&mut self, tape: &Tape, ids: &BlockIds) {
        self.w_ssa.grad = tape.grad(ids.w_ssa);
        self.ffn_w1.grad = tape.grad(ids.ffn_w1);
        self.ffn_b1.grad = tape.grad(ids.ffn_b1);
        self.ffn_w2.grad = tape.grad(ids.ffn_w2);
        self.ffn_b2.grad = tape.grad(ids.ffn_b2);
        self.ln_gamma.grad = tape.grad(ids.ln_gamma);
        self.ln_beta.grad = tape.grad(ids.ln_beta);
    }
}

impl EncoderStack {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out: Vec<&ParamTensor> = Vec::new();
        for b in &self.blocks {
            out.extend(b.params());
        }
        for (g, b) in &self.inter_ln {
            out.push(g);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        for (g, b) in &mut self.inter_ln {
            out.push(g);
            out.push(b);
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> StackIds {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.register(tape, trainable))
            .collect();
        let inter_ln = self
            .inter_ln
            .iter()
            .map(|(g, b)| {
                let gid = if trainable {
                    tape.param(g.value.clone())
                } else {
                    tape.constant(g.value.clone())
                };
                let bid = if trainable {
                    tape.param(b.value.clone())
                } else {
                    tape.constant(b.value.clone())
                };
                (gid, bid)
            })
            .collect();
        StackIds { blocks, inter_ln }
    }

    pub fn read_grads(&mut self, tape: &Tape, ids: &StackIds) {
        for (b, bid) in self.blocks.iter_mut().zip(&ids.blocks) {
            b.read_grads(tape, bid);
        }
        for ((g, b), &(gid, bid)) in self.inter_ln.iter_mut().zip(&ids.inter_ln) {
            g.grad = tape.grad(gid);
            b.grad = tape.grad(bid);
        }
    }
}

/// Fresh stack: SSA and FFN weights ~ Normal(0, 0.02), biases zero, all
/// layer-norm affines at (1, 0).
pub fn init_stack(
    rng: &mut Rng,
    c: usize,
    ffn_ratio: usize,
    n_blocks: usize,
    lambda: f64,
) -> Result<EncoderStack> {
    if c == 0 || n_blocks == 0 || ffn_ratio == 0 {
        return Err(Error::contract(format!(
            "init_stack requires c >= 1, ffn_ratio >= 1, n_blocks >= 1 (got c={c}, ffn_ratio={ffn_ratio}, n_blocks={n_blocks})"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!(
            "fusion weight lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let hidden = ffn_ratio * c;
    let blocks = (0..n_blocks)
        .map(|i| BlockParams::init(rng, c, hidden, i))
        .collect();
    let inter_ln = (0..n_blocks.saturating_sub(1))
        .map(|i| {
            let g = ParamGroup::BgformerHead;
            (
                ParamTensor::new(format!("inter_ln{i}.gamma"), Matrix::filled(1, c, 1.0), g),
                ParamTensor::new(format!("inter_ln{i}.beta"), Matrix::zeros(1, c), g),
            )
        })
        .collect();
    Ok(EncoderStack {
        blocks,
        inter_ln,
        lambda,
    })
}

/// Either side of the dual adjacency: sparse visual or dense label.
pub enum Adjacency<'a> {
    Sparse(&'a SparseAdjacency),
    Dense(&'a Matrix),
}

/// Multiply-add counts for one SSA evaluation, split into the shared
/// projection F*W and the graph aggregation Norm(A)*(F*W).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AggCost {
    pub projection: u64,
    pub aggregation: u64,
}

/// F + Norm(A) * (F * W). Sparse aggregation costs nnz * C multiply-adds
/// versus B^2 * C dense; the split is reported in `AggCost`.
pub fn ssa_forward(f: &Matrix, adj: &Adjacency, w: &Matrix) -> Result<(Matrix, AggCost)> {
    let proj = matmul(f, w)?;
    let mut cost = AggCost {
        projection: (f.rows() * f.cols() * w.cols()) as u64,
        aggregation: 0,
    };
    let agg = match adj {
        Adjacency::Sparse(a) => a.aggregate(&proj, &mut cost.aggregation)?,
        Adjacency::Dense(a) => {
            let out = matmul(a, &proj)?;
            cost.aggregation = (a.rows() * a.cols() * proj.cols()) as u64;
            out
        }
    };
    Ok((f.add(&agg)?, cost))
}

/// lambda * f_v + (1 - lambda) * f_l, endpoint-exact.
pub fn fuse(f_v: &Matrix, f_l: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut tape = Tape::new();
    let a = tape.constant(f_v.clone());
    let b = tape.constant(f_l.clone());
    let out = tape.fuse(a, b, lambda)?;
    Ok(tape.value(out).clone())
}

/// x + FFN(LN(x)) with FFN(z) = gelu(z W1 + b1) W2 + b2.
pub fn ffn_residual(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let ln = layer_norm(x, &p.ln_gamma.value, &p.ln_beta.value, LN_EPS)?;
    let mut h1 = matmul(&ln, &p.ffn_w1.value)?;
    add_bias_rows(&mut h1, &p.ffn_b1.value);
    let act = gelu(&h1);
    let mut h2 = matmul(&act, &p.ffn_w2.value)?;
    add_bias_rows(&mut h2, &p.ffn_b2.value);
    x.add(&h2)
}

fn add_bias_rows(x: &mut Matrix, bias: &Matrix) {
    for i in 0..x.rows() {
        for (v, b) in x.row_mut(i).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

/// One block on an existing tape. `a_v` and `a_l` are the normalized
/// adjacencies (the label side as a tape constant). The projection F*W is
/// computed once and consumed by both branches, so the shared weight
/// accumulates gradient from both.
pub fn block_on_tape(
    tape: &mut Tape,
    f: NodeId,
    a_v: &Rc<SparseAdjacency>,
    a_l: NodeId,
    ids: &BlockIds,
    lambda: f64,
) -> Result<NodeId> {
    let proj = tape.matmul(f, ids.w_ssa)?;
    let agg_v = tape.sparse_agg(a_v.clone(), proj)?;
    let f_v = tape.add(f, agg_v)?;
    let agg_l = tape.matmul(a_l, proj)?;
    let f_l = tape.add(f, agg_l)?;
    let fused = tape.fuse(f_v, f_l, lambda)?;
    let ln = tape.layer_norm(fused, ids.ln_gamma, ids.ln_beta, LN_EPS)?;
    let h1 = tape.matmul(ln, ids.ffn_w1)?;
    let h1 = tape.add_bias(h1, ids.ffn_b1)?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, ids.ffn_w2)?;
    let h2 = tape.add_bias(h2, ids.ffn_b2)?;
    tape.add(fused, h2)
}

/// Full stack on an existing tape, with the inter-block layer norms between
/// consecutive blocks.
pub fn encode_on_tape(
    tape: &mut Tape,
    f: NodeId,
    g: &BatchGraph,
    ids: &StackIds,
    lambda: f64,
) -> Result<NodeId> {
    let a_v = Rc::new(g.a_v_norm.clone());
    let a_l = tape.constant(g.a_l_norm.clone());
    let mut x = f;
    for (i, bids) in ids.blocks.iter().enumerate() {
        x = block_on_tape(tape, x, &a_v, a_l, bids, lambda)?;
        if i + 1 < ids.blocks.len() {
            let (gid, bid) = ids.inter_ln[i];
            x = tape.layer_norm(x, gid, bid, LN_EPS)?;
        }
    }
    Ok(x)
}

/// One BGFormer block as a pure function of f.
pub fn block_forward(f: &Matrix, g: &BatchGraph, p: &BlockParams, lambda: f64) -> Result<Matrix> {
    let mut tape = Tape::new();
    let fid = tape.constant(f.clone());
    let ids = p.register(&mut tape, false);
    let a_v = Rc::new(g.a_v_norm.clone());
    let a_l = tape.constant(g.a_l_norm.clone());
    let out = block_on_tape(&mut tape, fid, &a_v, a_l, &ids, lambda)?;
    Ok(tape.value(out).clone())
}

/// The whole stack as a pure function of f; the graph is built once per
/// batch and reused unchanged by every block.
pub fn stack_forward(f: &Matrix, g: &BatchGraph, stack: &EncoderStack) -> Result<Matrix> {
    if stack.blocks.is_empty() {
        return Err(Error::contract("encoder stack has no blocks".to_string()));
    }
    let mut tape = Tape::new();
    let fid = tape.constant(f.clone());
    let ids = stack.register(&mut tape, false);
    let out = encode_on_tape(&mut tape, fid, g, &ids, stack.lambda)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch_graph::build_batch_graph;
    use crate::numerics::tape::{fd_check, tape_gradients};

    fn zero_block(c: usize, hidden: usize) -> BlockParams {
        let mut rng = Rng::new(0);
        let mut p = BlockParams::init(&mut rng, c, hidden, 0);
        for t in p.params_mut() {
            if t.name.contains("ln_gamma") {
                continue;
            }
            t.value.data_mut().fill(0.0);
        }
        p
    }

    fn random_graph(rng: &mut Rng, b: usize, c: usize, k: usize) -> (Matrix, BatchGraph) {
        let f = rng.normal_matrix(b, c, 1.0);
        let labels: Vec<i64> = (0..b).map(|i| (i % 3) as i64).collect();
        let g = build_batch_graph(&f, &labels, k).unwrap();
        (f, g)
    }

    #[test]
    fn ssa_residual_only_when_weight_is_zero() {
        let mut rng = Rng::new(1);
        let f = rng.normal_matrix(4, 3, 1.0);
        let w = Matrix::zeros(3, 3);
        let adj = Matrix::filled(4, 4, 0.5);
        let (out, _) = ssa_forward(&f, &Adjacency::Dense(&adj), &w).unwrap();
        assert!(out.bits_eq(&f));
    }

    #[test]
    fn ssa_residual_only_when_graph_is_empty() {
        let mut rng = Rng::new(2);
        let f = rng.normal_matrix(4, 3, 1.0);
        let w = rng.normal_matrix(3, 3, 1.0);
        let adj = Matrix::zeros(4, 4);
        let (out, _) = ssa_forward(&f, &Adjacency::Dense(&adj), &w).unwrap();
        assert!(out.bits_eq(&f));
    }

    #[test]
    fn ssa_hand_example() {
        let f = Matrix::identity(2);
        let adj = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let (out, _) = ssa_forward(&f, &Adjacency::Dense(&adj), &Matrix::identity(2)).unwrap();
        assert!(out.bits_eq(&Matrix::filled(2, 2, 1.0)));
    }

    #[test]
    fn ssa_sparse_matches_densified() {
        let mut rng = Rng::new(3);
        let (f, g) = random_graph(&mut rng, 8, 5, 3);
        let w = rng.normal_matrix(5, 5, 1.0);
        let (sparse, cost_s) = ssa_forward(&f, &Adjacency::Sparse(&g.a_v_norm), &w).unwrap();
        let dense_adj = g.a_v_norm.to_dense();
        let (dense, cost_d) = ssa_forward(&f, &Adjacency::Dense(&dense_adj), &w).unwrap();
        for (a, b) in sparse.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cost_s.aggregation, (8 * 3 * 5) as u64);
        assert_eq!(cost_d.aggregation, (8 * 8 * 5) as u64);
        assert_eq!(cost_s.projection, cost_d.projection);
    }

    #[test]
    fn ssa_cost_ratio_is_k_over_b() {
        let mut rng = Rng::new(4);
        let (b, c, k) = (16usize, 6usize, 4usize);
        let (f, g) = random_graph(&mut rng, b, c, k);
        let w = rng.normal_matrix(c, c, 1.0);
        let (_, cost_s) = ssa_forward(&f, &Adjacency::Sparse(&g.a_v_norm), &w).unwrap();
        let dense_adj = g.a_v_norm.to_dense();
        let (_, cost_d) = ssa_forward(&f, &Adjacency::Dense(&dense_adj), &w).unwrap();
        assert_eq!(cost_s.aggregation, (b * k * c) as u64);
        assert_eq!(cost_s.projection, (b * c * c) as u64);
        assert_eq!(cost_d.aggregation, (b * b * c) as u64);
        assert_eq!(cost_s.aggregation * b as u64, cost_d.aggregation * k as u64);
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let mut rng = Rng::new(5);
        let a = rng.normal_matrix(3, 3, 1.0);
        let b = rng.normal_matrix(3, 3, 1.0);
        assert!(fuse(&a, &b, 1.0).unwrap().bits_eq(&a));
        assert!(fuse(&a, &b, 0.0).unwrap().bits_eq(&b));
        let mid = fuse(&a, &b, 0.4).unwrap();
        for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
            assert_eq!(*m, 0.4 * x + 0.6 * y);
        }
        assert!(fuse(&a, &b, 1.2).is_err());
    }

    #[test]
    fn ffn_residual_dead_ffn_is_identity() {
        let mut rng = Rng::new(6);
        let x = rng.normal_matrix(4, 3, 1.0);
        let mut p = BlockParams::init(&mut rng, 3, 6, 0);
        p.ffn_w2.value.data_mut().fill(0.0);
        p.ffn_b2.value.data_mut().fill(0.0);
        assert!(ffn_residual(&x, &p).unwrap().bits_eq(&x));
    }

    #[test]
    fn ffn_residual_zero_input_zero_biases() {
        let mut rng = Rng::new(7);
        let mut p = BlockParams::init(&mut rng, 3, 6, 0);
        p.ffn_b1.value.data_mut().fill(0.0);
        p.ffn_b2.value.data_mut().fill(0.0);
        let x = Matrix::zeros(4, 3);
        let y = ffn_residual(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_residual_matches_step_by_step_oracle() {
        let mut rng = Rng::new(8);
        let x = rng.normal_matrix(5, 4, 1.0);
        let p = BlockParams::init(&mut rng, 4, 8, 0);
        let got = ffn_residual(&x, &p).unwrap();
        let ln = layer_norm(&x, &p.ln_gamma.value, &p.ln_beta.value, LN_EPS).unwrap();
        let mut h1 = matmul(&ln, &p.ffn_w1.value).unwrap();
        for i in 0..h1.rows() {
            for j in 0..h1.cols() {
                let v = h1.get(i, j) + p.ffn_b1.value.get(0, j);
                h1.set(i, j, v);
            }
        }
        let act = gelu(&h1);
        let mut h2 = matmul(&act, &p.ffn_w2.value).unwrap();
        for i in 0..h2.rows() {
            for j in 0..h2.cols() {
                let v = h2.get(i, j) + p.ffn_b2.value.get(0, j);
                h2.set(i, j, v);
            }
        }
        let want = x.add(&h2).unwrap();
        assert!(got.bits_eq(&want));
    }

    #[test]
    fn block_lambda_one_ignores_labels_bitwise() {
        let mut rng = Rng::new(9);
        let f = rng.normal_matrix(7, 4, 1.0);
        let p = BlockParams::init(&mut rng, 4, 8, 0);
        let g1 = build_batch_graph(&f, &[0, 0, 1, 1, 2, 2, 0], 3).unwrap();
        let g2 = build_batch_graph(&f, &[5, 6, 5, 6, 5, 6, 6], 3).unwrap();
        let o1 = block_forward(&f, &g1, &p, 1.0).unwrap();
        let o2 = block_forward(&f, &g2, &p, 1.0).unwrap();
        assert!(o1.bits_eq(&o2));
    }

    #[test]
    fn block_lambda_zero_ignores_visual_graph_bitwise() {
        let mut rng = Rng::new(10);
        let f = rng.normal_matrix(7, 4, 1.0);
        let p = BlockParams::init(&mut rng, 4, 8, 0);
        let labels = [0i64, 0, 1, 1, 2, 2, 0];
        let mut g1 = build_batch_graph(&f, &labels, 3).unwrap();
        let f_other = rng.normal_matrix(7, 4, 1.0);
        let g2 = build_batch_graph(&f_other, &labels, 2).unwrap();
        g1.a_v = g2.a_v.clone();
        g1.a_v_norm = g2.a_v_norm.clone();
        let o1 = block_forward(&f, &g1, &p, 0.0).unwrap();
        let g3 = build_batch_graph(&f, &labels, 3).unwrap();
        let o2 = block_forward(&f, &g3, &p, 0.0).unwrap();
        assert!(o1.bits_eq(&o2));
    }

    #[test]
    fn zero_parameter_block_is_identity() {
        let mut rng = Rng::new(11);
        let f = rng.normal_matrix(6, 4, 1.0);
        let g = build_batch_graph(&f, &[0, 0, 1, 1, 2, 2], 2).unwrap();
        let p = zero_block(4, 8);
        for lambda in [0.0, 1.0] {
            let out = block_forward(&f, &g, &p, lambda).unwrap();
            assert!(out.bits_eq(&f), "lambda {lambda}");
        }
        // Interior lambda fuses two bitwise-equal branches; identical up to
        // one rounding of lambda*x + (1-lambda)*x.
        let out = block_forward(&f, &g, &p, 0.4).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn stack_single_block_equals_block_forward() {
        let mut rng = Rng::new(12);
        let f = rng.normal_matrix(6, 4, 1.0);
        let g = build_batch_graph(&f, &[0, 0, 1, 1, 2, 2], 2).unwrap();
        let stack = init_stack(&mut rng, 4, 2, 1, 0.4).unwrap();
        let a = stack_forward(&f, &g, &stack).unwrap();
        let b = block_forward(&f, &g, &stack.blocks[0], 0.4).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn stack_two_blocks_is_block_ln_block() {
        let mut rng = Rng::new(13);
        let f = rng.normal_matrix(6, 4, 1.0);
        let g = build_batch_graph(&f, &[0, 0, 1, 1, 2, 2], 2).unwrap();
        let mut stack = init_stack(&mut rng, 4, 2, 2, 0.4).unwrap();
        // Non-trivial inter-block affine.
        stack.inter_ln[0].0.value = rng.normal_matrix(1, 4, 0.1).map(|v| 1.0 + v);
        stack.inter_ln[0].1.value = rng.normal_matrix(1, 4, 0.1);
        let got = stack_forward(&f, &g, &stack).unwrap();
        let step = block_forward(&f, &g, &stack.blocks[0], 0.4).unwrap();
        let step = layer_norm(
            &step,
            &stack.inter_ln[0].0.value,
            &stack.inter_ln[0].1.value,
            LN_EPS,
        )
        .unwrap();
        let want = block_forward(&step, &g, &stack.blocks[1], 0.4).unwrap();
        assert!(got.bits_eq(&want));
        assert_eq!(got.rows(), f.rows());
        assert_eq!(got.cols(), f.cols());
    }

    #[test]
    fn init_stack_is_seed_deterministic() {
        let a = init_stack(&mut Rng::new(42), 5, 4, 2, 0.4).unwrap();
        let b = init_stack(&mut Rng::new(42), 5, 4, 2, 0.4).unwrap();
        for (x, y) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x.name, y.name);
            assert!(x.value.bits_eq(&y.value));
        }
        assert_eq!(a.lambda, 0.4);
    }

    #[test]
    fn init_stack_weight_std_near_002() {
        let stack = init_stack(&mut Rng::new(7), 40, 4, 1, 0.5).unwrap();
        let w = &stack.blocks[0].ffn_w1.value;
        let n = w.data().len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n)
            .sqrt();
        assert!((std - INIT_STD).abs() < 0.002, "std {std}");
        assert!(stack.blocks[0]
            .ffn_b1
            .value
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(stack.blocks[0]
            .ln_gamma
            .value
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = Rng::new(14);
        let (b, c, hidden, k) = (8usize, 6usize, 12usize, 3usize);
        let f = rng.normal_matrix(b, c, 1.0);
        let labels: Vec<i64> = (0..b).map(|i| (i % 3) as i64).collect();
        let g = build_batch_graph(&f, &labels, k).unwrap();
        let p = BlockParams::init(&mut rng, c, hidden, 0);
        let values: Vec<Matrix> = p.params().iter().map(|t| t.value.clone()).collect();
        let a_v = Rc::new(g.a_v_norm.clone());
        let a_l_mat = g.a_l_norm.clone();
        let err = fd_check(
            |t: &mut Tape, ids: &[NodeId]| {
                let fid = t.constant(f.clone());
                let a_l = t.constant(a_l_mat.clone());
                let bids = BlockIds {
                    w_ssa: ids[0],
                    ffn_w1: ids[1],
                    ffn_b1: ids[2],
                    ffn_w2: ids[3],
                    ffn_b2: ids[4],
                    ln_gamma: ids[5],
                    ln_beta: ids[6],
                };
                let out = block_on_tape(t, fid, &a_v, a_l, &bids, 0.4)?;
                Ok(t.sum(out))
            },
            &values,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "block fd error {err}");
    }

    #[test]
    fn shared_projection_gradient_is_sum_of_branches() {
        let mut rng = Rng::new(15);
        let (f, g) = random_graph(&mut rng, 7, 4, 3);
        let w = rng.normal_matrix(4, 4, 0.5);
        let a_v = Rc::new(g.a_v_norm.clone());
        let a_l_mat = g.a_l_norm.clone();

        let visual_branch = |t: &mut Tape, ids: &[NodeId]| -> crate::error::Result<NodeId> {
            let fid = t.constant(f.clone());
            let proj = t.matmul(fid, ids[0])?;
            let agg = t.sparse_agg(a_v.clone(), proj)?;
            let out = t.add(fid, agg)?;
            Ok(t.sum(out))
        };
        let label_branch = |t: &mut Tape, ids: &[NodeId]| -> crate::error::Result<NodeId> {
            let fid = t.constant(f.clone());
            let al = t.constant(a_l_mat.clone());
            let proj = t.matmul(fid, ids[0])?;
            let agg = t.matmul(al, proj)?;
            let out = t.add(fid, agg)?;
            Ok(t.sum(out))
        };
        let both = |t: &mut Tape, ids: &[NodeId]| -> crate::error::Result<NodeId> {
            let fid = t.constant(f.clone());
            let al = t.constant(a_l_mat.clone());
            let proj = t.matmul(fid, ids[0])?;
            let agg_v = t.sparse_agg(a_v.clone(), proj)?;
            let f_v = t.add(fid, agg_v)?;
            let agg_l = t.matmul(al, proj)?;
            let f_l = t.add(fid, agg_l)?;
            let s1 = t.sum(f_v);
            let s2 = t.sum(f_l);
            t.add(s1, s2)
        };

        let params = std::slice::from_ref(&w);
        let gv = tape_gradients(&visual_branch, params).unwrap();
        let gl = tape_gradients(&label_branch, params).unwrap();
        let gb = tape_gradients(&both, params).unwrap();
        for ((a, b), c) in gv[0].data().iter().zip(gl[0].data()).zip(gb[0].data()) {
            let want = a + b;
            assert!(
                (c - want).abs() <= 1e-12 * want.abs().max(1.0),
                "{c} vs {want}"
            );
        }
    }
}
