//! End-to-end training of adapter + BGFormer stack + HEM with the dual-branch
//! loss, AdamW with two learning-rate groups, checkpointing, and Recall@K
//! evaluation on the encoder-free inference path.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::rc::Rc;

use crate::batch_graph::build_batch_graph;
use crate::data::{
    adapter_forward, adapter_on_tape, sample_batch, AdapterIds, AdapterParams, Dataset,
    LabeledBatch,
};
use crate::encoder::{encode_on_tape, init_stack, EncoderStack, StackIds};
use crate::error::{Error, Result};
use crate::hyperbolic::{
    hem_forward, hem_on_tape, poincare_distance, BallPoints, HemIds, HemParams,
};
use crate::numerics::matrix::Matrix;
use crate::numerics::params::ParamTensor;
use crate::numerics::rng::Rng;
use crate::numerics::tape::{NodeId, Tape};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optim::{adamw_step, adamw_update, AdamWState};

pub const INFERENCE_CHUNK: usize = 256;
pub const METRIC_KS: [usize; 4] = [1, 2, 4, 8];

/// All trainable state: the backbone-adapter, the encoder stack and the
/// shared hyperbolic head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub adapter: AdapterParams,
    pub stack: EncoderStack,
    pub hem: HemParams,
}

pub struct ModelIds {
    pub adapter: AdapterIds,
    pub stack: StackIds,
    pub hem: HemIds,
}

impl ModelParams {
    pub fn init(rng: &mut Rng, in_dim: usize, cfg: &TrainConfig) -> Result<Self> {
        let adapter = AdapterParams::identity(in_dim);
        let stack = init_stack(rng, in_dim, cfg.ffn_ratio, cfg.n_blocks, cfg.lambda)?;
        let hem = HemParams::init(rng, in_dim, cfg.embed_dim, cfg.curvature, cfg.tau);
        Ok(ModelParams {
            adapter,
            stack,
            hem,
        })
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = self.adapter.params();
        out.extend(self.stack.params());
        out.extend(self.hem.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = self.adapter.params_mut();
        out.extend(self.stack.params_mut());
        out.extend(self.hem.params_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelIds {
        ModelIds {
            adapter: self.adapter.register(tape, trainable),
            stack: self.stack.register(tape, trainable),
            hem: self.hem.register(tape, trainable),
        }
    }

    pub fn read_grads(&mut self, tape: &Tape, ids: &ModelIds) {
        self.adapter.read_grads(tape, &ids.adapter);
        self.stack.read_grads(tape, &ids.stack);
        self.hem.read_grads(tape, &ids.hem);
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, step: u64) -> Checkpoint {
        Checkpoint {
            tensors: self
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            config: cfg.clone(),
            step,
        }
    }

    /// Rebuild the full model from a checkpoint, validating tensor presence
    /// and shape consistency against the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ModelParams> {
        let cfg = &ckpt.config;
        let (adapter, hem) = eval_params_from_checkpoint(ckpt)?;
        let c = adapter.out_dim();
        let hidden = cfg.ffn_ratio * c;
        let mut rng = Rng::new(0);
        let mut stack = init_stack(&mut rng, c, cfg.ffn_ratio, cfg.n_blocks, cfg.lambda)?;
        for p in stack.params_mut() {
            let m = require_tensor(ckpt, &p.name)?;
            check_shape(&p.name, m, p.value.rows(), p.value.cols())?;
            p.value = m.clone();
        }
        debug_assert_eq!(stack.blocks[0].ffn_w1.value.cols(), hidden);
        Ok(ModelParams {
            adapter,
            stack,
            hem,
        })
    }
}

fn require_tensor<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a Matrix> {
    ckpt.tensor(name)
        .ok_or_else(|| Error::parse(format!("tensor {name}"), "missing from checkpoint"))
}

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::parse(
            format!("tensor {name}"),
            format!(
                "shape {}x{} does not match expected {}x{}",
                m.rows(),
                m.cols(),
                rows,
                cols
            ),
        ));
    }
    Ok(())
}

/// The adapter + HEM pair needed by the test-time path. Encoder tensors may
/// be absent from the checkpoint; inference never touches them.
pub fn eval_params_from_checkpoint(ckpt: &Checkpoint) -> Result<(AdapterParams, HemParams)> {
    let cfg = &ckpt.config;
    let w = require_tensor(ckpt, "adapter.w")?.clone();
    let b = require_tensor(ckpt, "adapter.b")?.clone();
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::parse(
            "tensor adapter.b",
            format!("shape {}x{} does not match adapter.w", b.rows(), b.cols()),
        ));
    }
    let mut adapter = AdapterParams::identity(w.rows());
    adapter.w.value = w;
    adapter.b.value = b;

    let fc_w = require_tensor(ckpt, "hem.fc_w")?.clone();
    check_shape("hem.fc_w", &fc_w, adapter.out_dim(), cfg.embed_dim)?;
    let fc_b = require_tensor(ckpt, "hem.fc_b")?.clone();
    check_shape("hem.fc_b", &fc_b, 1, cfg.embed_dim)?;
    let mut rng = Rng::new(0);
    let mut hem = HemParams::init(
        &mut rng,
        adapter.out_dim(),
        cfg.embed_dim,
        cfg.curvature,
        cfg.tau,
    );
    hem.fc_w.value = fc_w;
    hem.fc_b.value = fc_b;
    Ok((adapter, hem))
}

/// Dual-branch training loss on an existing tape. The batch graph is built
/// once from the adapter output and held constant; both HEM branches use the
/// same registered parameters.
pub fn build_training_loss(
    tape: &mut Tape,
    features: NodeId,
    model: &ModelParams,
    ids: &ModelIds,
    graph: &crate::batch_graph::BatchGraph,
    labels: &[i64],
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let f = adapter_on_tape(tape, features, &model.adapter, &ids.adapter)?;
    let f_tilde = encode_on_tape(tape, f, graph, &ids.stack, cfg.lambda)?;
    let labels_rc = Rc::new(labels.to_vec());
    let l1 = branch_loss(tape, f, model, ids, labels_rc.clone())?;
    let l2 = branch_loss(tape, f_tilde, model, ids, labels_rc)?;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::contract(format!(
            "loss weight alpha must lie in [0, 1], got {}",
            cfg.alpha
        )));
    }
    let s1 = tape.scale(l1, cfg.alpha);
    let s2 = tape.scale(l2, 1.0 - cfg.alpha);
    tape.add(s1, s2)
}

fn branch_loss(
    tape: &mut Tape,
    feat: NodeId,
    model: &ModelParams,
    ids: &ModelIds,
    labels: Rc<Vec<i64>>,
) -> Result<NodeId> {
    let z = hem_on_tape(tape, feat, &model.hem, &ids.hem)?;
    let d = tape.pairwise_dist(z, model.hem.curvature)?;
    tape.pairwise_ce_loss(d, labels, model.hem.tau)
}

/// Forward + backward on one batch, filling every ParamTensor's grad.
/// Returns the loss. No optimizer update.
pub fn compute_grads(
    batch: &LabeledBatch,
    model: &mut ModelParams,
    cfg: &TrainConfig,
) -> Result<f64> {
    let f_val = adapter_forward(&batch.features, &model.adapter)?;
    let graph = build_batch_graph(&f_val, &batch.labels, cfg.k_neighbors)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.features.clone());
    let ids = model.register(&mut tape, true);
    let loss = build_training_loss(&mut tape, x, model, &ids, &graph, &batch.labels, cfg)?;
    tape.backward(loss)?;
    model.read_grads(&tape, &ids);
    Ok(tape.scalar(loss))
}

/// Loss only, parameters untouched.
pub fn forward_loss(batch: &LabeledBatch, model: &ModelParams, cfg: &TrainConfig) -> Result<f64> {
    let f_val = adapter_forward(&batch.features, &model.adapter)?;
    let graph = build_batch_graph(&f_val, &batch.labels, cfg.k_neighbors)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.features.clone());
    let ids = model.register(&mut tape, false);
    let loss = build_training_loss(&mut tape, x, model, &ids, &graph, &batch.labels, cfg)?;
    Ok(tape.scalar(loss))
}

/// One training step: gradients on the dual-branch loss, then one AdamW
/// update with the group learning rates.
pub fn train_step(
    batch: &LabeledBatch,
    model: &mut ModelParams,
    opt: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let loss = compute_grads(batch, model, cfg)?;
    adamw_step(
        model.params_mut(),
        opt,
        cfg.lr_backbone,
        cfg.lr_head,
        cfg.weight_decay,
    );
    Ok(loss)
}

/// Test-time embeddings: adapter then HEM, in fixed-size chunks. The encoder
/// stack is never invoked, so results are identical whether or not encoder
/// tensors exist.
pub fn inference_embed(
    ds: &Dataset,
    adapter: &AdapterParams,
    hem: &HemParams,
) -> Result<(BallPoints, Vec<i64>)> {
    inference_embed_chunked(ds, adapter, hem, INFERENCE_CHUNK)
}

pub fn inference_embed_chunked(
    ds: &Dataset,
    adapter: &AdapterParams,
    hem: &HemParams,
    chunk: usize,
) -> Result<(BallPoints, Vec<i64>)> {
    if chunk == 0 {
        return Err(Error::contract("chunk size must be >= 1".to_string()));
    }
    let mut coords = Matrix::zeros(ds.len(), hem.fc_w.value.cols());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let mut block = Matrix::zeros(end - start, ds.dim());
        for (i, row) in (start..end).enumerate() {
            block.row_mut(i).copy_from_slice(ds.features().row(row));
        }
        let f = adapter_forward(&block, adapter)?;
        let z = hem_forward(&f, hem)?;
        for (i, row) in (start..end).enumerate() {
            coords.row_mut(row).copy_from_slice(z.coords().row(i));
        }
        start = end;
    }
    Ok((
        BallPoints::new_unchecked(coords, hem.curvature),
        ds.labels().to_vec(),
    ))
}

/// Recall@K report plus the number of queries excluded because their class
/// has no other member.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub recalls: Vec<(usize, f64)>,
    pub excluded_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, r)| *r)
    }
}

/// For each query, rank every other sample by ascending hyperbolic distance
/// (ties to the smaller index); Recall@k is the fraction of queries whose
/// top k contains at least one same-class sample.
pub fn recall_at_k(z: &BallPoints, labels: &[i64], ks: &[usize]) -> Result<RecallReport> {
    let n = z.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "recall needs at least 2 samples, got {n}"
        )));
    }
    if labels.len() != n {
        return Err(Error::contract(format!(
            "point count {n} != label count {}",
            labels.len()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::contract(
            "recall cutoffs must be positive".to_string(),
        ));
    }
    let mut class_counts = std::collections::HashMap::new();
    for &l in labels {
        *class_counts.entry(l).or_insert(0usize) += 1;
    }
    let mut hits = vec![0usize; ks.len()];
    let mut queries = 0usize;
    let mut excluded = 0usize;
    for i in 0..n {
        if class_counts[&labels[i]] < 2 {
            excluded += 1;
            continue;
        }
        queries += 1;
        let mut order: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d = poincare_distance(z.point(i), z.point(j), z.curvature())
                    .expect("BallPoints rows are inside the ball");
                (d, j)
            })
            .collect();
        order.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite distances")
                .then(a.1.cmp(&b.1))
        });
        let first_hit = order
            .iter()
            .position(|&(_, j)| labels[j] == labels[i])
            .expect("class has another member");
        for (slot, &k) in ks.iter().enumerate() {
            if first_hit < k {
                hits[slot] += 1;
            }
        }
    }
    if queries == 0 {
        return Err(Error::contract(
            "every query class is a singleton; recall undefined".to_string(),
        ));
    }
    Ok(RecallReport {
        recalls: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, h as f64 / queries as f64))
            .collect(),
        excluded_queries: excluded,
    })
}

/// One metric-log row, produced per evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub recalls: [f64; 4],
    pub loss: f64,
}

/// `step,epoch,recall@1,recall@2,recall@4,recall@8,loss` CSV.
pub fn metric_log_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("step,epoch,recall@1,recall@2,recall@4,recall@8,loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.epoch, r.recalls[0], r.recalls[1], r.recalls[2], r.recalls[3], r.loss
        ));
    }
    out
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_model: Checkpoint,
    pub log: Vec<EvalRecord>,
    pub best_recall1: f64,
    pub initial_recall1: f64,
    pub test_split: Dataset,
}

/// Full training run: class-disjoint 50/50 split, `ceil(classes/p)` batches
/// per epoch, evaluation on the test split every `eval_every` epochs (plus
/// the untrained model and the final epoch), best checkpoint by Recall@1.
pub fn train_loop(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_ds, test_ds) = dataset.split_by_class(0.5)?;
    if train_ds.num_classes() == 0 || test_ds.num_classes() == 0 {
        return Err(Error::contract(
            "class-disjoint split produced an empty side".to_string(),
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = ModelParams::init(&mut rng, dataset.dim(), cfg)?;
    let mut opt = AdamWState::new();
    let batches_per_epoch = train_ds.num_classes().div_ceil(cfg.p);

    let evaluate = |model: &ModelParams| -> Result<[f64; 4]> {
        let (z, labels) = inference_embed(&test_ds, &model.adapter, &model.hem)?;
        let report = recall_at_k(&z, &labels, &METRIC_KS)?;
        let mut out = [0.0; 4];
        for (slot, (_, r)) in report.recalls.iter().enumerate() {
            out[slot] = *r;
        }
        Ok(out)
    };

    // Untrained baseline row; its loss is a forward pass on a probe batch
    // from a derived stream so the training draw sequence is untouched.
    let mut probe_rng = rng.derive(1);
    let probe = sample_batch(&train_ds, cfg.p, cfg.k_pc, &mut probe_rng)?;
    let initial_loss = forward_loss(&probe, &model, cfg)?;
    let initial_recalls = evaluate(&model)?;
    let mut log = vec![EvalRecord {
        step: 0,
        epoch: 0,
        recalls: initial_recalls,
        loss: initial_loss,
    }];
    on_eval(&log[0]);
    let initial_recall1 = initial_recalls[0];

    let mut best_recall1 = initial_recall1;
    let mut best = model.to_checkpoint(cfg, 0);
    let mut step = 0u64;
    let mut loss_accum = 0.0;
    let mut loss_count = 0usize;
    for epoch in 1..=cfg.epochs {
        for _ in 0..batches_per_epoch {
            let batch = sample_batch(&train_ds, cfg.p, cfg.k_pc, &mut rng)?;
            let loss = train_step(&batch, &mut model, &mut opt, cfg)?;
            step += 1;
            loss_accum += loss;
            loss_count += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let recalls = evaluate(&model)?;
            let record = EvalRecord {
                step,
                epoch,
                recalls,
                loss: loss_accum / loss_count as f64,
            };
            on_eval(&record);
            log.push(record);
            loss_accum = 0.0;
            loss_count = 0;
            if recalls[0] > best_recall1 {
                best_recall1 = recalls[0];
                best = model.to_checkpoint(cfg, step);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        final_model: model.to_checkpoint(cfg, step),
        log,
        best_recall1,
        initial_recall1,
        test_split: test_ds,
    })
}
