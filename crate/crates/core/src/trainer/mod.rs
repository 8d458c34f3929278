//! Toy three-modality training harness.
//!
//! Raw synthetic features are the input space. One gated linear head per
//! modality maps them into a shared joint space. Each modality has its own
//! anchors in both spaces. Training runs plain SGD on the combined objective,
//! with assignment targets solved over memory ∪ batch.

mod bank;
mod data;
mod head;
mod metrics;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bank::MemoryBank;
pub use data::{generate_synthetic, split_holdout, SyntheticData, SyntheticDatasetSpec};
pub use head::{HeadCache, HeadGrads, ProjectionHead};
pub use metrics::{
    full_video_retrieval_eval, metrics_from_ranks, rank_of, retrieval_eval, structure_preservation_score,
    FullVideoMetrics, RetrievalMetrics,
};

use crate::losses::{
    compute_targets, evaluate_with_targets, AnchorSet, EmbeddingBatch, LossConfig, LossError, LossInputs,
    Modality, Space, TargetContext, TargetSolver,
};
use crate::matrix_io::DenseMatrix;
use crate::solvers::SolverConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("unmapped retrieval item: {0}")]
    Unmapped(String),
    #[error("model activations are not finite")]
    NonFiniteModel,
    #[error("structure score undefined: {0}")]
    DegenerateStructure(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No consistency loss at all.
    NoSspc,
    /// Only the same-modality consistency pairs.
    NoCmSspc,
    /// Targets from the two-constraint scaling baseline.
    ModifiedSk,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoSspc, Ablation::NoCmSspc, Ablation::ModifiedSk];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSspc => "no_sspc",
            Ablation::NoCmSspc => "no_cm_sspc",
            Ablation::ModifiedSk => "modified_sk",
        }
    }

    /// The effective loss config and target solver under this ablation.
    pub fn apply(self, loss: &LossConfig) -> (LossConfig, TargetSolver) {
        let mut loss = loss.clone();
        let mut kind = TargetSolver::MultiSinkhorn;
        match self {
            Ablation::Full => {}
            Ablation::NoSspc => loss.lambda_sspc = 0.0,
            Ablation::NoCmSspc => {
                for m in 0..3 {
                    for n in 0..3 {
                        if m != n {
                            loss.pair_weights[m][n] = 0.0;
                        }
                    }
                }
            }
            Ablation::ModifiedSk => kind = TargetSolver::ModifiedSinkhorn,
        }
        (loss, kind)
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: SyntheticDatasetSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub k: usize,
    pub k_prime: usize,
    pub d_joint: usize,
    pub memory_bank: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// `k_prime` here is overridden by the top-level `k_prime`.
    pub solver: SolverConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: SyntheticDatasetSpec::default(),
            batch_size: 64,
            epochs: 8,
            learning_rate: 2.0,
            lr_decay: 0.9,
            k: 16,
            k_prime: 8,
            d_joint: 16,
            memory_bank: 64,
            holdout_fraction: 0.2,
            seed: 0,
            ablation: Ablation::Full,
            solver: SolverConfig {
                epsilon: 10.0,
                max_iters: 30,
                tol: 1e-6,
                ..SolverConfig::default()
            },
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.data.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.k == 0 || self.d_joint == 0 {
            return bad("batch_size, epochs, k and d_joint must be positive".into());
        }
        if self.k_prime == 0 || self.k_prime > self.k {
            return bad(format!("k_prime must lie in 1..={}, got {}", self.k, self.k_prime));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        self.solver_config()
            .validate(Some(self.k))
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.loss.validate()?;
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            k_prime: self.k_prime,
            ..self.solver
        }
    }
}

/// Heads and anchors, indexed by [`Modality::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub heads: [ProjectionHead; 3],
    pub anchors_input: [DenseMatrix; 3],
    pub anchors_joint: [DenseMatrix; 3],
}

fn unit_gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let mut m = DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    for i in 0..rows {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

impl Model {
    pub fn init(d_input: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let heads = std::array::from_fn(|_| ProjectionHead::new(d_input, cfg.d_joint, rng));
        let anchors_input = std::array::from_fn(|_| unit_gaussian_rows(rng, cfg.k, d_input));
        let anchors_joint = std::array::from_fn(|_| unit_gaussian_rows(rng, cfg.k, cfg.d_joint));
        Self {
            heads,
            anchors_input,
            anchors_joint,
        }
    }

    pub fn project(&self, features: &[DenseMatrix; 3]) -> [DenseMatrix; 3] {
        std::array::from_fn(|m| self.heads[m].project(&features[m]))
    }

    /// [`Model::project`] that reports overflowing activations instead of
    /// panicking.
    pub fn try_project(&self, features: &[DenseMatrix; 3]) -> Result<[DenseMatrix; 3], TrainError> {
        let [a, b, c] = std::array::from_fn(|m| self.heads[m].try_forward(&features[m]).map(|f| f.0));
        match (a, b, c) {
            (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
            _ => Err(TrainError::NonFiniteModel),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(ProjectionHead::is_finite)
            && self
                .anchors_input
                .iter()
                .chain(&self.anchors_joint)
                .all(|a| a.as_slice().iter().all(|v| v.is_finite()))
    }

    fn loss_inputs(&self, input: &[DenseMatrix; 3], joint: &[DenseMatrix; 3]) -> Result<LossInputs, LossError> {
        let ms = Modality::ALL;
        let emb = |x: &[DenseMatrix; 3], s| -> Result<[EmbeddingBatch; 3], LossError> {
            let [a, b, c] = ms.map(|m| EmbeddingBatch::new(x[m.index()].clone(), m, s));
            Ok([a?, b?, c?])
        };
        let anc = |x: &[DenseMatrix; 3], s| -> Result<[AnchorSet; 3], LossError> {
            let [a, b, c] = ms.map(|m| AnchorSet::new(x[m.index()].clone(), m, s));
            Ok([a?, b?, c?])
        };
        LossInputs::new(
            emb(input, Space::Input)?,
            emb(joint, Space::Joint)?,
            anc(&self.anchors_input, Space::Input)?,
            anc(&self.anchors_joint, Space::Joint)?,
        )
    }
}

/// One line of the metrics log. Losses are the objective on the held-out
/// split at the end of the epoch, in fixed batches without memory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    /// `None` when the consistency term is switched off.
    pub loss_sspc: Option<f64>,
    pub loss_nce: f64,
    pub structure_score: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub med_r: f64,
    pub mean_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean of the per-modality structure scores.
    pub structure_score: f64,
    pub structure_scores: [f64; 3],
    /// Text queries against the video gallery.
    pub retrieval: RetrievalMetrics,
}

/// Structure and retrieval quality of `model` on `data`.
pub fn evaluate(model: &Model, data: &SyntheticData) -> Result<EvalReport, TrainError> {
    let joint = model.try_project(&data.features)?;
    let mut scores = [0.0; 3];
    for m in 0..3 {
        scores[m] = structure_preservation_score(&data.features[m], &joint[m])?;
    }
    let retrieval = retrieval_eval(&joint[Modality::Text.index()], &joint[Modality::Video.index()])?;
    Ok(EvalReport {
        structure_score: scores.iter().sum::<f64>() / 3.0,
        structure_scores: scores,
        retrieval,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub eval: EvalReport,
    pub data_checksum: u64,
    pub steps: usize,
    /// Target solves that stopped at the iteration cap.
    pub unconverged_solves: usize,
}

fn rows_of(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    DenseMatrix::new(idx.len(), m.cols(), data).expect("finite rows")
}

struct Objective<'a> {
    solver: SolverConfig,
    loss: LossConfig,
    kind: TargetSolver,
    cfg: &'a TrainConfig,
}

impl Objective<'_> {
    /// Mean held-out objective over fixed consecutive batches.
    fn held_out_loss(&self, model: &Model, data: &SyntheticData) -> Result<(f64, f64, f64), TrainError> {
        let n = data.len();
        let idx: Vec<usize> = (0..n).collect();
        let (mut total, mut sspc, mut nce, mut count) = (0.0, 0.0, 0.0, 0usize);
        for chunk in idx.chunks(self.cfg.batch_size) {
            let input: [DenseMatrix; 3] = std::array::from_fn(|m| rows_of(&data.features[m], chunk));
            let joint = model.try_project(&input)?;
            let inputs = model.loss_inputs(&input, &joint)?;
            let targets = compute_targets(&inputs, TargetContext::default(), &self.solver, &self.loss, self.kind)?;
            let (b, _) = evaluate_with_targets(&inputs, &targets, &self.loss)?;
            total += b.total;
            sspc += b.sspc;
            nce += b.nce;
            count += 1;
        }
        let c = count.max(1) as f64;
        Ok((total / c, sspc / c, nce / c))
    }
}

/// Trains on `train`, logging held-out metrics on `held_out` after every
/// epoch.
pub fn train(train: &SyntheticData, held_out: &SyntheticData, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.batch_size > train.len() {
        return Err(TrainError::InvalidConfig(format!(
            "batch_size {} exceeds {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let (loss, kind) = cfg.ablation.apply(&cfg.loss);
    let objective = Objective {
        solver: cfg.solver_config(),
        loss,
        kind,
        cfg,
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(train.features[0].cols(), cfg, &mut init_rng);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut bank = MemoryBank::new(cfg.memory_bank);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut unconverged = 0;

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut order_rng);
        for (step, batch) in order.chunks_exact(cfg.batch_size).enumerate() {
            let input: [DenseMatrix; 3] = std::array::from_fn(|m| rows_of(&train.features[m], batch));
            let diverged = |detail: &str| TrainError::Divergence {
                epoch: epoch + 1,
                step,
                detail: detail.to_string(),
            };
            let [f0, f1, f2] = std::array::from_fn(|m| model.heads[m].try_forward(&input[m]));
            let forward: [(DenseMatrix, HeadCache); 3] = match (f0, f1, f2) {
                (Some(a), Some(b), Some(c)) => [a, b, c],
                _ => return Err(diverged("projection activations overflowed")),
            };
            let joint: [DenseMatrix; 3] = std::array::from_fn(|m| forward[m].0.clone());
            let inputs = model.loss_inputs(&input, &joint)?;

            let bank_input: [Option<DenseMatrix>; 3] = std::array::from_fn(|m| bank.input_rows(m));
            let bank_joint: [Option<DenseMatrix>; 3] = std::array::from_fn(|m| bank.joint_rows(m));
            let ctx = TargetContext {
                input: std::array::from_fn(|m| bank_input[m].as_ref()),
                joint: std::array::from_fn(|m| bank_joint[m].as_ref()),
            };
            let targets = compute_targets(&inputs, ctx, &objective.solver, &objective.loss, kind)?;
            unconverged += targets.unconverged;
            let (b, grads) = evaluate_with_targets(&inputs, &targets, &objective.loss)?;
            if !b.total.is_finite() || !grads.max_abs().is_finite() {
                return Err(TrainError::Divergence {
                    epoch: epoch + 1,
                    step,
                    detail: format!("loss {} (sspc {}, nce {})", b.total, b.sspc, b.nce),
                });
            }

            for m in 0..3 {
                let g = model.heads[m].backward(&forward[m].1, &grads.joint[m]);
                model.heads[m].sgd_step(&g, lr);
                for (p, d) in model.anchors_input[m].as_mut_slice().iter_mut().zip(grads.anchors_input[m].as_slice()) {
                    *p -= lr * d;
                }
                for (p, d) in model.anchors_joint[m].as_mut_slice().iter_mut().zip(grads.anchors_joint[m].as_slice()) {
                    *p -= lr * d;
                }
            }
            if !model.is_finite() {
                return Err(diverged("parameters are no longer finite"));
            }
            bank.push(&input, &joint);
            steps += 1;
        }

        let (total, sspc, nce) = objective.held_out_loss(&model, held_out)?;
        if !total.is_finite() {
            return Err(TrainError::Divergence {
                epoch: epoch + 1,
                step: steps,
                detail: format!("held-out loss {total}"),
            });
        }
        let eval = evaluate(&model, held_out)?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss_total: total,
            loss_sspc: (objective.loss.lambda_sspc > 0.0).then_some(sspc),
            loss_nce: nce,
            structure_score: eval.structure_score,
            r_at_1: eval.retrieval.r_at_1,
            r_at_5: eval.retrieval.r_at_5,
            med_r: eval.retrieval.med_r,
            mean_r: eval.retrieval.mean_r,
        });
    }

    let eval = evaluate(&model, held_out)?;
    Ok(TrainOutcome {
        model,
        metrics,
        eval,
        data_checksum: train.checksum() ^ held_out.checksum().rotate_left(1),
        steps,
        unconverged_solves: unconverged,
    })
}

/// Generates the configured data, splits it and trains.
pub fn run(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.data)?;
    let (tr, te) = split_holdout(&data, cfg.holdout_fraction, cfg.seed);
    train(&tr, &te, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub structure_score: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub med_r: f64,
    pub mean_r: f64,
    pub final_loss: f64,
    pub data_checksum: u64,
    pub unconverged_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub data_checksum: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }
}

/// Trains every ablation on the same data and split.
pub fn ablation_suite(cfg: &TrainConfig) -> Result<AblationReport, TrainError> {
    cfg.validate()?;
    let data = generate_synthetic(&cfg.data)?;
    let (tr, te) = split_holdout(&data, cfg.holdout_fraction, cfg.seed);
    let mut rows = Vec::new();
    for a in Ablation::ALL {
        let out = train(&tr, &te, &TrainConfig { ablation: a, ..cfg.clone() })?;
        rows.push(AblationRow {
            ablation: a,
            structure_score: out.eval.structure_score,
            r_at_1: out.eval.retrieval.r_at_1,
            r_at_5: out.eval.retrieval.r_at_5,
            r_at_10: out.eval.retrieval.r_at_10,
            med_r: out.eval.retrieval.med_r,
            mean_r: out.eval.retrieval.mean_r,
            final_loss: out.metrics.last().map_or(f64::NAN, |m| m.loss_total),
            data_checksum: out.data_checksum,
            unconverged_solves: out.unconverged_solves,
        });
    }
    Ok(AblationReport {
        data_checksum: rows[0].data_checksum,
        rows,
    })
}
