//! Similarities, the structure-preserving consistency loss, InfoNCE and the
//! combined training objective, with analytic gradients.
//!
//! Assignment targets come from a solver call and are treated as constants:
//! the `*_with_targets` entry points take them precomputed, and every
//! gradient here is the gradient at fixed targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_io::DenseMatrix;
use crate::solvers::{modified_sinkhorn, multi_sinkhorn, SolverConfig, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("zero-norm vector: {what} row {index}")]
    ZeroNorm { what: &'static str, index: usize },
    #[error("shape mismatch: {what} {left:?} vs {right:?}")]
    ShapeMismatch {
        what: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("target {value} at index {index} is outside [0, 1]")]
    TargetOutOfRange { index: usize, value: f64 },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Tag(String),
    #[error("assignment solver failed: {0}")]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Video, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Video => "v",
            Modality::Audio => "a",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Input,
    Joint,
}

fn check_nonzero_rows(m: &DenseMatrix, what: &'static str) -> Result<(), LossError> {
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&v| v == 0.0) {
            return Err(LossError::ZeroNorm { what, index: i });
        }
    }
    Ok(())
}

/// `N × d` embeddings of one modality in one space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: DenseMatrix,
    pub modality: Modality,
    pub space: Space,
}

impl EmbeddingBatch {
    pub fn new(vectors: DenseMatrix, modality: Modality, space: Space) -> Result<Self, LossError> {
        check_nonzero_rows(&vectors, "embedding")?;
        Ok(Self {
            vectors,
            modality,
            space,
        })
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// `K × d` learnable anchors of one modality in one space.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    vectors: DenseMatrix,
    pub modality: Modality,
    pub space: Space,
}

impl AnchorSet {
    pub fn new(vectors: DenseMatrix, modality: Modality, space: Space) -> Result<Self, LossError> {
        check_nonzero_rows(&vectors, "anchor")?;
        Ok(Self {
            vectors,
            modality,
            space,
        })
    }

    pub fn vectors(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_tv: f64,
    pub lambda_ta: f64,
    pub lambda_va: f64,
    pub lambda_sspc: f64,
    pub lambda_nce: f64,
    /// `pair_weights[m][n]` weighs the term pairing input modality `m` with
    /// joint modality `n`, indexed t, v, a.
    pub pair_weights: [[f64; 3]; 3],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            kappa: 0.1,
            alpha: 1.0,
            beta: 1.0,
            lambda_tv: 1.0,
            lambda_ta: 1.0,
            lambda_va: 1.0,
            lambda_sspc: 1.0,
            lambda_nce: 1.0,
            pair_weights: default_pair_weights(),
        }
    }
}

/// 1.0 on the two text-video terms, 0.1 elsewhere.
pub fn default_pair_weights() -> [[f64; 3]; 3] {
    let mut w = [[0.1; 3]; 3];
    w[Modality::Text.index()][Modality::Video.index()] = 1.0;
    w[Modality::Video.index()][Modality::Text.index()] = 1.0;
    w
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("tau", self.tau), ("kappa", self.kappa)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_tv", self.lambda_tv),
            ("lambda_ta", self.lambda_ta),
            ("lambda_va", self.lambda_va),
            ("lambda_sspc", self.lambda_sspc),
            ("lambda_nce", self.lambda_nce),
        ];
        for (name, v) in weights
            .into_iter()
            .chain(self.pair_weights.iter().flatten().map(|&v| ("pair_weights", v)))
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    fn nce_weights(&self) -> [f64; 3] {
        [self.lambda_tv, self.lambda_ta, self.lambda_va]
    }
}

/// The three joint-space pairs scored by InfoNCE, aligned with
/// `lambda_tv`, `lambda_ta`, `lambda_va`.
pub const NCE_PAIRS: [(Modality, Modality); 3] = [
    (Modality::Text, Modality::Video),
    (Modality::Text, Modality::Audio),
    (Modality::Video, Modality::Audio),
];

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `a·b / (τ‖a‖‖b‖)`.
pub fn scaled_cosine(a: &[f64], b: &[f64], tau: f64) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::ShapeMismatch {
            what: "vectors",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(LossError::ZeroNorm { what: "a", index: 0 });
    }
    if nb == 0.0 {
        return Err(LossError::ZeroNorm { what: "b", index: 0 });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (tau * na * nb))
}

/// `exp(a·b / (τ‖a‖‖b‖))`.
pub fn exp_sim(a: &[f64], b: &[f64], tau: f64) -> Result<f64, LossError> {
    scaled_cosine(a, b, tau).map(f64::exp)
}

fn normalized_rows(m: &DenseMatrix, what: &'static str) -> Result<(DenseMatrix, Vec<f64>), LossError> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 {
            return Err(LossError::ZeroNorm { what, index: i });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

fn check_same_dim(x: &DenseMatrix, z: &DenseMatrix, what: &'static str) -> Result<(), LossError> {
    if x.cols() != z.cols() {
        return Err(LossError::ShapeMismatch {
            what,
            left: x.shape(),
            right: z.shape(),
        });
    }
    Ok(())
}

/// `N × K` matrix of scaled cosines between rows of `x` and rows of `z`.
pub fn scaled_cosine_matrix(x: &DenseMatrix, z: &DenseMatrix, tau: f64) -> Result<DenseMatrix, LossError> {
    check_same_dim(x, z, "embedding/anchor dims")?;
    let (xn, _) = normalized_rows(x, "embedding")?;
    let (zn, _) = normalized_rows(z, "anchor")?;
    Ok(xn.matmul_t(&zn).map(|c| c / tau))
}

pub fn exp_sim_matrix(x: &DenseMatrix, z: &DenseMatrix, tau: f64) -> Result<DenseMatrix, LossError> {
    Ok(scaled_cosine_matrix(x, z, tau)?.map(f64::exp))
}

/// Backpropagates `grad = ∂L/∂C` through `C = cos(x, z)/τ`.
fn scaled_cosine_backward(
    x: &DenseMatrix,
    z: &DenseMatrix,
    grad: &DenseMatrix,
    tau: f64,
) -> Result<(DenseMatrix, DenseMatrix), LossError> {
    let (xn, xnorm) = normalized_rows(x, "embedding")?;
    let (zn, znorm) = normalized_rows(z, "anchor")?;
    let g = grad.map(|v| v / tau);
    let dxn = g.matmul(&zn);
    let dzn = g.t_matmul(&xn);
    Ok((
        project_out(&dxn, &xn, &xnorm),
        project_out(&dzn, &zn, &znorm),
    ))
}

/// Chain rule through row normalization: `(I - u uᵀ) g / ‖v‖`.
fn project_out(g: &DenseMatrix, unit: &DenseMatrix, norms: &[f64]) -> DenseMatrix {
    let mut out = g.clone();
    for i in 0..g.rows() {
        let u = unit.row(i);
        let along: f64 = g.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
        for (o, ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - along * ui) / norms[i];
        }
    }
    out
}

fn check_targets(logits: &DenseMatrix, targets: &DenseMatrix) -> Result<(), LossError> {
    if logits.shape() != targets.shape() {
        return Err(LossError::ShapeMismatch {
            what: "logits/targets",
            left: logits.shape(),
            right: targets.shape(),
        });
    }
    if let Some((index, &value)) = targets
        .as_slice()
        .iter()
        .enumerate()
        .find(|(_, t)| !(0.0..=1.0).contains(*t))
    {
        return Err(LossError::TargetOutOfRange { index, value });
    }
    Ok(())
}

fn bce_elem(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean elementwise binary cross-entropy on logits.
pub fn bce_with_logits(logits: &DenseMatrix, targets: &DenseMatrix) -> Result<f64, LossError> {
    check_targets(logits, targets)?;
    let n = logits.as_slice().len().max(1) as f64;
    Ok(logits
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(&x, &t)| bce_elem(x, t))
        .sum::<f64>()
        / n)
}

/// [`bce_with_logits`] and its gradient with respect to the logits.
pub fn bce_with_logits_grad(
    logits: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<(f64, DenseMatrix), LossError> {
    let value = bce_with_logits(logits, targets)?;
    let n = logits.as_slice().len().max(1) as f64;
    let mut grad = logits.clone();
    for (g, &t) in grad.as_mut_slice().iter_mut().zip(targets.as_slice()) {
        *g = (sigmoid(*g) - t) / n;
    }
    Ok((value, grad))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over dot products, with gradients.
pub fn nce_with_grad(
    x: &DenseMatrix,
    y: &DenseMatrix,
    kappa: f64,
) -> Result<(f64, DenseMatrix, DenseMatrix), LossError> {
    if x.shape() != y.shape() {
        return Err(LossError::ShapeMismatch {
            what: "nce batches",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let n = x.rows();
    if n == 0 {
        return Ok((0.0, x.clone(), y.clone()));
    }
    let s = x.matmul_t(y).map(|v| v / kappa);
    let mut ds = DenseMatrix::zeros(n, n);
    let scale = 0.5 / n as f64;
    let (mut fwd, mut bwd) = (0.0, 0.0);
    for i in 0..n {
        let lse = log_sum_exp(s.row(i).iter().copied());
        fwd += lse - s[(i, i)];
        for j in 0..n {
            ds[(i, j)] += scale * (s[(i, j)] - lse).exp();
        }
        ds[(i, i)] -= scale;
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| s[(i, j)]));
        bwd += lse - s[(j, j)];
        for i in 0..n {
            ds[(i, j)] += scale * (s[(i, j)] - lse).exp();
        }
        ds[(j, j)] -= scale;
    }
    let value = (fwd + bwd) * scale;
    let ds = ds.map(|v| v / kappa);
    Ok((value, ds.matmul(y), ds.t_matmul(x)))
}

pub fn nce_loss(x: &EmbeddingBatch, y: &EmbeddingBatch, kappa: f64) -> Result<f64, LossError> {
    nce_with_grad(x.vectors(), y.vectors(), kappa).map(|(v, _, _)| v)
}

/// Which scaling algorithm produces the consistency targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSolver {
    #[default]
    MultiSinkhorn,
    /// Two-constraint baseline; cells above 1 are clipped so that the
    /// result is a valid BCE target.
    ModifiedSinkhorn,
}

/// Result of a target solve.
#[derive(Debug, Clone)]
pub struct SolvedTarget {
    pub q: DenseMatrix,
    pub converged: bool,
}

/// `M(S)`: the assignment used as a BCE target for similarity matrix `s`.
pub fn assignment_target(
    s: &DenseMatrix,
    solver: &SolverConfig,
    kind: TargetSolver,
) -> Result<SolvedTarget, LossError> {
    match kind {
        TargetSolver::MultiSinkhorn => {
            let m = multi_sinkhorn(s, solver)?;
            Ok(SolvedTarget {
                q: m.q,
                converged: m.report.converged,
            })
        }
        TargetSolver::ModifiedSinkhorn => {
            let a = modified_sinkhorn(s, solver)?;
            Ok(SolvedTarget {
                q: a.q.map(|v| v.clamp(0.0, 1.0)),
                converged: a.report.converged,
            })
        }
    }
}

/// Value and gradients of one consistency pair at fixed targets.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub value: f64,
    pub d_src: DenseMatrix,
    pub d_dst: DenseMatrix,
    pub d_z_src: DenseMatrix,
    pub d_z_dst: DenseMatrix,
}

/// `α·g(C(src, z_src), target_for_src) + β·g(C(dst, z_dst), target_for_dst)`
/// where `C` is the scaled cosine and `g` is BCE-with-logits.
#[allow(clippy::too_many_arguments)]
pub fn sspc_pair_with_targets(
    src: &DenseMatrix,
    dst: &DenseMatrix,
    z_src: &DenseMatrix,
    z_dst: &DenseMatrix,
    target_for_src: &DenseMatrix,
    target_for_dst: &DenseMatrix,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<PairGrad, LossError> {
    let (v1, d_src, d_z_src) = bce_term(src, z_src, target_for_src, tau)?;
    let (v2, d_dst, d_z_dst) = bce_term(dst, z_dst, target_for_dst, tau)?;
    let scale = |m: DenseMatrix, w: f64| m.map(|v| v * w);
    Ok(PairGrad {
        value: alpha * v1 + beta * v2,
        d_src: scale(d_src, alpha),
        d_z_src: scale(d_z_src, alpha),
        d_dst: scale(d_dst, beta),
        d_z_dst: scale(d_z_dst, beta),
    })
}

fn bce_term(
    x: &DenseMatrix,
    z: &DenseMatrix,
    target: &DenseMatrix,
    tau: f64,
) -> Result<(f64, DenseMatrix, DenseMatrix), LossError> {
    let logits = scaled_cosine_matrix(x, z, tau)?;
    let (value, g) = bce_with_logits_grad(&logits, target)?;
    let (dx, dz) = scaled_cosine_backward(x, z, &g, tau)?;
    Ok((value, dx, dz))
}

/// One consistency pair with its targets solved by multi-assignment
/// Sinkhorn-Knopp: logits from each space are matched against the
/// assignment computed in the other.
pub fn sspc_pair_loss(
    src: &EmbeddingBatch,
    dst: &EmbeddingBatch,
    z_src: &AnchorSet,
    z_dst: &AnchorSet,
    solver: &SolverConfig,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    if src.len() != dst.len() {
        return Err(LossError::ShapeMismatch {
            what: "pair batch sizes",
            left: src.vectors().shape(),
            right: dst.vectors().shape(),
        });
    }
    if z_src.len() != z_dst.len() {
        return Err(LossError::ShapeMismatch {
            what: "pair anchor counts",
            left: z_src.vectors().shape(),
            right: z_dst.vectors().shape(),
        });
    }
    let kind = TargetSolver::MultiSinkhorn;
    let t_dst = assignment_target(&exp_sim_matrix(dst.vectors(), z_dst.vectors(), cfg.tau)?, solver, kind)?;
    let t_src = assignment_target(&exp_sim_matrix(src.vectors(), z_src.vectors(), cfg.tau)?, solver, kind)?;
    sspc_pair_with_targets(
        src.vectors(),
        dst.vectors(),
        z_src.vectors(),
        z_dst.vectors(),
        &t_dst.q,
        &t_src.q,
        cfg.alpha,
        cfg.beta,
        cfg.tau,
    )
    .map(|p| p.value)
}

/// Everything the combined objective reads, indexed by [`Modality::index`].
#[derive(Debug, Clone)]
pub struct LossInputs {
    pub input: [EmbeddingBatch; 3],
    pub joint: [EmbeddingBatch; 3],
    pub anchors_input: [AnchorSet; 3],
    pub anchors_joint: [AnchorSet; 3],
}

impl LossInputs {
    pub fn new(
        input: [EmbeddingBatch; 3],
        joint: [EmbeddingBatch; 3],
        anchors_input: [AnchorSet; 3],
        anchors_joint: [AnchorSet; 3],
    ) -> Result<Self, LossError> {
        let n = input[0].len();
        let k = anchors_input[0].len();
        for m in Modality::ALL {
            let i = m.index();
            let tags = [
                (input[i].modality, input[i].space, Space::Input),
                (joint[i].modality, joint[i].space, Space::Joint),
                (anchors_input[i].modality, anchors_input[i].space, Space::Input),
                (anchors_joint[i].modality, anchors_joint[i].space, Space::Joint),
            ];
            for (modality, space, want) in tags {
                if modality != m || space != want {
                    return Err(LossError::Tag(format!(
                        "slot {} expects {:?}/{:?}, got {:?}/{:?}",
                        m.tag(),
                        m,
                        want,
                        modality,
                        space
                    )));
                }
            }
            for b in [&input[i], &joint[i]] {
                if b.len() != n {
                    return Err(LossError::ShapeMismatch {
                        what: "batch sizes",
                        left: input[0].vectors().shape(),
                        right: b.vectors().shape(),
                    });
                }
            }
            for a in [&anchors_input[i], &anchors_joint[i]] {
                if a.len() != k {
                    return Err(LossError::ShapeMismatch {
                        what: "anchor counts",
                        left: anchors_input[0].vectors().shape(),
                        right: a.vectors().shape(),
                    });
                }
            }
            check_same_dim(input[i].vectors(), anchors_input[i].vectors(), "input space dims")?;
            check_same_dim(joint[i].vectors(), anchors_joint[i].vectors(), "joint space dims")?;
        }
        check_same_dim(joint[0].vectors(), joint[1].vectors(), "joint space dims")?;
        check_same_dim(joint[0].vectors(), joint[2].vectors(), "joint space dims")?;
        Ok(Self {
            input,
            joint,
            anchors_input,
            anchors_joint,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.input[0].len()
    }
}

/// Frozen consistency targets for every pair the config needs.
///
/// `input[m] = M(exp_sim(m, z_m))`, `joint[m][n] = M(exp_sim(n̂, ẑ_m))`.
#[derive(Debug, Clone, Default)]
pub struct Targets {
    pub input: [Option<DenseMatrix>; 3],
    pub joint: [[Option<DenseMatrix>; 3]; 3],
    /// Solves that hit the iteration cap (their best iterate is used).
    pub unconverged: usize,
}

/// Extra rows that take part in the assignment solves but not in the loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct TargetContext<'a> {
    pub input: [Option<&'a DenseMatrix>; 3],
    pub joint: [Option<&'a DenseMatrix>; 3],
}

fn stacked_target(
    extra: Option<&DenseMatrix>,
    x: &DenseMatrix,
    z: &DenseMatrix,
    tau: f64,
    solver: &SolverConfig,
    kind: TargetSolver,
) -> Result<SolvedTarget, LossError> {
    let Some(extra) = extra.filter(|e| e.rows() > 0) else {
        return assignment_target(&exp_sim_matrix(x, z, tau)?, solver, kind);
    };
    check_same_dim(extra, x, "memory rows")?;
    let mut data = extra.as_slice().to_vec();
    data.extend_from_slice(x.as_slice());
    let all = DenseMatrix::new(extra.rows() + x.rows(), x.cols(), data).expect("finite rows");
    let solved = assignment_target(&exp_sim_matrix(&all, z, tau)?, solver, kind)?;
    let k = solved.q.cols();
    let tail = solved.q.as_slice()[extra.rows() * k..].to_vec();
    Ok(SolvedTarget {
        q: DenseMatrix::new(x.rows(), k, tail).expect("finite plan"),
        converged: solved.converged,
    })
}

/// Solves every target with positive weight. Rows of `context` are
/// prepended to the batch for the solve and dropped afterwards.
pub fn compute_targets(
    inputs: &LossInputs,
    context: TargetContext<'_>,
    solver: &SolverConfig,
    cfg: &LossConfig,
    kind: TargetSolver,
) -> Result<Targets, LossError> {
    cfg.validate()?;
    let mut targets = Targets::default();
    if cfg.lambda_sspc == 0.0 {
        return Ok(targets);
    }
    for m in 0..3 {
        let needed = cfg.pair_weights[m].iter().any(|&w| w > 0.0);
        if needed && cfg.beta > 0.0 {
            let t = stacked_target(
                context.input[m],
                inputs.input[m].vectors(),
                inputs.anchors_input[m].vectors(),
                cfg.tau,
                solver,
                kind,
            )?;
            targets.unconverged += usize::from(!t.converged);
            targets.input[m] = Some(t.q);
        }
        for n in 0..3 {
            if cfg.pair_weights[m][n] > 0.0 && cfg.alpha > 0.0 {
                let t = stacked_target(
                    context.joint[n],
                    inputs.joint[n].vectors(),
                    inputs.anchors_joint[m].vectors(),
                    cfg.tau,
                    solver,
                    kind,
                )?;
                targets.unconverged += usize::from(!t.converged);
                targets.joint[m][n] = Some(t.q);
            }
        }
    }
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted consistency sum before `lambda_sspc`.
    pub sspc: f64,
    /// Weighted InfoNCE sum before `lambda_nce`.
    pub nce: f64,
    pub sspc_terms: [[f64; 3]; 3],
    pub nce_terms: [f64; 3],
}

/// Gradients of the total loss at fixed targets.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub joint: [DenseMatrix; 3],
    pub anchors_input: [DenseMatrix; 3],
    pub anchors_joint: [DenseMatrix; 3],
}

impl Gradients {
    fn zeros_like(inputs: &LossInputs) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            joint: std::array::from_fn(|i| z(inputs.joint[i].vectors())),
            anchors_input: std::array::from_fn(|i| z(inputs.anchors_input[i].vectors())),
            anchors_joint: std::array::from_fn(|i| z(inputs.anchors_joint[i].vectors())),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.joint
            .iter()
            .chain(&self.anchors_input)
            .chain(&self.anchors_joint)
            .flat_map(|m| m.as_slice())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

fn axpy(dst: &mut DenseMatrix, w: f64, src: &DenseMatrix) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += w * s;
    }
}

fn missing(what: &str, m: usize, n: Option<usize>) -> LossError {
    LossError::InvalidConfig(format!("no {what} target for pair ({m}, {n:?})"))
}

/// Combined objective and its gradients at fixed targets.
pub fn evaluate_with_targets(
    inputs: &LossInputs,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients), LossError> {
    cfg.validate()?;
    let mut grads = Gradients::zeros_like(inputs);
    let mut sspc_terms = [[0.0; 3]; 3];
    let mut sspc = 0.0;
    if cfg.lambda_sspc > 0.0 {
        for m in 0..3 {
            for n in 0..3 {
                let w = cfg.pair_weights[m][n];
                if w == 0.0 {
                    continue;
                }
                let zeros;
                let t_src = match (cfg.alpha > 0.0, &targets.joint[m][n]) {
                    (true, Some(t)) => t,
                    (true, None) => return Err(missing("joint", m, Some(n))),
                    (false, _) => {
                        zeros = DenseMatrix::zeros(inputs.batch_size(), inputs.anchors_input[m].len());
                        &zeros
                    }
                };
                let zeros_dst;
                let t_dst = match (cfg.beta > 0.0, &targets.input[m]) {
                    (true, Some(t)) => t,
                    (true, None) => return Err(missing("input", m, None)),
                    (false, _) => {
                        zeros_dst = DenseMatrix::zeros(inputs.batch_size(), inputs.anchors_joint[m].len());
                        &zeros_dst
                    }
                };
                let p = sspc_pair_with_targets(
                    inputs.input[m].vectors(),
                    inputs.joint[n].vectors(),
                    inputs.anchors_input[m].vectors(),
                    inputs.anchors_joint[m].vectors(),
                    t_src,
                    t_dst,
                    cfg.alpha,
                    cfg.beta,
                    cfg.tau,
                )?;
                sspc_terms[m][n] = p.value;
                sspc += w * p.value;
                let scale = w * cfg.lambda_sspc;
                axpy(&mut grads.joint[n], scale, &p.d_dst);
                axpy(&mut grads.anchors_input[m], scale, &p.d_z_src);
                axpy(&mut grads.anchors_joint[m], scale, &p.d_z_dst);
            }
        }
    }

    let mut nce_terms = [0.0; 3];
    let mut nce = 0.0;
    if cfg.lambda_nce > 0.0 {
        for (p, ((x, y), w)) in NCE_PAIRS.iter().zip(cfg.nce_weights()).enumerate() {
            if w == 0.0 {
                continue;
            }
            let (xi, yi) = (x.index(), y.index());
            let (v, dx, dy) = nce_with_grad(inputs.joint[xi].vectors(), inputs.joint[yi].vectors(), cfg.kappa)?;
            nce_terms[p] = v;
            nce += w * v;
            axpy(&mut grads.joint[xi], w * cfg.lambda_nce, &dx);
            axpy(&mut grads.joint[yi], w * cfg.lambda_nce, &dy);
        }
    }

    let breakdown = LossBreakdown {
        total: cfg.lambda_sspc * sspc + cfg.lambda_nce * nce,
        sspc,
        nce,
        sspc_terms,
        nce_terms,
    };
    Ok((breakdown, grads))
}

/// Weighted sum of the nine consistency pairs.
pub fn sspc_total(inputs: &LossInputs, solver: &SolverConfig, cfg: &LossConfig) -> Result<f64, LossError> {
    let only_sspc = LossConfig {
        lambda_sspc: 1.0,
        lambda_nce: 0.0,
        ..cfg.clone()
    };
    total_loss(inputs, solver, &only_sspc).map(|b| b.sspc)
}

pub fn total_loss(inputs: &LossInputs, solver: &SolverConfig, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    loss_gradients(inputs, solver, cfg).map(|(b, _)| b)
}

/// Total loss and its gradients with respect to the joint embeddings and
/// all six anchor sets, with multi-assignment targets held fixed.
pub fn loss_gradients(
    inputs: &LossInputs,
    solver: &SolverConfig,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients), LossError> {
    let targets = compute_targets(inputs, TargetContext::default(), solver, cfg, TargetSolver::MultiSinkhorn)?;
    evaluate_with_targets(inputs, &targets, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e = [0.0, 1.0, 0.0];
        assert!((scaled_cosine(&e, &e, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert!((exp_sim(&e, &e, 0.1).unwrap() - 22026.465794806718).abs() < 1e-8);
        assert_eq!(scaled_cosine(&[1.0, 0.0], &[0.0, 2.0], 0.1).unwrap(), 0.0);
        assert_eq!(exp_sim(&[1.0, 0.0], &[0.0, 2.0], 0.1).unwrap(), 1.0);
        assert!((scaled_cosine(&e, &[0.0, -1.0, 0.0], 0.1).unwrap() + 10.0).abs() < 1e-12);
        assert!(matches!(
            scaled_cosine(&[0.0, 0.0], &[1.0, 0.0], 0.1),
            Err(LossError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let z = DenseMatrix::zeros(2, 3);
        let half = DenseMatrix::filled(2, 3, 0.5);
        assert!((bce_with_logits(&z, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let big = DenseMatrix::filled(2, 2, 50.0);
        assert!(bce_with_logits(&big, &DenseMatrix::filled(2, 2, 1.0)).unwrap() <= 1e-20);
        let v = bce_with_logits(&m(&[&[1.0, -1.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!((v - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_targets() {
        let x = DenseMatrix::zeros(1, 2);
        assert!(matches!(
            bce_with_logits(&x, &m(&[&[0.5, 1.5]])),
            Err(LossError::TargetOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            bce_with_logits(&x, &DenseMatrix::zeros(2, 1)),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nce_examples() {
        let one = m(&[&[0.3, 0.4]]);
        assert_eq!(nce_with_grad(&one, &one, 0.1).unwrap().0, 0.0);
        let same = DenseMatrix::filled(4, 3, 0.5);
        let v = nce_with_grad(&same, &same, 0.1).unwrap().0;
        assert!((v - 4f64.ln()).abs() < 1e-9);
        // Unit-ish vectors with x_i·y_i = 1 and cross dots 0.2.
        let c = 0.2f64;
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let y = m(&[&[1.0, c], &[c, 1.0]]);
        let v = nce_with_grad(&x, &y, 0.1).unwrap().0;
        assert!((v - (-8f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn default_weights_favour_text_video() {
        let w = default_pair_weights();
        assert_eq!(w[0][1], 1.0);
        assert_eq!(w[1][0], 1.0);
        assert_eq!(w.iter().flatten().filter(|&&v| v == 0.1).count(), 7);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { tau: 0.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let mut neg = LossConfig::default();
        neg.pair_weights[2][2] = -1.0;
        assert!(neg.validate().is_err());
    }
}
