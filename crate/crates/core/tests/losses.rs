use multisk::losses::*;
use multisk::{DenseMatrix, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

fn mat(rows: &[&[f64]]) -> DenseMatrix {
    DenseMatrix::from_rows(rows).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn build(
    input: [DenseMatrix; 3],
    joint: [DenseMatrix; 3],
    z_input: [DenseMatrix; 3],
    z_joint: [DenseMatrix; 3],
) -> LossInputs {
    let ms = Modality::ALL;
    let emb = |m: [DenseMatrix; 3], s| {
        let mut it = m.into_iter();
        ms.map(|md| EmbeddingBatch::new(it.next().unwrap(), md, s).unwrap())
    };
    let anc = |m: [DenseMatrix; 3], s| {
        let mut it = m.into_iter();
        ms.map(|md| AnchorSet::new(it.next().unwrap(), md, s).unwrap())
    };
    LossInputs::new(
        emb(input, Space::Input),
        emb(joint, Space::Joint),
        anc(z_input, Space::Input),
        anc(z_joint, Space::Joint),
    )
    .unwrap()
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d_in: usize, d: usize, k: usize) -> LossInputs {
    build(
        std::array::from_fn(|_| gaussian(rng, n, d_in)),
        std::array::from_fn(|_| gaussian(rng, n, d)),
        std::array::from_fn(|_| gaussian(rng, k, d_in)),
        std::array::from_fn(|_| gaussian(rng, k, d)),
    )
}

/// The instance printed by `tests/oracles/loss_oracle.py`.
fn oracle_instance() -> LossInputs {
    build(
        [
            mat(&[&[0.001, 0.299, -0.274], &[-0.891, -0.455, -0.992], &[0.06, 1.34, -0.492], &[-0.62, 0.49, 0.357]]),
            mat(&[&[0.105, -0.93, -0.029], &[0.695, -1.344, -0.458], &[-1.901, -1.29, -1.842], &[-0.235, -1.267, 0.271]]),
            mat(&[&[0.157, -0.187, -2.517], &[-0.539, -0.049, 0.113], &[-1.53, -0.478, -0.979], &[-0.809, 1.061, -0.808]]),
        ],
        [
            mat(&[&[-0.033, 0.884, -0.584], &[-0.112, 0.11, 0.064], &[-1.225, 0.076, 1.359], &[-1.547, 0.859, 0.119]]),
            mat(&[&[-0.641, 2.0, 0.762], &[-1.199, 0.075, 0.577], &[-0.189, 0.683, -0.067], &[0.667, 1.439, -0.676]]),
            mat(&[&[0.203, -0.463, 0.127], &[-1.187, -0.579, -0.196], &[0.899, 1.145, -1.324], &[-0.795, 0.647, -1.992]]),
        ],
        [
            mat(&[&[-0.463, -0.097, 1.257], &[0.689, -0.327, -0.369]]),
            mat(&[&[-0.25, 1.524, -0.428], &[-0.304, 0.353, -0.121]]),
            mat(&[&[-0.197, -1.114, -0.012], &[-0.444, 1.166, 0.653]]),
        ],
        [
            mat(&[&[-0.024, 0.668, -0.34], &[1.052, -0.005, 0.583]]),
            mat(&[&[-1.291, 0.347, -1.688], &[-2.035, -0.304, -0.9]]),
            mat(&[&[0.164, 2.245, -0.832], &[-0.624, 0.205, 0.493]]),
        ],
    )
}

fn oracle_solver() -> SolverConfig {
    SolverConfig {
        epsilon: 1.0,
        mu: 0.25,
        k_prime: 1,
        tol: 1e-14,
        max_iters: 10_000,
    }
}

fn oracle_config() -> LossConfig {
    LossConfig {
        tau: 0.5,
        kappa: 0.5,
        alpha: 0.7,
        beta: 1.3,
        lambda_tv: 1.0,
        lambda_ta: 0.5,
        lambda_va: 0.25,
        lambda_sspc: 0.8,
        lambda_nce: 1.5,
        ..LossConfig::default()
    }
}

#[test]
fn pair_loss_matches_reference_script() {
    let x = oracle_instance();
    let v = sspc_pair_loss(
        &x.input[0],
        &x.joint[1],
        &x.anchors_input[0],
        &x.anchors_joint[0],
        &oracle_solver(),
        &oracle_config(),
    )
    .unwrap();
    assert!((v - 1.6103764837188348).abs() < 1e-10, "{v}");
}

#[test]
fn total_loss_matches_reference_script() {
    let x = oracle_instance();
    let cfg = oracle_config();
    let sspc = sspc_total(&x, &oracle_solver(), &cfg).unwrap();
    assert!((sspc - 4.43508250429628).abs() < 1e-10, "{sspc}");
    let b = total_loss(&x, &oracle_solver(), &cfg).unwrap();
    let nce = [3.2077934613138375, 3.7523467266062625, 1.8911280296603508];
    for (got, want) in b.nce_terms.iter().zip(nce) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((b.total - 11.883189251485108).abs() < 1e-10, "{}", b.total);
}

#[test]
fn weighted_sum_is_assembled_from_pairs() {
    let x = oracle_instance();
    let cfg = oracle_config();
    let solver = oracle_solver();
    let mut by_hand = 0.0;
    for m in 0..3 {
        for n in 0..3 {
            let p = sspc_pair_loss(&x.input[m], &x.joint[n], &x.anchors_input[m], &x.anchors_joint[m], &solver, &cfg)
                .unwrap();
            by_hand += cfg.pair_weights[m][n] * p;
        }
    }
    let total = sspc_total(&x, &solver, &cfg).unwrap();
    assert!((total - by_hand).abs() < 1e-12);
}

#[test]
fn pair_loss_swap_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_inputs(&mut rng, 6, 4, 4, 3);
    let solver = SolverConfig { k_prime: 2, epsilon: 1.0, tol: 1e-12, ..SolverConfig::default() };
    let cfg = LossConfig { tau: 0.5, alpha: 0.3, beta: 0.9, ..LossConfig::default() };
    let swapped = LossConfig { alpha: cfg.beta, beta: cfg.alpha, ..cfg.clone() };
    let a = sspc_pair_loss(&x.input[0], &x.joint[1], &x.anchors_input[0], &x.anchors_joint[0], &solver, &cfg).unwrap();
    let b = sspc_pair_loss(&x.joint[1], &x.input[0], &x.anchors_joint[0], &x.anchors_input[0], &solver, &swapped)
        .unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn pair_loss_on_identical_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_inputs(&mut rng, 6, 4, 4, 3);
    let solver = SolverConfig { k_prime: 2, epsilon: 1.0, tol: 1e-12, ..SolverConfig::default() };
    let cfg = LossConfig { tau: 0.5, alpha: 0.4, beta: 0.4, ..LossConfig::default() };
    let (e, z) = (&x.input[0], &x.anchors_input[0]);
    let v = sspc_pair_loss(e, e, z, z, &solver, &cfg).unwrap();
    let target = multisk::multi_sinkhorn(&exp_sim_matrix(e.vectors(), z.vectors(), 0.5).unwrap(), &solver).unwrap().q;
    let g = bce_with_logits(&scaled_cosine_matrix(e.vectors(), z.vectors(), 0.5).unwrap(), &target).unwrap();
    assert!((v - 2.0 * 0.4 * g).abs() < 1e-12);
}

#[test]
fn pair_loss_with_full_selection_uses_all_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_inputs(&mut rng, 5, 3, 3, 4);
    let solver = SolverConfig { k_prime: 4, ..SolverConfig::default() };
    let cfg = LossConfig { alpha: 0.6, beta: 1.1, ..LossConfig::default() };
    let v = sspc_pair_loss(&x.input[2], &x.joint[0], &x.anchors_input[2], &x.anchors_joint[2], &solver, &cfg).unwrap();
    let ones = DenseMatrix::filled(5, 4, 1.0);
    let l_src = scaled_cosine_matrix(x.input[2].vectors(), x.anchors_input[2].vectors(), 0.1).unwrap();
    let l_dst = scaled_cosine_matrix(x.joint[0].vectors(), x.anchors_joint[2].vectors(), 0.1).unwrap();
    let want = 0.6 * bce_with_logits(&l_src, &ones).unwrap() + 1.1 * bce_with_logits(&l_dst, &ones).unwrap();
    assert!((v - want).abs() < 1e-12);
}

#[test]
fn pair_loss_rejects_size_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_inputs(&mut rng, 4, 3, 3, 2);
    let b = random_inputs(&mut rng, 6, 3, 3, 2);
    let r = sspc_pair_loss(
        &a.input[0],
        &b.joint[0],
        &a.anchors_input[0],
        &a.anchors_joint[0],
        &SolverConfig { k_prime: 1, ..SolverConfig::default() },
        &LossConfig::default(),
    );
    assert!(matches!(r, Err(LossError::ShapeMismatch { .. })));
}

#[test]
fn sspc_total_zero_weights_and_uniform_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let solver = SolverConfig { k_prime: 1, epsilon: 1.0, tol: 1e-12, ..SolverConfig::default() };
    let x = random_inputs(&mut rng, 4, 3, 3, 2);
    let zero = LossConfig { pair_weights: [[0.0; 3]; 3], ..LossConfig::default() };
    assert_eq!(sspc_total(&x, &solver, &zero).unwrap(), 0.0);

    // Every modality carries the same data in both spaces.
    let e = gaussian(&mut rng, 4, 3);
    let z = gaussian(&mut rng, 2, 3);
    let same = build(
        std::array::from_fn(|_| e.clone()),
        std::array::from_fn(|_| e.clone()),
        std::array::from_fn(|_| z.clone()),
        std::array::from_fn(|_| z.clone()),
    );
    let w = 0.35;
    let cfg = LossConfig { tau: 0.5, pair_weights: [[w; 3]; 3], ..LossConfig::default() };
    let single = sspc_pair_loss(&same.input[0], &same.joint[0], &same.anchors_input[0], &same.anchors_joint[0], &solver, &cfg)
        .unwrap();
    let total = sspc_total(&same, &solver, &cfg).unwrap();
    assert!((total - 9.0 * w * single).abs() < 1e-12);
}

#[test]
fn total_loss_weight_switches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_inputs(&mut rng, 6, 3, 4, 3);
    let solver = SolverConfig { k_prime: 1, epsilon: 1.0, tol: 1e-10, ..SolverConfig::default() };
    let base = LossConfig { tau: 0.5, lambda_tv: 0.7, lambda_ta: 0.2, lambda_va: 0.4, ..LossConfig::default() };

    let no_sspc = LossConfig { lambda_sspc: 0.0, ..base.clone() };
    let b = total_loss(&x, &solver, &no_sspc).unwrap();
    let nce: f64 = [(0, 1, 0.7), (0, 2, 0.2), (1, 2, 0.4)]
        .iter()
        .map(|&(i, j, w)| w * nce_loss(&x.joint[i], &x.joint[j], base.kappa).unwrap())
        .sum();
    assert!((b.total - nce).abs() < 1e-12);

    let no_nce = LossConfig { lambda_nce: 0.0, lambda_sspc: 0.6, ..base.clone() };
    let b = total_loss(&x, &solver, &no_nce).unwrap();
    let sspc = sspc_total(&x, &solver, &base).unwrap();
    assert!((b.total - 0.6 * sspc).abs() < 1e-12);

    let off = LossConfig { lambda_nce: 0.0, lambda_sspc: 0.0, ..base };
    let (b, g) = loss_gradients(&x, &solver, &off).unwrap();
    assert_eq!(b.total, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

/// Max-norm relative error between an analytic gradient and central
/// differences of `f` around `x`.
fn fd_error(x: &DenseMatrix, analytic: &DenseMatrix, mut f: impl FnMut(&DenseMatrix) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for idx in 0..x.as_slice().len() {
        let mut p = x.clone();
        p.as_mut_slice()[idx] += H;
        let mut m = x.clone();
        m.as_mut_slice()[idx] -= H;
        let fd = (f(&p) - f(&m)) / (2.0 * H);
        let a = analytic.as_slice()[idx];
        worst = worst.max((fd - a).abs());
        scale = scale.max(fd.abs()).max(a.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let logits = gaussian(&mut rng, 5, 4).map(|v| 3.0 * v);
        let t = DenseMatrix::from_fn(5, 4, |_, _| rng.random::<f64>());
        let (_, g) = bce_with_logits_grad(&logits, &t).unwrap();
        let err = fd_error(&logits, &g, |l| bce_with_logits(l, &t).unwrap());
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn nce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let x = gaussian(&mut rng, 6, 4).map(|v| 0.5 * v);
        let y = gaussian(&mut rng, 6, 4).map(|v| 0.5 * v);
        let (_, dx, dy) = nce_with_grad(&x, &y, 0.3).unwrap();
        assert!(fd_error(&x, &dx, |p| nce_with_grad(p, &y, 0.3).unwrap().0) < 1e-4);
        assert!(fd_error(&y, &dy, |p| nce_with_grad(&x, p, 0.3).unwrap().0) < 1e-4);
    }
}

#[test]
fn pair_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let (src, dst) = (gaussian(&mut rng, 6, 3), gaussian(&mut rng, 6, 4));
        let (zs, zd) = (gaussian(&mut rng, 3, 3), gaussian(&mut rng, 3, 4));
        let ts = DenseMatrix::from_fn(6, 3, |_, _| rng.random::<f64>());
        let td = DenseMatrix::from_fn(6, 3, |_, _| rng.random::<f64>());
        let eval = |s: &DenseMatrix, d: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix| {
            sspc_pair_with_targets(s, d, a, b, &ts, &td, 0.8, 1.2, 0.5).unwrap()
        };
        let g = eval(&src, &dst, &zs, &zd);
        let checks = [
            fd_error(&src, &g.d_src, |p| eval(p, &dst, &zs, &zd).value),
            fd_error(&dst, &g.d_dst, |p| eval(&src, p, &zs, &zd).value),
            fd_error(&zs, &g.d_z_src, |p| eval(&src, &dst, p, &zd).value),
            fd_error(&zd, &g.d_z_dst, |p| eval(&src, &dst, &zs, p).value),
        ];
        assert!(checks.iter().all(|&e| e < 1e-4), "{checks:?}");
    }
}

fn with_joint(x: &LossInputs, slot: usize, v: &DenseMatrix) -> LossInputs {
    let mut y = x.clone();
    y.joint[slot] = EmbeddingBatch::new(v.clone(), x.joint[slot].modality, Space::Joint).unwrap();
    y
}

fn with_anchor(x: &LossInputs, joint: bool, slot: usize, v: &DenseMatrix) -> LossInputs {
    let mut y = x.clone();
    let set = if joint { &mut y.anchors_joint } else { &mut y.anchors_input };
    let space = if joint { Space::Joint } else { Space::Input };
    set[slot] = AnchorSet::new(v.clone(), set[slot].modality, space).unwrap();
    y
}

#[test]
fn total_gradient_matches_finite_differences() {
    // Targets are solved once at the base point and then held fixed, which is
    // the function the analytic gradient differentiates.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let solver = SolverConfig { k_prime: 2, epsilon: 1.0, tol: 1e-10, ..SolverConfig::default() };
    let cfg = LossConfig {
        tau: 0.5,
        kappa: 0.5,
        lambda_sspc: 0.9,
        lambda_nce: 0.4,
        lambda_ta: 0.3,
        lambda_va: 0.6,
        ..LossConfig::default()
    };
    for _ in 0..10 {
        let x = random_inputs(&mut rng, 5, 3, 4, 4);
        let targets = compute_targets(&x, TargetContext::default(), &solver, &cfg, TargetSolver::MultiSinkhorn).unwrap();
        let (_, g) = evaluate_with_targets(&x, &targets, &cfg).unwrap();
        let total = |y: &LossInputs| evaluate_with_targets(y, &targets, &cfg).unwrap().0.total;
        for s in 0..3 {
            let e = fd_error(x.joint[s].vectors(), &g.joint[s], |p| total(&with_joint(&x, s, p)));
            assert!(e < 1e-4, "joint {s}: {e}");
            let e = fd_error(x.anchors_input[s].vectors(), &g.anchors_input[s], |p| total(&with_anchor(&x, false, s, p)));
            assert!(e < 1e-4, "input anchors {s}: {e}");
            let e = fd_error(x.anchors_joint[s].vectors(), &g.anchors_joint[s], |p| total(&with_anchor(&x, true, s, p)));
            assert!(e < 1e-4, "joint anchors {s}: {e}");
        }
    }
}

#[test]
fn consistency_gradient_has_no_radial_component() {
    // Cosine logits do not see vector length, so each row's gradient is
    // orthogonal to the row itself.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_inputs(&mut rng, 6, 3, 4, 3);
    let solver = SolverConfig { k_prime: 1, epsilon: 1.0, ..SolverConfig::default() };
    let cfg = LossConfig { tau: 0.5, lambda_nce: 0.0, ..LossConfig::default() };
    let (_, g) = loss_gradients(&x, &solver, &cfg).unwrap();
    let radial = |v: &DenseMatrix, d: &DenseMatrix| {
        (0..v.rows())
            .map(|i| v.row(i).iter().zip(d.row(i)).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max)
    };
    for s in 0..3 {
        assert!(radial(x.joint[s].vectors(), &g.joint[s]) < 1e-14);
        assert!(radial(x.anchors_input[s].vectors(), &g.anchors_input[s]) < 1e-14);
        assert!(radial(x.anchors_joint[s].vectors(), &g.anchors_joint[s]) < 1e-14);
    }
}

#[test]
fn targets_ignore_additive_shift_of_similarities() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let solver = SolverConfig { k_prime: 2, epsilon: 1.0, tol: 1e-12, ..SolverConfig::default() };
    for _ in 0..10 {
        let s = exp_sim_matrix(&gaussian(&mut rng, 8, 3), &gaussian(&mut rng, 4, 3), 0.5).unwrap();
        let c = rng.random_range(-3.0..3.0);
        let a = assignment_target(&s, &solver, TargetSolver::MultiSinkhorn).unwrap();
        let b = assignment_target(&s.map(|v| v + c), &solver, TargetSolver::MultiSinkhorn).unwrap();
        assert!(a.q.max_abs_diff(&b.q) < 1e-8);
    }
}

#[test]
fn memory_rows_enter_the_solve_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_inputs(&mut rng, 4, 3, 3, 2);
    let solver = SolverConfig { k_prime: 1, epsilon: 1.0, tol: 1e-12, ..SolverConfig::default() };
    let cfg = LossConfig { tau: 0.5, ..LossConfig::default() };
    let bank: [DenseMatrix; 3] = std::array::from_fn(|_| gaussian(&mut rng, 6, 3));
    let ctx = TargetContext {
        input: std::array::from_fn(|i| Some(&bank[i])),
        joint: std::array::from_fn(|i| Some(&bank[i])),
    };
    let t = compute_targets(&x, ctx, &solver, &cfg, TargetSolver::MultiSinkhorn).unwrap();
    let q = t.input[1].as_ref().unwrap();
    assert_eq!(q.shape(), (4, 2));
    // The batch rows of a joint solve over memory ∪ batch.
    let mut rows = bank[1].as_slice().to_vec();
    rows.extend_from_slice(x.input[1].vectors().as_slice());
    let all = DenseMatrix::new(10, 3, rows).unwrap();
    let full = multisk::multi_sinkhorn(&exp_sim_matrix(&all, x.anchors_input[1].vectors(), 0.5).unwrap(), &solver)
        .unwrap()
        .q;
    for i in 0..4 {
        assert_eq!(q.row(i), full.row(6 + i));
    }
}

#[test]
fn modified_targets_are_clipped() {
    let s = DenseMatrix::from_rows(&[[5.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
    let solver = SolverConfig { k_prime: 2, epsilon: 0.5, ..SolverConfig::default() };
    let t = assignment_target(&s, &solver, TargetSolver::ModifiedSinkhorn).unwrap();
    assert!(t.q.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bce_transpose_and_naive_agree(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // The naive form loses digits in 1 - p beyond |x| ~ 5.
        let x = DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-5.0..5.0));
        let t = DenseMatrix::from_fn(r, c, |_, _| rng.random::<f64>());
        let v = bce_with_logits(&x, &t).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - bce_with_logits(&x.transpose(), &t.transpose()).unwrap()).abs() < 1e-12);
        let naive: f64 = x.as_slice().iter().zip(t.as_slice()).map(|(&x, &t)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        }).sum::<f64>() / (r * c) as f64;
        prop_assert!((v - naive).abs() < 1e-12, "{v} vs {naive}");
    }

    #[test]
    fn nce_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, 5, 2);
        let y = gaussian(&mut rng, 5, 2);
        let rot = |m: &DenseMatrix| DenseMatrix::from_fn(m.rows(), 2, |i, j| {
            let (a, b) = (m[(i, 0)], m[(i, 1)]);
            if j == 0 { angle.cos() * a - angle.sin() * b } else { angle.sin() * a + angle.cos() * b }
        });
        let v = nce_with_grad(&x, &y, 0.2).unwrap().0;
        let w = nce_with_grad(&rot(&x), &rot(&y), 0.2).unwrap().0;
        prop_assert!(v >= 0.0);
        prop_assert!((v - w).abs() < 1e-10);
    }
}
