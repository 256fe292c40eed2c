//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its runtime. Run with `cargo test --test acceptance
//! -- --nocapture` to see the lines.

mod common;

use std::time::Instant;

use ndarray::Array2;
use wordkrill::{
    align, choose_epsilon, fisher_information, fisher_ses, fit_wordfish, fit_wordkrill,
    generate, gradients, parametric_bootstrap, signed_permutation, stats, FitConfig,
    SyntheticSpec,
};

fn report(name: &str, t0: Instant, budget_s: f64) {
    let elapsed = t0.elapsed().as_secs_f64();
    println!("acceptance {name}: PASS ({elapsed:.2} s, budget {budget_s:.0} s)");
    assert!(
        elapsed < budget_s,
        "{name} exceeded its runtime budget: {elapsed:.2} s > {budget_s} s"
    );
}

/// Criterion 1: the epsilon band formulas match an independent quantile
/// oracle at n = 50, sig = 0.05 to 1e-6, and the final epsilon is the
/// maximum of the variance and covariance bands across random settings.
#[test]
fn criterion_1_epsilon_formulas_exact() {
    let t0 = Instant::now();

    let e = choose_epsilon(50, 0.05).unwrap();
    let z = common::normal_quantile(1.0 - 0.05 / 2.0);
    let lo = common::chi2_quantile(0.025, 49.0);
    let hi = common::chi2_quantile(0.975, 49.0);
    let eps_mean = z / 50f64.sqrt();
    let eps_cov = z / 49f64.sqrt();
    let eps_var = (49.0 / lo - 1.0).abs().max((49.0 / hi - 1.0).abs());
    assert!((e.eps_mean - eps_mean).abs() < 1e-6, "mean band");
    assert!((e.eps_var - eps_var).abs() < 1e-6, "variance band");
    assert!((e.eps_cov - eps_cov).abs() < 1e-6, "covariance band");
    assert_eq!(e.eps_final, e.eps_var.max(e.eps_cov));

    // Max rule over 100 random (n, sig) pairs.
    let mut state = 0xDEADBEEFu64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for _ in 0..100 {
        let n = 3 + (next() % 1_000_000) as usize;
        let sig = 0.001 + (next() % 498) as f64 / 1000.0;
        let e = choose_epsilon(n, sig).unwrap();
        assert_eq!(e.eps_final, e.eps_var.max(e.eps_cov));
        assert!(e.eps_cov > e.eps_mean);
    }

    report("1 (epsilon formulas)", t0, 1.0);
}

/// Criterion 2: analytic gradients match central finite differences and
/// the per-document information matches the finite-difference negative
/// Hessian, on 50 random small instances.
#[test]
fn criterion_2_gradient_and_hessian_oracles() {
    let t0 = Instant::now();
    for trial in 0..50u64 {
        let n_docs = 4 + (trial % 5) as usize; // 4..=8
        let n_features = 4 + ((trial / 5) % 5) as usize; // 4..=8
        let k = 1 + (trial % 3) as usize; // 1..=3
        let matrix = common::random_matrix(trial + 1, n_docs, n_features);
        let params = common::random_params(trial + 101, n_docs, n_features, k);

        let g = gradients(&matrix, &params).unwrap();
        let fd = common::fd_gradient(&matrix, &params, 1e-5);
        let mut analytic: Vec<f64> = Vec::new();
        analytic.extend(g.alpha.iter().copied());
        analytic.extend(g.psi.iter().copied());
        analytic.extend(g.beta.iter().copied());
        analytic.extend(g.theta.iter().copied());
        for (idx, (&a, &f)) in analytic.iter().zip(&fd).enumerate() {
            assert!(
                (a - f).abs() <= 1e-6 * f.abs().max(1.0),
                "trial {trial} component {idx}: analytic {a} vs fd {f}"
            );
        }

        for i in 0..n_docs {
            let info = fisher_information(&matrix, &params, i).unwrap();
            let fd_h = common::fd_neg_hessian(&matrix, &params, i, 1e-4);
            for a in 0..k {
                for b in 0..k {
                    assert!(
                        (info[[a, b]] - fd_h[[a, b]]).abs()
                            <= 1e-6 * fd_h[[a, b]].abs().max(1.0),
                        "trial {trial} doc {i} entry ({a},{b}): {} vs {}",
                        info[[a, b]],
                        fd_h[[a, b]]
                    );
                }
            }
        }
    }
    report("2 (gradient/Hessian oracles)", t0, 30.0);
}

fn k1_corpus(seed: u64) -> wordkrill::DocumentFeatureMatrix {
    let (raw, _) = generate(&SyntheticSpec {
        n_docs: 20,
        n_features: 200,
        k_dims: 1,
        seed,
        ..Default::default()
    })
    .unwrap();
    // Features confined to one document produce divergent weights; the
    // recommended guard keeps the comparison well-posed.
    raw.filter_features(2, 0).unwrap()
}

/// Criterion 3: the joint constrained fit and the conditional fit agree on
/// the positions (|r| >= 0.999 after sign alignment) across 10 corpora.
#[test]
fn criterion_3_wordfish_equivalence() {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let matrix = k1_corpus(seed);
        let config = FitConfig {
            k_dims: 1,
            seed,
            ..Default::default()
        };
        let cond = fit_wordfish(&matrix, &config).unwrap();
        let joint = fit_wordkrill(&matrix, &config).unwrap();
        assert!(cond.converged, "seed {seed}: conditional not converged");
        assert!(joint.converged, "seed {seed}: joint not converged");
        let a = signed_permutation(&cond.params.theta, &joint.params.theta);
        assert!(
            a.corr[0] >= 0.999,
            "seed {seed}: |r| = {} < 0.999",
            a.corr[0]
        );
    }
    report("3 (conditional/joint equivalence)", t0, 300.0);
}

/// Criterion 4: on the default two-dimensional synthetic settings, each
/// aligned dimension recovers the generating positions with |r| >= 0.9 and
/// every constraint residual is within the band.
#[test]
fn criterion_4_k2_recovery() {
    let t0 = Instant::now();
    for seed in 0..10u64 {
        let (raw, truth) = generate(&SyntheticSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let matrix = raw.filter_features(2, 0).unwrap();
        assert_eq!(
            matrix.n_docs(),
            raw.n_docs(),
            "seed {seed}: the guard must not drop documents at these sizes"
        );
        let fit = fit_wordkrill(
            &matrix,
            &FitConfig {
                k_dims: 2,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fit.converged, "seed {seed}: not converged");
        assert!(
            fit.residuals.max_abs() <= fit.eps_applied,
            "seed {seed}: residual {} > eps {}",
            fit.residuals.max_abs(),
            fit.eps_applied
        );
        let a = signed_permutation(&truth.theta, &fit.params.theta);
        for (d, r) in a.corr.iter().enumerate() {
            assert!(
                *r >= 0.9,
                "seed {seed} dimension {d}: |r| = {r} < 0.9"
            );
        }
    }
    report("4 (two-dimensional recovery)", t0, 600.0);
}

/// Criterion 5: the likelihood is invariant under sign flips and dimension
/// permutations, and alignment recovers a planted signed permutation
/// exactly.
#[test]
fn criterion_5_identifiability_invariances() {
    let t0 = Instant::now();

    for trial in 0..20u64 {
        let k = 2 + (trial % 2) as usize; // 2..=3
        let n_docs = 6;
        let n_features = 7;
        let matrix = common::random_matrix(trial + 301, n_docs, n_features);
        let params = common::random_params(trial + 401, n_docs, n_features, k);
        let base = wordkrill::log_likelihood(&matrix, &params).unwrap();

        // Sign flip of one dimension.
        let mut flipped = params.clone();
        let d = (trial % k as u64) as usize;
        flipped.beta.column_mut(d).mapv_inplace(|v| -v);
        flipped.theta.column_mut(d).mapv_inplace(|v| -v);
        let ll_flip = wordkrill::log_likelihood(&matrix, &flipped).unwrap();
        assert!(
            (ll_flip - base).abs() <= 1e-12 * base.abs().max(1.0),
            "sign flip changed the likelihood"
        );

        // Cyclic permutation of dimensions.
        let mut permuted = params.clone();
        for j in 0..n_features {
            for dd in 0..k {
                permuted.beta[[j, dd]] = params.beta[[j, (dd + 1) % k]];
            }
        }
        for i in 0..n_docs {
            for dd in 0..k {
                permuted.theta[[i, dd]] = params.theta[[i, (dd + 1) % k]];
            }
        }
        let ll_perm = wordkrill::log_likelihood(&matrix, &permuted).unwrap();
        assert!(
            (ll_perm - base).abs() <= 1e-12 * base.abs().max(1.0),
            "permutation changed the likelihood"
        );

        // Planted signed permutation recovered exactly by align.
        let mut reference = Array2::<f64>::zeros((12, k));
        let mut state = trial.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(7);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for v in reference.iter_mut() {
            *v = next();
        }
        stats::standardize_orthogonalize(reference.view_mut()).unwrap();
        let perm: Vec<usize> = (0..k).map(|d| (d + 1 + trial as usize) % k).collect();
        let signs: Vec<f64> = (0..k)
            .map(|d| if (trial as usize + d) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let mut candidate = Array2::<f64>::zeros((12, k));
        for d in 0..k {
            let src = reference.column(perm[d]).mapv(|v| signs[d] * v);
            candidate.column_mut(d).assign(&src);
        }
        let a = signed_permutation(&reference, &candidate);
        // Applying the found transform must reproduce the reference.
        for r in 0..k {
            let c = a.perm[r];
            for i in 0..12 {
                let aligned = a.signs[r] * candidate[[i, c]];
                assert!(
                    (aligned - reference[[i, r]]).abs() < 1e-12,
                    "planted transform not recovered exactly"
                );
            }
        }
    }

    report("5 (identifiability invariances)", t0, 60.0);
}

/// Criterion 6: bootstrap and Fisher standard errors agree within a factor
/// of two for at least 90% of documents on a unidimensional instance, and
/// both reports are bit-reproducible under a fixed seed. The bootstrap
/// uses 200 replicates here for speed; 500 is the documented default
/// (`DEFAULT_BOOTSTRAP_REPS`).
#[test]
fn criterion_6_bootstrap_vs_fisher() {
    let t0 = Instant::now();
    let matrix = k1_corpus(42);
    let config = FitConfig {
        k_dims: 1,
        seed: 42,
        ..Default::default()
    };
    let fit = fit_wordfish(&matrix, &config).unwrap();
    assert!(fit.converged);

    assert_eq!(wordkrill::DEFAULT_BOOTSTRAP_REPS, 500);
    let reps = 200;
    let boot = parametric_bootstrap(&matrix, &fit, &config, reps, 7).unwrap();
    assert!(!boot.unreliable, "{} replicates dropped", boot.dropped_replicates);
    let fisher = fisher_ses(&matrix, &fit.params, config.sig_level).unwrap();

    let n_docs = matrix.n_docs();
    let mut within = 0;
    for i in 0..n_docs {
        let sb = boot.std_errors[i].as_ref().expect("bootstrap SE")[0];
        let sf = fisher.std_errors[i].as_ref().expect("fisher SE")[0];
        let ratio = sb / sf;
        if (0.5..=2.0).contains(&ratio) {
            within += 1;
        }
        // Interval ordering: lower < upper everywhere, and the Fisher
        // interval contains its point estimate by construction.
        let (blo, bhi) = boot.intervals[i].as_ref().unwrap()[0];
        assert!(blo < bhi);
        let (flo, fhi) = fisher.intervals[i].as_ref().unwrap()[0];
        let point = fit.params.theta[[i, 0]];
        assert!(flo < point && point < fhi);
    }
    assert!(
        within as f64 >= 0.9 * n_docs as f64,
        "only {within}/{n_docs} documents within a factor of 2"
    );

    let boot2 = parametric_bootstrap(&matrix, &fit, &config, reps, 7).unwrap();
    assert_eq!(boot, boot2, "bootstrap is not reproducible");
    let fisher2 = fisher_ses(&matrix, &fit.params, config.sig_level).unwrap();
    assert_eq!(fisher, fisher2, "fisher report is not reproducible");

    report("6 (bootstrap vs fisher)", t0, 900.0);
}

/// Criterion 7 (slow gate): nominal 95% Fisher intervals cover the true
/// positions in 85-99% of cases over 200 synthetic unidimensional
/// datasets. The corpora use a raised feature baseline (mean cell counts
/// around five) so the counts are rich enough for the quadratic,
/// weights-as-known approximation behind the Fisher intervals; in sparser
/// regimes their optimism grows beyond the band.
#[test]
fn criterion_7_fisher_coverage() {
    let t0 = Instant::now();
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut datasets = 0usize;
    let mut seed = 0u64;
    while datasets < 200 {
        seed += 1;
        assert!(seed < 240, "too many generation retries");
        // Sparse features occasionally exhaust the generator's redraw
        // budget (a documented error); skip those seeds.
        let Ok((raw, truth)) = generate(&SyntheticSpec {
            n_docs: 20,
            n_features: 200,
            k_dims: 1,
            psi_mean: 1.0,
            seed: 10_000 + seed,
            ..Default::default()
        }) else {
            continue;
        };
        datasets += 1;
        let matrix = raw.filter_features(2, 0).unwrap();
        let config = FitConfig {
            k_dims: 1,
            seed,
            ..Default::default()
        };
        let fit = fit_wordfish(&matrix, &config).unwrap();
        if !fit.converged {
            continue;
        }
        // Sign-align the fit to the truth over surviving documents.
        let rows: Vec<usize> = matrix
            .doc_ids()
            .iter()
            .map(|id| raw.doc_ids().iter().position(|x| x == id).unwrap())
            .collect();
        let reference =
            Array2::from_shape_fn((rows.len(), 1), |(r, _)| truth.theta[[rows[r], 0]]);
        let aligned = align(&reference, fit);
        let report = fisher_ses(&matrix, &aligned.params, 0.05).unwrap();
        for (r, iv) in report.intervals.iter().enumerate() {
            let Some(iv) = iv else { continue };
            let (lo, hi) = iv[0];
            total += 1;
            if lo <= reference[[r, 0]] && reference[[r, 0]] <= hi {
                covered += 1;
            }
        }
    }
    let rate = covered as f64 / total as f64;
    println!("acceptance 7: coverage {covered}/{total} = {rate:.4}");
    assert!(
        (0.85..=0.99).contains(&rate),
        "coverage {rate:.4} outside [0.85, 0.99]"
    );
    report("7 (fisher interval coverage)", t0, 900.0);
}
