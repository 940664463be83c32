use ndarray::array;

use super::*;
use crate::field::DecoderConfig;
use crate::geom::SceneSpec;
use crate::objective::{inte_terms, loss_reg};

fn tiny_config() -> FitConfig {
    FitConfig {
        n_bases: 4,
        decoder: DecoderConfig::small(4, vec![8, 8]),
        steps: 12,
        batch_size: 64,
        learning_rate: 1e-3,
        sampling: SamplingConfig {
            n_near: 180,
            n_uniform: 20,
            n_surface: 256,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn sphere() -> SceneSpec {
    SceneSpec::sphere(0.3).unwrap()
}

#[test]
fn zero_steps_rejected() {
    let cfg = FitConfig {
        steps: 0,
        ..tiny_config()
    };
    assert!(matches!(fit_scene(&sphere(), &cfg), Err(FitError::Config(_))));
}

#[test]
fn invalid_counts_rejected() {
    let cfg = FitConfig {
        n_bases: 0,
        ..tiny_config()
    };
    assert!(cfg.validate().is_err());
    let cfg = FitConfig {
        n_init: Some(2),
        ..tiny_config()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn fit_is_deterministic() {
    let cfg = tiny_config();
    let (a, ra) = fit_scene(&sphere(), &cfg).unwrap();
    let (b, rb) = fit_scene(&sphere(), &cfg).unwrap();
    assert_eq!(a.param_values(), b.param_values());
    assert_eq!(ra.to_json(), rb.to_json());
    assert_eq!(ra.trace.len(), cfg.steps);
    for k in ["sdf", "euc", "smooth", "reg"] {
        assert_eq!(ra.trace.terms[k].len(), cfg.steps);
    }
}

#[test]
fn init_places_centers_on_surface() {
    let cfg = tiny_config();
    let field = init_field(&sphere(), &cfg).unwrap();
    assert_eq!(field.len(), 4);
    for b in field.bases() {
        assert!((b.mu.coords.norm() - 0.3).abs() < 1e-4);
        assert_eq!(b.r_raw, IDENTITY_6D);
        assert_eq!(b.delta, Vec3::zeros());
    }
    let single = init_field_with(&sphere(), &cfg, 1).unwrap();
    assert!((single.bases()[0].s_raw[0] - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn trace_matches_recomputed_loss() {
    let cfg = tiny_config();
    let samples = training_samples(&sphere(), &cfg).unwrap();
    let field = init_field(&sphere(), &cfg).unwrap();
    let mut seen = Vec::new();
    let (_, report) = fit_field_observed(field, &samples, &cfg, &mut |info| {
        if [0, 5, 11].contains(&info.step) {
            seen.push((
                info.step,
                info.field.clone(),
                info.points.to_vec(),
                info.targets.to_vec(),
                info.lambda_reg,
            ));
        }
    })
    .unwrap();
    assert_eq!(seen.len(), 3);
    for (step, field, points, targets, lambda_reg) in seen {
        let t = inte_terms(&field, &points, &targets);
        let reg = loss_reg(&field);
        let total = t[0] + t[1] + cfg.weights.lambda_smooth * t[2] + lambda_reg * reg;
        assert_eq!(report.trace.total[step], total, "step {step}");
        assert_eq!(report.trace.terms["sdf"][step], t[0]);
        assert_eq!(report.trace.terms["reg"][step], reg);
    }
}

#[test]
fn reg_weight_only_in_first_fraction() {
    let cfg = FitConfig {
        steps: 20,
        ..tiny_config()
    };
    let samples = training_samples(&sphere(), &cfg).unwrap();
    let field = init_field(&sphere(), &cfg).unwrap();
    let mut lambdas = Vec::new();
    fit_field_observed(field, &samples, &cfg, &mut |info| lambdas.push(info.lambda_reg)).unwrap();
    assert!(lambdas[..2].iter().all(|&l| l == cfg.weights.lambda_reg));
    assert!(lambdas[2..].iter().all(|&l| l == 0.0));
}

#[test]
fn soft_strategy_freezes_domains() {
    let cfg = FitConfig {
        strategy: WeightStrategy::Soft { sigma: 5.0 },
        ..tiny_config()
    };
    let samples = training_samples(&sphere(), &cfg).unwrap();
    let field = init_field(&sphere(), &cfg).unwrap();
    let before = field.clone();
    let (after, report) = fit_field(field, &samples, &cfg).unwrap();
    for (a, b) in before.bases().iter().zip(after.bases()) {
        assert_eq!(a.s_raw, b.s_raw);
        assert_eq!(a.r_raw, b.r_raw);
        assert_eq!(a.delta, b.delta);
        assert_eq!(a.s_raw[0], 5f64.ln());
    }
    assert_eq!(report.diagnostics.excluded_gradient_coords, 4 * 12);
}

#[test]
fn compaction_without_reduction_keeps_everything() {
    let cfg = FitConfig {
        n_init: Some(4),
        steps: 6,
        ..tiny_config()
    };
    let (field, kept, report) = compact_fit(&sphere(), &cfg).unwrap();
    assert_eq!(kept, vec![0, 1, 2, 3]);
    assert_eq!(field.len(), 4);
    assert_eq!(report.phase_boundaries, vec![6]);
    assert_eq!(report.trace.len(), 12);
}

#[test]
fn compaction_reduces_to_target() {
    let cfg = FitConfig {
        n_init: Some(8),
        n_bases: 3,
        steps: 4,
        phase2_steps: Some(3),
        ..tiny_config()
    };
    let (field, kept, report) = compact_fit(&sphere(), &cfg).unwrap();
    assert_eq!(field.len(), 3);
    assert_eq!(kept.len(), 3);
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(report.trace.len(), 7);
}

#[test]
fn shared_phase_one_matches_compact_fit() {
    let base = FitConfig {
        n_init: Some(8),
        n_bases: 8,
        steps: 5,
        phase2_steps: Some(3),
        ..tiny_config()
    };
    let samples = training_samples(&sphere(), &base).unwrap();
    let init = init_field(&sphere(), &base).unwrap();
    let (phase1, report1) = fit_field(init, &samples, &base).unwrap();
    for n in [6, 3] {
        let cfg = FitConfig { n_bases: n, ..base.clone() };
        let (shared, kept_shared, rep_shared) = compact_after(&phase1, &report1, &samples, &cfg).unwrap();
        let (direct, kept_direct, rep_direct) = compact_fit(&sphere(), &cfg).unwrap();
        assert_eq!(kept_shared, kept_direct);
        assert_eq!(shared.param_values(), direct.param_values());
        assert_eq!(rep_shared.to_json(), rep_direct.to_json());
    }
}

fn plane_field() -> BasisField {
    let mut d = Decoder::zeros(DecoderConfig::small(1, vec![2])).unwrap();
    d.layers_mut()[0].weight = array![[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0]];
    d.layers_mut()[1].weight = array![[1.0, -1.0]];
    let mut b = LocalBasis::new(Point3::origin(), vec![0.3]);
    b.s_raw = [1.0; 3];
    BasisField::new(vec![b], d).unwrap()
}

#[test]
fn refine_is_a_no_op_at_a_satisfied_optimum() {
    let field = plane_field();
    let surface = PointCloud::new(
        (0..50)
            .map(|i| Point3::new(0.0, -0.2 + 0.008 * i as f64, 0.1))
            .collect(),
    );
    let positive = PointCloud::new(
        (0..50)
            .map(|i| Point3::new(0.02 + 0.004 * i as f64, 0.05, -0.1))
            .collect(),
    );
    let anchor = Anchor::from_field(&field);
    let cfg = RefineConfig {
        iterations: 50,
        batch_size: Some(16),
        ..Default::default()
    };
    let (after, report) = refine(field.clone(), &surface, &positive, &anchor, &cfg).unwrap();
    let a = field.param_values();
    let b = after.param_values();
    let moved = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(moved <= 1e-6, "moved {moved}");
    assert!(report.trace.total.iter().all(|&t| t == 0.0));
}

#[test]
fn refine_leaves_frozen_parameters_bit_identical() {
    let cfg = tiny_config();
    let (field, _) = fit_scene(&sphere(), &cfg).unwrap();
    let surface = surface_points(&sphere(), 64, 3).unwrap();
    let positive = crate::geom::positive_points(&sphere(), 64, 0.01, 4).unwrap();
    let anchor = Anchor::from_field(&field);
    let rc = RefineConfig {
        iterations: 10,
        learning_rate: 1e-2,
        batch_size: Some(32),
        ..Default::default()
    };
    let (after, report) = refine(field.clone(), &surface, &positive, &anchor, &rc).unwrap();
    let mask = center_latent_mask(&field);
    let (a, b) = (field.param_values(), after.param_values());
    let mut changed = 0;
    for i in 0..a.len() {
        if mask[i] {
            changed += (a[i] != b[i]) as usize;
        } else {
            assert_eq!(a[i].to_bits(), b[i].to_bits(), "frozen coordinate {i} moved");
        }
    }
    assert!(changed > 0);
    assert_eq!(report.trace.len(), 10);
    for k in ["face", "pos", "adj", "stable"] {
        assert!(report.trace.terms.contains_key(k));
    }
}

#[test]
fn adjacency_points_are_deterministic() {
    let c = [Point3::new(0.1, 0.0, 0.0), Point3::new(-0.1, 0.2, 0.0)];
    let a = adjacency_points(&c, 5, 0.05, 9);
    let b = adjacency_points(&c, 5, 0.05, 9);
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
}

#[test]
fn batcher_covers_every_index_per_epoch() {
    let mut b = Batcher::new(10, 5, ChaCha8Rng::seed_from_u64(0));
    let mut seen: Vec<usize> = b.next();
    seen.extend(b.next());
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    let mut full = Batcher::new(4, 10, ChaCha8Rng::seed_from_u64(0));
    assert_eq!(full.next(), vec![0, 1, 2, 3]);
}
