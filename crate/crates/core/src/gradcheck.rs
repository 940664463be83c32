//! Gradient verification across every loss on random small fixtures.
//!
//! For each loss the batched analytic gradient is compared against central
//! differences of the scalar tape (coordinates whose perturbation flips a
//! branch decision are excluded) and against the tape's own reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{finite_diff_check_with, DiffError, ParamVector, Tape, Var};
use crate::field::taped::TapedField;
use crate::field::{BasisField, Decoder, DecoderConfig, LocalBasis};
use crate::geom::{Point3, PointCloud, Vec3};
use crate::objective::{
    chamfer_value_and_grad, center_latent_mask, inte_weighted_value_and_grad,
    opt_value_and_grad, opt_value_and_grad_unmasked, taped, Anchor, HingeMode, LossWeights,
    OptInputs,
};

pub const REPORT_VERSION: u32 = 1;

/// Every loss the checker covers.
pub const LOSSES: [&str; 14] = [
    "sdf",
    "euc",
    "smooth",
    "reg",
    "inte",
    "face",
    "face_formula",
    "pos",
    "pos_formula",
    "adj",
    "adj_soft",
    "stable",
    "opt",
    "chamfer",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub fixtures: usize,
    pub min_bases: usize,
    pub max_bases: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Loss whose analytic gradient is deliberately corrupted.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fixtures: 100,
            min_bases: 2,
            max_bases: 4,
            latent_dim: 3,
            hidden: vec![6, 6],
            samples: 8,
            step: 1e-6,
            tolerance: 1e-5,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub fixtures: usize,
    pub checked: usize,
    pub excluded: usize,
    /// Analytic gradient vs central differences.
    pub max_rel_error: f64,
    /// Analytic gradient vs the tape's reverse pass.
    pub max_tape_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub version: u32,
    pub seed: u64,
    pub fixtures: usize,
    pub tolerance: f64,
    pub losses: Vec<LossCheck>,
    pub passed: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("invalid gradcheck configuration: {0}")]
    Config(String),
    #[error("{loss}: {source}")]
    Diff {
        loss: String,
        #[source]
        source: DiffError,
    },
}

struct Fixture {
    field: BasisField,
    points: Vec<Point3>,
    targets: Vec<f64>,
    inputs: OptInputs,
    anchor: Anchor,
    cloud_a: PointCloud,
    cloud_b: PointCloud,
}

fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Point3 {
    Point3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, r: f64) -> PointCloud {
    PointCloud::new((0..n).map(|_| random_point(rng, r)).collect())
}

fn fixture(config: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Fixture {
    let n = rng.random_range(config.min_bases..=config.max_bases);
    let d_z = config.latent_dim;
    let decoder = Decoder::kaiming(DecoderConfig::small(d_z, config.hidden.clone()), rng)
        .expect("valid decoder config");
    let bases: Vec<LocalBasis> = (0..n)
        .map(|_| LocalBasis {
            mu: random_point(rng, 0.3),
            z: (0..d_z).map(|_| rng.random_range(-1.0..1.0)).collect(),
            s_raw: [0; 3].map(|_| rng.random_range(0.0..1.5)),
            r_raw: [0; 6].map(|_| rng.random_range(-1.0..1.0)),
            delta: Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ),
        })
        .collect();
    let field = BasisField::new(bases, decoder).expect("valid fixture");
    let points: Vec<Point3> = (0..config.samples).map(|_| random_point(rng, 0.4)).collect();
    let targets = points.iter().map(|p| p.coords.norm() - 0.25).collect();
    let m = config.samples;
    let inputs = OptInputs {
        surface: random_cloud(rng, m, 0.4),
        positive: random_cloud(rng, m, 0.4),
        adjacency: random_cloud(rng, m, 0.4),
    };
    let mut anchor = Anchor::from_field(&field);
    for (mu, z) in anchor.mu.iter_mut().zip(anchor.z.iter_mut()) {
        *mu += Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
        z.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    Fixture {
        field,
        points,
        targets,
        inputs,
        anchor,
        cloud_a: random_cloud(rng, m, 0.4),
        cloud_b: random_cloud(rng, m + 2, 0.4),
    }
}

fn weights(hinge: HingeMode, soft_adj: bool) -> LossWeights {
    LossWeights {
        epsilon: 0.05,
        hinge,
        a1: if soft_adj { 10.0 } else { 1e4 },
        a2: if soft_adj { 10.0 } else { 1e3 },
        ..LossWeights::default()
    }
}

fn single(inputs: &OptInputs, keep: &str) -> OptInputs {
    let pick = |name: &str, c: &PointCloud| if name == keep { c.clone() } else { PointCloud::default() };
    OptInputs {
        surface: pick("face", &inputs.surface),
        positive: pick("pos", &inputs.positive),
        adjacency: pick("adj", &inputs.adjacency),
    }
}

fn only(w: &LossWeights, term: &str) -> LossWeights {
    LossWeights {
        lambda_face: (term == "face") as u8 as f64,
        lambda_pos: (term == "pos") as u8 as f64,
        lambda_adj: (term == "adj") as u8 as f64,
        lambda_stable: (term == "stable") as u8 as f64,
        ..w.clone()
    }
}

/// Per-coordinate comparison outcome for one fixture.
struct Outcome {
    checked: usize,
    excluded: usize,
    fd_error: f64,
    tape_error: f64,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn compare<F>(objective: F, params: &ParamVector, analytic: &[f64], h: f64) -> Result<Outcome, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves = tape.leaves(params.as_slice());
    let out = objective(&mut tape, &leaves);
    let tape_grad = tape.backward(out)?;
    let report = finite_diff_check_with(objective, params, h, Some(analytic))?;
    Ok(Outcome {
        checked: report.checked,
        excluded: report.excluded.len(),
        fd_error: report.max_rel_error,
        tape_error: rel_error(analytic, &tape_grad),
    })
}

fn corrupt(grad: &mut [f64]) {
    if let Some(g) = grad.first_mut() {
        *g += 1e-2;
    }
}

fn check_one(loss: &str, fx: &Fixture, config: &GradCheckConfig) -> Result<Outcome, DiffError> {
    let f = &fx.field;
    let h = config.step;
    let full = f.to_params();
    let faulty = config.corrupt.as_deref() == Some(loss);
    let finish = |mut g: Vec<f64>| {
        if faulty {
            corrupt(&mut g);
        }
        g
    };
    let (pts, ys) = (&fx.points, &fx.targets);
    match loss {
        "sdf" | "euc" | "smooth" | "reg" | "inte" => {
            let w = LossWeights::default();
            let (wv, lambda_reg) = match loss {
                "sdf" => ([1.0, 0.0, 0.0], 0.0),
                "euc" => ([0.0, 1.0, 0.0], 0.0),
                "smooth" => ([0.0, 0.0, 1.0], 0.0),
                "reg" => ([0.0; 3], 1.0),
                _ => ([1.0, 1.0, w.lambda_smooth], w.lambda_reg),
            };
            let g = finish(inte_weighted_value_and_grad(f, pts, ys, wv, lambda_reg).grad);
            compare(
                |t: &mut Tape, leaves: &[Var]| {
                    let tf = TapedField::build(t, f, leaves);
                    match loss {
                        "sdf" => taped::loss_sdf(t, &tf, pts, ys),
                        "euc" => taped::loss_sdf_euc(t, &tf, pts, ys),
                        "smooth" => taped::loss_smooth(t, &tf, pts),
                        "reg" => taped::loss_reg(t, &tf),
                        _ => taped::loss_inte(t, &tf, pts, ys, &w, lambda_reg),
                    }
                },
                &full,
                &g,
                h,
            )
        }
        "face" | "face_formula" | "pos" | "pos_formula" | "adj" | "adj_soft" | "stable" => {
            let term = loss.split('_').next().expect("nonempty name");
            let hinge = if loss.ends_with("formula") {
                HingeMode::Formula
            } else {
                HingeMode::Prose
            };
            let w = only(&weights(hinge, loss == "adj_soft"), term);
            let inputs = single(&fx.inputs, term);
            let eval = opt_value_and_grad_unmasked(f, &inputs, &w, &fx.anchor).expect("anchor matches");
            let g = finish(eval.grad);
            compare(
                |t: &mut Tape, leaves: &[Var]| {
                    let tf = TapedField::build(t, f, leaves);
                    match term {
                        "face" => taped::loss_face(t, &tf, &inputs.surface.points, w.epsilon, hinge),
                        "pos" => taped::loss_pos(t, &tf, &inputs.positive.points, w.epsilon, hinge),
                        "adj" => taped::loss_adj(t, &tf, &inputs.adjacency.points, w.a1, w.a2),
                        _ => taped::loss_stable(t, &tf, &fx.anchor),
                    }
                },
                &full,
                &g,
                h,
            )
        }
        "opt" => {
            // Only centers and latents are optimized; the rest enter as constants.
            let w = weights(HingeMode::Prose, true);
            let eval = opt_value_and_grad(f, &fx.inputs, &w, &fx.anchor).expect("anchor matches");
            let mask = center_latent_mask(f);
            let values = f.param_values();
            let free: Vec<usize> = (0..values.len()).filter(|&i| mask[i]).collect();
            let mut params = ParamVector::new();
            params.register("mu_z", &free.iter().map(|&i| values[i]).collect::<Vec<_>>());
            let g = finish(free.iter().map(|&i| eval.grad[i]).collect());
            compare(
                |t: &mut Tape, leaves: &[Var]| {
                    let mut all: Vec<Var> = values.iter().map(|&v| t.constant(v)).collect();
                    for (k, &i) in free.iter().enumerate() {
                        all[i] = leaves[k];
                    }
                    let tf = TapedField::build(t, f, &all);
                    taped::loss_opt(t, &tf, &fx.inputs, &w, &fx.anchor)
                },
                &params,
                &g,
                h,
            )
        }
        "chamfer" => {
            let (a, b) = (&fx.cloud_a, &fx.cloud_b);
            let (_, grad) = chamfer_value_and_grad(a, b).expect("nonempty clouds");
            let mut params = ParamVector::new();
            params.register("a", &a.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>());
            let g = finish(grad.into_iter().flatten().collect());
            compare(
                |t: &mut Tape, leaves: &[Var]| {
                    let pts: Vec<[Var; 3]> = leaves.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                    taped::loss_chamfer(t, &pts, b)
                },
                &params,
                &g,
                h,
            )
        }
        other => unreachable!("unknown loss {other}"),
    }
}

/// Runs every loss over `config.fixtures` random fixtures.
pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError> {
    if config.fixtures == 0 || config.samples == 0 {
        return Err(GradCheckError::Config("fixtures and samples must be >= 1".into()));
    }
    if config.min_bases == 0 || config.min_bases > config.max_bases {
        return Err(GradCheckError::Config(format!(
            "basis range {}..={} is empty",
            config.min_bases, config.max_bases
        )));
    }
    if !(config.step > 0.0 && config.tolerance > 0.0) {
        return Err(GradCheckError::Config("step and tolerance must be > 0".into()));
    }
    if let Some(name) = &config.corrupt {
        if !LOSSES.contains(&name.as_str()) {
            return Err(GradCheckError::Config(format!("unknown loss {name:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fixtures: Vec<Fixture> = (0..config.fixtures).map(|_| fixture(config, &mut rng)).collect();
    let mut losses = Vec::with_capacity(LOSSES.len());
    for loss in LOSSES {
        let mut c = LossCheck {
            loss: loss.to_string(),
            fixtures: fixtures.len(),
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            max_tape_error: 0.0,
            passed: false,
        };
        for fx in &fixtures {
            let o = check_one(loss, fx, config).map_err(|source| GradCheckError::Diff {
                loss: loss.to_string(),
                source,
            })?;
            c.checked += o.checked;
            c.excluded += o.excluded;
            c.max_rel_error = c.max_rel_error.max(o.fd_error);
            c.max_tape_error = c.max_tape_error.max(o.tape_error);
        }
        c.passed = c.checked > 0
            && c.max_rel_error <= config.tolerance
            && c.max_tape_error <= config.tolerance;
        losses.push(c);
    }
    let passed = losses.iter().all(|l| l.passed);
    Ok(GradCheckReport {
        version: REPORT_VERSION,
        seed: config.seed,
        fixtures: config.fixtures,
        tolerance: config.tolerance,
        losses,
        passed,
    })
}
