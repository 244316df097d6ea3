//! Fast invariant suite: brute-force oracles for the geometry kernels,
//! finite-difference gradient checks and freeze soundness.

use std::time::Instant;

use pointfuse::autograd::{finite_diff_check, Fault, GradCheckReport, Precision, Tape, TapeOptions, Tensor, Var};
use pointfuse::chamfer::{chamfer, chamfer_brute, ChamferVariant};
use pointfuse::config::ModelConfig;
use pointfuse::dataset::{Sample, ShapeKind, View};
use pointfuse::geometry::{dist2, fps, knn_group, FpsStart, Point3, PointCloud};
use pointfuse::model::PreparedSample;
use pointfuse::nn::ParamGroup;
use pointfuse::training::{gradcheck_model, train_step, Checkpoint, Stage, TrainState};
use pointfuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub struct CheckOutcome {
    pub name: String,
    /// Detail on success, reason on failure.
    pub result: std::result::Result<String, String>,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.result.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.result {
            Ok(d) => format!("PASS {} ({d}; {:.1}s)", self.name, self.seconds),
            Err(e) => format!("FAIL {}: {e}", self.name),
        }
    }
}

fn timed(name: &str, f: impl FnOnce() -> std::result::Result<String, String>) -> CheckOutcome {
    let t = Instant::now();
    let result = f();
    CheckOutcome {
        name: name.into(),
        result,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()
}

/// Greedy farthest point sampling by exhaustive search; ties go to the
/// lower index.
pub fn fps_oracle(pts: &[Point3], g: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < g {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| dist2(&pts[i], &pts[c]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.expect("g <= n").0);
    }
    chosen
}

/// FPS against the oracle on `clouds` random clouds of at most 256 points.
pub fn check_fps(clouds: usize, seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..clouds {
        let n = rng.random_range(32..=256);
        let g = rng.random_range(1..=32);
        let pts = random_cloud(&mut rng, n);
        let got = fps(
            &PointCloud::new(pts.clone()).map_err(|e| e.to_string())?,
            g,
            FpsStart::Index(0),
        )
        .map_err(|e| e.to_string())?;
        if got != fps_oracle(&pts, g, 0) {
            return Err(format!("cloud {c} (n={n}, g={g}) differs from the oracle"));
        }
    }
    Ok(format!("{clouds} clouds"))
}

/// kd-tree Chamfer against the brute-force version on `pairs` random pairs
/// of up to `max_n` points: losses within 1e-9, nearest indices identical.
pub fn check_chamfer(pairs: usize, max_n: usize, seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..pairs {
        let (na, nb) = (rng.random_range(1..=max_n), rng.random_range(1..=max_n));
        let a = random_cloud(&mut rng, na);
        let b = random_cloud(&mut rng, nb);
        for v in [ChamferVariant::L2Sq, ChamferVariant::L1] {
            let fast = chamfer(&a, &b, v).map_err(|e| e.to_string())?;
            let slow = chamfer_brute(&a, &b, v).map_err(|e| e.to_string())?;
            if (fast.loss - slow.loss).abs() > 1e-9 {
                return Err(format!("pair {p} {}: {} vs {}", v.name(), fast.loss, slow.loss));
            }
            if fast.nearest_forward != slow.nearest_forward || fast.nearest_backward != slow.nearest_backward {
                return Err(format!("pair {p} {}: nearest indices differ", v.name()));
            }
        }
    }
    Ok(format!("{pairs} pairs"))
}

/// The three hand-computed Chamfer cases.
pub fn check_chamfer_hand_cases() -> std::result::Result<String, String> {
    let l2 = |a: &[Point3], b: &[Point3], v| chamfer(a, b, v).map(|r| r.loss).map_err(|e| e.to_string());
    let cloud = [[0.5, -1.0, 2.0], [3.0, 0.0, 1.0]];
    let cases = [
        ("identical", l2(&cloud, &cloud, ChamferVariant::L2Sq)?, 0.0),
        (
            "1-vs-1 l2sq",
            l2(&[[0., 0., 0.]], &[[3., 4., 0.]], ChamferVariant::L2Sq)?,
            50.0,
        ),
        (
            "1-vs-1 l1",
            l2(&[[0., 0., 0.]], &[[3., 4., 0.]], ChamferVariant::L1)?,
            10.0,
        ),
        (
            "1-vs-2",
            l2(&[[0., 0., 0.]], &[[1., 0., 0.], [-1., 0., 0.]], ChamferVariant::L2Sq)?,
            2.0,
        ),
    ];
    for (name, got, want) in cases {
        if got != want {
            return Err(format!("{name}: got {got}, expected {want}"));
        }
    }
    Ok("4 cases exact".into())
}

/// KNN grouping against sorting all points by `(distance, index)`.
pub fn check_knn(clouds: usize, seed: u64) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..clouds {
        let n = rng.random_range(16..=200);
        let m = rng.random_range(1..=16);
        let pts = random_cloud(&mut rng, n);
        let pc = PointCloud::new(pts.clone()).map_err(|e| e.to_string())?;
        let centers = fps(&pc, 8, FpsStart::Index(0)).map_err(|e| e.to_string())?;
        let grouped = knn_group(&pc, &centers, m).map_err(|e| e.to_string())?;
        for (gi, &ci) in centers.iter().enumerate() {
            let q = pts[ci];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| dist2(&pts[a], &q).total_cmp(&dist2(&pts[b], &q)).then(a.cmp(&b)));
            let want: Vec<Point3> = idx[..m].iter().map(|&i| [0, 1, 2].map(|k| pts[i][k] - q[k])).collect();
            if grouped.group(gi) != want.as_slice() {
                return Err(format!("cloud {c} group {gi} differs from brute force"));
            }
        }
    }
    Ok(format!("{clouds} clouds"))
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn weighted<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = y.tape().constant(random_tensor(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn op_case<F>(name: &str, mut params: Vec<Tensor>, options: TapeOptions, f: F) -> (String, Result<GradCheckReport>)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    (
        name.into(),
        finite_diff_check(&mut params, None, GRAD_H, GRAD_TOL, options, f),
    )
}

/// Finite-difference check of every differentiable op. Each entry is the
/// op name and its report.
pub fn op_gradchecks(options: TapeOptions) -> Vec<(String, Result<GradCheckReport>)> {
    let r = random_tensor;
    let mut away_from_kink = r(&[10], 5);
    for x in away_from_kink.data_mut() {
        *x += 0.2 * x.signum();
    }
    let mut gamma = r(&[4], 2);
    for g in gamma.data_mut() {
        *g += 1.5;
    }
    let targets = vec![
        (0..5).map(|i| [i as f64 * 0.3, 0.1, -0.2]).collect::<Vec<_>>(),
        (0..4).map(|i| [0.0, i as f64 * 0.4, 0.5]).collect::<Vec<_>>(),
    ];
    let o = options;
    let t2 = targets.clone();
    vec![
        op_case("add", vec![r(&[2, 3], 1), r(&[2, 3], 2)], o, |_, v| {
            weighted(v[0].add(v[1])?, 9)
        }),
        op_case("sub", vec![r(&[2, 3], 1), r(&[2, 3], 2)], o, |_, v| {
            weighted(v[0].sub(v[1])?, 9)
        }),
        op_case("mul", vec![r(&[2, 3], 1), r(&[2, 3], 2)], o, |_, v| {
            weighted(v[0].mul(v[1])?, 9)
        }),
        op_case("scale", vec![r(&[4], 3)], o, |_, v| weighted(v[0].scale(-2.5), 9)),
        op_case("gelu", vec![r(&[3, 4], 4)], o, |_, v| weighted(v[0].gelu(), 9)),
        op_case("relu", vec![away_from_kink], o, |_, v| weighted(v[0].relu(), 9)),
        op_case("broadcast_to", vec![r(&[4], 6)], o, |_, v| {
            weighted(v[0].broadcast_to(&[2, 3, 4])?, 9)
        }),
        op_case("add_broadcast", vec![r(&[2, 3, 4], 7), r(&[4], 8)], o, |_, v| {
            weighted(v[0].add_broadcast(v[1])?, 9)
        }),
        op_case("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], o, |_, v| {
            weighted(v[0].matmul(v[1])?, 9)
        }),
        op_case("matmul batched", vec![r(&[2, 3, 4], 1), r(&[2, 4, 5], 2)], o, |_, v| {
            weighted(v[0].matmul(v[1])?, 9)
        }),
        op_case("matmul broadcast", vec![r(&[2, 3, 4], 1), r(&[4, 5], 2)], o, |_, v| {
            weighted(v[0].matmul(v[1])?, 9)
        }),
        op_case("permute", vec![r(&[2, 3, 4], 1)], o, |_, v| {
            weighted(v[0].permute(&[2, 0, 1])?, 9)
        }),
        op_case("transpose", vec![r(&[2, 3, 4], 1)], o, |_, v| {
            weighted(v[0].transpose()?, 9)
        }),
        op_case("reshape", vec![r(&[2, 6], 1)], o, |_, v| {
            weighted(v[0].reshape(&[3, 4])?, 9)
        }),
        op_case("concat", vec![r(&[2, 2, 3], 1), r(&[2, 1, 3], 2)], o, |_, v| {
            weighted(Var::concat(&[v[0], v[1]], 1)?, 9)
        }),
        op_case("gather_rows", vec![r(&[2, 3, 2], 1)], o, |_, v| {
            weighted(v[0].gather_rows(&[vec![2, 0, 0], vec![1, 2, 0]])?, 9)
        }),
        op_case("sum", vec![r(&[2, 3], 1)], o, |_, v| Ok(v[0].sum().scale(1.5))),
        op_case("mean", vec![r(&[2, 3], 1)], o, |_, v| Ok(v[0].mean().scale(1.5))),
        op_case("max_axis", vec![r(&[2, 5, 3], 1)], o, |_, v| {
            weighted(v[0].max_axis(1)?, 9)
        }),
        op_case("softmax", vec![r(&[2, 3, 4], 1)], o, |_, v| {
            weighted(v[0].softmax(2)?, 9)
        }),
        op_case("softmax inner axis", vec![r(&[2, 3, 4], 1)], o, |_, v| {
            weighted(v[0].softmax(1)?, 9)
        }),
        op_case("layernorm", vec![r(&[3, 4], 1), gamma, r(&[4], 3)], o, |_, v| {
            weighted(v[0].layernorm(v[1], v[2], 1e-5)?, 9)
        }),
        op_case("chamfer l2sq", vec![r(&[2, 6, 3], 11)], o, move |_, v| {
            v[0].chamfer_loss(&targets, ChamferVariant::L2Sq)
        }),
        op_case("chamfer l1", vec![r(&[2, 6, 3], 11)], o, move |_, v| {
            v[0].chamfer_loss(&t2, ChamferVariant::L1)
        }),
    ]
}

pub fn tiny_batch(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<PreparedSample>> {
    (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let s = Sample::synth(format!("s{i}"), kind, 256, seed + i as u64, cfg.image_size, View::PosZ)?;
            PreparedSample::new(&s, cfg, seed + 100 + i as u64)
        })
        .collect()
}

/// Gradient spot check of the tiny end-to-end model: `per_tensor` random
/// coordinates of every parameter tensor, with and without fusion.
pub fn model_gradchecks(per_tensor: usize, options: TapeOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut cfg = ModelConfig::preset("tiny")?;
    cfg.precision = Precision::Wide;
    let state = TrainState::new(&cfg)?;
    let batch = tiny_batch(&cfg, 2, 7)?;
    let mut out = Vec::new();
    for (fuse, seed) in [(true, 3), (false, 5)] {
        let report = gradcheck_model(&state.model, &batch, fuse, per_tensor, seed, GRAD_H, GRAD_TOL, options)?;
        out.push((format!("tiny model, fuse={fuse}"), report));
    }
    Ok(out)
}

/// Stage 1 training, a checkpoint round trip, then ten stage-2 steps.
/// The point encoder and decoder must stay bitwise unchanged while at least
/// one cross-attention and one image-tokenizer tensor moves.
pub fn check_freeze() -> std::result::Result<String, String> {
    let run = || -> Result<std::result::Result<String, String>> {
        let cfg = ModelConfig::preset("tiny")?;
        let batch = tiny_batch(&cfg, 2, 11)?;
        let mut state = TrainState::new(&cfg)?;
        for _ in 0..3 {
            train_step(&mut state, &batch, Stage::One)?;
        }
        state.stage = Some(Stage::One);
        let mut state = Checkpoint::from_bytes(&state.checkpoint().to_bytes())?
            .checkpoint
            .into_state()?;
        let before = state.model.store.snapshot();
        for _ in 0..10 {
            train_step(&mut state, &batch, Stage::Two)?;
        }
        let mut moved = [false; 2];
        for (p, old) in state.model.store.params().iter().zip(&before) {
            let changed = p.tensor.data() != old.data();
            match p.group {
                ParamGroup::PcEncoder | ParamGroup::Decoder if changed => {
                    return Ok(Err(format!("frozen tensor `{}` changed", p.name)));
                }
                ParamGroup::CrossAttention => moved[0] |= changed,
                ParamGroup::ImageTokenizer => moved[1] |= changed,
                _ => {}
            }
        }
        Ok(match moved {
            [true, true] => Ok("frozen tensors bitwise unchanged".into()),
            [false, _] => Err("no cross-attention tensor changed".into()),
            [_, false] => Err("no image-tokenizer tensor changed".into()),
        })
    };
    run().map_err(|e| e.to_string())?
}

fn summarize(reports: &[(String, GradCheckReport)]) -> std::result::Result<String, String> {
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    match reports.iter().find(|(_, r)| !r.passed()) {
        Some((name, r)) => Err(format!(
            "{name}: relative error {:.3e} > {:.0e} at {:?}",
            r.max_rel_err, r.tol, r.worst
        )),
        None => Ok(format!("{checked} coordinates, max relative error {worst:.2e}")),
    }
}

/// Runs the suite. `fault` is applied to the analytic gradient passes.
pub fn run(fault: Option<Fault>) -> Vec<CheckOutcome> {
    let options = TapeOptions {
        fault,
        ..TapeOptions::wide()
    };
    vec![
        timed("fps matches greedy oracle", || check_fps(50, 1)),
        timed("chamfer kd-tree matches brute force", || check_chamfer(50, 512, 2)),
        timed("chamfer hand cases", check_chamfer_hand_cases),
        timed("knn matches brute force", || check_knn(20, 3)),
        timed("op gradients", || {
            let reports = op_gradchecks(options)
                .into_iter()
                .map(|(n, r)| r.map(|r| (n, r)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            summarize(&reports)
        }),
        timed("model gradients", || {
            summarize(&model_gradchecks(3, options).map_err(|e| e.to_string())?)
        }),
        timed("stage-2 freeze soundness", check_freeze),
    ]
}
