//! Symmetric Chamfer distance between two point sets.
//!
//! ```text
//! L(R, G) = 1/|R| Σ_{x∈R} min_{y∈G} d(x, y) + 1/|G| Σ_{y∈G} min_{x∈R} d(y, x)
//! ```
//!
//! with `d` the squared Euclidean distance (`L2Sq`) or the plain Euclidean
//! distance (`L1`). Sums run in index order so the kd-tree and brute-force
//! paths produce identical values.

use crate::autograd::{CustomOp, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{dist2, KdTree, Point3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChamferVariant {
    #[default]
    L2Sq,
    L1,
}

impl ChamferVariant {
    pub fn name(self) -> &'static str {
        match self {
            ChamferVariant::L2Sq => "l2sq",
            ChamferVariant::L1 => "l1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l2sq" | "l2" => Some(ChamferVariant::L2Sq),
            "l1" => Some(ChamferVariant::L1),
            _ => None,
        }
    }

    fn apply(self, d2: f64) -> f64 {
        match self {
            ChamferVariant::L2Sq => d2,
            ChamferVariant::L1 => d2.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferResult {
    pub loss: f64,
    /// For each reconstructed point, the index of its nearest ground-truth point.
    pub nearest_forward: Vec<usize>,
    /// For each ground-truth point, the index of its nearest reconstructed point.
    pub nearest_backward: Vec<usize>,
}

fn check_nonempty(recon: &[Point3], gt: &[Point3]) -> Result<()> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::Contract(format!(
            "chamfer needs two nonempty clouds, got {} and {} points",
            recon.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn assemble(
    recon: &[Point3],
    gt: &[Point3],
    variant: ChamferVariant,
    nearest_forward: Vec<usize>,
    nearest_backward: Vec<usize>,
) -> ChamferResult {
    let fwd: f64 = recon
        .iter()
        .zip(&nearest_forward)
        .map(|(x, &j)| variant.apply(dist2(x, &gt[j])))
        .sum();
    let bwd: f64 = gt
        .iter()
        .zip(&nearest_backward)
        .map(|(y, &i)| variant.apply(dist2(y, &recon[i])))
        .sum();
    ChamferResult {
        loss: fwd / recon.len() as f64 + bwd / gt.len() as f64,
        nearest_forward,
        nearest_backward,
    }
}

/// Chamfer distance using kd-tree nearest-neighbour queries.
pub fn chamfer(recon: &[Point3], gt: &[Point3], variant: ChamferVariant) -> Result<ChamferResult> {
    check_nonempty(recon, gt)?;
    let gt_tree = KdTree::build(gt).expect("nonempty");
    let recon_tree = KdTree::build(recon).expect("nonempty");
    let fwd = recon.iter().map(|x| gt_tree.nearest(x).0).collect();
    let bwd = gt.iter().map(|y| recon_tree.nearest(y).0).collect();
    Ok(assemble(recon, gt, variant, fwd, bwd))
}

/// Chamfer distance by exhaustive `O(|R|·|G|)` search.
pub fn chamfer_brute(recon: &[Point3], gt: &[Point3], variant: ChamferVariant) -> Result<ChamferResult> {
    check_nonempty(recon, gt)?;
    let argmin = |q: &Point3, set: &[Point3]| {
        let mut best = (0, f64::INFINITY);
        for (i, p) in set.iter().enumerate() {
            let d = dist2(q, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    };
    let fwd = recon.iter().map(|x| argmin(x, gt)).collect();
    let bwd = gt.iter().map(|y| argmin(y, recon)).collect();
    Ok(assemble(recon, gt, variant, fwd, bwd))
}

/// Gradient of the loss with respect to every reconstructed point, holding
/// the nearest-neighbour assignments of `result` fixed.
pub fn chamfer_backward(
    result: &ChamferResult,
    recon: &[Point3],
    gt: &[Point3],
    variant: ChamferVariant,
) -> Vec<Point3> {
    let mut grad = vec![[0.0; 3]; recon.len()];
    let term = |x: &Point3, y: &Point3, weight: f64| -> Point3 {
        let diff = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        let k = match variant {
            ChamferVariant::L2Sq => 2.0 * weight,
            ChamferVariant::L1 => {
                let n = dist2(x, y).sqrt();
                if n > 0.0 {
                    weight / n
                } else {
                    0.0
                }
            }
        };
        diff.map(|d| d * k)
    };
    let wf = 1.0 / recon.len() as f64;
    for (i, (x, &j)) in recon.iter().zip(&result.nearest_forward).enumerate() {
        let t = term(x, &gt[j], wf);
        for a in 0..3 {
            grad[i][a] += t[a];
        }
    }
    let wb = 1.0 / gt.len() as f64;
    for (y, &i) in gt.iter().zip(&result.nearest_backward) {
        let t = term(&recon[i], y, wb);
        for a in 0..3 {
            grad[i][a] += t[a];
        }
    }
    grad
}

struct ChamferOp {
    targets: Vec<Vec<Point3>>,
    results: Vec<ChamferResult>,
    variant: ChamferVariant,
}

fn as_points(data: &[f64]) -> Vec<Point3> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let pred = inputs[0];
        if self.results.is_empty() {
            return vec![vec![f64::NAN; pred.len()]];
        }
        let sets = self.targets.len();
        let per = pred.len() / sets;
        let upstream = grad[0] / sets as f64;
        let mut out = Vec::with_capacity(pred.len());
        for (s, (target, result)) in self.targets.iter().zip(&self.results).enumerate() {
            let recon = as_points(&pred.data()[s * per..(s + 1) * per]);
            for g in chamfer_backward(result, &recon, target, self.variant) {
                out.extend(g.map(|v| v * upstream));
            }
        }
        vec![out]
    }
}

impl<'t> Var<'t> {
    /// Mean Chamfer distance over `S` independent pairs: `self` holds the
    /// predictions as `[S, N, 3]` and `targets[s]` the matching ground truth.
    pub fn chamfer_loss(self, targets: &[Vec<Point3>], variant: ChamferVariant) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] != targets.len() || targets.is_empty() {
            return Err(Error::dim("chamfer_loss", &shape, &[targets.len(), 0, 3]));
        }
        let (loss, results) = {
            let pred = self.value();
            if !pred.all_finite() {
                // Nearest-neighbour search is meaningless on NaN; the loss
                // stays NaN so the caller's non-finite check fires.
                (f64::NAN, Vec::new())
            } else {
                let per = shape[1] * 3;
                let mut results = Vec::with_capacity(targets.len());
                let mut total = 0.0;
                for (s, target) in targets.iter().enumerate() {
                    let recon = as_points(&pred.data()[s * per..(s + 1) * per]);
                    let r = chamfer(&recon, target, variant)?;
                    total += r.loss;
                    results.push(r);
                }
                (total / targets.len() as f64, results)
            }
        };
        let op = ChamferOp {
            targets: targets.to_vec(),
            results,
            variant,
        };
        Ok(self.tape().custom(&[self], Tensor::scalar(loss), Box::new(op)))
    }
}
