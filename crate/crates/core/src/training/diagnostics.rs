use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check, GradCheckReport, Precision, TapeOptions};
use crate::error::Result;
use crate::model::{ForwardOptions, Model, PreparedSample};
use crate::nn::Ctx;

/// Finite-difference check of the full loss with respect to
/// `per_tensor` random coordinates of every parameter tensor.
///
/// The model should be built in wide precision; `options.fault` is applied
/// to the analytic pass only.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_model(
    model: &Model,
    batch: &[PreparedSample],
    fuse: bool,
    per_tensor: usize,
    seed: u64,
    h: f64,
    tol: f64,
    options: TapeOptions,
) -> Result<GradCheckReport> {
    let mut params = model.store.snapshot();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let len = p.len();
            (0..per_tensor.min(len))
                .map(|_| (i, rng.random_range(0..len)))
                .collect::<Vec<_>>()
        })
        .collect();
    let options = TapeOptions {
        precision: Precision::Wide,
        ..options
    };
    finite_diff_check(&mut params, Some(&coords), h, tol, options, |tape, vars| {
        let ctx = Ctx::from_vars(tape, vars.to_vec());
        let out = model.forward(
            &ctx,
            batch,
            ForwardOptions {
                fuse,
                dropout_rng: None,
                record_attention: false,
            },
        )?;
        model.loss(out.points, batch)
    })
}
