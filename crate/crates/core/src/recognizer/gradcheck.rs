//! Central finite-difference verification of the analytic gradients.
//!
//! Intended for tiny architectures only: every parameter costs two full
//! forward passes.

use super::backward::sample_loss_grads;
use super::forward::{encode_traced, teacher_forward};
use super::params::ModelParams;
use super::{ModelConfig, Vocabulary, EOS, SEP};
use crate::error::Result;
use crate::seed;
use ndarray::Array3;
use rand::Rng;

const STEP: f64 = 1e-5;

/// Denominator floor for the relative error. A central difference of a
/// loss L carries rounding noise of roughly `ε·L/STEP` ≈ 1e-10 absolute,
/// so relative agreement is unmeasurable for gradients much smaller than
/// that noise; judging them inflates probe noise into spurious failures.
/// Any real defect — a sign flip, a dropped term, a doubled factor — moves
/// the numerator in proportion to the gradients involved and clears this
/// floor by orders of magnitude.
const FLOOR: f64 = 1e-5;

/// Minimum distance every convolution pre-activation must keep from zero
/// for a finite-difference probe to be trustworthy. Within this band the
/// two-sided difference straddles the ReLU kink and measures neither
/// branch — a failure of the probe, not of the gradient under test.
const KINK_MARGIN: f64 = 50.0 * STEP;

/// Maximum over all parameters of the relative disagreement between the
/// analytic gradient and a central finite difference of the loss.
pub fn grad_check(params: &ModelParams, gray: &Array3<f64>, targets: &[usize]) -> Result<f64> {
    grad_check_with(params, gray, targets, |_| {})
}

/// Same check with a hook that may tamper with the analytic gradients
/// before comparison — the mutation test that proves the check can fail.
pub fn grad_check_with(
    params: &ModelParams,
    gray: &Array3<f64>,
    targets: &[usize],
    corrupt: impl Fn(&mut ModelParams),
) -> Result<f64> {
    let mut grads = params.zeros_like();
    sample_loss_grads(params, gray, targets, &mut grads)?;
    corrupt(&mut grads);
    let analytic = grads.to_flat_vec();

    let mut work = params.clone();
    let mut flat = params.to_flat_vec();
    let mut max_rel = 0.0f64;
    for idx in 0..flat.len() {
        let saved = flat[idx];
        flat[idx] = saved + STEP;
        work.set_from_flat(&flat);
        let up = teacher_forward(&work, gray, targets)?.loss;
        flat[idx] = saved - STEP;
        work.set_from_flat(&flat);
        let down = teacher_forward(&work, gray, targets)?.loss;
        flat[idx] = saved;

        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Self-contained check on a toy model — five-codepoint vocabulary, two
/// stride-2 blocks over a 16×16 image (a 4×4 feature grid), three decode
/// steps — exercising the convolution stack, recurrence, attention, and
/// context feeding end to end. Returns the max relative error.
///
/// Rigs whose pre-activations sit too close to a ReLU kink are redrawn
/// (deterministically, from the same seed): there the finite-difference
/// oracle itself is invalid, independent of the gradients under test.
/// Redrawing can therefore never mask a wrong gradient — away from kinks
/// the loss is smooth and the probe exact.
pub fn toy_grad_check(seed_value: u64) -> Result<f64> {
    let cps: Vec<u32> = ('a'..='e').map(|c| c as u32).collect();
    let targets = vec![Vocabulary::BASE, SEP, EOS];
    let mut rig = None;
    for attempt in 0..16 {
        let rig_seed = seed::derive_seed_indexed(seed_value, "toy-rig", attempt);
        let mut config = ModelConfig::new(Vocabulary::from_codepoints(&cps));
        config.channels = vec![3, 4];
        config.embed_dim = 4;
        config.hidden_dim = 5;
        config.attn_dim = 4;
        config.max_image = 64;
        let params = ModelParams::init(config, seed::derive_seed(rig_seed, "params"))?;
        let mut rng = seed::rng(seed::derive_seed(rig_seed, "image"));
        let gray = Array3::from_shape_fn((1, 16, 16), |_| rng.gen_range(0.0..1.0));
        let (_, trace) = encode_traced(&params, &gray)?;
        let clear = trace
            .pre
            .iter()
            .flat_map(|m| m.iter())
            .all(|&v| v.abs() > KINK_MARGIN);
        rig = Some((params, gray));
        if clear {
            break;
        }
        // Falls through with the last rig if no attempt clears the margin;
        // with ~250 pre-activations the chance of that is vanishing.
    }
    let (params, gray) = rig.expect("at least one rig is always drawn");
    grad_check(&params, &gray, &targets)
}
