//! Central-finite-difference verification of backward passes.
//!
//! The checker only ever calls the forward path (twice per probed
//! coordinate), so it stays independent of the backward rules it verifies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{backward, Tape};
use crate::tensor::Tensor;

/// Relative-error comparison with an absolute floor for near-zero gradients.
fn agree(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_tol || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// Check the gradients of `f` w.r.t. every tensor in `inputs` against
/// central finite differences, probing every coordinate. `f` must be a pure
/// function of its inputs. Returns the largest relative error seen, or an
/// error describing the first disagreement.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, step: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    check_gradients_sampled(inputs, f, step, rel_tol, usize::MAX, 0)
}

/// Like [`check_gradients`], probing at most `max_coords` randomly chosen
/// coordinates per input tensor (all of them if the tensor is smaller).
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    rel_tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let abs_tol = 1e-7;

    // analytic pass
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss { shape: loss.shape() });
    }
    let grads = backward(&tape, &loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(&leaves[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if coords.len() > max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords);
        }
        for j in coords {
            let probe = |delta: f64| -> Result<f64> {
                let mut nudged: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = input.data().to_vec();
                data[j] += delta;
                nudged[i] = Tensor::from_vec(data, input.shape())?;
                let t = Tape::new();
                Ok(f(&t, &nudged)?.item())
            };
            let fd = |h: f64| -> Result<f64> { Ok((probe(h)? - probe(-h)?) / (2.0 * h)) };
            let mut numeric = fd(step)?;
            let a = analytic[j];
            if !agree(a, numeric, rel_tol, abs_tol) {
                // a step that straddles a non-differentiable point (ReLU
                // zero, max-pool tie) produces a spurious mismatch; shrink
                // the step to exclude the kink. A wrong backward rule stays
                // wrong at every step size.
                let mut ok = false;
                for shrink in [10.0, 100.0] {
                    numeric = fd(step / shrink)?;
                    if agree(a, numeric, rel_tol, abs_tol) {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return Err(Error::invalid(
                        "gradcheck",
                        format!(
                            "input {i} coord {j}: analytic {a:.9e} vs finite-difference {numeric:.9e}"
                        ),
                    ));
                }
            }
            let denom = a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}
