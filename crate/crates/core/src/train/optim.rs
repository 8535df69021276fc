//! He initialization and SGD with classical (heavy-ball) momentum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::{Shape, Tensor};

/// i.i.d. zero-mean Gaussian with standard deviation sqrt(2 / fan_in).
pub fn he_init_from<T: Float>(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
    let data: Vec<T> = (0..shape.numel()).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Seeded variant; a fixed seed reproduces the tensor exactly.
pub fn he_init<T: Float>(shape: Shape, fan_in: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    he_init_from(shape, fan_in, &mut rng)
}

/// v <- momentum * v + g;  p <- p - lr * v
pub fn sgd_momentum_step<T: Float>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::invalid(
            "sgd_momentum_step",
            format!(
                "shape drift: param {}, grad {}, velocity {}",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    let lr = T::from_f64(lr);
    let momentum = T::from_f64(momentum);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Per-parameter velocity buffers, created at zero on first use and
/// shape-checked on every step.
pub struct OptimizerState<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new() -> OptimizerState<T> {
        OptimizerState { velocity: Vec::new() }
    }

    /// One update across an ordered parameter list. Gradients may be None
    /// (treated as zero; momentum still decays the velocity).
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Option<Vec<T>>],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![T::ZERO; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd_momentum_step",
                format!("shape drift: {} velocity buffers, {} params", self.velocity.len(), params.len()),
            ));
        }
        let zero_grad: Vec<T> = Vec::new();
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g: &[T] = match &grads[i] {
                Some(g) => g,
                None => &zero_grad,
            };
            if g.is_empty() {
                // no gradient flowed; decay velocity and apply it
                let lr_t = T::from_f64(lr);
                let m_t = T::from_f64(momentum);
                let v = &mut self.velocity[i];
                if v.len() != p.numel() {
                    return Err(Error::invalid("sgd_momentum_step", format!("shape drift on {name}")));
                }
                let pd = p.data_mut();
                for (pv, vv) in pd.iter_mut().zip(v.iter_mut()) {
                    *vv = m_t * *vv;
                    *pv -= lr_t * *vv;
                }
            } else {
                sgd_momentum_step(p.data_mut(), g, &mut self.velocity[i], lr, momentum)?;
            }
        }
        Ok(())
    }
}

impl<T: Float> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_moments() {
        let fan_in = 49 * 64;
        let n = 100_000usize;
        let t = he_init::<f64>(Shape::new(1, 1, 250, 400), fan_in, 17);
        let mean: f64 = t.iter().sum::<f64>() / n as f64;
        let var: f64 = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let want = 2.0 / fan_in as f64;
        assert!((var - want).abs() / want < 0.05, "var {var} vs {want}");
        let sigma = want.sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn he_init_is_deterministic_per_seed() {
        let a = he_init::<f32>(Shape::new(4, 3, 3, 3), 27, 5);
        let b = he_init::<f32>(Shape::new(4, 3, 3, 3), 27, 5);
        assert_eq!(a.data(), b.data());
        let c = he_init::<f32>(Shape::new(4, 3, 3, 3), 27, 6);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = [1.0f64, 2.0];
        let mut v = [0.0f64; 2];
        sgd_momentum_step(&mut p, &[0.5, -0.5], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, [0.95, 2.05]);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_a_fixed_point() {
        let mut p = [1.0f64, -3.0];
        let mut v = [0.0f64; 2];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, [1.0, -3.0]);
    }

    #[test]
    fn two_steps_with_constant_gradient_unroll() {
        // total update after two steps = -lr * g * (2 + momentum)
        let (lr, m, g) = (0.1f64, 0.9f64, 2.0f64);
        let mut p = [0.0f64];
        let mut v = [0.0f64];
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m).unwrap();
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m).unwrap();
        let want = -lr * g * (2.0 + m);
        assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
    }

    #[test]
    fn shape_drift_is_an_error() {
        let mut p = [1.0f64, 2.0];
        let mut v = [0.0f64; 2];
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).is_err());
    }
}
