//! Central finite-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f32,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Coordinates where both the analytic and numeric derivative are below
    /// this magnitude are skipped: in f32 their difference is round-off.
    pub min_magnitude: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            samples: 16,
            seed: 0,
            min_magnitude: 1e-4,
        }
    }
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p)).collect();
    let loss = f(&mut g, &vars)?;
    g.ensure_finite()?;
    Ok(g.scalar_value(loss) as f64)
}

/// Max relative error `|a - n| / (|a| + |n| + 1e-8)` between analytic
/// gradients and central differences over sampled coordinates of `params`.
///
/// `f` builds a scalar loss from graph leaves for `params` and must be
/// deterministic (eval-mode graph).
pub fn check_gradients<F>(f: F, params: &[Tensor], cfg: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.input(&p.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &vars)?;
    if g.shape(loss).iter().product::<usize>() != 1 {
        return Err(TensorError::Usage("check_gradients needs a scalar loss".into()));
    }
    g.ensure_finite()?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let zeros = vec![0.0; n];
        let analytic = g.grad(*v).unwrap_or(&zeros).to_vec();
        let coords: Vec<usize> = if n <= cfg.samples {
            (0..n).collect()
        } else {
            (0..cfg.samples).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.h;
            let plus = eval(&f, &work)?;
            work[pi].data_mut()[c] = orig - cfg.h;
            let minus = eval(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            // the perturbation actually applied in f32
            let step = ((orig + cfg.h) as f64) - ((orig - cfg.h) as f64);
            let numeric = (plus - minus) / step;
            let a = analytic[c] as f64;
            if a.abs() < cfg.min_magnitude && numeric.abs() < cfg.min_magnitude {
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let err = check_gradients(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            &GradCheck::default(),
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn sign_flipped_backward_is_detected() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = check_gradients(
            |g, v| {
                let vals = g.value(v[0]).to_vec();
                let loss: f32 = vals.iter().map(|a| a * a).sum();
                let wrong: Vec<f32> = vals.iter().map(|a| -2.0 * a).collect();
                g.scalar_with_grad(v[0], loss, wrong)
            },
            &[x],
            &GradCheck::default(),
        )
        .unwrap();
        // opposite signs: |a - n| / (|a| + |n|) = 1
        assert!((err - 1.0).abs() < 1e-2, "err {err}");
    }
}
