//! CTC negative log-likelihood by forward-backward in f64 log space.

use thiserror::Error;

use super::BLANK;
use crate::tensor::{shape_err, Graph, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("target of length {target} with {repeats} repeats needs at least {needed} frames, got {frames}")]
    Infeasible {
        frames: usize,
        target: usize,
        repeats: usize,
        needed: usize,
    },
    #[error("target id {0} is blank or outside the vocabulary")]
    BadTarget(usize),
    #[error("log-prob matrix has {len} values, not a multiple of V={v}")]
    Shape { len: usize, v: usize },
}

impl From<CtcError> for TensorError {
    fn from(e: CtcError) -> Self {
        TensorError::Usage(e.to_string())
    }
}

/// Minimum frames for `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn feasible(frames: usize, target: &[usize]) -> bool {
    frames >= min_frames(target)
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Loss and its gradient w.r.t. the log-probabilities `logp: [T, V]`.
pub fn ctc_loss(logp: &[f32], v: usize, target: &[usize]) -> Result<(f64, Vec<f32>), CtcError> {
    if v == 0 || !logp.len().is_multiple_of(v) {
        return Err(CtcError::Shape { len: logp.len(), v });
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= v) {
        return Err(CtcError::BadTarget(bad));
    }
    let t_len = logp.len() / v;
    if !feasible(t_len, target) {
        return Err(CtcError::Infeasible {
            frames: t_len,
            target: target.len(),
            repeats: min_frames(target) - target.len(),
            needed: min_frames(target),
        });
    }
    // extended label sequence: blank, y1, blank, y2, ..., blank
    let s_len = 2 * target.len() + 1;
    let lab = |s: usize| if s.is_multiple_of(2) { BLANK } else { target[s / 2] };
    let lp = |t: usize, k: usize| logp[t * v + k] as f64;
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && lab(s) != lab(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, BLANK);
    if s_len > 1 {
        alpha[1] = lp(0, lab(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = lse(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = lse(a, alpha[(t - 1) * s_len + s - 2]);
            }
            if a > ninf {
                alpha[t * s_len + s] = a + lp(t, lab(s));
            }
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, BLANK);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, lab(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = lse(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = lse(b, beta[(t + 1) * s_len + s + 2]);
            }
            if b > ninf {
                beta[t * s_len + s] = b + lp(t, lab(s));
            }
        }
    }
    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = lse(log_z, alpha[last + s_len - 2]);
    }
    // d(-log Z)/d logp[t,k] = -occupancy of label k at frame t
    let mut grad = vec![0.0f32; logp.len()];
    for t in 0..t_len {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                let k = lab(s);
                occ[k] = lse(occ[k], ab - lp(t, k));
            }
        }
        for k in 0..v {
            if occ[k] > ninf {
                grad[t * v + k] = -((occ[k] - log_z).exp() as f32);
            }
        }
    }
    Ok((-log_z, grad))
}

/// Graph node for the CTC loss of `logp: [T, V]`, scaled by `scale`.
pub fn ctc_loss_var(g: &mut Graph, logp: Var, target: &[usize], scale: f32) -> crate::tensor::Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(shape_err("ctc_loss", format!("expected [T, V], got {shape:?}")));
    }
    let (loss, mut grad) = ctc_loss(g.value(logp), shape[1], target)?;
    grad.iter_mut().for_each(|x| *x *= scale);
    g.scalar_with_grad(logp, (loss * scale as f64) as f32, grad)
}
