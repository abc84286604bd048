use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-parameter optimizer buffers, stored in checkpoints so a resumed run
/// takes exactly the same steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerState {
    None,
    Sgd { velocity: Vec<Matrix> },
    Adam { m: Vec<Matrix>, v: Vec<Matrix>, t: u64 },
}

fn check_lengths(params: &[Matrix], grads: &[Matrix], buffers: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers {
        return Err(Error::ShapeMismatch(format!(
            "optimizer got {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            buffers
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `d = g + wd·p; v = μ·v + d; p -= lr·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn init(params: &[Matrix]) -> OptimizerState {
        OptimizerState::Sgd {
            velocity: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn step(&self, state: &mut OptimizerState, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        let OptimizerState::Sgd { velocity } = state else {
            return Err(Error::InvalidArgument("optimizer state is not SGD".into()));
        };
        check_lengths(params, grads, velocity.len())?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = self.weight_decay.mul_add(*pi, gi);
                *vi = self.momentum.mul_add(*vi, d);
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn init(params: &[Matrix]) -> OptimizerState {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState::Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&self, state: &mut OptimizerState, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        let OptimizerState::Adam { m, v, t } = state else {
            return Err(Error::InvalidArgument("optimizer state is not Adam".into()));
        };
        check_lengths(params, grads, m.len())?;
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            let buffers = mi.data_mut().iter_mut().zip(vi.data_mut());
            for ((pj, &gj), (mj, vj)) in p.data_mut().iter_mut().zip(g.data()).zip(buffers) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
