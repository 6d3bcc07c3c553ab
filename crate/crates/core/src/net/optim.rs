use serde::{Deserialize, Serialize};

use super::{NetError, Tensor};

/// Plain gradient step `p ← p − lr·g` on every tensor.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<(), NetError> {
    if params.len() != grads.len() {
        return Err(NetError::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NetError::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay. With both set to zero
/// every step is exactly [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        Sgd {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. `lr_mult[i]` scales the rate for tensor `i`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
        lr_mult: &[f64],
    ) -> Result<(), NetError> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(NetError::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        let SgdConfig { momentum, weight_decay } = self.config;
        if momentum == 0.0 && weight_decay == 0.0 && lr_mult.iter().all(|&m| m == 1.0) {
            return sgd_step(params, grads, lr);
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let rate = lr * lr_mult.get(i).copied().unwrap_or(1.0);
            let v = &mut self.velocity[i];
            if v.shape() != p.shape() || g.shape() != p.shape() {
                return Err(NetError::Shape(format!(
                    "parameter {:?}, gradient {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + rate * (gv + weight_decay * *pv);
                *pv -= *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Tensor::filled(&[1], 1.0);
        sgd_step(&mut [&mut p], &[Tensor::filled(&[1], 1.0)], 0.1).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[1])], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn steps_compose_linearly() {
        let g = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut a = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        sgd_step(&mut [&mut a], std::slice::from_ref(&g), 0.25).unwrap();
        sgd_step(&mut [&mut a], std::slice::from_ref(&g), 0.25).unwrap();
        sgd_step(&mut [&mut b], &[g], 0.5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_free_optimizer_matches_plain_step() {
        let g = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
        let mut a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        let mut opt = Sgd::new(
            SgdConfig {
                momentum: 0.0,
                weight_decay: 0.0,
            },
            &[&a],
        );
        opt.step(&mut [&mut a], std::slice::from_ref(&g), 0.1, &[1.0]).unwrap();
        sgd_step(&mut [&mut b], &[g], 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(sgd_step(&mut [&mut p], &[], 0.1).is_err());
    }
}
