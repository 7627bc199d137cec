use super::bptt::Trainable;
use super::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per tensor, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<F: Real, M: Trainable<F>>(params: &M) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Bias-corrected Adam update of one tensor at 1-based `step`.
pub fn adam_update<F: Real>(param: &mut [F], grad: &[F], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, step: u64) {
    assert!(step >= 1, "Adam steps are 1-based");
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.as_f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = F::lit(p.as_f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

/// Advance the step counter and update every tensor of `params`.
pub fn adam_step<F: Real, M: Trainable<F>>(params: &mut M, grads: &M, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let step = state.step;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adam_update(p, g, m, v, cfg, step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = [1.0f64, -2.0];
        let mut m = [0.5, -0.5];
        let mut v = [0.25, 0.25];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg, 3);
        assert!((m[0] - 0.45).abs() < 1e-15 && (m[1] + 0.45).abs() < 1e-15);
        assert!((v[0] - 0.24975).abs() < 1e-15);
        let mut q = [1.0f64, -2.0];
        adam_update(&mut q, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], &cfg, 1);
        assert_eq!(q, [1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig::default();
        let g = [0.3f64, -7.0, 1e-3, -2.5];
        let mut p = [0.0f64; 4];
        adam_update(&mut p, &g, &mut [0.0; 4], &mut [0.0; 4], &cfg, 1);
        for (pi, gi) in p.iter().zip(&g) {
            assert!((pi + cfg.lr * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn updates_are_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = [0.1f32, 0.2, 0.3];
            let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
            for s in 1..=20 {
                let g = [p[0] - 1.0, p[1] * 3.0, -p[2]];
                adam_update(&mut p, &g, &mut m, &mut v, &cfg, s);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
