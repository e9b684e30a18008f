use super::ParamStore;

/// Adam hyperparameters. `l2` is folded into the gradient as `l2·value`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-5,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then zero the grads.
pub fn adam_step(params: &mut ParamStore, cfg: &AdamConfig) {
    if params.is_empty() {
        return;
    }
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in params.iter_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..value.len() {
            let g = grad[i] + cfg.l2 * value[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            grad[i] = 0.0;
        }
    }
}
