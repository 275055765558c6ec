/// Rectified Adam. Falls back to bias-corrected momentum SGD while the
/// variance estimate is still unreliable (rho_t <= 5).
#[derive(Debug, Clone)]
pub struct RAdam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RAdam {
    pub fn new(n_params: usize) -> Self {
        Self::with_betas(n_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t as f64 * b2.powi(t) / bias2;
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt()
        });
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            match rect {
                Some(r) => {
                    let adaptive = bias2.sqrt() / (v.sqrt() + self.eps);
                    *p -= lr * m_hat * r * adaptive;
                }
                None => *p -= lr * m_hat,
            }
        }
    }
}
