use crate::nn::layers::Trainable;

/// SGD with classical momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Trainable) {
        let (lr, mu) = (self.lr, self.momentum);
        let state = &mut self.velocity;
        let mut slot = 0;
        model.visit_params(&mut |p, g| {
            if state.len() == slot {
                state.push(vec![0.0; p.len()]);
            }
            let v = &mut state[slot];
            for ((p, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
            slot += 1;
        });
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Trainable) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let (first, second) = (&mut self.first, &mut self.second);
        let mut slot = 0;
        model.visit_params(&mut |p, g| {
            if first.len() == slot {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[slot], &mut second[slot]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
            slot += 1;
        });
    }
}
