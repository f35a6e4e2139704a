use super::ParamStore;

/// SGD with heavy-ball momentum: `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Applies one update to every parameter in `store`, then zeroes its gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        }
        for (t, v) in store.tensors_mut().zip(&mut self.velocity) {
            if t.grad.len() != t.data.len() {
                continue;
            }
            for ((p, g), vel) in t.data.iter_mut().zip(&t.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + *g;
                *p -= self.lr * *vel;
            }
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::full(&[1], value));
        s
    }

    #[test]
    fn zero_grad_zero_velocity_is_noop() {
        let mut s = single(0.25);
        Sgd::new(0.1, 0.9).step(&mut s);
        assert_eq!(s.iter().next().unwrap().2.data, vec![0.25]);
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0);
        s.tensors_mut().next().unwrap().grad = vec![1.0];
        Sgd::new(0.1, 0.0).step(&mut s);
        assert!((s.iter().next().unwrap().2.data[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let mut s = single(1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        let mut prev = 1.0f32;
        let mut drops = Vec::new();
        for _ in 0..2 {
            s.tensors_mut().next().unwrap().grad = vec![1.0];
            opt.step(&mut s);
            let now = s.iter().next().unwrap().2.data[0];
            drops.push(prev - now);
            prev = now;
        }
        assert!((drops[0] - 0.1).abs() < 1e-6);
        assert!((drops[1] - 0.19).abs() < 1e-6);
        // gradients are cleared after each step
        assert_eq!(s.iter().next().unwrap().2.grad, vec![0.0]);
    }
}
