use super::{NnError, ParamStore};

/// Adam optimizer state, aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable entry, consuming the
    /// accumulated gradients (they are zeroed afterwards).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        if !store.grads_populated() {
            return Err(NnError::GradsMissing);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let entry = store.entry_mut(idx);
            if !entry.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for k in 0..entry.value.len() {
                let g = entry.grad.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                entry.value.data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.version += 1;
        store.zero_grads();
        Ok(())
    }
}
