use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamGroup, ParamId, ParamStore};
use super::real::{lit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_net: f64,
    pub lr_grid: f64,
    /// Multiplier reached by the exponential schedule at the last step.
    pub decay_target: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_net: 5e-4, lr_grid: 5e-3, decay_target: 0.1 }
    }
}

impl AdamConfig {
    /// `lr_init · decay_target^(step / total_steps)`.
    pub fn learning_rate(&self, group: ParamGroup, step: u64, total_steps: u64) -> f64 {
        let init = match group {
            ParamGroup::Network => self.lr_net,
            ParamGroup::Grid => self.lr_grid,
        };
        if total_steps == 0 {
            return init;
        }
        init * self.decay_target.powf(step as f64 / total_steps as f64)
    }
}

/// Adam with bias correction over a fixed subset of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub total_steps: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>, ids: Vec<ParamId>, total_steps: u64) -> Self {
        let m = ids.iter().map(|&id| vec![T::zero(); params.get(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![T::zero(); params.get(id).len()]).collect();
        Self { config, step: 0, total_steps, ids, m, v }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update. The `t`-th call (1-based) uses the scheduled rate at step
    /// `t`, so the final call of a run uses exactly `decay_target · lr_init`.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let t = self.step;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let (ob1, ob2): (T, T) = (lit(1.0 - c.beta1), lit(1.0 - c.beta2));
        let eps: T = lit(c.eps);
        for (slot, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let group = params.get(id).group;
            let lr = c.learning_rate(group, t, self.total_steps);
            let step_size: T = lit(lr / bc1);
            let inv_bc2_sqrt: T = lit(1.0 / bc2.sqrt());
            let p = params.value_mut(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
    }

    /// Current learning rate of a group (the rate the next call would use).
    pub fn current_lr(&self, group: ParamGroup) -> f64 {
        self.config.learning_rate(group, self.step + 1, self.total_steps)
    }
}

/// Exponential moving average of parameters, used for evaluation weights.
#[derive(Debug, Clone)]
pub struct Ema<T> {
    pub decay: f64,
    ids: Vec<ParamId>,
    shadow: Vec<Vec<T>>,
}

impl<T: Real> Ema<T> {
    /// Shadow starts equal to the current parameter values.
    pub fn new(decay: f64, params: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let shadow = ids.iter().map(|&id| params.value(id).to_vec()).collect();
        Self { decay, ids, shadow }
    }

    /// Resumes from saved shadow buffers, one per id.
    pub fn with_shadow(decay: f64, params: &ParamStore<T>, ids: Vec<ParamId>, shadow: Vec<Vec<T>>) -> Self {
        assert_eq!(ids.len(), shadow.len(), "one shadow buffer per parameter");
        for (id, s) in ids.iter().zip(&shadow) {
            assert_eq!(params.get(*id).len(), s.len(), "shadow length must match parameter {}", params.get(*id).name);
        }
        Self { decay, ids, shadow }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn shadow(&self, id: ParamId) -> Option<&[T]> {
        self.ids.iter().position(|&i| i == id).map(|s| self.shadow[s].as_slice())
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`.
    pub fn update(&mut self, params: &ParamStore<T>) {
        let d: T = lit(self.decay);
        let od: T = lit(1.0 - self.decay);
        for (s, &id) in self.shadow.iter_mut().zip(&self.ids) {
            for (sv, &pv) in s.iter_mut().zip(params.value(id)) {
                *sv = d * *sv + od * pv;
            }
        }
    }

    /// Exchanges shadow and live values; calling twice restores the original.
    pub fn swap(&mut self, params: &mut ParamStore<T>) {
        for (s, &id) in self.shadow.iter_mut().zip(&self.ids) {
            s.as_mut_slice().swap_with_slice(params.value_mut(id));
        }
    }

    /// Writes the shadow values into `params`, leaving the shadow intact.
    pub fn apply(&self, params: &mut ParamStore<T>) {
        for (s, &id) in self.shadow.iter().zip(&self.ids) {
            params.value_mut(id).copy_from_slice(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>, group: ParamGroup) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let n = vals.len();
        let id = s.add("p", 1, n, group, vals);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = store(vec![1.0], ParamGroup::Grid);
        let mut adam = Adam::new(AdamConfig::default(), &s, vec![id], 0);
        let mut g = Grads::new();
        g.slot(id, 1)[0] = 1.0;
        adam.step(&mut s, &g);
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + eps)
        let delta = s.value(id)[0] - 1.0;
        assert!((delta + 0.005).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = store(vec![0.3, -2.0], ParamGroup::Network);
        let mut adam = Adam::new(AdamConfig::default(), &s, vec![id], 100);
        let mut g = Grads::new();
        g.slot(id, 2);
        for _ in 0..5 {
            adam.step(&mut s, &g);
        }
        assert_eq!(s.value(id), &[0.3, -2.0]);
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let c = AdamConfig::default();
        for total in [1u64, 7, 5000, 20000] {
            assert_eq!(c.learning_rate(ParamGroup::Network, 0, total), 5e-4);
            let last = c.learning_rate(ParamGroup::Grid, total, total);
            assert!((last - 0.1 * 5e-3).abs() < 1e-12);
        }
        let mid = c.learning_rate(ParamGroup::Network, 50, 100);
        assert!((mid - 5e-4 * 0.1f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn last_update_uses_final_rate() {
        let (s, id) = store(vec![0.0], ParamGroup::Network);
        let mut adam = Adam::new(AdamConfig::default(), &s, vec![id], 10);
        let mut s = s;
        let g = Grads::new();
        for _ in 0..9 {
            adam.step(&mut s, &g);
        }
        assert!((adam.current_lr(ParamGroup::Network) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn ema_recursion_and_degenerate_decay() {
        let (mut s, id) = store(vec![1.0], ParamGroup::Network);
        let mut ema = Ema::new(0.95, &s, vec![id]);
        s.value_mut(id)[0] = 0.0;
        ema.update(&s);
        assert!((ema.shadow(id).unwrap()[0] - 0.95).abs() < 1e-15);

        let mut ema0 = Ema::new(0.0, &s, vec![id]);
        for k in 0..4 {
            s.value_mut(id)[0] = k as f64 * 1.5;
            ema0.update(&s);
            assert_eq!(ema0.shadow(id).unwrap()[0], k as f64 * 1.5);
        }
    }

    #[test]
    fn ema_converges_to_constant_and_swap_round_trips() {
        let (mut s, id) = store(vec![10.0], ParamGroup::Network);
        let mut ema = Ema::new(0.95, &s, vec![id]);
        s.value_mut(id)[0] = 2.0;
        for _ in 0..1000 {
            ema.update(&s);
        }
        // |shadow − 2| = 8·0.95^1000
        assert!((ema.shadow(id).unwrap()[0] - 2.0).abs() < 1e-12);
        ema.swap(&mut s);
        assert!((s.value(id)[0] - 2.0).abs() < 1e-12);
        ema.swap(&mut s);
        assert_eq!(s.value(id)[0], 2.0);
    }
}
