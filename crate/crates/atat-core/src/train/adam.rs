//! Adam over the flat parameter arena. Moments always accumulate; the
//! freeze multiplier scales only the applied step, so a frozen group's
//! tensors are bit-stable while its gradients keep shaping the moments.

use crate::model::{GradStore, ParamStore, Scalar};

use super::ScheduleConfig;

#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    /// Create optimizer state sized to the store. Must be created after any
    /// vocabulary growth; the state is indexed by flat offset.
    pub fn new(params: &ParamStore<F>) -> Self {
        Self { m: vec![F::zero(); params.total_params()], v: vec![F::zero(); params.total_params()], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`. Each parameter's step is scaled
    /// by its effective multiplier (group multiplier, or 1.0 for newly
    /// grown embedding rows).
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradStore<F>, lr: f64, cfg: &ScheduleConfig) {
        assert_eq!(self.m.len(), params.total_params(), "optimizer state out of date");
        self.t += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let eps = F::from_f64(cfg.adam_eps);
        let bc1 = F::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - cfg.beta2.powi(self.t as i32));

        let metas: Vec<(usize, usize)> = params
            .layout()
            .metas()
            .iter()
            .map(|m| (m.offset, m.len()))
            .collect();
        for (tensor_idx, (offset, len)) in metas.into_iter().enumerate() {
            for within in 0..len {
                let i = offset + within;
                let g = grads.data()[i];
                self.m[i] = b1 * self.m[i] + (one - b1) * g;
                self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
                let mult = params.effective_multiplier(tensor_idx, within);
                if mult == 0.0 {
                    continue;
                }
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                let step = F::from_f64(lr * mult) * m_hat / (v_hat.sqrt() + eps);
                params.data_mut()[i] = params.data_mut()[i] - step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamGroup, ParamStore};

    fn store_with_one_tensor() -> ParamStore<f64> {
        use crate::model::{Init, StoreBuilder};
        let mut b = StoreBuilder::new();
        b.tensor("w", ParamGroup::Decoder, &[4, 4], Init::GlorotUniform { fan_in: 4, fan_out: 4 });
        b.finish(3)
    }

    #[test]
    fn multiplier_composes_into_the_step_not_the_moments() {
        let cfg = ScheduleConfig::desk();
        // Store A: multiplier 0.5, lr 0.01. Store B: multiplier 1.0, lr 0.005.
        let mut a = store_with_one_tensor();
        let mut b = a.clone();
        a.set_multiplier(ParamGroup::Decoder, 0.5);
        let mut ga = a.zero_grads();
        ga.slice_mut(a.layout().id_by_name("w").unwrap()).fill(0.3);
        let gb = ga.clone();

        let mut oa = AdamState::new(&a);
        let mut ob = AdamState::new(&b);
        for _ in 0..5 {
            oa.step(&mut a, &ga, 0.01, &cfg);
            ob.step(&mut b, &gb, 0.005, &cfg);
        }
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15, "{x} vs {y}");
        }
    }

    #[test]
    fn frozen_groups_are_bit_stable() {
        let cfg = ScheduleConfig::desk();
        let mut s = store_with_one_tensor();
        s.set_multiplier(ParamGroup::Decoder, 0.0);
        let before = s.data().to_vec();
        let mut g = s.zero_grads();
        g.slice_mut(s.layout().id_by_name("w").unwrap()).fill(1.0);
        let mut opt = AdamState::new(&s);
        for _ in 0..3 {
            opt.step(&mut s, &g, 0.01, &cfg);
        }
        assert!(s.data().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));

        // Unfreezing later still works (moments were accumulating).
        s.set_multiplier(ParamGroup::Decoder, 1.0);
        opt.step(&mut s, &g, 0.01, &cfg);
        assert!(s.data().iter().zip(&before).any(|(a, b)| a != b));
    }
}
