use std::collections::BTreeMap;

use ndarray::{ArrayD, ScalarOperand, Zip};
use num_traits::Float;

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<A> {
    pub lr: A,
    pub beta1: A,
    pub beta2: A,
    pub eps: A,
    t: i32,
    m: BTreeMap<String, ArrayD<A>>,
    v: BTreeMap<String, ArrayD<A>>,
}

impl<A: Float + ScalarOperand + 'static> Adam<A> {
    pub fn new(lr: A) -> Self {
        Adam {
            lr,
            beta1: A::from(0.9).unwrap(),
            beta2: A::from(0.999).unwrap(),
            eps: A::from(1e-8).unwrap(),
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that has a gradient; others are untouched.
    pub fn step(&mut self, params: &mut BTreeMap<String, ArrayD<A>>, grads: &BTreeMap<String, ArrayD<A>>) {
        self.t += 1;
        let one = A::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}
