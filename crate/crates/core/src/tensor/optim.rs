use super::{ParamStore, Real};

/// One SGD update of a single tensor:
/// `v <- momentum * v + (grad + weight_decay * w)`, `w <- w - lr * v`.
pub fn sgd_step<T: Real>(
    weights: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: T,
    weight_decay: T,
    momentum: T,
) {
    debug_assert_eq!(weights.len(), grads.len());
    debug_assert_eq!(weights.len(), velocity.len());
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
}

/// SGD with momentum and L2 weight decay, holding
/// one velocity buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store
                .params()
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect(),
        }
    }

    /// `grads[i]` belongs to parameter `i`; `None` is treated as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: T) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        for ((p, g), v) in store
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.velocity.iter_mut())
        {
            match g {
                Some(g) => sgd_step(p.value.data_mut(), g, v, lr, self.weight_decay, self.momentum),
                None => {
                    let zeros = vec![T::zero(); v.len()];
                    sgd_step(
                        p.value.data_mut(),
                        &zeros,
                        v,
                        lr,
                        self.weight_decay,
                        self.momentum,
                    )
                }
            }
        }
    }
}
