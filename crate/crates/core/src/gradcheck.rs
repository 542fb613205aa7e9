//! Central finite differences, the reference every tape gradient is checked
//! against.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Numerical partial derivatives of `f` with respect to selected elements of
/// `inputs[which]`.
pub fn central_difference(
    inputs: &[Tensor<f64>],
    which: usize,
    elements: &[usize],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<f64> {
    let mut work = inputs.to_vec();
    elements
        .iter()
        .map(|&e| {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + h;
            let up = f(&work);
            work[which].data_mut()[e] = orig - h;
            let down = f(&work);
            work[which].data_mut()[e] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Up to `limit` element indices of a tensor with `numel` elements.
pub fn pick_elements(numel: usize, limit: usize, seed: u64) -> Vec<usize> {
    if numel <= limit {
        return (0..numel).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, numel, limit).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `build` with central differences for every
/// input. `build` must record a scalar loss from the given input vars.
pub fn check_tape(
    inputs: &[Tensor<f64>],
    h: f64,
    limit: usize,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &vs).expect("forward succeeded once already");
        t.value(l).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let elements = pick_elements(inputs[i].numel(), limit, i as u64);
        let zeros = vec![0.0; inputs[i].numel()];
        let analytic_all = grads.get(*v).unwrap_or(&zeros);
        let analytic: Vec<f64> = elements.iter().map(|&e| analytic_all[e]).collect();
        let numeric = central_difference(inputs, i, &elements, h, eval);
        per_input.push(max_relative_error(&analytic, &numeric, 1e-6));
        checked += elements.len();
    }
    Ok(GradCheckReport { per_input, checked })
}
