//! Central finite-difference gradients for validating backward passes.
//!
//! Meant for tests on small f64 stores; cost is two loss evaluations per
//! parameter element.

use super::params::{Gradients, ParamStore};
use super::tensor::{Element, Tensor};

/// Perturbs every element of every trainable parameter by `+-h` and returns
/// the central-difference gradient of `loss`.
pub fn finite_diff_gradients<T: Element>(
    store: &ParamStore<T>,
    h: f64,
    loss: impl Fn(&ParamStore<T>) -> T,
) -> Gradients<T> {
    let mut work = store.clone();
    let mut entries = Vec::new();
    let names: Vec<(String, bool)> =
        store.iter().map(|(n, _, tr)| (n.to_string(), tr)).collect();
    for (name, trainable) in names {
        if !trainable {
            continue;
        }
        let n = store.get(&name).numel();
        let mut grad = Tensor::zeros(store.get(&name).shape());
        for i in 0..n {
            let orig = work.get(&name).data()[i];
            work.get_mut(&name).data_mut()[i] = T::from_f64(orig.to_f64() + h);
            let plus = loss(&work).to_f64();
            work.get_mut(&name).data_mut()[i] = T::from_f64(orig.to_f64() - h);
            let minus = loss(&work).to_f64();
            work.get_mut(&name).data_mut()[i] = orig;
            grad.data_mut()[i] = T::from_f64((plus - minus) / (2.0 * h));
        }
        entries.push((name, grad));
    }
    Gradients::from_entries(entries)
}

/// `|a - b| / max(|a|, |b|, 0.01)`. The floor keeps noise-level gradients
/// from registering as large relative errors.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

pub fn max_rel_error<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing gradients of different shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_error(x.to_f64(), y.to_f64()))
        .fold(0.0, f64::max)
}

/// Worst `rel_error` across every parameter both collections know about.
/// Panics if the name sets differ.
pub fn max_grad_error<T: Element>(a: &Gradients<T>, b: &Gradients<T>) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient collections cover different parameters");
    let mut worst = 0.0f64;
    for (name, ga) in a.iter() {
        worst = worst.max(max_rel_error(ga, b.get(name)));
    }
    worst
}
