//! Finite-difference verification of reverse-mode gradients.

use super::store::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// A deterministic scalar-valued function of the parameter store, recorded
/// fresh on each call.
pub trait LossFn {
    fn build(&mut self, tape: &mut Tape, store: &ParamStore) -> Result<Var>;
}

impl<F: FnMut(&mut Tape, &ParamStore) -> Result<Var>> LossFn for F {
    fn build(&mut self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        self(tape, store)
    }
}

fn eval_scalar(f: &mut impl LossFn, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f.build(&mut tape, store)?;
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::InvalidInput(format!(
            "loss function returned shape {:?}, expected a scalar",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn analytic_grads(f: &mut impl LossFn, store: &mut ParamStore) -> Result<Vec<(String, Vec<f64>)>> {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f.build(&mut tape, store)?;
    tape.backward(loss, store)?;
    Ok(store
        .iter()
        .map(|(name, _, grad)| (name.to_string(), grad.data().to_vec()))
        .collect())
}

fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(1.0)
}

fn check_entry(
    f: &mut impl LossFn,
    store: &mut ParamStore,
    name: &str,
    entry: usize,
    analytic: f64,
    h: f64,
) -> Result<f64> {
    let orig = store.get(name).unwrap().data()[entry];
    store.get_mut(name).unwrap().data_mut()[entry] = orig + h;
    let plus = eval_scalar(f, store)?;
    store.get_mut(name).unwrap().data_mut()[entry] = orig - h;
    let minus = eval_scalar(f, store)?;
    store.get_mut(name).unwrap().data_mut()[entry] = orig;
    let fd = (plus - minus) / (2.0 * h);
    Ok(relative_error(analytic, fd))
}

/// Max over every parameter entry of the relative error between the
/// reverse-mode gradient and a central finite difference with step `h`.
pub fn gradient_check(mut f: impl LossFn, store: &mut ParamStore, h: f64) -> Result<f64> {
    let grads = analytic_grads(&mut f, store)?;
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for (entry, &a) in grad.iter().enumerate() {
            worst = worst.max(check_entry(&mut f, store, name, entry, a, h)?);
        }
    }
    Ok(worst)
}

/// Like `gradient_check` but probes at most `entries_per_tensor` seeded
/// random entries of each parameter tensor; every tensor is still covered.
pub fn gradient_check_sampled(
    mut f: impl LossFn,
    store: &mut ParamStore,
    h: f64,
    entries_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let grads = analytic_grads(&mut f, store)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        let n = grad.len();
        let mut picks: Vec<usize> = if n <= entries_per_tensor {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < entries_per_tensor {
                set.insert(rng.gen_range(0..n));
            }
            set.into_iter().collect()
        };
        picks.sort_unstable();
        for entry in picks {
            worst = worst.max(check_entry(&mut f, store, name, entry, grad[entry], h)?);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::vector(vec![0.3, -1.2, 2.5]))
            .unwrap();
        // ½‖p‖²
        let err = gradient_check(
            |tape: &mut Tape, store: &ParamStore| {
                let p = tape.param(store, "p")?;
                let sq = tape.mul(p, p)?;
                let s = tape.sum(sq);
                Ok(tape.mul_scalar(s, 0.5))
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
        // Analytic gradient is p itself.
        assert_eq!(store.grad("p").unwrap().data(), &[0.3, -1.2, 2.5]);
    }

    #[test]
    fn relu_kinked_function_away_from_zero() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::vector(vec![-1.0, 2.0, 0.7, -0.4]))
            .unwrap();
        let err = gradient_check(
            |tape: &mut Tape, store: &ParamStore| {
                let p = tape.param(store, "p")?;
                let r = tape.relu(p);
                Ok(tape.sum(r))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
        assert_eq!(store.grad("p").unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn sampled_check_covers_every_tensor() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::matrix(4, 4, (0..16).map(|i| 0.1 * i as f64 - 0.7).collect()).unwrap())
            .unwrap();
        store.insert("b", Tensor::vector(vec![0.2; 4])).unwrap();
        let err = gradient_check_sampled(
            |tape: &mut Tape, store: &ParamStore| {
                let w = tape.param(store, "w")?;
                let b = tape.param(store, "b")?;
                let x = tape.constant(Tensor::matrix(2, 4, (0..8).map(|i| i as f64 * 0.3).collect()).unwrap());
                let y = tape.matmul(x, w)?;
                let y = tape.add_row_vec(y, b)?;
                let y = tape.softplus(y);
                tape.mean(y)
            },
            &mut store,
            1e-5,
            5,
            99,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
