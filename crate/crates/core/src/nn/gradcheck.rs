//! Central finite-difference gradient checking.

use super::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Entry with the largest error: parameter name, flat index, analytic
    /// and numeric gradient.
    pub worst: Option<WorstEntry>,
    pub entries_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic and central-difference gradients of `f` over every
/// trainable scalar in `store`.
///
/// `f` must evaluate the scalar objective at the store's current values and
/// accumulate its analytic gradient into the store's gradient slots. It is
/// called once for the analytic gradient and twice per trainable scalar.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>) -> Result<T>,
{
    grad_check_with_step(store, f, GRAD_CHECK_STEP)
}

pub fn grad_check_with_step<T, F>(store: &mut ParamStore<T>, mut f: F, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>) -> Result<T>,
{
    let mut eval = |store: &mut ParamStore<T>| -> Result<f64> {
        let v = f(store)?.to_f64_lossless();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    store.zero_grads();
    eval(store)?;
    let ids = store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g.to_f64_lossless()).collect())
        .collect();

    let h = T::of(step);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (k, &a) in grads.iter().enumerate() {
            let orig = store.param(id).value.data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some(WorstEntry {
                    name: store.param(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn sum_of_squares(store: &mut ParamStore<f64>) -> Result<f64> {
        let mut total = 0.0;
        for id in store.trainable_ids() {
            let v = store.param(id).value.clone();
            total += v.data().iter().map(|x| x * x).sum::<f64>();
            for (g, x) in store.grad_mut(id).data_mut().iter_mut().zip(v.data()) {
                *g += 2.0 * x;
            }
        }
        Ok(total)
    }

    #[test]
    fn recovers_closed_form_gradient() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = RngState::new(3);
        s.add("a", Tensor::rand_normal(&mut rng, &[3, 2], 0.0, 1.0).unwrap(), true).unwrap();
        s.add("b", Tensor::rand_normal(&mut rng, &[4], 0.0, 1.0).unwrap(), true).unwrap();
        s.add("stat", Tensor::zeros(&[2]), false).unwrap();
        let r = grad_check(&mut s, sum_of_squares).unwrap();
        assert_eq!(r.entries_checked, 10);
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::full(&[2], 1.0), true).unwrap();
        let r = grad_check(&mut s, |_| Ok(4.0)).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::full(&[2], 1.5), true).unwrap();
        let r = grad_check(&mut s, |st| {
            let v = sum_of_squares(st)?;
            st.grad_mut(st.id("a").unwrap()).data_mut()[1] *= 1.01;
            Ok(v)
        })
        .unwrap();
        assert!(r.max_relative_error > 1e-3);
        let w = r.worst.unwrap();
        assert_eq!((w.name.as_str(), w.index), ("a", 1));
    }

    #[test]
    fn non_finite_objective_is_error() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::full(&[1], 1.0), true).unwrap();
        assert!(matches!(grad_check(&mut s, |_| Ok(f64::NAN)), Err(Error::Numeric(_))));
    }
}
