//! Central finite-difference verification of taped gradients.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{RngStreams, StreamRng};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error over checked coordinates)`.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic gradients from `loss_fn` with central differences.
///
/// `loss_fn` receives the parameters and a copy of `streams`; every
/// evaluation gets the same copy, so random draws are replayed. The
/// function is evaluated twice at the base point first and the check is
/// rejected if the two values differ. At most `max_coords` coordinates per
/// parameter are sampled (using `pick`), all of them if the parameter is
/// smaller. The error of a coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    streams: RngStreams,
    eps: f64,
    max_coords: usize,
    pick: &mut StreamRng,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, RngStreams) -> Result<(Tape, Var)>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let base = scalar_loss(&mut loss_fn, store, streams)?;
    let again = scalar_loss(&mut loss_fn, store, streams)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic((base - again).abs()));
    }

    let mut analytic = store.clone();
    analytic.zero_grads();
    let (tape, loss) = loss_fn(&analytic, streams)?;
    tape.backward_into(loss, &mut analytic)?;
    let mut eval = |s: &ParamStore| scalar_loss(&mut loss_fn, s, streams);

    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| pick.gen_range(0..n)).collect()
        };
        let grad = analytic.get(id).grad.as_ref().map(|g| g.values().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut local = 0.0f64;
        for c in coords {
            let orig = store.value(id).values()[c];
            work.get_mut(id).value.values_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.values_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.values_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad[c] - numeric).abs() / numeric.abs().max(1.0);
            local = local.max(err);
            checked += 1;
        }
        worst = worst.max(local);
        per_param.push((store.name(id).to_string(), local));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error: worst,
        coords_checked: checked,
    })
}

fn scalar_loss<F>(loss_fn: &mut F, store: &ParamStore, streams: RngStreams) -> Result<f64>
where
    F: FnMut(&ParamStore, RngStreams) -> Result<(Tape, Var)>,
{
    let (tape, loss) = loss_fn(store, streams)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(s: &ParamStore, _: RngStreams) -> Result<(Tape, Var)> {
        let mut t = Tape::new();
        let x = t.param(s, s.id("x").unwrap());
        let a = t.constant(Tensor::new(1, 3, vec![1.5, -2.0, 0.25]).unwrap());
        let xa = t.mul(x, a)?;
        let sq = t.mul(xa, x)?;
        let l = t.sum(sq)?;
        Ok((t, l))
    }

    #[test]
    fn quadratic_is_exact_across_eps_range() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(1, 3, vec![0.3, -1.1, 2.0]).unwrap()).unwrap();
        let mut pick = RngStreams::new(0).stream("pick");
        for eps in [1e-6, 1e-5, 1e-4] {
            let r = finite_difference_check(&s, RngStreams::new(1), eps, 10, &mut pick, quadratic).unwrap();
            assert!(r.max_rel_error < 1e-8, "eps {eps}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn unfrozen_dropout_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::filled(1, 64, 1.0)).unwrap();
        let mut leaked = RngStreams::new(99).stream("dropout");
        let mut pick = RngStreams::new(0).stream("pick");
        let r = finite_difference_check(&s, RngStreams::new(1), 1e-5, 4, &mut pick, |s, _| {
            let mut t = Tape::new();
            let x = t.param(s, s.id("x").unwrap());
            let d = t.dropout(x, 0.5, Some(&mut leaked))?;
            let l = t.sum(d)?;
            Ok((t, l))
        });
        assert!(matches!(r, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn frozen_dropout_passes() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(1, 8, (0..8).map(|v| v as f64 * 0.1).collect()).unwrap()).unwrap();
        let mut pick = RngStreams::new(0).stream("pick");
        let r = finite_difference_check(&s, RngStreams::new(1), 1e-5, 8, &mut pick, |s, streams| {
            let mut rng = streams.stream("dropout");
            let mut t = Tape::new();
            let x = t.param(s, s.id("x").unwrap());
            let sq = t.mul(x, x)?;
            let d = t.dropout(sq, 0.5, Some(&mut rng))?;
            let l = t.sum(d)?;
            Ok((t, l))
        })
        .unwrap();
        assert!(r.passes(1e-6));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let s = ParamStore::new();
        let mut pick = RngStreams::new(0).stream("pick");
        assert!(finite_difference_check(&s, RngStreams::new(1), 0.0, 1, &mut pick, quadratic).is_err());
    }
}
