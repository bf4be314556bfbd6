use crate::error::{Error, Result};
use crate::tensor::store::{gradient_map, Bound, ParamStore};
use crate::tensor::tape::{Tape, Var};
use indexmap::IndexMap;

/// Per-parameter maximum relative error between analytic and central-difference
/// gradients.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_param: IndexMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

/// Check analytic gradients against central differences (f(x+h)-f(x-h))/2h
/// for every element of every trainable parameter.
///
/// `f` must build the scalar loss on the supplied tape from the supplied
/// binding and must be deterministic; two baseline evaluations that disagree
/// are reported as a contract error.
pub fn grad_check<F>(mut f: F, store: &mut ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &Bound) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check requires h > 0"));
    }

    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        tape.scalar(loss)
    };

    let base1 = eval(store, &mut f)?;
    let base2 = eval(store, &mut f)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::contract(format!(
            "non-deterministic objective: {base1} vs {base2}"
        )));
    }

    // analytic pass
    let analytic = {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = f(&mut tape, &bound)?;
        tape.backward(loss)?;
        gradient_map(&tape, store, &bound)
    };

    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut per_param = IndexMap::new();
    let mut max_err = 0.0f64;
    for name in names {
        let n_elems = store.get(&name)?.value.data.len();
        let mut worst = 0.0f64;
        for i in 0..n_elems {
            let orig = store.get(&name)?.value.data[i];
            store.get_mut(&name)?.value.data[i] = orig + h;
            let fp = eval(store, &mut f)?;
            store.get_mut(&name)?.value.data[i] = orig - h;
            let fm = eval(store, &mut f)?;
            store.get_mut(&name)?.value.data[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[&name].data[i], numeric);
            worst = worst.max(err);
        }
        max_err = max_err.max(worst);
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_err,
        tol,
    })
}
