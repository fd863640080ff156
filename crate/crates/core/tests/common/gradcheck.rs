//! Central finite-difference gradient checks in f64.

use mixencoder::numcore::{ParamStore, Session};
use mixencoder::{Graph, Result, Var};

pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares backward-pass gradients of every parameter against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`. Relative error uses
/// `max(|analytic|, |numeric|, floor)` as the denominator.
pub fn check_params<F>(store: &ParamStore<f64>, loss: F, eps: f64, floor: f64) -> GradReport
where
    F: for<'g, 'p> Fn(&Session<'g, 'p, f64>) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let session = Session::new(&graph, store);
    let l = loss(&session).expect("forward");
    graph.backward(l).expect("backward");
    let analytic = session.grads();

    let eval = |s: &ParamStore<f64>| -> f64 {
        let g = Graph::no_grad();
        let sess = Session::new(&g, s);
        let v = loss(&sess).expect("forward").value().item();
        v
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{}[{i}]: analytic {a:.6e} numeric {numeric:.6e}",
                    store.name(id)
                );
            }
        }
    }
    report
}
