use super::param::{ParamStore, Session};
use super::tape::{Tape, TensorId};

/// Relative error between analytic and central-difference gradients:
/// max over coordinates of |a - n| / max(|a|, |n|, 1e-6). The floor makes
/// the comparison absolute for near-zero gradients, where the central
/// difference itself carries O(eps^2) truncation plus forward rounding
/// noise and a pure ratio would measure only that noise.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Check the analytic gradient of a scalar-valued map against central
/// differences. `f` receives a fresh tape and one leaf per input and must
/// return a scalar tensor. Runs at f64; returns the max relative error over
/// all input coordinates.
pub fn gradcheck<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], epsilon: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let eval = |datas: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), data)| tape.leaf(shape, data.clone(), false))
            .collect();
        let loss = f(&mut tape, &ids);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck requires a scalar-valued map");
        tape.value(loss)[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(shape, data)| tape.leaf(shape, data.clone(), true))
        .collect();
    let loss = f(&mut tape, &ids);
    assert_eq!(tape.value(loss).len(), 1, "gradcheck requires a scalar-valued map");
    tape.backward(loss);
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| tape.grad(id)).collect();

    // Central differences.
    let mut datas: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..datas.len() {
        for j in 0..datas[i].len() {
            let orig = datas[i][j];
            datas[i][j] = orig + epsilon;
            let fp = eval(&datas);
            datas[i][j] = orig - epsilon;
            let fm = eval(&datas);
            datas[i][j] = orig;
            numeric.push((fp - fm) / (2.0 * epsilon));
        }
    }
    max_rel_error(&analytic, &numeric)
}

/// Gradcheck over every trainable parameter of a model pipeline. `f` builds
/// the scalar loss from a parameter store via a fresh session.
pub fn gradcheck_params<F>(f: F, store: &ParamStore<f64>, epsilon: f64) -> f64
where
    F: Fn(&ParamStore<f64>, &mut Session<f64>) -> TensorId,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut session = Session::new();
        let loss = f(s, &mut session);
        session.tape.value(loss)[0]
    };

    let mut session = Session::new();
    let loss = f(store, &mut session);
    assert_eq!(session.tape.value(loss).len(), 1, "gradcheck requires a scalar loss");
    session.tape.backward(loss);

    let mut worst: f64 = 0.0;
    let mut perturbed = store.clone();
    for (pi, p) in store.entries.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let analytic = session.param_grad(store, super::param::ParamId(pi));
        for j in 0..p.data.len() {
            let orig = p.data[j];
            perturbed.entries[pi].data[j] = orig + epsilon;
            let fp = eval(&perturbed);
            perturbed.entries[pi].data[j] = orig - epsilon;
            let fm = eval(&perturbed);
            perturbed.entries[pi].data[j] = orig;
            let n = (fp - fm) / (2.0 * epsilon);
            let a = analytic[j];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
