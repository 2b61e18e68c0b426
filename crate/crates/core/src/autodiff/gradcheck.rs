use super::{ParamId, ParamStore, Tape, Var};

/// Compares reverse-mode gradients against central differences.
///
/// `f` must build a scalar on the tape it is given, reading parameters from
/// the store it is given. Returns the maximum over checked coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
///
/// `max_coords_per_param` bounds the work on large tensors by checking an
/// evenly strided subset of coordinates; `None` checks every coordinate.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    max_coords_per_param: Option<usize>,
    f: F,
) -> f64
where
    F: Fn(&Tape, &ParamStore) -> Var,
{
    let tape = Tape::new();
    let loss = f(&tape, store);
    let l0 = tape.value(loss).item();
    assert!(l0.is_finite(), "grad_check: non-finite objective {l0}");
    store.zero_grad();
    tape.backward(loss, store);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| store.get(id).grad.clone())
        .collect();
    store.zero_grad();

    let eval = |store: &ParamStore| -> f64 {
        let t = Tape::inference();
        let l = f(&t, store);
        let v = t.value(l).item();
        assert!(v.is_finite(), "grad_check: non-finite objective {v}");
        v
    };

    let mut worst: f64 = 0.0;
    for (pi, &id) in params.iter().enumerate() {
        let n = store.get(id).value.len();
        let stride = match max_coords_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + step;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig - step;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi][c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}
