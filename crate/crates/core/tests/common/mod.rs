#![allow(dead_code)]

pub mod grad_cases;
pub mod props;

use uinav_core::nn::{NodeId, ParamStore, Tape};

/// Central finite differences against the tape's analytic gradients. Checks
/// up to `per_param` evenly spaced entries of every parameter. An entry
/// passes when `|a - n| <= tol * max(|a|, |n|) + 1e-9`.
pub fn gradcheck<F>(ps: &ParamStore<f64>, build: F, tol: f64, per_param: usize) -> Result<usize, String>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> NodeId,
{
    let h = 1e-5;
    let grads = {
        let mut t = Tape::new(ps);
        let loss = build(&mut t);
        t.backward(loss).map_err(|e| e.to_string())?
    };
    let eval = |p: &ParamStore<f64>| {
        let mut t = Tape::new(p);
        let loss = build(&mut t);
        t.scalar(loss)
    };
    let mut checked = 0;
    let mut work = ps.clone();
    for (pi, (id, name, tensor)) in ps.iter().enumerate() {
        let n = tensor.len();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let orig = tensor.data[j];
            work.get_mut(id).data[j] = orig + h;
            let up = eval(&work);
            work.get_mut(id).data[j] = orig - h;
            let down = eval(&work);
            work.get_mut(id).data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi].data[j];
            let bound = tol * analytic.abs().max(numeric.abs()) + 1e-9;
            if (analytic - numeric).abs() > bound {
                return Err(format!("{name}[{j}]: analytic {analytic:e} numeric {numeric:e}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}
