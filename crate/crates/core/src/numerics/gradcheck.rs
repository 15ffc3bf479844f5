use super::params::{ParameterStore, Session};
use super::tape::Var;
use crate::error::{CalecError, Result};
use crate::parallel::Execution;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `loss` against central differences over
/// every coordinate of every non-frozen parameter.
pub fn grad_check<F>(store: &ParameterStore, epsilon: f64, exec: Execution, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var> + Sync + Send,
{
    if epsilon <= 0.0 {
        return Err(CalecError::Config("grad_check epsilon must be positive".into()));
    }
    let mut sess = Session::new(store);
    let out = loss(&mut sess)?;
    let value = sess.value(out).item();
    if !value.is_finite() {
        return Err(CalecError::Numeric("loss is not finite".into()));
    }
    let grads = sess.gradients(out);
    drop(sess);

    let names: Vec<String> =
        store.names().filter(|n| !store.is_frozen(n)).map(str::to_string).collect();
    let per_param = exec.map(&names, |name| -> Result<(f64, usize, usize)> {
        let mut local = store.clone();
        let n = local.get(name)?.len();
        let mut worst = (0.0f64, 0usize);
        for i in 0..n {
            let orig = local.get(name)?.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                local.get_mut(name)?.data_mut()[i] = x;
                let mut s = Session::new(&local);
                let v = loss(&mut s)?;
                let y = s.value(v).item();
                if y.is_finite() {
                    Ok(y)
                } else {
                    Err(CalecError::Numeric(format!("loss not finite perturbing {name}[{i}]")))
                }
            };
            let plus = eval(orig + epsilon)?;
            let minus = eval(orig - epsilon)?;
            local.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let e = relative_error(analytic, numeric);
            if e > worst.0 {
                worst = (e, i);
            }
        }
        Ok((worst.0, worst.1, n))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (name, r) in names.iter().zip(per_param) {
        let (e, i, n) = r?;
        report.coordinates += n;
        if e > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            if e >= report.max_rel_error {
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
