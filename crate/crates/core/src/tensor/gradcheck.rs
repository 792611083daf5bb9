use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Max over elements of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// for the scalar function `f` at `x`, using central differences.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once; returns the worst error.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new().with_finite_checks(false);
        let vs: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new().with_finite_checks(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
