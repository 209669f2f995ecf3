use std::collections::BTreeMap;

use super::{Graph, NumericsError, Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub components: usize,
}

/// Checks every component of every parameter.
///
/// `build` receives a fresh graph and the parameter nodes (registered as
/// trainable) and returns the scalar loss. The relative error of a component
/// is `|a - n| / max(|a|, |n|, 1e-8)` with `n = (f(p+eps) - f(p-eps)) / 2eps`.
pub fn check_gradients<E, F>(
    mut build: F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var, E>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumericsError::BadStep(eps).into());
    }
    let mut eval = |values: &BTreeMap<String, Tensor>| -> Result<(Graph, Var), E> {
        let mut g = Graph::new();
        let vars: BTreeMap<String, Var> = values
            .iter()
            .map(|(k, t)| (k.clone(), g.param(k, t.clone())))
            .collect();
        let loss = build(&mut g, &vars)?;
        let f = g.scalar(loss);
        if !f.is_finite() {
            return Err(NumericsError::NonFinite(f).into());
        }
        Ok((g, loss))
    };

    let (g, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, components: 0 };
    let mut probe = params.clone();
    for (name, tensor) in params {
        let analytic = grads.param(name).expect("registered parameter");
        for idx in 0..tensor.numel() {
            let orig = tensor.data()[idx];
            probe.get_mut(name).unwrap().data_mut()[idx] = orig + eps;
            let (gp, lp) = eval(&probe)?;
            let fp = gp.scalar(lp);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig - eps;
            let (gm, lm) = eval(&probe)?;
            let fm = gm.scalar(lm);
            probe.get_mut(name).unwrap().data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.components += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::scalar(3.0));
        let mut analytic = 0.0;
        let report = check_gradients::<NumericsError, _>(
            |g, v| {
                let p = v["p"];
                let sq = g.mul(p, p)?;
                Ok(g.sum(sq))
            },
            &params,
            1e-5,
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.param("p", Tensor::scalar(3.0));
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq);
        analytic += g.backward(l).unwrap().param("p").unwrap().data()[0];
        assert_eq!(analytic, 6.0);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.components, 1);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), Tensor::scalar(0.0));
        let r = check_gradients::<NumericsError, _>(|g, v| Ok(g.sum(v["p"])), &params, 0.0);
        assert_eq!(r.unwrap_err(), NumericsError::BadStep(0.0));
        let r = check_gradients::<NumericsError, _>(
            |g, v| {
                let l = g.log(v["p"]);
                Ok(g.sum(l))
            },
            &params,
            1e-5,
        );
        assert!(matches!(r.unwrap_err(), NumericsError::NonFinite(_)));
    }
}
