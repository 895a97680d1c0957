use super::{Graph, NodeId, NumericsError, ParamId, ParamSet, Result, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the backward gradient of a scalar function of one tensor with
/// central differences, returning the max relative error over all elements.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnOnce(&mut Graph<f64>, NodeId) -> NodeId,
{
    let mut params = ParamSet::new();
    let x = params.add("x", point.clone());
    let report = grad_check_params(
        |g, ps| {
            let xn = g.param(ps, x);
            Ok(f(g, xn))
        },
        &params,
        epsilon,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Gradient check over a parameter set. The graph is built once and replayed
/// at every perturbed point; `coords` restricts the check to chosen
/// `(parameter, flat index)` pairs (all coordinates when `None`).
pub fn grad_check_params<F>(
    build: F,
    params: &ParamSet<f64>,
    epsilon: f64,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<GradCheckReport>
where
    F: FnOnce(&mut Graph<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, params)?;
    grad_check_graph(graph, loss, params, epsilon, coords)
}

/// Gradient check of `loss` in an already declared graph over `params`.
pub fn grad_check_graph(
    mut graph: Graph<f64>,
    loss: NodeId,
    params: &ParamSet<f64>,
    epsilon: f64,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(NumericsError::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    graph.forward(params)?;
    let analytic = graph.backward(loss, params)?;

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params.ids().flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i))).collect();
            &all
        }
    };

    let mut work = params.clone();
    let mut eval = |ps: &ParamSet<f64>| -> Result<f64> {
        graph.forward(ps)?;
        let v = graph.scalar(loss)?;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    for &(id, i) in coords {
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + epsilon;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - epsilon;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let err = rel_error(analytic.get(id).data()[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::RngState;
    use super::*;

    const EPS: f64 = 1e-5;

    fn random_tensor(rng: &mut RngState, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = RngState::new(1);
        for _ in 0..20 {
            let p = random_tensor(&mut rng, vec![3, 4]);
            let err = grad_check(
                |g, x| {
                    let sq = g.mul(x, x);
                    g.sum(sq)
                },
                &p,
                EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "err {err}");
        }
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = Tensor::scalar(1.0);
        assert!(grad_check(|_, x| x, &p, 0.0).is_err());
        assert!(grad_check(|_, x| x, &p, f64::NAN).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the dependence from backward but not from the
        // finite-difference probe
        let p = Tensor::scalar(2.0);
        let err = grad_check(
            |g, x| {
                let d = g.detach(x);
                g.mul(x, d)
            },
            &p,
            EPS,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn restricted_coordinates() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::new(vec![2], vec![1.0, 2.0]));
        let report = grad_check_params(
            |g, ps| {
                let an = g.param(ps, a);
                let sq = g.mul(an, an);
                Ok(g.sum(sq))
            },
            &ps,
            EPS,
            Some(&[(a, 1)]),
        )
        .unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.worst, Some(("a".to_string(), 1)));
    }
}
