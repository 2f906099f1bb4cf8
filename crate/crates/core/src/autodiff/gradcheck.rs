use super::{AutodiffError, Graph, Tensor, Var};

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Magnitudes below this are compared absolutely; a relative error is
/// meaningless for gradients that are numerically zero.
const REL_FLOOR: f64 = 1e-3;

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)[0])
}

/// Central difference of the scalar function at one input coordinate.
pub fn central_difference<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    input: usize,
    elem: usize,
    eps: f64,
) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut probe = inputs.to_vec();
    let x0 = probe[input].data()[elem];
    probe[input].data_mut()[elem] = x0 + eps;
    let up = eval(f, &probe)?;
    probe[input].data_mut()[elem] = x0 - eps;
    let down = eval(f, &probe)?;
    Ok((up - down) / (2.0 * eps))
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences. `coords` restricts the comparison to chosen
/// `(input, element)` pairs; `None` checks every element of every input.
pub fn gradcheck<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
                .collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &(i, e) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |d| d[e]);
        let numeric = central_difference(&f, inputs, i, e, eps)?;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = err;
            report.worst = (i, e);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
