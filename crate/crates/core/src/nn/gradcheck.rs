use super::{NnError, Tape, Tensor, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Worst coordinate of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares `backward` gradients of the scalar `f` against central
/// differences with step `h`, for every coordinate of every parameter.
pub fn check_gradients<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| NnError::NonScalarLoss(tape.shape(loss).to_vec()))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (i, grads) in analytic.iter().enumerate() {
        let mut worst = TensorCheck {
            index: i,
            coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
        };
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads.get(j).copied().unwrap_or(0.0);
            let err = rel_error(a, numeric);
            if err > worst.rel_error || j == 0 {
                worst = TensorCheck {
                    index: i,
                    coordinate: j,
                    analytic: a,
                    numeric,
                    rel_error: err,
                };
            }
        }
        tensors.push(worst);
    }
    Ok(GradCheckReport {
        tolerance: tol,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let report = check_gradients(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let cube = tape.mul(sq, v[0])?;
                tape.sum(cube)
            },
            &[x],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.tensors.len(), 1);
    }

    #[test]
    fn detects_wrong_gradient() {
        // tanh gradient is taken from the output; feeding a constant copy of
        // the input breaks the chain, so the check must fail.
        let x = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let report = check_gradients(
            |tape, v| {
                let detached = tape.constant(tape.value(v[0]).clone());
                let t = tape.tanh(detached)?;
                let y = tape.mul(t, v[0])?;
                tape.sum(y)
            },
            &[x],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
