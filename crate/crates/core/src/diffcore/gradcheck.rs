use super::{DiffError, Tape, Tensor, Var};

/// Compares the tape's gradient of a scalar function against central finite
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`.
/// `f` is evaluated twice at `x` up front; differing results are reported as
/// [`DiffError::NonDeterministic`].
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64, DiffError>
where
    Fun: Fn(&mut Tape<f64>, Var) -> Result<Var, DiffError>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64, DiffError> {
        let mut tape = Tape::inference();
        let v = tape.constant(point)?;
        let out = f(&mut tape, v)?;
        let (r, c) = tape.dims(out);
        if (r, c) != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: r, cols: c });
        }
        Ok(tape.scalar(out))
    };

    let f0 = eval(x)?;
    let f1 = eval(x)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(DiffError::NonDeterministic);
    }

    let mut tape = Tape::new();
    let v = tape.input(x)?;
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
