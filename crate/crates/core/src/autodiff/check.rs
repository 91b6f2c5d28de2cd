use super::graph::{Graph, NodeId};
use super::tape::ParameterTape;
use crate::error::Result;

/// Compares reverse-mode gradients against central finite differences.
///
/// `build` records the scalar loss on a fresh graph. Returns the maximum over
/// `indices` of `|analytic - numeric| / (|analytic| + 1e-12)`.
pub fn grad_check<F>(tape: &mut ParameterTape, build: F, indices: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grads = vec![0.0; tape.len()];
    {
        let mut g = Graph::new(tape);
        let loss = build(&mut g)?;
        g.backward(loss, &mut grads)?;
    }
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = tape.values()[i];
        tape.values_mut()[i] = orig + h;
        let plus = eval(tape, &build)?;
        tape.values_mut()[i] = orig - h;
        let minus = eval(tape, &build)?;
        tape.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[i];
        worst = worst.max((analytic - numeric).abs() / (analytic.abs() + 1e-12));
    }
    Ok(worst)
}

fn eval<F>(tape: &ParameterTape, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(tape);
    let loss = build(&mut g)?;
    Ok(g.value(loss).data[0])
}
