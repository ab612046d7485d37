//! Central finite-difference checks of tape gradients.

use super::{RngStream, Tape, Tensor, Var};
use crate::error::Result;

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over every input entry between the tape's
/// gradient of `build` and central differences with step `h`.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.item(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let g = tape.grad_of(out, *v)?;
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[j], numeric, floor));
        }
    }
    Ok(worst)
}

/// A random small network over every differentiable tape op, returning
/// its inputs and a builder for the scalar loss. Stays under 200 inputs.
pub fn random_network(rng: &mut RngStream) -> (Vec<Tensor>, impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let b = 2 + rng.below(3);
    let d = 2 + rng.below(4);
    let hdim = 2 + rng.below(4);
    let k = 2 + rng.below(3);
    let act = rng.below(3);
    let mut t = |shape: &[usize], std: f64| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normals(n).into_iter().map(|v| v * std).collect()).unwrap()
    };
    let inputs = vec![
        t(&[b, d], 1.0),
        t(&[d, hdim], 0.7),
        t(&[hdim], 0.3),
        t(&[k, hdim], 0.7),
        t(&[b, hdim], 0.5),
    ];
    let targets: Vec<usize> = (0..b).map(|i| i % k).collect();
    let build = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let h = tape.matmul(v[0], v[1])?;
        let h = tape.add(h, v[2])?;
        let h = match act {
            0 => tape.tanh(h),
            1 => {
                let e = tape.scale(h, 0.5);
                tape.exp(e)
            }
            _ => tape.square(h),
        };
        let skip = tape.mul(h, v[4])?;
        let h = tape.sub(h, skip)?;
        let z = tape.normalize_rows(h)?;
        let w = tape.normalize_rows(v[3])?;
        let logits = tape.matmul_t(z, w)?;
        let logits = tape.scale(logits, 3.0);
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, &targets)?;
        let ce = tape.mean(picked);
        let p = tape.softmax(logits);
        let pt = tape.transpose(p)?;
        let both = tape.concat(&[pt, pt])?;
        let sq = tape.square(both);
        let reg = tape.sum(sq);
        let reg = tape.scale(reg, 0.1);
        let rows = tape.gather_rows(v[3], &[0, k - 1])?;
        let rsq = tape.square(rows);
        let rs = tape.mean(rsq);
        let total = tape.sub(reg, ce)?;
        tape.add(total, rs)
    };
    (inputs, build)
}
