//! Central-difference gradient checking.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::rng_for;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// |a - n| / max(|a|, |n|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares an analytic gradient with central differences of `f` at `point`.
pub fn compare_with_differences<F>(
    name: &str,
    analytic: &[f64],
    f: F,
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), point.len());
    let mut x = point.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        n_checked: x.len(),
        tolerance,
        passed: worst.0 < tolerance,
    }
}

fn eval_scalar<F>(f: &F, point: &Tensor<f64>) -> Result<(f64, Option<Tensor<f64>>)>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grad = g.grad(x).cloned();
    Ok((value, grad))
}

/// Checks d f / d point, where `f` builds a scalar from the point inside a graph.
pub fn gradient_check<F>(name: &str, f: F, point: &Tensor<f64>, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let (_, grad) = eval_scalar(&f, point)?;
    let analytic = grad.map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; point.len()]);
    let shape = point.shape().to_vec();
    let numeric_f = |x: &[f64]| -> f64 {
        let t = Tensor::new(shape.clone(), x.to_vec()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t);
        let loss = f(&mut g, v).expect("forward failed during finite differences");
        g.value(loss).item()
    };
    Ok(compare_with_differences(
        name,
        &analytic,
        numeric_f,
        point.data(),
        DEFAULT_STEP,
        tolerance,
    ))
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

struct Case {
    name: &'static str,
    point: Tensor<f64>,
    f: CaseFn,
}

/// Loss head that gives every output element a distinct weight.
fn probe(g: &mut Graph<f64>, out: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.constant(target.clone());
    g.mse(out, t)
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = rng_for(seed, &[0x6772_6164]);
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $point:expr, |$g:ident, $x:ident| $body:expr) => {
            cases.push(Case {
                name: $name,
                point: $point,
                f: Box::new(move |$g: &mut Graph<f64>, $x: Var| $body),
            });
        };
    }

    let b = randn(&mut rng, &[4, 5]);
    let t = randn(&mut rng, &[2, 3, 5]);
    case!("matmul/lhs", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv)?;
        probe(g, y, &t)
    });
    let a = randn(&mut rng, &[6, 4]);
    let t = randn(&mut rng, &[6, 5]);
    case!("matmul/rhs", randn(&mut rng, &[4, 5]), |g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, x)?;
        probe(g, y, &t)
    });
    let bb = randn(&mut rng, &[2, 4, 3]);
    let t = randn(&mut rng, &[2, 3, 3]);
    case!("matmul/batched_lhs", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let bv = g.constant(bb.clone());
        let y = g.matmul(x, bv)?;
        probe(g, y, &t)
    });
    let ab = randn(&mut rng, &[2, 3, 4]);
    let t = randn(&mut rng, &[2, 3, 3]);
    case!("matmul/batched_rhs", randn(&mut rng, &[2, 4, 3]), |g, x| {
        let av = g.constant(ab.clone());
        let y = g.matmul(av, x)?;
        probe(g, y, &t)
    });
    let bias = randn(&mut rng, &[4]);
    let t = randn(&mut rng, &[2, 3, 4]);
    case!("add/lhs", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let bv = g.constant(bias.clone());
        let y = g.add(x, bv)?;
        probe(g, y, &t)
    });
    let base = randn(&mut rng, &[2, 3, 4]);
    let t = randn(&mut rng, &[2, 3, 4]);
    case!("add/broadcast_rhs", randn(&mut rng, &[3, 4]), |g, x| {
        let av = g.constant(base.clone());
        let y = g.add(av, x)?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[3, 4]);
    case!("scale", randn(&mut rng, &[3, 4]), |g, x| {
        let y = g.scale(x, -1.7);
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[2, 4, 3]);
    case!("transpose", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let y = g.transpose(x)?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[3, 4]);
    case!("reshape", randn(&mut rng, &[2, 6]), |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[2, 3, 4]);
    case!("gather_rows", randn(&mut rng, &[2, 5, 4]), |g, x| {
        let y = g.gather_rows(x, vec![vec![4, 0, 4], vec![1, 2, 3]])?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[3, 2, 4]);
    case!("gather_rows/shared", randn(&mut rng, &[1, 4]), |g, x| {
        let y = g.gather_rows(x, vec![vec![0, 0]; 3])?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[2, 5, 4]);
    case!("scatter_rows", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let y = g.scatter_rows(x, vec![vec![4, 0, 2], vec![1, 2, 3]], 5)?;
        probe(g, y, &t)
    });
    let other = randn(&mut rng, &[2, 2, 4]);
    let t = randn(&mut rng, &[2, 5, 4]);
    case!("concat_rows", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let o = g.constant(other.clone());
        let y = g.concat_rows(&[o, x])?;
        probe(g, y, &t)
    });
    let gamma = randn(&mut rng, &[6]);
    let beta = randn(&mut rng, &[6]);
    let t = randn(&mut rng, &[2, 3, 6]);
    case!("layer_norm/x", randn(&mut rng, &[2, 3, 6]), |g, x| {
        let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(x, gm, bt)?;
        probe(g, y, &t)
    });
    let xs = randn(&mut rng, &[4, 6]);
    let beta2 = randn(&mut rng, &[6]);
    let t = randn(&mut rng, &[4, 6]);
    case!("layer_norm/gamma", randn(&mut rng, &[6]), |g, x| {
        let (xv, bt) = (g.constant(xs.clone()), g.constant(beta2.clone()));
        let y = g.layer_norm(xv, x, bt)?;
        probe(g, y, &t)
    });
    let xs2 = randn(&mut rng, &[4, 6]);
    let gamma2 = randn(&mut rng, &[6]);
    let t = randn(&mut rng, &[4, 6]);
    case!("layer_norm/beta", randn(&mut rng, &[6]), |g, x| {
        let (xv, gm) = (g.constant(xs2.clone()), g.constant(gamma2.clone()));
        let y = g.layer_norm(xv, gm, x)?;
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[3, 5]);
    case!("gelu", randn(&mut rng, &[3, 5]), |g, x| {
        let y = g.gelu(x);
        probe(g, y, &t)
    });
    let t = randn(&mut rng, &[3, 5]);
    case!("softmax", randn(&mut rng, &[3, 5]), |g, x| {
        let y = g.softmax(x)?;
        probe(g, y, &t)
    });
    for (which, label) in [(0usize, "attention/q"), (1, "attention/k"), (2, "attention/v")] {
        let others = [randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[2, 3, 4])];
        let t = randn(&mut rng, &[2, 3, 4]);
        case!(label, randn(&mut rng, &[2, 3, 4]), |g, x| {
            let o0 = g.constant(others[0].clone());
            let o1 = g.constant(others[1].clone());
            let (q, k, v) = match which {
                0 => (x, o0, o1),
                1 => (o0, x, o1),
                _ => (o0, o1, x),
            };
            let y = g.attention(q, k, v, 2)?;
            probe(g, y, &t)
        });
    }
    let t = randn(&mut rng, &[2, 4]);
    case!("mean_rows", randn(&mut rng, &[2, 3, 4]), |g, x| {
        let y = g.mean_rows(x)?;
        probe(g, y, &t)
    });
    let c = randn(&mut rng, &[3, 4]);
    case!("sum", randn(&mut rng, &[3, 4]), |g, x| {
        // sum of a nonlinear map so the gradient is not constant
        let cv = g.constant(c.clone());
        let y = g.add(x, cv)?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    });
    case!("mean", randn(&mut rng, &[3, 4]), |g, x| {
        let y = g.gelu(x);
        Ok(g.mean(y))
    });
    let t = randn(&mut rng, &[3, 4]);
    case!("mse", randn(&mut rng, &[3, 4]), |g, x| {
        let tv = g.constant(t.clone());
        g.mse(tv, x)
    });
    case!("cross_entropy_with_logits", randn(&mut rng, &[4, 5]), |g, x| {
        g.cross_entropy_with_logits(x, &[0, 4, 2, 2])
    });
    cases
}

/// Runs the gradient check on every primitive for one seed.
pub fn check_primitives(seed: u64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    primitive_cases(seed)
        .into_iter()
        .map(|c| gradient_check(c.name, c.f, &c.point, tolerance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let mut rng = rng_for(1, &[]);
        let p = randn(&mut rng, &[7]);
        let report = gradient_check(
            "norm2",
            |g, x| {
                let z = g.constant(Tensor::zeros(&[7]));
                let m = g.mse(x, z)?;
                Ok(g.scale(m, 7.0))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let analytic = [1.0, 2.0];
        let r = compare_with_differences("bad", &analytic, |x| x[0] * x[0] + x[1], &[3.0, 0.0], 1e-5, 1e-4);
        assert!(!r.passed);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
