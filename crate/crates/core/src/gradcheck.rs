//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central,
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, error O(h⁴). Lets a
    /// larger `h` be used on strongly curved losses, which keeps rounding
    /// noise well below the floor.
    FivePoint,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation `h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is (numerically) zero are judged on absolute error. Raised
    /// automatically to the difference quotient's resolution `ε·|f| / (h·tol)`
    /// when that is larger.
    pub floor: f64,
    pub stencil: Stencil,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tolerance: 1e-4, floor: 1e-6, stencil: Stencil::Central }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LeafReport> {
        self.leaves.iter().filter(|l| !l.passed)
    }

    pub fn worst(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// `f` rebuilds the scalar function from leaf values each time it is called
/// and must be deterministic (re-seed any RNG inside it).
pub fn compare<F>(
    leaves: &[(String, Tensor)],
    analytic: &[Tensor],
    mut f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut values: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let resolution = f(&values)?.abs() * f64::EPSILON / cfg.step;
    let floor = cfg.floor.max(resolution / cfg.tolerance);
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, (name, _)) in leaves.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for e in 0..values[li].len() {
            let orig = values[li].data()[e];
            let mut at = |offset: f64| {
                values[li].data_mut()[e] = orig + offset;
                f(&values)
            };
            let h = cfg.step;
            let numeric = match cfg.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h),
            };
            values[li].data_mut()[e] = orig;
            let a = analytic[li].data()[e];
            max_rel = max_rel.max(relative_error(a, numeric, floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(LeafReport {
            name: name.clone(),
            elements: values[li].len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport { leaves: reports })
}

/// Builds the function with `build` on a fresh graph, runs backward, and
/// checks every leaf against central differences.
pub fn grad_check<B>(leaves: &[(String, Tensor)], mut build: B, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    B: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let mut grads = g.backward_scalar(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(leaves)
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    compare(
        leaves,
        &analytic,
        |vals| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).item())
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn leaves(items: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
        items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn check<B>(l: &[(String, Tensor)], build: B)
    where
        B: FnMut(&mut Graph, &[Var]) -> Result<Var>,
    {
        let report = grad_check(l, build, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        for step in [1e-1, 1e-2, 1e-3] {
            let report = grad_check(
                &leaves(vec![("x", x.clone())]),
                |g, v| {
                    let w = g.constant(w.clone());
                    let y = g.matmul(v[0], w)?;
                    let y = g.scale(y, 3.0)?;
                    g.sum(y)
                },
                GradCheckConfig { step, tolerance: 1e-10, floor: 1.0, ..Default::default() },
            )
            .unwrap();
            assert!(report.worst() <= 1e-10, "{report:?}");
        }
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        // f(x) = x^4 + x^3, f'(x) = 4x^3 + 3x^2; central differences are off by h^2 (4x + 1)
        let x = Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap();
        let l = leaves(vec![("x", x.clone())]);
        let exact = x.map(|v| 4.0 * v.powi(3) + 3.0 * v * v);
        let f = |vals: &[Tensor]| Ok(vals[0].data().iter().map(|v| v.powi(4) + v.powi(3)).sum());
        let cfg = GradCheckConfig { step: 0.1, tolerance: 1e-9, floor: 1.0, stencil: Stencil::FivePoint };
        assert!(compare(&l, &[exact.clone()], f, cfg).unwrap().worst() < 1e-9);
        let central = compare(&l, &[exact], f, GradCheckConfig { stencil: Stencil::Central, ..cfg }).unwrap();
        assert!(!central.passed());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::new(vec![3], vec![0.3, -0.2, 0.5]).unwrap();
        let l = leaves(vec![("x", x.clone())]);
        let wrong = x.map(|v| 2.0 * (2.0 * v));
        let report = compare(
            &l,
            &[wrong],
            |vals| Ok(vals[0].norm_sq()),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 4]);
        let s = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let l = leaves(vec![("a", a), ("b", b), ("s", s), ("w", w), ("bias", bias)]);

        // matmul, node_mix, add_bias, tanh
        check(&l, |g, v| {
            let m = g.node_mix(v[2], v[0])?;
            let y = g.matmul(m, v[3])?;
            let y = g.add_bias(y, v[4])?;
            let y = g.tanh(y)?;
            g.sum(y)
        });
        // add, sub, mul, scale, add_scalar, square, mean
        check(&l, |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.sub(v[0], v[1])?;
            let z = g.mul(x, y)?;
            let z = g.scale(z, -1.7)?;
            let z = g.add_scalar(z, 0.4)?;
            let z = g.square(z)?;
            g.mean(z)
        });
        // exp, log, abs, relu, clamp
        check(&l, |g, v| {
            let e = g.exp(v[0])?;
            let lg = g.log(e)?;
            let p = g.mul(lg, v[1])?;
            let ab = g.abs(p)?;
            let r = g.relu(v[1])?;
            let c = g.clamp(v[0], -0.5, 0.5)?;
            let x = g.add(ab, r)?;
            let x = g.mul(x, c)?;
            g.sum(x)
        });
        // reshape, slice, concat
        check(&l, |g, v| {
            let r = g.reshape(v[0], &[6, 4])?;
            let x = g.slice_last(r, 1, 2)?;
            let y = g.slice_last(r, 0, 3)?;
            let c = g.concat_last(&[x, y])?;
            let c = g.tanh(c)?;
            let c = g.square(c)?;
            g.sum(c)
        });
        // batch norm (train and eval), cross entropy
        let gamma = rand_tensor(&mut rng, &[12]);
        let beta = rand_tensor(&mut rng, &[12]);
        let l2 = leaves(vec![("x", l[0].1.clone()), ("gamma", gamma), ("beta", beta)]);
        check(&l2, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
            let y = g.tanh(y)?;
            let y = g.square(y)?;
            g.sum(y)
        });
        check(&l2, |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1; 12], &[0.7; 12], 1e-5)?;
            let y = g.tanh(y)?;
            g.sum(y)
        });
        let logits = rand_tensor(&mut rng, &[4, 3]);
        check(&leaves(vec![("logits", logits)]), |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]));
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4, 2]);
        let s = rand_tensor(&mut rng, &[4, 4]);
        let w = rand_tensor(&mut rng, &[2, 2]);
        let loss = |g: &mut Graph, xv: Var, sv: Var, wv: Var| -> Result<Var> {
            let m = g.node_mix(sv, xv)?;
            let y = g.matmul(m, wv)?;
            let y = g.tanh(y)?;
            g.sum(y)
        };
        let mut g = Graph::new();
        let (xv, sv, wv) = (g.constant(x.clone()), g.param(s.clone()), g.param(w.clone()));
        let out = loss(&mut g, xv, sv, wv).unwrap();
        let full = g.backward_scalar(out).unwrap();

        let mut ds = Tensor::zeros(&[4, 4]);
        let mut dw = Tensor::zeros(&[2, 2]);
        for b in 0..3 {
            let mut g = Graph::new();
            let xv = g.constant(x.index0(b).reshape(&[1, 4, 2]).unwrap());
            let (sv, wv) = (g.param(s.clone()), g.param(w.clone()));
            let out = loss(&mut g, xv, sv, wv).unwrap();
            let gr = g.backward_scalar(out).unwrap();
            ds = ds.zip_map(gr.get(sv).unwrap(), |a, b| a + b).unwrap();
            dw = dw.zip_map(gr.get(wv).unwrap(), |a, b| a + b).unwrap();
        }
        assert!(ds.max_abs_diff(full.get(sv).unwrap()) < 1e-12);
        assert!(dw.max_abs_diff(full.get(wv).unwrap()) < 1e-12);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let run = || {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let y = g.tanh(v).unwrap();
            let y = g.square(y).unwrap();
            let s = g.sum(y).unwrap();
            g.backward_scalar(s).unwrap().take(v).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }
}
