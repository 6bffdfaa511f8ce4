//! Central finite-difference verification of graph gradients.
//!
//! The numerical side uses forward evaluations only, so it stays
//! independent of every backward rule it checks. Outputs with more than one
//! element are reduced to a scalar with fixed random weights; the analytic
//! side is the matching vector-Jacobian product.
//!
//! ReLU and max pooling are piecewise linear. When a perturbation flips a
//! branch decision (see [`Graph::branch_signature`]) the step shrinks
//! tenfold, up to three times, and if the kink is still inside the stencil
//! the one-sided difference on the unflipped side is used instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Step is `rel_step * max(1, |x|)`.
    pub rel_step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { rel_step: 1e-6, tolerance: 1e-5, floor: 1e-6, seed: 0x5eed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Elements whose stencil straddled a kink and fell back to one side.
    pub one_sided: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} (tol {:.0e}, {} elems, {} one-sided)",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.one_sided,
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn check_gradients<F>(name: &str, f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradients_masked(name, f, inputs, &vec![true; inputs.len()], cfg)
}

/// Like [`check_gradients`], but only inputs flagged in `checked` are
/// perturbed. Unchecked inputs still enter the graph as tracked leaves.
pub fn check_gradients_masked<F>(
    name: &str,
    f: F,
    inputs: &[Tensor],
    checked: &[bool],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), checked.len());
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let out_shape = g.value(out).shape().to_vec();
    let weights = if g.value(out).len() == 1 {
        Tensor::full(&out_shape, 1.0)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0))
    };
    let base_signature = g.branch_signature();
    g.backward_with_seed(out, &weights)?;
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        let phi = g.value(out).data().iter().zip(weights.data()).map(|(y, w)| y * w).sum();
        Ok((phi, g.branch_signature()))
    };

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        one_sided: 0,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        if !checked[ti] {
            continue;
        }
        for ei in 0..input.len() {
            let x0 = input.data()[ei];
            let mut h = cfg.rel_step * x0.abs().max(1.0);
            let mut numeric = None;
            let mut last = None;
            for _ in 0..4 {
                work[ti].data_mut()[ei] = x0 + h;
                let (fp, sp) = eval(&work)?;
                work[ti].data_mut()[ei] = x0 - h;
                let (fm, sm) = eval(&work)?;
                if sp == base_signature && sm == base_signature {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
                last = Some((fp, sp, fm, sm, h));
                h /= 10.0;
            }
            work[ti].data_mut()[ei] = x0;
            let numeric = match numeric {
                Some(n) => n,
                None => {
                    report.one_sided += 1;
                    let (fp, sp, fm, _, h) = last.expect("loop ran");
                    work[ti].data_mut()[ei] = x0;
                    let (f0, _) = eval(&work)?;
                    if sp == base_signature {
                        (fp - f0) / h
                    } else {
                        (f0 - fm) / h
                    }
                }
            };
            let a = analytic[ti].data()[ei];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, ei));
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
    }
    Ok(report)
}


/// Shapes drawn per op by [`op_suite`].
pub const SUITE_SHAPES_PER_OP: usize = 5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Gradient check of every graph op on [`SUITE_SHAPES_PER_OP`] random
/// shapes each. One report per op, holding the worst case over its shapes.
pub fn op_suite(seed: u64, cfg: GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    use crate::graph::Conv2dOptions;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut merge = |name: &str, rs: Vec<GradCheckReport>| {
        let mut worst =
            rs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).cloned().expect("non-empty");
        worst.name = name.to_string();
        worst.checked = rs.iter().map(|r| r.checked).sum();
        worst.one_sided = rs.iter().map(|r| r.one_sided).sum();
        reports.push(worst);
    };

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let (ph, pw) = (rng.random_range(0..=kh / 2), rng.random_range(0..=kw / 2));
        // pick spatial sizes that the stride tiles exactly
        let h = kh + stride * rng.random_range(1..=3) - 2 * ph;
        let w = kw + stride * rng.random_range(1..=3) - 2 * pw;
        let opts = Conv2dOptions::new(stride, ph, pw);
        let inputs = [
            uniform(&mut rng, &[b, c, h, w], -1.0, 1.0),
            uniform(&mut rng, &[k, c, kh, kw], -1.0, 1.0),
            uniform(&mut rng, &[k], -1.0, 1.0),
        ];
        rs.push(check_gradients("conv2d", |g, v| g.conv2d(v[0], v[1], v[2], opts), &inputs, cfg)?);
    }
    merge("conv2d", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            2 * rng.random_range(1..=3),
            2 * rng.random_range(1..=3),
        ];
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        rs.push(check_gradients("maxpool2", |g, v| g.maxpool2(v[0]), &[x], cfg)?);
    }
    merge("maxpool2", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape =
            [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5)];
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        rs.push(check_gradients("max_pool3x3_same", |g, v| g.max_pool(v[0], 3, 1, 1), &[x], cfg)?);
    }
    merge("max_pool3x3_same", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape =
            [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        rs.push(check_gradients("global_avg_pool", |g, v| g.global_avg_pool(v[0]), &[x], cfg)?);
    }
    merge("global_avg_pool", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let (b, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let inputs = [
            uniform(&mut rng, &[b, i], -1.0, 1.0),
            uniform(&mut rng, &[o, i], -1.0, 1.0),
            uniform(&mut rng, &[o], -1.0, 1.0),
        ];
        rs.push(check_gradients("dense", |g, v| g.dense(v[0], v[1], v[2]), &inputs, cfg)?);
    }
    merge("dense", rs);

    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let unaries: [(&str, Unary); 5] = [
        ("relu", |g, x| g.relu(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("flatten", |g, x| g.flatten(x)),
    ];
    for (name, op) in unaries {
        let mut rs = Vec::new();
        for _ in 0..SUITE_SHAPES_PER_OP {
            let shape =
                [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
            let x = uniform(&mut rng, &shape, -2.0, 2.0);
            rs.push(check_gradients(name, |g, v| op(g, v[0]), &[x], cfg)?);
        }
        merge(name, rs);
    }

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let (b, h, w) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let n = rng.random_range(2..=3);
        let inputs: Vec<Tensor> = (0..n)
            .map(|_| {
                let c = rng.random_range(1..=4);
                uniform(&mut rng, &[b, c, h, w], -1.0, 1.0)
            })
            .collect();
        rs.push(check_gradients("concat_channels", |g, v| g.concat_channels(v), &inputs, cfg)?);
    }
    merge("concat_channels", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
        let inputs = [uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)];
        rs.push(check_gradients("add", |g, v| g.add(v[0], v[1]), &inputs, cfg)?);
    }
    merge("add", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
        let x = uniform(&mut rng, &shape, -1.0, 1.0);
        rs.push(check_gradients("row_sum", |g, v| g.row_sum(v[0]), &[x], cfg)?);
    }
    merge("row_sum", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=7)];
        let inputs = [uniform(&mut rng, &shape, -1.0, 1.0), uniform(&mut rng, &shape, -1.0, 1.0)];
        rs.push(check_gradients("mse", |g, v| g.mse(v[0], v[1]), &inputs, cfg)?);
    }
    merge("mse", rs);

    let mut rs = Vec::new();
    for _ in 0..SUITE_SHAPES_PER_OP {
        let rows = rng.random_range(1..=4);
        let inputs = [uniform(&mut rng, &[rows, 3], 0.05, 1.0), uniform(&mut rng, &[rows, 3], 0.05, 1.0)];
        rs.push(check_gradients("cosine_angle_loss", |g, v| g.cosine_angle_loss(v[0], v[1]), &inputs, cfg)?);
    }
    merge("cosine_angle_loss", rs);

    Ok(reports)
}
