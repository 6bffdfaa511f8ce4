use lumen_autodiff::gradcheck::{check_gradients, op_suite, relative_error, GradCheckConfig};
use lumen_autodiff::{Conv2dOptions, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = op_suite(2024, GradCheckConfig::default()).unwrap();
    for r in &reports {
        println!("{r}");
    }
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn conv_rectangular_kernel_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0),
        random(&mut rng, &[4, 3, 1, 3], -1.0, 1.0),
        random(&mut rng, &[4], -1.0, 1.0),
    ];
    let cfg = GradCheckConfig { tolerance: 1e-6, ..Default::default() };
    let r = check_gradients("conv 1x3", |g, v| g.conv2d(v[0], v[1], v[2], Conv2dOptions::new(1, 0, 1)), &inputs, cfg)
        .unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn mse_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(&mut rng, &[7], -2.0, 2.0);
    let t = random(&mut rng, &[7], -2.0, 2.0);
    let mut g = Graph::new();
    let pv = g.leaf(p.clone(), true);
    let tv = g.constant(t.clone());
    let l = g.mse(pv, tv).unwrap();
    g.backward(l).unwrap();
    let analytic = g.grad(pv).unwrap().data().to_vec();

    // closed form 2 (p - t) / n and an independent central difference
    let h = 1e-6;
    let loss = |p: &[f64]| p.iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 7.0;
    for i in 0..7 {
        let closed = 2.0 * (p.data()[i] - t.data()[i]) / 7.0;
        assert!((analytic[i] - closed).abs() < 1e-15);
        let mut up = p.data().to_vec();
        let mut dn = p.data().to_vec();
        up[i] += h;
        dn[i] -= h;
        let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
        assert!(relative_error(analytic[i], fd, 1e-12) < 1e-8, "{i}: {} vs {fd}", analytic[i]);
    }
}

#[test]
fn cosine_loss_positive_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let inputs = [random(&mut rng, &[3], 0.01, 1.0), random(&mut rng, &[3], 0.01, 1.0)];
        let r = check_gradients("cosine", |g, v| g.cosine_angle_loss(v[0], v[1]), &inputs, GradCheckConfig::default())
            .unwrap();
        assert!(r.passed(), "{r}");
    }
}

/// Full Jacobian of `f` at `x` by central differences, `[out][in]`.
fn fd_jacobian(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Vec<Vec<f64>> {
    let n_out = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    let h = 1e-6;
    for j in 0..x.len() {
        let mut up = x.clone();
        let mut dn = x.clone();
        up.data_mut()[j] += h;
        dn.data_mut()[j] -= h;
        let (fu, fdn) = (f(&up), f(&dn));
        for i in 0..n_out {
            jac[i][j] = (fu.data()[i] - fdn.data()[i]) / (2.0 * h);
        }
    }
    jac
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
}

#[test]
fn chain_rule_matches_jacobian_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x0 = random(&mut rng, &[2, 3], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random(&mut rng, &[4], -0.5, 0.5);

    let run = |x: &Tensor, stages: usize| -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let mut y: Var = xv;
        if stages >= 1 {
            y = g.dense(y, wv, bv).unwrap();
        }
        if stages >= 2 {
            y = g.tanh(y).unwrap();
        }
        if stages >= 3 {
            y = g.sigmoid(y).unwrap();
        }
        g.value(y).clone()
    };
    let single = |x: &Tensor, stage: usize| -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = match stage {
            1 => g.dense(xv, wv, bv),
            2 => g.tanh(xv),
            _ => g.sigmoid(xv),
        }
        .unwrap();
        g.value(y).clone()
    };

    let y1 = run(&x0, 1);
    let y2 = run(&x0, 2);
    let j1 = fd_jacobian(&|x| single(x, 1), &x0);
    let j2 = fd_jacobian(&|x| single(x, 2), &y1);
    let j3 = fd_jacobian(&|x| single(x, 3), &y2);
    let product = matmul(&j3, &matmul(&j2, &j1));

    // backward with one-hot seeds yields the rows of the composed Jacobian
    let n_out = y2.len();
    for i in 0..n_out {
        let mut g = Graph::new();
        let xv = g.leaf(x0.clone(), true);
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let a = g.dense(xv, wv, bv).unwrap();
        let t = g.tanh(a).unwrap();
        let s = g.sigmoid(t).unwrap();
        let mut seed = Tensor::zeros(g.value(s).shape());
        seed.data_mut()[i] = 1.0;
        g.backward_with_seed(s, &seed).unwrap();
        for (j, &gv) in g.grad(xv).unwrap().data().iter().enumerate() {
            assert!((gv - product[i][j]).abs() < 1e-8, "row {i} col {j}: {gv} vs {}", product[i][j]);
        }
    }
}

#[test]
fn ops_report_shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.mse(a, b).is_err());
    assert!(g.add(a, b).is_err());
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let bias = g.constant(Tensor::zeros(&[4]));
    assert!(g.dense(a, w, bias).is_err());
    assert!(g.maxpool2(a).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let y = g.constant(Tensor::zeros(&[1, 2, 4, 3]));
    assert!(g.concat_channels(&[x, y]).is_err());
    // zero vectors have no direction
    assert!(matches!(g.cosine_angle_loss(a, a), Err(lumen_autodiff::AutodiffError::Degenerate { .. })));
    let four = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.cosine_angle_loss(four, four).is_err());
}
