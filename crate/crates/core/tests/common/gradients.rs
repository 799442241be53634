//! Finite-difference harness and loss cases shared by the gradient tests and the acceptance suite.

use koala::autodiff::{Graph, Tensor, Var};
use koala::distillation::{
    forward_distill_loss, forward_hidden_loss, forward_output_loss, reverse_loss_hete,
    reverse_loss_homo, DistillLossConfig, ForwardTargets, LogitBundle, RefinementConfig,
};
use koala::models::{init_model, Model, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Model<f64> {
    let mut m = init_model(spec, rng.random()).unwrap();
    // non-zero biases so every path is exercised
    for layer in m.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn trainable(model: &Model<f64>) -> Vec<Tensor<f64>> {
    let mut m = model.clone();
    m.trainable_params_mut().into_iter().map(|t| t.clone()).collect()
}

pub fn install(model: &Model<f64>, params: &[Tensor<f64>]) -> Model<f64> {
    let mut m = model.clone();
    for (dst, src) in m.trainable_params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    m
}

/// Builds the loss from parameter values; returns the loss node and the
/// nodes holding `params` in order.
pub type LossFn<'a> = dyn Fn(&[Tensor<f64>], &mut Graph<f64>) -> (Var, Vec<Var>) + 'a;

pub fn loss_value(build: &LossFn<'_>, params: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = build(params, &mut g);
    g.value(loss).data()[0]
}

/// Max over parameter tensors of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn fd_check(name: &str, params: Vec<Tensor<f64>>, build: &LossFn<'_>) -> f64 {
    let mut g = Graph::new();
    let (loss, vars) = build(&params, &mut g);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (k, p) in params.iter().enumerate() {
        let mut numeric = vec![0.0; p.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = p.data()[j];
            probe[k].data_mut()[j] = x0 + H;
            let up = loss_value(build, &probe);
            probe[k].data_mut()[j] = x0 - H;
            let down = loss_value(build, &probe);
            probe[k].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * H);
        }
        let a = analytic[k].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        assert!(
            rel < TOL,
            "{name}: parameter tensor {k} rel err {rel:.3e} (|analytic| {na:.3e}, |numeric| {nn:.3e})"
        );
        worst = worst.max(rel);
    }
    worst
}

pub fn specs() -> (ModelSpec, ModelSpec) {
    let large = ModelSpec::mlp(6, &[9, 8, 7], 4).unwrap();
    let small = ModelSpec::mlp(6, &[5], 4).unwrap();
    (large, small)
}

pub fn cross_entropy_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (large_spec, small_spec) = specs();
    for spec in [large_spec, small_spec] {
        for _ in 0..3 {
            let model = random_model(&spec, &mut rng);
            let x = random_matrix(&mut rng, 7, 6, 1.5);
            let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..4)).collect();
            let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
                let m = install(&model, p);
                let bound = m.bind(g, true);
                let xv = g.constant(x.clone());
                let out = bound.forward(g, xv).unwrap();
                (g.cross_entropy_loss(out.logits, &labels).unwrap(), bound.param_vars())
            };
            worst = worst.max(fd_check("cross entropy", trainable(&model), &build));
        }
    }
    worst
}

pub fn reverse_homo_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (large_spec, small_spec) = specs();
    for (t, freeze) in [(7.0, true), (1.0, true), (3.0, false)] {
        let teacher = random_model(&small_spec, &mut rng);
        let mut large = random_model(&large_spec, &mut rng);
        if freeze {
            large.freeze_backbone();
        }
        let x = random_matrix(&mut rng, 6, 6, 2.0);
        let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
            let m = install(&large, p);
            let bound = m.bind(g, true);
            let loss = reverse_loss_homo(g, &teacher, &bound, &x, t).unwrap();
            (loss, bound.param_vars())
        };
        worst = worst.max(fd_check("reverse homo", trainable(&large), &build));
    }
    worst
}

pub fn reverse_hete_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (large_spec, _) = specs();
    for t in [7.0, 2.0] {
        let x = random_matrix(&mut rng, 5, 6, 2.0);
        let per_client = [4usize, 5, 6]
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let m = random_model(&ModelSpec::mlp(6, &[w], 4).unwrap(), &mut rng);
                (i, m.forward(&x).unwrap())
            })
            .collect();
        let bundle = LogitBundle {
            per_client,
            sample_counts: vec![10, 30, 60],
        };
        let consensus = bundle
            .consensus(&RefinementConfig {
                target_mean: 2.0,
                temperature: t,
            })
            .unwrap()
            .soft_labels;
        let mut large = random_model(&large_spec, &mut rng);
        large.freeze_backbone();
        let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
            let m = install(&large, p);
            let bound = m.bind(g, true);
            let loss = reverse_loss_hete(g, &consensus, &bound, &x, t).unwrap();
            (loss, bound.param_vars())
        };
        worst = worst.max(fd_check("reverse hete", trainable(&large), &build));
    }
    worst
}

pub fn forward_output_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (large_spec, small_spec) = specs();
    for t in [7.0, 1.0] {
        let large = random_model(&large_spec, &mut rng);
        let student = random_model(&small_spec, &mut rng);
        let x = random_matrix(&mut rng, 6, 6, 2.0);
        let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
            let m = install(&student, p);
            let bound = m.bind(g, true);
            let loss = forward_output_loss(g, &large, &bound, &x, t).unwrap();
            (loss, bound.param_vars())
        };
        worst = worst.max(fd_check("forward output", trainable(&student), &build));
    }
    worst
}

pub fn forward_hidden_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (large_spec, small_spec) = specs();
    let large = random_model(&large_spec, &mut rng);
    let student = random_model(&small_spec, &mut rng);
    let x = random_matrix(&mut rng, 6, 6, 2.0);
    let mut params = trainable(&student);
    params.push(random_matrix(&mut rng, small_spec.hidden_dim(), large_spec.hidden_dim(), 0.5));
    let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
        let (model_params, bridge) = p.split_at(p.len() - 1);
        let m = install(&student, model_params);
        let bound = m.bind(g, true);
        let w = g.param(bridge[0].clone());
        let loss = forward_hidden_loss(g, &large, &bound, w, &x).unwrap();
        let mut vars = bound.param_vars();
        vars.push(w);
        (loss, vars)
    };
    worst = worst.max(fd_check("forward hidden", params, &build));
    worst
}

pub fn combined_forward_gradients() -> f64 {
    let mut worst: f64 = 0.0;
    // one student/bridge pair per client covers both the shared and per-client forms
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (large_spec, _) = specs();
    let large = random_model(&large_spec, &mut rng);
    let x = random_matrix(&mut rng, 6, 6, 2.0);
    for (width, lambda, t) in [(5, 0.1, 7.0), (3, 1.0, 2.0), (8, 0.0, 7.0)] {
        let spec = ModelSpec::mlp(6, &[width], 4).unwrap();
        let student = random_model(&spec, &mut rng);
        let targets = ForwardTargets::compute(&large, &x, t).unwrap();
        let cfg = DistillLossConfig { lambda };
        let mut params = trainable(&student);
        params.push(random_matrix(&mut rng, width, large_spec.hidden_dim(), 0.5));
        let build = |p: &[Tensor<f64>], g: &mut Graph<f64>| {
            let (model_params, bridge) = p.split_at(p.len() - 1);
            let m = install(&student, model_params);
            let bound = m.bind(g, true);
            let w = g.param(bridge[0].clone());
            let vars = forward_distill_loss(g, &targets, &bound, w, &x, t, &cfg).unwrap();
            let mut pv = bound.param_vars();
            pv.push(w);
            (vars.total, pv)
        };
        worst = worst.max(fd_check("forward combined", params, &build));
    }
    worst
}

/// Every loss family with its worst relative error.
pub fn all_cases() -> Vec<(&'static str, f64)> {
    vec![
        ("cross entropy", cross_entropy_gradients()),
        ("reverse homo", reverse_homo_gradients()),
        ("reverse hete", reverse_hete_gradients()),
        ("forward output", forward_output_gradients()),
        ("forward hidden", forward_hidden_gradients()),
        ("forward combined", combined_forward_gradients()),
    ]
}
