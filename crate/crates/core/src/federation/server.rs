//! Server-side aggregation and the two distillation passes.

use crate::autodiff::{AdamState, Graph, Tensor};
use crate::data::ProxyDataset;
use crate::distillation::{forward_distill_loss, kl_to_target, DistillLossConfig, ForwardTargets};
use crate::error::{KoalaError, Result};
use crate::models::{collect_grads, BridgingMatrix, Layer, Model};
use crate::scalar::Scalar;
use crate::seeds;

use super::training::{apply_step, minibatches};

fn weights(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(KoalaError::EmptyClientSet);
    }
    if counts.contains(&0) {
        return Err(KoalaError::InvalidArgument("sample counts must be positive".into()));
    }
    let total: u64 = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

fn average_layers<S: Scalar>(models: &[&Model<S>], w: &[f64], layer: usize) -> Layer<S> {
    let first = &models[0].layers()[layer];
    let mut weight = Tensor::zeros(first.weight.shape());
    let mut bias = Tensor::zeros(first.bias.shape());
    for (m, &wi) in models.iter().zip(w) {
        let wi = S::of(wi);
        let l = &m.layers()[layer];
        for (a, &b) in weight.data_mut().iter_mut().zip(l.weight.data()) {
            *a += wi * b;
        }
        for (a, &b) in bias.data_mut().iter_mut().zip(l.bias.data()) {
            *a += wi * b;
        }
    }
    Layer { weight, bias }
}

fn check_same_spec<S: Scalar>(models: &[&Model<S>]) -> Result<()> {
    let first = models.first().ok_or(KoalaError::EmptyClientSet)?;
    if let Some(k) = models.iter().position(|m| m.spec() != first.spec()) {
        return Err(KoalaError::SpecMismatch(format!(
            "model {k} differs from model 0; homo aggregation needs identical specs"
        )));
    }
    Ok(())
}

/// Sample-count weighted parameter average.
pub fn aggregate_homo<S: Scalar>(models: &[&Model<S>], counts: &[u64]) -> Result<Model<S>> {
    check_same_spec(models)?;
    let w = weights(counts)?;
    if w.len() != models.len() {
        return Err(KoalaError::InvalidArgument("one count per model required".into()));
    }
    let first = models[0];
    let layers = (0..first.layers().len())
        .map(|k| average_layers(models, &w, k))
        .collect();
    Model::from_parts(first.spec().clone(), layers, first.frozen_mask().to_vec())
}

/// FedAvg over adapter layers only; the global backbone is left untouched.
pub fn fedavg_adapters<S: Scalar>(
    global: &mut Model<S>,
    models: &[&Model<S>],
    counts: &[u64],
) -> Result<()> {
    check_same_spec(models)?;
    if models[0].spec() != global.spec() {
        return Err(KoalaError::SpecMismatch("uploads differ from the global model".into()));
    }
    let w = weights(counts)?;
    let start = global.spec().adapter_start;
    for k in start..global.layers().len() {
        global.layers_mut()[k] = average_layers(models, &w, k);
    }
    Ok(())
}

/// One pass over the proxy set stepping the large model's trainable layers
/// towards `targets` (one probability row per proxy example). Returns the
/// mean pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn reverse_distill_pass<S: Scalar>(
    large: &mut Model<S>,
    opt: &mut AdamState<S>,
    proxy: &ProxyDataset<S>,
    targets: &Tensor<S>,
    temperature: S,
    batch_size: usize,
    seed: u64,
    round: usize,
) -> Result<f64> {
    if targets.rows() != proxy.len() {
        return Err(KoalaError::ShapeMismatch {
            op: "reverse_distill_pass",
            left: targets.shape().to_vec(),
            right: proxy.inputs.shape().to_vec(),
        });
    }
    let mut rng = seeds::stream(seed, "reverse-batches", round as u64);
    let mut total = 0.0;
    let batches = minibatches(proxy.len(), batch_size, &mut rng);
    for batch in &batches {
        let x = proxy.inputs.select_rows(batch);
        let t = targets.select_rows(batch);
        let mut g = Graph::new();
        let bound = large.bind(&mut g, true);
        let xv = g.constant(x);
        let out = bound.forward(&mut g, xv)?;
        let loss = kl_to_target(&mut g, &t, out.logits, temperature)?;
        total += g.value(loss).data()[0].as_f64();
        g.backward(loss)?;
        let grads = collect_grads(&g, &bound.param_vars());
        apply_step(opt, large.trainable_params_mut(), &grads)?;
    }
    Ok(total / batches.len() as f64)
}

/// One pass of forward distillation into `student` and its bridging matrix.
/// Returns the mean pre-step total loss.
#[allow(clippy::too_many_arguments)]
pub fn forward_distill_pass<S: Scalar>(
    student: &mut Model<S>,
    bridge: &mut BridgingMatrix<S>,
    opt: &mut AdamState<S>,
    proxy: &ProxyDataset<S>,
    targets: &ForwardTargets<S>,
    temperature: S,
    loss_cfg: &DistillLossConfig,
    batch_size: usize,
    seed: u64,
    round: usize,
) -> Result<f64> {
    let mut rng = seeds::stream(seed, &format!("forward-batches/{}", bridge.owner), round as u64);
    let mut total = 0.0;
    let batches = minibatches(proxy.len(), batch_size, &mut rng);
    for batch in &batches {
        let x = proxy.inputs.select_rows(batch);
        let t = targets.select_rows(batch);
        let mut g = Graph::new();
        let bound = student.bind(&mut g, true);
        let w = g.param(bridge.matrix.clone());
        let loss = forward_distill_loss(&mut g, &t, &bound, w, &x, temperature, loss_cfg)?;
        total += g.value(loss.total).data()[0].as_f64();
        g.backward(loss.total)?;
        let mut vars = bound.param_vars();
        vars.push(w);
        let grads = collect_grads(&g, &vars);
        let mut params = student.trainable_params_mut();
        params.push(&mut bridge.matrix);
        apply_step(opt, params, &grads)?;
    }
    Ok(total / batches.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_model, ModelSpec};

    fn scalar_model(v: f64) -> Model<f64> {
        let spec = ModelSpec::mlp(1, &[1], 1).unwrap();
        let mut m = init_model(&spec, 0).unwrap();
        for l in m.layers_mut() {
            l.weight.data_mut()[0] = v;
            l.bias.data_mut()[0] = v;
        }
        m
    }

    #[test]
    fn aggregate_examples() {
        let (a, b) = (scalar_model(0.0), scalar_model(2.0));
        let avg = aggregate_homo(&[&a, &b], &[5, 5]).unwrap();
        assert!(avg.flat_params().iter().all(|&x| x == 1.0));
        let c = scalar_model(4.0);
        let w = aggregate_homo(&[&a, &c], &[1, 3]).unwrap();
        assert!(w.flat_params().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn aggregate_is_idempotent_on_copies() {
        let m: Model<f64> = init_model(&ModelSpec::mlp(6, &[5], 3).unwrap(), 9).unwrap();
        let agg = aggregate_homo(&[&m, &m, &m], &[3, 7, 11]).unwrap();
        for (x, y) in agg.flat_params().iter().zip(m.flat_params()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn aggregate_rejects_spec_mismatch() {
        let a: Model<f64> = init_model(&ModelSpec::mlp(6, &[5], 3).unwrap(), 1).unwrap();
        let b: Model<f64> = init_model(&ModelSpec::mlp(6, &[4], 3).unwrap(), 1).unwrap();
        assert!(matches!(
            aggregate_homo(&[&a, &b], &[1, 1]),
            Err(KoalaError::SpecMismatch(_))
        ));
        assert!(aggregate_homo::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn fedavg_keeps_backbone_bits() {
        let mut global: Model<f64> = init_model(&ModelSpec::mlp(4, &[6, 5], 3).unwrap(), 2).unwrap();
        global.freeze_backbone();
        let backbone = global.backbone_params();
        let mut a = global.clone();
        a.reinit_adapter(10);
        let mut b = global.clone();
        b.reinit_adapter(11);
        fedavg_adapters(&mut global, &[&a, &b], &[1, 1]).unwrap();
        assert_eq!(global.backbone_params(), backbone);
        let l = &global.layers()[2];
        let expect = (a.layers()[2].weight.data()[0] + b.layers()[2].weight.data()[0]) * 0.5;
        assert!((l.weight.data()[0] - expect).abs() < 1e-15);
    }
}
