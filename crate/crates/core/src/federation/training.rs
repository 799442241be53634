use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Graph, Tensor};
use crate::data::LabeledDataset;
use crate::error::{KoalaError, Result};
use crate::models::{collect_grads, Model};
use crate::scalar::Scalar;

/// Shuffled minibatch index lists covering `0..n` once.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn apply_step<S: Scalar>(
    opt: &mut AdamState<S>,
    mut params: Vec<&mut Tensor<S>>,
    grads: &[Tensor<S>],
) -> Result<()> {
    let grads: Vec<&Tensor<S>> = grads.iter().collect();
    opt.step(&mut params, &grads)
}

/// Cross-entropy training of the model's trainable layers. Returns the per-step loss trace.
pub fn train_supervised<S: Scalar>(
    model: &mut Model<S>,
    opt: &mut AdamState<S>,
    data: &LabeledDataset<S>,
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    client: usize,
) -> Result<Vec<f64>> {
    let mut trace = Vec::new();
    for _ in 0..epochs {
        for batch in minibatches(data.len(), batch_size, rng) {
            let x = data.inputs().select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let xv = g.constant(x);
            let out = bound.forward(&mut g, xv)?;
            let finite = g.value(out.logits).is_finite();
            let loss = g.cross_entropy_loss(out.logits, &y);
            let value = match loss {
                Ok(l) if finite => g.value(l).data()[0].as_f64(),
                Ok(_) | Err(KoalaError::NonFiniteInput { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(KoalaError::NonFiniteLoss {
                    client,
                    step: trace.len() as u64,
                });
            }
            trace.push(value);
            let loss = loss?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &bound.param_vars());
            apply_step(opt, model.trainable_params_mut(), &grads)?;
        }
    }
    Ok(trace)
}
