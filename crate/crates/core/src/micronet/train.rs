use std::io::{self, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::bce_loss;
use super::network::{argmax, Network, NetworkSpec};
use super::{NetError, Tensor};

/// One labelled input of shape `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            weight_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_init_scale > 0.0 && self.weight_init_scale.is_finite()) {
            return bad("weight_init_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's mini-batches, sample weighted.
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_seconds: f64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }

    /// `epoch,loss,val_loss,acc,val_acc`; missing validation values are empty.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "epoch,loss,val_loss,acc,val_acc")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.loss,
                opt(e.val_loss),
                e.accuracy,
                opt(e.val_accuracy)
            )?;
        }
        Ok(())
    }
}

/// One-hot targets, `[labels.len(), classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::from_raw(vec![labels.len(), classes], data)
}

fn check_examples(spec: &NetworkSpec, examples: &[Example]) -> Result<(), NetError> {
    let shape = spec.input_shape();
    for (i, ex) in examples.iter().enumerate() {
        if ex.input.shape() != shape {
            return Err(NetError::Shape(format!(
                "example {i} has shape {:?}, expected {shape:?}",
                ex.input.shape()
            )));
        }
        if ex.label >= spec.num_classes {
            return Err(NetError::Label {
                index: i,
                label: ex.label,
                classes: spec.num_classes,
            });
        }
    }
    Ok(())
}

/// Eval-mode mean loss and accuracy.
pub fn evaluate_loss(network: &Network, examples: &[Example]) -> Result<(f64, f64), NetError> {
    if examples.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let inputs: Vec<&Tensor> = examples.iter().map(|e| &e.input).collect();
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let probs = network.predict(&inputs)?;
    let loss = bce_loss(&probs, &one_hot(&labels, network.spec.num_classes))?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(probs.row(i)) == l)
        .count();
    Ok((loss, correct as f64 / examples.len() as f64))
}

/// Splits shuffled indices into mini-batches of at least two samples (batch
/// norm needs two); a trailing batch of one is merged into its predecessor.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let size = size.max(2);
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Mini-batch gradient descent from a seeded initialization.
///
/// The generator seeded with `config.seed` first initializes the weights,
/// then shuffles the sample order at the start of every epoch.
pub fn train(
    spec: NetworkSpec,
    training: &[Example],
    validation: &[Example],
    config: &TrainConfig,
) -> Result<(Network, TrainReport), NetError> {
    config.validate()?;
    if training.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if training.len() < 2 {
        return Err(NetError::BatchTooSmall(training.len()));
    }
    check_examples(&spec, training)?;
    check_examples(&spec, validation)?;
    for class in 0..spec.num_classes {
        if !training.iter().any(|e| e.label == class) {
            return Err(NetError::MissingClass(class));
        }
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = Network::init_with_rng(spec, config.weight_init_scale, &mut rng)?;
    let mut order: Vec<usize> = (0..training.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch_idx in batches(&order, config.batch_size) {
            let inputs: Vec<&Tensor> = batch_idx.iter().map(|&i| &training[i].input).collect();
            let labels: Vec<usize> = batch_idx.iter().map(|&i| training[i].label).collect();
            let batch = Tensor::stack(&inputs)?;
            let targets = one_hot(&labels, spec.num_classes);
            let (loss, grads, cache) = network.loss_and_gradients(&batch, &targets)?;
            loss_sum += loss * batch_idx.len() as f64;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(cache.probabilities.row(i)) == l)
                .count();
            if config.learning_rate > 0.0 {
                for (param, grad) in network.params.learnable_mut().into_iter().zip(&grads.tensors) {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= config.learning_rate * g;
                    }
                }
            }
            network.update_running_stats(&cache);
        }
        let (val_loss, val_accuracy) = if validation.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_loss(&network, validation)?;
            (Some(l), Some(a))
        };
        let loss = loss_sum / training.len() as f64;
        if !loss.is_finite() {
            return Err(NetError::NonFinite);
        }
        epochs.push(EpochRecord {
            epoch,
            loss,
            accuracy: correct as f64 / training.len() as f64,
            val_loss,
            val_accuracy,
        });
    }

    Ok((
        network,
        TrainReport {
            epochs,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Convenience for callers holding eval-mode inputs only.
pub fn predict_examples(network: &Network, examples: &[Example]) -> Result<Tensor, NetError> {
    let inputs: Vec<&Tensor> = examples.iter().map(|e| &e.input).collect();
    network.predict(&inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batching_merges_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![4, 5]);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(
            batches(&order, 4).iter().map(|s| s.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let order: Vec<usize> = (0..3).collect();
        assert_eq!(batches(&order, 1).iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn one_hot_layout() {
        assert_eq!(one_hot(&[1, 0], 3).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
