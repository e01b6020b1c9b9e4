//! Unsupervised stereo training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::par;

use super::loss::{loss_on_tape, LossWeights};
use super::{CapsNetParams, StereoPair};

/// Training configuration; serializable so CLI runs can pin it in a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Pairs per optimizer step; 0 means the whole dataset each step.
    #[serde(default)]
    pub batch_size: usize,
    /// Write a checkpoint every N epochs into `checkpoint_dir` (0: only the
    /// final one).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 1e-2,
            epochs: 200,
            seed: 0,
            batch_size: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

/// One optimizer step of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub l_ap: f64,
    pub l_ds: f64,
    pub l_lr: f64,
    pub zeta: f64,
}

pub struct TrainOutcome {
    pub params: CapsNetParams,
    pub history: Vec<StepRecord>,
}

/// Writes the per-step loss history as `step,loss,l_ap,l_ds,l_lr,zeta`.
pub fn write_history_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,loss,l_ap,l_ds,l_lr,zeta\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.l_ap, r.l_ds, r.l_lr, r.zeta
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

struct PairPass {
    loss: f64,
    l_ap: f64,
    l_ds: f64,
    l_lr: f64,
    zeta: f64,
    grads: Vec<Tensor>,
}

fn forward_backward(
    params: &CapsNetParams,
    pair: &StereoPair,
    weights: &LossWeights,
) -> Result<PairPass> {
    let mut tape = Tape::new();
    let param_vars = params.add_to_tape(&mut tape, true);
    let img = tape.leaf(
        Tensor::new(
            vec![pair.left.height(), pair.left.width()],
            pair.left.data().to_vec(),
        )?,
        false,
    );
    let fwd = params.forward(&mut tape, &param_vars, img)?;
    let nodes = loss_on_tape(
        &mut tape,
        pair,
        fwd.disp_left,
        fwd.disp_right,
        &param_vars,
        weights,
        params.config().d_max,
    )?;
    let loss = tape.value(nodes.total).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("training loss"));
    }
    let grads = tape.backward(nodes.total)?;
    let grad_list = param_vars
        .iter()
        .map(|(_, var)| {
            grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape().to_vec()))
        })
        .collect();
    Ok(PairPass {
        loss,
        l_ap: nodes.l_ap,
        l_ds: nodes.l_ds,
        l_lr: nodes.l_lr,
        zeta: nodes.zeta,
        grads: grad_list,
    })
}

/// Trains the network. Deterministic given `(seed, dataset, config)`:
/// per-pair passes may run on parallel workers, but gradients are reduced
/// sequentially in dataset order and batches are drawn from a seeded
/// shuffle.
///
/// A non-finite loss aborts with [`Error::NonFiniteLoss`]; when a checkpoint
/// directory is configured, the last good parameters are retained there as
/// `last_good.json`.
pub fn train(
    dataset: &[StereoPair],
    params: CapsNetParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    config.weights.validate_for_training()?;
    for pair in dataset {
        if pair.left.width() != params.config().input_width
            || pair.left.height() != params.config().input_height
        {
            return Err(Error::DimensionMismatch(format!(
                "pair {}x{} vs network input {}x{}",
                pair.left.width(),
                pair.left.height(),
                params.config().input_width,
                params.config().input_height
            )));
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut params = params;
    let mut history = Vec::new();
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let names: Vec<String> = params.named().keys().cloned().collect();
    let mut tensors: Vec<Tensor> = params.named().values().cloned().collect();
    let mut adam = AdamState::new(&tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = if config.batch_size == 0 { dataset.len() } else { config.batch_size };
    let mut step = 0usize;

    let write_params = |tensors: &[Tensor], params: &mut CapsNetParams| {
        let named = names
            .iter()
            .cloned()
            .zip(tensors.iter().cloned())
            .collect::<crate::autodiff::NamedParams>();
        params.set_named(named);
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(batch) {
            write_params(&tensors, &mut params);
            let passes: Vec<Result<PairPass>> = par::map_indexed(chunk.len(), |i| {
                forward_backward(&params, &dataset[chunk[i]], &config.weights)
            });

            let mut grad_sum: Vec<Tensor> =
                tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            let (mut loss, mut l_ap, mut l_ds, mut l_lr, mut zeta) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for pass in passes {
                let pass = pass.map_err(|_| {
                    if let Some(dir) = &config.checkpoint_dir {
                        let _ = params.save(&dir.join("last_good.json"));
                    }
                    Error::NonFiniteLoss(step)
                })?;
                loss += pass.loss;
                l_ap += pass.l_ap;
                l_ds += pass.l_ds;
                l_lr += pass.l_lr;
                zeta += pass.zeta;
                for (acc, g) in grad_sum.iter_mut().zip(&pass.grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let n = chunk.len() as f64;
            for g in &mut grad_sum {
                for v in g.data_mut() {
                    *v /= n;
                }
            }
            adam.step(&mut tensors, &grad_sum, &adam_cfg)?;
            step += 1;
            history.push(StepRecord {
                step,
                loss: loss / n,
                l_ap: l_ap / n,
                l_ds: l_ds / n,
                l_lr: l_lr / n,
                zeta: zeta / n,
            });
        }

        if let Some(dir) = &config.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                write_params(&tensors, &mut params);
                params.save(&dir.join(format!("ckpt_{:05}.json", epoch + 1)))?;
            }
        }
    }

    write_params(&tensors, &mut params);
    if let Some(dir) = &config.checkpoint_dir {
        params.save(&dir.join("final.json"))?;
    }
    Ok(TrainOutcome { params, history })
}
