//! Minibatch training of the autoencoder with Adam.

use super::{forward_loss, init, AutoencoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{derive_seed, tags, Matrix, Rng};
use serde::{Deserialize, Serialize};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-epoch mean reconstruction loss over all elements seen in the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Last epoch's loss; `None` when zero epochs were run.
    pub final_loss: Option<f64>,
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    lr: f64,
}

impl Adam {
    fn new(params: &AutoencoderParams, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut AutoencoderParams, grads: &[Matrix]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Train a fresh autoencoder on `data` (samples as rows). Deterministic for
/// a given `(config, data)`: initialization and the per-epoch shuffle both
/// derive from `config.seed`.
pub fn train(config: &ModelConfig, data: &Matrix) -> Result<(AutoencoderParams, TrainReport)> {
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::Data("cannot train on zero samples".into()));
    }
    if data.cols() != config.input_dim {
        return Err(Error::Shape {
            op: "train",
            left_rows: data.rows(),
            left_cols: data.cols(),
            right_rows: data.rows(),
            right_cols: config.input_dim,
        });
    }

    let mut params = init(config)?;
    let mut optimizer = Adam::new(&params, config.learning_rate);
    let mut shuffle_rng = Rng::new(derive_seed(config.seed, tags::EPOCH_SHUFFLE, 0));

    let n = data.rows();
    let batch_size = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut weighted_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let x = data.select_rows(batch);
            let (loss_node, tape, ids) = forward_loss(&params, &x)?;
            let loss = tape.value(loss_node).get(0, 0);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss_node)?;
            let flat: Vec<Matrix> = ids.flat().iter().map(|&id| grads.wrt(id)).collect();
            optimizer.step(&mut params, &flat);
            weighted_loss += loss * batch.len() as f64;
        }
        epoch_losses.push(weighted_loss / n as f64);
    }

    let report = TrainReport {
        final_loss: epoch_losses.last().copied(),
        epochs_run: config.epochs,
        epoch_losses,
    };
    Ok((params, report))
}
