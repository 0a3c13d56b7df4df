use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::ClassifierModel;
use crate::error::{Error, Result};
use crate::graph::ScanGraph;
use crate::metrics::roc_curve;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's steps.
    pub loss: f64,
    /// Eval-mode AUC on the training graphs after the epoch.
    pub train_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub trace: Vec<EpochStats>,
}

fn labeled(graphs: &[ScanGraph]) -> Result<Vec<bool>> {
    graphs
        .iter()
        .map(|g| {
            g.label.ok_or_else(|| {
                Error::InvalidInput(format!("training graph {} has no label", g.scan_id))
            })
        })
        .collect()
}

/// Eval-mode probabilities, computed in parallel and returned in input order.
pub fn predict_all(model: &ClassifierModel, graphs: &[ScanGraph]) -> Result<Vec<f64>> {
    graphs.par_iter().map(|g| model.predict(g)).collect()
}

/// Plain SGD, one graph per step, with the step order reshuffled each epoch
/// from a generator seeded by `hyper.seed`. When `class_weight_pos` is unset
/// it is resolved to #neg / #pos of `graphs` and stored in the returned model.
pub fn train(mut model: ClassifierModel, graphs: &[ScanGraph]) -> Result<TrainOutcome> {
    model.validate()?;
    let labels = labeled(graphs)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "training needs both classes, got {pos} positive and {neg} negative graphs"
        )));
    }
    if model.hyper.class_weight_pos.is_none() {
        model.hyper.class_weight_pos = Some(neg as f64 / pos as f64);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.hyper.seed);
    // keep the training stream apart from the one used for initialization
    rng.set_stream(1);

    let lr = model.hyper.learning_rate;
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut trace = Vec::with_capacity(model.hyper.epochs);
    for epoch in 0..model.hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grad) = model.loss_and_gradients(&graphs[i], labels[i], &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "loss diverged at epoch {epoch} on graph {}",
                    graphs[i].scan_id
                )));
            }
            total += loss;
            model.params.add_scaled(&grad, -lr);
        }
        let probs = predict_all(&model, graphs)?;
        let scored: Vec<(f64, bool)> = probs.into_iter().zip(labels.iter().copied()).collect();
        trace.push(EpochStats {
            epoch,
            loss: total / graphs.len() as f64,
            train_auc: roc_curve(&scored)?.auc,
        });
    }
    Ok(TrainOutcome { model, trace })
}
