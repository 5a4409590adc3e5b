use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossConfig, TrunkConfig};
use super::loss::{loss, LossParts};
use super::net::{backward, forward, init_params, prepare_input, ModelState, Sgd};
use crate::error::{Error, Result};
use crate::patches::{Augmentation, ChannelStats, PatchTensor};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            lr: 0.001,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            augment: true,
        }
    }
}

/// Normalized inputs with their targets, row-aligned.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Vec<Array3<f64>>,
    /// Stable per-sample key (e.g. `section/spot`) for augmentation streams.
    pub keys: Vec<String>,
    pub main: Array2<f64>,
    pub aux: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if self.keys.len() != n || self.main.nrows() != n || self.aux.nrows() != n {
            return Err(Error::Config(format!(
                "training set rows disagree: {} inputs, {} keys, {} main rows, {} aux rows",
                n,
                self.keys.len(),
                self.main.nrows(),
                self.aux.nrows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossParts,
}

/// Losses per optimizer step and their per-epoch means.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<LossParts>,
    pub steps: Vec<StepRecord>,
}

/// Mini-batch SGD. Each epoch draws its own shuffle, each sample its own
/// augmentation from `(seed, key, epoch)`, so the run is reproducible.
pub fn train(
    set: &TrainingSet,
    cfg: &TrunkConfig,
    lc: &LossConfig,
    tc: &TrainConfig,
) -> Result<(ModelState, History)> {
    set.validate()?;
    lc.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset("training split has no samples".into()));
    }
    if tc.batch_size == 0 || tc.batch_size > set.len() {
        return Err(Error::Argument(format!(
            "batch size {} must lie in 1..={}",
            tc.batch_size,
            set.len()
        )));
    }
    let mut state = init_params(cfg, set.main.ncols(), set.aux.ncols(), tc.seed)?;
    let inputs: Vec<Array3<f64>> = set
        .inputs
        .iter()
        .map(|x| prepare_input(x.view(), cfg))
        .collect::<Result<_>>()?;
    let mut opt = Sgd::new(tc.lr, tc.momentum, tc.weight_decay);
    let mut history = History::default();
    let dummy = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
        substituted: [false; 3],
    };
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng::substream(
            tc.seed,
            stream::SHUFFLE,
            &[&(epoch as u64).to_le_bytes()],
        ));
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<Array3<f64>> = idx
                .iter()
                .map(|&i| {
                    if !tc.augment {
                        return inputs[i].clone();
                    }
                    let mut r = rng::substream(
                        tc.seed,
                        stream::AUGMENT,
                        &[set.keys[i].as_bytes(), &(epoch as u64).to_le_bytes()],
                    );
                    let t = PatchTensor {
                        values: inputs[i].clone(),
                        channel_stats: dummy,
                    };
                    Augmentation::sample(&mut r).apply(&t).values
                })
                .collect();
            let main_t = set.main.select(Axis(0), idx);
            let aux_t = set.aux.select(Axis(0), idx);
            let cache = forward(&state, batch.iter().map(|x| x.view()))?;
            let parts = loss(
                cache.main.view(),
                cache.aux.view(),
                main_t.view(),
                aux_t.view(),
                lc,
            )
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::Numeric { batch_index: bi },
                e => e,
            })?;
            let grads = backward(&state, &cache, main_t.view(), aux_t.view(), lc)?;
            opt.step(&mut state, &grads)?;
            history.steps.push(StepRecord {
                epoch,
                batch: bi,
                loss: parts,
            });
            sums.l_main += parts.l_main;
            sums.l_aux += parts.l_aux;
            sums.aux_term += parts.aux_term;
            sums.total += parts.total;
            batches += 1;
        }
        let n = batches as f64;
        let mean = LossParts {
            l_main: sums.l_main / n,
            l_aux: sums.l_aux / n,
            aux_term: sums.aux_term / n,
            total: sums.total / n,
        };
        log::debug!(
            "epoch {epoch}: L_main {:.5} L_aux {:.5} total {:.5}",
            mean.l_main,
            mean.l_aux,
            mean.total
        );
        history.epochs.push(mean);
    }
    Ok((state, history))
}

/// Predictions for every input, in chunks to bound memory.
pub fn predict(state: &ModelState, inputs: &[Array3<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut main = Array2::zeros((inputs.len(), state.k_main));
    let mut aux = Array2::zeros((inputs.len(), state.k_aux));
    for (c, chunk) in inputs.chunks(64).enumerate() {
        let cache = forward(state, chunk.iter().map(|x| x.view()))?;
        let at = c * 64;
        main.slice_mut(ndarray::s![at..at + chunk.len(), ..])
            .assign(&cache.main);
        aux.slice_mut(ndarray::s![at..at + chunk.len(), ..])
            .assign(&cache.aux);
    }
    Ok((main, aux))
}
