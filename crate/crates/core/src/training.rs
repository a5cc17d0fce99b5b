//! Mini-batch training with cross-entropy and Adam, evaluation metrics and
//! the split-ratio protocol.
//!
//! Each example in a batch is run on its own tape; the batch gradient is the
//! mean of the per-example gradients, summed in batch order. This equals the
//! gradient of the batch-mean cross-entropy and keeps runs bit-reproducible.

use std::fmt::{self, Write as _};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Polarity, SplitRatio, SurveyRecord};
use crate::encoder::{self, EncoderParams, ModelConfig, ModelError, NUM_CLASSES};
use crate::nn::{NnError, Tape, Tensor};
use crate::tokenizer::{self, TokenizedSequence, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("record {0} has no gold label")]
    Unlabeled(usize),
    #[error("no examples to {0}")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(TrainError::Config(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) -> Result<(), NnError> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(NnError::Shape {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// An encoded sequence with its gold label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: TokenizedSequence,
    pub label: Polarity,
}

/// Encodes labeled records; any unlabeled record is an error.
pub fn encode_records(
    records: &[SurveyRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>, TrainError> {
    records
        .iter()
        .map(|r| {
            let label = r.label.ok_or(TrainError::Unlabeled(r.id))?;
            Ok(Example {
                seq: tokenizer::encode(&r.text, vocab, max_len)?,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_table(&self) -> String {
        let mut s = String::from("epoch  mean_loss  train_acc  heldout_acc\n");
        for e in &self.epochs {
            let held = e
                .heldout_accuracy
                .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(
                s,
                "{:>5}  {:>9.6}  {:>9.4}  {:>11}",
                e.epoch, e.mean_loss, e.train_accuracy, held
            );
        }
        s
    }
}

/// Per-example dropout stream, independent of batch composition order.
fn dropout_rng(seed: u64, epoch: usize, step: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409_0a7c_0000);
    rng.set_stream(((epoch as u64) << 40) ^ (step << 12) ^ slot as u64);
    rng
}

/// Forward + backward for one example. Returns loss, argmax and gradients in
/// canonical parameter order.
fn example_gradients(
    params: &EncoderParams,
    cfg: &ModelConfig,
    ex: &Example,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Polarity, Vec<Vec<f64>>), TrainError> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let (logits, _) = encoder::forward(&mut tape, &pv, &ex.seq.trimmed(), cfg, rng)?;
    let l = tape.value(logits).data();
    let pred = encoder::argmax_polarity(&[l[0], l[1], l[2]]);
    let loss = tape.cross_entropy(logits, &[ex.label.index()])?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = pv
        .ordered()
        .iter()
        .map(|&v| tape.take_grad(v).unwrap_or_default())
        .collect();
    Ok((loss_value, pred, grads))
}

/// Trains all parameters in place. `heldout`, when given, is scored after
/// every epoch.
pub fn train(
    params: &mut EncoderParams,
    cfg: &ModelConfig,
    data: &[Example],
    tcfg: &TrainConfig,
    heldout: Option<&[Example]>,
) -> Result<TrainHistory, TrainError> {
    tcfg.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty("train on"));
    }
    let mut states: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|t| AdamState::zeros(t.len()))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut step: u64 = 0;
    let mut history = TrainHistory::default();
    let use_dropout = cfg.dropout_rate > 0.0;

    for epoch in 1..=tcfg.epochs {
        if tcfg.shuffle_each_epoch {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            step += 1;
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for (slot, &i) in batch.iter().enumerate() {
                let mut rng = use_dropout.then(|| dropout_rng(tcfg.seed, epoch, step, slot));
                let (loss, pred, grads) = example_gradients(params, cfg, &data[i], rng.as_mut())?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss;
                correct += usize::from(pred == data[i].label);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(&grads) {
                            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for (tensor, (g, state)) in params
                .tensors_mut()
                .into_iter()
                .zip(grads.iter_mut().zip(states.iter_mut()))
            {
                g.iter_mut().for_each(|v| *v *= scale);
                adam_step(tensor, g, state, step, tcfg)?;
            }
        }
        let heldout_accuracy = match heldout {
            Some(h) if !h.is_empty() => Some(evaluate(params, cfg, h)?.accuracy),
            _ => None,
        };
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            heldout_accuracy,
        };
        info!(
            "epoch {}/{}: loss {:.4}, train acc {:.4}{}",
            epoch,
            tcfg.epochs,
            stats.mean_loss,
            stats.train_accuracy,
            heldout_accuracy.map_or(String::new(), |a| format!(", held-out acc {a:.4}"))
        );
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Accuracy and confusion matrix (rows = gold, columns = predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// 0.0 for a class that was never predicted.
    pub precision: [f64; NUM_CLASSES],
    /// 0.0 for a class absent from the gold labels.
    pub recall: [f64; NUM_CLASSES],
    pub n_examples: usize,
}

impl Metrics {
    pub fn from_confusion(confusion: [[usize; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let n: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut precision = [0.0; NUM_CLASSES];
        let mut recall = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let row: usize = confusion[c].iter().sum();
            let col: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
            precision[c] = ratio(confusion[c][c], col);
            recall[c] = ratio(confusion[c][c], row);
        }
        Self {
            accuracy: ratio(trace, n),
            confusion,
            precision,
            recall,
            n_examples: n,
        }
    }

    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (Polarity, Polarity)>,
    {
        let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (gold, pred) in pairs {
            confusion[gold.index()][pred.index()] += 1;
        }
        Self::from_confusion(confusion)
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "accuracy {:.4} over {} examples",
            self.accuracy, self.n_examples
        )?;
        writeln!(f, "gold\\pred  negative   neutral  positive  recall")?;
        for p in Polarity::ALL {
            let row = &self.confusion[p.index()];
            writeln!(
                f,
                "{:<9} {:>9} {:>9} {:>9}  {:.4}",
                p.as_str(),
                row[0],
                row[1],
                row[2],
                self.recall[p.index()]
            )?;
        }
        write!(
            f,
            "precision {:>9.4} {:>9.4} {:>9.4}",
            self.precision[0], self.precision[1], self.precision[2]
        )
    }
}

/// Inference-mode predictions scored against gold labels.
pub fn evaluate(
    params: &EncoderParams,
    cfg: &ModelConfig,
    data: &[Example],
) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty("evaluate"));
    }
    let preds = data
        .iter()
        .map(|ex| Ok((ex.label, encoder::predict(&ex.seq, params, cfg)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Metrics::from_pairs(preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub ratio: String,
    pub train_size: usize,
    pub test_size: usize,
    pub test_accuracy: f64,
    pub metrics: Metrics,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProtocolTable {
    pub epochs: usize,
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolTable {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "ratio   train   test  test_accuracy  ({} epochs)\n",
            self.epochs
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:>6}  {:>12.1}%",
                r.ratio,
                r.train_size,
                r.test_size,
                100.0 * r.test_accuracy
            );
        }
        s
    }
}

/// For each ratio: split with `split_seed`, fresh init from `mcfg.seed`,
/// train, then score the test part.
pub fn run_protocol(
    dataset: &[SurveyRecord],
    vocab: &Vocabulary,
    ratios: &[SplitRatio],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    split_seed: u64,
    stratified: bool,
) -> Result<ProtocolTable, TrainError> {
    let mut table = ProtocolTable {
        epochs: tcfg.epochs,
        rows: Vec::with_capacity(ratios.len()),
    };
    for &ratio in ratios {
        let split = if stratified {
            corpus::split_stratified(dataset, ratio, split_seed)?
        } else {
            corpus::split(dataset, ratio, split_seed)?
        };
        let train_set = encode_records(&split.train, vocab, mcfg.max_len)?;
        let test_set = encode_records(&split.test, vocab, mcfg.max_len)?;
        info!(
            "protocol {ratio}: {} train / {} test",
            train_set.len(),
            test_set.len()
        );
        let mut params = encoder::init_params(mcfg)?;
        let history = train(&mut params, mcfg, &train_set, tcfg, None)?;
        let metrics = evaluate(&params, mcfg, &test_set)?;
        table.rows.push(ProtocolRow {
            ratio: ratio.to_string(),
            train_size: train_set.len(),
            test_size: test_set.len(),
            test_accuracy: metrics.accuracy,
            metrics,
            history,
        });
    }
    Ok(table)
}
