//! Full network assembly (three coordinate TARMs feeding the STCM), the
//! SGD-with-momentum training loop, evaluation, checkpoint plumbing and
//! the finite-difference gradient checker.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Variant};
use crate::data::{DataError, GridSample};
use crate::stcm::{classify, stcm_forward, StcmConfig, StcmParams};
use crate::tarm::{tarm_forward, AttentionMode, TarmParams};
use crate::tensor::{
    load_checkpoint, save_checkpoint, BnMode, CheckpointError, Scalar, Tape, Tensor, TensorError,
    TensorId,
};

#[derive(Debug)]
pub enum TrainError {
    /// Forward produced a non-finite loss; names the first offending tensor.
    Numerical { tensor: String },
    Tensor(TensorError),
    Data(DataError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Numerical { tensor } => {
                write!(f, "training aborted: non-finite values, first seen in {tensor}")
            }
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
            Self::Checkpoint(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        Self::Data(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e)
    }
}

/// Three coordinate recalibration modules plus the convolutional trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct MansModel<F> {
    pub tarm_x: TarmParams<F>,
    pub tarm_y: TarmParams<F>,
    pub tarm_z: TarmParams<F>,
    pub stcm: StcmParams<F>,
    pub config: ExperimentConfig,
    pub variant: Variant,
}

impl<F: Scalar> MansModel<F> {
    /// Seeded initialization; the three TARMs draw independent weights.
    pub fn init(config: &ExperimentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (t, n, k, alpha) = (config.t, config.n, config.k, config.alpha);
        let tarm_x = TarmParams::init(t, n, k, alpha, &mut rng);
        let tarm_y = TarmParams::init(t, n, k, alpha, &mut rng);
        let tarm_z = TarmParams::init(t, n, k, alpha, &mut rng);
        let stcm = StcmParams::init(
            StcmConfig {
                depth: config.depth,
                use_shortcuts: config.shortcuts,
                num_classes: config.num_classes,
            },
            &mut rng,
        );
        Self {
            tarm_x,
            tarm_y,
            tarm_z,
            stcm,
            config: config.clone(),
            variant: config.variant,
        }
    }

    /// Learnable parameters, in checkpoint naming order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.tarm_x.visit("tarm.x", f);
        self.tarm_y.visit("tarm.y", f);
        self.tarm_z.visit("tarm.z", f);
        self.stcm.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.tarm_x.visit_mut("tarm.x", f);
        self.tarm_y.visit_mut("tarm.y", f);
        self.tarm_z.visit_mut("tarm.z", f);
        self.stcm.visit_mut(f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.numel());
        total
    }

    /// Writes learnable parameters and batch-norm running statistics.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut entries = Vec::new();
        self.visit(&mut |name, t| entries.push((name, t.clone())));
        self.stcm.visit_state(&mut |name, t| entries.push((name, t.clone())));
        save_checkpoint(path, &entries)?;
        Ok(())
    }

    /// Loads a checkpoint produced by [`MansModel::save`] into a model of
    /// the same architecture. Every stored name must match a parameter and
    /// every parameter must be present.
    pub fn load_into(&mut self, path: &Path) -> Result<(), TrainError> {
        let entries = load_checkpoint(path)?;
        let mut by_name: HashMap<String, Tensor<f32>> = entries.into_iter().collect();
        let mut missing = Vec::new();
        let mut shape_err = None;
        let mut apply = |name: String, t: &mut Tensor<F>| {
            match by_name.remove(&name) {
                Some(stored) => {
                    if stored.shape() != t.shape() {
                        shape_err.get_or_insert(format!(
                            "parameter '{name}' has shape {:?} in checkpoint, {:?} in model",
                            stored.shape(),
                            t.shape()
                        ));
                    } else {
                        *t = stored.cast();
                    }
                }
                None => missing.push(name),
            }
        };
        self.visit_mut(&mut |name, t| apply(name, t));
        self.stcm.visit_state_mut(&mut |name, t| apply(name, t));
        if let Some(msg) = shape_err {
            return Err(TrainError::Checkpoint(CheckpointError::Corrupt(msg)));
        }
        if !missing.is_empty() {
            return Err(TrainError::Checkpoint(CheckpointError::Corrupt(format!(
                "checkpoint is missing parameters: {}",
                missing.join(", ")
            ))));
        }
        if !by_name.is_empty() {
            let extra: Vec<String> = by_name.into_keys().collect();
            return Err(TrainError::Checkpoint(CheckpointError::Corrupt(format!(
                "checkpoint has unknown parameters: {}",
                extra.join(", ")
            ))));
        }
        Ok(())
    }
}

/// Packs grid samples into the `B×T×N×3` input tensor.
pub fn batch_from_grids<F: Scalar>(samples: &[&GridSample]) -> Tensor<F> {
    assert!(!samples.is_empty(), "empty batch");
    let (t, n) = {
        let s = samples[0].planes[0].shape();
        (s[0], s[1])
    };
    let mut data = Vec::with_capacity(samples.len() * t * n * 3);
    for g in samples {
        for ti in 0..t {
            for ni in 0..n {
                for plane in &g.planes {
                    data.push(F::from_f64(plane.at2(ti, ni)));
                }
            }
        }
    }
    Tensor::new(vec![samples.len(), t, n, 3], data).expect("batch shape")
}

pub struct ForwardOutput<F> {
    pub logits: TensorId,
    pub probs: Tensor<F>,
}

/// Splits each sample into coordinate planes, recalibrates them per the
/// model variant, stacks the results as a 3-channel image and classifies.
pub fn mans_forward<F: Scalar>(
    tape: &mut Tape<F>,
    model: &mut MansModel<F>,
    batch: &Tensor<F>,
    mode: BnMode,
    trainable: bool,
) -> Result<ForwardOutput<F>, TensorError> {
    let shape = batch.shape().to_vec();
    let (t, n) = (model.config.t, model.config.n);
    if shape.len() != 4 || shape[1] != t || shape[2] != n || shape[3] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "mans_forward",
            left: shape,
            right: vec![0, t, n, 3],
        });
    }
    let b = shape[0];

    let tarm_ids = if model.variant == Variant::StcmOnly {
        None
    } else {
        Some([
            model.tarm_x.register(tape, "tarm.x", trainable),
            model.tarm_y.register(tape, "tarm.y", trainable),
            model.tarm_z.register(tape, "tarm.z", trainable),
        ])
    };
    let attention = match model.variant {
        Variant::Full => AttentionMode::Learned,
        Variant::NoAttention => AttentionMode::AllOnes,
        Variant::StcmOnly => AttentionMode::AllOnes,
    };

    let mut planes = Vec::with_capacity(b * 3);
    for bi in 0..b {
        for c in 0..3 {
            let mut data = Vec::with_capacity(t * n);
            for ti in 0..t {
                for ni in 0..n {
                    data.push(batch.data()[((bi * t + ti) * n + ni) * 3 + c]);
                }
            }
            let plane = Tensor::new(vec![t, n], data)?;
            let leaf = tape.leaf(&plane, false);
            let out = match &tarm_ids {
                Some(ids) => tarm_forward(
                    tape,
                    &ids[c],
                    leaf,
                    attention,
                    model.config.attention_bias,
                )?,
                None => leaf,
            };
            planes.push(out);
        }
    }
    let image = tape.stack_planes(&planes, 3)?;
    let features = stcm_forward(tape, &mut model.stcm, image, mode, trainable)?;
    let (logits, probs) = classify(tape, &model.stcm, features.features, trainable)?;
    Ok(ForwardOutput { logits, probs })
}

/// Per-parameter velocity buffers for SGD with momentum.
#[derive(Debug, Default)]
pub struct SgdState<F> {
    velocity: HashMap<String, Vec<F>>,
}

impl<F: Scalar> SgdState<F> {
    pub fn new() -> Self {
        Self {
            velocity: HashMap::new(),
        }
    }
}

/// One optimization step: forward, cross-entropy, backward, then
/// `v ← momentum·v − lr·grad` and `p ← p + v` for every parameter that
/// received a gradient. Returns the pre-update loss.
pub fn train_step<F: Scalar>(
    model: &mut MansModel<F>,
    state: &mut SgdState<F>,
    batch: &Tensor<F>,
    labels: &[usize],
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let out = mans_forward(&mut tape, model, batch, BnMode::Train, true)?;
    let (loss_id, _) = tape.softmax_cross_entropy(out.logits, labels)?;
    let loss = tape.value(loss_id).data()[0].as_f64();
    if !loss.is_finite() {
        let tensor = tape
            .find_first_non_finite()
            .unwrap_or_else(|| "the loss".to_string());
        return Err(TrainError::Numerical { tensor });
    }
    tape.backward(loss_id)?;

    let mut grads: HashMap<String, Vec<F>> = HashMap::new();
    for (name, id) in tape.named_leaves() {
        if let Some(g) = tape.grad(id) {
            grads.insert(name, g.to_vec());
        }
    }

    let lr = F::from_f64(model.config.lr);
    let momentum = F::from_f64(model.config.momentum);
    let weight_decay = F::from_f64(model.config.weight_decay);
    let velocity = &mut state.velocity;
    model.visit_mut(&mut |name, param| {
        let Some(grad) = grads.get(&name) else {
            return;
        };
        let v = velocity
            .entry(name)
            .or_insert_with(|| vec![F::zero(); grad.len()]);
        let data = param.data_mut();
        for i in 0..grad.len() {
            let g = grad[i] + weight_decay * data[i];
            v[i] = momentum * v[i] - lr * g;
            data[i] = data[i] + v[i];
        }
    });
    Ok(loss)
}

pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode accuracy, mean loss and confusion matrix over a dataset.
pub fn evaluate<F: Scalar>(
    model: &mut MansModel<F>,
    dataset: &[GridSample],
) -> Result<EvalResult, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let classes = model.config.num_classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let batch_size = model.config.batch_size.max(1);
    for chunk in dataset.chunks(batch_size) {
        let refs: Vec<&GridSample> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|g| g.label).collect();
        let batch = batch_from_grids::<F>(&refs);
        let mut tape = Tape::new();
        let out = mans_forward(&mut tape, model, &batch, BnMode::Eval, false)?;
        let (loss_id, probs) = tape.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss_id).data()[0].as_f64() * chunk.len() as f64;
        for (bi, g) in chunk.iter().enumerate() {
            let row = &probs.data()[bi * classes..(bi + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite probs"))
                .map(|(i, _)| i)
                .expect("non-empty row");
            confusion[g.label][pred] += 1;
            if pred == g.label {
                correct += 1;
            }
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / dataset.len() as f64,
        mean_loss: loss_sum / dataset.len() as f64,
        confusion,
    })
}

/// Metrics of one epoch, one row per split in the metrics CSV.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Runs up to `epochs` epochs of minibatch SGD: samples are reshuffled
/// each epoch from a stream seeded by the run seed, split into batches,
/// and the train/test splits are re-evaluated after every epoch. The
/// callback sees the metrics and the post-epoch model (checkpointing) and
/// can stop training early by returning `false`.
pub fn train_epochs<F: Scalar>(
    model: &mut MansModel<F>,
    sgd: &mut SgdState<F>,
    train: &[GridSample],
    test: &[GridSample],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochMetrics, &MansModel<F>) -> bool,
) -> Result<Vec<EpochMetrics>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let mut history = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch_idx in indices.chunks(model.config.batch_size.max(1)) {
            let refs: Vec<&GridSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|g| g.label).collect();
            let batch = batch_from_grids::<F>(&refs);
            let loss = train_step(model, sgd, &batch, &labels)?;
            loss_sum += loss * refs.len() as f64;
            seen += refs.len();
        }
        let train_eval = evaluate(model, train)?;
        let test_eval = evaluate(model, test)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: train_eval.accuracy,
            test_loss: test_eval.mean_loss,
            test_accuracy: test_eval.accuracy,
        };
        let keep_going = on_epoch(&metrics, model);
        history.push(metrics);
        if !keep_going {
            break;
        }
    }
    Ok(history)
}

/// One parameter group's worst finite-difference disagreement.
#[derive(Debug, Clone)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GradCheckGroup>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn failing(&self) -> Vec<&GradCheckGroup> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err >= self.tolerance)
            .collect()
    }
}

fn forward_loss(
    model: &mut MansModel<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let out = mans_forward(&mut tape, model, batch, BnMode::Train, false)?;
    let (loss_id, _) = tape.softmax_cross_entropy(out.logits, labels)?;
    Ok(tape.value(loss_id).data()[0])
}

/// Compares every parameter's backward gradient against central finite
/// differences (h = 1e-5) on the given batch, reporting the max relative
/// error per parameter group. `float64` models only; batch-norm running
/// statistics are snapshotted and restored around the probes.
pub fn gradcheck_model(
    model: &mut MansModel<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    gradcheck_model_with(model, batch, labels, tolerance, |_, _| {})
}

/// Variant taking a hook that can tamper with the analytic gradients
/// before comparison; test fixtures use it to prove the checker flags a
/// corrupted backward rule and nothing else.
pub fn gradcheck_model_with(
    model: &mut MansModel<f64>,
    batch: &Tensor<f64>,
    labels: &[usize],
    tolerance: f64,
    mut tamper: impl FnMut(&str, &mut [f64]),
) -> Result<GradCheckReport, TrainError> {
    let mut saved_state = Vec::new();
    model
        .stcm
        .visit_state(&mut |name, t| saved_state.push((name, t.clone())));

    let mut tape = Tape::new();
    let out = mans_forward(&mut tape, model, batch, BnMode::Train, true)?;
    let (loss_id, _) = tape.softmax_cross_entropy(out.logits, labels)?;
    tape.backward(loss_id)?;
    let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, id) in tape.named_leaves() {
        let mut g = tape
            .grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(id).numel()]);
        tamper(&name, &mut g);
        analytic.insert(name, g);
    }
    drop(tape);

    let mut group_names = Vec::new();
    model.visit(&mut |name, _| {
        if analytic.contains_key(&name) {
            group_names.push(name);
        }
    });

    let h = 1e-5;
    let mut groups = Vec::with_capacity(group_names.len());
    for name in group_names {
        let grad = &analytic[&name];
        let mut max_rel_err = 0.0f64;
        for i in 0..grad.len() {
            let nudge = |model: &mut MansModel<f64>, delta: f64| {
                model.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                });
            };
            nudge(model, h);
            let plus = forward_loss(model, batch, labels)?;
            nudge(model, -2.0 * h);
            let minus = forward_loss(model, batch, labels)?;
            nudge(model, h);
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            max_rel_err = max_rel_err.max(rel);
        }
        groups.push(GradCheckGroup { name, max_rel_err });
    }

    let mut idx = 0;
    model.stcm.visit_state_mut(&mut |_, t| {
        *t = saved_state[idx].1.clone();
        idx += 1;
    });
    Ok(GradCheckReport { tolerance, groups })
}
