//! One-vs-all training: minibatch SGD with classical momentum, per-epoch
//! negative resampling, dev-set model selection with patience, and a ranked
//! sweep that can chain embedding transfer from frequent codes to rare ones.
//!
//! Everything here is deterministic given the config seed. Each epoch draws
//! its resample/shuffle randomness from an RNG keyed on `(seed, epoch)`, so
//! epoch k sees the same minibatches no matter what happened before it, and
//! two runs with the same inputs produce bitwise-identical models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, AutodiffError, Gradients};
use crate::corpus::{binarize, BinaryLabeledSet, CodeId, Corpus, CorpusError};
use crate::eval::{encounter_f1, EvalError};
use crate::hashing::hash_seeded_u64;
use crate::linalg::Matrix;
use crate::model::{
    init_params, nll_loss, predict, save_model, Dims, Mode, ModelError, ModelParams,
};

fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_resample_ratio() -> f64 {
    6.0
}
fn default_max_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_width() -> usize {
    300
}

/// Hyperparameters for one training run. Loadable from JSON; every field
/// has a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Negatives kept per positive when resampling each epoch.
    pub resample_ratio: f64,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a dev-F1 gain.
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Initialize each code's embedding from the previous code's trained one.
    pub transfer: bool,
    pub embed_dim: usize,
    pub enc1_dim: usize,
    pub enc2_dim: usize,
    pub attn_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            resample_ratio: default_resample_ratio(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            mode: Mode::Eldan,
            transfer: false,
            embed_dim: default_width(),
            enc1_dim: default_width(),
            enc2_dim: default_width(),
            attn_dim: default_width(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(s).map_err(|e| TrainError::BadConfig {
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: &str| {
            Err(TrainError::BadConfig {
                reason: reason.to_owned(),
            })
        };
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail("lr must be a positive finite number");
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if !self.resample_ratio.is_finite() || self.resample_ratio <= 0.0 {
            return fail("resample_ratio must be a positive finite number");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if [self.embed_dim, self.enc1_dim, self.enc2_dim, self.attn_dim].contains(&0) {
            return fail("layer widths must all be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    BadConfig { reason: String },
    #[error("code {code}: no positive encounters in the training split; skipping this code")]
    NoPositives { code: String },
    #[error("code {code}: no negative encounters in the training split")]
    NoNegatives { code: String },
    #[error("train/dev sets disagree: {reason}")]
    SetMismatch { reason: String },
    #[error(
        "transfer embedding is {got_rows}x{got_cols} but the model needs {want_rows}x{want_cols}"
    )]
    EmbeddingShape {
        want_rows: usize,
        want_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("gradient for {tensor} became non-finite; aborting before the update")]
    NonFiniteGradient { tensor: &'static str },
    #[error("code {code}: training diverged (non-finite mean loss) at epoch {epoch}")]
    Diverged { code: String, epoch: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("code {code}: failed to write {path}: {source}")]
    Persist {
        code: String,
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Momentum velocity, one dense tensor per parameter tensor. The embedding
/// velocity is dense even though its per-step gradients are sparse: a column
/// touched once keeps coasting (and decaying) on later steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub embed: Matrix,
    pub enc1_w: Matrix,
    pub enc1_b: Vec<f64>,
    pub enc2_w: Matrix,
    pub enc2_b: Vec<f64>,
    pub attention: Option<AttentionVelocity>,
    pub out_w: Matrix,
    pub out_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVelocity {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub context: Vec<f64>,
}

impl OptimizerState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        OptimizerState {
            embed: Matrix::zeros(params.w_embed.rows(), params.w_embed.cols()),
            enc1_w: Matrix::zeros(params.enc1_w.rows(), params.enc1_w.cols()),
            enc1_b: vec![0.0; params.enc1_b.len()],
            enc2_w: Matrix::zeros(params.enc2_w.rows(), params.enc2_w.cols()),
            enc2_b: vec![0.0; params.enc2_b.len()],
            attention: params.attention.as_ref().map(|attn| AttentionVelocity {
                w: Matrix::zeros(attn.w.rows(), attn.w.cols()),
                b: vec![0.0; attn.b.len()],
                context: vec![0.0; attn.context.len()],
            }),
            out_w: Matrix::zeros(params.out_w.rows(), params.out_w.cols()),
            out_b: vec![0.0; params.out_b.len()],
        }
    }
}

fn step_slice(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    debug_assert_eq!(theta.len(), velocity.len());
    debug_assert_eq!(theta.len(), grad.len());
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + *g;
        *t -= lr * *v;
    }
}

/// One classical-momentum update: v ← μ·v + g, θ ← θ − lr·v.
///
/// Refuses to touch the parameters if any gradient entry is non-finite, so
/// a diverging run fails loudly instead of poisoning the model.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    velocity: &mut OptimizerState,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if let Some(tensor) = grads.first_non_finite() {
        return Err(TrainError::NonFiniteGradient { tensor });
    }

    // Embedding: decay the whole dense velocity, fold in the sparse gradient
    // columns, then apply the full velocity to the weights.
    {
        let cols = params.w_embed.cols();
        let rows = params.w_embed.rows();
        let v = velocity.embed.as_mut_slice();
        for x in v.iter_mut() {
            *x *= momentum;
        }
        for (&col, gcol) in &grads.embed_cols {
            debug_assert_eq!(gcol.len(), rows);
            for (r, g) in gcol.iter().enumerate() {
                v[r * cols + col as usize] += *g;
            }
        }
        for (t, vx) in params.w_embed.as_mut_slice().iter_mut().zip(v.iter()) {
            *t -= lr * *vx;
        }
    }

    step_slice(
        params.enc1_w.as_mut_slice(),
        velocity.enc1_w.as_mut_slice(),
        grads.enc1_w.as_slice(),
        lr,
        momentum,
    );
    step_slice(&mut params.enc1_b, &mut velocity.enc1_b, &grads.enc1_b, lr, momentum);
    step_slice(
        params.enc2_w.as_mut_slice(),
        velocity.enc2_w.as_mut_slice(),
        grads.enc2_w.as_slice(),
        lr,
        momentum,
    );
    step_slice(&mut params.enc2_b, &mut velocity.enc2_b, &grads.enc2_b, lr, momentum);
    match (&mut params.attention, &mut velocity.attention, &grads.attention) {
        (Some(p), Some(v), Some(g)) => {
            step_slice(p.w.as_mut_slice(), v.w.as_mut_slice(), g.w.as_slice(), lr, momentum);
            step_slice(&mut p.b, &mut v.b, &g.b, lr, momentum);
            step_slice(&mut p.context, &mut v.context, &g.context, lr, momentum);
        }
        (None, None, None) => {}
        _ => unreachable!("attention params, velocity and gradients must agree on mode"),
    }
    step_slice(
        params.out_w.as_mut_slice(),
        velocity.out_w.as_mut_slice(),
        grads.out_w.as_slice(),
        lr,
        momentum,
    );
    step_slice(&mut params.out_b, &mut velocity.out_b, &grads.out_b, lr, momentum);
    Ok(())
}

/// Picks this epoch's training indices: every positive, plus each negative
/// independently with probability min(1, ratio·P/N), shuffled. All
/// randomness comes from `epoch_seed`, so the draw is reproducible and
/// independent of other epochs.
pub fn resample_epoch(
    set: &BinaryLabeledSet,
    ratio: f64,
    epoch_seed: u64,
) -> Result<Vec<usize>, TrainError> {
    if !ratio.is_finite() || ratio <= 0.0 {
        return Err(TrainError::BadConfig {
            reason: "resample_ratio must be a positive finite number".to_owned(),
        });
    }
    let n_pos = set.n_positive();
    let n_neg = set.n_negative();
    if n_pos == 0 {
        return Err(TrainError::NoPositives {
            code: set.target.as_str().to_owned(),
        });
    }
    if n_neg == 0 {
        return Err(TrainError::NoNegatives {
            code: set.target.as_str().to_owned(),
        });
    }
    let keep_prob = (ratio * n_pos as f64 / n_neg as f64).min(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut kept = Vec::new();
    for (i, (_, label)) in set.items.iter().enumerate() {
        if label.is_positive() || rng.gen::<f64>() < keep_prob {
            kept.push(i);
        }
    }
    // Fisher–Yates with the same generator.
    for i in (1..kept.len()).rev() {
        let j = rng.gen_range(0..=i);
        kept.swap(i, j);
    }
    Ok(kept)
}

/// One epoch's summary line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over this epoch's resampled set.
    pub mean_loss: f64,
    /// Encounter-level F1 on the full dev set after the epoch's updates.
    pub dev_f1: f64,
    /// Size of the resampled training set this epoch.
    pub n_sampled: usize,
}

/// Per-epoch curves plus which epoch's snapshot was returned.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
}

impl TrainHistory {
    /// Three-column TSV: epoch, loss, dev_f1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tloss\tdev_f1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{}\t{}", e.epoch, e.mean_loss, e.dev_f1);
        }
        out
    }
}

/// Fresh parameters for a run: seeded initialization, the target code
/// stamped on, and — when transfer is in play — the embedding replaced
/// wholesale by the donor's. Every non-embedding tensor is bitwise equal to
/// a plain initialization with the same seed.
pub fn init_for_training(
    cfg: &TrainConfig,
    feature_dim: usize,
    target: &CodeId,
    init_embedding: Option<&Matrix>,
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    let dims = Dims {
        feature_dim,
        embed_dim: cfg.embed_dim,
        enc1_dim: cfg.enc1_dim,
        enc2_dim: cfg.enc2_dim,
        attn_dim: cfg.attn_dim,
    };
    dims.validate()?;
    let mut params = init_params(dims, cfg.mode, cfg.seed);
    params.target = Some(target.clone());
    if let Some(embedding) = init_embedding {
        if embedding.shape() != (cfg.embed_dim, feature_dim) {
            return Err(TrainError::EmbeddingShape {
                want_rows: cfg.embed_dim,
                want_cols: feature_dim,
                got_rows: embedding.rows(),
                got_cols: embedding.cols(),
            });
        }
        params.w_embed = embedding.clone();
    }
    Ok(params)
}

/// Trains one binary classifier and returns the parameters from the epoch
/// with the best dev F1 (earliest epoch wins ties), along with the full
/// epoch history. Each minibatch applies the *mean* gradient of its
/// examples; epochs early-stop after `patience` epochs without a dev gain.
pub fn train_code(
    train: &BinaryLabeledSet,
    dev: &BinaryLabeledSet,
    cfg: &TrainConfig,
    init_embedding: Option<&Matrix>,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    cfg.validate()?;
    if train.target != dev.target {
        return Err(TrainError::SetMismatch {
            reason: format!(
                "train targets {} but dev targets {}",
                train.target, dev.target
            ),
        });
    }
    if train.feature_dim != dev.feature_dim {
        return Err(TrainError::SetMismatch {
            reason: format!(
                "train feature width {} differs from dev feature width {}",
                train.feature_dim, dev.feature_dim
            ),
        });
    }

    let mut params = init_for_training(cfg, train.feature_dim, &train.target, init_embedding)?;
    let mut velocity = OptimizerState::zeros_like(&params);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let epoch_seed = hash_seeded_u64(cfg.seed, epoch as u64);
        let sample = resample_epoch(train, cfg.resample_ratio, epoch_seed)?;
        let mut loss_sum = 0.0;
        for batch in sample.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(&params);
            for &i in batch {
                let (enc, label) = &train.items[i];
                let trace = predict(enc, &params)?;
                loss_sum += nll_loss(&trace, *label);
                acc.add_assign(&backward(enc, *label, &params, &trace)?);
            }
            acc.scale(1.0 / batch.len() as f64);
            sgd_momentum_step(&mut params, &mut velocity, &acc, cfg.lr, cfg.momentum)?;
        }
        let mean_loss = loss_sum / sample.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged {
                code: train.target.as_str().to_owned(),
                epoch,
            });
        }
        let dev_f1 = encounter_f1(&params, dev)?.f1;
        epochs.push(EpochStats {
            epoch,
            mean_loss,
            dev_f1,
            n_sampled: sample.len(),
        });

        let improved = best.as_ref().is_none_or(|(best_f1, _, _)| dev_f1 > *best_f1);
        if improved {
            best = Some((dev_f1, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_dev_f1, best_epoch, best_params) =
        best.expect("max_epochs >= 1, so at least one epoch ran");
    Ok((
        best_params,
        TrainHistory {
            epochs,
            best_epoch,
            best_dev_f1,
        },
    ))
}

/// File name a sweep gives one trained model: `<code>.<mode>.eldan`, with
/// `.transfer` spliced in when the embedding was donated.
pub fn model_filename(code: &CodeId, mode: Mode, transfer: bool) -> String {
    if transfer {
        format!("{code}.{mode}.transfer.eldan")
    } else {
        format!("{code}.{mode}.eldan")
    }
}

/// Outcome of one code in a sweep; failures are recorded, not fatal.
#[derive(Debug)]
pub struct SweepOutcome {
    pub code: CodeId,
    pub result: Result<(ModelParams, TrainHistory), TrainError>,
}

/// Trains one model per code, in the given order (rank by prevalence for
/// transfer to make sense). With `transfer` on, each code's embedding starts
/// from the most recent *successful* model's trained embedding; the first
/// code, and any code after a failure-only prefix, trains from scratch.
/// With `out_dir` set, each model and its history TSV are persisted there.
pub fn train_all(
    train: &Corpus,
    dev: &Corpus,
    codes: &[CodeId],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Vec<SweepOutcome> {
    let mut outcomes = Vec::with_capacity(codes.len());
    let mut donor: Option<Matrix> = None;
    for code in codes {
        let result = sweep_one(train, dev, code, cfg, donor.as_ref(), out_dir);
        if cfg.transfer {
            if let Ok((params, _)) = &result {
                donor = Some(params.w_embed.clone());
            }
        }
        outcomes.push(SweepOutcome {
            code: code.clone(),
            result,
        });
    }
    outcomes
}

fn sweep_one(
    train: &Corpus,
    dev: &Corpus,
    code: &CodeId,
    cfg: &TrainConfig,
    donor: Option<&Matrix>,
    out_dir: Option<&Path>,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    let train_set = binarize(train, code)?;
    let dev_set = binarize(dev, code)?;
    let init_embedding = if cfg.transfer { donor } else { None };
    let (params, history) = train_code(&train_set, &dev_set, cfg, init_embedding)?;
    if let Some(dir) = out_dir {
        let model_path = dir.join(model_filename(code, cfg.mode, cfg.transfer));
        save_model(&params, &model_path)?;
        let history_path = model_path.with_extension("history.tsv");
        fs::write(&history_path, history.to_tsv()).map_err(|source| TrainError::Persist {
            code: code.as_str().to_owned(),
            path: history_path.clone(),
            source,
        })?;
    }
    Ok((params, history))
}
