//! The classification network: a small strided-conv extractor, a softmax
//! melanoma head, and an adversarial hair head behind a gradient reversal
//! layer, trained jointly.
//!
//! The hair branch is wired so that one backward pass per objective yields
//! every gradient the three-group update needs: the reversal node carries
//! the `-lambda` factor toward the extractor, while the hair head itself
//! receives plain descent gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, GradMap, JointAdam, ParamGroups, Params};
use crate::rng;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Backbone and training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub lambda: f64,
    pub ihd: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Snapshot extractor/melanoma parameters after every epoch (used by
    /// trajectory-equivalence tests; off by default).
    #[serde(default)]
    pub record_trajectory: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            conv_channels: vec![8, 16, 32],
            feature_dim: 64,
            lambda: 1.0,
            ihd: true,
            epochs: 3,
            batch_size: 64,
            learning_rate: 3e-5,
            seed: 42,
            record_trajectory: false,
        }
    }
}

impl ModelConfig {
    /// Spatial side length after the strided conv stack.
    pub fn conv_out_side(&self) -> usize {
        self.input_size >> self.conv_channels.len()
    }

    /// Flattened feature count entering the projection layer.
    pub fn flat_dim(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(3) * self.conv_out_side().pow(2)
    }

    fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("conv_channels must be non-empty".into()));
        }
        if self.input_size % (1 << self.conv_channels.len()) != 0 || self.conv_out_side() == 0 {
            return Err(Error::Config(format!(
                "input_size {} does not survive {} stride-2 blocks",
                self.input_size,
                self.conv_channels.len()
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training-ready sample: preprocessed planar image, labels, and
/// whether the hair objective must skip it (GAN synthetics carry no
/// trustworthy hair label).
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub chw: Vec<f64>,
    pub melanoma: u8,
    pub hair: u8,
    pub exclude_from_hair_loss: bool,
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochLoss {
    pub melanoma: f64,
    pub hair: f64,
}

/// Trained parameters plus the per-epoch loss log.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub groups: ParamGroups,
    pub loss_log: Vec<EpochLoss>,
    pub trajectory: Vec<(Params, Params)>,
}

/// Initialize the three parameter groups from independent seed streams, so
/// the presence of the hair head never shifts the other groups' draws.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamGroups> {
    cfg.validate()?;
    let mut groups = ParamGroups::default();

    let mut ext_rng = rng::stream(cfg.seed, "init.extractor");
    let mut prev = 3usize;
    for (i, &ch) in cfg.conv_channels.iter().enumerate() {
        let w = Tensor::he_uniform(vec![ch, prev, 3, 3], prev * 9, &mut ext_rng);
        groups.extractor.insert(format!("extractor.conv{i}.weight"), w);
        prev = ch;
    }
    let flat = cfg.flat_dim();
    groups.extractor.insert(
        "extractor.fc.weight".into(),
        Tensor::he_uniform(vec![cfg.feature_dim, flat], flat, &mut ext_rng),
    );
    groups
        .extractor
        .insert("extractor.fc.bias".into(), Tensor::zeros(vec![cfg.feature_dim]));

    let mut mel_rng = rng::stream(cfg.seed, "init.melanoma");
    let bound = (6.0 / (cfg.feature_dim + 2) as f64).sqrt();
    groups.melanoma.insert(
        "melanoma.fc.weight".into(),
        Tensor::uniform(vec![2, cfg.feature_dim], bound, &mut mel_rng),
    );
    groups
        .melanoma
        .insert("melanoma.fc.bias".into(), Tensor::zeros(vec![2]));

    if cfg.ihd {
        let mut hair_rng = rng::stream(cfg.seed, "init.hair");
        groups.hair.insert(
            "hair.fc.weight".into(),
            Tensor::uniform(vec![2, cfg.feature_dim], bound, &mut hair_rng),
        );
        groups.hair.insert("hair.fc.bias".into(), Tensor::zeros(vec![2]));
    }
    Ok(groups)
}

/// Register a parameter map on a tape.
pub fn register_params(
    tape: &mut Tape,
    params: &Params,
    trainable: bool,
) -> Result<BTreeMap<String, Var>> {
    let mut vars = BTreeMap::new();
    for (name, tensor) in params {
        vars.insert(name.clone(), tape.leaf(tensor.clone(), trainable)?);
    }
    Ok(vars)
}

/// Extractor forward pass: stride-2 conv/relu blocks, flatten, projection.
pub fn forward_features(
    tape: &mut Tape,
    x: Var,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    if tape.shape(x) != [n, 3, cfg.input_size, cfg.input_size] {
        return Err(Error::Dimension {
            op: "forward_features",
            detail: format!(
                "input {:?} does not match configured size {}",
                tape.shape(x),
                cfg.input_size
            ),
        });
    }
    let mut h = x;
    for i in 0..cfg.conv_channels.len() {
        let w = vars[&format!("extractor.conv{i}.weight")];
        h = tape.conv2d(h, w, 2, 1)?;
        h = tape.activation(h, Activation::Relu);
    }
    h = tape.reshape(h, vec![n, cfg.flat_dim()])?;
    h = tape.dense(h, vars["extractor.fc.weight"], vars["extractor.fc.bias"])?;
    Ok(tape.activation(h, Activation::Relu))
}

/// Melanoma probabilities from features.
pub fn melanoma_head(tape: &mut Tape, features: Var, vars: &BTreeMap<String, Var>) -> Result<Var> {
    let logits = tape.dense(features, vars["melanoma.fc.weight"], vars["melanoma.fc.bias"])?;
    tape.softmax(logits)
}

/// Hair probabilities from features, through the gradient reversal layer.
/// Forward values are independent of `lambda`.
pub fn hair_head(
    tape: &mut Tape,
    features: Var,
    vars: &BTreeMap<String, Var>,
    lambda: f64,
) -> Result<Var> {
    let reversed = tape.grad_reverse(features, lambda)?;
    let logits = tape.dense(reversed, vars["hair.fc.weight"], vars["hair.fc.bias"])?;
    tape.softmax(logits)
}

fn one_hot(labels: &[u8]) -> Tensor {
    let mut data = vec![0.0; labels.len() * 2];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 2 + usize::from(l == 1)] = 1.0;
    }
    Tensor::new(vec![labels.len(), 2], data).expect("sized by construction")
}

fn batch_tensor(samples: &[&PreparedSample], cfg: &ModelConfig) -> Result<Tensor> {
    let pix = 3 * cfg.input_size * cfg.input_size;
    let mut data = Vec::with_capacity(samples.len() * pix);
    for s in samples {
        if s.chw.len() != pix {
            return Err(Error::Dimension {
                op: "train",
                detail: format!("sample has {} values, expected {}", s.chw.len(), pix),
            });
        }
        data.extend_from_slice(&s.chw);
    }
    Tensor::new(vec![samples.len(), 3, cfg.input_size, cfg.input_size], data)
}

fn collect_grads(tape: &Tape, var_maps: &[&BTreeMap<String, Var>]) -> GradMap {
    let mut grads = GradMap::new();
    for vars in var_maps {
        for (name, &var) in vars.iter() {
            grads.insert(name.clone(), tape.grad(var).to_vec());
        }
    }
    grads
}

/// Train the joint model. Shuffling, init, and updates are all functions of
/// `cfg.seed`, so two runs with one config are identical.
pub fn train(data: &[PreparedSample], cfg: &ModelConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut groups = init_params(cfg)?;
    let hyper = AdamHyper { eta: cfg.learning_rate, ..AdamHyper::default() };
    let mut opt = JointAdam::new(hyper, cfg.lambda);
    let mut shuffle_rng = rng::stream(cfg.seed, "train.shuffle");
    let mut loss_log = Vec::with_capacity(cfg.epochs);
    let mut trajectory = Vec::new();

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_mel = 0.0;
        let mut epoch_hair = 0.0;
        let mut batches = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let x = batch_tensor(&samples, cfg)?;
            let y: Vec<u8> = samples.iter().map(|s| s.melanoma).collect();
            let yh: Vec<u8> = samples.iter().map(|s| s.hair).collect();
            let hair_weights: Vec<f64> = samples
                .iter()
                .map(|s| if s.exclude_from_hair_loss { 0.0 } else { 1.0 })
                .collect();

            let mut tape = Tape::new();
            let ext_vars = register_params(&mut tape, &groups.extractor, true)?;
            let mel_vars = register_params(&mut tape, &groups.melanoma, true)?;
            let hair_vars = register_params(&mut tape, &groups.hair, true)?;

            let xv = tape.constant(x)?;
            let feats = forward_features(&mut tape, xv, &ext_vars, cfg)?;
            let probs_m = melanoma_head(&mut tape, feats, &mel_vars)?;
            let yv = tape.constant(one_hot(&y))?;
            let loss_m = tape.cross_entropy(probs_m, yv)?;

            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )),
                other => other,
            };

            let hair_loss = if cfg.ihd {
                let probs_h = hair_head(&mut tape, feats, &hair_vars, cfg.lambda)?;
                let yhv = tape.constant(one_hot(&yh))?;
                Some(tape.cross_entropy_weighted(probs_h, yhv, &hair_weights)?)
            } else {
                None
            };

            tape.backward(loss_m).map_err(diverged)?;
            let grads_m = collect_grads(&tape, &[&ext_vars, &mel_vars]);
            let grads_h = match hair_loss {
                Some(loss_h) => {
                    tape.backward(loss_h).map_err(diverged)?;
                    collect_grads(&tape, &[&ext_vars, &hair_vars])
                }
                None => GradMap::new(),
            };
            opt.joint_step(&mut groups, &grads_m, &grads_h)?;

            epoch_mel += tape.value(loss_m)[0];
            epoch_hair += hair_loss.map_or(0.0, |l| tape.value(l)[0]);
            batches += 1.0;
        }
        loss_log.push(EpochLoss {
            melanoma: epoch_mel / batches,
            hair: epoch_hair / batches,
        });
        if cfg.record_trajectory {
            trajectory.push((groups.extractor.clone(), groups.melanoma.clone()));
        }
    }
    Ok(TrainedModel { config: cfg.clone(), groups, loss_log, trajectory })
}

/// Melanoma-positive probability per image, in input order.
pub fn predict_proba(images: &[Vec<f64>], model: &TrainedModel) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(images.len());
    let pix = 3 * cfg.input_size * cfg.input_size;
    for chunk in images.chunks(cfg.batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * pix);
        for img in chunk {
            if img.len() != pix {
                return Err(Error::Dimension {
                    op: "predict_proba",
                    detail: format!("image has {} values, expected {}", img.len(), pix),
                });
            }
            data.extend_from_slice(img);
        }
        let mut tape = Tape::new();
        let ext_vars = register_params(&mut tape, &model.groups.extractor, false)?;
        let mel_vars = register_params(&mut tape, &model.groups.melanoma, false)?;
        let x = Tensor::new(vec![chunk.len(), 3, cfg.input_size, cfg.input_size], data)?;
        let xv = tape.constant(x)?;
        let feats = forward_features(&mut tape, xv, &ext_vars, cfg)?;
        let probs = melanoma_head(&mut tape, feats, &mel_vars)?;
        for row in tape.value(probs).chunks(2) {
            out.push(row[1]);
        }
    }
    Ok(out)
}

/// Serialize a trained model (config echo + all parameter groups).
pub fn model_to_checkpoint(model: &TrainedModel) -> Checkpoint {
    let mut entries = Vec::new();
    for group in [&model.groups.extractor, &model.groups.melanoma, &model.groups.hair] {
        for (name, tensor) in group {
            entries.push((name.clone(), tensor.clone()));
        }
    }
    Checkpoint {
        kind: "model".into(),
        config: serde_json::to_string_pretty(&model.config).expect("config serializes"),
        entries,
    }
}

/// Rebuild a trained model from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainedModel> {
    if ckpt.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "expected a model checkpoint, got '{}'",
            ckpt.kind
        )));
    }
    let config: ModelConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
    let mut groups = ParamGroups::default();
    for (name, tensor) in &ckpt.entries {
        let target = if name.starts_with("extractor.") {
            &mut groups.extractor
        } else if name.starts_with("melanoma.") {
            &mut groups.melanoma
        } else if name.starts_with("hair.") {
            &mut groups.hair
        } else {
            return Err(Error::Checkpoint(format!("unknown parameter '{name}'")));
        };
        target.insert(name.clone(), tensor.clone());
    }
    Ok(TrainedModel { config, groups, loss_log: Vec::new(), trajectory: Vec::new() })
}
