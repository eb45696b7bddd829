//! GAN-based data augmentation: a small decoupled DCGAN trained with the
//! Wasserstein objective and weight clipping, plus the minimum-MSE
//! non-repeatability filter applied to every emitted sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, LabeledSample, Source};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{rmsprop_step, GradMap, Params, RmsPropState};
use crate::rng;
use crate::tape::{Activation, BnMode, RunningStats, Tape, Var};
use crate::tensor::Tensor;

/// DCGAN architecture and training configuration. The generator starts from
/// a 4x4 projection and doubles the side with each stride-2 transposed
/// convolution, so `img_size` must be a power of two.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanConfig {
    pub z_dim: usize,
    pub img_size: usize,
    pub gen_channels: Vec<usize>,
    pub critic_channels: Vec<usize>,
    pub learning_rate: f64,
    pub rho: f64,
    pub critic_steps_per_gen: usize,
    pub clip_c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            z_dim: 64,
            img_size: 32,
            gen_channels: vec![128, 64, 32],
            critic_channels: vec![32, 64, 128],
            learning_rate: 2e-4,
            rho: 0.9,
            critic_steps_per_gen: 3,
            clip_c: 0.01,
            epochs: 60,
            batch_size: 16,
            seed: 42,
        }
    }
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-5;

impl GanConfig {
    /// Number of stride-2 blocks between the 4x4 base and `img_size`.
    pub fn n_blocks(&self) -> usize {
        (self.img_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size < 32 || !self.img_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "img_size must be a power of two >= 32, got {}",
                self.img_size
            )));
        }
        if self.gen_channels.len() != self.n_blocks() || self.critic_channels.len() != self.n_blocks() {
            return Err(Error::Config(format!(
                "img_size {} needs {} generator and critic channel entries, got {} and {}",
                self.img_size,
                self.n_blocks(),
                self.gen_channels.len(),
                self.critic_channels.len()
            )));
        }
        if self.z_dim == 0 || self.batch_size < 2 {
            return Err(Error::Config("z_dim must be >= 1 and batch_size >= 2".into()));
        }
        Ok(())
    }

    /// Closed-form generator parameter count:
    /// projection `z*16*c0 + 16*c0`, one gamma/beta pair per batch-norm
    /// stage, and `in*out*16` per transposed-conv kernel (the final kernel
    /// maps to 3 channels).
    pub fn generator_param_count(&self) -> usize {
        let c = &self.gen_channels;
        let n = self.n_blocks();
        let mut total = self.z_dim * 16 * c[0] + 16 * c[0];
        for i in 0..n {
            let out = if i + 1 < n { c[i + 1] } else { 3 };
            total += c[i] * out * 16;
            total += 2 * c[i]; // gamma/beta normalizing this block's input
        }
        total
    }

    /// Closed-form critic parameter count: `in*out*16` per conv kernel plus
    /// the final linear score layer.
    pub fn critic_param_count(&self) -> usize {
        let c = &self.critic_channels;
        let mut total = 0;
        let mut prev = 3;
        for &ch in c {
            total += prev * ch * 16;
            prev = ch;
        }
        total + prev * 16 + 1
    }
}

/// Generator and critic parameters with the generator's batch-norm state.
#[derive(Clone, Debug)]
pub struct GanPair {
    pub config: GanConfig,
    pub gen_params: Params,
    pub gen_bn: Vec<RunningStats>,
    pub critic_params: Params,
}

/// Per-epoch mean Wasserstein losses.
#[derive(Clone, Copy, Debug)]
pub struct GanEpochLoss {
    pub critic: f64,
    pub generator: f64,
}

/// Generator parameters: dense projection to 4x4, then stride-2
/// transposed-conv blocks with batch norm and relu, ending in tanh.
pub fn build_generator(cfg: &GanConfig) -> Result<(Params, Vec<RunningStats>)> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "gan.init.generator");
    let mut params = Params::new();
    let c = &cfg.gen_channels;
    let n = cfg.n_blocks();
    params.insert(
        "gen.proj.weight".into(),
        Tensor::he_uniform(vec![16 * c[0], cfg.z_dim], cfg.z_dim, &mut rng),
    );
    params.insert("gen.proj.bias".into(), Tensor::zeros(vec![16 * c[0]]));
    let mut bn = Vec::with_capacity(n);
    for i in 0..n {
        let out = if i + 1 < n { c[i + 1] } else { 3 };
        params.insert(
            format!("gen.convt{i}.kernel"),
            Tensor::he_uniform(vec![c[i], out, 4, 4], c[i] * 16, &mut rng),
        );
        params.insert(format!("gen.bn{i}.gamma"), Tensor::filled(vec![c[i]], 1.0));
        params.insert(format!("gen.bn{i}.beta"), Tensor::zeros(vec![c[i]]));
        bn.push(RunningStats::new(c[i]));
    }
    Ok((params, bn))
}

/// Critic parameters: stride-2 conv + leaky-relu blocks ending in a single
/// linear score (no sigmoid). Weights start inside the clipping box.
pub fn build_discriminator(cfg: &GanConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "gan.init.critic");
    let mut params = Params::new();
    let mut prev = 3usize;
    for (i, &ch) in cfg.critic_channels.iter().enumerate() {
        params.insert(
            format!("critic.conv{i}.kernel"),
            Tensor::uniform(vec![ch, prev, 4, 4], cfg.clip_c, &mut rng),
        );
        prev = ch;
    }
    params.insert(
        "critic.fc.weight".into(),
        Tensor::uniform(vec![1, prev * 16], cfg.clip_c, &mut rng),
    );
    params.insert("critic.fc.bias".into(), Tensor::zeros(vec![1]));
    Ok(params)
}

fn register(tape: &mut Tape, params: &Params, trainable: bool) -> Result<std::collections::BTreeMap<String, Var>> {
    crate::model::register_params(tape, params, trainable)
}

/// Generator forward pass on a tape. Train mode folds batch statistics into
/// `bn`; eval mode reads them.
pub fn generator_forward(
    tape: &mut Tape,
    z: Var,
    vars: &std::collections::BTreeMap<String, Var>,
    bn: &mut [RunningStats],
    cfg: &GanConfig,
    mode: BnMode,
) -> Result<Var> {
    let n = tape.shape(z)[0];
    let c = &cfg.gen_channels;
    let blocks = cfg.n_blocks();
    let mut h = tape.dense(z, vars["gen.proj.weight"], vars["gen.proj.bias"])?;
    h = tape.reshape(h, vec![n, c[0], 4, 4])?;
    for i in 0..blocks {
        h = tape.batch_norm(
            h,
            vars[&format!("gen.bn{i}.gamma")],
            vars[&format!("gen.bn{i}.beta")],
            &mut bn[i],
            mode,
            BN_MOMENTUM,
            BN_EPSILON,
        )?;
        h = tape.activation(h, Activation::Relu);
        h = tape.conv_transpose2d(h, vars[&format!("gen.convt{i}.kernel")], 2, 1)?;
    }
    Ok(tape.activation(h, Activation::Tanh))
}

/// Critic forward pass: scores of shape `[N,1]`.
pub fn critic_forward(
    tape: &mut Tape,
    x: Var,
    vars: &std::collections::BTreeMap<String, Var>,
    cfg: &GanConfig,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let mut h = x;
    for i in 0..cfg.critic_channels.len() {
        h = tape.conv2d(h, vars[&format!("critic.conv{i}.kernel")], 2, 1)?;
        h = tape.activation(h, Activation::LeakyRelu(0.2));
    }
    let flat = cfg.critic_channels.last().unwrap() * 16;
    h = tape.reshape(h, vec![n, flat])?;
    tape.dense(h, vars["critic.fc.weight"], vars["critic.fc.bias"])
}

fn clip_params(params: &mut Params, c: f64) {
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

fn sample_z(n: usize, z_dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * z_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![n, z_dim], data).expect("sized by construction")
}

fn images_to_pm1(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.data().iter().map(|v| v * 2.0 - 1.0));
    }
    Tensor::new(vec![images.len(), 3, h, w], data).expect("sized by construction")
}

/// Train the decoupled DCGAN on melanoma-positive images with alternating
/// critic/generator RMSprop updates and critic weight clipping.
pub fn train_dcgan(positives: &Dataset, cfg: &GanConfig) -> Result<(GanPair, Vec<GanEpochLoss>)> {
    cfg.validate()?;
    if positives.is_empty() {
        return Err(Error::Config("GAN training set is empty".into()));
    }
    if let Some(bad) = positives.samples.iter().find(|s| s.melanoma != 1) {
        return Err(Error::Contract {
            op: "train_dcgan",
            detail: format!("sample '{}' is not melanoma-positive", bad.id),
        });
    }
    if positives
        .samples
        .iter()
        .any(|s| s.image.height() != cfg.img_size || s.image.width() != cfg.img_size)
    {
        return Err(Error::Config(format!(
            "all GAN training images must be {0}x{0}; resize first",
            cfg.img_size
        )));
    }

    let (mut gen_params, mut gen_bn) = build_generator(cfg)?;
    let mut critic_params = build_discriminator(cfg)?;
    let mut gen_opt = RmsPropState::new(cfg.rho, cfg.learning_rate, 1e-8);
    let mut critic_opt = RmsPropState::new(cfg.rho, cfg.learning_rate, 1e-8);
    let mut z_rng = rng::stream(cfg.seed, "gan.z");
    let mut batch_rng = rng::stream(cfg.seed, "gan.batch");

    let n = positives.len();
    let iterations = n.div_ceil(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_critic = 0.0;
        let mut epoch_gen = 0.0;
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence(format!("non-finite GAN loss at epoch {epoch}")),
            other => other,
        };
        for _ in 0..iterations {
            for _ in 0..cfg.critic_steps_per_gen {
                // fake batch, detached from the generator
                let fake = {
                    let mut tape = Tape::new();
                    let gvars = register(&mut tape, &gen_params, false)?;
                    let z = tape.constant(sample_z(cfg.batch_size, cfg.z_dim, &mut z_rng))?;
                    let out = generator_forward(&mut tape, z, &gvars, &mut gen_bn, cfg, BnMode::Train)?;
                    tape.to_tensor(out)
                };
                let reals: Vec<&Image> = (0..cfg.batch_size)
                    .map(|_| &positives.samples[batch_rng.gen_range(0..n)].image)
                    .collect();

                let mut tape = Tape::new();
                let cvars = register(&mut tape, &critic_params, true)?;
                let real_v = tape.constant(images_to_pm1(&reals))?;
                let fake_v = tape.constant(fake)?;
                let real_scores = critic_forward(&mut tape, real_v, &cvars, cfg)?;
                let fake_scores = critic_forward(&mut tape, fake_v, &cvars, cfg)?;
                let (critic_loss, _) = tape.wgan_losses(real_scores, fake_scores)?;
                tape.backward(critic_loss).map_err(diverged)?;
                let grads: GradMap = cvars
                    .iter()
                    .map(|(name, &v)| (name.clone(), tape.grad(v).to_vec()))
                    .collect();
                rmsprop_step(&mut critic_params, &grads, &mut critic_opt)?;
                clip_params(&mut critic_params, cfg.clip_c);
                epoch_critic += tape.value(critic_loss)[0];
            }

            // generator step: gradient flows through the critic into G
            let mut tape = Tape::new();
            let gvars = register(&mut tape, &gen_params, true)?;
            let cvars = register(&mut tape, &critic_params, false)?;
            let z = tape.constant(sample_z(cfg.batch_size, cfg.z_dim, &mut z_rng))?;
            let fake = generator_forward(&mut tape, z, &gvars, &mut gen_bn, cfg, BnMode::Train)?;
            let fake_scores = critic_forward(&mut tape, fake, &cvars, cfg)?;
            let mean_fake = tape.mean(fake_scores);
            let gen_loss = tape.neg(mean_fake);
            tape.backward(gen_loss).map_err(diverged)?;
            let grads: GradMap = gvars
                .iter()
                .map(|(name, &v)| (name.clone(), tape.grad(v).to_vec()))
                .collect();
            rmsprop_step(&mut gen_params, &grads, &mut gen_opt)?;
            epoch_gen += tape.value(gen_loss)[0];
        }
        losses.push(GanEpochLoss {
            critic: epoch_critic / (iterations * cfg.critic_steps_per_gen) as f64,
            generator: epoch_gen / iterations as f64,
        });
    }
    Ok((
        GanPair {
            config: cfg.clone(),
            gen_params,
            gen_bn,
            critic_params,
        },
        losses,
    ))
}

/// Draw `n` images from the generator (eval-mode batch norm), mapped from
/// tanh range to `[0,1]`.
pub fn sample_images(gan: &GanPair, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Image>> {
    let cfg = &gan.config;
    let mut out = Vec::with_capacity(n);
    let mut bn = gan.gen_bn.clone();
    let mut remaining = n;
    while remaining > 0 {
        let batch = remaining.min(cfg.batch_size.max(2));
        let mut tape = Tape::new();
        let gvars = register(&mut tape, &gan.gen_params, false)?;
        let z = tape.constant(sample_z(batch, cfg.z_dim, rng))?;
        let img_var = generator_forward(&mut tape, z, &gvars, &mut bn, cfg, BnMode::Eval)?;
        let pix = 3 * cfg.img_size * cfg.img_size;
        let data = tape.value(img_var);
        for b in 0..batch {
            let chw: Vec<f64> = data[b * pix..(b + 1) * pix]
                .iter()
                .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
                .collect();
            out.push(Image::from_planar(cfg.img_size, cfg.img_size, chw)?);
        }
        remaining -= batch;
    }
    Ok(out)
}

/// Index and value of the minimum per-pixel mean squared error between
/// `image` and every training image.
pub fn nearest_train_mse(image: &Image, train: &Dataset) -> Result<(usize, f64)> {
    if train.is_empty() {
        return Err(Error::Parameter {
            op: "nearest_train_mse",
            detail: "training set is empty".into(),
        });
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, s) in train.samples.iter().enumerate() {
        if s.image.data().len() != image.data().len() {
            return Err(Error::Dimension {
                op: "nearest_train_mse",
                detail: format!(
                    "image has {} values, training image '{}' has {}",
                    image.data().len(),
                    s.id,
                    s.image.data().len()
                ),
            });
        }
        let mse = image
            .data()
            .iter()
            .zip(s.image.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / image.data().len() as f64;
        if mse < best.1 {
            best = (i, mse);
        }
    }
    Ok(best)
}

/// Data-relative default for the diversity floor: the 1st percentile of
/// pairwise training-image MSEs (0 when fewer than two images).
pub fn default_mse_floor(train: &Dataset) -> f64 {
    let n = train.len();
    if n < 2 {
        return 0.0;
    }
    let mut mses = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = train.samples[i].image.data();
            let b = train.samples[j].image.data();
            let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
            mses.push(mse);
        }
    }
    mses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mses[(mses.len() as f64 * 0.01).floor() as usize]
}

/// Draw generator candidates, reject any closer than `mse_floor` to a
/// training image, and label survivors as synthetic melanoma positives.
/// Gives up with a diversity-failure report once the retry budget
/// (`retry_per_sample * n + 100` candidates) is exhausted.
pub fn sample_synthetic(
    gan: &GanPair,
    n: usize,
    train: &Dataset,
    mse_floor: f64,
    retry_per_sample: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let mut rng = rng::stream(seed, "gan.sample");
    let mut accepted = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let budget = retry_per_sample.max(1) * n + 100;
    while accepted.len() < n {
        let batch = (n - accepted.len()).min(gan.config.batch_size.max(2));
        for image in sample_images(gan, batch, &mut rng)? {
            attempts += 1;
            let keep = mse_floor <= 0.0 || nearest_train_mse(&image, train)?.1 >= mse_floor;
            if keep && accepted.len() < n {
                accepted.push(LabeledSample {
                    id: format!("gan_{:05}", accepted.len()),
                    image,
                    melanoma: 1,
                    hair: 0,
                    source: Source::SyntheticGan,
                });
            }
        }
        if accepted.len() < n && attempts >= budget {
            return Err(Error::DiversityFailure {
                requested: n,
                accepted: accepted.len(),
                attempts,
                rate: accepted.len() as f64 / attempts as f64,
            });
        }
    }
    Ok(accepted)
}

/// Serialize generator, critic, and batch-norm state.
pub fn gan_to_checkpoint(gan: &GanPair) -> Checkpoint {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in gan.gen_params.iter().chain(gan.critic_params.iter()) {
        entries.push((name.clone(), t.clone()));
    }
    for (i, bn) in gan.gen_bn.iter().enumerate() {
        entries.push((
            format!("gen.bn{i}.running_mean"),
            Tensor::new(vec![bn.mean.len()], bn.mean.clone()).expect("consistent"),
        ));
        entries.push((
            format!("gen.bn{i}.running_var"),
            Tensor::new(vec![bn.var.len()], bn.var.clone()).expect("consistent"),
        ));
    }
    Checkpoint {
        kind: "gan".into(),
        config: serde_json::to_string_pretty(&gan.config).expect("config serializes"),
        entries,
    }
}

/// Rebuild a [`GanPair`] from a checkpoint.
pub fn gan_from_checkpoint(ckpt: &Checkpoint) -> Result<GanPair> {
    if ckpt.kind != "gan" {
        return Err(Error::Checkpoint(format!(
            "expected a gan checkpoint, got '{}'",
            ckpt.kind
        )));
    }
    let config: GanConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
    let mut gen_params = Params::new();
    let mut critic_params = Params::new();
    let mut bn = vec![RunningStats::new(0); config.n_blocks()];
    for (name, tensor) in &ckpt.entries {
        if let Some(rest) = name.strip_prefix("gen.bn") {
            if let Some((idx, field)) = rest.split_once('.') {
                if field == "running_mean" || field == "running_var" {
                    let i: usize = idx
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad bn index in '{name}'")))?;
                    if field == "running_mean" {
                        bn[i].mean = tensor.data().to_vec();
                    } else {
                        bn[i].var = tensor.data().to_vec();
                    }
                    continue;
                }
            }
        }
        if name.starts_with("gen.") {
            gen_params.insert(name.clone(), tensor.clone());
        } else if name.starts_with("critic.") {
            critic_params.insert(name.clone(), tensor.clone());
        } else {
            return Err(Error::Checkpoint(format!("unknown entry '{name}'")));
        }
    }
    Ok(GanPair { config, gen_params, gen_bn: bn, critic_params })
}
