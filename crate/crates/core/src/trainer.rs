//! Training regimes: baseline VQ-VAE, continuous autoencoder pretraining, and
//! deferred quantization (pretrain, then VQ with a pretrained-encoder codebook).

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::init::{init_codebook, EmbeddingSource, InitMode};
use crate::matrix::Matrix;
use crate::nn::{mse_loss, AdamW, AdamWConfig, Checkpoint, MlpParams, Tensor};
use crate::quantizer::{
    commit_loss_grad, mean_pairwise_distance, perplexity, straight_through_backward, Codebook,
    CodebookUpdate,
};
use crate::rng;
use crate::synth::LabeledDataset;
use crate::textfmt::fmt_g9;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mse: f64,
    /// β-weighted commitment loss.
    pub commit: f64,
    pub codebook: f64,
    /// Absent for the continuous autoencoder.
    pub perplexity: Option<f64>,
    pub mean_pairwise_dist: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV `epoch,loss,mse,commit,codebook,perplexity,mean_pairwise_dist`.
    /// Wall-clock time is left out so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,mse,commit,codebook,perplexity,mean_pairwise_dist\n");
        let opt = |v: Option<f64>| v.map(fmt_g9).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                fmt_g9(r.loss),
                fmt_g9(r.mse),
                fmt_g9(r.commit),
                fmt_g9(r.codebook),
                opt(r.perplexity),
                opt(r.mean_pairwise_dist)
            ));
        }
        out
    }
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub commit: f64,
    pub codebook: f64,
    pub batch_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqModel {
    pub params: MlpParams,
    pub codebook: Codebook,
}

impl VqModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut t = self.params.to_tensors();
        let cb = &self.codebook;
        let (s, d) = cb.tokens.shape();
        t.push(Tensor::new("codebook.tokens".into(), vec![s, d], cb.tokens.as_slice().to_vec()));
        t.push(Tensor::new("codebook.ema_cluster_size".into(), vec![s], cb.ema_cluster_size.clone()));
        t.push(Tensor::new(
            "codebook.ema_embed_sum".into(),
            vec![s, d],
            cb.ema_embed_sum.as_slice().to_vec(),
        ));
        t.push(Tensor::new("codebook.decay_beta".into(), vec![2], vec![cb.decay, cb.beta]));
        Checkpoint::new(t)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = MlpParams::from_checkpoint(ckpt)?;
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` (encoder-only checkpoint?)")))
        };
        let hyper = &get("codebook.decay_beta")?.data;
        if hyper.len() != 2 {
            return Err(Error::Checkpoint("codebook.decay_beta must hold 2 values".into()));
        }
        let mut codebook = Codebook::new(get("codebook.tokens")?.to_matrix()?, hyper[0], hyper[1])?;
        codebook.ema_cluster_size = get("codebook.ema_cluster_size")?.data.clone();
        codebook.ema_embed_sum = get("codebook.ema_embed_sum")?.to_matrix()?;
        if codebook.ema_cluster_size.len() != codebook.size()
            || codebook.ema_embed_sum.shape() != codebook.tokens.shape()
        {
            return Err(Error::Checkpoint("codebook EMA state has the wrong shape".into()));
        }
        if codebook.dim() != params.latent_dim() {
            return Err(Error::Checkpoint("codebook and encoder dims differ".into()));
        }
        Ok(Self { params, codebook })
    }

    /// Evaluation pass: resets and refills `usage_counts` over `points`.
    pub fn record_usage(&mut self, points: &Matrix, batch_size: usize) -> Result<()> {
        self.codebook.reset_usage();
        let idx: Vec<usize> = (0..points.rows()).collect();
        for batch in idx.chunks(batch_size.max(1)) {
            let z = self.params.encoder.infer(&points.select_rows(batch))?;
            self.codebook.assign_and_record(&z)?;
        }
        Ok(())
    }
}

/// Encode, snap to the nearest token, decode. No gradient state is touched.
pub fn reconstruct(params: &MlpParams, codebook: &Codebook, points: &Matrix) -> Result<Matrix> {
    if points.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "reconstruct",
            expected: params.input_dim(),
            actual: points.cols(),
        });
    }
    let z = params.encoder.infer(points)?;
    let idx = codebook.assign(&z)?;
    params.decoder.infer(&codebook.tokens.select_rows(&idx))
}

/// Optimizer state for one VQ training run.
pub struct VqTrainer {
    pub model: VqModel,
    update: CodebookUpdate,
    opt: AdamW,
    token_opt: Option<AdamW>,
}

impl VqTrainer {
    pub fn new(model: VqModel, adamw: AdamWConfig, update: CodebookUpdate) -> Self {
        let token_opt = (update == CodebookUpdate::Gradient).then(|| {
            AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..adamw
            })
        });
        Self {
            model,
            update,
            opt: AdamW::new(adamw),
            token_opt,
        }
    }

    /// One forward/backward/update on a batch; returns assignments alongside the losses.
    pub fn step(&mut self, x: &Matrix) -> Result<(StepStats, Vec<usize>)> {
        let VqModel { params, codebook } = &mut self.model;
        let z = params.encoder.forward(x)?;
        let q = codebook.quantize(&z)?;
        let recon = params.decoder.forward(&q.straight_through_output)?;
        let (mse, grad_recon) = mse_loss(&recon, x)?;
        let codebook_term = match self.update {
            CodebookUpdate::Ema => 0.0,
            CodebookUpdate::Gradient => q.codebook_loss,
        };
        let loss = mse + q.commit_loss + codebook_term;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let (grad_q, dec_grads) = params.decoder.backward(&grad_recon)?;
        let mut grad_z = straight_through_backward(&grad_q);
        grad_z.add_assign(&commit_loss_grad(&z, &q.quantized, codebook.beta)?)?;
        let (_, enc_grads) = params.encoder.backward(&grad_z)?;

        let mut grads = enc_grads;
        grads.extend(dec_grads);
        self.opt.step(&mut params.params_mut(), &grads)?;
        match self.update {
            CodebookUpdate::Ema => codebook.ema_update(&z, &q.indices)?,
            CodebookUpdate::Gradient => {
                let g = codebook.codebook_loss_grad(&z, &q)?;
                self.token_opt
                    .as_mut()
                    .expect("gradient mode has a token optimizer")
                    .step(&mut [codebook.tokens.as_mut_slice()], &[g.into_vec()])?;
            }
        }
        Ok((
            StepStats {
                loss,
                mse,
                commit: q.commit_loss,
                codebook: q.codebook_loss,
                batch_len: x.rows(),
            },
            q.indices,
        ))
    }
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE_BASE + epoch as u64));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Default)]
struct EpochAccumulator {
    n: f64,
    loss: f64,
    mse: f64,
    commit: f64,
    codebook: f64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &StepStats) {
        let w = s.batch_len as f64;
        self.n += w;
        self.loss += s.loss * w;
        self.mse += s.mse * w;
        self.commit += s.commit * w;
        self.codebook += s.codebook * w;
    }
}

fn fault(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::TrainingFault { epoch, message: format!("non-finite {m}") },
        other => other,
    }
}

/// Runs `epochs` VQ epochs on an already initialized model.
pub fn train_vq_epochs(
    model: VqModel,
    config: &TrainConfig,
    dataset: &LabeledDataset,
    epochs: usize,
) -> Result<(VqModel, TrainLog)> {
    let mut trainer = VqTrainer::new(model, config.adamw(), config.quantizer.codebook_update);
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut acc = EpochAccumulator::default();
        let mut usage = vec![0u64; trainer.model.codebook.size()];
        for batch in epoch_batches(dataset.len(), config.train.batch_size, config.seed, epoch) {
            let x = dataset.points.select_rows(&batch);
            let (stats, idx) = trainer.step(&x).map_err(|e| fault(epoch, e))?;
            acc.add(&stats);
            for k in idx {
                usage[k] += 1;
            }
        }
        let tokens = &trainer.model.codebook.tokens;
        let record = EpochRecord {
            epoch,
            loss: acc.loss / acc.n,
            mse: acc.mse / acc.n,
            commit: acc.commit / acc.n,
            codebook: acc.codebook / acc.n,
            perplexity: Some(perplexity(&usage)?),
            mean_pairwise_dist: if tokens.rows() >= 2 {
                Some(mean_pairwise_distance(tokens)?)
            } else {
                None
            },
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        if !tokens.all_finite() || !record.loss.is_finite() {
            return Err(Error::TrainingFault {
                epoch,
                message: "non-finite codebook or loss".into(),
            });
        }
        log.records.push(record);
    }
    Ok((trainer.model, log))
}

pub fn fresh_params(config: &TrainConfig) -> MlpParams {
    MlpParams::new(
        config.data.dim,
        config.model.hidden_dim,
        config.latent_dim(),
        &mut rng::stream(config.seed, rng::STREAM_PARAM_INIT),
    )
}

fn check_data(config: &TrainConfig, dataset: &LabeledDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if dataset.dim() != config.data.dim {
        return Err(Error::DimensionMismatch {
            context: "training data",
            expected: config.data.dim,
            actual: dataset.dim(),
        });
    }
    Ok(())
}

/// Initial VQ model: given encoder/decoder plus a k-means codebook from that encoder.
pub fn init_vq_model(
    params: MlpParams,
    source: EmbeddingSource,
    config: &TrainConfig,
    dataset: &LabeledDataset,
) -> Result<VqModel> {
    let mode = match source {
        EmbeddingSource::Untrained => InitMode::UntrainedEncoder,
        EmbeddingSource::Pretrained => InitMode::PretrainedEncoder,
    };
    let codebook = init_codebook(
        mode,
        &params.encoder,
        source,
        &dataset.points,
        &config.init_config(),
        config.seed,
    )?;
    Ok(VqModel { params, codebook })
}

/// VQ-VAE from scratch with the codebook initialized from the untrained encoder.
pub fn train_baseline_vq(config: &TrainConfig, dataset: &LabeledDataset) -> Result<(VqModel, TrainLog)> {
    check_data(config, dataset)?;
    let model = init_vq_model(fresh_params(config), EmbeddingSource::Untrained, config, dataset)?;
    train_vq_epochs(model, config, dataset, config.train.epochs)
}

/// Continuous autoencoder: pure reconstruction loss, no quantizer in the path.
pub fn train_ae(config: &TrainConfig, dataset: &LabeledDataset, epochs: usize) -> Result<(MlpParams, TrainLog)> {
    check_data(config, dataset)?;
    let mut params = fresh_params(config);
    let mut opt = AdamW::new(config.adamw());
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let mut acc = EpochAccumulator::default();
        for batch in epoch_batches(dataset.len(), config.train.batch_size, config.seed, epoch) {
            let x = dataset.points.select_rows(&batch);
            let z = params.encoder.forward(&x)?;
            let recon = params.decoder.forward(&z)?;
            let (mse, grad) = mse_loss(&recon, &x)?;
            if !mse.is_finite() {
                return Err(Error::TrainingFault {
                    epoch,
                    message: "non-finite reconstruction loss".into(),
                });
            }
            let (grad_z, dec_grads) = params.decoder.backward(&grad)?;
            let (_, mut grads) = params.encoder.backward(&grad_z)?;
            grads.extend(dec_grads);
            opt.step(&mut params.params_mut(), &grads).map_err(|e| fault(epoch, e))?;
            acc.add(&StepStats {
                loss: mse,
                mse,
                commit: 0.0,
                codebook: 0.0,
                batch_len: x.rows(),
            });
        }
        log.records.push(EpochRecord {
            epoch,
            loss: acc.loss / acc.n,
            mse: acc.mse / acc.n,
            commit: 0.0,
            codebook: 0.0,
            perplexity: None,
            mean_pairwise_dist: None,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}

/// Discretization phase from pretrained autoencoder weights.
pub fn train_deferred_vq(
    config: &TrainConfig,
    dataset: &LabeledDataset,
    pretrained: MlpParams,
) -> Result<(VqModel, TrainLog)> {
    check_data(config, dataset)?;
    if pretrained.input_dim() != config.data.dim || pretrained.latent_dim() != config.latent_dim() {
        return Err(Error::Checkpoint(format!(
            "pretrained model maps {} -> {}, config expects {} -> {}",
            pretrained.input_dim(),
            pretrained.latent_dim(),
            config.data.dim,
            config.latent_dim()
        )));
    }
    let model = init_vq_model(pretrained, EmbeddingSource::Pretrained, config, dataset)?;
    train_vq_epochs(model, config, dataset, config.train.epochs)
}

pub fn train_deferred_vq_from_checkpoint(
    config: &TrainConfig,
    dataset: &LabeledDataset,
    checkpoint: &Path,
) -> Result<(VqModel, TrainLog)> {
    let params = MlpParams::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    train_deferred_vq(config, dataset, params)
}

/// Everything a regime produces.
#[derive(Debug, Clone)]
pub struct RegimeOutput {
    /// Present for the VQ regimes.
    pub model: Option<VqModel>,
    /// Final encoder/decoder (the VQ model's for VQ regimes).
    pub params: MlpParams,
    pub log: TrainLog,
    /// Autoencoder phase of `deferred_vq` when it was trained in-process.
    pub pretrain: Option<(MlpParams, TrainLog)>,
}

/// Dispatches on `config.train.regime`.
pub fn run_regime(config: &TrainConfig, dataset: &LabeledDataset) -> Result<RegimeOutput> {
    match config.train.regime {
        Regime::BaselineVq => {
            let (model, log) = train_baseline_vq(config, dataset)?;
            Ok(RegimeOutput {
                params: model.params.clone(),
                model: Some(model),
                log,
                pretrain: None,
            })
        }
        Regime::AePretrain => {
            let (params, log) = train_ae(config, dataset, config.train.epochs)?;
            Ok(RegimeOutput {
                model: None,
                params,
                log,
                pretrain: None,
            })
        }
        Regime::DeferredVq => {
            let (pretrained, pretrain) = match &config.train.pretrained_checkpoint {
                Some(path) => (MlpParams::from_checkpoint(&Checkpoint::load(path)?)?, None),
                None => {
                    let (p, log) = train_ae(config, dataset, config.train.ae_epochs)?;
                    (p.clone(), Some((p, log)))
                }
            };
            let (model, log) = train_deferred_vq(config, dataset, pretrained)?;
            Ok(RegimeOutput {
                params: model.params.clone(),
                model: Some(model),
                log,
                pretrain,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GaussianMixtureSpec};

    fn small_config(dim: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.data.dim = dim;
        cfg.data.num_components = 4;
        cfg.data.points_per_component = 100;
        cfg.quantizer.codebook_size = 16;
        cfg.model.hidden_dim = 8;
        cfg.train.batch_size = 64;
        cfg.train.epochs = 3;
        cfg
    }

    fn dataset(cfg: &TrainConfig) -> LabeledDataset {
        generate(&cfg.mixture_spec().unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let mut cfg = small_config(2);
        cfg.train.epochs = 0;
        let ds = dataset(&cfg);
        let (model, log) = train_baseline_vq(&cfg, &ds).unwrap();
        assert!(log.records.is_empty());
        let init = init_vq_model(fresh_params(&cfg), EmbeddingSource::Untrained, &cfg, &ds).unwrap();
        assert_eq!(model, init);
        let (params, log) = train_ae(&cfg, &ds, 0).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(params, fresh_params(&cfg));
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small_config(2);
        let ds = dataset(&cfg);
        let (m1, l1) = train_baseline_vq(&cfg, &ds).unwrap();
        let (m2, l2) = train_baseline_vq(&cfg, &ds).unwrap();
        assert_eq!(l1.to_csv(), l2.to_csv());
        assert_eq!(m1, m2);
        assert_eq!(l1.records.len(), 3);
        for r in &l1.records {
            assert!(r.loss.is_finite() && r.perplexity.unwrap() >= 1.0);
        }
    }

    #[test]
    fn loss_decomposes_every_step() {
        for update in [CodebookUpdate::Ema, CodebookUpdate::Gradient] {
            let mut cfg = small_config(2);
            cfg.quantizer.codebook_update = update;
            let ds = dataset(&cfg);
            let model = init_vq_model(fresh_params(&cfg), EmbeddingSource::Untrained, &cfg, &ds).unwrap();
            let mut tr = VqTrainer::new(model, cfg.adamw(), update);
            for batch in epoch_batches(ds.len(), 64, 0, 0) {
                let (s, _) = tr.step(&ds.points.select_rows(&batch)).unwrap();
                let cb = if update == CodebookUpdate::Gradient { s.codebook } else { 0.0 };
                assert!((s.loss - (s.mse + s.commit + cb)).abs() <= 1e-10);
                assert!((s.commit - cfg.quantizer.beta * s.codebook).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn encoder_receives_gradient_through_straight_through() {
        let cfg = small_config(2);
        let ds = dataset(&cfg);
        let mut model = init_vq_model(fresh_params(&cfg), EmbeddingSource::Untrained, &cfg, &ds).unwrap();
        let x = ds.points.select_rows(&[0, 150, 390]);
        let z = model.params.encoder.forward(&x).unwrap();
        let q = model.codebook.quantize(&z).unwrap();
        let recon = model.params.decoder.forward(&q.straight_through_output).unwrap();
        let (mse, g) = mse_loss(&recon, &x).unwrap();
        assert!(mse > 0.0);
        let (gq, _) = model.params.decoder.backward(&g).unwrap();
        let (_, enc_grads) = model.params.encoder.backward(&straight_through_backward(&gq)).unwrap();
        assert!(enc_grads.iter().flatten().any(|v| *v != 0.0));
    }

    #[test]
    fn ae_learns_a_single_point() {
        let mut cfg = small_config(2);
        cfg.data.num_components = 1;
        let mut ds = dataset(&cfg);
        ds.points = Matrix::from_rows(&vec![vec![0.7, -0.4]; 100]);
        let (_, log) = train_ae(&cfg, &ds, 400).unwrap();
        let first = log.records[0].mse;
        let last = log.last().unwrap().mse;
        assert!(last < 1e-2 * first, "{first} -> {last}");
    }

    #[test]
    fn deferred_from_untrained_checkpoint_matches_baseline_init() {
        let cfg = small_config(2);
        let ds = dataset(&cfg);
        let (ae, _) = train_ae(&cfg, &ds, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        Checkpoint::new(ae.to_tensors()).save(&path).unwrap();
        let loaded = MlpParams::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let deferred = init_vq_model(loaded, EmbeddingSource::Pretrained, &cfg, &ds).unwrap();
        let baseline = init_vq_model(fresh_params(&cfg), EmbeddingSource::Untrained, &cfg, &ds).unwrap();
        assert_eq!(deferred, baseline);

        let mut zero = cfg.clone();
        zero.train.epochs = 2;
        let a = train_deferred_vq_from_checkpoint(&zero, &ds, &path).unwrap();
        let b = train_deferred_vq_from_checkpoint(&zero, &ds, &path).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert!(train_deferred_vq_from_checkpoint(&zero, &ds, &dir.path().join("missing")).is_err());
    }

    #[test]
    fn reconstruct_identity_model() {
        let spec = GaussianMixtureSpec::with_default_means(3, 10, 2, 4.0, 1.0, 1).unwrap();
        let ds = generate(&spec).unwrap();
        let params = MlpParams::identity(2, 4).unwrap();
        let cb = Codebook::new(ds.points.clone(), 0.9, 0.25).unwrap();
        assert_eq!(reconstruct(&params, &cb, &ds.points).unwrap(), ds.points);
        assert!(reconstruct(&params, &cb, &Matrix::zeros(2, 3)).is_err());

        let cfg = small_config(2);
        let ds = dataset(&cfg);
        let (m, _) = train_baseline_vq(&cfg, &ds).unwrap();
        assert_eq!(reconstruct(&m.params, &m.codebook, &ds.points).unwrap().shape(), ds.points.shape());
    }

    #[test]
    fn vq_checkpoint_round_trip() {
        let cfg = small_config(3);
        let ds = dataset(&cfg);
        let (m, _) = train_baseline_vq(&cfg, &ds).unwrap();
        let back = VqModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.codebook.tokens, m.codebook.tokens);
        assert_eq!(back.codebook.ema_cluster_size, m.codebook.ema_cluster_size);
        // encoder-only checkpoints load as params but not as a VQ model
        let enc_only = Checkpoint::new(m.params.to_tensors());
        assert!(VqModel::from_checkpoint(&enc_only).is_err());
        assert!(MlpParams::from_checkpoint(&enc_only).is_ok());
    }
}
