//! Residual-quantized autoencoder: MLP encoder, multi-level codebooks and
//! MLP decoder, trained with reconstruction plus codebook/commitment losses.

mod codebook;
mod kmeans;
mod mlp;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::usm::{quantize_with_usm, UsmConfig};
use crate::util::{mix_seed, seeded_rng, ArtifactMeta};

pub use codebook::{BatchQuantization, Codebook, QuantizeResult};
pub use kmeans::kmeans;
pub use mlp::{Mlp, MlpTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqVaeConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub d_code: usize,
    pub levels: usize,
    pub codes: usize,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            d_code: 32,
            levels: 4,
            codes: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub usm_enabled: bool,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    pub kmeans_iters: usize,
    pub dead_code_reset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 1024,
            epochs: 200,
            seed: 0,
            usm_enabled: true,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 100,
            kmeans_iters: 10,
            dead_code_reset: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn usm(&self) -> UsmConfig {
        UsmConfig {
            epsilon: self.sinkhorn_epsilon,
            iters: self.sinkhorn_iters,
        }
    }
}

/// Loss components for one item or a batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub rq: f64,
}

impl LossParts {
    fn add(&mut self, other: LossParts) {
        self.total += other.total;
        self.recon += other.recon;
        self.rq += other.rq;
    }

    fn scale(mut self, s: f64) -> Self {
        self.total *= s;
        self.recon *= s;
        self.rq *= s;
        self
    }
}

/// Per-item loss. `sg` only matters for gradients; values are
/// `recon = |e - e_hat|^2` and `rq = sum_i |r_i - v_i|^2 + beta |r_i - v_i|^2`.
pub fn loss(e: &[f64], e_hat: &[f64], result: &QuantizeResult, cb: &Codebook, beta: f64) -> LossParts {
    let recon = crate::linalg::sq_dist(e, e_hat);
    let mut rq = 0.0;
    for (level, &c) in result.codes.iter().enumerate() {
        let d = crate::linalg::sq_dist(&result.residuals[level], cb.vector(level, c as usize));
        rq += d + beta * d;
    }
    LossParts {
        total: recon + rq,
        recon,
        rq,
    }
}

/// Flat gradient buffers matching the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<f64>,
    pub decoder: Vec<f64>,
    pub codebook: Vec<f64>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        [&self.encoder[..], &self.decoder[..], &self.codebook[..]].concat()
    }

    fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .chain(&self.codebook)
            .all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossParts,
    pub dead_codes_reset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossParts,
    pub epochs: Vec<EpochStats>,
    pub final_loss: LossParts,
}

impl RqVae {
    /// Randomly initialised encoder/decoder and a zero codebook.
    pub fn new(d_emb: usize, cfg: &RqVaeConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut enc_sizes = vec![d_emb];
        enc_sizes.extend(&cfg.hidden);
        enc_sizes.push(cfg.d_code);
        let dec_sizes: Vec<usize> = enc_sizes.iter().rev().copied().collect();
        Ok(Self {
            encoder: Mlp::random(&enc_sizes, &mut rng)?,
            decoder: Mlp::random(&dec_sizes, &mut rng)?,
            codebook: Codebook::zeros(cfg.levels, cfg.codes, cfg.d_code)?,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, codebook: Codebook) -> Result<Self> {
        if encoder.output_dim() != codebook.dim() || decoder.input_dim() != codebook.dim() {
            return Err(Error::Schema(format!(
                "encoder output {} / decoder input {} do not match code dimension {}",
                encoder.output_dim(),
                decoder.input_dim(),
                codebook.dim()
            )));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::Schema("decoder output must match encoder input".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.params().len() + self.decoder.params().len() + self.codebook.data().len()
    }

    pub fn encode(&self, e: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(e)
    }

    pub fn decode(&self, z_hat: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z_hat)
    }

    /// Latents for every row of the matrix, `n x d_code`.
    pub fn encode_all(&self, matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
        self.check_dim(matrix)?;
        Ok(self.encoder.forward_batch(matrix.data(), matrix.len()).0)
    }

    fn check_dim(&self, matrix: &EmbeddingMatrix) -> Result<()> {
        if matrix.dim() != self.d_emb() {
            return Err(Error::Schema(format!(
                "model expects {}-dimensional embeddings, corpus has {}",
                self.d_emb(),
                matrix.dim()
            )));
        }
        Ok(())
    }

    /// Seed each level with k-means over the residuals left by the levels above,
    /// starting from the untrained encoder's latents.
    pub fn init_codebook(&mut self, matrix: &EmbeddingMatrix, kmeans_iters: usize, seed: u64) -> Result<()> {
        let mut rng = seeded_rng(seed);
        let dim = self.codebook.dim();
        let k = self.codebook.codes();
        let mut residual = self.encode_all(matrix)?;
        for level in 0..self.codebook.levels() {
            let centroids = kmeans(&residual, dim, k, kmeans_iters, &mut rng);
            self.codebook.level_mut(level).copy_from_slice(&centroids);
            for r in residual.chunks_exact_mut(dim) {
                let c = self.codebook.nearest(level, r) as usize;
                r.iter_mut()
                    .zip(self.codebook.vector(level, c))
                    .for_each(|(x, v)| *x -= v);
            }
        }
        Ok(())
    }

    /// Full forward pass and gradients of the mean batch loss.
    ///
    /// The decoder sees `z + sg(z_hat - z)`, so reconstruction gradients reach the
    /// encoder unchanged and never the codebook. Codebook vectors receive
    /// `|sg[r_i] - v_i|^2` gradients directly and commitment gradients through
    /// the residuals of later levels.
    pub fn forward_backward(
        &self,
        e: &[f64],
        n: usize,
        beta: f64,
        usm: Option<UsmConfig>,
    ) -> Result<(LossParts, Gradients, BatchQuantization)> {
        let dim = self.codebook.dim();
        let levels = self.codebook.levels();
        let (z, enc_trace) = self.encoder.forward_batch(e, n);
        let q = match usm {
            Some(cfg) => quantize_with_usm(&z, n, &self.codebook, cfg)?,
            None => self.codebook.quantize_batch(&z, n),
        };
        let (e_hat, dec_trace) = self.decoder.forward_batch(&q.quantized, n);
        let d_emb = self.d_emb();
        let inv_n = 1.0 / n as f64;

        let mut parts = LossParts::default();
        let mut d_ehat = vec![0.0; n * d_emb];
        for i in 0..n {
            let (er, hr) = (&e[i * d_emb..(i + 1) * d_emb], &e_hat[i * d_emb..(i + 1) * d_emb]);
            let mut recon = 0.0;
            for ((d, x), y) in d_ehat[i * d_emb..(i + 1) * d_emb].iter_mut().zip(er).zip(hr) {
                let diff = y - x;
                recon += diff * diff;
                *d = 2.0 * diff * inv_n;
            }
            parts.recon += recon;
        }

        let mut grads = Gradients {
            encoder: vec![0.0; self.encoder.params().len()],
            decoder: vec![0.0; self.decoder.params().len()],
            codebook: vec![0.0; self.codebook.data().len()],
        };
        let mut dz = self.decoder.backward(&dec_trace, &d_ehat, &mut grads.decoder);

        let mut later = vec![0.0; dim];
        for i in 0..n {
            later.iter_mut().for_each(|x| *x = 0.0);
            let codes = q.item_codes(i);
            for level in (0..levels).rev() {
                let c = codes[level] as usize;
                let r = q.residual(level, i);
                let off = self.codebook.offset(level, c);
                let v = self.codebook.vector(level, c);
                let mut d2 = 0.0;
                for j in 0..dim {
                    let diff = r[j] - v[j];
                    d2 += diff * diff;
                    // codebook term pulls v toward sg[r]; later commitments push
                    // through r_{level+1..} = r_level - v_level - ...
                    grads.codebook[off + j] += -2.0 * diff * inv_n - later[j];
                    later[j] += 2.0 * beta * diff * inv_n;
                }
                parts.rq += d2 + beta * d2;
            }
            dz[i * dim..(i + 1) * dim]
                .iter_mut()
                .zip(&later)
                .for_each(|(g, l)| *g += l);
        }
        self.encoder.backward(&enc_trace, &dz, &mut grads.encoder);

        parts.total = parts.recon + parts.rq;
        Ok((parts.scale(inv_n), grads, q))
    }

    /// Mean loss over a corpus with greedy quantization at every level.
    pub fn evaluate(&self, matrix: &EmbeddingMatrix, beta: f64) -> Result<LossParts> {
        self.check_dim(matrix)?;
        let mut acc = LossParts::default();
        for i in 0..matrix.len() {
            let e = matrix.row(i);
            let z = self.encode(e)?;
            let q = self.codebook.quantize(&z);
            let e_hat = self.decode(&q.quantized)?;
            acc.add(loss(e, &e_hat, &q, &self.codebook, beta));
        }
        Ok(acc.scale(1.0 / matrix.len().max(1) as f64))
    }

    /// Greedy codes for every item, `n x levels` row-major, with the batch
    /// quantization (for the final-level residuals).
    pub fn quantize_all(&self, matrix: &EmbeddingMatrix) -> Result<BatchQuantization> {
        let z = self.encode_all(matrix)?;
        Ok(self.codebook.quantize_batch(&z, matrix.len()))
    }

    /// Mini-batch AdamW training. Dead codes are re-seeded only when the
    /// learning rate is positive, so a zero learning rate leaves every
    /// parameter untouched.
    pub fn fit(&mut self, matrix: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        self.check_dim(matrix)?;
        let n_items = matrix.len();
        if n_items == 0 {
            return Err(Error::Domain("cannot train on an empty corpus".into()));
        }
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        };
        let mut opt_enc = AdamW::new(self.encoder.params().len(), adam);
        let mut opt_dec = AdamW::new(self.decoder.params().len(), adam);
        let mut opt_cb = AdamW::new(self.codebook.data().len(), adam);
        let mut rng = seeded_rng(mix_seed(cfg.seed, 0x7271));
        let usm = cfg.usm_enabled.then(|| cfg.usm());
        let (levels, k, dim, d_emb) = (
            self.codebook.levels(),
            self.codebook.codes(),
            self.codebook.dim(),
            self.d_emb(),
        );

        let mut report = TrainReport {
            initial: self.evaluate(matrix, cfg.beta)?,
            ..Default::default()
        };
        info!(
            "rqvae: {} items, {} params, initial loss {:.6}",
            n_items,
            self.num_params(),
            report.initial.total
        );
        let mut order: Vec<usize> = (0..n_items).collect();
        let mut batch = Vec::with_capacity(cfg.batch_size * d_emb);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut usage = vec![0usize; levels * k];
            let mut epoch_loss = LossParts::default();
            let mut last_q = None;
            let n_batches = n_items.div_ceil(cfg.batch_size);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                batch.clear();
                for &i in chunk {
                    batch.extend_from_slice(matrix.row(i));
                }
                let (parts, grads, q) = self.forward_backward(&batch, chunk.len(), cfg.beta, usm)?;
                if !parts.total.is_finite() || !grads.all_finite() {
                    return Err(Error::Numerical(format!(
                        "rqvae loss became non-finite at epoch {} batch {} of {n_batches}",
                        epoch + 1,
                        b + 1
                    )));
                }
                for i in 0..q.n {
                    for (level, &c) in q.item_codes(i).iter().enumerate() {
                        usage[level * k + c as usize] += 1;
                    }
                }
                epoch_loss.add(parts.scale(chunk.len() as f64));
                opt_enc.step(self.encoder.params_mut(), &grads.encoder, cfg.learning_rate);
                opt_dec.step(self.decoder.params_mut(), &grads.decoder, cfg.learning_rate);
                opt_cb.step(self.codebook.data_mut(), &grads.codebook, cfg.learning_rate);
                last_q = Some(q);
            }
            let mut reset = 0;
            if cfg.dead_code_reset && cfg.learning_rate > 0.0 {
                let q = last_q.as_ref().expect("at least one batch per epoch");
                for level in 0..levels {
                    for code in 0..k {
                        if usage[level * k + code] == 0 {
                            let pick = rng.random_range(0..q.n);
                            let r = q.residual(level, pick).to_vec();
                            self.codebook.vector_mut(level, code).copy_from_slice(&r);
                            let off = self.codebook.offset(level, code);
                            opt_cb.reset_range(off..off + dim);
                            reset += 1;
                        }
                    }
                }
            }
            let loss = epoch_loss.scale(1.0 / n_items as f64);
            debug!(
                "rqvae epoch {}: total {:.6} recon {:.6} rq {:.6} reset {reset}",
                epoch + 1,
                loss.total,
                loss.recon,
                loss.rq
            );
            report.epochs.push(EpochStats {
                epoch: epoch + 1,
                loss,
                dead_codes_reset: reset,
            });
        }
        report.final_loss = self.evaluate(matrix, cfg.beta)?;
        info!("rqvae: final loss {:.6}", report.final_loss.total);
        Ok(report)
    }
}

/// Initialise (random MLPs, k-means codebooks) and train.
pub fn train(matrix: &EmbeddingMatrix, model_cfg: &RqVaeConfig, cfg: &TrainConfig) -> Result<(RqVae, TrainReport)> {
    cfg.validate()?;
    let mut model = RqVae::new(matrix.dim(), model_cfg, cfg.seed)?;
    model.init_codebook(matrix, cfg.kmeans_iters, mix_seed(cfg.seed, 0x6b6d))?;
    let report = model.fit(matrix, cfg)?;
    Ok((model, report))
}

/// Values held fixed by the stop-gradient operators at the expansion point.
struct Frozen {
    codes: Vec<u32>,
    residuals: Vec<Vec<f64>>,
    code_vectors: Vec<Vec<f64>>,
    st_offset: Vec<f64>,
}

impl RqVae {
    fn freeze(&self, e: &[f64], n: usize) -> Frozen {
        let (z, _) = self.encoder.forward_batch(e, n);
        let q = self.codebook.quantize_batch(&z, n);
        let dim = self.codebook.dim();
        let code_vectors = (0..self.codebook.levels())
            .map(|level| {
                (0..n)
                    .flat_map(|i| self.codebook.vector(level, q.item_codes(i)[level] as usize).to_vec())
                    .collect()
            })
            .collect();
        let st_offset = q.quantized.iter().zip(&z).map(|(a, b)| a - b).collect();
        let _ = dim;
        Frozen {
            codes: q.codes,
            residuals: q.residuals,
            code_vectors,
            st_offset,
        }
    }

    /// The loss as a smooth function of the parameters, with stop-gradient
    /// arguments and codes pinned to `frozen`. Its true gradient is what
    /// `forward_backward` computes.
    fn surrogate_loss(&self, e: &[f64], n: usize, beta: f64, frozen: &Frozen) -> f64 {
        let dim = self.codebook.dim();
        let levels = self.codebook.levels();
        let d_emb = self.d_emb();
        let (z, _) = self.encoder.forward_batch(e, n);
        let dec_in: Vec<f64> = z.iter().zip(&frozen.st_offset).map(|(a, b)| a + b).collect();
        let (e_hat, _) = self.decoder.forward_batch(&dec_in, n);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..d_emb {
                let d = e[i * d_emb + j] - e_hat[i * d_emb + j];
                total += d * d;
            }
            let mut r = z[i * dim..(i + 1) * dim].to_vec();
            for level in 0..levels {
                let c = frozen.codes[i * levels + level] as usize;
                let v = self.codebook.vector(level, c);
                let r0 = &frozen.residuals[level][i * dim..(i + 1) * dim];
                let v0 = &frozen.code_vectors[level][i * dim..(i + 1) * dim];
                for j in 0..dim {
                    total += (r0[j] - v[j]).powi(2) + beta * (r[j] - v0[j]).powi(2);
                }
                r.iter_mut().zip(v).for_each(|(x, vk)| *x -= vk);
            }
        }
        total / n as f64
    }

    fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let ne = self.encoder.params().len();
        let nd = self.decoder.params().len();
        if idx < ne {
            &mut self.encoder.params_mut()[idx]
        } else if idx < ne + nd {
            &mut self.decoder.params_mut()[idx - ne]
        } else {
            &mut self.codebook.data_mut()[idx - ne - nd]
        }
    }
}

/// Backpropagated gradient of the mean batch loss (greedy codes), flattened
/// as encoder, decoder, codebook.
pub fn analytic_gradients(model: &RqVae, batch: &[f64], n: usize, beta: f64) -> Result<Vec<f64>> {
    Ok(model.forward_backward(batch, n, beta, None)?.1.flatten())
}

/// Central differences of the stop-gradient surrogate for every parameter.
pub fn numeric_gradients(model: &RqVae, batch: &[f64], n: usize, beta: f64, step: f64) -> Vec<f64> {
    let frozen = model.freeze(batch, n);
    let mut probe = model.clone();
    (0..model.num_params())
        .map(|idx| {
            let orig = *probe.param_mut(idx);
            *probe.param_mut(idx) = orig + step;
            let plus = probe.surrogate_loss(batch, n, beta, &frozen);
            *probe.param_mut(idx) = orig - step;
            let minus = probe.surrogate_loss(batch, n, beta, &frozen);
            *probe.param_mut(idx) = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `max |a - b| / max(|a|, |b|, 1e-6)` over all components. The floor sits
/// above the roundoff of a central difference at step 1e-4 (about
/// `eps * |loss| / step`), which is all a zero gradient measures.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compare backpropagated gradients with finite differences (step 1e-4).
pub fn grad_check(model: &RqVae, batch: &[f64], n: usize, beta: f64) -> Result<f64> {
    let analytic = analytic_gradients(model, batch, n, beta)?;
    let numeric = numeric_gradients(model, batch, n, beta, GRAD_CHECK_STEP);
    Ok(max_relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeCheckpoint {
    pub format: String,
    pub version: u32,
    pub encoder_sizes: Vec<usize>,
    pub encoder_params: Vec<f64>,
    pub decoder_sizes: Vec<usize>,
    pub decoder_params: Vec<f64>,
    pub levels: usize,
    pub codes: usize,
    pub d_code: usize,
    pub codebook: Vec<f64>,
    pub train_config: TrainConfig,
    #[serde(default)]
    pub meta: Option<ArtifactMeta>,
}

const CHECKPOINT_FORMAT: &str = "lcrec-rqvae";
const CHECKPOINT_VERSION: u32 = 1;

impl RqVaeCheckpoint {
    pub fn new(model: &RqVae, train_config: &TrainConfig, meta: Option<ArtifactMeta>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder_sizes: model.encoder.sizes().to_vec(),
            encoder_params: model.encoder.params().to_vec(),
            decoder_sizes: model.decoder.sizes().to_vec(),
            decoder_params: model.decoder.params().to_vec(),
            levels: model.codebook.levels(),
            codes: model.codebook.codes(),
            d_code: model.codebook.dim(),
            codebook: model.codebook.data().to_vec(),
            train_config: train_config.clone(),
            meta,
        }
    }

    pub fn model(&self) -> Result<RqVae> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        RqVae::from_parts(
            Mlp::from_params(&self.encoder_sizes, self.encoder_params.clone())?,
            Mlp::from_params(&self.decoder_sizes, self.decoder_params.clone())?,
            Codebook::from_data(self.levels, self.codes, self.d_code, self.codebook.clone())?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}
