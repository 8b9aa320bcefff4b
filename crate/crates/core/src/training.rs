//! Pretraining of the full-precision denoiser and scale-only fine-tuning of
//! the quantized one.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::analysis::frechet_pixel_distance;
use crate::diffusion::schedule::add_noise_batch;
use crate::diffusion::{predict_noise, sample, Bindings, Denoiser, NoiseSchedule, SampleConfig, ScaleChoice, ScaleSource};
use crate::error::{Error, Result};
use crate::experts::{ExpertBank, ScaleInit};
use crate::numerics::rng::{self, Rng, Stream};
use crate::numerics::{Adam, AdamConfig, Param, Real, Tape, Tensor};
use crate::qlayers::{trainable_param_count, ScaleMode};

/// Sub-stream offset separating prior-batch draws from target-batch draws.
const PRIOR_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Output-channel scales only.
    Baseline,
    /// Output- and input-channel scales with timestep experts.
    Tuneqdm,
}

impl Method {
    pub fn mode(self) -> ScaleMode {
        match self {
            Method::Baseline => ScaleMode::Baseline,
            Method::Tuneqdm => ScaleMode::Mcsu,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Tuneqdm => "tuneqdm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub bits: u8,
    pub n_experts: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Prior-preservation weight. `None` means 1 with a prior dataset, 0 without.
    pub lambda_prior: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub scale_init: ScaleInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            method: Method::Tuneqdm,
            bits: 4,
            n_experts: 2,
            lr: adam.lr,
            batch_size: 16,
            iterations: 800,
            lambda_prior: None,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            scale_init: ScaleInit::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        crate::quantizer::check_bits(self.bits)?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.n_experts == 0 || self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("experts, batch size and iterations must be positive".into()));
        }
        if let Some(l) = self.lambda_prior {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be non-negative, got {l}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lambda(&self, has_prior: bool) -> f64 {
        match (has_prior, self.lambda_prior) {
            (false, _) => 0.0,
            (true, Some(l)) => l,
            (true, None) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Timesteps and target noise for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraws<F> {
    pub ts: Vec<usize>,
    pub eps: Tensor<F>,
}

impl<F: Real> NoiseDraws<F> {
    /// Uniform `t` in `[0, T)` and standard normal noise shaped like `x0`.
    pub fn sample(rng: &mut Rng, shape: &[usize], total_steps: usize) -> Self {
        let ts = (0..shape[0]).map(|_| rng.random_range(0..total_steps)).collect();
        let eps = rng::normal_tensor(rng, shape.to_vec());
        Self { ts, eps }
    }
}

/// Anything that predicts noise from `(x_t, t)`.
pub trait NoisePredictor<F> {
    fn predict_noise(&self, x_t: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>>;
}

impl<F, P> NoisePredictor<F> for P
where
    P: Fn(&Tensor<F>, &[usize]) -> Result<Tensor<F>>,
{
    fn predict_noise(&self, x_t: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        self(x_t, ts)
    }
}

/// A denoiser paired with its scale source.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a, F> {
    pub model: &'a Denoiser<F>,
    pub source: ScaleSource<'a, F>,
}

impl<F: Real> NoisePredictor<F> for ModelPredictor<'_, F> {
    fn predict_noise(&self, x_t: &Tensor<F>, ts: &[usize]) -> Result<Tensor<F>> {
        predict_noise(self.model, x_t, ts, self.source)
    }
}

fn mse<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    b.expect_shape(a.shape(), "mse")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.f64() - y.f64()).powi(2)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Noise-prediction MSE for fixed draws.
pub fn loss_with_draws<F: Real>(
    predictor: &impl NoisePredictor<F>,
    x0: &Tensor<F>,
    draws: &NoiseDraws<F>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = add_noise_batch(x0, &draws.ts, &draws.eps, schedule)?;
    let pred = predictor.predict_noise(&xt, &draws.ts)?;
    mse(&pred, &draws.eps)
}

/// Simple diffusion loss `E ||eps_hat(x_t, t) - eps||^2` with fresh draws.
pub fn diffusion_loss<F: Real>(
    predictor: &impl NoisePredictor<F>,
    x0: &Tensor<F>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let draws = NoiseDraws::sample(rng, x0.shape(), schedule.steps());
    loss_with_draws(predictor, x0, &draws, schedule)
}

/// Same functional form as [`diffusion_loss`], applied to a batch from the
/// pretraining distribution.
pub fn prior_loss<F: Real>(
    predictor: &impl NoisePredictor<F>,
    prior: &Tensor<F>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    diffusion_loss(predictor, prior, schedule, rng)
}

/// `L + lambda * L_prior`.
pub fn combined_loss(loss: f64, prior: f64, lambda: f64) -> f64 {
    loss + lambda * prior
}

fn draw_batch<F: Real>(data: &Tensor<F>, batch: usize, seed: u64, sub: u64, total: usize) -> (Tensor<F>, NoiseDraws<F>) {
    let n = data.shape()[0];
    let mut brng = rng::substream(seed, Stream::Batch, sub);
    let idx: Vec<usize> = (0..batch).map(|_| brng.random_range(0..n)).collect();
    let x0 = data.select(&idx);
    let mut trng = rng::substream(seed, Stream::Timestep, sub);
    let ts = (0..batch).map(|_| trng.random_range(0..total)).collect();
    let eps = rng::normal_tensor(&mut rng::substream(seed, Stream::Noise, sub), x0.shape().to_vec());
    (x0, NoiseDraws { ts, eps })
}

fn check_loss(loss: f64, iteration: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at iteration {iteration}")))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<F> {
    pub model: Denoiser<F>,
    pub losses: Vec<f64>,
}

/// Adam on every full-precision parameter against the diffusion loss.
pub fn pretrain<F: Real>(
    mut model: Denoiser<F>,
    data: &Tensor<F>,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput<F>> {
    if data.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(adam_cfg, &model.dense_params());
    let mut losses = Vec::with_capacity(cfg.iterations);
    let weights = vec![F::one() / F::of(cfg.batch_size as f64); cfg.batch_size];
    for it in 0..cfg.iterations {
        let (x0, draws) = draw_batch(data, cfg.batch_size, cfg.seed, it as u64, schedule.steps());
        let xt = add_noise_batch(&x0, &draws.ts, &draws.eps, schedule)?;
        let mut tape = Tape::new();
        let x = tape.constant(xt);
        let target = tape.constant(draws.eps);
        let mut binds = Bindings::dense();
        let pred = model.forward(&mut tape, x, &draws.ts, ScaleChoice::Ptq, &mut binds)?;
        let loss = tape.weighted_mse(pred, target, weights.clone())?;
        let lv = tape.value(loss).item().f64();
        check_loss(lv, it)?;
        let grads = tape.backward(loss)?;
        model.accumulate_dense(&grads, &binds)?;
        adam.step(&mut model.dense_params_mut());
        if it % 100 == 0 {
            log::info!("pretrain iteration {it}: loss {lv:.5}");
        }
        losses.push(lv);
    }
    Ok(PretrainOutput { model, losses })
}

/// One expert's share of one fine-tuning iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: usize,
    pub loss: f64,
    pub expert: usize,
    pub lr: f64,
    pub samples: usize,
}

/// Emitted before each expert update.
#[derive(Debug, Clone)]
pub struct RouteEvent<'a> {
    pub iteration: usize,
    pub expert: usize,
    pub ts: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub n_experts: usize,
    /// Total loss `L + lambda * L_prior` per iteration.
    pub losses: Vec<f64>,
    pub rows: Vec<ReportRow>,
    pub final_eval_loss: Option<f64>,
    pub trainable_params: usize,
    pub wall_time_s: f64,
    /// Samples (target and prior) routed to each expert.
    pub expert_updates: Vec<usize>,
    pub samples_processed: usize,
}

/// Trainable scalar count the bank must expose for `model`.
pub fn expected_trainable<F: Real>(model: &Denoiser<F>, mode: ScaleMode, n_experts: usize) -> usize {
    model
        .quant_layers()
        .iter()
        .map(|q| trainable_param_count(q.c_out(), q.c_in(), mode, n_experts))
        .sum()
}

fn check_bank<F: Real>(
    model: &Denoiser<F>,
    bank: &ExpertBank<F>,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<()> {
    let names: Vec<&str> = model.quant_layers().iter().map(|q| q.name.as_str()).collect();
    if names.is_empty() {
        return Err(Error::Contract("model has no quantized layers to fine-tune".into()));
    }
    if bank.layer_names().iter().map(String::as_str).ne(names.iter().copied()) {
        return Err(Error::Incompatible("bank layers do not match the model's quantized layers".into()));
    }
    if let Some(q) = model.quant_layers().iter().find(|q| q.codes().bits() != cfg.bits) {
        return Err(Error::Config(format!(
            "layer {} is quantized to {} bits, config says {}",
            q.name,
            q.codes().bits(),
            cfg.bits
        )));
    }
    if bank.mode() != cfg.method.mode() || bank.n_experts() != cfg.n_experts {
        return Err(Error::Config(format!(
            "bank ({:?}, N={}) does not match method {} with N={}",
            bank.mode(),
            bank.n_experts(),
            cfg.method,
            cfg.n_experts
        )));
    }
    if bank.total_steps() != schedule.steps() {
        return Err(Error::Config(format!(
            "bank routes over T={} but the schedule has T={}",
            bank.total_steps(),
            schedule.steps()
        )));
    }
    Ok(())
}

fn expert_params<F: Real>(bank: &mut ExpertBank<F>, e: usize) -> Vec<&mut Param<F>> {
    bank.expert_mut(e).iter_mut().flat_map(|s| s.params_mut()).collect()
}

/// Scale-only fine-tuning. Every sample is routed to the expert owning its
/// timestep; each expert that received samples takes one Adam step on its
/// share of `L + lambda * L_prior`. The model itself is never modified.
pub fn finetune<F: Real>(
    model: &Denoiser<F>,
    bank: &mut ExpertBank<F>,
    target: &Tensor<F>,
    prior: Option<&Tensor<F>>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(&RouteEvent<'_>)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_bank(model, bank, cfg, schedule)?;
    if target.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("target dataset is empty".into()));
    }
    let expected = expected_trainable(model, cfg.method.mode(), cfg.n_experts);
    let counted: usize = (0..bank.n_experts())
        .flat_map(|e| bank.expert(e).iter())
        .flat_map(|s| s.params())
        .filter(|p| p.trainable)
        .map(Param::numel)
        .sum();
    if counted != expected || bank.trainable_param_count() != expected {
        return Err(Error::Contract(format!(
            "internal: bank exposes {counted} trainable scalars, expected {expected}"
        )));
    }

    let start = Instant::now();
    let lambda = cfg.lambda(prior.is_some());
    let b = cfg.batch_size;
    let mut adams: Vec<Adam<F>> = (0..bank.n_experts())
        .map(|e| {
            let params: Vec<&Param<F>> = bank.expert(e).iter().flat_map(|s| s.params()).collect();
            Adam::new(cfg.adam(), &params)
        })
        .collect();
    bank.experts_mut().iter_mut().flatten().for_each(|s| s.zero_grad());

    let mut report = TrainReport {
        method: cfg.method,
        n_experts: cfg.n_experts,
        losses: Vec::with_capacity(cfg.iterations),
        rows: Vec::new(),
        final_eval_loss: None,
        trainable_params: expected,
        wall_time_s: 0.0,
        expert_updates: vec![0; cfg.n_experts],
        samples_processed: 0,
    };
    let w_target = F::of(1.0 / b as f64);
    let w_prior = F::of(lambda / b as f64);

    for it in 0..cfg.iterations {
        let (x0, draws) = draw_batch(target, b, cfg.seed, it as u64, schedule.steps());
        let mut xt = add_noise_batch(&x0, &draws.ts, &draws.eps, schedule)?;
        let mut eps = draws.eps;
        let mut ts = draws.ts;
        let mut weights = vec![w_target; b];
        if let Some(p) = prior {
            let (p0, pd) = draw_batch(p, b, cfg.seed, PRIOR_STREAM + it as u64, schedule.steps());
            let pt = add_noise_batch(&p0, &pd.ts, &pd.eps, schedule)?;
            xt = concat(&xt, &pt)?;
            eps = concat(&eps, &pd.eps)?;
            ts.extend(pd.ts);
            weights.extend(std::iter::repeat_n(w_prior, b));
        }

        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_experts];
        for (i, &t) in ts.iter().enumerate() {
            groups[bank.expert_for(t)?].push(i);
        }
        let mut total = 0.0;
        for (e, rows) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
            let sub_ts: Vec<usize> = rows.iter().map(|&i| ts[i]).collect();
            if let Some(obs) = observer.as_deref_mut() {
                obs(&RouteEvent {
                    iteration: it,
                    expert: e,
                    ts: &sub_ts,
                });
            }
            let sub_w: Vec<F> = rows.iter().map(|&i| weights[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(xt.select(rows));
            let tgt = tape.constant(eps.select(rows));
            let mut binds = Bindings::scales_only();
            let pred = model.forward(&mut tape, x, &sub_ts, ScaleChoice::Sets(bank.expert(e)), &mut binds)?;
            let loss = tape.weighted_mse(pred, tgt, sub_w)?;
            let lv = tape.value(loss).item().f64();
            check_loss(lv, it)?;
            let grads = tape.backward(loss)?;
            Denoiser::accumulate_scales(bank.expert_mut(e), &grads, &binds)?;
            adams[e].step(&mut expert_params(bank, e));
            total += lv;
            report.expert_updates[e] += rows.len();
            report.samples_processed += rows.len();
            report.rows.push(ReportRow {
                iteration: it,
                loss: lv,
                expert: e,
                lr: cfg.lr,
                samples: rows.len(),
            });
        }
        if it % 100 == 0 {
            log::info!("finetune iteration {it}: loss {total:.5}");
        }
        report.losses.push(total);
    }

    let crossed = (0..bank.n_experts())
        .flat_map(|e| bank.expert(e).iter())
        .filter(|s| s.s_out.value.data().iter().any(|&v| v <= F::zero()))
        .count();
    if crossed > 0 {
        log::warn!("{crossed} scale sets have a non-positive output-channel scale after fine-tuning");
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn concat<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dimension(format!("cannot stack {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Dataset items in the fixed loss grid.
    pub loss_items: usize,
    pub n_samples: usize,
    pub n_steps: usize,
    pub eta: f64,
    /// Batch size for both loss evaluation and sampling.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            loss_items: 256,
            n_samples: 256,
            n_steps: 100,
            eta: 0.0,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Squared Fréchet distance between pixel statistics of generated samples
    /// and the eval dataset.
    pub frechet: f64,
}

/// Mean diffusion loss over a fixed grid: item `i` is evaluated at
/// `t = floor(i·T/n)` with noise from the evaluation stream.
pub fn eval_loss<F: Real>(
    model: &Denoiser<F>,
    source: ScaleSource<'_, F>,
    data: &Tensor<F>,
    schedule: &NoiseSchedule,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<f64> {
    let n_data = data.shape()[0];
    let n = cfg.loss_items;
    if n == 0 || n_data == 0 || cfg.chunk == 0 {
        return Err(Error::Config("evaluation needs items, data and a positive chunk".into()));
    }
    let idx: Vec<usize> = (0..n).map(|i| i % n_data).collect();
    let ts: Vec<usize> = (0..n).map(|i| i * schedule.steps() / n).collect();
    let x0 = data.select(&idx);
    let eps = rng::normal_tensor::<F>(&mut rng::stream(seed, Stream::Eval), x0.shape().to_vec());
    let xt = add_noise_batch(&x0, &ts, &eps, schedule)?;
    let per = x0.numel() / n;
    let mut sum = 0.0;
    for start in (0..n).step_by(cfg.chunk) {
        let rows: Vec<usize> = (start..(start + cfg.chunk).min(n)).collect();
        let pred = predict_noise(model, &xt.select(&rows), &ts[rows[0]..=rows[rows.len() - 1]], source)?;
        sum += mse(&pred, &eps.select(&rows))? * (rows.len() * per) as f64;
    }
    Ok(sum / (n * per) as f64)
}

/// Generates `cfg.n_samples` images in chunks; chunk `k` uses sub-seed `k`.
pub fn generate<F: Real>(
    model: &Denoiser<F>,
    source: ScaleSource<'_, F>,
    schedule: &NoiseSchedule,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<Tensor<F>> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut done = 0;
    let mut k = 0u64;
    while done < cfg.n_samples {
        let batch = cfg.chunk.min(cfg.n_samples - done);
        let out = sample(
            model,
            source,
            schedule,
            &SampleConfig {
                n_steps: cfg.n_steps,
                eta: cfg.eta,
                seed: rng::substream(seed, Stream::Eval, 1 + k).random(),
                batch,
            },
        )?;
        shape = out.images.shape().to_vec();
        data.extend_from_slice(out.images.data());
        done += batch;
        k += 1;
    }
    shape[0] = done;
    Tensor::new(shape, data)
}

/// Eval loss on `data` plus the Fréchet pixel distance between generated
/// samples and `data`.
pub fn evaluate<F: Real>(
    model: &Denoiser<F>,
    source: ScaleSource<'_, F>,
    data: &Tensor<F>,
    schedule: &NoiseSchedule,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let loss = eval_loss(model, source, data, schedule, seed, cfg)?;
    let samples = generate(model, source, schedule, seed, cfg)?;
    let frechet = frechet_pixel_distance(&samples.cast::<f64>(), &data.cast::<f64>())?;
    Ok(EvalReport { loss, frechet })
}
