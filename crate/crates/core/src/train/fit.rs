use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anneal::{raw_gamma_for, AnnealingState};
use crate::dais::{value_and_grad, value_only, BatchPlan, ElboEstimator, EstimatorRegistry, NoiseBundle, Variational};
use crate::error::{Error, Result};
use crate::model::{Dataset, LikelihoodKind, ModelDensity};
use crate::oracle::{exact_posterior, kl_to, log_evidence, GaussianMoments};
use crate::rng::{stream_rng, Stream};
use crate::surrogate::{SurrogateArgs, SurrogateJson, SurrogateRegistry};
use crate::vardist::{BaseDistribution, BaseJson, BaseKind};

use super::adam::AdamState;
use super::config::RunConfig;
use super::metrics::{emit_metrics, MetricRecord};

/// Training state: parameters, optimizer and the positions of both training RNG streams.
pub struct Session {
    config: RunConfig,
    data: Dataset,
    model: ModelDensity,
    estimator: Arc<dyn ElboEstimator>,
    vars: Variational,
    trainable: Vec<usize>,
    adam: AdamState,
    batch_size: usize,
    step: usize,
    divergences: usize,
    window: VecDeque<bool>,
    last_divergence: Option<String>,
    noise_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
}

/// Summary of post-training ELBO samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub mean: f64,
    pub se: f64,
    /// Samples dropped because the chain left the finite domain.
    pub divergences: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub method: String,
    pub k: usize,
    pub batch_size: usize,
    pub n_surr: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    pub samples_per_step: usize,
    pub learn_mass: bool,
    pub ns_prime: bool,
    pub train_divergences: usize,
    pub elbo: EvalSummary,
    /// Closed-form `log p(D)` for linear models with a fixed noise scale.
    pub log_evidence: Option<f64>,
    pub gap: Option<f64>,
    /// Exact `KL(q₀ ‖ posterior)` for parametric methods on linear models.
    pub kl_exact: Option<f64>,
}

/// Everything needed to resume or inspect a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub step: usize,
    pub config: RunConfig,
    /// Flat parameters in the order q₀, annealing, surrogate, θ.
    pub params: Vec<f64>,
    pub q0: BaseJson,
    pub anneal: Option<AnnealingState>,
    pub surrogate: Option<SurrogateJson>,
    pub theta: Option<Vec<f64>>,
    pub trainable: Vec<usize>,
    pub adam: AdamState,
    pub divergences: usize,
    /// ChaCha word positions of the noise and minibatch streams, as decimal strings.
    pub noise_pos: String,
    pub batch_pos: String,
}

fn load_q0(path: &Path, kind: BaseKind, d: usize) -> Result<BaseDistribution> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(q0) = value.get_mut("q0") {
        value = q0.take();
    }
    let q0 = BaseDistribution::from_json(serde_json::from_value(value)?)?;
    if q0.dim() != d {
        return Err(Error::config(format!("q0_init has dimension {}, data have {d}", q0.dim())));
    }
    match (q0.kind(), kind) {
        (a, b) if a == b => Ok(q0),
        (BaseKind::MeanField, BaseKind::FullRank) => Ok(q0.to_full_rank()),
        _ => Err(Error::config("a full-rank q0_init cannot seed a mean-field base")),
    }
}

fn trainable_indices(vars: &Variational, cfg: &RunConfig) -> Vec<usize> {
    let l = vars.layout();
    let f = &cfg.freeze;
    let mut idx = Vec::new();
    if !f.q0 {
        idx.extend(l.q0.clone());
    }
    if let Some(a) = &vars.anneal {
        let al = a.layout();
        let off = l.anneal.start;
        let shift = |r: std::ops::Range<usize>| (r.start + off)..(r.end + off);
        if !f.beta {
            idx.extend(shift(al.beta));
        }
        if !f.step_size {
            idx.extend(shift(al.step));
        }
        if !f.gamma && a.fixed_gamma.is_none() {
            idx.extend(shift(al.gamma));
        }
        if cfg.flags.learn_mass {
            idx.extend(shift(al.mass));
        }
    }
    if !f.surrogate {
        idx.extend(l.surrogate.clone());
    }
    idx.extend(l.theta);
    idx
}

fn parse_pos(s: &str) -> Result<u128> {
    s.parse().map_err(|_| Error::config(format!("bad stream position `{s}` in checkpoint")))
}

impl Session {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let model = config.build_model(data.d())?;
        model.validate(&data)?;
        let estimator = EstimatorRegistry::default().get(&config.method)?;
        let batch_size = config.resolved_batch(data.n())?;
        let d = data.d();
        let kind = config.base_kind()?;
        let q0 = match &config.q0_init {
            Some(path) => load_q0(path, kind, d)?,
            None => BaseDistribution::standard(kind, d),
        };
        let anneal = if estimator.annealed() {
            let mut a = AnnealingState::new(config.k, d);
            a.raw_eta = config.eta_init;
            a.eta_max = config.eta_max;
            if let Some(g) = config.gamma_init {
                a.raw_gamma = raw_gamma_for(g).map_err(|e| Error::config(e.to_string()))?;
            }
            if let Some(g) = config.fixed_gamma {
                a = a.with_fixed_gamma(g)?;
            }
            Some(a)
        } else {
            None
        };
        let surrogate = if estimator.needs_surrogate() {
            let args = SurrogateArgs {
                data: &data,
                model: &model,
                n_surr: config.n_surr.unwrap_or(0),
                seed: config.seed,
                delta_a: config.delta_a.as_deref(),
                delta_b: config.delta_b.as_deref(),
            };
            Some(SurrogateRegistry::default().build(&config.surrogate, &args)?)
        } else {
            None
        };
        let theta = config.flags.learn_model.then(|| model.theta_init());
        let vars = Variational {
            q0,
            anneal,
            surrogate,
            theta,
        };
        let trainable = trainable_indices(&vars, &config);
        Ok(Self {
            adam: AdamState::new(trainable.len()),
            noise_rng: stream_rng(config.seed, Stream::Noise),
            batch_rng: stream_rng(config.seed, Stream::Minibatch),
            config,
            data,
            model,
            estimator,
            vars,
            trainable,
            batch_size,
            step: 0,
            divergences: 0,
            window: VecDeque::new(),
            last_divergence: None,
        })
    }

    /// Rebuilds a session from a checkpoint and the dataset it was trained on.
    pub fn resume(ckpt: Checkpoint, data: Dataset) -> Result<Self> {
        let mut s = Self::new(ckpt.config, data)?;
        if let Some(json) = &ckpt.surrogate {
            s.vars.surrogate = Some(json.restore(&s.data, &s.model)?);
        }
        s.vars.set_flat(&ckpt.params)?;
        if s.trainable != ckpt.trainable || ckpt.adam.m.len() != s.trainable.len() {
            return Err(Error::config("checkpoint does not match its configuration"));
        }
        s.adam = ckpt.adam;
        s.step = ckpt.step;
        s.divergences = ckpt.divergences;
        s.noise_rng.set_word_pos(parse_pos(&ckpt.noise_pos)?);
        s.batch_rng.set_word_pos(parse_pos(&ckpt.batch_pos)?);
        Ok(s)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn model(&self) -> &ModelDensity {
        &self.model
    }

    pub fn estimator(&self) -> &dyn ElboEstimator {
        self.estimator.as_ref()
    }

    pub fn vars(&self) -> &Variational {
        &self.vars
    }

    pub fn vars_mut(&mut self) -> &mut Variational {
        &mut self.vars
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn divergences(&self) -> usize {
        self.divergences
    }

    pub fn plan(&self) -> BatchPlan {
        self.estimator
            .batch_plan(self.config.k, self.batch_size, self.config.flags.ns_prime)
    }

    /// Draws a training noise bundle from the session's streams.
    pub fn draw_noise(&mut self) -> Result<NoiseBundle> {
        let plan = self.plan();
        NoiseBundle::draw(
            &mut self.noise_rng,
            &mut self.batch_rng,
            self.data.d(),
            self.config.k,
            self.data.n(),
            plan,
        )
    }

    /// One ELBO sample under the current parameters.
    pub fn sample(&self, noise: &NoiseBundle) -> Result<f64> {
        Ok(value_only(self.estimator.as_ref(), &self.model, &self.data, &self.vars, noise)?.0)
    }

    /// One optimizer step. Steps whose samples diverge are skipped and counted.
    pub fn step(&mut self, out: &mut dyn Write, started: Instant) -> Result<MetricRecord> {
        let s = self.config.samples_per_step;
        let lr = self.config.lr.lr_at(self.step, self.config.steps);
        let n_params = self.vars.layout().len();
        let mut total = 0.0;
        let mut grad = vec![0.0; n_params];
        let mut diverged = false;
        for _ in 0..s {
            let noise = self.draw_noise()?;
            match value_and_grad(self.estimator.as_ref(), &self.model, &self.data, &self.vars, &noise) {
                Ok((v, g, _)) => {
                    total += v;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Err(e) if e.is_divergence() => {
                    self.last_divergence = Some(e.to_string());
                    diverged = true;
                }
                Err(e) => return Err(e),
            }
        }
        if !diverged {
            let mut flat = self.vars.flat();
            let mut p: Vec<f64> = self.trainable.iter().map(|&i| flat[i]).collect();
            let g: Vec<f64> = self.trainable.iter().map(|&i| -grad[i] / s as f64).collect();
            if self.adam.step(&mut p, &g, lr)? {
                for (&i, v) in self.trainable.iter().zip(p) {
                    flat[i] = v;
                }
                self.vars.set_flat(&flat)?;
            } else {
                self.last_divergence = Some("non-finite gradient".into());
                diverged = true;
            }
        }
        if diverged {
            self.divergences += 1;
        }
        self.window.push_back(diverged);
        if self.window.len() > self.config.divergence_window {
            self.window.pop_front();
        }

        let anneal = self.vars.anneal.as_ref();
        let record = MetricRecord {
            step: self.step,
            elbo_sample: (!diverged).then(|| total / s as f64),
            lr,
            eta_tilde: anneal.map(|a| a.raw_eta),
            kappa: anneal.map(|a| a.raw_kappa),
            gamma: anneal.map(AnnealingState::gamma),
            divergences: self.divergences,
            wall_ms: if self.config.wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        emit_metrics(out, &record)?;
        self.step += 1;

        let recent = self.window.iter().filter(|d| **d).count();
        if 2 * recent > self.config.divergence_window {
            let schedule = anneal.map_or(String::new(), |a| {
                format!("; step sizes {:?}, gamma {}", a.step_sizes(), a.gamma())
            });
            return Err(Error::Aborted(format!(
                "{recent} of the last {} steps diverged at step {}; last: {}{schedule}. \
                 Try a smaller eta_max or learning rate.",
                self.window.len(),
                record.step,
                self.last_divergence.as_deref().unwrap_or("unknown"),
            )));
        }
        Ok(record)
    }

    /// Runs the remaining configured steps.
    pub fn train(&mut self, out: &mut dyn Write) -> Result<()> {
        let started = Instant::now();
        while self.step < self.config.steps {
            self.step(out, started)?;
        }
        out.flush()?;
        Ok(())
    }

    /// ELBO samples from the evaluation streams. The final likelihood term uses the full
    /// data, so minibatch methods are compared on the same footing.
    pub fn evaluate(&self, samples: usize) -> Result<EvalSummary> {
        let mut noise_rng = stream_rng(self.config.seed, Stream::Eval);
        let mut batch_rng = stream_rng(self.config.seed, Stream::EvalBatch);
        let plan = BatchPlan {
            final_batch: false,
            ..self.plan()
        };
        let mut values = Vec::with_capacity(samples);
        let mut divergences = 0;
        for _ in 0..samples {
            let noise = NoiseBundle::draw(
                &mut noise_rng,
                &mut batch_rng,
                self.data.d(),
                self.config.k,
                self.data.n(),
                plan,
            )?;
            match self.sample(&noise) {
                Ok(v) => values.push(v),
                Err(e) if e.is_divergence() => divergences += 1,
                Err(e) => return Err(e),
            }
        }
        let m = values.len();
        if m == 0 {
            return Err(Error::Numeric("every evaluation sample diverged".into()));
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        let se = if m > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64 / m as f64).sqrt()
        } else {
            f64::NAN
        };
        Ok(EvalSummary {
            samples: m,
            mean,
            se,
            divergences,
            values,
        })
    }

    /// Closed-form evidence for linear models with a fixed noise scale.
    pub fn log_evidence(&self) -> Result<Option<f64>> {
        if self.model.kind() != LikelihoodKind::Linear || self.vars.theta.is_some() {
            return Ok(None);
        }
        let prior = GaussianMoments::prior_of(&self.model);
        Ok(Some(log_evidence(&prior, self.data.x(), self.data.y(), self.model.sigma_obs())?))
    }

    /// `KL(q₀ ‖ p(z | D))`, which equals the gap of the parametric bound.
    pub fn kl_exact(&self) -> Result<Option<f64>> {
        if self.estimator.annealed() || self.log_evidence()?.is_none() {
            return Ok(None);
        }
        let prior = GaussianMoments::prior_of(&self.model);
        let post = exact_posterior(&prior, self.data.x(), self.data.y(), self.model.sigma_obs())?;
        let d = self.data.d();
        let mean = nalgebra::DVector::from_column_slice(self.vars.q0.loc());
        let cov = nalgebra::DMatrix::from_row_iterator(d, d, self.vars.q0.covariance().into_iter().flatten());
        Ok(Some(kl_to(&mean, &cov, &post)?))
    }

    pub fn report(&self, samples: usize) -> Result<FinalReport> {
        let elbo = self.evaluate(samples)?;
        let log_evidence = self.log_evidence()?;
        Ok(FinalReport {
            method: self.config.method.clone(),
            k: self.config.k,
            batch_size: self.batch_size,
            n_surr: self.config.n_surr,
            seed: self.config.seed,
            steps: self.step,
            samples_per_step: self.config.samples_per_step,
            learn_mass: self.config.flags.learn_mass,
            ns_prime: self.config.flags.ns_prime,
            train_divergences: self.divergences,
            gap: log_evidence.map(|z| z - elbo.mean),
            kl_exact: self.kl_exact()?,
            log_evidence,
            elbo,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.config.seed,
            step: self.step,
            config: self.config.clone(),
            params: self.vars.flat(),
            q0: self.vars.q0.to_json(),
            anneal: self.vars.anneal.clone(),
            surrogate: self.vars.surrogate.as_ref().map(|s| s.to_json()),
            theta: self.vars.theta.clone(),
            trainable: self.trainable.clone(),
            adam: self.adam.clone(),
            divergences: self.divergences,
            noise_pos: self.noise_rng.get_word_pos().to_string(),
            batch_pos: self.batch_rng.get_word_pos().to_string(),
        }
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A finished run.
pub struct FitOutcome {
    pub report: FinalReport,
    pub session: Session,
}

/// Trains on the configured CSV.
pub fn run_fit(config: RunConfig, metrics: &mut dyn Write) -> Result<FitOutcome> {
    let data = config.load_data()?;
    fit_with_data(config, data, metrics)
}

/// Trains on an in-memory dataset, writes the checkpoint if configured and evaluates.
pub fn fit_with_data(config: RunConfig, data: Dataset, metrics: &mut dyn Write) -> Result<FitOutcome> {
    let samples = config.eval_samples;
    let mut session = Session::new(config, data)?;
    session.train(metrics)?;
    if let Some(path) = &session.config.checkpoint {
        session.checkpoint().save(path)?;
    }
    let report = session.report(samples)?;
    Ok(FitOutcome { report, session })
}
