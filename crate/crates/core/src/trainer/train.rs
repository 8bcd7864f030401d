use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::AdapterSpec;
use crate::engine::{DecodeSettings, Engine, GenerationRequest};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::ModelWeights;
use crate::tensor::Scalar;
use crate::trainer::backprop::{loss_and_grad, AdapterParams, Dropout};
use crate::trainer::SftExample;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::config(format!(
                "precision must be f32 or f64, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between held-out evaluations; zero evaluates only at the end.
    pub eval_every: usize,
    /// Stop as soon as a held-out evaluation reaches this exact-match rate.
    pub target_exact_match: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 3000,
            batch_size: 8,
            dropout: 0.0,
            seed: 0,
            precision: Precision::F32,
            eval_every: 100,
            target_exact_match: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be a positive real"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub eval_exact_match: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapter: AdapterSpec,
    pub history: Vec<StepMetrics>,
    /// Exact-match rate of the last evaluation.
    pub exact_match: f64,
    pub steps_run: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam over flat parameter slices.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, params: &AdapterParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut AdapterParams<T>, grads: &AdapterParams<T>) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let f = T::from_f64_lossy;
        let (b1, b2, lr, eps) = (f(BETA1), f(BETA2), f(self.lr), f(ADAM_EPS));
        let (c1, c2) = (f(c1), f(c2));
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Fraction of examples whose greedy continuation of context + invocation
/// reproduces the target exactly.
pub fn exact_match(
    engine: &Engine,
    adapter: &AdapterSpec,
    examples: &[SftExample],
    exec: Exec,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("exact-match evaluation needs examples"));
    }
    let hits = exec.map(examples, |ex| -> Result<bool> {
        let request = GenerationRequest::new(ex.prompt(), DecodeSettings::exactly(ex.target.len()))
            .with_adapter(adapter);
        Ok(engine.generate(&request)?.new_tokens == ex.target)
    });
    let mut count = 0;
    for h in hits {
        count += h? as usize;
    }
    Ok(count as f64 / examples.len() as f64)
}

/// Supervised fine-tuning of `initial`'s factors on `dataset`. The base
/// weights inside `engine` are never modified.
pub fn train(
    engine: &Engine,
    initial: &AdapterSpec,
    dataset: &[SftExample],
    held_out: &[SftExample],
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    initial.validate(engine.config())?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    for ex in dataset.iter().chain(held_out) {
        ex.validate()?;
        if ex.invocation != initial.invocation_sequence {
            return Err(Error::contract(
                "example invocation differs from the adapter's invocation sequence",
            ));
        }
    }
    match config.precision {
        Precision::F32 => run::<f32>(
            engine,
            engine.weights().clone(),
            initial,
            dataset,
            held_out,
            config,
            exec,
        ),
        Precision::F64 => run::<f64>(
            engine,
            engine.weights().cast(),
            initial,
            dataset,
            held_out,
            config,
            exec,
        ),
    }
}

fn run<T: Scalar>(
    engine: &Engine,
    weights: ModelWeights<T>,
    initial: &AdapterSpec,
    dataset: &[SftExample],
    held_out: &[SftExample],
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    let mut params = AdapterParams::<T>::from_spec(initial);
    let mut adam = Adam::new(config.learning_rate, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut exact = 0.0;
    let mut steps_run = 0;
    let model = engine.config();

    for step in 1..=config.steps {
        let batch: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.random_range(0..dataset.len()), rng.random()))
            .collect();
        let results = exec.map(&batch, |&(i, seed)| {
            let dropout = Dropout {
                rate: config.dropout,
                seed,
            };
            loss_and_grad(&weights, model, &params, &dataset[i], initial.mode, dropout)
        });
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l.to_f64_lossy();
            total.add_assign(&g);
        }
        if !loss.is_finite() || !total.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam.update(&mut params, &total);
        steps_run = step;

        let due = step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0);
        let eval = if due && !held_out.is_empty() {
            exact = exact_match(engine, &params.to_spec(initial), held_out, exec)?;
            Some(exact)
        } else {
            None
        };
        history.push(StepMetrics {
            step,
            loss: loss / config.batch_size as f64,
            eval_exact_match: eval,
        });
        if let (Some(e), Some(goal)) = (eval, config.target_exact_match) {
            if e >= goal {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        adapter: params.to_spec(initial),
        history,
        exact_match: exact,
        steps_run,
    })
}

pub const METRICS_HEADER: &str = "step,loss,eval_exact_match";

pub fn write_metrics(history: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let eval = m
            .eval_exact_match
            .map(|e| e.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", m.step, m.loss, eval));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
