//! The training loop: forward, loss (cross-entropy plus z-loss), clipping,
//! AdamW, instrumentation, and divergence handling.

use crate::data::{CorpusSpec, DocumentStream, PackedBatch, Packer, Split};
use crate::metrics::{rms, MetricRecord, TrackedStats};
use crate::model::{self, ModelConfig, ModelError, Parameters};
use crate::optim::{
    adamw_step, clip_gradients, global_norm, schedule, zloss_from_logz, OptimError, OptimizerConfig,
    OptimizerState,
};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Corpus(#[from] crate::data::CorpusError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("corpus vocabulary {corpus} does not match model vocabulary {model}")]
    VocabMismatch { corpus: usize, model: usize },
    #[error("training data exhausted at step {step}")]
    DataExhausted { step: u64 },
    #[error("held-out split too small for {want} evaluation sequences")]
    EvalDataExhausted { want: usize },
}

/// Running-mean window for the loss-threshold divergence rule; a single
/// noisy batch at desk-scale batch sizes is not divergence.
const DIVERGENCE_LOSS_WINDOW: usize = 25;

/// Attention logits past this value mark the run diverged: the logit-growth
/// instability has fully saturated the softmax by then and the run never
/// recovers.
pub const ATTN_LOGIT_DIVERGENCE: f64 = 1e4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub corpus: CorpusSpec,
    pub batch_size: usize,
    pub seed: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_sequences: usize,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            corpus: CorpusSpec::default(),
            batch_size: 32,
            seed: 0,
            log_interval: 10,
            eval_interval: 250,
            eval_sequences: 64,
        }
    }
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.corpus.validate()?;
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(TrainError::VocabMismatch {
                corpus: self.corpus.vocab_size,
                model: self.model.vocab_size,
            });
        }
        Ok(())
    }

    /// Loss assigned to a diverged run: the uniform predictor over the
    /// vocabulary, which caps sensitivity statistics at a finite value.
    pub fn divergence_cap(&self) -> f64 {
        (self.model.vocab_size as f64).ln()
    }
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub final_eval_loss: f64,
    pub diverged: bool,
    /// Step the divergence was detected at, if any.
    pub diverged_at: Option<u64>,
    pub records: Vec<MetricRecord>,
    pub params: Parameters<T>,
    pub opt_state: OptimizerState<T>,
    pub non_embedding_params: usize,
}

struct EvalSet {
    tokens: Vec<usize>,
    targets: Vec<usize>,
    sequences: usize,
    context: usize,
}

fn build_eval_set(setup: &TrainSetup) -> Result<EvalSet, TrainError> {
    let stream = DocumentStream::open(&setup.corpus, Split::Eval)?;
    let mut packer = Packer::new(stream, setup.eval_sequences, setup.model.context_length);
    let batch = packer
        .next_batch()
        .ok_or(TrainError::EvalDataExhausted { want: setup.eval_sequences })?;
    Ok(EvalSet {
        tokens: batch.tokens,
        targets: batch.targets,
        sequences: setup.eval_sequences,
        context: setup.model.context_length,
    })
}

/// Mean held-out cross-entropy, evaluated in batch-sized slices with frozen
/// parameters.
fn evaluate<T: Scalar>(
    setup: &TrainSetup,
    params: &Parameters<T>,
    eval_set: &EvalSet,
) -> Result<f64, TrainError> {
    let t = eval_set.context;
    let rows_per_chunk = setup.batch_size.max(1);
    let mut total = 0.0;
    let mut chunks = 0.0;
    let mut row = 0;
    while row < eval_set.sequences {
        let rows = rows_per_chunk.min(eval_set.sequences - row);
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let tokens = &eval_set.tokens[row * t..(row + rows) * t];
        let targets = &eval_set.targets[row * t..(row + rows) * t];
        let out = model::forward(&mut tape, &setup.model, &bound, params.layout(), tokens, rows, t)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        total += tape.value(loss)[0].to_f64() * rows as f64;
        chunks += rows as f64;
        row += rows;
    }
    Ok(total / chunks)
}

/// Runs the configured number of steps (or halts at divergence), returning
/// the outcome with the metric log. Identical setup and seed reproduce the
/// log bit for bit.
pub fn train<T: Scalar>(setup: &TrainSetup) -> Result<TrainOutcome<T>, TrainError> {
    setup.validate()?;
    let mut params = model::init_parameters::<T>(&setup.model, setup.seed)?;
    let mut opt_state = OptimizerState::new(&params);
    let non_embedding_params = model::count_parameters(&setup.model);
    let eval_set = build_eval_set(setup)?;
    let train_stream = DocumentStream::open(&setup.corpus, Split::Train)?;
    let mut packer = Packer::new(train_stream, setup.batch_size, setup.model.context_length);

    let mut records: Vec<MetricRecord> = Vec::new();
    let mut diverged_at: Option<u64> = None;
    let uniform_loss = setup.divergence_cap();
    let zcoeff = setup.optimizer.zloss_coeff;
    let mut tape: Tape<T> = Tape::new();
    let mut recent_losses: std::collections::VecDeque<f64> =
        std::collections::VecDeque::with_capacity(DIVERGENCE_LOSS_WINDOW + 1);

    let total_steps = setup.optimizer.total_steps;
    for step in 1..=total_steps {
        let PackedBatch { tokens, targets, .. } = packer
            .next_batch()
            .ok_or(TrainError::DataExhausted { step })?;
        tape.clear();
        let bound = params.bind(&mut tape);
        let want_record = step % setup.log_interval == 0
            || step == total_steps
            || (setup.eval_interval > 0 && step % setup.eval_interval == 0);
        let fwd = model::forward_probed(
            &mut tape,
            &setup.model,
            &bound,
            params.layout(),
            &tokens,
            setup.batch_size,
            setup.model.context_length,
            want_record,
        )?;
        let lse = tape.lse(fwd.logits)?;
        let picked = tape.pick_target(fwd.logits, &targets)?;
        let per_token = tape.sub(lse, picked)?;
        let ce = tape.mean(per_token);
        let train_loss = tape.value(ce)[0].to_f64();
        let log_z_mean = tape.value(lse).iter().map(|&z| z.to_f64()).sum::<f64>()
            / tape.value(lse).len().max(1) as f64;
        let z_loss_value = zloss_from_logz(tape.value(lse), zcoeff);
        let total_loss = if zcoeff != 0.0 {
            let z2 = tape.mul(lse, lse)?;
            let zmean = tape.mean(z2);
            let zl = tape.scale(zmean, T::from_f64(zcoeff));
            tape.add(ce, zl)?
        } else {
            ce
        };

        // Divergence checks, cheapest-to-strongest:
        // 1. non-finite values anywhere in the loss path;
        // 2. running-mean train loss beyond 1.5x the uniform predictor after
        //    warmup (a single noisy batch does not count);
        // 3. any attention logit past the saturation boundary, which is
        //    where logit-growth runs stop learning for good.
        recent_losses.push_back(train_loss);
        if recent_losses.len() > DIVERGENCE_LOSS_WINDOW {
            recent_losses.pop_front();
        }
        let after_warmup = step > setup.optimizer.warmup_steps;
        let mean_recent = recent_losses.iter().sum::<f64>() / recent_losses.len() as f64;
        let max_logit = fwd
            .probes
            .iter()
            .map(|p| p.max_logit)
            .fold(f64::NEG_INFINITY, f64::max);
        let loss_diverged = !train_loss.is_finite()
            || tape.saw_non_finite()
            || (after_warmup && mean_recent > 1.5 * uniform_loss)
            || max_logit > ATTN_LOGIT_DIVERGENCE;

        let s_t = schedule(step, &setup.optimizer);
        let lr_effective = setup.optimizer.max_lr * s_t;

        if loss_diverged {
            diverged_at = Some(step);
            records.push(make_record(
                step,
                train_loss,
                None,
                lr_effective,
                z_loss_value,
                log_z_mean,
                f64::NAN,
                &fwd,
                &params,
                None,
                setup,
                true,
            ));
            break;
        }

        let mut grads = tape.backward(total_loss);
        let mut grad_vecs: Vec<Vec<T>> = bound
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| grads.take(id).unwrap_or_else(|| vec![T::ZERO; params.get(i).tensor.len()]))
            .collect();
        tape.recycle_gradients(grads);
        let grad_global_norm = global_norm(&grad_vecs);
        if let Some(max_norm) = setup.optimizer.clip_global_norm {
            clip_gradients(&mut grad_vecs, max_norm);
        }

        let step_stats = match adamw_step(
            &mut params,
            &grad_vecs,
            &mut opt_state,
            &setup.optimizer,
            setup.model.base_fan_in,
            setup.model.model_dim,
            s_t,
        ) {
            Ok(stats) => stats,
            Err(OptimError::NonFiniteGradients { .. }) => {
                diverged_at = Some(step);
                records.push(make_record(
                    step,
                    train_loss,
                    None,
                    lr_effective,
                    z_loss_value,
                    log_z_mean,
                    grad_global_norm,
                    &fwd,
                    &params,
                    None,
                    setup,
                    true,
                ));
                break;
            }
            Err(e) => return Err(e.into()),
        };

        let should_log = step % setup.log_interval == 0 || step == total_steps;
        let should_eval = setup.eval_interval > 0 && (step % setup.eval_interval == 0 || step == total_steps);
        if should_log || should_eval {
            let eval_loss = if should_eval {
                Some(evaluate(setup, &params, &eval_set)?)
            } else {
                None
            };
            records.push(make_record(
                step,
                train_loss,
                eval_loss,
                lr_effective,
                z_loss_value,
                log_z_mean,
                grad_global_norm,
                &fwd,
                &params,
                Some((&grad_vecs, &step_stats.update_rms)),
                setup,
                false,
            ));
        }
        tape.recycle_buffers(grad_vecs);
    }

    let diverged = diverged_at.is_some();
    let final_eval_loss = if diverged {
        uniform_loss
    } else if total_steps == 0 {
        evaluate(setup, &params, &eval_set)?
    } else {
        // The final record always carries an eval; reuse it.
        records
            .last()
            .and_then(|r| r.eval_loss)
            .map_or_else(|| evaluate(setup, &params, &eval_set), Ok)?
    };

    Ok(TrainOutcome {
        final_eval_loss,
        diverged,
        diverged_at,
        records,
        params,
        opt_state,
        non_embedding_params,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_record<T: Scalar>(
    step: u64,
    train_loss: f64,
    eval_loss: Option<f64>,
    lr_effective: f64,
    z_loss_value: f64,
    log_z_mean: f64,
    grad_global_norm: f64,
    fwd: &model::ForwardOutput,
    params: &Parameters<T>,
    grads_and_updates: Option<(&[Vec<T>], &[f64])>,
    setup: &TrainSetup,
    diverged: bool,
) -> MetricRecord {
    let layout = params.layout();
    let tracked = layout
        .layers
        .iter()
        .map(|lay| {
            let param_rms = rms(params.get(lay.w_in).tensor.data());
            let (grad_rms, update_rms) = match grads_and_updates {
                Some((grads, updates)) => (rms(&grads[lay.w_in]), updates[lay.w_in]),
                None => (f64::NAN, f64::NAN),
            };
            TrackedStats { grad_rms, update_rms, param_rms }
        })
        .collect();
    let _ = setup;
    MetricRecord {
        step,
        train_loss,
        eval_loss,
        lr_effective,
        z_loss_value,
        log_z_mean,
        grad_global_norm,
        attention: fwd.probes.clone(),
        tracked,
        block_output_rms: fwd.block_output_rms.clone(),
        diverged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup() -> TrainSetup {
        TrainSetup {
            model: ModelConfig {
                model_dim: 16,
                num_layers: 1,
                num_heads: 2,
                head_dim: 8,
                vocab_size: 32,
                context_length: 8,
                ..ModelConfig::default()
            },
            optimizer: OptimizerConfig {
                max_lr: 1e-2,
                warmup_steps: 2,
                total_steps: 10,
                ..OptimizerConfig::default()
            },
            corpus: CorpusSpec { vocab_size: 32, ..CorpusSpec::default() },
            batch_size: 2,
            seed: 5,
            log_interval: 2,
            eval_interval: 5,
            eval_sequences: 4,
        }
    }

    #[test]
    fn zero_steps_returns_initial_eval_loss() {
        let mut setup = tiny_setup();
        setup.optimizer.total_steps = 0;
        setup.optimizer.warmup_steps = 0;
        let out = train::<f64>(&setup).unwrap();
        assert!(out.records.is_empty());
        // Equals the eval loss of the freshly initialized parameters.
        let params = model::init_parameters::<f64>(&setup.model, setup.seed).unwrap();
        let eval_set = build_eval_set(&setup).unwrap();
        let fresh = evaluate(&setup, &params, &eval_set).unwrap();
        assert_eq!(out.final_eval_loss.to_bits(), fresh.to_bits());
        // An untrained model over V=32 sits in the vicinity of uniform.
        assert!((out.final_eval_loss - 32f64.ln()).abs() < 1.5);
    }

    #[test]
    fn deterministic_replay() {
        let setup = tiny_setup();
        let a = train::<f64>(&setup).unwrap();
        let b = train::<f64>(&setup).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.grad_global_norm.to_bits(), rb.grad_global_norm.to_bits());
        }
        assert_eq!(a.final_eval_loss.to_bits(), b.final_eval_loss.to_bits());
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }

    #[test]
    fn vocab_mismatch_is_an_error() {
        let mut setup = tiny_setup();
        setup.corpus.vocab_size = 64;
        assert!(matches!(train::<f64>(&setup), Err(TrainError::VocabMismatch { .. })));
    }

    #[test]
    fn records_appear_on_log_interval() {
        let setup = tiny_setup();
        let out = train::<f64>(&setup).unwrap();
        assert!(!out.diverged);
        let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 4, 5, 6, 8, 10]);
        // final record carries the eval
        assert!(out.records.last().unwrap().eval_loss.is_some());
    }
}
