//! Guided training loop, ablation modes, evaluation, latency benchmark and
//! checkpointing.
//!
//! One tape per batch step. Each sample contributes a cross-entropy term from
//! the guidance and a CTC term from the GCN head; in the guided modes the
//! CTC head reads `detach(h)`, so a single backward of the weighted sum sends
//! CE gradients only into encoder + guidance and CTC gradients only into the
//! head.

mod checkpoint;
mod config;

use std::io::Write;
use std::time::{Duration, Instant};

use log::warn;
use rand::seq::SliceRandom;

pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{config_echo, parse_echo, Head, Ini, Mode, ModelConfig, TrainConfig};

use crate::ctc::{best_path, collapse, ctc_loss, Alphabet, LabelSequence};
use crate::dataset::Sample;
use crate::encoder::{Encoder, GrayImage};
use crate::error::{Error, Result};
use crate::gcn::{GcnConfig, GcnDecoder};
use crate::guidance::{Guidance, GuidanceConfig};
use crate::rng::{domain, stream};
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamConfig, ParamId, ParamStore, Tape, Tensor, Var};

/// Encoder, optional guidance and optional CTC head over one parameter store.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub mode: Mode,
    pub alphabet: Alphabet,
    pub params: ParamStore<S>,
    pub encoder: Encoder,
    pub guidance: Option<Guidance>,
    pub decoder: Option<GcnDecoder>,
}

/// Loss nodes of one sample; absent when the mode has no such head.
#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub features: Var,
    pub ce: Option<Var>,
    pub ctc: Option<Var>,
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters drawn from a stream derived from `train.seed`.
    pub fn new(config: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let alphabet = Alphabet::new(&config.alphabet)?;
        let mode = train.mode;
        let mut rng = stream(train.seed, domain::PARAMS, 0);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let c = encoder.feature_width();
        let guidance = mode.has_guidance().then(|| {
            let g = GuidanceConfig {
                feature_width: c,
                num_symbols: alphabet.len(),
                embed_dim: config.embed_dim,
                hidden: config.attention_hidden,
                max_decode_len: config.max_decode_len,
            };
            Guidance::new(g, &mut params, &mut rng)
        });
        let decoder = mode.has_ctc_head().then(|| {
            let g = GcnConfig {
                input_width: c,
                projection_dim: config.projection_dim.unwrap_or(c),
                beta: train.beta,
                use_gcn: mode.uses_gcn(),
                use_mix_weight: config.use_mix_weight,
                hidden: config.lstm_hidden,
                num_classes: alphabet.num_classes(),
            };
            GcnDecoder::new(g, &mut params, &mut rng)
        });
        Ok(Self {
            config: config.clone(),
            mode,
            alphabet,
            params,
            encoder,
            guidance,
            decoder,
        })
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn guidance_ids(&self) -> Vec<ParamId> {
        self.guidance.as_ref().map(Guidance::param_ids).unwrap_or_default()
    }

    pub fn decoder_ids(&self) -> Vec<ParamId> {
        self.decoder.as_ref().map(GcnDecoder::param_ids).unwrap_or_default()
    }

    /// Errors with `InfeasibleLabel` when the CTC head cannot align `label`
    /// in the frames this image produces.
    pub fn check_feasible(&self, image: &GrayImage, label: &LabelSequence) -> Result<()> {
        if self.decoder.is_none() {
            return Ok(());
        }
        let frames = self.encoder.frames(image.width)?;
        if label.min_frames() > frames {
            return Err(Error::InfeasibleLabel {
                label_len: label.len(),
                min_frames: label.min_frames(),
                frames,
            });
        }
        Ok(())
    }

    /// Records the encoder and every head's loss for one sample, with the
    /// stop-gradient placed according to the mode.
    pub fn sample_losses(&self, tape: &mut Tape<S>, image: &GrayImage, label: &LabelSequence) -> Result<SampleLosses> {
        if label.is_empty() {
            return Err(Error::Contract("training labels must be non-empty".into()));
        }
        self.check_feasible(image, label)?;
        let h = self.encoder.encode(tape, &self.params, image)?;
        let ce = match &self.guidance {
            Some(g) => {
                let input = if self.mode.ce_detached() { tape.detach(h) } else { h };
                Some(g.teacher_forced_loss(tape, &self.params, input, label)?)
            }
            None => None,
        };
        let ctc = match &self.decoder {
            Some(d) => {
                let input = if self.mode.ctc_detached() { tape.detach(h) } else { h };
                let lp = d.log_probs(tape, &self.params, input)?;
                Some(ctc_loss(tape, lp, label)?)
            }
            None => None,
        };
        Ok(SampleLosses { features: h, ce, ctc })
    }

    /// Parameter gradients of `ce_weight * CE + ctc_weight * CTC` for one
    /// sample, indexed like the store.
    pub fn gradients(&self, image: &GrayImage, label: &LabelSequence, ce_weight: f64, ctc_weight: f64) -> Result<Vec<Vec<S>>> {
        let mut tape = Tape::new();
        let losses = self.sample_losses(&mut tape, image, label)?;
        let total = weighted_total(&mut tape, &[losses], ce_weight, ctc_weight)?
            .ok_or_else(|| Error::Contract("model has no loss".into()))?;
        let grads = tape.backward(total.total)?;
        let mut store = self.params.clone();
        store.zero_grad();
        tape.accumulate_param_grads(&grads, &mut store);
        Ok(store.iter().map(|(_, p)| p.grad.clone()).collect())
    }

    /// `[T, C]` features of one image, without recording gradients.
    pub fn features(&self, image: &GrayImage) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let h = self.encoder.encode(&mut tape, &self.params, image)?;
        Ok(tape.value(h).clone())
    }

    pub fn decode(&self, image: &GrayImage, head: Head) -> Result<LabelSequence> {
        let h = self.features(image)?;
        self.decode_features(&h, head)
    }

    /// Greedy decode of precomputed features with the chosen head.
    pub fn decode_features(&self, features: &Tensor<S>, head: Head) -> Result<LabelSequence> {
        let mut tape = Tape::inference();
        let h = tape.constant(features.clone());
        match head {
            Head::Ctc => {
                let d = self.decoder.as_ref().ok_or_else(|| Error::Unsupported("no CTC head".into()))?;
                let z = d.logits(&mut tape, &self.params, h)?;
                Ok(collapse(&best_path(tape.value(z))))
            }
            Head::Attention => {
                let g = self
                    .guidance
                    .as_ref()
                    .ok_or_else(|| Error::Unsupported("no guidance head".into()))?;
                g.greedy_infer(&mut tape, &self.params, h, self.config.max_decode_len)
            }
        }
    }
}

struct BatchLoss {
    total: Var,
    ce: Option<Var>,
    ctc: Option<Var>,
}

fn mean_of<S: Scalar>(tape: &mut Tape<S>, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, S::lit(1.0 / terms.len() as f64))?))
}

/// `ce_weight * mean(CE) + ctc_weight * mean(CTC)`; `None` if no terms.
fn weighted_total<S: Scalar>(
    tape: &mut Tape<S>,
    losses: &[SampleLosses],
    ce_weight: f64,
    ctc_weight: f64,
) -> Result<Option<BatchLoss>> {
    let ce_terms: Vec<Var> = losses.iter().filter_map(|l| l.ce).collect();
    let ctc_terms: Vec<Var> = losses.iter().filter_map(|l| l.ctc).collect();
    let ce = mean_of(tape, &ce_terms)?;
    let ctc = mean_of(tape, &ctc_terms)?;
    let total = match (ce, ctc) {
        (Some(a), Some(b)) => {
            let a = tape.scale(a, S::lit(ce_weight))?;
            let b = tape.scale(b, S::lit(ctc_weight))?;
            tape.add(a, b)?
        }
        (Some(a), None) => tape.scale(a, S::lit(ce_weight))?,
        (None, Some(b)) => tape.scale(b, S::lit(ctc_weight))?,
        (None, None) => return Ok(None),
    };
    Ok(Some(BatchLoss { total, ce, ctc }))
}

/// Gradient L2 norms per parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchNorms {
    pub encoder: f64,
    pub guidance: f64,
    pub decoder: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Number of completed steps after this one.
    pub step: u64,
    pub ce_loss: Option<f64>,
    pub ctc_loss: Option<f64>,
    pub grad_norms: BranchNorms,
    pub lr: f64,
    pub used: usize,
    /// Samples dropped because their label cannot be aligned.
    pub skipped: usize,
    pub wall: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean of edit distance over label length.
    pub ned: f64,
    pub ms_per_image: f64,
    pub count: usize,
}

/// Optimizer state, data order and step counter around a [`Model`].
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub model: Model<S>,
    pub config: TrainConfig,
    pub optimizer: Adam<S>,
    step: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh model; `train_len` is the size of the training set batches are
    /// drawn from.
    pub fn new(model: &ModelConfig, config: &TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let model = Model::new(model, config)?;
        let optimizer = Adam::new(AdamConfig::default(), &model.params);
        let mut order: Vec<usize> = (0..train_len).collect();
        order.shuffle(&mut stream(config.seed, domain::ORDER, 0));
        Ok(Self {
            model,
            config: config.clone(),
            optimizer,
            step: 0,
            epoch: 0,
            order,
            cursor: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_steps
    }

    /// Next `batch_size` samples of the shuffled order, reshuffling at each
    /// epoch boundary.
    pub fn next_batch<'a>(&mut self, train: &'a [Sample]) -> Result<Vec<&'a Sample>> {
        if train.len() != self.order.len() {
            return Err(Error::Config(format!(
                "training set has {} samples, trainer was set up for {}",
                train.len(),
                self.order.len()
            )));
        }
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.order.shuffle(&mut stream(self.config.seed, domain::ORDER, self.epoch));
                self.cursor = 0;
            }
            batch.push(&train[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Ok(batch)
    }

    /// Forward, one combined backward, one Adam update.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        let start = Instant::now();
        let model = &self.model;
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        let mut skipped = 0;
        for s in batch {
            match model.sample_losses(&mut tape, &s.image, &s.label) {
                Ok(l) => losses.push(l),
                Err(Error::InfeasibleLabel { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if skipped > 0 {
            warn!("step {}: skipped {skipped} infeasible samples", self.step + 1);
        }
        let lr = self.config.lr_at(self.step);
        let combined = weighted_total(&mut tape, &losses, self.config.ce_weight, self.config.ctc_weight)?;
        let (mut ce_loss, mut ctc_loss, mut norms) = (None, None, BranchNorms::default());
        if let Some(b) = combined {
            ce_loss = b.ce.map(|v| tape.value(v).item().as_f64());
            ctc_loss = b.ctc.map(|v| tape.value(v).item().as_f64());
            let grads = tape.backward(b.total)?;
            tape.accumulate_param_grads(&grads, &mut self.model.params);
            norms = self.branch_norms();
            self.optimizer.step(&mut self.model.params, lr)?;
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            ce_loss,
            ctc_loss,
            grad_norms: norms,
            lr,
            used: losses.len(),
            skipped,
            wall: start.elapsed(),
        })
    }

    fn branch_norms(&self) -> BranchNorms {
        let norm = |ids: Vec<ParamId>| {
            ids.into_iter()
                .map(|id| self.model.params.get(id).grad_norm_sq().as_f64())
                .fold(0.0, |a, b| a + b)
                .sqrt()
        };
        BranchNorms {
            encoder: norm(self.model.encoder_ids()),
            guidance: norm(self.model.guidance_ids()),
            decoder: norm(self.model.decoder_ids()),
        }
    }

    /// A step in one of the guided modes.
    pub fn guided_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        if !self.config.mode.is_guided() {
            return Err(Error::Contract(format!("guided_step in mode {}", self.config.mode)));
        }
        self.train_step(batch)
    }

    /// A step in one of the ablation modes.
    pub fn ablation_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        if self.config.mode.is_guided() {
            return Err(Error::Contract(format!("ablation_step in mode {}", self.config.mode)));
        }
        self.train_step(batch)
    }

    /// Draws the next batch and trains on it.
    pub fn run_step(&mut self, train: &[Sample]) -> Result<StepReport> {
        let batch = self.next_batch(train)?;
        self.train_step(&batch)
    }

    /// Trains until `max_steps`, evaluating on `eval` every `eval_interval`
    /// steps and after the last one. `sink` sees every step.
    pub fn fit(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        mut sink: impl FnMut(&Self, &StepReport, Option<&Metrics>) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let report = self.run_step(train)?;
            let interval = self.config.eval_interval;
            let due = self.is_done() || (interval > 0 && report.step % interval == 0);
            let metrics = if due && !eval.is_empty() {
                Some(evaluate(&self.model, eval, self.model.mode.eval_head())?)
            } else {
                None
            };
            sink(self, &report, metrics.as_ref())?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let to_f64 = |v: &[S]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let params = self
            .model
            .params
            .iter()
            .map(|(id, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                value: to_f64(p.value.data()),
                first_moment: to_f64(&self.optimizer.first_moment[id.index()]),
                second_moment: to_f64(&self.optimizer.second_moment[id.index()]),
            })
            .collect();
        Checkpoint {
            config_echo: config_echo(&self.model.config, &self.config),
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor as u64,
            order: self.order.iter().map(|&i| i as u64).collect(),
            adam_t: self.optimizer.t,
            params,
        }
    }

    /// Rebuilds a trainer for the given configs and loads the checkpoint's
    /// state into it; every parameter must be present with its shape.
    pub fn restore(model: &ModelConfig, config: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let order: Vec<usize> = ckpt.order.iter().map(|&i| i as usize).collect();
        let mut t = Self::new(model, config, order.len().max(1))?;
        if ckpt.cursor as usize > order.len() || order.iter().any(|&i| i >= order.len()) {
            return Err(Error::Format {
                offset: 0,
                msg: "checkpoint data order is inconsistent".into(),
            });
        }
        if ckpt.params.len() != t.model.params.len() {
            let extra = ckpt.params.iter().find(|r| t.model.params.find(&r.name).is_none());
            if let Some(r) = extra {
                return Err(Error::Config(format!("checkpoint parameter {} not in model", r.name)));
            }
        }
        let ids: Vec<ParamId> = t.model.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = t.model.params.get(id).name.clone();
            let expected = t.model.params.get(id).value.shape().to_vec();
            let rec = ckpt.param(&name).ok_or_else(|| Error::ParamShape {
                name: name.clone(),
                expected: expected.clone(),
                found: vec![],
            })?;
            if rec.shape != expected {
                return Err(Error::ParamShape {
                    name,
                    expected,
                    found: rec.shape.clone(),
                });
            }
            let from = |v: &[f64]| v.iter().map(|&x| S::lit(x)).collect::<Vec<S>>();
            t.model.params.load_value(&name, Tensor::new(rec.shape.clone(), from(&rec.value))?)?;
            t.optimizer.first_moment[id.index()] = from(&rec.first_moment);
            t.optimizer.second_moment[id.index()] = from(&rec.second_moment);
        }
        t.optimizer.t = ckpt.adam_t;
        t.step = ckpt.step;
        t.epoch = ckpt.epoch;
        t.order = order;
        t.cursor = ckpt.cursor as usize;
        Ok(t)
    }

    /// Restores using the config echoed into the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, train) = parse_echo(&ckpt.config_echo)?;
        Self::restore(&model, &train, ckpt)
    }
}

/// Levenshtein distance between two symbol sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Greedy-decodes every sample with `head`. Timing covers decoding only.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[Sample], head: Head) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let (mut correct, mut ned, mut elapsed) = (0usize, 0.0f64, Duration::ZERO);
    for s in samples {
        let start = Instant::now();
        let pred = model.decode(&s.image, head)?;
        elapsed += start.elapsed();
        if pred == s.label {
            correct += 1;
        }
        ned += edit_distance(&pred.indices, &s.label.indices) as f64 / s.label.len().max(1) as f64;
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        ned: ned / n,
        ms_per_image: elapsed.as_secs_f64() * 1e3 / n,
        count: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub n: usize,
    pub ctc_ms_per_image: f64,
    pub attention_ms_per_image: f64,
    /// Attention time over CTC time.
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median per-image latency of the two decoders on the same encoder
/// features, one image at a time, cycling through `images` for `n` runs.
pub fn bench_decode<S: Scalar>(model: &Model<S>, images: &[GrayImage], n: usize) -> Result<BenchReport> {
    if n == 0 {
        return Err(Error::Contract("bench needs at least one image".into()));
    }
    if images.is_empty() {
        return Err(Error::Contract("bench needs a non-empty image set".into()));
    }
    if model.decoder.is_none() {
        return Err(Error::Unsupported("no CTC head".into()));
    }
    if model.guidance.is_none() {
        return Err(Error::Unsupported("no guidance head".into()));
    }
    let features = images
        .iter()
        .map(|im| model.features(im))
        .collect::<Result<Vec<_>>>()?;
    // Warm-up pass so allocation effects do not land on the first sample.
    model.decode_features(&features[0], Head::Ctc)?;
    model.decode_features(&features[0], Head::Attention)?;
    let mut ctc = Vec::with_capacity(n);
    let mut att = Vec::with_capacity(n);
    for i in 0..n {
        let h = &features[i % features.len()];
        let t = Instant::now();
        model.decode_features(h, Head::Ctc)?;
        ctc.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        model.decode_features(h, Head::Attention)?;
        att.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (c, a) = (median(ctc), median(att));
    Ok(BenchReport {
        n,
        ctc_ms_per_image: c,
        attention_ms_per_image: a,
        ratio: a / c,
    })
}

/// Writer for `step,ce_loss,ctc_loss,acc,ned,ms_per_image` rows. Timing is
/// left blank unless enabled so that the file is reproducible bit for bit.
pub struct MetricsCsv<W: Write> {
    out: W,
    timing: bool,
}

pub const METRICS_HEADER: &str = "step,ce_loss,ctc_loss,acc,ned,ms_per_image";

impl<W: Write> MetricsCsv<W> {
    pub fn new(out: W, timing: bool) -> Self {
        Self { out, timing }
    }

    pub fn header(&mut self) -> Result<()> {
        writeln!(self.out, "{METRICS_HEADER}")?;
        Ok(())
    }

    pub fn row(&mut self, report: &StepReport, metrics: Option<&Metrics>) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let ms = if self.timing { metrics.map(|m| m.ms_per_image) } else { None };
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            report.step,
            opt(report.ce_loss),
            opt(report.ctc_loss),
            opt(metrics.map(|m| m.accuracy)),
            opt(metrics.map(|m| m.ned)),
            opt(ms),
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[], &[]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
        assert_eq!(edit_distance(&[0, 1, 0], &[1, 0, 1]), 2);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
