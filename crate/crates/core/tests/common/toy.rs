//! The toy task: alphabet "AB", 100 samples of 1 to 3 glyphs, 200 steps.
//! Corpus, split and training share one seed.

use std::time::Instant;

use gtc_core::dataset::{generate_samples, split_assignments, CorpusSpec, Sample, Split};
use gtc_core::tensor::{ParamId, Tape};
use gtc_core::trainer::{evaluate, MetricsCsv, Mode, ModelConfig, StepReport, TrainConfig, Trainer};
use gtc_core::Model;

pub const STEPS: u64 = 200;
pub const BATCH: usize = 16;
pub const LR: f64 = 0.002;
/// Seed of the pinned convergence run.
pub const PINNED_SEED: u64 = 0;

pub struct Toy {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn corpus_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        alphabet: "AB".into(),
        count: 100,
        min_len: 1,
        max_len: 3,
        seed,
        ..CorpusSpec::default()
    }
}

pub fn toy(seed: u64) -> Toy {
    let corpus = generate_samples(&corpus_spec(seed)).unwrap();
    let manifest: Vec<(u64, Split)> = split_assignments(100, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as u64, s))
        .collect();
    Toy {
        train: corpus.select(Split::Train, &manifest),
        val: corpus.select(Split::Val, &manifest),
        test: corpus.select(Split::Test, &manifest),
    }
}

pub fn configs(mode: Mode, seed: u64, steps: u64) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        alphabet: "AB".into(),
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        mode,
        seed,
        lr: LR,
        batch_size: BATCH,
        max_steps: steps,
        ..TrainConfig::default()
    };
    (model, train)
}

pub struct Outcome {
    pub train_acc: f64,
    pub test_acc: f64,
    pub reports: Vec<StepReport>,
    pub seconds: f64,
    pub trainer: Trainer<f64>,
}

/// Full matched-budget run; accuracies use the mode's evaluation head.
pub fn run(mode: Mode, seed: u64) -> Outcome {
    let data = toy(seed);
    let (mc, tc) = configs(mode, seed, STEPS);
    let mut trainer = Trainer::<f64>::new(&mc, &tc, data.train.len()).unwrap();
    let start = Instant::now();
    let mut reports = Vec::new();
    while !trainer.is_done() {
        reports.push(trainer.run_step(&data.train).unwrap());
    }
    let seconds = start.elapsed().as_secs_f64();
    let head = mode.eval_head();
    Outcome {
        train_acc: evaluate(&trainer.model, &data.train, head).unwrap().accuracy,
        test_acc: evaluate(&trainer.model, &data.test, head).unwrap().accuracy,
        reports,
        seconds,
        trainer,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Trailing-window means of `xs`, one per index from `window - 1` on.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Gradients of one loss node alone, per parameter, indexed like the store.
pub fn lone_backward(model: &Model, sample: &Sample, ce: bool) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let losses = model.sample_losses(&mut tape, &sample.image, &sample.label).unwrap();
    let node = if ce { losses.ce } else { losses.ctc }.unwrap();
    let grads = tape.backward(node).unwrap();
    let mut store = model.params.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&grads, &mut store);
    store.iter().map(|(_, p)| p.grad.clone()).collect()
}

pub fn all_zero(grads: &[Vec<f64>], ids: &[ParamId]) -> bool {
    ids.iter().all(|id| grads[id.index()].iter().all(|&g| g == 0.0))
}

pub fn any_nonzero(grads: &[Vec<f64>], ids: &[ParamId]) -> bool {
    ids.iter().any(|id| grads[id.index()].iter().any(|&g| g != 0.0))
}

/// Metrics CSV of a short gtc run evaluated every third step.
pub fn csv_run(seed: u64) -> String {
    let data = toy(seed);
    let (mc, mut tc) = configs(Mode::Gtc, seed, 6);
    tc.eval_interval = 3;
    let mut t = Trainer::<f64>::new(&mc, &tc, data.train.len()).unwrap();
    let mut csv = MetricsCsv::new(Vec::new(), false);
    csv.header().unwrap();
    t.fit(&data.train, &data.val, |_, r, m| csv.row(r, m)).unwrap();
    String::from_utf8(csv.into_inner()).unwrap()
}
