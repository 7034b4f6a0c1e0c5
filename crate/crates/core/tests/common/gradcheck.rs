//! Central finite-difference checks of every differentiable operation.
//!
//! Each case builds a scalar from parameters held in a store (non-scalar
//! outputs are contracted with fixed random weights), then compares the tape
//! gradient with `(f(x + eps) - f(x - eps)) / 2 eps` element by element.
//! The error measure is `||analytic - numeric|| / max(||analytic||, ||numeric||, FLOOR)`
//! per parameter tensor; the floor only matters for gradients that vanish
//! identically (e.g. cosine similarity of 1-D slices).

use gtc_core::ctc::{ctc_loss, LabelSequence};
use gtc_core::encoder::{Encoder, EncoderConfig, GrayImage, LayerSpec, Padding};
use gtc_core::gcn::{similarity_matrix, GcnConfig, GcnDecoder, LstmCell};
use gtc_core::guidance::{Guidance, GuidanceConfig};
use gtc_core::rng::{uniform, SplitMix64};
use gtc_core::tensor::{Pad2d, ParamId, ParamStore, Tape, Tensor, Var};
use gtc_core::Result;
use rand::{Rng, SeedableRng};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| uniform(&mut *rng, -1.0, 1.0)).collect()).unwrap()
}

fn positive(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| 0.5 + x.abs())
}

/// Reduces `out` to a scalar with weights drawn from `seed`.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    if tape.shape(out) == [1] {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let w = random(&mut SplitMix64::seed_from_u64(seed ^ 0x5EED), &shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn eval<F>(store: &ParamStore<f64>, f: &F, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let y = contract(&mut tape, out, seed).unwrap();
    tape.value(y).item()
}

/// Worst per-tensor relative error over all parameters of `store`.
fn max_rel_error<F>(store: &ParamStore<f64>, f: F, seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let y = contract(&mut tape, out, seed).unwrap();
    let grads = tape.backward(y).unwrap();
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for id in ids {
        let n = store.get(id).value.len();
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for j in 0..n {
            let orig = store.get(id).value.data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + EPS;
            let up = eval(&probe, &f, seed);
            probe.get_mut(id).value.data_mut()[j] = orig - EPS;
            let down = eval(&probe, &f, seed);
            probe.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.get(id).grad[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(FLOOR);
        assert!(
            rel.is_finite(),
            "non-finite error on {}",
            store.get(id).name
        );
        worst = worst.max(rel);
    }
    worst
}

/// Runs `INSTANCES` random cases built by `setup` and asserts the tolerance.
fn check<F>(name: &str, setup: impl Fn(&mut SplitMix64) -> (ParamStore<f64>, F))
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = SplitMix64::seed_from_u64(0xC0FFEE ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (store, f) = setup(&mut rng);
        let err = max_rel_error(&store, f, seed);
        assert!(err < TOL, "{name}: instance {seed} relative error {err:.3e}");
    }
}

fn dims(rng: &mut SplitMix64, lo: i64, hi: i64) -> usize {
    rng.random_range(lo..=hi) as usize
}

fn store_of(tensors: Vec<Tensor<f64>>) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t))
        .collect();
    (store, ids)
}

macro_rules! unary {
    ($test:ident, $op:ident, $gen:ident) => {
        pub fn $test() {
            check(stringify!($op), |rng| {
                let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 5));
                let (store, ids) = store_of(vec![$gen(rng, &[m, n])]);
                (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
                    let x = t.param(s, ids[0]);
                    t.$op(x)
                })
            });
        }
    };
}

unary!(sigmoid, sigmoid, random);
unary!(tanh, tanh, random);
unary!(relu, relu, random);
unary!(exp, exp, random);
unary!(log, log, positive);
unary!(row_softmax, row_softmax, random);
unary!(row_log_softmax, row_log_softmax, random);
unary!(transpose, transpose2d, random);
unary!(sum, sum, random);
unary!(mean, mean, random);

pub fn matmul() {
    check("matmul", |rng| {
        let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 4));
        let (store, ids) = store_of(vec![random(rng, &[m, k]), random(rng, &[k, n])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
            t.matmul(a, b)
        })
    });
}

pub fn add_sub_mul_same_shape() {
    check("add_sub_mul", |rng| {
        let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
        let (store, ids) = store_of(vec![random(rng, &shape), random(rng, &shape), random(rng, &shape)]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (a, b, c) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
            let ab = t.add(a, b)?;
            let d = t.sub(ab, c)?;
            let e = t.mul(d, a)?;
            t.scale(e, 0.75)
        })
    });
}

pub fn add_row_broadcast() {
    check("add_broadcast", |rng| {
        let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 4));
        let (store, ids) = store_of(vec![random(rng, &[m, n]), random(rng, &[n]), random(rng, &[1, n])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (a, b, c) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
            let x = t.add(a, b)?;
            t.sub(x, c)
        })
    });
}

pub fn row_l2_normalize() {
    check("row_l2_normalize", |rng| {
        let (m, n) = (dims(rng, 1, 4), dims(rng, 1, 5));
        let (store, ids) = store_of(vec![random(rng, &[m, n])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let x = t.param(s, ids[0]);
            t.row_l2_normalize(x, 1e-12)
        })
    });
}

pub fn concat_slice_reshape() {
    check("concat_slice_reshape", |rng| {
        let (m, n1, n2) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
        let (store, ids) = store_of(vec![random(rng, &[m, n1]), random(rng, &[m, n2]), random(rng, &[1, n1 + n2])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (a, b, c) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
            let ab = t.concat(&[a, b], 1)?;
            let abc = t.concat(&[ab, c], 0)?;
            let sl = t.slice(abc, 1, 1.min(n1 + n2 - 1), n1 + n2)?;
            let w = t.shape(sl)[1];
            let r = t.reshape(sl, &[(m + 1) * w])?;
            t.tanh(r)
        })
    });
}

pub fn conv2d() {
    check("conv2d", |rng| {
        let (ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3));
        let (kh, kw) = (dims(rng, 1, 3), dims(rng, 1, 3));
        let (h, w) = (dims(rng, 3, 5), dims(rng, 3, 6));
        let stride = (dims(rng, 1, 2), dims(rng, 1, 2));
        let pad = Pad2d {
            top: dims(rng, 0, 1),
            bottom: dims(rng, 0, 1),
            left: dims(rng, 0, 2),
            right: dims(rng, 0, 1),
        };
        let (store, ids) = store_of(vec![random(rng, &[ci, h, w]), random(rng, &[co, ci, kh, kw]), random(rng, &[co])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (x, k, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
            t.conv2d(x, k, b, stride, pad)
        })
    });
}

pub fn pooling() {
    check("pooling", |rng| {
        let (c, h, w) = (dims(rng, 1, 2), dims(rng, 2, 5), dims(rng, 2, 6));
        let kernel = (dims(rng, 1, 2), dims(rng, 1, 3));
        let stride = (dims(rng, 1, 2), dims(rng, 1, 2));
        let (store, ids) = store_of(vec![random(rng, &[c, h, w]), random(rng, &[c, h, w])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (x, y) = (t.param(s, ids[0]), t.param(s, ids[1]));
            let a = t.max_pool2d(x, kernel, stride)?;
            let b = t.avg_pool2d(y, kernel, stride)?;
            t.add(a, b)
        })
    });
}

pub fn embedding() {
    check("embedding", |rng| {
        let (v, e) = (dims(rng, 2, 5), dims(rng, 1, 4));
        let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..v)).collect();
        let (store, ids) = store_of(vec![random(rng, &[v, e])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let table = t.param(s, ids[0]);
            t.embedding(table, &idx)
        })
    });
}

pub fn lstm_cell() {
    check("lstm", |rng| {
        let (frames, input, hidden) = (dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3));
        let mut store = ParamStore::new();
        let x = store.add("x", random(rng, &[frames, input]));
        let cell = LstmCell::new(&mut store, "lstm", input, hidden, rng);
        let reverse = rng.random_range(0..2) == 1;
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let xv = t.param(s, x);
            let states = cell.run(t, s, xv, reverse)?;
            t.concat(&states, 0)
        })
    });
}

fn small_guidance(rng: &mut SplitMix64) -> (ParamStore<f64>, Guidance, ParamId, usize) {
    let (frames, c, n) = (dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3));
    let config = GuidanceConfig {
        feature_width: c,
        num_symbols: n,
        embed_dim: dims(rng, 1, 3),
        hidden: dims(rng, 1, 3),
        max_decode_len: 8,
    };
    let mut store = ParamStore::new();
    let h = store.add("h", random(rng, &[frames, c]));
    let g = Guidance::new(config, &mut store, rng);
    (store, g, h, n)
}

pub fn gru_step() {
    check("gru", |rng| {
        let (mut store, g, h, n) = small_guidance(rng);
        let s_prev = store.add("s_prev", random(rng, &[1, g.config.hidden]));
        let glimpse = store.add("glimpse", random(rng, &[1, g.config.feature_width]));
        let y_prev = rng.random_range(0..n + 2);
        let _ = h;
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let (sp, gl) = (t.param(s, s_prev), t.param(s, glimpse));
            g.gru_step(t, s, y_prev, gl, sp)
        })
    });
}

pub fn attention() {
    check("attention", |rng| {
        let (mut store, g, h, _) = small_guidance(rng);
        let s_prev = store.add("s_prev", random(rng, &[1, g.config.hidden]));
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let hv = t.param(s, h);
            let ctx = g.context(t, hv)?;
            let sp = t.param(s, s_prev);
            let alpha = g.attention_weights(t, s, sp, &ctx)?;
            let glimpse = g.glimpse(t, alpha, &ctx)?;
            t.concat(&[alpha, glimpse], 1)
        })
    });
}

pub fn teacher_forced_loss() {
    check("teacher_forced_loss", |rng| {
        let (store, g, h, n) = small_guidance(rng);
        let len = dims(rng, 1, 3);
        let label = LabelSequence::new((0..len).map(|_| rng.random_range(0..n)).collect());
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let hv = t.param(s, h);
            g.teacher_forced_loss(t, s, hv, &label)
        })
    });
}

fn small_decoder(rng: &mut SplitMix64, use_gcn: bool) -> (ParamStore<f64>, GcnDecoder, ParamId) {
    let (frames, c) = (dims(rng, 2, 5), dims(rng, 1, 3));
    let config = GcnConfig {
        input_width: c,
        projection_dim: dims(rng, 1, 3),
        beta: 2.0,
        use_gcn,
        use_mix_weight: true,
        hidden: dims(rng, 1, 3),
        num_classes: dims(rng, 2, 4),
    };
    let mut store = ParamStore::new();
    let h = store.add("h", random(rng, &[frames, c]));
    let d = GcnDecoder::new(config, &mut store, rng);
    // Move the mixing weight off the identity so its gradient is generic.
    let mw = d.mix_weight.unwrap_or(h);
    if d.mix_weight.is_some() {
        let noise = random(rng, store.get(mw).value.shape());
        for (v, e) in store.get_mut(mw).value.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    (store, d, h)
}

pub fn cosine_similarity() {
    check("similarity", |rng| {
        let (t_len, d) = (dims(rng, 1, 5), dims(rng, 1, 4));
        let (store, ids) = store_of(vec![random(rng, &[t_len, d])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let c = t.param(s, ids[0]);
            similarity_matrix(t, c)
        })
    });
}

pub fn gcn_forward() {
    check("gcn_forward", |rng| {
        let (store, d, h) = small_decoder(rng, true);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let hv = t.param(s, h);
            d.gcn_forward(t, s, hv)
        })
    });
}

pub fn gcn_decoder_logits() {
    check("decoder_logits", |rng| {
        let use_gcn = rng.random_range(0..2) == 0;
        let (store, d, h) = small_decoder(rng, use_gcn);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let hv = t.param(s, h);
            d.logits(t, s, hv)
        })
    });
}

pub fn ctc_loss_on_log_softmax() {
    check("ctc", |rng| {
        let k = dims(rng, 2, 4);
        let len = dims(rng, 1, 3);
        let label = LabelSequence::new((0..len).map(|_| rng.random_range(0..k - 1)).collect());
        let frames = label.min_frames() + dims(rng, 0, 3);
        let (store, ids) = store_of(vec![random(rng, &[frames, k]).map(|x| 2.0 * x)]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let z = t.param(s, ids[0]);
            let lp = t.row_log_softmax(z)?;
            ctc_loss(t, lp, &label)
        })
    });
}

pub fn ctc_loss_raw_potentials() {
    check("ctc_raw", |rng| {
        let k = dims(rng, 2, 4);
        let len = dims(rng, 1, 3);
        let label = LabelSequence::new((0..len).map(|_| rng.random_range(0..k - 1)).collect());
        let frames = label.min_frames() + dims(rng, 0, 3);
        let (store, ids) = store_of(vec![random(rng, &[frames, k])]);
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| {
            let z = t.param(s, ids[0]);
            ctc_loss(t, z, &label)
        })
    });
}

pub fn encoder_stack() {
    check("encoder", |rng| {
        let config = EncoderConfig {
            height: 4,
            min_width: 1,
            max_width: 16,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: (3, 3),
                    stride: (1, 1),
                    padding: Padding::Causal,
                },
                LayerSpec::MaxPool {
                    kernel: (2, 2),
                    stride: (2, 2),
                },
                LayerSpec::Residual {
                    kernel: (3, 3),
                    padding: Padding::Same,
                },
                LayerSpec::AvgPool {
                    kernel: (2, 1),
                    stride: (1, 1),
                },
            ],
        };
        let width = dims(rng, 3, 6);
        let pixels = (0..4 * width).map(|_| rng.random_range(0..=255u8)).collect();
        let image = GrayImage::new(4, width, pixels).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(config, &mut store, rng).unwrap();
        (store, move |t: &mut Tape<f64>, s: &ParamStore<f64>| enc.encode(t, s, &image))
    });
}

pub const CASES: &[(&str, fn())] = &[
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("relu", relu),
    ("exp", exp),
    ("log", log),
    ("row_softmax", row_softmax),
    ("row_log_softmax", row_log_softmax),
    ("transpose", transpose),
    ("sum", sum),
    ("mean", mean),
    ("matmul", matmul),
    ("add_sub_mul_same_shape", add_sub_mul_same_shape),
    ("add_row_broadcast", add_row_broadcast),
    ("row_l2_normalize", row_l2_normalize),
    ("concat_slice_reshape", concat_slice_reshape),
    ("conv2d", conv2d),
    ("pooling", pooling),
    ("embedding", embedding),
    ("lstm_cell", lstm_cell),
    ("gru_step", gru_step),
    ("attention", attention),
    ("teacher_forced_loss", teacher_forced_loss),
    ("cosine_similarity", cosine_similarity),
    ("gcn_forward", gcn_forward),
    ("gcn_decoder_logits", gcn_decoder_logits),
    ("ctc_loss_on_log_softmax", ctc_loss_on_log_softmax),
    ("ctc_loss_raw_potentials", ctc_loss_raw_potentials),
    ("encoder_stack", encoder_stack),
];
