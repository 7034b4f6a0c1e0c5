//! GCN+CTC decoder head.
//!
//! Slices `h_i` of the feature sequence are projected linearly to `c_i`;
//! their pairwise cosine similarities `A_S` are gated point-wise by the
//! distance prior `A_D(i,j) = logistic(beta - |i-j|)`, and the product mixes
//! the slices: `X = (A_S ⊙ A_D) H W_g`. A BiLSTM reads `X` and a linear
//! classifier produces per-frame logits over blank + symbols.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::{logistic, Scalar};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Guard below which a projected slice counts as zero in the cosine.
pub const COSINE_EPS: f64 = 1e-12;

/// Encoder output: `T` rows of width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    features: Tensor<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(features: Tensor<S>) -> Result<Self> {
        if features.dims2().is_none() {
            return Err(Error::shape("feature_sequence", format!("{:?} is not T x C", features.shape())));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite { op: "feature_sequence".into() });
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.features
    }
}

/// `T x T` distance prior with entries `logistic(beta - |i - j|)`.
pub fn distance_matrix<S: Scalar>(frames: usize, beta: f64) -> Tensor<S> {
    let mut out = Tensor::zeros(&[frames, frames]);
    let data = out.data_mut();
    for i in 0..frames {
        for j in 0..frames {
            let d = i.abs_diff(j) as f64;
            data[i * frames + j] = S::lit(logistic(beta - d));
        }
    }
    out
}

/// Pairwise cosine similarity of the rows of `c` (`T x D` -> `T x T`).
pub fn similarity_matrix<S: Scalar>(tape: &mut Tape<S>, c: Var) -> Result<Var> {
    let unit = tape.row_l2_normalize(c, S::lit(COSINE_EPS))?;
    let unit_t = tape.transpose2d(unit)?;
    tape.matmul(unit, unit_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnConfig {
    /// Width `C` of the incoming feature slices.
    pub input_width: usize,
    /// Width `D` of the similarity projection.
    pub projection_dim: usize,
    pub beta: f64,
    /// When false the head is BiLSTM + classifier only (plain CTC baseline).
    pub use_gcn: bool,
    /// Learned `W_g` after the graph mix; identity-initialized.
    pub use_mix_weight: bool,
    pub hidden: usize,
    /// Classifier width: symbols plus blank.
    pub num_classes: usize,
}

impl GcnConfig {
    pub fn new(input_width: usize, num_classes: usize) -> Self {
        Self {
            input_width,
            projection_dim: input_width,
            beta: 2.0,
            use_gcn: true,
            use_mix_weight: true,
            hidden: 64,
            num_classes,
        }
    }
}

/// Parameters of one LSTM direction; gates are laid out `[i | f | g | o]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, input: usize, hidden: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w_ih: store.add_uniform(format!("{prefix}.w_ih"), &[input, 4 * hidden], hidden, rng),
            w_hh: store.add_uniform(format!("{prefix}.w_hh"), &[hidden, 4 * hidden], hidden, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), &[4 * hidden], hidden, rng),
            hidden,
        }
    }

    /// Runs the cell over the rows of `x` (`T x in`), returning one `1 x H`
    /// state per input row, in input order.
    pub fn run<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let hsz = self.hidden;
        let frames = tape.shape(x)[0];
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let bias = tape.param(store, self.bias);
        let xw = tape.matmul(x, w_ih)?;
        let pre_all = tape.add(xw, bias)?;
        let mut states = vec![None; frames];
        let mut hc: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..frames).rev())
        } else {
            Box::new(0..frames)
        };
        for t in order {
            let mut pre = tape.slice(pre_all, 0, t, t + 1)?;
            if let Some((h, _)) = hc {
                let rec = tape.matmul(h, w_hh)?;
                pre = tape.add(pre, rec)?;
            }
            let i_pre = tape.slice(pre, 1, 0, hsz)?;
            let f_pre = tape.slice(pre, 1, hsz, 2 * hsz)?;
            let g_pre = tape.slice(pre, 1, 2 * hsz, 3 * hsz)?;
            let o_pre = tape.slice(pre, 1, 3 * hsz, 4 * hsz)?;
            let i = tape.sigmoid(i_pre)?;
            let g = tape.tanh(g_pre)?;
            let o = tape.sigmoid(o_pre)?;
            let ig = tape.mul(i, g)?;
            let c = match hc {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(f_pre)?;
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let c_act = tape.tanh(c)?;
            let h = tape.mul(o, c_act)?;
            states[t] = Some(h);
            hc = Some((h, c));
        }
        Ok(states.into_iter().map(|s| s.expect("every frame visited")).collect())
    }
}

/// Parameter handles of the GCN+CTC head.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnDecoder {
    pub config: GcnConfig,
    pub projection: Option<ParamId>,
    pub mix_weight: Option<ParamId>,
    pub lstm_fwd: LstmCell,
    pub lstm_bwd: LstmCell,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

impl GcnDecoder {
    /// Registers parameters under `decoder.*`.
    pub fn new<S: Scalar>(config: GcnConfig, store: &mut ParamStore<S>, rng: &mut SplitMix64) -> Self {
        let c = config.input_width;
        let (projection, mix_weight) = if config.use_gcn {
            let p = store.add_uniform("decoder.projection", &[c, config.projection_dim], c, rng);
            let m = config
                .use_mix_weight
                .then(|| store.add_uniform("decoder.mix_weight", &[c, c], c, rng));
            (Some(p), m)
        } else {
            (None, None)
        };
        let h = config.hidden;
        let lstm_fwd = LstmCell::new(store, "decoder.lstm_fwd", c, h, rng);
        let lstm_bwd = LstmCell::new(store, "decoder.lstm_bwd", c, h, rng);
        let classifier_w = store.add_uniform("decoder.classifier.weight", &[2 * h, config.num_classes], 2 * h, rng);
        let classifier_b = store.add_uniform("decoder.classifier.bias", &[config.num_classes], 2 * h, rng);
        Self {
            config,
            projection,
            mix_weight,
            lstm_fwd,
            lstm_bwd,
            classifier_w,
            classifier_b,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.projection.into_iter().chain(self.mix_weight).collect();
        for cell in [self.lstm_fwd, self.lstm_bwd] {
            ids.extend([cell.w_ih, cell.w_hh, cell.bias]);
        }
        ids.extend([self.classifier_w, self.classifier_b]);
        ids
    }

    fn check_input<S: Scalar>(&self, tape: &Tape<S>, h: Var) -> Result<()> {
        match *tape.shape(h) {
            [_, c] if c == self.config.input_width => Ok(()),
            ref s => Err(Error::shape(
                "gcn_decoder",
                format!("features {s:?}, expected width {}", self.config.input_width),
            )),
        }
    }

    /// `c_i = h_i W_p` for every slice.
    pub fn project_slices<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        self.check_input(tape, h)?;
        let id = self
            .projection
            .ok_or_else(|| Error::Unsupported("decoder has no GCN layer".into()))?;
        let w = tape.param(store, id);
        tape.matmul(h, w)
    }

    /// Graph mix `X = (A_S ⊙ A_D) H W_g`.
    pub fn gcn_forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let c = self.project_slices(tape, store, h)?;
        let a_s = similarity_matrix(tape, c)?;
        let frames = tape.shape(h)[0];
        let a_d = tape.constant(distance_matrix(frames, self.config.beta));
        let adj = tape.mul(a_s, a_d)?;
        let mixed = tape.matmul(adj, h)?;
        match self.mix_weight {
            Some(id) => {
                let w = tape.param(store, id);
                tape.matmul(mixed, w)
            }
            None => Ok(mixed),
        }
    }

    /// BiLSTM states `[T, 2H]` with the given cells for each direction.
    pub fn bilstm_states_with<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        fwd: &LstmCell,
        bwd: &LstmCell,
    ) -> Result<Var> {
        let hf = fwd.run(tape, store, x, false)?;
        let hb = bwd.run(tape, store, x, true)?;
        let hf = tape.concat(&hf, 0)?;
        let hb = tape.concat(&hb, 0)?;
        tape.concat(&[hf, hb], 1)
    }

    /// `Seq(X) W_c + b_c`: per-frame logits `[T, K]`.
    pub fn bilstm_classify<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let states = self.bilstm_states_with(tape, store, x, &self.lstm_fwd, &self.lstm_bwd)?;
        let w = tape.param(store, self.classifier_w);
        let b = tape.param(store, self.classifier_b);
        let z = tape.matmul(states, w)?;
        tape.add(z, b)
    }

    /// Full head: optional graph mix, BiLSTM, classifier.
    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        self.check_input(tape, h)?;
        let x = if self.config.use_gcn {
            self.gcn_forward(tape, store, h)?
        } else {
            h
        };
        self.bilstm_classify(tape, store, x)
    }

    pub fn log_probs<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let z = self.logits(tape, store, h)?;
        tape.row_log_softmax(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn logistic64(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn distance_matrix_values() {
        let a = distance_matrix::<f64>(5, 2.0);
        assert!((a.at2(0, 2) - 0.5).abs() < 1e-12);
        assert!((a.at2(1, 2) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((a.at2(3, 3) - logistic64(2.0)).abs() < 1e-12);
        let zero_beta = distance_matrix::<f64>(1, 0.0);
        assert_eq!(zero_beta.at2(0, 0), 0.5);
    }

    #[test]
    fn similarity_special_cases() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64(&[4, 2], &[1.0, 2.0, 1.0, 2.0, -1.0, -2.0, 2.0, -1.0]).unwrap());
        let s = similarity_matrix(&mut tape, c).unwrap();
        let s = tape.value(s);
        assert!((s.at2(0, 1) - 1.0).abs() < 1e-15);
        assert!((s.at2(0, 2) + 1.0).abs() < 1e-15);
        assert!(s.at2(0, 3).abs() < 1e-15);
    }

    #[test]
    fn zero_row_has_zero_similarity() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 3.0, 4.0]).unwrap());
        let s = similarity_matrix(&mut tape, c).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_projection_echoes_features_and_zero_input_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(1);
        let dec = GcnDecoder::new(GcnConfig::new(3, 4), &mut store, &mut rng);
        store.load_value("decoder.projection", Tensor::eye(3)).unwrap();
        let mut tape = Tape::new();
        let hv = Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let h = tape.constant(hv.clone());
        let c = dec.project_slices(&mut tape, &store, h).unwrap();
        assert_eq!(tape.value(c), &hv);
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let c0 = dec.project_slices(&mut tape, &store, z).unwrap();
        assert!(tape.value(c0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_frame_mix_scales_by_logistic_beta() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(2);
        let dec = GcnDecoder::new(GcnConfig::new(3, 4), &mut store, &mut rng);
        store.load_value("decoder.mix_weight", Tensor::eye(3)).unwrap();
        let mut tape = Tape::new();
        let hv = Tensor::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap();
        let h = tape.constant(hv.clone());
        let x = dec.gcn_forward(&mut tape, &store, h).unwrap();
        let k = logistic64(2.0);
        for (a, b) in tape.value(x).data().iter().zip(hv.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(2);
        let dec = GcnDecoder::new(GcnConfig::new(3, 4), &mut store, &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(dec.logits(&mut tape, &store, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(3);
        let mut cfg = GcnConfig::new(2, 3);
        cfg.hidden = 4;
        let dec = GcnDecoder::new(cfg, &mut store, &mut rng);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let z = dec.logits(&mut tape, &store, h).unwrap();
        assert!(tape.value(z).data().iter().all(|&x| x == 0.0));
    }
}
