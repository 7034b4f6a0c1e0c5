//! Convolutional feature extractor: grayscale strip -> feature sequence.
//!
//! Every layer keeps the `[C, H, W]` layout; a final height average collapses
//! the map to one row, whose columns become the sequence slices `h_i`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{pooled_len, Pad2d, ParamId, ParamStore, Tape, Tensor, Var};

/// Grayscale image with 8-bit pixels, row-major; value `p` reads as `p / 255`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{height}x{width} with {} pixels", pixels.len()),
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// `[1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let scale = S::lit(1.0 / 255.0);
        let data = self.pixels.iter().map(|&p| S::lit(p as f64) * scale).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("validated dims")
    }

    /// Nearest-neighbour resize to `height`, keeping the aspect ratio.
    pub fn resize_to_height(&self, height: usize) -> GrayImage {
        if height == self.height {
            return self.clone();
        }
        let width = ((self.width * height) as f64 / self.height as f64).round().max(1.0) as usize;
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = (r * self.height / height).min(self.height - 1);
            for c in 0..width {
                let sc = (c * self.width / width).min(self.width - 1);
                pixels.push(self.get(sr, sc));
            }
        }
        GrayImage { height, width, pixels }
    }
}

/// Padding rule of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Centered `k / 2` on every side.
    Same,
    /// Centered in height; `k - 1` on the left only in width, so column `j`
    /// sees input columns `<= j`.
    Causal,
}

impl Padding {
    fn pad(self, kernel: (usize, usize)) -> Pad2d {
        match self {
            Padding::Valid => Pad2d::default(),
            Padding::Same => Pad2d {
                top: kernel.0 / 2,
                bottom: (kernel.0 - 1) / 2,
                left: kernel.1 / 2,
                right: (kernel.1 - 1) / 2,
            },
            Padding::Causal => Pad2d {
                top: kernel.0 / 2,
                bottom: (kernel.0 - 1) / 2,
                left: kernel.1 - 1,
                right: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Convolution followed by ReLU.
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    /// Two channel-preserving stride-1 convolutions with an identity skip.
    Residual { kernel: (usize, usize), padding: Padding },
    /// Average over the whole remaining height.
    HeightAverage,
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected AxB, got {s:?}"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
            Padding::Causal => "causal",
        })
    }
}

impl FromStr for Padding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            "causal" => Ok(Padding::Causal),
            _ => Err(Error::Config(format!("unknown padding {s:?}"))),
        }
    }
}

/// Text form: `conv:C:KHxKW:SHxSW:pad`, `maxpool:KHxKW:SHxSW`,
/// `avgpool:KHxKW:SHxSW`, `res:KHxKW:pad`, `havg`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => write!(
                f,
                "conv:{out_channels}:{}x{}:{}x{}:{padding}",
                kernel.0, kernel.1, stride.0, stride.1
            ),
            LayerSpec::MaxPool { kernel, stride } => {
                write!(f, "maxpool:{}x{}:{}x{}", kernel.0, kernel.1, stride.0, stride.1)
            }
            LayerSpec::AvgPool { kernel, stride } => {
                write!(f, "avgpool:{}x{}:{}x{}", kernel.0, kernel.1, stride.0, stride.1)
            }
            LayerSpec::Residual { kernel, padding } => write!(f, "res:{}x{}:{padding}", kernel.0, kernel.1),
            LayerSpec::HeightAverage => f.write_str("havg"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("malformed layer spec {s:?}"));
        match parts[..] {
            ["conv", c, k, st, pad] => Ok(LayerSpec::Conv {
                out_channels: c.parse().map_err(|_| bad())?,
                kernel: parse_pair(k)?,
                stride: parse_pair(st)?,
                padding: pad.parse()?,
            }),
            ["maxpool", k, st] => Ok(LayerSpec::MaxPool {
                kernel: parse_pair(k)?,
                stride: parse_pair(st)?,
            }),
            ["avgpool", k, st] => Ok(LayerSpec::AvgPool {
                kernel: parse_pair(k)?,
                stride: parse_pair(st)?,
            }),
            ["res", k, pad] => Ok(LayerSpec::Residual {
                kernel: parse_pair(k)?,
                padding: pad.parse()?,
            }),
            ["havg"] => Ok(LayerSpec::HeightAverage),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub layers: Vec<LayerSpec>,
}

fn conv3(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: (3, 3),
        stride: (1, 1),
        padding: Padding::Causal,
    }
}

impl Default for EncoderConfig {
    /// Four 3x3 blocks (8, 16, 32, 64 channels), two 2x2 and two 2x1 pools,
    /// then a height average: height 32 -> 1, width down-sampled by 4.
    fn default() -> Self {
        let pool = |kh, kw| LayerSpec::MaxPool {
            kernel: (kh, kw),
            stride: (kh, kw),
        };
        Self {
            height: 32,
            min_width: 8,
            max_width: 128,
            layers: vec![
                conv3(8),
                pool(2, 2),
                conv3(16),
                pool(2, 2),
                conv3(32),
                pool(2, 1),
                conv3(64),
                pool(2, 1),
                LayerSpec::HeightAverage,
            ],
        }
    }
}

impl EncoderConfig {
    /// Down-sampling W 1/4, H 1/16 before a 4x1 average pool, with
    /// a strided 7x7 stem and optional residual blocks, at a 64-pixel height.
    pub fn wide_stem(channels: usize, residual_blocks: bool) -> Self {
        let mut layers = vec![
            LayerSpec::Conv {
                out_channels: channels,
                kernel: (7, 7),
                stride: (2, 2),
                padding: Padding::Same,
            },
            LayerSpec::MaxPool {
                kernel: (3, 3),
                stride: (2, 2),
            },
        ];
        let res = LayerSpec::Residual {
            kernel: (3, 3),
            padding: Padding::Same,
        };
        if residual_blocks {
            layers.push(res);
        }
        layers.push(LayerSpec::MaxPool {
            kernel: (2, 1),
            stride: (2, 1),
        });
        if residual_blocks {
            layers.push(res);
        }
        layers.push(LayerSpec::MaxPool {
            kernel: (2, 1),
            stride: (2, 1),
        });
        layers.push(LayerSpec::AvgPool {
            kernel: (4, 1),
            stride: (1, 1),
        });
        Self {
            height: 64,
            min_width: 16,
            max_width: 256,
            layers,
        }
    }

    /// Single height-average layer: the feature sequence is the pixel columns.
    pub fn identity(height: usize) -> Self {
        Self {
            height,
            min_width: 1,
            max_width: 1 << 16,
            layers: vec![],
        }
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

/// `[channels, height, width]` of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn conv_out(n: usize, k: usize, s: usize, before: usize, after: usize) -> Option<usize> {
    let padded = n + before + after;
    (padded >= k).then(|| (padded - k) / s + 1)
}

/// Static shape trace: the input shape followed by the shape after each layer.
pub fn shape_plan(config: &EncoderConfig, width: usize) -> Result<Vec<MapShape>> {
    let mut cur = MapShape {
        channels: 1,
        height: config.height,
        width,
    };
    let mut plan = vec![cur];
    let too_small = |i: usize, l: &LayerSpec, s: MapShape| {
        Error::Config(format!(
            "input width {width} too small: layer {i} ({l}) receives {}x{}",
            s.height, s.width
        ))
    };
    for (i, layer) in config.layers.iter().enumerate() {
        cur = match *layer {
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                if stride.0 == 0 || stride.1 == 0 || out_channels == 0 {
                    return Err(Error::Config(format!("layer {i} ({layer}) has a zero dimension")));
                }
                let p = padding.pad(kernel);
                MapShape {
                    channels: out_channels,
                    height: conv_out(cur.height, kernel.0, stride.0, p.top, p.bottom)
                        .ok_or_else(|| too_small(i, layer, cur))?,
                    width: conv_out(cur.width, kernel.1, stride.1, p.left, p.right)
                        .ok_or_else(|| too_small(i, layer, cur))?,
                }
            }
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                if stride.0 == 0 || stride.1 == 0 || kernel.0 == 0 || kernel.1 == 0 {
                    return Err(Error::Config(format!("layer {i} ({layer}) has a zero dimension")));
                }
                MapShape {
                    channels: cur.channels,
                    height: pooled_len(cur.height, kernel.0, stride.0),
                    width: pooled_len(cur.width, kernel.1, stride.1),
                }
            }
            LayerSpec::Residual { kernel, padding } => {
                let p = padding.pad(kernel);
                if p.top + p.bottom + 1 != kernel.0 || p.left + p.right + 1 != kernel.1 {
                    return Err(Error::Config(format!(
                        "layer {i} ({layer}) must preserve spatial size"
                    )));
                }
                cur
            }
            LayerSpec::HeightAverage => MapShape { height: 1, ..cur },
        };
        plan.push(cur);
    }
    if cur.height != 1 {
        return Err(Error::Config(format!(
            "encoder leaves height {} (must reduce to 1)",
            cur.height
        )));
    }
    Ok(plan)
}

/// Stage between the raw image and the encoder; identity unless a
/// rectification network is plugged in.
pub trait Rectifier<S: Scalar> {
    fn rectify(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityRectifier;

impl<S: Scalar> Rectifier<S> for IdentityRectifier {
    fn rectify(&self, _: &mut Tape<S>, _: &ParamStore<S>, image: Var) -> Result<Var> {
        Ok(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerParams {
    Conv { weight: ParamId, bias: ParamId },
    Residual { a: (ParamId, ParamId), b: (ParamId, ParamId) },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<LayerParams>,
    out_channels: usize,
}

impl Encoder {
    /// Registers parameters under `encoder.*`.
    pub fn new<S: Scalar>(config: EncoderConfig, store: &mut ParamStore<S>, rng: &mut SplitMix64) -> Result<Self> {
        let plan = shape_plan(&config, config.max_width)?;
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut conv = |store: &mut ParamStore<S>, name: String, cin: usize, cout: usize, k: (usize, usize)| {
            // He-uniform keeps the activation scale through ReLU layers.
            let bound = (6.0 / (cin * k.0 * k.1) as f64).sqrt();
            let w = store.add_uniform_bound(format!("{name}.weight"), &[cout, cin, k.0, k.1], bound, rng);
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
            (w, b)
        };
        for (i, layer) in config.layers.iter().enumerate() {
            let cin = plan[i].channels;
            layers.push(match *layer {
                LayerSpec::Conv { out_channels, kernel, .. } => {
                    let (weight, bias) = conv(store, format!("encoder.conv{i}"), cin, out_channels, kernel);
                    LayerParams::Conv { weight, bias }
                }
                LayerSpec::Residual { kernel, .. } => LayerParams::Residual {
                    a: conv(store, format!("encoder.res{i}.a"), cin, cin, kernel),
                    b: conv(store, format!("encoder.res{i}.b"), cin, cin, kernel),
                },
                _ => LayerParams::None,
            });
        }
        let out_channels = plan.last().map_or(1, |s| s.channels);
        Ok(Self {
            config,
            layers,
            out_channels,
        })
    }

    /// Width `C` of each feature slice.
    pub fn feature_width(&self) -> usize {
        self.out_channels
    }

    /// Sequence length `T` for an input of `width` pixels.
    pub fn frames(&self, width: usize) -> Result<usize> {
        Ok(shape_plan(&self.config, width)?.last().expect("non-empty plan").width)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match *l {
                LayerParams::Conv { weight, bias } => ids.extend([weight, bias]),
                LayerParams::Residual { a, b } => ids.extend([a.0, a.1, b.0, b.1]),
                LayerParams::None => {}
            }
        }
        ids
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        if image.height != self.config.height {
            return Err(Error::shape(
                "encode",
                format!("image height {} != configured {}", image.height, self.config.height),
            ));
        }
        if image.width < self.config.min_width || image.width > self.config.max_width {
            return Err(Error::shape(
                "encode",
                format!(
                    "image width {} outside [{}, {}]",
                    image.width, self.config.min_width, self.config.max_width
                ),
            ));
        }
        Ok(())
    }

    /// Image -> `[T, C]` feature sequence on the tape.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: &GrayImage) -> Result<Var> {
        self.check_image(image)?;
        let x = tape.constant(image.to_tensor());
        self.encode_tensor(tape, store, x)
    }

    /// Runs the layers on a `[1, H, W]` node (e.g. a rectifier's output).
    pub fn encode_tensor<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, mut x: Var) -> Result<Var> {
        for (spec, params) in self.config.layers.iter().zip(&self.layers) {
            x = match (*spec, params) {
                (LayerSpec::Conv { stride, padding, kernel, .. }, &LayerParams::Conv { weight, bias }) => {
                    let w = tape.param(store, weight);
                    let b = tape.param(store, bias);
                    let y = tape.conv2d(x, w, b, stride, padding.pad(kernel))?;
                    tape.relu(y)?
                }
                (LayerSpec::MaxPool { kernel, stride }, _) => tape.max_pool2d(x, kernel, stride)?,
                (LayerSpec::AvgPool { kernel, stride }, _) => tape.avg_pool2d(x, kernel, stride)?,
                (LayerSpec::Residual { kernel, padding }, &LayerParams::Residual { a, b }) => {
                    let pad = padding.pad(kernel);
                    let (wa, ba) = (tape.param(store, a.0), tape.param(store, a.1));
                    let y = tape.conv2d(x, wa, ba, (1, 1), pad)?;
                    let y = tape.relu(y)?;
                    let (wb, bb) = (tape.param(store, b.0), tape.param(store, b.1));
                    let y = tape.conv2d(y, wb, bb, (1, 1), pad)?;
                    let y = tape.add(y, x)?;
                    tape.relu(y)?
                }
                (LayerSpec::HeightAverage, _) => {
                    let h = tape.shape(x)[1];
                    tape.avg_pool2d(x, (h, 1), (h, 1))?
                }
                _ => unreachable!("layer params follow specs"),
            };
        }
        let [c, h, w] = *tape.shape(x) else {
            return Err(Error::shape("encode", format!("{:?}", tape.shape(x))));
        };
        if h != 1 {
            return Err(Error::shape("encode", format!("final height {h}")));
        }
        let flat = tape.reshape(x, &[c, w])?;
        tape.transpose2d(flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_plan_frames() {
        let cfg = EncoderConfig::default();
        assert_eq!(shape_plan(&cfg, 64).unwrap().last().unwrap().width, 16);
        assert_eq!(shape_plan(&cfg, 128).unwrap().last().unwrap().width, 32);
        let last = *shape_plan(&cfg, 64).unwrap().last().unwrap();
        assert_eq!((last.channels, last.height), (64, 1));
    }

    #[test]
    fn wide_stem_plan_matches_quarter_and_sixteenth() {
        let cfg = EncoderConfig::wide_stem(8, true);
        let plan = shape_plan(&cfg, 256).unwrap();
        // After the two 2x1 pools: H 64/16 = 4, W 256/4 = 64.
        let before_avg = plan[plan.len() - 2];
        assert_eq!((before_avg.height, before_avg.width), (4, 64));
        let last = plan.last().unwrap();
        assert_eq!((last.height, last.width), (1, 64));
    }

    #[test]
    fn identity_config_echoes_input() {
        let cfg = EncoderConfig::identity(1);
        let plan = shape_plan(&cfg, 37).unwrap();
        assert_eq!(plan, vec![MapShape { channels: 1, height: 1, width: 37 }]);
    }

    #[test]
    fn odd_width_uses_ceil_rule() {
        let cfg = EncoderConfig {
            height: 3,
            min_width: 1,
            max_width: 100,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: (3, 3),
                    stride: (1, 2),
                    padding: Padding::Same,
                },
                LayerSpec::HeightAverage,
            ],
        };
        assert_eq!(shape_plan(&cfg, 7).unwrap().last().unwrap().width, 4);
        let mut pooled = EncoderConfig::default();
        pooled.height = 32;
        assert_eq!(shape_plan(&pooled, 13).unwrap().last().unwrap().width, 4);
    }

    #[test]
    fn inconsistent_height_is_rejected() {
        let mut cfg = EncoderConfig::default();
        cfg.layers.pop();
        assert!(matches!(shape_plan(&cfg, 64), Err(Error::Config(_))));
    }

    #[test]
    fn too_small_for_valid_conv() {
        let cfg = EncoderConfig {
            height: 5,
            min_width: 1,
            max_width: 10,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 1,
                    kernel: (5, 5),
                    stride: (1, 1),
                    padding: Padding::Valid,
                },
            ],
        };
        assert!(shape_plan(&cfg, 3).is_err());
    }

    #[test]
    fn layer_spec_text_round_trip() {
        let cfg = EncoderConfig::wide_stem(4, true);
        let parsed = EncoderConfig::parse_layers(&cfg.layers_string()).unwrap();
        assert_eq!(parsed, cfg.layers);
    }

    #[test]
    fn zero_image_and_zero_bias_give_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(4);
        let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng).unwrap();
        for (id, _) in store.clone().iter() {
            if store.get(id).name.ends_with(".bias") {
                store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new();
        let h = enc.encode(&mut tape, &store, &GrayImage::blank(32, 40)).unwrap();
        assert_eq!(tape.shape(h), &[10, 64]);
        assert!(tape.value(h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_height_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::seed_from_u64(4);
        let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &store, &GrayImage::blank(31, 40)).is_err());
    }
}
