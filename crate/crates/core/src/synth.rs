//! Deterministic synthetic fixtures: small 10-class image datasets and
//! CNNs whose dense tail is trained on frozen random convolution features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{LabeledDataset, LayerInput, LayerKind, LayerSpec, ModelGraph, Split};
use crate::inference::forward;
use crate::tensor::{ConvParams, Padding, PoolMode, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub name: String,
    pub seed: u64,
    pub classes: usize,
    pub image_shape: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl DataSpec {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        DataSpec {
            name: name.into(),
            seed,
            classes: 10,
            image_shape: [12, 12, 3],
            train_per_class: 600,
            test_per_class: 100,
            noise: 0.3,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
    radius: f64,
    color: Vec<f64>,
}

fn class_templates(spec: &DataSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Blob>> {
    let [h, w, c] = spec.image_shape;
    (0..spec.classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    y: rng.random_range(0.0..h as f64),
                    x: rng.random_range(0.0..w as f64),
                    radius: rng.random_range(1.5..3.0),
                    color: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                })
                .collect()
        })
        .collect()
}

fn render(blobs: &[Blob], shape: [usize; 3], dy: f64, dx: f64, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w, c] = shape;
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = 0.5;
                for b in blobs {
                    let d2 = (y as f64 - b.y - dy).powi(2) + (x as f64 - b.x - dx).powi(2);
                    v += b.color[ch] * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                data.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    data
}

/// Train and test splits. Examples are interleaved by class; every image is
/// a jittered class template plus noise, clamped to `[0, 1]`.
pub fn make_datasets(spec: &DataSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidArgument("fixtures need two classes and examples in both splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = class_templates(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut split = |per_class: usize, split: Split| {
        let mut images = Vec::with_capacity(per_class * spec.classes);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (class, blobs) in templates.iter().enumerate() {
                let (dy, dx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let data = render(blobs, spec.image_shape, dy, dx, &noise, &mut rng);
                images.push(Tensor::new(spec.image_shape.to_vec(), data)?);
                labels.push(class);
            }
        }
        LabeledDataset::new(spec.name.clone(), split, spec.classes, spec.image_shape, images, labels)
    };
    let train = split(spec.train_per_class, Split::Train)?;
    let test = split(spec.test_per_class, Split::Test)?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// conv → relu → pool → conv → relu → pool → dense → relu → dense.
    PlainCnn,
    /// conv → relu → one residual block → relu → pool → dense → relu → dense.
    TinyResNet,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::PlainCnn => "plain-cnn",
            Arch::TinyResNet => "tiny-resnet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-cnn" => Ok(Arch::PlainCnn),
            "tiny-resnet" => Ok(Arch::TinyResNet),
            other => Err(Error::Parse(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub arch: Arch,
    pub seed: u64,
    pub channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl TrainSpec {
    pub fn new(arch: Arch, seed: u64) -> Self {
        TrainSpec { arch, seed, channels: 8, hidden: 32, epochs: 20, batch: 32, learning_rate: 0.003 }
    }

    pub fn hyperparameters(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("hidden", self.hidden.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
        ]
    }
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn conv(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<LayerKind> {
    let kernel = he_tensor(&[3, 3, cin, cout], 9 * cin, rng)?;
    let bias = Tensor::from_fn(&[cout], |_| rng.random_range(-0.1..0.1))?;
    Ok(LayerKind::Conv2D(ConvParams::new(kernel, bias, 1, Padding::With)?))
}

fn dense(weights: Tensor, bias: Tensor) -> LayerKind {
    LayerKind::Dense { weights, bias }
}

/// Convolution stack up to and including flatten, with random weights.
fn feature_layers(arch: Arch, shape: [usize; 3], channels: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LayerSpec>> {
    use LayerInput::{Layer, Model};
    let cin = shape[2];
    let pool = || LayerKind::Pool { size: 2, mode: PoolMode::Max };
    Ok(match arch {
        Arch::PlainCnn => vec![
            LayerSpec::after(conv(cin, channels, rng)?, Model),
            LayerSpec::after(LayerKind::ReLU, Layer(0)),
            LayerSpec::after(pool(), Layer(1)),
            LayerSpec::after(conv(channels, channels, rng)?, Layer(2)),
            LayerSpec::after(LayerKind::ReLU, Layer(3)),
            LayerSpec::after(pool(), Layer(4)),
            LayerSpec::after(LayerKind::Flatten, Layer(5)),
        ],
        Arch::TinyResNet => vec![
            LayerSpec::after(conv(cin, channels, rng)?, Model),
            LayerSpec::after(LayerKind::ReLU, Layer(0)),
            LayerSpec::after(conv(channels, channels, rng)?, Layer(1)),
            LayerSpec::after(LayerKind::ReLU, Layer(2)),
            LayerSpec::after(conv(channels, channels, rng)?, Layer(3)),
            LayerSpec::new(LayerKind::Add, vec![Layer(4), Layer(1)]),
            LayerSpec::after(LayerKind::ReLU, Layer(5)),
            LayerSpec::after(pool(), Layer(6)),
            LayerSpec::after(LayerKind::Flatten, Layer(7)),
        ],
    })
}

fn assemble(
    name: &str,
    shape: [usize; 3],
    mut layers: Vec<LayerSpec>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
) -> Result<ModelGraph> {
    use LayerInput::Layer;
    let flatten = layers.len() - 1;
    layers.push(LayerSpec::after(dense(w1, b1), Layer(flatten)));
    layers.push(LayerSpec::after(LayerKind::ReLU, Layer(flatten + 1)));
    layers.push(LayerSpec::after(dense(w2, b2), Layer(flatten + 2)));
    layers.push(LayerSpec::after(LayerKind::Softmax, Layer(flatten + 3)));
    ModelGraph::new(name, shape, layers)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Builds a model with random convolutions and a dense tail trained by
/// minibatch Adam on softmax cross-entropy over the frozen flatten features.
pub fn train_model(name: &str, train: &LabeledDataset, spec: &TrainSpec) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = train.image_shape();
    let n_classes = train.class_count();
    let features_only = feature_layers(spec.arch, shape, spec.channels, &mut rng)?;
    let probe = assemble(
        name,
        shape,
        features_only.clone(),
        Tensor::zeros(&[feature_len(spec.arch, shape, spec.channels), spec.hidden])?,
        Tensor::zeros(&[spec.hidden])?,
        Tensor::zeros(&[spec.hidden, n_classes])?,
        Tensor::zeros(&[n_classes])?,
    )?;
    let flatten = probe.dense_chain().flatten;
    let features: Vec<Vec<f64>> = train
        .images()
        .iter()
        .map(|x| Ok(forward(&probe, x)?.trace.layer(flatten).data().to_vec()))
        .collect::<Result<_>>()?;
    let n_in = features[0].len();
    let (h, k) = (spec.hidden, n_classes);
    let mut w1 = he_tensor(&[n_in, h], n_in, &mut rng)?.into_data();
    let mut b1 = vec![0.0; h];
    let mut w2 = he_tensor(&[h, k], h, &mut rng)?.into_data();
    let mut b2 = vec![0.0; k];
    let mut opt = [Adam::new(w1.len()), Adam::new(h), Adam::new(w2.len()), Adam::new(k)];
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut hidden = vec![0.0; h];
    let mut logits = vec![0.0; k];
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch.max(1)) {
            let mut g = [vec![0.0; w1.len()], vec![0.0; h], vec![0.0; w2.len()], vec![0.0; k]];
            for &i in batch {
                let f = &features[i];
                for j in 0..h {
                    hidden[j] = (b1[j] + (0..n_in).map(|a| f[a] * w1[a * h + j]).sum::<f64>()).max(0.0);
                }
                for c in 0..k {
                    logits[c] = b2[c] + (0..h).map(|j| hidden[j] * w2[j * k + c]).sum::<f64>();
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                let dz: Vec<f64> = (0..k)
                    .map(|c| (logits[c] - max).exp() / z - if c == train.labels()[i] { 1.0 } else { 0.0 })
                    .collect();
                for j in 0..h {
                    let mut dh = 0.0;
                    for c in 0..k {
                        g[2][j * k + c] += hidden[j] * dz[c];
                        dh += w2[j * k + c] * dz[c];
                    }
                    if hidden[j] > 0.0 {
                        g[1][j] += dh;
                        for a in 0..n_in {
                            g[0][a * h + j] += f[a] * dh;
                        }
                    }
                }
                for c in 0..k {
                    g[3][c] += dz[c];
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (params, (grad, o)) in
                [&mut w1, &mut b1, &mut w2, &mut b2].into_iter().zip(g.iter_mut().zip(opt.iter_mut()))
            {
                grad.iter_mut().for_each(|v| *v *= scale);
                o.step(params, grad, spec.learning_rate);
            }
        }
    }
    assemble(
        name,
        shape,
        features_only,
        Tensor::new(vec![n_in, h], w1)?,
        Tensor::vector(b1)?,
        Tensor::new(vec![h, k], w2)?,
        Tensor::vector(b2)?,
    )
}

fn feature_len(arch: Arch, shape: [usize; 3], channels: usize) -> usize {
    let pooled = match arch {
        Arch::PlainCnn => 4,
        Arch::TinyResNet => 2,
    };
    (shape[0] / pooled) * (shape[1] / pooled) * channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::model_accuracy;

    fn small() -> DataSpec {
        DataSpec { train_per_class: 40, test_per_class: 10, ..DataSpec::new("tiny", 3) }
    }

    #[test]
    fn datasets_are_deterministic_and_interleaved() {
        let (a, t) = make_datasets(&small()).unwrap();
        let (b, _) = make_datasets(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        assert_eq!(t.len(), 100);
        assert_eq!(&a.labels()[..3], &[0, 1, 2]);
        assert!(a.images().iter().all(|x| x.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn both_architectures_train_above_chance() {
        let (train, test) = make_datasets(&small()).unwrap();
        for arch in [Arch::PlainCnn, Arch::TinyResNet] {
            let spec = TrainSpec { epochs: 5, ..TrainSpec::new(arch, 1) };
            let m = train_model("m", &train, &spec).unwrap();
            assert_eq!(m, train_model("m", &train, &spec).unwrap());
            let (top1, _) = model_accuracy(&m, &test).unwrap();
            assert!(top1 > 0.3, "{arch:?} reached only {top1}");
        }
    }
}
