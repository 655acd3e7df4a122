//! Independent reference implementations and shared fixtures.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use concern::graph::{LabeledDataset, LayerKind, ModelGraph};
use concern::inference::forward;
use concern::synth::{make_datasets, train_model, Arch, DataSpec, TrainSpec};
use concern::tensor::Tensor;

/// Small deterministic generator so oracles do not share RNG code with the
/// library.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn unit(&mut self) -> f64 {
        self.next_u64() as f64 / (1u64 << 53) as f64
    }

    pub fn signed(&mut self) -> f64 {
        self.unit() * 2.0 - 1.0
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn values(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.signed()).collect()
    }
}

/// Output extent and leading pad for one axis.
pub fn axis(extent: usize, kernel: usize, stride: usize, same: bool) -> Option<(usize, usize)> {
    if same {
        let out = extent.div_ceil(stride);
        let needed = (out - 1) * stride + kernel;
        let total = needed.saturating_sub(extent);
        Some((out, total / 2))
    } else if kernel <= extent {
        Some(((extent - kernel) / stride + 1, 0))
    } else {
        None
    }
}

pub struct ConvCase {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub same: bool,
}

/// Every configuration of the exhaustive sweep.
pub fn conv_cases() -> Vec<ConvCase> {
    let mut cases = Vec::new();
    for h in 1..=6 {
        for w in 1..=6 {
            for kh in 1..=3 {
                for kw in 1..=3 {
                    for cin in 1..=3 {
                        for cout in 1..=3 {
                            for stride in [1, 2] {
                                for same in [true, false] {
                                    cases.push(ConvCase { h, w, cin, kh, kw, cout, stride, same });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cases
}

/// Direct six-loop convolution; `None` when the kernel does not fit.
pub fn naive_conv(c: &ConvCase, x: &[f64], k: &[f64], bias: &[f64]) -> Option<Vec<f64>> {
    let (oh, top) = axis(c.h, c.kh, c.stride, c.same)?;
    let (ow, left) = axis(c.w, c.kw, c.stride, c.same)?;
    let mut out = vec![0.0; oh * ow * c.cout];
    for r in 0..oh {
        for q in 0..ow {
            for o in 0..c.cout {
                let mut acc = 0.0;
                for i in 0..c.kh {
                    for j in 0..c.kw {
                        let y = (r * c.stride + i) as isize - top as isize;
                        let xx = (q * c.stride + j) as isize - left as isize;
                        if y < 0 || xx < 0 || y >= c.h as isize || xx >= c.w as isize {
                            continue;
                        }
                        for ch in 0..c.cin {
                            let xv = x[(y as usize * c.w + xx as usize) * c.cin + ch];
                            acc += xv * k[((i * c.kw + j) * c.cin + ch) * c.cout + o];
                        }
                    }
                }
                out[(r * ow + q) * c.cout + o] = acc + bias[o];
            }
        }
    }
    Some(out)
}

pub fn naive_pool(x: &[f64], [h, w, c]: [usize; 3], size: usize, max: bool) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        for q in 0..ow {
            for ch in 0..c {
                let block: Vec<f64> =
                    (0..size * size).map(|t| x[((r * size + t / size) * w + q * size + t % size) * c + ch]).collect();
                out.push(if max {
                    block.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    block.iter().sum::<f64>() / block.len() as f64
                });
            }
        }
    }
    out
}

/// For every 0-based input position, the spatial output cells whose window
/// reads it, found by solving the window equations per cell.
pub fn sinks_by_source(c: &ConvCase) -> Option<Vec<BTreeSet<usize>>> {
    let (oh, top) = axis(c.h, c.kh, c.stride, c.same)?;
    let (ow, left) = axis(c.w, c.kw, c.stride, c.same)?;
    let mut sinks = vec![BTreeSet::new(); c.h * c.w * c.cin];
    for y in 0..c.h {
        for xx in 0..c.w {
            for r in 0..oh {
                for q in 0..ow {
                    let dy = (y + top) as isize - (r * c.stride) as isize;
                    let dx = (xx + left) as isize - (q * c.stride) as isize;
                    if (0..c.kh as isize).contains(&dy) && (0..c.kw as isize).contains(&dx) {
                        for ch in 0..c.cin {
                            sinks[(y * c.w + xx) * c.cin + ch].insert(r * ow + q);
                        }
                    }
                }
            }
        }
    }
    Some(sinks)
}

/// Inputs read by at least one window, all of whose windows are dead on
/// every output channel.
pub fn oracle_propagation(c: &ConvCase, sinks: &[BTreeSet<usize>], dead: &BTreeSet<usize>) -> BTreeSet<usize> {
    let spatial_dead = |s: usize| (0..c.cout).all(|o| dead.contains(&(s * c.cout + o)));
    sinks
        .iter()
        .enumerate()
        .filter(|(_, set)| !set.is_empty() && set.iter().all(|&s| spatial_dead(s)))
        .map(|(i, _)| i)
        .collect()
}

/// Per-layer intersection of `{v <= 0}` over the recorded traces of `inputs`,
/// for convolutions and hidden dense layers.
pub fn brute_force_ci(model: &ModelGraph, inputs: &[&Tensor]) -> BTreeMap<usize, BTreeSet<usize>> {
    let hidden = &model.dense_chain().hidden;
    let observed: Vec<usize> = (0..model.len())
        .filter(|&l| matches!(model.layer(l).kind, LayerKind::Conv2D(_)) || hidden.contains(&l))
        .collect();
    let mut result: BTreeMap<usize, BTreeSet<usize>> =
        observed.iter().map(|&l| (l, (0..model.output_len(l)).collect())).collect();
    for x in inputs {
        let trace = forward(model, x).unwrap().trace;
        for &l in &observed {
            let values = trace.layer(l).data();
            result.get_mut(&l).unwrap().retain(|&j| values[j] <= 0.0);
        }
    }
    result
}

pub struct Fixture {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub model: Arc<ModelGraph>,
}

fn build(name: &str, data_seed: u64, arch: Arch, train_seed: u64) -> Fixture {
    let (train, test) = make_datasets(&DataSpec::new(name, data_seed)).unwrap();
    let model = Arc::new(train_model(name, &train, &TrainSpec::new(arch, train_seed)).unwrap());
    Fixture { train, test, model }
}

/// Plain CNN on the primary 10-class fixture.
pub fn fixture_a() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build("fixture-a", 11, Arch::PlainCnn, 5))
}

/// Residual CNN on the same data as [`fixture_a`].
pub fn fixture_a_resnet() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build("fixture-a", 11, Arch::TinyResNet, 5))
}

/// A second dataset of the same shape with different class templates.
pub fn fixture_b() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build("fixture-b", 23, Arch::PlainCnn, 7))
}

pub fn images_of(ds: &LabeledDataset, class: usize, n: usize) -> Vec<&Tensor> {
    ds.indices_of(class).into_iter().take(n).map(|i| ds.image(i)).collect()
}

/// Small random model: conv → relu → [residual conv → add] → pool →
/// flatten → dense → relu → dense(3) → softmax on `[4, 4, 2]` inputs.
pub fn random_model(seed: u64, residual: bool) -> ModelGraph {
    use concern::graph::{LayerInput::*, LayerSpec};
    use concern::tensor::{ConvParams, Padding, PoolMode};
    let mut rng = Lcg(seed);
    let mut conv = |cin: usize, cout: usize| {
        let kernel = Tensor::new(vec![3, 3, cin, cout], rng.values(9 * cin * cout)).unwrap();
        let bias = Tensor::new(vec![cout], rng.values(cout)).unwrap();
        LayerKind::Conv2D(ConvParams::new(kernel, bias, 1, Padding::With).unwrap())
    };
    let mut layers = vec![LayerSpec::after(conv(2, 3), Model), LayerSpec::after(LayerKind::ReLU, Layer(0))];
    if residual {
        layers.push(LayerSpec::after(conv(3, 3), Layer(1)));
        layers.push(LayerSpec::new(LayerKind::Add, vec![Layer(2), Layer(1)]));
        layers.push(LayerSpec::after(LayerKind::ReLU, Layer(3)));
    }
    let last = layers.len() - 1;
    layers.push(LayerSpec::after(LayerKind::Pool { size: 2, mode: PoolMode::Max }, Layer(last)));
    layers.push(LayerSpec::after(LayerKind::Flatten, Layer(last + 1)));
    let mut dense = |n_in: usize, n_out: usize, scale: f64| LayerKind::Dense {
        weights: Tensor::new(vec![n_in, n_out], rng.values(n_in * n_out).into_iter().map(|v| v * scale).collect())
            .unwrap(),
        bias: Tensor::new(vec![n_out], rng.values(n_out)).unwrap(),
    };
    let flatten = last + 2;
    layers.push(LayerSpec::after(dense(12, 6, 1.5), Layer(flatten)));
    layers.push(LayerSpec::after(LayerKind::ReLU, Layer(flatten + 1)));
    layers.push(LayerSpec::after(dense(6, 3, 1.5), Layer(flatten + 2)));
    layers.push(LayerSpec::after(LayerKind::Softmax, Layer(flatten + 3)));
    ModelGraph::new("random", [4, 4, 2], layers).unwrap()
}

/// Labelled random inputs for [`random_model`], classes round-robin.
pub fn random_dataset(seed: u64, n: usize) -> LabeledDataset {
    use concern::graph::Split;
    let mut rng = Lcg(seed ^ 0x9e37_79b9);
    let images = (0..n).map(|_| Tensor::new(vec![4, 4, 2], rng.values(32)).unwrap()).collect();
    LabeledDataset::new("rand", Split::Train, 3, [4, 4, 2], images, (0..n).map(|i| i % 3).collect()).unwrap()
}
