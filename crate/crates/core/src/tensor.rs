//! Dense row-major tensors and the convolution, pooling and dense kernels
//! the rest of the crate is built on.
//!
//! Activations are held as `f64`. Trained parameters are rounded to `f32`
//! precision when a [`ModelGraph`](crate::graph::ModelGraph) is built, so the
//! on-disk `f32` blobs round-trip exactly. Every dot product accumulates in
//! `f64` in a fixed order (kernel row, kernel column, input channel) which
//! keeps results bit-reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat index of `coord`.
    pub fn flat_index(&self, coord: &[usize]) -> Result<usize> {
        flat_index(&self.shape, coord)
    }

    pub fn coordinate_of(&self, index: usize) -> Result<Vec<usize>> {
        coordinate_of(&self.shape, index)
    }

    pub fn get(&self, coord: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(coord)?])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    /// Rounds every element to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

pub fn flat_index(shape: &[usize], coord: &[usize]) -> Result<usize> {
    if coord.len() != shape.len() {
        return Err(Error::Shape(format!("coordinate {coord:?} has wrong rank for {shape:?}")));
    }
    let mut index = 0;
    for (&c, &extent) in coord.iter().zip(shape) {
        if c >= extent {
            return Err(Error::Shape(format!("coordinate {coord:?} outside {shape:?}")));
        }
        index = index * extent + c;
    }
    Ok(index)
}

pub fn coordinate_of(shape: &[usize], mut index: usize) -> Result<Vec<usize>> {
    let len: usize = shape.iter().product();
    if index >= len {
        return Err(Error::Shape(format!("flat index {index} outside {shape:?}")));
    }
    let mut coord = vec![0; shape.len()];
    for (slot, &extent) in coord.iter_mut().zip(shape).rev() {
        *slot = index % extent;
        index /= extent;
    }
    Ok(coord)
}

/// First index of the maximum; `NaN`s never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero-filled border so that stride 1 preserves the spatial size.
    With,
    /// No padding: the input is used as is.
    Zero,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::With => "with",
            Padding::Zero => "zero",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with" | "same" => Ok(Padding::With),
            "zero" | "valid" => Ok(Padding::Zero),
            other => Err(Error::Parse(format!("unknown padding {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[kh, kw, c_in, c_out]`
    pub kernel: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

/// Resolved sizes of one convolution applied to one input shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_c]
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    pub fn window_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    /// Input coordinate read by window `(out_row, out_col)` at kernel offset
    /// `(i, j)`, or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, out_row: usize, out_col: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (out_row * self.stride + i).checked_sub(self.pad_top)?;
        let x = (out_col * self.stride + j).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", kernel.shape())));
        }
        if bias.shape() != [kernel.shape()[3]] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match kernel output channels {}",
                bias.shape(),
                kernel.shape()[3]
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        Ok(ConvParams { kernel, bias, stride, padding })
    }

    pub fn geometry(&self, input_shape: &[usize]) -> Result<ConvGeometry> {
        let &[in_h, in_w, in_c] = input_shape else {
            return Err(Error::Shape(format!("conv input must be rank 3, got {input_shape:?}")));
        };
        let &[kh, kw, k_in, out_c] = self.kernel.shape() else { unreachable!("kernel rank checked at construction") };
        if k_in != in_c {
            return Err(Error::Shape(format!("kernel expects {k_in} input channels, input has {in_c}")));
        }
        let stride = self.stride;
        let (pad_top, pad_left, padded_h, padded_w) = match self.padding {
            Padding::Zero => (0, 0, in_h, in_w),
            Padding::With => {
                let total = |extent: usize, k: usize| {
                    let out = extent.div_ceil(stride);
                    ((out - 1) * stride + k).saturating_sub(extent)
                };
                let (th, tw) = (total(in_h, kh), total(in_w, kw));
                (th / 2, tw / 2, in_h + th, in_w + tw)
            }
        };
        if kh > padded_h || kw > padded_w {
            return Err(Error::KernelTooLarge { kernel: [kh, kw], padded: [padded_h, padded_w] });
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
            stride,
            pad_top,
            pad_left,
            padded_h,
            padded_w,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }
}

/// One receptive field of a convolution and the output cell it produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `[kh, kw, c_in]`, padding read as zero.
    pub values: Tensor,
    pub out_row: usize,
    pub out_col: usize,
}

/// Enumerates every sliding window in row-major output order.
pub fn sliding_windows(input: &Tensor, params: &ConvParams) -> Result<Vec<Window>> {
    let g = params.geometry(input.shape())?;
    let x = input.data();
    let mut windows = Vec::with_capacity(g.out_h * g.out_w);
    for out_row in 0..g.out_h {
        for out_col in 0..g.out_w {
            let mut values = Vec::with_capacity(g.window_len());
            for i in 0..g.kh {
                for j in 0..g.kw {
                    match g.source(out_row, out_col, i, j) {
                        Some((y, xx)) => {
                            let base = (y * g.in_w + xx) * g.in_c;
                            values.extend_from_slice(&x[base..base + g.in_c]);
                        }
                        None => values.extend(std::iter::repeat_n(0.0, g.in_c)),
                    }
                }
            }
            windows.push(Window { values: Tensor::new(vec![g.kh, g.kw, g.in_c], values)?, out_row, out_col });
        }
    }
    Ok(windows)
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let g = params.geometry(input.shape())?;
    let x = input.data();
    let k = params.kernel.data();
    let b = params.bias.data();
    let mut out = vec![0.0; g.output_len()];
    let mut acc = vec![0.0f64; g.out_c];
    for r in 0..g.out_h {
        for c in 0..g.out_w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let Some((y, xx)) = g.source(r, c, i, j) else { continue };
                    let in_base = (y * g.in_w + xx) * g.in_c;
                    for ch in 0..g.in_c {
                        let v = x[in_base + ch];
                        let k_base = ((i * g.kw + j) * g.in_c + ch) * g.out_c;
                        for (a, w) in acc.iter_mut().zip(&k[k_base..k_base + g.out_c]) {
                            *a += v * w;
                        }
                    }
                }
            }
            let base = (r * g.out_w + c) * g.out_c;
            for oc in 0..g.out_c {
                out[base + oc] = acc[oc] + b[oc];
            }
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Avg,
}

pub fn pool_output_shape(input_shape: &[usize], size: usize) -> Result<[usize; 3]> {
    let &[h, w, c] = input_shape else {
        return Err(Error::Shape(format!("pool input must be rank 3, got {input_shape:?}")));
    };
    if size == 0 {
        return Err(Error::Shape("pool size must be positive".into()));
    }
    for extent in [h, w] {
        if extent % size != 0 {
            return Err(Error::PoolDivisibility { extent, pool: size });
        }
    }
    Ok([h / size, w / size, c])
}

pub fn pool2d(input: &Tensor, size: usize, mode: PoolMode) -> Result<Tensor> {
    let [oh, ow, c] = pool_output_shape(input.shape(), size)?;
    let w = input.shape()[1];
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let mut max = f64::NEG_INFINITY;
                let mut sum = 0.0f64;
                for dr in 0..size {
                    for dc in 0..size {
                        let v = x[((r * size + dr) * w + col * size + dc) * c + ch];
                        max = max.max(v);
                        sum += v;
                    }
                }
                out.push(match mode {
                    PoolMode::Max => max,
                    PoolMode::Avg => sum / (size * size) as f64,
                });
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Flat input positions pooled into output position `index`.
pub fn pool_block(input_shape: &[usize], size: usize, index: usize) -> Result<Vec<usize>> {
    let out_shape = pool_output_shape(input_shape, size)?;
    let [r, col, ch] = coordinate_of(&out_shape, index)?[..] else { unreachable!() };
    let mut block = Vec::with_capacity(size * size);
    for dr in 0..size {
        for dc in 0..size {
            block.push(flat_index(input_shape, &[r * size + dr, col * size + dc, ch])?);
        }
    }
    Ok(block)
}

/// `xᵀW + b` with optional masks: rows of `W` whose input is masked and
/// whole output nodes (column + bias) that are masked contribute nothing.
pub fn dense_masked(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    input_masked: Option<&[bool]>,
    output_masked: Option<&[bool]>,
) -> Result<Tensor> {
    let &[n_in, n_out] = weights.shape() else {
        return Err(Error::Shape(format!("dense weights must be rank 2, got {:?}", weights.shape())));
    };
    if input.shape() != [n_in] {
        return Err(Error::Shape(format!("dense expects input [{n_in}], got {:?}", input.shape())));
    }
    if bias.shape() != [n_out] {
        return Err(Error::Shape(format!("dense bias {:?} does not match {n_out} outputs", bias.shape())));
    }
    let x = input.data();
    let w = weights.data();
    let mut acc = vec![0.0f64; n_out];
    for (j, &v) in x.iter().enumerate() {
        if input_masked.is_some_and(|m| m[j]) {
            continue;
        }
        for (a, wj) in acc.iter_mut().zip(&w[j * n_out..(j + 1) * n_out]) {
            *a += v * wj;
        }
    }
    for (i, (a, b)) in acc.iter_mut().zip(bias.data()).enumerate() {
        if output_masked.is_some_and(|m| m[i]) {
            *a = 0.0;
        } else {
            *a += b;
        }
    }
    Tensor::vector(acc)
}

pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    dense_masked(input, weights, bias, None, None)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor { shape: x.shape.clone(), data: exps.into_iter().map(|e| e / sum).collect() }
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor { shape: vec![x.len()], data: x.data.clone() }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("add operands {:?} and {:?} differ", a.shape, b.shape)));
    }
    Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() })
}
