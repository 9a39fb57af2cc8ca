//! Small reverse-mode autodiff over dense row-major matrices, with the layer
//! types, rate terms and optimizer needed to train the codec.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::entropy::{continuous_rate_grad, hyper_rate_grad, GaussianParams, HyperMode};
use crate::error::{Error, Result};

/// Row-major matrix; rows are batch elements.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

/// Layer widths and activations of a dense network, plus its init seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(Error::Shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].output, pair[1].input
                )));
            }
        }
        if layers.iter().any(|l| l.input == 0 || l.output == 0) {
            return Err(Error::Shape("zero-width layer".into()));
        }
        Ok(NetSpec { layers, seed })
    }

    /// `widths[0] -> widths[1] -> ...`, relu between layers and `last` on the output.
    pub fn chain(widths: &[usize], last: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape("need at least two widths".into()));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                input: widths[i],
                output: widths[i + 1],
                activation: if i + 1 == n { last } else { Activation::Relu },
            })
            .collect();
        NetSpec::new(layers, seed)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}x{}:{}", l.input, l.output, l.activation.name()))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for NetSpec {
    type Err = Error;

    /// Parses the layer list of `Display`; the seed is set to zero.
    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(',')
            .map(|part| {
                let (dims, act) = part
                    .split_once(':')
                    .ok_or_else(|| Error::Malformed(format!("layer {part:?}")))?;
                let (i, o) = dims
                    .split_once('x')
                    .ok_or_else(|| Error::Malformed(format!("layer {part:?}")))?;
                let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Malformed(format!("layer {part:?}")));
                Ok(LayerSpec { input: parse(i)?, output: parse(o)?, activation: act.parse()? })
            })
            .collect::<Result<Vec<_>>>()?;
        NetSpec::new(layers, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// All trainable values in one flat vector, with named matrix views.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<ParamId> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!("{name}: {rows}x{cols} from {} values", values.len())));
        }
        if self.id(name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let offset = self.data.len();
        self.data.extend(values);
        self.entries.push(ParamEntry { name: name.to_string(), rows, cols, offset });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.data[self.entries[id.0].range()]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.entries[id.0].range();
        &mut self.data[r]
    }

    pub fn matrix(&self, id: ParamId) -> Mat {
        let e = &self.entries[id.0];
        Mat { rows: e.rows, cols: e.cols, data: self.values(id).to_vec() }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat mask selecting every entry whose name starts with one of `prefixes`.
    pub fn mask(&self, prefixes: &[&str]) -> Vec<bool> {
        let mut m = vec![false; self.data.len()];
        for e in &self.entries {
            if prefixes.iter().any(|p| e.name.starts_with(p)) {
                m[e.range()].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }

    /// Rounds every value to the nearest f32 so the f32 blob is lossless.
    pub fn snap_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32_le(&self) -> Vec<u8> {
        self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    /// Overwrites all values from a little-endian f32 blob.
    pub fn load_f32_le(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != 4 * self.data.len() {
            return Err(Error::Shape(format!(
                "parameter blob has {} bytes, expected {}",
                bytes.len(),
                4 * self.data.len()
            )));
        }
        for (v, c) in self.data.iter_mut().zip(bytes.chunks_exact(4)) {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !x.is_finite() {
                return Err(Error::NonFinite("parameter blob".into()));
            }
            *v = x as f64;
        }
        Ok(())
    }

    /// Bytes of the f32 blob restricted to entries with the given prefix.
    pub fn group_bytes(&self, prefix: &str) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .flat_map(|e| self.data[e.range()].iter().flat_map(|&v| (v as f32).to_le_bytes()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: ParamId,
    b: ParamId,
    activation: Activation,
}

/// Dense network whose weights live in a shared `ParamSet`.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: NetSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    /// Registers `prefix.{i}.w` and `prefix.{i}.b` for each layer, He-initialized from the spec's seed.
    pub fn build(params: &mut ParamSet, prefix: &str, spec: NetSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let gain = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / l.input as f64).sqrt()).expect("valid std");
            let w: Vec<f64> = (0..l.input * l.output).map(|_| normal.sample(&mut rng) as f32 as f64).collect();
            let w = params.add(&format!("{prefix}.{i}.w"), l.output, l.input, w)?;
            let b = params.add(&format!("{prefix}.{i}.b"), 1, l.output, vec![0.0; l.output])?;
            layers.push(Layer { w, b, activation: l.activation });
        }
        Ok(Mlp { spec, layers })
    }

    /// Re-attaches to parameters already registered under `prefix`.
    pub fn attach(params: &ParamSet, prefix: &str, spec: NetSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let find = |n: &str| {
                params
                    .id(n)
                    .ok_or_else(|| Error::Malformed(format!("missing parameter {n}")))
            };
            let w = find(&format!("{prefix}.{i}.w"))?;
            let b = find(&format!("{prefix}.{i}.b"))?;
            let (we, be) = (params.entry(w), params.entry(b));
            if we.rows != l.output || we.cols != l.input || be.cols != l.output {
                return Err(Error::Shape(format!("{prefix}.{i} does not match spec")));
            }
            layers.push(Layer { w, b, activation: l.activation });
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let width = tape.value(x).cols;
        if width != self.spec.input_width() {
            return Err(Error::Shape(format!("input width {width}, network expects {}", self.spec.input_width())));
        }
        let mut h = x;
        for l in &self.layers {
            let w = tape.param(params, l.w);
            let b = tape.param(params, l.b);
            h = tape.linear(h, w, b)?;
            h = match l.activation {
                Activation::Linear => h,
                Activation::Relu => tape.relu(h),
                Activation::Softplus => tape.softplus(h),
            };
        }
        Ok(h)
    }

    /// Forward pass without recording.
    pub fn eval(&self, params: &ParamSet, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, params, v)?;
        Ok(tape.take(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    Softplus(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Adds a constant; the gradient passes straight through.
    Shift(usize),
    Scale(usize, f64),
    Sum(usize),
    SumSquares(usize),
    StopGrad,
    /// Cached partials with respect to (z, mu, sigma).
    GaussBits { z: usize, mu: usize, sigma: usize, grads: Vec<[f64; 3]> },
    /// Cached partials with respect to the value and, per element, the channel logits.
    HyperBits { y: usize, logits: usize, d_value: Vec<f64>, d_logits: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &Mat, b: &Mat) -> Error {
    Error::Shape(format!("{op}: {}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Moves a value out of the tape, leaving an empty matrix behind.
    pub fn take(&mut self, v: Var) -> Mat {
        std::mem::replace(&mut self.nodes[v.0].value, Mat::zeros(0, 0))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.matrix(id), Op::Param(id))
    }

    /// `x W^T + b` with `W` stored as `out x in` and `b` as `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.cols {
            return Err(shape_err("linear", xv, wv));
        }
        if bv.rows != 1 || bv.cols != wv.rows {
            return Err(shape_err("linear bias", wv, bv));
        }
        let (n, k, m) = (xv.rows, xv.cols, wv.rows);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let xr = &xv.data[r * k..(r + 1) * k];
            let or = &mut out[r * m..(r + 1) * m];
            for (o, slot) in or.iter_mut().enumerate() {
                let wr = &wv.data[o * k..(o + 1) * k];
                *slot = bv.data[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(self.push(Mat { rows: n, cols: m, data: out }, Op::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x.0))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err(name, av, bv));
        }
        Ok(Mat { rows: av.rows, cols: av.cols, data: av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    /// `x + c` for a constant matrix `c`.
    pub fn shift(&mut self, x: Var, c: &Mat) -> Result<Var> {
        let xv = self.value(x);
        if !xv.same_shape(c) {
            return Err(shape_err("shift", xv, c));
        }
        let data = xv.data.iter().zip(&c.data).map(|(a, b)| a + b).collect();
        Ok(self.push(Mat { rows: xv.rows, cols: xv.cols, data }, Op::Shift(x.0)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::Shift(x.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x.0, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(x.0))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|a| a * a).sum();
        self.push(Mat::scalar(s), Op::SumSquares(x.0))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad)
    }

    /// Elementwise training rate of `z` under `N(mu, sigma^2)` with a
    /// `delta`-wide interval.
    pub fn gauss_bits(&mut self, z: Var, mu: Var, sigma: Var, delta: f64, p_min: f64) -> Result<Var> {
        let (zv, mv, sv) = (self.value(z), self.value(mu), self.value(sigma));
        if !zv.same_shape(mv) || !zv.same_shape(sv) {
            return Err(shape_err("gauss_bits", zv, mv));
        }
        let mut bits = Vec::with_capacity(zv.data.len());
        let mut grads = Vec::with_capacity(zv.data.len());
        for ((&z, &m), &s) in zv.data.iter().zip(&mv.data).zip(&sv.data) {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::NonFinite(format!("scale {s}")));
            }
            let g = continuous_rate_grad(z, GaussianParams { mu: m, sigma: s }, delta, p_min);
            bits.push(g.bits);
            grads.push([g.d_z, g.d_mu, g.d_sigma]);
        }
        let value = Mat { rows: zv.rows, cols: zv.cols, data: bits };
        Ok(self.push(value, Op::GaussBits { z: z.0, mu: mu.0, sigma: sigma.0, grads }))
    }

    /// Elementwise rate of hyperprior values (`batch x channels`) under
    /// per-channel logits (`channels x bins`).
    pub fn hyper_bits(&mut self, y: Var, logits: Var, y_max: i32, mode: HyperMode, p_min: f64) -> Result<Var> {
        let (yv, lv) = (self.value(y), self.value(logits));
        let bins = (2 * y_max + 1) as usize;
        if yv.cols != lv.rows || lv.cols != bins {
            return Err(shape_err("hyper_bits", yv, lv));
        }
        let mut bits = Vec::with_capacity(yv.data.len());
        let mut d_value = Vec::with_capacity(yv.data.len());
        let mut d_logits = Vec::with_capacity(yv.data.len() * bins);
        for r in 0..yv.rows {
            for c in 0..yv.cols {
                let g = hyper_rate_grad(lv.row(c), y_max, yv.data[r * yv.cols + c], mode, p_min);
                bits.push(g.bits);
                d_value.push(g.d_value);
                d_logits.extend_from_slice(&g.d_logits);
            }
        }
        let value = Mat { rows: yv.rows, cols: yv.cols, data: bits };
        Ok(self.push(value, Op::HyperBits { y: y.0, logits: logits.0, d_value, d_logits }))
    }

    /// Reverse pass from a scalar `loss`; returns the flat gradient over `params`.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Vec<f64>> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = vec![0.0; params.len()];

        fn acc(grads: &mut [Option<Mat>], i: usize, g: Mat) {
            match &mut grads[i] {
                Some(m) => m.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Param(id) => {
                    for (o, d) in out[params.entry(*id).range()].iter_mut().zip(&g.data) {
                        *o += d;
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (n, k, m) = (xv.rows, xv.cols, wv.rows);
                    let mut dx = Mat::zeros(n, k);
                    let mut dw = Mat::zeros(m, k);
                    let mut db = Mat::zeros(1, m);
                    for r in 0..n {
                        let gr = &g.data[r * m..(r + 1) * m];
                        let xr = &xv.data[r * k..(r + 1) * k];
                        let dxr = &mut dx.data[r * k..(r + 1) * k];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            db.data[o] += go;
                            let wr = &wv.data[o * k..(o + 1) * k];
                            let dwr = &mut dw.data[o * k..(o + 1) * k];
                            for j in 0..k {
                                dxr[j] += go * wr[j];
                                dwr[j] += go * xr[j];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data.iter_mut().zip(&node.value.data) {
                        if y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Softplus(x) => {
                    let mut d = g;
                    for (dv, &a) in d.data.iter_mut().zip(&self.nodes[*x].value.data) {
                        *dv *= sigmoid(a);
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da = Mat { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect() };
                    let db = Mat { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect() };
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Shift(x) => acc(&mut grads, *x, g),
                Op::Scale(x, c) => acc(&mut grads, *x, g.map(|v| v * c)),
                Op::Sum(x) => {
                    let xv = &self.nodes[*x].value;
                    acc(&mut grads, *x, Mat { rows: xv.rows, cols: xv.cols, data: vec![g.data[0]; xv.data.len()] });
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g.data[0];
                    let d = self.nodes[*x].value.map(|v| s * v);
                    acc(&mut grads, *x, d);
                }
                Op::GaussBits { z, mu, sigma, grads: partials } => {
                    let pick = |k: usize| Mat {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(partials).map(|(d, p)| d * p[k]).collect(),
                    };
                    let (dz, dm, ds) = (pick(0), pick(1), pick(2));
                    acc(&mut grads, *z, dz);
                    acc(&mut grads, *mu, dm);
                    acc(&mut grads, *sigma, ds);
                }
                Op::HyperBits { y, logits, d_value, d_logits } => {
                    let dy = Mat { rows: g.rows, cols: g.cols, data: g.data.iter().zip(d_value).map(|(a, b)| a * b).collect() };
                    acc(&mut grads, *y, dy);
                    let lv = &self.nodes[*logits].value;
                    let bins = lv.cols;
                    let mut dl = Mat::zeros(lv.rows, bins);
                    for (e, &w) in g.data.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let c = e % g.cols;
                        let src = &d_logits[e * bins..(e + 1) * bins];
                        for (a, d) in dl.data[c * bins..(c + 1) * bins].iter_mut().zip(src) {
                            *a += w * d;
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(out)
    }
}

/// Adam with bias correction. Masked-out entries are left untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[f64], lr: f64, mask: Option<&[bool]>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let data = params.data_mut();
        for i in 0..data.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            data[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        params.snap_f32();
        Ok(())
    }
}

pub const LR_DECAY: f64 = 1.0 / 1.131;

/// Exponential learning-rate decay triggered by loss saturation: when the
/// epoch loss has not improved by more than `threshold` (relative) for
/// `patience` epochs, the rate is multiplied by `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub l0: f64,
    pub alpha: f64,
    pub patience: usize,
    pub threshold: f64,
    decays: u32,
    best: f64,
    stale: usize,
}

impl LrSchedule {
    pub fn new(l0: f64) -> Self {
        LrSchedule { l0, alpha: LR_DECAY, patience: 5, threshold: 1e-3, decays: 0, best: f64::INFINITY, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.l0 * self.alpha.powi(self.decays as i32)
    }

    pub fn decays(&self) -> u32 {
        self.decays
    }

    pub fn set_decays(&mut self, k: u32) {
        self.decays = k;
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records an epoch loss; returns whether the rate was decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) || !self.best.is_finite() {
            self.best = self.best.min(loss);
            self.stale = 0;
            return false;
        }
        self.best = self.best.min(loss);
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.decays += 1;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over the entries that were compared.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries left out because a kink lies within the stencil.
    pub kinks: usize,
}

impl GradCheck {
    /// Every compared entry within `tol`, and at least three quarters of
    /// the entries actually compared.
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.kinks * 4 <= self.checked
    }
}

/// One-sided estimates disagreeing by more than this flag a kink.
pub const KINK_REL: f64 = 4e-4;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic` against fourth-order central differences of `f`
/// (points at `±step` and `±2·step`) at the entries in `indices`. The
/// relative error uses `max(|a|, |n|, floor)` as denominator.
///
/// Where the second-order forward and backward estimates disagree the
/// function has a kink inside the stencil (a ReLU switching, a density
/// floor, a bin edge) and no difference quotient is meaningful; such
/// entries are counted in `kinks` instead of being compared. A wrong
/// analytic gradient leaves the two one-sided estimates in agreement, so
/// it still shows up as an error.
pub fn gradcheck<F>(params: &ParamSet, analytic: &[f64], indices: &[usize], step: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut p = params.clone();
    let f0 = f(&p)?;
    let mut worst = GradCheck { max_rel_err: 0.0, worst_index: 0, checked: 0, kinks: 0 };
    for &i in indices {
        let orig = p.data()[i];
        let mut at = |k: f64| -> Result<f64> {
            p.data_mut()[i] = orig + k * step;
            f(&p)
        };
        let (u1, d1, u2, d2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        p.data_mut()[i] = orig;
        let forward = (4.0 * u1 - 3.0 * f0 - u2) / (2.0 * step);
        let backward = (3.0 * f0 - 4.0 * d1 + d2) / (2.0 * step);
        worst.checked += 1;
        if rel_err(forward, backward, floor) > KINK_REL {
            worst.kinks += 1;
            continue;
        }
        let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step);
        let rel = rel_err(analytic[i], numeric, floor);
        if rel > worst.max_rel_err {
            worst.max_rel_err = rel;
            worst.worst_index = i;
        }
    }
    Ok(worst)
}
