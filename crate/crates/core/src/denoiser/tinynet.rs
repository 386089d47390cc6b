//! Three-layer convolutional network with hand-derived gradients.
//!
//! `z1 = W1 * x + b1 + u1·s`, `h1 = tanh z1`, `z2 = W2 * h1 + b2 + u2·s`,
//! `h2 = tanh z2`, `out = W3 * h2 + b3`, all 3×3 convolutions with zero
//! padding and `s` a scalar time feature.

use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{Array2, Array3};
use rand::Rng;

use super::io::{read_tensors, write_tensors};
use super::{Denoiser, ScoreModel};
use crate::diffusion::{cfg_combine, noise_with, NoiseSchedule, VeSchedule};
use crate::error::{check_shape, Error, Result};
use crate::geometry::{make_sparse_mask, mask_rows};
use crate::rng::{gaussian_array, rng_from, StrideRng};

pub const MAGIC: &[u8; 8] = b"STRDNET1";
pub const HIDDEN: usize = 16;
const K: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    in_channels: usize,
    params: Vec<f64>,
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone)]
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    u1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    u2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
}

impl Layout {
    fn new(cin: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w1: take(HIDDEN * cin * K),
            b1: take(HIDDEN),
            u1: take(HIDDEN),
            w2: take(HIDDEN * HIDDEN * K),
            b2: take(HIDDEN),
            u2: take(HIDDEN),
            w3: take(HIDDEN * K),
            b3: take(1),
        }
    }

    fn total(&self) -> usize {
        self.b3.end
    }

    fn shapes(&self, cin: usize) -> Vec<(Vec<usize>, Range<usize>)> {
        vec![
            (vec![HIDDEN, cin, 3, 3], self.w1.clone()),
            (vec![HIDDEN], self.b1.clone()),
            (vec![HIDDEN], self.u1.clone()),
            (vec![HIDDEN, HIDDEN, 3, 3], self.w2.clone()),
            (vec![HIDDEN], self.b2.clone()),
            (vec![HIDDEN], self.u2.clone()),
            (vec![1, HIDDEN, 3, 3], self.w3.clone()),
            (vec![1], self.b3.clone()),
        ]
    }
}

/// Valid output index range for kernel offset `d ∈ {-1, 0, 1}`.
fn span(d: isize, n: usize) -> Range<usize> {
    match d {
        -1 => 1..n,
        1 => 0..n.saturating_sub(1),
        _ => 0..n,
    }
}

/// `out[o] += Σ_c W[o,c] ⋆ x[c]`.
fn conv_add(w: &[f64], cin: usize, cout: usize, x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    let p = rows * cols;
    for o in 0..cout {
        for c in 0..cin {
            for k in 0..K {
                let wv = w[(o * cin + c) * K + k];
                if wv == 0.0 {
                    continue;
                }
                let (di, dj) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let js = span(dj, cols);
                for i in span(di, rows) {
                    let src = c * p + (i as isize + di) as usize * cols;
                    let dst = o * p + i * cols;
                    for j in js.clone() {
                        out[dst + j] += wv * x[src + (j as isize + dj) as usize];
                    }
                }
            }
        }
    }
}

/// Gradients of `conv_add` given upstream `g`: accumulates into `dw`, and
/// into `dx` when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    cin: usize,
    cout: usize,
    x: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let p = rows * cols;
    for o in 0..cout {
        for c in 0..cin {
            for k in 0..K {
                let (di, dj) = (k as isize / 3 - 1, k as isize % 3 - 1);
                let js = span(dj, cols);
                let wv = w[(o * cin + c) * K + k];
                let mut acc = 0.0;
                for i in span(di, rows) {
                    let src = c * p + (i as isize + di) as usize * cols;
                    let up = o * p + i * cols;
                    for j in js.clone() {
                        let xi = src + (j as isize + dj) as usize;
                        acc += g[up + j] * x[xi];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += wv * g[up + j];
                        }
                    }
                }
                dw[(o * cin + c) * K + k] += acc;
            }
        }
    }
}

struct Cache {
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
}

impl TinyNet {
    pub fn zeros(in_channels: usize) -> Self {
        assert!(in_channels >= 1, "network needs an input channel");
        Self {
            in_channels,
            params: vec![0.0; Layout::new(in_channels).total()],
        }
    }

    /// Fan-in scaled Gaussian weights, zero biases, small time embeddings.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut net = Self::zeros(in_channels);
        let l = Layout::new(in_channels);
        let mut rng = rng_from(seed);
        let fill = |p: &mut [f64], sd: f64, rng: &mut StrideRng| {
            for v in p {
                *v = sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        };
        fill(&mut net.params[l.w1.clone()], (1.0 / (in_channels * K) as f64).sqrt(), &mut rng);
        fill(&mut net.params[l.u1.clone()], 0.1, &mut rng);
        fill(&mut net.params[l.w2.clone()], (1.0 / (HIDDEN * K) as f64).sqrt(), &mut rng);
        fill(&mut net.params[l.u2.clone()], 0.1, &mut rng);
        fill(&mut net.params[l.w3.clone()], (1.0 / (HIDDEN * K) as f64).sqrt(), &mut rng);
        net
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn conditional(&self) -> bool {
        self.in_channels > 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let (c, r, k) = x.dim();
        if c != self.in_channels || r == 0 || k == 0 {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got input of shape {:?}",
                self.in_channels,
                x.dim()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], rows: usize, cols: usize, time: f64) -> Cache {
        let l = Layout::new(self.in_channels);
        let p = rows * cols;
        let prm = &self.params;
        let biased = |b: &Range<usize>, u: &Range<usize>| {
            let mut z = vec![0.0; HIDDEN * p];
            for c in 0..HIDDEN {
                let v = prm[b.start + c] + prm[u.start + c] * time;
                z[c * p..(c + 1) * p].fill(v);
            }
            z
        };
        let mut h1 = biased(&l.b1, &l.u1);
        conv_add(&prm[l.w1.clone()], self.in_channels, HIDDEN, x, rows, cols, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut h2 = biased(&l.b2, &l.u2);
        conv_add(&prm[l.w2.clone()], HIDDEN, HIDDEN, &h1, rows, cols, &mut h2);
        h2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![prm[l.b3.start]; p];
        conv_add(&prm[l.w3.clone()], HIDDEN, 1, &h2, rows, cols, &mut out);
        Cache { h1, h2, out }
    }

    pub fn forward(&self, x: &Array3<f64>, time: f64) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let (_, rows, cols) = x.dim();
        let flat = x.as_standard_layout();
        let cache = self.run(flat.as_slice().expect("standard layout"), rows, cols, time);
        Ok(Array2::from_shape_vec((rows, cols), cache.out).expect("output size"))
    }

    /// `scale · mean((out − target)²)` and its gradient in parameter order.
    pub fn loss_and_grad(&self, x: &Array3<f64>, time: f64, target: &Array2<f64>, scale: f64) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        let (_, rows, cols) = x.dim();
        check_shape((rows, cols), target.dim())?;
        let flat = x.as_standard_layout();
        let x = flat.as_slice().expect("standard layout");
        let tgt = target.as_standard_layout();
        let tgt = tgt.as_slice().expect("standard layout");
        let p = rows * cols;
        let l = Layout::new(self.in_channels);
        let prm = &self.params;
        let cache = self.run(x, rows, cols, time);

        let mut loss = 0.0;
        let mut g_out = vec![0.0; p];
        for ((g, o), t) in g_out.iter_mut().zip(&cache.out).zip(tgt) {
            let r = o - t;
            loss += r * r;
            *g = 2.0 * scale * r / p as f64;
        }
        loss *= scale / p as f64;

        let mut grad = vec![0.0; prm.len()];
        grad[l.b3.start] = g_out.iter().sum();
        let mut g_h2 = vec![0.0; HIDDEN * p];
        conv_backward(&prm[l.w3.clone()], HIDDEN, 1, &cache.h2, &g_out, rows, cols, &mut grad[l.w3.clone()], Some(&mut g_h2));
        let mut g_z2 = g_h2;
        g_z2.iter_mut().zip(&cache.h2).for_each(|(g, h)| *g *= 1.0 - h * h);
        for c in 0..HIDDEN {
            let s: f64 = g_z2[c * p..(c + 1) * p].iter().sum();
            grad[l.b2.start + c] = s;
            grad[l.u2.start + c] = s * time;
        }
        let mut g_h1 = vec![0.0; HIDDEN * p];
        conv_backward(&prm[l.w2.clone()], HIDDEN, HIDDEN, &cache.h1, &g_z2, rows, cols, &mut grad[l.w2.clone()], Some(&mut g_h1));
        let mut g_z1 = g_h1;
        g_z1.iter_mut().zip(&cache.h1).for_each(|(g, h)| *g *= 1.0 - h * h);
        for c in 0..HIDDEN {
            let s: f64 = g_z1[c * p..(c + 1) * p].iter().sum();
            grad[l.b1.start + c] = s;
            grad[l.u1.start + c] = s * time;
        }
        conv_backward(&prm[l.w1.clone()], self.in_channels, HIDDEN, x, &g_z1, rows, cols, &mut grad[l.w1.clone()], None);
        Ok((loss, grad))
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let l = Layout::new(self.in_channels);
        let tensors: Vec<(Vec<usize>, &[f64])> = l
            .shapes(self.in_channels)
            .into_iter()
            .map(|(dims, r)| (dims, &self.params[r]))
            .collect();
        write_tensors(w, MAGIC, &tensors)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let tensors = read_tensors(r, MAGIC)?;
        let cin = match tensors.first() {
            Some((dims, _)) if dims.len() == 4 && dims[0] == HIDDEN && dims[1] >= 1 => dims[1],
            _ => return Err(Error::Format("first layer is not a 16×C×3×3 kernel".into())),
        };
        let l = Layout::new(cin);
        let shapes = l.shapes(cin);
        if tensors.len() != shapes.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", shapes.len(), tensors.len())));
        }
        let mut net = Self::zeros(cin);
        for ((dims, data), (want, range)) in tensors.into_iter().zip(shapes) {
            if dims != want {
                return Err(Error::Format(format!("tensor shape {dims:?}, expected {want:?}")));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite parameter".into()));
            }
            net.params[range].copy_from_slice(&data);
        }
        Ok(net)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

/// Central finite-difference check of `loss_and_grad`; returns the largest
/// relative error `|g − fd| / max(|g|, |fd|, floor)`.
pub fn grad_check(model: &TinyNet, x: &Array3<f64>, time: f64, target: &Array2<f64>) -> Result<f64> {
    const H: f64 = 1e-4;
    let (_, grad) = model.loss_and_grad(x, time, target, 1.0)?;
    let floor = 1e-6 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + H;
        let (lp, _) = probe.loss_and_grad(x, time, target, 1.0)?;
        probe.params[i] = orig - H;
        let (lm, _) = probe.loss_and_grad(x, time, target, 1.0)?;
        probe.params[i] = orig;
        let fd = (lp - lm) / (2.0 * H);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of presenting the masked condition (ε-model only).
    pub p_cond: f64,
    /// Sparse intervals drawn uniformly per conditioned sample.
    pub view_set: Vec<usize>,
    /// Samples averaged per optimizer step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            seed: 0,
            p_cond: 0.2,
            view_set: vec![2, 3, 4, 6],
            batch: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n_data: usize) -> Result<()> {
        if n_data == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        if !(0.0..=1.0).contains(&self.p_cond) {
            return Err(Error::invalid(format!("p_cond must lie in [0, 1], got {}", self.p_cond)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.view_set.is_empty() || self.view_set.contains(&0) {
            return Err(Error::invalid("view set must hold positive intervals"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        Ok(())
    }
}

/// One drawn training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Array3<f64>,
    pub time: f64,
    pub target: Array2<f64>,
    pub conditioned: bool,
}

fn stack(channels: &[&Array2<f64>]) -> Array3<f64> {
    let (r, c) = channels[0].dim();
    let mut out = Array3::zeros((channels.len(), r, c));
    for (i, ch) in channels.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(ch);
    }
    out
}

/// Draws `t`, `γ`, `r` and `ε` for one noise-prediction example. The
/// condition channel (present when `in_channels == 2`) holds `γ·M∘y0`.
pub fn draw_epsilon_sample(
    y0: &Array2<f64>,
    in_channels: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut StrideRng,
) -> Result<TrainingSample> {
    let t = rng.random_range(1..=sched.steps());
    let conditioned = rng.random::<f64>() < cfg.p_cond;
    let r = cfg.view_set[rng.random_range(0..cfg.view_set.len())];
    let eps = gaussian_array(rng, y0.dim());
    let yt = noise_with(y0, &eps, t, sched)?;
    let input = if in_channels == 1 {
        stack(&[&yt])
    } else {
        let cond = if conditioned {
            mask_rows(y0, &make_sparse_mask(y0.nrows(), r)?)?
        } else {
            Array2::zeros(y0.dim())
        };
        stack(&[&yt, &cond])
    };
    Ok(TrainingSample {
        input,
        time: t as f64 / sched.steps() as f64,
        target: eps,
        conditioned,
    })
}

/// Draws `t ~ U(0, 1)` and `z` for one denoising score matching example;
/// the target is `−z` for a network predicting `σ(t)·s(y, t)`.
pub fn draw_score_sample(x: &Array2<f64>, ve: &VeSchedule, rng: &mut StrideRng) -> TrainingSample {
    let t: f64 = rng.random();
    let z = gaussian_array(rng, x.dim());
    let y = x + &(&z * ve.sigma(t));
    TrainingSample {
        input: stack(&[&y]),
        time: t,
        target: -z,
        conditioned: false,
    }
}

fn fit<F>(mut model: TinyNet, n_data: usize, cfg: &TrainConfig, stage: &str, mut draw: F) -> Result<(TinyNet, Vec<f64>)>
where
    F: FnMut(usize, &mut StrideRng) -> Result<TrainingSample>,
{
    let mut rng = rng_from(cfg.seed);
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_data).collect();
        for i in (1..n_data).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grad = vec![0.0; model.param_count()];
            for &idx in chunk {
                let s = draw(idx, &mut rng)?;
                let (loss, g) = model.loss_and_grad(&s.input, s.time, &s.target, 1.0 / chunk.len() as f64)?;
                if !loss.is_finite() {
                    return Err(Error::non_finite(stage, step));
                }
                total += loss * chunk.len() as f64;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            adam.update(&mut model.params, &grad);
            step += 1;
        }
        let mean = total / n_data as f64;
        log::debug!("{stage} epoch {epoch}: loss {mean:.5}");
        trace.push(mean);
    }
    Ok((model, trace))
}

/// Fits the noise-prediction objective `‖ε − ε_θ(y_t, t, γ·c)‖²`;
/// returns the model and the mean loss of every epoch.
pub fn train_epsilon(model: TinyNet, data: &[Array2<f64>], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<(TinyNet, Vec<f64>)> {
    cfg.validate(data.len())?;
    let cin = model.in_channels();
    if cin > 2 {
        return Err(Error::invalid("noise model takes one or two input channels"));
    }
    fit(model, data.len(), cfg, "train-epsilon", |i, rng| draw_epsilon_sample(&data[i], cin, sched, cfg, rng))
}

/// Fits `σ²‖s_θ(x + σz, t) + z/σ‖²` with `t ~ U(0, 1)`.
pub fn train_score(model: TinyNet, data: &[Array2<f64>], ve: &VeSchedule, cfg: &TrainConfig) -> Result<(TinyNet, Vec<f64>)> {
    cfg.validate(data.len())?;
    ve.validate()?;
    if model.in_channels() != 1 {
        return Err(Error::invalid("score model takes one input channel"));
    }
    fit(model, data.len(), cfg, "train-score", |i, rng| Ok(draw_score_sample(&data[i], ve, rng)))
}

/// Noise predictor backed by a network; a two-channel network is
/// conditional and combines its two predictions with weight `omega`.
pub struct NetDenoiser {
    pub net: TinyNet,
    pub omega: f64,
}

impl Denoiser for NetDenoiser {
    fn name(&self) -> &str {
        "tinynet"
    }

    fn conditional(&self) -> bool {
        self.net.conditional()
    }

    fn predict_eps(&self, yt: &Array2<f64>, t: usize, sched: &NoiseSchedule, condition: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        sched.check_step(t)?;
        let time = t as f64 / sched.steps() as f64;
        if !self.net.conditional() {
            return self.net.forward(&stack(&[yt]), time);
        }
        let zero = Array2::zeros(yt.dim());
        let uncond = self.net.forward(&stack(&[yt, &zero]), time)?;
        match condition {
            Some(c) => {
                check_shape(yt.dim(), c.dim())?;
                let cond = self.net.forward(&stack(&[yt, c]), time)?;
                cfg_combine(&cond, &uncond, self.omega)
            }
            None => Ok(uncond),
        }
    }
}

pub struct NetScore {
    pub net: TinyNet,
    pub ve: VeSchedule,
}

impl ScoreModel for NetScore {
    fn name(&self) -> &str {
        "tinynet"
    }

    fn score(&self, y: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let out = self.net.forward(&stack(&[y]), t)?;
        Ok(out / self.ve.sigma(t))
    }
}
