//! Model parameters and the forward pass.
//!
//! Each direction runs a shared-weight recurrent cell over its lattice DAG:
//!
//! ```text
//! hhat(v) = sum over predecessors p of G(S h(p) + a)    (zero when no preds)
//! h(v)    = H(U x(v) + V hhat(v) + b)
//! ```
//!
//! The nonlinearity `G` is applied per predecessor, before the sum. The four
//! sink features are concatenated (southeast, southwest, northeast,
//! northwest), passed through inverted dropout, a ReLU layer, dropout again,
//! a linear layer, and a numerically stable softmax.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::data::{extract_patch, HsiCube, NormStats, Patch};
use crate::graph::{Connectivity, DagSet, DagTopology, Direction, PatchDecomposition};
use crate::linalg::Mat;
use crate::rng::{stream_rng, STREAM_INIT};
use crate::{Error, Result};

/// Pointwise nonlinearity. Derivatives are recovered from the activation
/// output, which every supported kind permits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation, expressed through the
    /// activation output `y`.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Model hyperparameters. `memory_length` is the window side `m`; the full
/// patch side is `2m - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub memory_length: usize,
    pub connectivity: Connectivity,
    pub bands: usize,
    pub hidden: usize,
    pub fc1: usize,
    pub classes: usize,
    pub dropout: f64,
    pub recurrent_activation: Activation,
    pub fc_activation: Activation,
}

impl ModelConfig {
    /// Config with the reference hyperparameters (128 hidden units, 128-wide
    /// first FC layer, dropout 0.4, tanh recurrence, ReLU head).
    pub fn with_defaults(
        memory_length: usize,
        connectivity: Connectivity,
        bands: usize,
        classes: usize,
    ) -> Self {
        ModelConfig {
            memory_length,
            connectivity,
            bands,
            hidden: 128,
            fc1: 128,
            classes,
            dropout: 0.4,
            recurrent_activation: Activation::Tanh,
            fc_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory_length == 0
            || self.bands == 0
            || self.hidden == 0
            || self.fc1 == 0
            || self.classes == 0
        {
            return Err(Error::invalid("model dimensions must all be at least 1"));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Side of the full image patch this model consumes.
    pub fn patch_side(&self) -> usize {
        2 * self.memory_length - 1
    }

    /// Length of the fused feature vector (four sink features).
    pub fn fused_len(&self) -> usize {
        4 * self.hidden
    }

    /// Closed-form scalar parameter count.
    pub fn param_count(&self) -> usize {
        let (h, b, f1, c) = (self.hidden, self.bands, self.fc1, self.classes);
        4 * (h * h + h * b + h * h + 2 * h) + f1 * 4 * h + f1 + c * f1 + c
    }
}

/// Recurrent parameters of one direction, shared across all vertices of that
/// direction's DAG.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams {
    /// `H x H`, applied to each predecessor's hidden state.
    pub s: Mat,
    /// `H x B`, applied to the vertex's spectrum.
    pub u: Mat,
    /// `H x H`, applied to the aggregated predecessor feature.
    pub v: Mat,
    /// Bias inside the per-predecessor nonlinearity, length `H`.
    pub a: Vec<f64>,
    /// Bias of the hidden state, length `H`.
    pub b: Vec<f64>,
}

impl DirectionParams {
    pub fn zeros(hidden: usize, bands: usize) -> Self {
        DirectionParams {
            s: Mat::zeros(hidden, hidden),
            u: Mat::zeros(hidden, bands),
            v: Mat::zeros(hidden, hidden),
            a: vec![0.0; hidden],
            b: vec![0.0; hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.s.rows()
    }

    pub fn bands(&self) -> usize {
        self.u.cols()
    }
}

/// The two fully-connected layers on top of the fused feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `F1 x 4H`.
    pub w1: Mat,
    /// Length `F1`.
    pub c1: Vec<f64>,
    /// `C x F1`.
    pub w2: Mat,
    /// Length `C`.
    pub c2: Vec<f64>,
}

impl ClassifierParams {
    pub fn zeros(fc1: usize, fused: usize, classes: usize) -> Self {
        ClassifierParams {
            w1: Mat::zeros(fc1, fused),
            c1: vec![0.0; fc1],
            w2: Mat::zeros(classes, fc1),
            c2: vec![0.0; classes],
        }
    }
}

/// All trainable parameters: one recurrent set per direction plus the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Indexed by [`Direction::index`].
    pub directions: [DirectionParams; 4],
    pub head: ClassifierParams,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let dir = || DirectionParams::zeros(config.hidden, config.bands);
        ModelParams {
            directions: [dir(), dir(), dir(), dir()],
            head: ClassifierParams::zeros(config.fc1, config.fused_len(), config.classes),
        }
    }

    pub fn direction(&self, d: Direction) -> &DirectionParams {
        &self.directions[d.index()]
    }

    /// Flat view of every tensor, in the canonical layout order (directions
    /// southeast..northwest each `s, u, v, a, b`, then `head.w1, c1, w2, c2`).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(24);
        for (d, p) in Direction::ALL.iter().zip(&self.directions) {
            let n = d.name();
            out.push((format!("{n}.s"), p.s.data()));
            out.push((format!("{n}.u"), p.u.data()));
            out.push((format!("{n}.v"), p.v.data()));
            out.push((format!("{n}.a"), p.a.as_slice()));
            out.push((format!("{n}.b"), p.b.as_slice()));
        }
        out.push((String::from("head.w1"), self.head.w1.data()));
        out.push((String::from("head.c1"), self.head.c1.as_slice()));
        out.push((String::from("head.w2"), self.head.w2.data()));
        out.push((String::from("head.c2"), self.head.c2.as_slice()));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(24);
        for (d, p) in Direction::ALL.iter().zip(&mut self.directions) {
            let n = d.name();
            out.push((format!("{n}.s"), p.s.data_mut()));
            out.push((format!("{n}.u"), p.u.data_mut()));
            out.push((format!("{n}.v"), p.v.data_mut()));
            out.push((format!("{n}.a"), p.a.as_mut_slice()));
            out.push((format!("{n}.b"), p.b.as_mut_slice()));
        }
        out.push((String::from("head.w1"), self.head.w1.data_mut()));
        out.push((String::from("head.c1"), self.head.c1.as_mut_slice()));
        out.push((String::from("head.w2"), self.head.w2.data_mut()));
        out.push((String::from("head.c2"), self.head.c2.as_mut_slice()));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (h, b) = (config.hidden, config.bands);
        for (d, p) in Direction::ALL.iter().zip(&self.directions) {
            let ok = p.s.rows() == h
                && p.s.cols() == h
                && p.u.rows() == h
                && p.u.cols() == b
                && p.v.rows() == h
                && p.v.cols() == h
                && p.a.len() == h
                && p.b.len() == h;
            if !ok {
                return Err(Error::shape(format!(
                    "direction {} parameters do not match hidden={h}, bands={b}",
                    d.name()
                )));
            }
        }
        let head = &self.head;
        let ok = head.w1.rows() == config.fc1
            && head.w1.cols() == config.fused_len()
            && head.c1.len() == config.fc1
            && head.w2.rows() == config.classes
            && head.w2.cols() == config.fc1
            && head.c2.len() == config.classes;
        if !ok {
            return Err(Error::shape(format!(
                "classifier parameters do not match fc1={}, classes={}",
                config.fc1, config.classes
            )));
        }
        Ok(())
    }
}

/// Draws each weight matrix uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// and zeroes every bias. Deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut fill = |mat: &mut Mat| {
        let bound = 1.0 / libm::sqrt(mat.cols() as f64);
        for w in mat.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
    };
    let mut params = ModelParams::zeros(config);
    for p in &mut params.directions {
        fill(&mut p.s);
        fill(&mut p.u);
        fill(&mut p.v);
    }
    fill(&mut params.head.w1);
    fill(&mut params.head.w2);
    Ok(params)
}

/// Zero-copy view of one direction's `m x m` window inside a patch.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    patch: &'a Patch,
    row_off: usize,
    col_off: usize,
    m: usize,
}

impl<'a> Window<'a> {
    pub fn new(
        patch: &'a Patch,
        decomp: &PatchDecomposition,
        direction: Direction,
    ) -> Result<Window<'a>> {
        if patch.n != decomp.n {
            return Err(Error::shape(format!(
                "patch side {} does not match decomposition side {}",
                patch.n, decomp.n
            )));
        }
        let (row_off, col_off) = decomp.window_offset(direction);
        Ok(Window {
            patch,
            row_off,
            col_off,
            m: decomp.m,
        })
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn bands(&self) -> usize {
        self.patch.bands
    }

    /// Spectrum at window-local coordinates.
    #[inline]
    pub fn spectrum(&self, row: usize, col: usize) -> &[f64] {
        self.patch.spectrum(self.row_off + row, self.col_off + col)
    }
}

/// Per-vertex activations of one direction, indexed by vertex id
/// (`row * m + col`). `pred_acts[v][k]` is the per-predecessor nonlinearity
/// output `G(S h(p_k) + a)` aligned with the DAG's predecessor list, kept for
/// the backward pass.
#[derive(Debug, Clone)]
pub struct DirectionTrace {
    pub hhat: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub pred_acts: Vec<Vec<Vec<f64>>>,
}

impl DirectionTrace {
    pub fn sink_h<'a>(&'a self, dag: &DagTopology) -> &'a [f64] {
        &self.h[dag.vertex_id(dag.sink.0, dag.sink.1)]
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub directions: [DirectionTrace; 4],
    /// Concatenated sink features before dropout, length `4H`.
    pub fused: Vec<f64>,
    /// Inverted-dropout scale factors (0 or `1/(1-p)`); `None` in eval mode
    /// or when `p = 0`.
    pub fused_mask: Option<Vec<f64>>,
    pub fused_dropped: Vec<f64>,
    pub fc1_pre: Vec<f64>,
    pub fc1_post: Vec<f64>,
    pub fc1_mask: Option<Vec<f64>>,
    pub fc1_dropped: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Forward mode: eval is deterministic; train samples dropout masks from the
/// supplied generator.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut dyn RngCore },
}

/// Evaluates one direction's recurrence over its DAG in topological order.
pub fn forward_direction(
    params: &DirectionParams,
    dag: &DagTopology,
    window: &Window<'_>,
    activation: Activation,
) -> Result<DirectionTrace> {
    if window.m() != dag.m {
        return Err(Error::shape(format!(
            "window side {} does not match DAG side {}",
            window.m(),
            dag.m
        )));
    }
    if params.bands() != window.bands() {
        return Err(Error::shape(format!(
            "input weights expect {} bands, window has {}",
            params.bands(),
            window.bands()
        )));
    }
    let hidden = params.hidden();
    let count = dag.vertex_count();
    let mut trace = DirectionTrace {
        hhat: vec![Vec::new(); count],
        h: vec![Vec::new(); count],
        pred_acts: vec![Vec::new(); count],
    };
    let mut pre = vec![0.0; hidden];
    for &(i, j) in &dag.order {
        let vid = dag.vertex_id(i, j);
        let preds = &dag.preds[vid];
        let mut hhat = vec![0.0; hidden];
        let mut acts = Vec::with_capacity(preds.len());
        for &(pi, pj) in preds {
            let hp = &trace.h[dag.vertex_id(pi, pj)];
            params.s.matvec(hp, &mut pre);
            let g: Vec<f64> = pre
                .iter()
                .zip(&params.a)
                .map(|(z, a)| activation.apply(z + a))
                .collect();
            for (acc, gi) in hhat.iter_mut().zip(&g) {
                *acc += gi;
            }
            acts.push(g);
        }
        params.u.matvec(window.spectrum(i, j), &mut pre);
        params.v.matvec_add(&hhat, &mut pre);
        let h: Vec<f64> = pre
            .iter()
            .zip(&params.b)
            .map(|(z, b)| activation.apply(z + b))
            .collect();
        trace.hhat[vid] = hhat;
        trace.h[vid] = h;
        trace.pred_acts[vid] = acts;
    }
    Ok(trace)
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| libm::exp(l - max)).sum();
    max + libm::log(sum)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sample_mask(len: usize, p: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                scale
            }
        })
        .collect()
}

fn apply_mask(x: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(v, f)| v * f).collect(),
        None => x.to_vec(),
    }
}

/// Full forward pass: four directional recurrences, feature fusion, dropout,
/// two fully-connected layers, and softmax.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    patch: &Patch,
    decomp: &PatchDecomposition,
    dags: &DagSet,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    config.validate()?;
    params.check_shapes(config)?;
    if patch.n != config.patch_side() || patch.n != decomp.n {
        return Err(Error::shape(format!(
            "patch side {} does not match model patch side {} / decomposition {}",
            patch.n,
            config.patch_side(),
            decomp.n
        )));
    }
    if patch.bands != config.bands {
        return Err(Error::shape(format!(
            "patch has {} bands, model expects {}",
            patch.bands, config.bands
        )));
    }
    if dags.m() != config.memory_length || dags.connectivity() != config.connectivity {
        return Err(Error::shape(
            "DAG set does not match the model's memory length or connectivity",
        ));
    }

    let run = |direction: Direction| -> Result<DirectionTrace> {
        let window = Window::new(patch, decomp, direction)?;
        forward_direction(
            params.direction(direction),
            dags.get(direction),
            &window,
            config.recurrent_activation,
        )
    };
    let directions = [
        run(Direction::Southeast)?,
        run(Direction::Southwest)?,
        run(Direction::Northeast)?,
        run(Direction::Northwest)?,
    ];

    let mut fused = Vec::with_capacity(config.fused_len());
    for (trace, d) in directions.iter().zip(Direction::ALL) {
        fused.extend_from_slice(trace.sink_h(dags.get(d)));
    }

    let p = config.dropout;
    let (fused_mask, fc1_mask) = match mode {
        Mode::Train { rng } if p > 0.0 => (
            Some(sample_mask(fused.len(), p, rng)),
            Some(sample_mask(config.fc1, p, rng)),
        ),
        _ => (None, None),
    };

    let fused_dropped = apply_mask(&fused, fused_mask.as_ref());

    let mut fc1_pre = params.head.c1.clone();
    params.head.w1.matvec_add(&fused_dropped, &mut fc1_pre);
    let fc1_post: Vec<f64> = fc1_pre
        .iter()
        .map(|&z| config.fc_activation.apply(z))
        .collect();
    let fc1_dropped = apply_mask(&fc1_post, fc1_mask.as_ref());

    let mut logits = params.head.c2.clone();
    params.head.w2.matvec_add(&fc1_dropped, &mut logits);
    let probabilities = softmax(&logits);

    Ok(ForwardTrace {
        directions,
        fused,
        fused_mask,
        fused_dropped,
        fc1_pre,
        fc1_post,
        fc1_mask,
        fc1_dropped,
        logits,
        probabilities,
    })
}

/// Cross-entropy of the target class, computed in fused log-softmax form.
pub fn loss(trace: &ForwardTrace, target: u16) -> Result<f64> {
    let classes = trace.logits.len();
    if target == 0 || target as usize > classes {
        return Err(Error::ClassOutOfRange {
            class: target,
            classes,
        });
    }
    Ok(log_sum_exp(&trace.logits) - trace.logits[target as usize - 1])
}

/// Most probable class (1-based); ties break toward the lowest index.
pub fn predict(trace: &ForwardTrace) -> u16 {
    let mut best = 0usize;
    for (i, &p) in trace.probabilities.iter().enumerate() {
        if p > trace.probabilities[best] {
            best = i;
        }
    }
    (best + 1) as u16
}

/// Classifies a single cube pixel: patch extraction, eval-mode forward,
/// argmax.
pub fn predict_pixel(
    params: &ModelParams,
    config: &ModelConfig,
    cube: &HsiCube,
    stats: &NormStats,
    decomp: &PatchDecomposition,
    dags: &DagSet,
    row: usize,
    col: usize,
) -> Result<u16> {
    let patch = extract_patch(cube, stats, row, col, config.patch_side())?;
    let trace = forward(params, config, &patch, decomp, dags, Mode::Eval)?;
    Ok(predict(&trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_dag, decompose_patch};
    use proptest::prelude::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            memory_length: 2,
            connectivity: Connectivity::Eight,
            bands: 3,
            hidden: 4,
            fc1: 5,
            classes: 3,
            dropout: 0.0,
            recurrent_activation: Activation::Tanh,
            fc_activation: Activation::Relu,
        }
    }

    fn random_patch(config: &ModelConfig, seed: u64) -> Patch {
        let n = config.patch_side();
        let mut rng = stream_rng(seed, 11);
        let values = (0..n * n * config.bands)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Patch {
            n,
            bands: config.bands,
            values,
            center_label: 0,
        }
    }

    fn empty_head_trace(probabilities: Vec<f64>, logits: Vec<f64>) -> ForwardTrace {
        ForwardTrace {
            directions: [(); 4].map(|_| DirectionTrace {
                hhat: vec![],
                h: vec![],
                pred_acts: vec![],
            }),
            fused: vec![],
            fused_mask: None,
            fused_dropped: vec![],
            fc1_pre: vec![],
            fc1_post: vec![],
            fc1_mask: None,
            fc1_dropped: vec![],
            logits,
            probabilities,
        }
    }

    #[test]
    fn init_is_deterministic_and_zero_biased() {
        let config = small_config();
        let a = init_params(&config, 7).unwrap();
        let b = init_params(&config, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&config, 8).unwrap();
        assert_ne!(a, c);
        for p in &a.directions {
            assert!(p.a.iter().all(|&v| v == 0.0));
            assert!(p.b.iter().all(|&v| v == 0.0));
        }
        assert!(a.head.c1.iter().all(|&v| v == 0.0));
        assert!(a.head.c2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let config = small_config();
        let params = init_params(&config, 3).unwrap();
        for p in &params.directions {
            let bound_h = 1.0 / libm::sqrt(config.hidden as f64);
            let bound_b = 1.0 / libm::sqrt(config.bands as f64);
            assert!(p.s.data().iter().all(|w| w.abs() <= bound_h));
            assert!(p.v.data().iter().all(|w| w.abs() <= bound_h));
            assert!(p.u.data().iter().all(|w| w.abs() <= bound_b));
        }
    }

    #[test]
    fn param_count_matches_enumeration() {
        let config = ModelConfig {
            memory_length: 4,
            connectivity: Connectivity::Eight,
            bands: 200,
            hidden: 128,
            fc1: 128,
            classes: 16,
            dropout: 0.4,
            recurrent_activation: Activation::Tanh,
            fc_activation: Activation::Relu,
        };
        let params = ModelParams::zeros(&config);
        assert_eq!(params.scalar_count(), config.param_count());
        assert_eq!(ModelParams::zeros(&small_config()).scalar_count(),
            small_config().param_count());
    }

    #[test]
    fn single_vertex_direction_skips_the_recurrent_term() {
        let config = small_config();
        let params = init_params(&config, 5).unwrap();
        let dag = build_dag(1, Direction::Southeast, Connectivity::Eight).unwrap();
        let patch = Patch {
            n: 1,
            bands: 3,
            values: vec![0.3, -0.7, 1.1],
            center_label: 0,
        };
        let decomp = decompose_patch(1).unwrap();
        let window = Window::new(&patch, &decomp, Direction::Southeast).unwrap();
        let d = &params.directions[0];
        let trace = forward_direction(d, &dag, &window, Activation::Tanh).unwrap();
        assert!(trace.hhat[0].iter().all(|&v| v == 0.0));
        // Independent scalar recomputation of H(U x + b).
        for r in 0..config.hidden {
            let mut z = d.b[r];
            for (c, x) in patch.values.iter().enumerate() {
                z += d.u.at(r, c) * x;
            }
            assert_eq!(trace.h[0][r], libm::tanh(z));
        }
    }

    #[test]
    fn zero_params_propagate_zero_hidden_states() {
        let config = small_config();
        let params = ModelParams::zeros(&config);
        let patch = random_patch(&config, 1);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let window = Window::new(&patch, &decomp, Direction::Northwest).unwrap();
        let trace = forward_direction(
            &params.directions[3],
            dags.get(Direction::Northwest),
            &window,
            Activation::Tanh,
        )
        .unwrap();
        assert!(trace.h.iter().flatten().all(|&v| v == 0.0));
    }

    /// Scalar-by-scalar recomputation of a 2x2 southeast recurrence, written
    /// independently of the matrix code path.
    #[test]
    fn two_by_two_matches_scalar_recomputation() {
        let params = DirectionParams {
            s: Mat::from_vec(2, 2, vec![0.5, -0.25, 0.1, 0.8]).unwrap(),
            u: Mat::from_vec(2, 1, vec![1.5, -0.5]).unwrap(),
            v: Mat::from_vec(2, 2, vec![0.3, 0.6, -0.2, 0.4]).unwrap(),
            a: vec![0.05, -0.1],
            b: vec![0.2, 0.0],
        };
        let patch = Patch {
            n: 3,
            bands: 1,
            values: vec![0.9, -0.3, 0.5, 0.1, -0.8, 0.25, 0.0, 0.7, -0.6],
            center_label: 0,
        };
        let decomp = decompose_patch(3).unwrap();
        let dag = build_dag(2, Direction::Southeast, Connectivity::Eight).unwrap();
        let window = Window::new(&patch, &decomp, Direction::Southeast).unwrap();
        let trace = forward_direction(&params, &dag, &window, Activation::Tanh).unwrap();

        let tanh = libm::tanh;
        let g = |h: &[f64], r: usize| {
            tanh(params.s.at(r, 0) * h[0] + params.s.at(r, 1) * h[1] + params.a[r])
        };
        let x = |i: usize, j: usize| window.spectrum(i, j)[0];
        let h_of = |hhat: [f64; 2], xv: f64| {
            let mut out = [0.0; 2];
            for (r, o) in out.iter_mut().enumerate() {
                *o = tanh(
                    params.u.at(r, 0) * xv
                        + params.v.at(r, 0) * hhat[0]
                        + params.v.at(r, 1) * hhat[1]
                        + params.b[r],
                );
            }
            out
        };

        let h00 = h_of([0.0, 0.0], x(0, 0));
        let h01 = h_of([g(&h00, 0), g(&h00, 1)], x(0, 1));
        let h10 = h_of([g(&h00, 0), g(&h00, 1)], x(1, 0));
        let hhat11 = [
            g(&h00, 0) + g(&h01, 0) + g(&h10, 0),
            g(&h00, 1) + g(&h01, 1) + g(&h10, 1),
        ];
        let h11 = h_of(hhat11, x(1, 1));

        let close = |got: &[f64], want: &[f64]| {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-15, "{g} vs {w}");
            }
        };
        close(trace.sink_h(&dag), &h11);
        close(&trace.h[dag.vertex_id(0, 1)], &h01);
        close(&trace.h[dag.vertex_id(1, 0)], &h10);
    }

    #[test]
    fn forward_under_an_alternate_topological_order_is_identical() {
        let config = small_config();
        let params = init_params(&config, 21).unwrap();
        let patch = random_patch(&config, 22);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dag =
            build_dag(config.memory_length, Direction::Southeast, config.connectivity).unwrap();
        // Column-major is also topological for the southeast rule.
        let mut alt = dag.clone();
        alt.order = (0..dag.m)
            .flat_map(|j| (0..dag.m).map(move |i| (i, j)))
            .collect();
        assert!(crate::graph::validate_topology(&alt));

        let window = Window::new(&patch, &decomp, Direction::Southeast).unwrap();
        let a = forward_direction(&params.directions[0], &dag, &window, Activation::Tanh).unwrap();
        let b = forward_direction(&params.directions[0], &alt, &window, Activation::Tanh).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.hhat, b.hhat);
    }

    #[test]
    fn zero_params_give_exactly_uniform_probabilities() {
        let config = small_config();
        let params = ModelParams::zeros(&config);
        let patch = random_patch(&config, 2);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let trace = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        let uniform = 1.0 / config.classes as f64;
        for &p in &trace.probabilities {
            assert_eq!(p, uniform);
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let config = small_config();
        let params = init_params(&config, 4).unwrap();
        let patch = random_patch(&config, 3);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let a = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        let b = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn train_mode_without_dropout_equals_eval_mode() {
        let config = small_config();
        let params = init_params(&config, 4).unwrap();
        let patch = random_patch(&config, 3);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let mut rng = stream_rng(9, 2);
        let train = forward(
            &params,
            &config,
            &patch,
            &decomp,
            &dags,
            Mode::Train { rng: &mut rng },
        )
        .unwrap();
        let eval = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        assert_eq!(train.logits, eval.logits);
        assert_eq!(train.probabilities, eval.probabilities);
        assert!(train.fused_mask.is_none());
    }

    #[test]
    fn dropout_masks_scale_by_keep_probability() {
        let mut config = small_config();
        config.dropout = 0.4;
        let params = init_params(&config, 4).unwrap();
        let patch = random_patch(&config, 3);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let mut rng = stream_rng(9, 2);
        let trace = forward(
            &params,
            &config,
            &patch,
            &decomp,
            &dags,
            Mode::Train { rng: &mut rng },
        )
        .unwrap();
        let mask = trace.fused_mask.as_ref().unwrap();
        let scale = 1.0 / 0.6;
        assert!(mask.iter().all(|&f| f == 0.0 || (f - scale).abs() < 1e-15));
        for ((d, f), m) in trace.fused_dropped.iter().zip(&trace.fused).zip(mask) {
            assert_eq!(*d, f * m);
        }
    }

    #[test]
    fn sink_features_form_the_fused_vector() {
        let config = small_config();
        let params = init_params(&config, 12).unwrap();
        let patch = random_patch(&config, 13);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let trace = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        let h = config.hidden;
        for (k, d) in Direction::ALL.into_iter().enumerate() {
            let sink = trace.directions[k].sink_h(dags.get(d));
            assert_eq!(&trace.fused[k * h..(k + 1) * h], sink);
        }
    }

    #[test]
    fn loss_of_uniform_probabilities_is_log_class_count() {
        let config = small_config();
        let params = ModelParams::zeros(&config);
        let patch = random_patch(&config, 2);
        let decomp = decompose_patch(config.patch_side()).unwrap();
        let dags = DagSet::build(config.memory_length, config.connectivity).unwrap();
        let trace = forward(&params, &config, &patch, &decomp, &dags, Mode::Eval).unwrap();
        let want = libm::log(config.classes as f64);
        for target in 1..=config.classes as u16 {
            let l = loss(&trace, target).unwrap();
            assert!((l - want).abs() < 1e-12);
        }
        assert!(matches!(loss(&trace, 0), Err(Error::ClassOutOfRange { .. })));
        assert!(matches!(loss(&trace, 4), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn loss_matches_direct_softmax_arithmetic() {
        let trace = empty_head_trace(softmax(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        // Direct route: -log(exp(3) / (exp(1) + exp(2) + exp(3))).
        let direct =
            -libm::log(libm::exp(3.0) / (libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0)));
        let fused_form = loss(&trace, 3).unwrap();
        assert!((fused_form - direct).abs() < 1e-12);
        assert!((fused_form - 0.40760596444438079).abs() < 1e-15);
    }

    #[test]
    fn predict_takes_the_argmax_and_breaks_ties_low() {
        let trace = empty_head_trace(vec![0.2, 0.5, 0.3], vec![]);
        assert_eq!(predict(&trace), 2);
        let tied = empty_head_trace(vec![0.5, 0.5], vec![]);
        assert_eq!(predict(&tied), 1);
    }

    proptest! {
        #[test]
        fn softmax_outputs_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..8)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let base = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|&l| l + shift).collect();
            let moved = softmax(&shifted);
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_of_probabilities_matches_argmax_of_logits(
            logits in prop::collection::vec(-20.0f64..20.0, 1..8),
        ) {
            let p = softmax(&logits);
            let argmax = |xs: &[f64]| {
                let mut best = 0usize;
                for (i, &v) in xs.iter().enumerate() {
                    if v > xs[best] {
                        best = i;
                    }
                }
                best
            };
            prop_assert_eq!(argmax(&logits), argmax(&p));
        }
    }
}
