//! Training: exact backpropagation through the DAG structure, a central
//! finite-difference gradient oracle, SGD with momentum, and the epoch loop.
//!
//! The backward pass walks each direction's DAG in reverse topological
//! order. The gradient at a vertex's hidden state accumulates one
//! contribution per successor (through that successor's per-predecessor
//! nonlinearity), and the shared `S, U, V, a, b` gradients accumulate over
//! every vertex of the direction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{extract_labeled_patch, fit_normalizer, HsiCube, LabelMap, NormStats, Patch};
use crate::graph::{DagSet, DagTopology, Direction, PatchDecomposition};
use crate::model::{
    forward, loss, Activation, DirectionParams, DirectionTrace, ForwardTrace, Mode, ModelConfig,
    ModelParams, Window,
};
use crate::rng::{stream_rng, STREAM_DROPOUT, STREAM_GRADCHECK, STREAM_SHUFFLE};
use crate::{Error, Result};

/// Gradient of the loss with respect to every parameter; shape-congruent
/// with [`ModelParams`].
pub type GradBuffer = ModelParams;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, shape-congruent with the parameters and zero at start.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub velocity: ModelParams,
}

impl OptimState {
    pub fn zeros(config: &ModelConfig) -> Self {
        OptimState {
            velocity: ModelParams::zeros(config),
        }
    }
}

fn congruent(a: &ModelParams, b: &ModelParams) -> bool {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .all(|((_, x), (_, y))| x.len() == y.len())
}

/// `dst += src`, elementwise over every tensor.
pub fn accumulate(dst: &mut ModelParams, src: &ModelParams) {
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        debug_assert_eq!(d.len(), s.len());
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

/// Scales every tensor of `params` by `factor`.
pub fn scale(params: &mut ModelParams, factor: f64) {
    for (_, t) in params.tensors_mut() {
        for v in t {
            *v *= factor;
        }
    }
}

/// Backward pass for one direction. `sink_grad` is the loss gradient at the
/// direction's sink feature; the returned structure holds the gradients of
/// `S, U, V, a, b` accumulated over every vertex.
pub fn backward_direction(
    params: &DirectionParams,
    dag: &DagTopology,
    window: &Window<'_>,
    trace: &DirectionTrace,
    activation: Activation,
    sink_grad: &[f64],
) -> Result<DirectionParams> {
    let hidden = params.hidden();
    if sink_grad.len() != hidden {
        return Err(Error::shape(format!(
            "sink gradient has length {}, hidden size is {hidden}",
            sink_grad.len()
        )));
    }
    if trace.h.len() != dag.vertex_count() {
        return Err(Error::shape("trace does not match the DAG's vertex count"));
    }

    let mut grads = DirectionParams::zeros(hidden, params.bands());
    let mut dh = vec![vec![0.0; hidden]; dag.vertex_count()];
    let sink_id = dag.vertex_id(dag.sink.0, dag.sink.1);
    dh[sink_id].copy_from_slice(sink_grad);

    let mut dpre = vec![0.0; hidden];
    let mut dhhat = vec![0.0; hidden];
    for &(i, j) in dag.order.iter().rev() {
        let vid = dag.vertex_id(i, j);
        // All successors appear later in the order, so dh[vid] is complete.
        let dh_v = core::mem::take(&mut dh[vid]);
        let h_v = &trace.h[vid];
        for ((dp, dhv), hv) in dpre.iter_mut().zip(&dh_v).zip(h_v) {
            *dp = dhv * activation.grad_from_output(*hv);
        }
        for (gb, dp) in grads.b.iter_mut().zip(&dpre) {
            *gb += dp;
        }
        grads.u.add_outer(&dpre, window.spectrum(i, j));
        grads.v.add_outer(&dpre, &trace.hhat[vid]);

        dhhat.iter_mut().for_each(|v| *v = 0.0);
        params.v.tr_matvec_add(&dpre, &mut dhhat);

        for (k, &(pi, pj)) in dag.preds[vid].iter().enumerate() {
            let g = &trace.pred_acts[vid][k];
            // The same dhhat feeds every predecessor term of the sum.
            let dpre_g: Vec<f64> = dhhat
                .iter()
                .zip(g)
                .map(|(dv, gv)| dv * activation.grad_from_output(*gv))
                .collect();
            for (ga, dp) in grads.a.iter_mut().zip(&dpre_g) {
                *ga += dp;
            }
            let pid = dag.vertex_id(pi, pj);
            grads.s.add_outer(&dpre_g, &trace.h[pid]);
            params.s.tr_matvec_add(&dpre_g, &mut dh[pid]);
        }
    }
    Ok(grads)
}

/// Exact gradient of the cross-entropy loss with respect to every parameter.
/// Uses the activations and dropout masks stored in `trace`; the gradients
/// are exact for the sampled network.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    target: u16,
    patch: &Patch,
    decomp: &PatchDecomposition,
    dags: &DagSet,
) -> Result<GradBuffer> {
    params.check_shapes(config)?;
    if target == 0 || target as usize > config.classes {
        return Err(Error::ClassOutOfRange {
            class: target,
            classes: config.classes,
        });
    }
    if trace.logits.len() != config.classes
        || trace.fused.len() != config.fused_len()
        || trace.fc1_pre.len() != config.fc1
    {
        return Err(Error::shape("trace does not match the model config"));
    }

    let mut grads = ModelParams::zeros(config);

    // Softmax cross-entropy: dlogits = probabilities - onehot(target).
    let mut dlogits = trace.probabilities.clone();
    dlogits[target as usize - 1] -= 1.0;

    for (gc, dl) in grads.head.c2.iter_mut().zip(&dlogits) {
        *gc += dl;
    }
    grads.head.w2.add_outer(&dlogits, &trace.fc1_dropped);
    let mut dfc1_dropped = vec![0.0; config.fc1];
    params.head.w2.tr_matvec_add(&dlogits, &mut dfc1_dropped);

    let dfc1_post: Vec<f64> = match &trace.fc1_mask {
        Some(mask) => dfc1_dropped.iter().zip(mask).map(|(d, m)| d * m).collect(),
        None => dfc1_dropped,
    };
    let dfc1_pre: Vec<f64> = dfc1_post
        .iter()
        .zip(&trace.fc1_post)
        .map(|(d, y)| d * config.fc_activation.grad_from_output(*y))
        .collect();

    for (gc, dp) in grads.head.c1.iter_mut().zip(&dfc1_pre) {
        *gc += dp;
    }
    grads.head.w1.add_outer(&dfc1_pre, &trace.fused_dropped);
    let mut dfused_dropped = vec![0.0; config.fused_len()];
    params.head.w1.tr_matvec_add(&dfc1_pre, &mut dfused_dropped);

    let dfused: Vec<f64> = match &trace.fused_mask {
        Some(mask) => dfused_dropped.iter().zip(mask).map(|(d, m)| d * m).collect(),
        None => dfused_dropped,
    };

    let h = config.hidden;
    for (k, direction) in Direction::ALL.into_iter().enumerate() {
        let window = Window::new(patch, decomp, direction)?;
        grads.directions[k] = backward_direction(
            params.direction(direction),
            dags.get(direction),
            &window,
            &trace.directions[k],
            config.recurrent_activation,
            &dfused[k * h..(k + 1) * h],
        )?;
    }
    Ok(grads)
}

/// Central finite-difference gradient of the loss, one scalar parameter at a
/// time: `(loss(p + step) - loss(p - step)) / (2 step)`. Requires a
/// deterministic loss, hence dropout 0.
pub fn finite_diff_grad(
    params: &ModelParams,
    config: &ModelConfig,
    patch: &Patch,
    target: u16,
    decomp: &PatchDecomposition,
    dags: &DagSet,
    step: f64,
) -> Result<GradBuffer> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if config.dropout != 0.0 {
        return Err(Error::invalid(
            "finite differences need a deterministic loss; set dropout to 0",
        ));
    }

    let loss_of = |p: &ModelParams| -> Result<f64> {
        let trace = forward(p, config, patch, decomp, dags, Mode::Eval)?;
        loss(&trace, target)
    };

    let mut work = params.clone();
    let mut grads = ModelParams::zeros(config);
    let tensor_count = work.tensors().len();
    for ti in 0..tensor_count {
        let len = work.tensors()[ti].1.len();
        for k in 0..len {
            let original = work.tensors()[ti].1[k];
            work.tensors_mut()[ti].1[k] = original + step;
            let plus = loss_of(&work)?;
            work.tensors_mut()[ti].1[k] = original - step;
            let minus = loss_of(&work)?;
            work.tensors_mut()[ti].1[k] = original;
            grads.tensors_mut()[ti].1[k] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Applies one SGD-with-momentum update in place:
/// `velocity <- momentum * velocity + grads; params <- params - lr * velocity`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradBuffer,
    state: &mut OptimState,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    if !congruent(params, grads) || !congruent(params, &state.velocity) {
        return Err(Error::shape(
            "parameters, gradients, and momentum buffers are not shape-congruent",
        ));
    }
    let lr = config.learning_rate;
    let mu = config.momentum;
    for (((_, p), (_, g)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
    {
        for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Per-tensor result of a gradient check.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Mixed relative error per tensor: `|a - f| / max(1e-8, |a| + |f|)`,
/// maximized over elements.
pub fn compare_grads(
    analytic: &GradBuffer,
    numeric: &GradBuffer,
    tolerance: f64,
) -> GradCheckReport {
    let mut per_tensor = Vec::new();
    let mut overall: f64 = 0.0;
    for ((name, a), (_, f)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        let mut worst: f64 = 0.0;
        for (av, fv) in a.iter().zip(f) {
            let rel = (av - fv).abs() / (av.abs() + fv.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        per_tensor.push(TensorCheck {
            name,
            max_rel_err: worst,
        });
    }
    GradCheckReport {
        per_tensor,
        max_rel_err: overall,
        tolerance,
    }
}

/// Builds a small random model and input, runs the analytic backward pass
/// and the finite-difference oracle, and reports the per-tensor mixed
/// relative errors.
pub fn grad_check(
    config: &ModelConfig,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    if config.dropout != 0.0 {
        return Err(Error::invalid("gradient checks require dropout 0"));
    }
    let decomp = crate::graph::decompose_patch(config.patch_side())?;
    let dags = DagSet::build(config.memory_length, config.connectivity)?;
    let params = crate::model::init_params(config, seed)?;

    let mut rng = stream_rng(seed, STREAM_GRADCHECK);
    let n = config.patch_side();
    let values = (0..n * n * config.bands)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let patch = Patch {
        n,
        bands: config.bands,
        values,
        center_label: 0,
    };
    let target = rng.random_range(1..=config.classes as u16);

    let trace = forward(&params, config, &patch, &decomp, &dags, Mode::Eval)?;
    let analytic = backward(&params, config, &trace, target, &patch, &decomp, &dags)?;
    let numeric = finite_diff_grad(&params, config, &patch, target, &decomp, &dags, step)?;
    Ok(compare_grads(&analytic, &numeric, tolerance))
}

/// Strategy for evaluating a batch of per-sample forward/backward passes.
/// Implementations must sum losses and accumulate gradients into `acc`; the
/// accumulation order must be deterministic when reproducibility matters.
pub trait BatchExecutor: Sync {
    fn accumulate_batch(
        &self,
        len: usize,
        job: &(dyn Fn(usize) -> Result<(f64, GradBuffer)> + Sync),
        acc: &mut GradBuffer,
    ) -> Result<f64>;
}

/// Runs samples one after another in index order.
pub struct SequentialExecutor;

impl BatchExecutor for SequentialExecutor {
    fn accumulate_batch(
        &self,
        len: usize,
        job: &(dyn Fn(usize) -> Result<(f64, GradBuffer)> + Sync),
        acc: &mut GradBuffer,
    ) -> Result<f64> {
        let mut loss_sum = 0.0;
        for k in 0..len {
            let (l, g) = job(k)?;
            loss_sum += l;
            accumulate(acc, &g);
        }
        Ok(loss_sum)
    }
}

/// Output of [`fit`]: trained parameters, the normalization fitted on the
/// training pixels, and the mean training loss per epoch.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub stats: NormStats,
    pub epoch_mean_loss: Vec<f64>,
}

/// Trains the model on the given pixels. Each epoch shuffles the training
/// set with a dedicated seeded stream, sums per-sample gradients over each
/// minibatch, divides by the batch length, and applies one optimizer step.
/// Dropout masks are derived from per-sample seeds drawn before dispatch, so
/// any executor that accumulates in index order reproduces single-threaded
/// training bit for bit. `epoch_hook` observes `(epoch, mean_loss)`.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    cube: &HsiCube,
    labels: &LabelMap,
    train_pixels: &[(usize, usize)],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dags: &DagSet,
    decomp: &PatchDecomposition,
    executor: &dyn BatchExecutor,
    mut epoch_hook: impl FnMut(usize, f64),
) -> Result<FitResult> {
    model_config.validate()?;
    train_config.validate()?;
    if train_pixels.is_empty() {
        return Err(Error::EmptyInput("training pixels"));
    }
    if labels.height != cube.height || labels.width != cube.width {
        return Err(Error::shape("label map dimensions do not match the cube"));
    }
    if cube.bands != model_config.bands {
        return Err(Error::shape(format!(
            "cube has {} bands, model expects {}",
            cube.bands, model_config.bands
        )));
    }
    if decomp.n != model_config.patch_side()
        || dags.m() != model_config.memory_length
        || dags.connectivity() != model_config.connectivity
    {
        return Err(Error::shape(
            "decomposition or DAG set does not match the model config",
        ));
    }
    for &(r, c) in train_pixels {
        let label = labels.label(r, c);
        if label == 0 || label as usize > model_config.classes {
            return Err(Error::ClassOutOfRange {
                class: label,
                classes: model_config.classes,
            });
        }
    }

    let seed = train_config.seed;
    let stats = fit_normalizer(cube, train_pixels)?;
    let mut params = crate::model::init_params(model_config, seed)?;
    let mut state = OptimState::zeros(model_config);
    let mut shuffle_rng = stream_rng(seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(seed, STREAM_DROPOUT);

    let n_train = train_pixels.len();
    let patch_side = model_config.patch_side();
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut epoch_mean_loss = Vec::with_capacity(train_config.epochs);

    for epoch in 0..train_config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss_sum = 0.0;
        for batch in indices.chunks(train_config.batch_size) {
            let dropout_seeds: Vec<u64> = batch.iter().map(|_| dropout_rng.random()).collect();
            let mut grad_sum = ModelParams::zeros(model_config);
            let job = |k: usize| -> Result<(f64, GradBuffer)> {
                let (row, col) = train_pixels[batch[k]];
                let patch = extract_labeled_patch(cube, labels, &stats, row, col, patch_side)?;
                let target = patch.center_label;
                let mut sample_rng = ChaCha8Rng::seed_from_u64(dropout_seeds[k]);
                let trace = forward(
                    &params,
                    model_config,
                    &patch,
                    decomp,
                    dags,
                    Mode::Train {
                        rng: &mut sample_rng,
                    },
                )?;
                let sample_loss = loss(&trace, target)?;
                let grads =
                    backward(&params, model_config, &trace, target, &patch, decomp, dags)?;
                Ok((sample_loss, grads))
            };
            let batch_loss = executor.accumulate_batch(batch.len(), &job, &mut grad_sum)?;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite("batch loss"));
            }
            epoch_loss_sum += batch_loss;
            scale(&mut grad_sum, 1.0 / batch.len() as f64);
            sgd_step(&mut params, &grad_sum, &mut state, train_config)?;
        }
        let mean = epoch_loss_sum / n_train as f64;
        epoch_mean_loss.push(mean);
        epoch_hook(epoch, mean);
    }

    Ok(FitResult {
        params,
        stats,
        epoch_mean_loss,
    })
}
