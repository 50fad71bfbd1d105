//! The two-player training loop.
//!
//! Each step is one round of the game. Phase A updates the anatomical
//! encoder and the segmentation decoder against the total objective with the
//! domain side frozen; Phase B updates the domain encoder and the
//! reconstruction decoder with the anatomical side frozen. The frozen
//! player's features enter the live phase as constants, so gradient
//! isolation holds by construction.
//!
//! Determinism contract: all randomness flows through the seeded state rng
//! in a fixed order (per-window transform sets, then the shared swap index),
//! so identical configs and seeds replay bit-identically.

use crate::error::{Result, SdsegError};
use crate::geometry::{apply_transform, sample_transform_set, TransformSpec};
use crate::nets::{
    anatomy_encoder_graph, domain_encoder_graph, init_anatomy_encoder, init_domain_encoder,
    init_reconstruction_decoder, init_segmentation_decoder, reconstruction_decoder_graph,
    segmentation_decoder_graph, NetConfig, ParamSet,
};
use crate::objectives::{self, graph, LossBundle};
use crate::seeding::derive_rng;
use crate::synthdata::{load_domain_samples, load_domain_windows, load_manifest, sliding_windows, WindowSample};
use crate::tape::{Grads, Tape, VarId};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 1e-4;
/// Windows are rendered into [0,1], so PSNR uses this peak.
const PSNR_MAX_VALUE: f64 = 1.0;

fn default_lambda() -> f64 {
    5.0
}
fn default_omega() -> f64 {
    0.05
}
fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    60
}
fn default_cosine_period() -> usize {
    30
}
fn default_n_transforms() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_batch_size() -> usize {
    8
}
fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_lasso: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub cosine_period: usize,
    pub n_transforms: usize,
    pub enable_rotation: bool,
    pub enable_flip: bool,
    pub disable_domain_encoder: bool,
    pub disable_space_constraint: bool,
    pub disable_reconstruction: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_lasso: default_lambda(),
            omega: default_omega(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            cosine_period: default_cosine_period(),
            n_transforms: default_n_transforms(),
            enable_rotation: default_true(),
            enable_flip: default_true(),
            disable_domain_encoder: false,
            disable_space_constraint: false,
            disable_reconstruction: false,
            batch_size: default_batch_size(),
            seed: default_seed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = self.lambda_lasso < 0.0
            || self.omega < 0.0
            || self.learning_rate <= 0.0
            || self.epochs == 0
            || self.cosine_period == 0
            || self.n_transforms == 0
            || self.batch_size == 0;
        if bad {
            return Err(SdsegError::Config(
                "train config: weights must be nonnegative and counts positive".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts every `cosine_period` epochs,
/// floored at zero.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let p = config.cosine_period;
    let phase = (epoch % p) as f64 / p as f64;
    config.learning_rate * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0
}

/// Decoupled-weight-decay Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    fn new_like(set: &ParamSet) -> Self {
        AdamState {
            m: set.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            v: set.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect(),
            step: 0,
        }
    }
}

/// Full mutable training state: iteration counter, the four players, their
/// optimizer moments, and the stream of randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub t: u64,
    pub d_x: ParamSet,
    pub d_delta: ParamSet,
    pub p_y: ParamSet,
    pub p_i: ParamSet,
    pub opt_d_x: AdamState,
    pub opt_d_delta: AdamState,
    pub opt_p_y: AdamState,
    pub opt_p_i: AdamState,
    pub rng: ChaCha12Rng,
}

impl GameState {
    pub fn init(net_cfg: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        net_cfg.validate()?;
        cfg.validate()?;
        let d_x = init_anatomy_encoder(net_cfg, &mut derive_rng(cfg.seed, &["init", "d_x"]));
        let d_delta =
            init_domain_encoder(net_cfg, &mut derive_rng(cfg.seed, &["init", "d_delta"]));
        let p_y =
            init_segmentation_decoder(net_cfg, &mut derive_rng(cfg.seed, &["init", "p_y"]));
        let p_i =
            init_reconstruction_decoder(net_cfg, &mut derive_rng(cfg.seed, &["init", "p_i"]));
        Ok(GameState {
            t: 0,
            opt_d_x: AdamState::new_like(&d_x),
            opt_d_delta: AdamState::new_like(&d_delta),
            opt_p_y: AdamState::new_like(&p_y),
            opt_p_i: AdamState::new_like(&p_i),
            d_x,
            d_delta,
            p_y,
            p_i,
            rng: derive_rng(cfg.seed, &["train"]),
        })
    }
}

pub type StepMetrics = LossBundle;

/// The random choices of one step, drawn up front so both phases see the
/// same transforms and swap index.
#[derive(Debug, Clone)]
pub struct StepPlan {
    /// One transform set per window in the batch.
    pub transforms: Vec<Vec<TransformSpec>>,
    /// 1-based block index of the delta swapped into every reconstruction.
    pub swap_block: usize,
}

/// Draws the step's randomness from the state rng: first the per-window
/// transform sets, then (when phase B will run and there is a choice) the
/// swap index.
pub fn plan_step(
    state: &mut GameState,
    batch_len: usize,
    cfg: &TrainConfig,
) -> Result<StepPlan> {
    if batch_len == 0 {
        return Err(SdsegError::InvalidArgument("empty batch".into()));
    }
    let n = cfg.n_transforms;
    let transforms: Result<Vec<_>> = (0..batch_len)
        .map(|_| {
            sample_transform_set(n, &mut state.rng, cfg.enable_rotation, cfg.enable_flip)
        })
        .collect();
    let swap_block = if !cfg.disable_domain_encoder && n > 1 {
        state.rng.random_range(1..=n)
    } else {
        1
    };
    Ok(StepPlan {
        transforms: transforms?,
        swap_block,
    })
}

/// Stacked input [(n+1)·B, 3, H, W]: block 0 holds the untransformed
/// windows; block i (1-based) holds transform i−1 of every window.
fn assemble_inputs(batch: &[&WindowSample], plan: &StepPlan) -> Result<ArrayD<f64>> {
    let b = batch.len();
    let n = plan.transforms[0].len();
    let (c, h, w) = batch[0].window.dim();
    for win in batch {
        if win.window.dim() != (c, h, w) {
            return Err(SdsegError::InvalidArgument(
                "batch windows must share one shape".into(),
            ));
        }
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[(n + 1) * b, c, h, w]));
    for (bi, win) in batch.iter().enumerate() {
        let dynwin = win.window.clone().into_dyn();
        out.index_axis_mut(Axis(0), bi).assign(&dynwin);
        for (i, t) in plan.transforms[bi].iter().enumerate() {
            let moved = apply_transform(t, &dynwin)?;
            out.index_axis_mut(Axis(0), (i + 1) * b + bi).assign(&moved);
        }
    }
    Ok(out)
}

/// Flat transform list aligned with the transformed blocks: entry i·B+b is
/// window b's transform i.
fn flat_transforms(plan: &StepPlan) -> Vec<TransformSpec> {
    let b = plan.transforms.len();
    let n = plan.transforms[0].len();
    let mut out = Vec::with_capacity(n * b);
    for i in 0..n {
        for window in plan.transforms.iter().take(b) {
            out.push(window[i]);
        }
    }
    out
}

/// One-hot labels of the transformed windows, [n·B, K, H, W].
fn transformed_onehot(
    batch: &[&WindowSample],
    plan: &StepPlan,
    num_classes: usize,
) -> Result<ArrayD<f64>> {
    let b = batch.len();
    let n = plan.transforms[0].len();
    let (h, w) = batch[0].center_label.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n * b, num_classes, h, w]));
    for (bi, win) in batch.iter().enumerate() {
        let lab = win.center_label.clone().into_dyn();
        for (i, t) in plan.transforms[bi].iter().enumerate() {
            let moved = apply_transform(t, &lab)?;
            let mut row = out.index_axis_mut(Axis(0), i * b + bi);
            for y in 0..h {
                for x in 0..w {
                    let class = moved[[y, x]] as usize;
                    if class >= num_classes {
                        return Err(SdsegError::Data(format!(
                            "label {class} exceeds num_classes {num_classes}"
                        )));
                    }
                    row[[class, y, x]] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Value-only forward of one encoder on a constant input (throwaway tape).
fn value_forward<F>(params: &ParamSet, input: &ArrayD<f64>, build: F) -> ArrayD<f64>
where
    F: FnOnce(&mut Tape, &[VarId], VarId) -> VarId,
{
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape);
    let x = tape.leaf(input.clone());
    let out = build(&mut tape, &ids, x);
    tape.value(out).clone()
}

fn adamw_apply(set: &mut ParamSet, opt: &mut AdamState, ids: &[VarId], grads: &Grads, lr: f64) {
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    for (k, entry) in set.entries.iter_mut().enumerate() {
        let fallback;
        let g = match grads.wrt(ids[k]) {
            Some(g) => g,
            None => {
                fallback = ArrayD::zeros(entry.value.raw_dim());
                &fallback
            }
        };
        let m = &mut opt.m[k];
        let v = &mut opt.v[k];
        ndarray::Zip::from(&mut entry.value)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * WEIGHT_DECAY * *p + lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
    }
}

fn ensure_finite(term: &str, value: f64, t: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SdsegError::NonFinite {
            term: term.into(),
            value,
            details: format!("train step t={t}"),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseAOut {
    pub pull_x: f64,
    pub u_x: f64,
    pub lasso_x: f64,
    pub repel: f64,
}

/// Phase A: descend pull_x + repel + λ·lasso_x − U_X − ω·U_Δ over D_X and
/// P_Y, with the domain players' deltas and the reconstruction decoder
/// inserted as constants. The reconstruction term mirrors phase B's
/// swapped-delta conditioning, so the anatomical maps feel the same
/// objective the domain players descend.
pub fn phase_a(
    state: &mut GameState,
    batch: &[&WindowSample],
    plan: &StepPlan,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<PhaseAOut> {
    let b = batch.len();
    let n = plan.transforms[0].len();
    let inputs = assemble_inputs(batch, plan)?;
    let trans_inputs = inputs
        .slice_axis(Axis(0), ndarray::Slice::from(b as isize..))
        .to_owned();

    // Frozen player: deltas of every window, values only.
    let deltas_const = if cfg.disable_domain_encoder {
        None
    } else {
        Some(value_forward(&state.d_delta, &inputs, |t, ids, x| {
            domain_encoder_graph(t, ids, x, net_cfg)
        }))
    };

    let mut tape = Tape::new();
    let dx_ids = state.d_x.insert_into(&mut tape);
    let py_ids = state.p_y.insert_into(&mut tape);
    let input = tape.leaf(inputs);
    let x_all = anatomy_encoder_graph(&mut tape, &dx_ids, input, net_cfg);
    let x_ref = tape.slice_batch(x_all, 0, b);
    let x_trans = tape.slice_batch(x_all, b, n * b);

    let pull = graph::pull_x(&mut tape, x_ref, x_trans, flat_transforms(plan), n);
    let logits = segmentation_decoder_graph(&mut tape, &py_ids, x_trans, net_cfg);
    let y_onehot = tape.leaf(transformed_onehot(batch, plan, net_cfg.num_classes)?);
    let u_x = graph::soft_dice(&mut tape, logits, y_onehot);

    let mut obj = pull;
    let repel = match &deltas_const {
        Some(d) => {
            let d_trans = d
                .slice_axis(Axis(0), ndarray::Slice::from(b as isize..))
                .to_owned();
            let d_leaf = tape.leaf(d_trans);
            let r = graph::repel(&mut tape, x_trans, d_leaf, net_cfg.delta_dim);
            obj = tape.add(obj, r);
            tape.scalar_value(r)
        }
        None => 0.0,
    };
    let lasso_x = if cfg.disable_space_constraint {
        0.0
    } else {
        let ax = tape.abs(x_ref);
        let mx = tape.mean(ax);
        let weighted = tape.mul_scalar(mx, cfg.lambda_lasso);
        obj = tape.add(obj, weighted);
        tape.scalar_value(mx)
    };
    obj = tape.sub(obj, u_x);

    if !cfg.disable_reconstruction {
        let pi_ids = state.p_i.insert_into(&mut tape);
        let delta_s = match &deltas_const {
            Some(d) => {
                let row0 = (plan.swap_block * b) as isize;
                let block = d
                    .slice_axis(Axis(0), ndarray::Slice::from(row0..row0 + b as isize))
                    .to_owned();
                let leaf = tape.leaf(block);
                tape.repeat_batch(leaf, n)
            }
            None => tape.leaf(ArrayD::zeros(IxDyn(&[n * b, net_cfg.delta_dim]))),
        };
        let recon = reconstruction_decoder_graph(&mut tape, &pi_ids, x_trans, delta_s, net_cfg);
        let target = tape.leaf(trans_inputs);
        let u_delta = graph::psnr(&mut tape, recon, target, PSNR_MAX_VALUE);
        let weighted = tape.mul_scalar(u_delta, cfg.omega);
        obj = tape.sub(obj, weighted);
    }

    let out = PhaseAOut {
        pull_x: ensure_finite("pull_x", tape.scalar_value(pull), state.t)?,
        u_x: ensure_finite("u_x_surrogate", tape.scalar_value(u_x), state.t)?,
        lasso_x: ensure_finite("lasso_x", lasso_x, state.t)?,
        repel: ensure_finite("repel", repel, state.t)?,
    };
    ensure_finite("phase_a_objective", tape.scalar_value(obj), state.t)?;

    let grads = tape.backward(obj);
    adamw_apply(&mut state.d_x, &mut state.opt_d_x, &dx_ids, &grads, lr);
    adamw_apply(&mut state.p_y, &mut state.opt_p_y, &py_ids, &grads, lr);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct PhaseBOut {
    pub pull_delta: f64,
    pub repel: f64,
    pub lasso_x: f64,
    pub lasso_delta: f64,
    pub u_delta: f64,
}

/// Phase B: descend pull_delta + repel + λ·lasso_δ − ω·U_Δ over D_Δ and P_I,
/// with the (already updated) anatomical maps inserted as constants. Every
/// reconstruction is conditioned on the step's swapped delta. Without the
/// domain encoder only the decoder trains, reconstructing from the
/// anatomical maps under a zero delta.
pub fn phase_b(
    state: &mut GameState,
    batch: &[&WindowSample],
    plan: &StepPlan,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<PhaseBOut> {
    let b = batch.len();
    let n = plan.transforms[0].len();
    let inputs = assemble_inputs(batch, plan)?;

    // Frozen player: anatomical maps of all windows, values only.
    let x_all_vals = value_forward(&state.d_x, &inputs, |t, ids, x| {
        anatomy_encoder_graph(t, ids, x, net_cfg)
    });
    let x_ref_vals = x_all_vals
        .slice_axis(Axis(0), ndarray::Slice::from(..b as isize))
        .to_owned();
    let x_trans_vals = x_all_vals
        .slice_axis(Axis(0), ndarray::Slice::from(b as isize..))
        .to_owned();
    let lasso_x = if cfg.disable_space_constraint {
        0.0
    } else {
        x_ref_vals.iter().map(|v| v.abs()).sum::<f64>() / x_ref_vals.len() as f64
    };

    let trans_inputs = inputs
        .slice_axis(Axis(0), ndarray::Slice::from(b as isize..))
        .to_owned();

    let mut tape = Tape::new();
    let pi_ids = state.p_i.insert_into(&mut tape);

    if cfg.disable_domain_encoder {
        if cfg.disable_reconstruction {
            return Err(SdsegError::InvalidArgument(
                "phase B has no players when both the domain encoder and reconstruction are disabled".into(),
            ));
        }
        let x_trans_leaf = tape.leaf(x_trans_vals);
        let delta_s = tape.leaf(ArrayD::zeros(IxDyn(&[n * b, net_cfg.delta_dim])));
        let recon =
            reconstruction_decoder_graph(&mut tape, &pi_ids, x_trans_leaf, delta_s, net_cfg);
        let target = tape.leaf(trans_inputs);
        let u_delta = graph::psnr(&mut tape, recon, target, PSNR_MAX_VALUE);
        let obj = tape.mul_scalar(u_delta, -cfg.omega);
        let out = PhaseBOut {
            pull_delta: 0.0,
            repel: 0.0,
            lasso_x,
            lasso_delta: 0.0,
            u_delta: ensure_finite("u_delta", tape.scalar_value(u_delta), state.t)?,
        };
        ensure_finite("phase_b_objective", tape.scalar_value(obj), state.t)?;
        let grads = tape.backward(obj);
        adamw_apply(&mut state.p_i, &mut state.opt_p_i, &pi_ids, &grads, lr);
        return Ok(out);
    }

    let dd_ids = state.d_delta.insert_into(&mut tape);
    let input = tape.leaf(inputs);
    let delta_all = domain_encoder_graph(&mut tape, &dd_ids, input, net_cfg);
    let delta_ref = tape.slice_batch(delta_all, 0, b);
    let delta_trans = tape.slice_batch(delta_all, b, n * b);

    let pull = graph::pull_delta(&mut tape, delta_trans, n, b);
    let x_trans_leaf = tape.leaf(x_trans_vals);
    let repel = graph::repel(&mut tape, x_trans_leaf, delta_trans, net_cfg.delta_dim);

    let mut obj = tape.add(pull, repel);
    let lasso_delta = if cfg.disable_space_constraint {
        0.0
    } else {
        let ad = tape.abs(delta_ref);
        let md = tape.mean(ad);
        let weighted = tape.mul_scalar(md, cfg.lambda_lasso);
        obj = tape.add(obj, weighted);
        tape.scalar_value(md)
    };

    let u_delta = if cfg.disable_reconstruction {
        0.0
    } else {
        let delta_s = tape.slice_batch(delta_all, plan.swap_block * b, b);
        let delta_s_rep = tape.repeat_batch(delta_s, n);
        let recon =
            reconstruction_decoder_graph(&mut tape, &pi_ids, x_trans_leaf, delta_s_rep, net_cfg);
        let target = tape.leaf(trans_inputs);
        let ud = graph::psnr(&mut tape, recon, target, PSNR_MAX_VALUE);
        let weighted_u = tape.mul_scalar(ud, cfg.omega);
        obj = tape.sub(obj, weighted_u);
        tape.scalar_value(ud)
    };

    let out = PhaseBOut {
        pull_delta: ensure_finite("pull_delta", tape.scalar_value(pull), state.t)?,
        repel: ensure_finite("repel", tape.scalar_value(repel), state.t)?,
        lasso_x: ensure_finite("lasso_x", lasso_x, state.t)?,
        lasso_delta: ensure_finite("lasso_delta", lasso_delta, state.t)?,
        u_delta: ensure_finite("u_delta", u_delta, state.t)?,
    };
    ensure_finite("phase_b_objective", tape.scalar_value(obj), state.t)?;

    let grads = tape.backward(obj);
    adamw_apply(&mut state.d_delta, &mut state.opt_d_delta, &dd_ids, &grads, lr);
    adamw_apply(&mut state.p_i, &mut state.opt_p_i, &pi_ids, &grads, lr);
    Ok(out)
}

/// One full game round over a batch: plan, Phase A, Phase B, advance t.
pub fn train_step(
    state: &mut GameState,
    batch: &[&WindowSample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let plan = plan_step(state, batch.len(), cfg)?;
    let a = phase_a(state, batch, &plan, net_cfg, cfg, lr)?;
    let metrics = if cfg.disable_domain_encoder && cfg.disable_reconstruction {
        objectives::total_objective(
            a.pull_x,
            0.0,
            0.0,
            a.lasso_x,
            a.u_x,
            0.0,
            cfg.lambda_lasso,
            cfg.omega,
        )?
    } else {
        let bphase = phase_b(state, batch, &plan, net_cfg, cfg, lr)?;
        objectives::total_objective(
            a.pull_x,
            bphase.pull_delta,
            bphase.repel,
            bphase.lasso_x + bphase.lasso_delta,
            a.u_x,
            bphase.u_delta,
            cfg.lambda_lasso,
            cfg.omega,
        )?
    };
    state.t += 1;
    Ok(metrics)
}

/// Batched center-slice prediction: argmax logits for each window.
pub fn predict_windows(
    net_cfg: &NetConfig,
    d_x: &ParamSet,
    p_y: &ParamSet,
    windows: &[&Array3<f64>],
) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(32) {
        let (c, h, w) = chunk[0].dim();
        let mut input = ArrayD::<f64>::zeros(IxDyn(&[chunk.len(), c, h, w]));
        for (i, win) in chunk.iter().enumerate() {
            input
                .index_axis_mut(Axis(0), i)
                .assign(&(**win).clone().into_dyn());
        }
        let mut tape = Tape::new();
        let dx_ids = d_x.insert_into(&mut tape);
        let py_ids = p_y.insert_into(&mut tape);
        let x = tape.leaf(input);
        let x_map = anatomy_encoder_graph(&mut tape, &dx_ids, x, net_cfg);
        let logits = segmentation_decoder_graph(&mut tape, &py_ids, x_map, net_cfg);
        let vals = tape.value(logits);
        let k = vals.shape()[1];
        for i in 0..chunk.len() {
            let mut pred = Array2::<u8>::zeros((h, w));
            for y in 0..h {
                for xx in 0..w {
                    let mut best = 0usize;
                    let mut best_v = vals[[i, 0, y, xx]];
                    for cls in 1..k {
                        let v = vals[[i, cls, y, xx]];
                        if v > best_v {
                            best_v = v;
                            best = cls;
                        }
                    }
                    pred[[y, xx]] = best as u8;
                }
            }
            out.push(pred);
        }
    }
    Ok(out)
}

/// Predicted label volume, slice by slice through the sliding windows.
pub fn predict_volume(
    net_cfg: &NetConfig,
    d_x: &ParamSet,
    p_y: &ParamSet,
    volume: &Array3<f64>,
) -> Result<Array3<u8>> {
    let (d, h, w) = volume.dim();
    let dummy_labels = Array3::<u8>::zeros((d, h, w));
    let windows = sliding_windows(volume, &dummy_labels, "");
    let refs: Vec<&Array3<f64>> = windows.iter().map(|ws| &ws.window).collect();
    let preds = predict_windows(net_cfg, d_x, p_y, &refs)?;
    let mut out = Array3::<u8>::zeros((d, h, w));
    for (z, pred) in preds.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), z).assign(&pred);
    }
    Ok(out)
}

/// Validation diagnostics: segmentation Dice plus the two pull losses under
/// a fixed probe transform set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ValMetrics {
    pub dice: f64,
    pub pull_x: f64,
    pub pull_delta: f64,
}

pub fn val_metrics(
    state: &GameState,
    volumes: &[(Array3<f64>, Array3<u8>, String)],
    probes: &[TransformSpec],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<ValMetrics> {
    if volumes.is_empty() {
        return Err(SdsegError::InvalidArgument("no validation volumes".into()));
    }
    let mut dice_sum = 0.0;
    for (volume, labels, _) in volumes {
        let pred = predict_volume(net_cfg, &state.d_x, &state.p_y, volume)?;
        dice_sum += objectives::volume_fg_mean_dice(&pred, labels, net_cfg.num_classes);
    }
    let dice = dice_sum / volumes.len() as f64;

    // Pull diagnostics over all val windows at once, blocks as in training.
    let windows: Vec<WindowSample> = volumes
        .iter()
        .flat_map(|(v, l, id)| sliding_windows(v, l, id))
        .collect();
    let v = windows.len();
    let n = probes.len();
    let (c, h, w) = windows[0].window.dim();
    let mut input = ArrayD::<f64>::zeros(IxDyn(&[(n + 1) * v, c, h, w]));
    for (i, win) in windows.iter().enumerate() {
        let dynwin = win.window.clone().into_dyn();
        input.index_axis_mut(Axis(0), i).assign(&dynwin);
        for (pi, t) in probes.iter().enumerate() {
            let moved = apply_transform(t, &dynwin)?;
            input
                .index_axis_mut(Axis(0), (pi + 1) * v + i)
                .assign(&moved);
        }
    }
    let x_all = value_forward(&state.d_x, &input, |t, ids, x| {
        anatomy_encoder_graph(t, ids, x, net_cfg)
    });
    let mut pull_x_sum = 0.0;
    for i in 0..v {
        let x_ref = x_all.index_axis(Axis(0), i).to_owned().into_dyn();
        let x_set: Vec<ArrayD<f64>> = (0..n)
            .map(|pi| x_all.index_axis(Axis(0), (pi + 1) * v + i).to_owned().into_dyn())
            .collect();
        pull_x_sum += objectives::pull_loss_x(&x_ref, &x_set, probes)?;
    }
    let pull_x = pull_x_sum / v as f64;

    let pull_delta = if cfg.disable_domain_encoder {
        0.0
    } else {
        let delta_all = value_forward(&state.d_delta, &input, |t, ids, x| {
            domain_encoder_graph(t, ids, x, net_cfg)
        });
        let mut sum = 0.0;
        for i in 0..v {
            let deltas: Vec<ndarray::Array1<f64>> = (0..n)
                .map(|pi| {
                    ndarray::Array1::from_iter(
                        delta_all.index_axis(Axis(0), (pi + 1) * v + i).iter().cloned(),
                    )
                })
                .collect();
            sum += objectives::pull_loss_delta(&deltas)?;
        }
        sum / v as f64
    };

    Ok(ValMetrics {
        dice,
        pull_x,
        pull_delta,
    })
}

/// One line of history.jsonl. Epoch 0 is the pre-training snapshot and has
/// no train aggregates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: Option<LossBundle>,
    pub val: ValMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainingSummary {
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub records: Vec<EpochRecord>,
}

fn mean_bundles(bundles: &[LossBundle]) -> LossBundle {
    let n = bundles.len().max(1) as f64;
    let mut acc = LossBundle {
        pull_x: 0.0,
        pull_delta: 0.0,
        repel: 0.0,
        lasso: 0.0,
        u_x_surrogate: 0.0,
        u_delta: 0.0,
        total: 0.0,
    };
    for b in bundles {
        acc.pull_x += b.pull_x;
        acc.pull_delta += b.pull_delta;
        acc.repel += b.repel;
        acc.lasso += b.lasso;
        acc.u_x_surrogate += b.u_x_surrogate;
        acc.u_delta += b.u_delta;
        acc.total += b.total;
    }
    acc.pull_x /= n;
    acc.pull_delta /= n;
    acc.repel /= n;
    acc.lasso /= n;
    acc.u_x_surrogate /= n;
    acc.u_delta /= n;
    acc.total /= n;
    acc
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    net: &'a NetConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct EpochCheckpointMeta {
    epoch: usize,
    t: u64,
    val_dice: f64,
    d_x_hash: String,
    d_delta_hash: String,
    p_y_hash: String,
    p_i_hash: String,
}

pub fn history_path(run_dir: &Path) -> PathBuf {
    run_dir.join("history.jsonl")
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("ckpt")
}

pub fn read_history(run_dir: &Path) -> Result<Vec<EpochRecord>> {
    let path = history_path(run_dir);
    let file = std::fs::File::open(&path)
        .map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| SdsegError::io(path.display().to_string(), e))?;
            serde_json::from_str(&line)
                .map_err(|e| SdsegError::Data(format!("history record parse: {e}")))
        })
        .collect()
}

/// Trains on the manifest's source domain and writes the run directory:
/// `config.snapshot`, `history.jsonl`, `ckpt/epoch_<n>` metadata, full
/// checkpoints `ckpt/best` (highest val Dice, strict improvement) and
/// `ckpt/last`.
pub fn run_training(
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    data_root: &Path,
    run_dir: &Path,
) -> Result<TrainingSummary> {
    net_cfg.validate()?;
    cfg.validate()?;
    let manifest = load_manifest(data_root)?;
    if manifest.num_classes != net_cfg.num_classes {
        return Err(SdsegError::Config(format!(
            "manifest has {} classes but net config expects {}",
            manifest.num_classes, net_cfg.num_classes
        )));
    }
    let source_id = manifest.source.style.domain_id.clone();
    let mut train_windows = load_domain_windows(data_root, &source_id, &manifest.source.train)?;
    let val_volumes = load_domain_samples(data_root, &source_id, &manifest.source.val)?;
    if train_windows.is_empty() {
        return Err(SdsegError::Data("no training windows".into()));
    }

    let ckpt = checkpoint_dir(run_dir);
    std::fs::create_dir_all(&ckpt).map_err(|e| SdsegError::io(ckpt.display().to_string(), e))?;
    let snapshot = toml::to_string_pretty(&ConfigSnapshot {
        net: net_cfg,
        train: cfg,
    })
    .map_err(|e| SdsegError::Config(format!("config snapshot: {e}")))?;
    let snap_path = run_dir.join("config.snapshot");
    std::fs::write(&snap_path, snapshot)
        .map_err(|e| SdsegError::io(snap_path.display().to_string(), e))?;

    let mut state = GameState::init(net_cfg, cfg)?;
    let probes = sample_transform_set(
        cfg.n_transforms,
        &mut derive_rng(cfg.seed, &["probe"]),
        cfg.enable_rotation,
        cfg.enable_flip,
    )?;

    let hist_path = history_path(run_dir);
    let hist_file = std::fs::File::create(&hist_path)
        .map_err(|e| SdsegError::io(hist_path.display().to_string(), e))?;
    let mut hist = BufWriter::new(hist_file);
    let mut records = Vec::new();
    let write_record = |hist: &mut BufWriter<std::fs::File>,
                            records: &mut Vec<EpochRecord>,
                            rec: EpochRecord|
     -> Result<()> {
        let line = serde_json::to_string(&rec)
            .map_err(|e| SdsegError::Data(format!("history encode: {e}")))?;
        writeln!(hist, "{line}")
            .and_then(|_| hist.flush())
            .map_err(|e| SdsegError::io(hist_path.display().to_string(), e))?;
        records.push(rec);
        Ok(())
    };

    let val0 = val_metrics(&state, &val_volumes, &probes, net_cfg, cfg)?;
    write_record(
        &mut hist,
        &mut records,
        EpochRecord {
            epoch: 0,
            lr: lr_at(0, cfg),
            train: None,
            val: val0,
        },
    )?;

    let mut best_epoch = 0usize;
    let mut best_val_dice = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch - 1, cfg);
        // Epoch-local shuffle from the state rng keeps replays exact.
        for i in (1..train_windows.len()).rev() {
            let j = state.rng.random_range(0..=i);
            train_windows.swap(i, j);
        }
        let mut step_metrics = Vec::new();
        for chunk in train_windows.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().collect();
            let metrics = train_step(&mut state, &batch, net_cfg, cfg, lr).map_err(|err| {
                // Persist for post-mortem before surfacing the failure.
                let _ = save_checkpoint(&ckpt.join("abort"), net_cfg, cfg, &state);
                match err {
                    SdsegError::NonFinite { term, value, details } => SdsegError::NonFinite {
                        term,
                        value,
                        details: format!("{details}, epoch {epoch}"),
                    },
                    other => other,
                }
            })?;
            step_metrics.push(metrics);
        }
        let val = val_metrics(&state, &val_volumes, &probes, net_cfg, cfg)?;
        write_record(
            &mut hist,
            &mut records,
            EpochRecord {
                epoch,
                lr,
                train: Some(mean_bundles(&step_metrics)),
                val,
            },
        )?;

        let meta = EpochCheckpointMeta {
            epoch,
            t: state.t,
            val_dice: val.dice,
            d_x_hash: state.d_x.content_hash(),
            d_delta_hash: state.d_delta.content_hash(),
            p_y_hash: state.p_y.content_hash(),
            p_i_hash: state.p_i.content_hash(),
        };
        let meta_path = ckpt.join(format!("epoch_{epoch}"));
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta)
                .map_err(|e| SdsegError::Data(format!("epoch meta encode: {e}")))?,
        )
        .map_err(|e| SdsegError::io(meta_path.display().to_string(), e))?;

        if val.dice > best_val_dice {
            best_val_dice = val.dice;
            best_epoch = epoch;
            save_checkpoint(&ckpt.join("best"), net_cfg, cfg, &state)?;
        }
    }
    save_checkpoint(&ckpt.join("last"), net_cfg, cfg, &state)?;
    Ok(TrainingSummary {
        best_epoch,
        best_val_dice,
        records,
    })
}

const CKPT_MAGIC: &[u8; 8] = b"SDSEGCKP";
const CKPT_VERSION: u32 = 1;

fn write_string<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn read_string<R: Read>(inp: &mut R) -> std::io::Result<String> {
    let len = inp.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    inp.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 string"))
}

fn write_array<W: Write>(out: &mut W, a: &ArrayD<f64>) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(a.ndim() as u32)?;
    for d in a.shape() {
        out.write_u32::<LittleEndian>(*d as u32)?;
    }
    for v in a.iter() {
        out.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_array<R: Read>(inp: &mut R) -> std::io::Result<ArrayD<f64>> {
    let ndim = inp.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(inp.read_u32::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut vals = vec![0.0; len];
    for v in vals.iter_mut() {
        *v = inp.read_f64::<LittleEndian>()?;
    }
    ArrayD::from_shape_vec(IxDyn(&shape), vals)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad array shape"))
}

fn write_param_set<W: Write>(out: &mut W, set: &ParamSet) -> std::io::Result<()> {
    write_string(out, &set.name)?;
    out.write_u32::<LittleEndian>(set.entries.len() as u32)?;
    for e in &set.entries {
        write_string(out, &e.name)?;
        write_array(out, &e.value)?;
    }
    Ok(())
}

fn read_param_set<R: Read>(inp: &mut R) -> std::io::Result<ParamSet> {
    let name = read_string(inp)?;
    let n = inp.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = read_string(inp)?;
        let value = read_array(inp)?;
        entries.push(crate::nets::ParamEntry { name, value });
    }
    Ok(ParamSet { name, entries })
}

fn write_adam<W: Write>(out: &mut W, opt: &AdamState) -> std::io::Result<()> {
    out.write_u64::<LittleEndian>(opt.step)?;
    out.write_u32::<LittleEndian>(opt.m.len() as u32)?;
    for (m, v) in opt.m.iter().zip(&opt.v) {
        write_array(out, m)?;
        write_array(out, v)?;
    }
    Ok(())
}

fn read_adam<R: Read>(inp: &mut R) -> std::io::Result<AdamState> {
    let step = inp.read_u64::<LittleEndian>()?;
    let n = inp.read_u32::<LittleEndian>()? as usize;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(read_array(inp)?);
        v.push(read_array(inp)?);
    }
    Ok(AdamState { m, v, step })
}

/// Single-file binary checkpoint: configs, iteration counter, all four
/// parameter sets with optimizer moments, and the exact rng position.
pub fn save_checkpoint(
    path: &Path,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    state: &GameState,
) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        out.write_all(CKPT_MAGIC)?;
        out.write_u32::<LittleEndian>(CKPT_VERSION)?;
        write_string(
            &mut out,
            &serde_json::to_string(net_cfg).expect("net config serializes"),
        )?;
        write_string(
            &mut out,
            &serde_json::to_string(cfg).expect("train config serializes"),
        )?;
        out.write_u64::<LittleEndian>(state.t)?;
        for set in [&state.d_x, &state.d_delta, &state.p_y, &state.p_i] {
            write_param_set(&mut out, set)?;
        }
        for opt in [
            &state.opt_d_x,
            &state.opt_d_delta,
            &state.opt_p_y,
            &state.opt_p_i,
        ] {
            write_adam(&mut out, opt)?;
        }
        out.write_all(&state.rng.get_seed())?;
        out.write_u128::<LittleEndian>(state.rng.get_word_pos())?;
        out.flush()
    };
    run().map_err(|e| SdsegError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetConfig, TrainConfig, GameState)> {
    let file =
        std::fs::File::open(path).map_err(|e| SdsegError::io(path.display().to_string(), e))?;
    let mut inp = BufReader::new(file);
    let mut run = || -> std::io::Result<(NetConfig, TrainConfig, GameState)> {
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "bad magic",
            ));
        }
        let version = inp.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let net_json = read_string(&mut inp)?;
        let train_json = read_string(&mut inp)?;
        let net_cfg: NetConfig = serde_json::from_str(&net_json)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let cfg: TrainConfig = serde_json::from_str(&train_json)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let t = inp.read_u64::<LittleEndian>()?;
        let d_x = read_param_set(&mut inp)?;
        let d_delta = read_param_set(&mut inp)?;
        let p_y = read_param_set(&mut inp)?;
        let p_i = read_param_set(&mut inp)?;
        let opt_d_x = read_adam(&mut inp)?;
        let opt_d_delta = read_adam(&mut inp)?;
        let opt_p_y = read_adam(&mut inp)?;
        let opt_p_i = read_adam(&mut inp)?;
        let mut seed = [0u8; 32];
        inp.read_exact(&mut seed)?;
        let word_pos = inp.read_u128::<LittleEndian>()?;
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        Ok((
            net_cfg,
            cfg,
            GameState {
                t,
                d_x,
                d_delta,
                p_y,
                p_i,
                opt_d_x,
                opt_d_delta,
                opt_p_y,
                opt_p_i,
                rng,
            },
        ))
    };
    run().map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => {
            SdsegError::Checkpoint(format!("{}: {e}", path.display()))
        }
        _ => SdsegError::io(path.display().to_string(), e),
    })
}

/// The undivided total objective as one differentiable graph over all four
/// live parameter sets. Training never uses this (phases freeze opponents);
/// it exists for whole-system gradient verification.
pub struct FullObjective {
    pub tape: Tape,
    pub total: VarId,
    pub bundle: LossBundle,
    pub d_x_ids: Vec<VarId>,
    pub d_delta_ids: Vec<VarId>,
    pub p_y_ids: Vec<VarId>,
    pub p_i_ids: Vec<VarId>,
}

pub fn build_full_objective(
    state: &GameState,
    batch: &[&WindowSample],
    plan: &StepPlan,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<FullObjective> {
    let b = batch.len();
    let n = plan.transforms[0].len();
    let inputs = assemble_inputs(batch, plan)?;
    let trans_inputs = inputs
        .slice_axis(Axis(0), ndarray::Slice::from(b as isize..))
        .to_owned();

    let mut tape = Tape::new();
    let d_x_ids = state.d_x.insert_into(&mut tape);
    let d_delta_ids = state.d_delta.insert_into(&mut tape);
    let p_y_ids = state.p_y.insert_into(&mut tape);
    let p_i_ids = state.p_i.insert_into(&mut tape);
    let input = tape.leaf(inputs);

    let x_all = anatomy_encoder_graph(&mut tape, &d_x_ids, input, net_cfg);
    let delta_all = domain_encoder_graph(&mut tape, &d_delta_ids, input, net_cfg);
    let x_ref = tape.slice_batch(x_all, 0, b);
    let x_trans = tape.slice_batch(x_all, b, n * b);
    let delta_ref = tape.slice_batch(delta_all, 0, b);
    let delta_trans = tape.slice_batch(delta_all, b, n * b);

    let pull_x = graph::pull_x(&mut tape, x_ref, x_trans, flat_transforms(plan), n);
    let pull_delta = graph::pull_delta(&mut tape, delta_trans, n, b);
    let repel = graph::repel(&mut tape, x_trans, delta_trans, net_cfg.delta_dim);
    let lasso = graph::lasso(&mut tape, x_ref, delta_ref);

    let logits = segmentation_decoder_graph(&mut tape, &p_y_ids, x_trans, net_cfg);
    let y_onehot = tape.leaf(transformed_onehot(batch, plan, net_cfg.num_classes)?);
    let u_x = graph::soft_dice(&mut tape, logits, y_onehot);

    let delta_s = tape.slice_batch(delta_all, plan.swap_block * b, b);
    let delta_s_rep = tape.repeat_batch(delta_s, n);
    let recon = reconstruction_decoder_graph(&mut tape, &p_i_ids, x_trans, delta_s_rep, net_cfg);
    let target = tape.leaf(trans_inputs);
    let u_delta = graph::psnr(&mut tape, recon, target, PSNR_MAX_VALUE);

    let weighted_lasso = tape.mul_scalar(lasso, cfg.lambda_lasso);
    let mut total = tape.add(weighted_lasso, pull_x);
    total = tape.add(total, pull_delta);
    total = tape.add(total, repel);
    total = tape.sub(total, u_x);
    let weighted_u_delta = tape.mul_scalar(u_delta, cfg.omega);
    total = tape.sub(total, weighted_u_delta);

    let bundle = objectives::total_objective(
        tape.scalar_value(pull_x),
        tape.scalar_value(pull_delta),
        tape.scalar_value(repel),
        tape.scalar_value(lasso),
        tape.scalar_value(u_x),
        tape.scalar_value(u_delta),
        cfg.lambda_lasso,
        cfg.omega,
    )?;
    Ok(FullObjective {
        tape,
        total,
        bundle,
        d_x_ids,
        d_delta_ids,
        p_y_ids,
        p_i_ids,
    })
}
