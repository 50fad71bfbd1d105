//! Losses, utilities, and evaluation metrics.
//!
//! Plain functions here are the reference semantics (single-sample, eager);
//! [`graph`] holds the tape builders used during training. The two agree to
//! float tolerance by construction and are cross-checked in tests.
//!
//! Squared-norm losses are normalized by element count and set size rather
//! than raw-summed, so the loss weights keep their meaning when tensor sizes
//! change.

use crate::error::{Result, SdsegError};
use crate::geometry::{apply_transform, TransformSpec};
use ndarray::{Array1, Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

/// Epsilon in the soft-Dice surrogate.
pub const DICE_EPS: f64 = 1e-5;
/// Stabilizer in the squared-cosine denominator; also encodes the
/// "cosine of a zero vector is 0" convention.
pub const COSINE_EPS: f64 = 1e-12;
/// PSNR is capped here; reached when MSE is (max_value^2 *) 1e-10 or below.
pub const PSNR_CAP_DB: f64 = 100.0;

/// One step's loss components and the minmax total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub pull_x: f64,
    pub pull_delta: f64,
    pub repel: f64,
    pub lasso: f64,
    pub u_x_surrogate: f64,
    pub u_delta: f64,
    pub total: f64,
}

/// Transform-alignment pull on anatomical maps:
/// (1/n) Σ_i mean‖T_i(x_ref) − x_set[i]‖².
pub fn pull_loss_x(
    x_ref: &ArrayD<f64>,
    x_set: &[ArrayD<f64>],
    transforms: &[TransformSpec],
) -> Result<f64> {
    if x_set.is_empty() || x_set.len() != transforms.len() {
        return Err(SdsegError::InvalidArgument(format!(
            "pull_loss_x: need matching nonempty sets, got {} maps and {} transforms",
            x_set.len(),
            transforms.len()
        )));
    }
    let n = x_set.len() as f64;
    let mut acc = 0.0;
    for (xi, t) in x_set.iter().zip(transforms) {
        if xi.shape() != x_ref.shape() {
            return Err(SdsegError::shape(
                x_ref.shape().to_vec(),
                xi.shape().to_vec(),
                "pull_loss_x set entry",
            ));
        }
        let moved = apply_transform(t, x_ref)?;
        let mut sq = 0.0;
        for (a, b) in moved.iter().zip(xi.iter()) {
            let d = a - b;
            sq += d * d;
        }
        acc += sq / xi.len() as f64;
    }
    Ok(acc / n)
}

/// Domain pull across transformed views:
/// (1/max(1, n(n−1))) Σ_i Σ_{j≠i} mean‖Δ_j − Δ_i‖².
pub fn pull_loss_delta(delta_set: &[Array1<f64>]) -> Result<f64> {
    if delta_set.is_empty() {
        return Err(SdsegError::InvalidArgument(
            "pull_loss_delta: empty set".into(),
        ));
    }
    let d = delta_set[0].len();
    for v in delta_set {
        if v.len() != d {
            return Err(SdsegError::shape(
                vec![d],
                vec![v.len()],
                "pull_loss_delta entry",
            ));
        }
    }
    let n = delta_set.len();
    if n == 1 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut sq = 0.0;
            for k in 0..d {
                let diff = delta_set[j][k] - delta_set[i][k];
                sq += diff * diff;
            }
            acc += sq / d as f64;
        }
    }
    Ok(acc / (n * (n - 1)) as f64)
}

fn spatial_mean_per_channel(x: &ArrayD<f64>) -> Result<Vec<f64>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(SdsegError::shape(
            vec![0, 0, 0],
            s.to_vec(),
            "x_map must be [C,H,W]",
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let inv = 1.0 / (h * w) as f64;
    Ok((0..c)
        .map(|ci| xs[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() * inv)
        .collect())
}

fn cos_sq(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    (dot * dot) / (na * nb + COSINE_EPS)
}

/// Disentanglement repulsion: mean_i cos²(pool(x_set[i])[..Cd], delta_set[i]).
/// Pool is the spatial mean per channel; the projection keeps the first Cd
/// channels. Always in [0,1].
pub fn repel_loss(x_set: &[ArrayD<f64>], delta_set: &[Array1<f64>]) -> Result<f64> {
    if x_set.is_empty() || x_set.len() != delta_set.len() {
        return Err(SdsegError::InvalidArgument(format!(
            "repel_loss: need matching nonempty sets, got {} maps and {} deltas",
            x_set.len(),
            delta_set.len()
        )));
    }
    let mut acc = 0.0;
    for (x, delta) in x_set.iter().zip(delta_set) {
        let pooled = spatial_mean_per_channel(x)?;
        let cd = delta.len();
        if cd > pooled.len() {
            return Err(SdsegError::InvalidArgument(format!(
                "repel_loss: delta_dim {cd} exceeds x channels {}",
                pooled.len()
            )));
        }
        let dv = delta.as_slice().expect("contiguous vector");
        acc += cos_sq(&pooled[..cd], dv);
    }
    Ok(acc / x_set.len() as f64)
}

/// L1 shrinkage on the feature space: mean|x_map| + mean|delta_vec|.
pub fn lasso_penalty(x_map: &ArrayD<f64>, delta_vec: &Array1<f64>) -> f64 {
    let mx = x_map.iter().map(|v| v.abs()).sum::<f64>() / x_map.len() as f64;
    let md = if delta_vec.is_empty() {
        0.0
    } else {
        delta_vec.iter().map(|v| v.abs()).sum::<f64>() / delta_vec.len() as f64
    };
    mx + md
}

fn overlap_counts(pred: &Array2<u8>, truth: &Array2<u8>, class_id: u8) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let pa = p == class_id;
        let tb = t == class_id;
        if pa {
            a += 1;
        }
        if tb {
            b += 1;
        }
        if pa && tb {
            inter += 1;
        }
    }
    (inter, a, b)
}

/// Hard Dice overlap 2|A∩B|/(|A|+|B|) for one class; 1.0 when both empty.
pub fn dice_score(pred: &Array2<u8>, truth: &Array2<u8>, class_id: u8) -> f64 {
    let (inter, a, b) = overlap_counts(pred, truth, class_id);
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Jaccard overlap |A∩B|/|A∪B| for one class; 1.0 when both empty.
pub fn jaccard_score(pred: &Array2<u8>, truth: &Array2<u8>, class_id: u8) -> f64 {
    let (inter, a, b) = overlap_counts(pred, truth, class_id);
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn volume_as_plane(v: &Array3<u8>) -> Array2<u8> {
    let (d, h, w) = v.dim();
    Array2::from_shape_vec((d * h, w), v.iter().cloned().collect()).unwrap()
}

/// Whole-volume Dice per foreground class (voxel counts pooled over slices),
/// averaged over classes 1..num_classes.
pub fn volume_fg_mean_dice(pred: &Array3<u8>, truth: &Array3<u8>, num_classes: usize) -> f64 {
    let (p, t) = (volume_as_plane(pred), volume_as_plane(truth));
    (1..num_classes)
        .map(|c| dice_score(&p, &t, c as u8))
        .sum::<f64>()
        / (num_classes - 1).max(1) as f64
}

/// Whole-volume Jaccard per foreground class, averaged over classes 1..K.
pub fn volume_fg_mean_jaccard(pred: &Array3<u8>, truth: &Array3<u8>, num_classes: usize) -> f64 {
    let (p, t) = (volume_as_plane(pred), volume_as_plane(truth));
    (1..num_classes)
        .map(|c| jaccard_score(&p, &t, c as u8))
        .sum::<f64>()
        / (num_classes - 1).max(1) as f64
}

/// Differentiable Dice surrogate: softmax over classes, then per foreground
/// class (2·Σp·y + ε)/(Σp + Σy + ε), averaged over foreground classes.
pub fn soft_dice_utility(logits: &Array3<f64>, true_mask: &Array2<u8>) -> Result<f64> {
    let (k, h, w) = logits.dim();
    if true_mask.dim() != (h, w) {
        return Err(SdsegError::shape(
            vec![h, w],
            vec![true_mask.dim().0, true_mask.dim().1],
            "soft_dice_utility mask",
        ));
    }
    if k < 2 {
        return Err(SdsegError::InvalidArgument(
            "soft_dice_utility: need at least 2 classes".into(),
        ));
    }
    let mut p_sum = vec![0.0; k];
    let mut py_sum = vec![0.0; k];
    let mut y_sum = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for i in 0..h {
        for j in 0..w {
            let mut m = f64::NEG_INFINITY;
            for (c, _) in probs.iter().enumerate() {
                m = m.max(logits[[c, i, j]]);
            }
            let mut z = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (logits[[c, i, j]] - m).exp();
                z += *p;
            }
            let y = true_mask[[i, j]] as usize;
            if y >= k {
                return Err(SdsegError::Data(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            for (c, p) in probs.iter().enumerate() {
                let pv = p / z;
                p_sum[c] += pv;
                if c == y {
                    py_sum[c] += pv;
                }
            }
            y_sum[y] += 1.0;
        }
    }
    let mut acc = 0.0;
    for c in 1..k {
        acc += (2.0 * py_sum[c] + DICE_EPS) / (p_sum[c] + y_sum[c] + DICE_EPS);
    }
    Ok(acc / (k - 1) as f64)
}

/// 10·log10(max² / MSE) in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &ArrayD<f64>, estimate: &ArrayD<f64>, max_value: f64) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(SdsegError::shape(
            reference.shape().to_vec(),
            estimate.shape().to_vec(),
            "psnr estimate",
        ));
    }
    if max_value <= 0.0 {
        return Err(SdsegError::InvalidArgument(
            "psnr: max_value must be positive".into(),
        ));
    }
    let mut sq = 0.0;
    for (a, b) in reference.iter().zip(estimate.iter()) {
        let d = a - b;
        sq += d * d;
    }
    let mse = sq / reference.len() as f64;
    let cap_mse = max_value * max_value * 1e-10;
    if mse <= cap_mse {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}

/// Assembles the minmax bundle:
/// total = λ·lasso + pull_x + pull_delta + repel − (u_x + ω·u_delta).
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    pull_x: f64,
    pull_delta: f64,
    repel: f64,
    lasso: f64,
    u_x_surrogate: f64,
    u_delta: f64,
    lambda: f64,
    omega: f64,
) -> Result<LossBundle> {
    for (name, v) in [
        ("pull_x", pull_x),
        ("pull_delta", pull_delta),
        ("repel", repel),
        ("lasso", lasso),
        ("u_x_surrogate", u_x_surrogate),
        ("u_delta", u_delta),
    ] {
        if !v.is_finite() {
            return Err(SdsegError::NonFinite {
                term: name.into(),
                value: v,
                details: String::new(),
            });
        }
    }
    let total = lambda * lasso + pull_x + pull_delta + repel - (u_x_surrogate + omega * u_delta);
    Ok(LossBundle {
        pull_x,
        pull_delta,
        repel,
        lasso,
        u_x_surrogate,
        u_delta,
        total,
    })
}

/// Tape-side builders mirroring the plain losses over batched block layouts.
///
/// Batched tensors stack windows along axis 0; transformed copies are grouped
/// in blocks of the batch size (block i holds transform i of every window).
/// Each builder returns a scalar node equal to the batch mean of the plain
/// per-window loss.
pub mod graph {
    use super::COSINE_EPS;
    use crate::tape::{Tape, VarId};

    /// x_ref [B,...], x_trans [n·B,...]; flat_transforms has length n·B and
    /// row i·B+b holds window b's i-th transform.
    pub fn pull_x(
        tape: &mut Tape,
        x_ref: VarId,
        x_trans: VarId,
        flat_transforms: Vec<crate::geometry::TransformSpec>,
        n: usize,
    ) -> VarId {
        let rep = tape.repeat_batch(x_ref, n);
        let moved = tape.permute_batch_hw(rep, flat_transforms);
        let d = tape.sub(moved, x_trans);
        let sq = tape.square(d);
        tape.mean(sq)
    }

    /// delta_trans [n·B, Cd] in block layout.
    pub fn pull_delta(tape: &mut Tape, delta_trans: VarId, n: usize, b: usize) -> VarId {
        if n < 2 {
            return tape.leaf_scalar(0.0);
        }
        let mut acc: Option<VarId> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let di = tape.slice_batch(delta_trans, i * b, b);
                let dj = tape.slice_batch(delta_trans, j * b, b);
                let d = tape.sub(dj, di);
                let sq = tape.square(d);
                let m = tape.mean(sq);
                acc = Some(match acc {
                    Some(a) => tape.add(a, m),
                    None => m,
                });
            }
        }
        // Ordered pairs double the unordered sum.
        tape.mul_scalar(acc.unwrap(), 2.0 / (n * (n - 1)) as f64)
    }

    /// Mean squared cosine between rows of a and b (both [N, F]).
    pub fn mean_cos_sq(tape: &mut Tape, a: VarId, b: VarId) -> VarId {
        let dot = tape.row_dot(a, b);
        let num = tape.mul(dot, dot);
        let na = tape.row_dot(a, a);
        let nb = tape.row_dot(b, b);
        let den = tape.mul(na, nb);
        let den = tape.add_scalar(den, COSINE_EPS);
        let cos2 = tape.div(num, den);
        tape.mean(cos2)
    }

    /// x_maps [N,Cx,H,W], deltas [N,Cd]: pool x spatially, keep the first Cd
    /// channels, then mean squared cosine against the deltas.
    pub fn repel(tape: &mut Tape, x_maps: VarId, deltas: VarId, cd: usize) -> VarId {
        let pooled = tape.global_avg_pool(x_maps);
        let head = tape.slice_cols(pooled, 0, cd);
        mean_cos_sq(tape, head, deltas)
    }

    /// mean|x| + mean|delta| on the untransformed-window features.
    pub fn lasso(tape: &mut Tape, x_ref: VarId, delta_ref: VarId) -> VarId {
        let ax = tape.abs(x_ref);
        let mx = tape.mean(ax);
        let ad = tape.abs(delta_ref);
        let md = tape.mean(ad);
        tape.add(mx, md)
    }

    /// Soft Dice over a batch: logits [N,K,H,W], y_onehot [N,K,H,W] constant.
    /// Returns the mean over samples and foreground classes.
    pub fn soft_dice(tape: &mut Tape, logits: VarId, y_onehot: VarId) -> VarId {
        let shape = tape.value(logits).shape().to_vec();
        let (k, h, w) = (shape[1], shape[2], shape[3]);
        let hw = (h * w) as f64;
        let probs = tape.softmax_channels(logits);
        let inter = tape.mul(probs, y_onehot);
        let s_int = tape.global_avg_pool(inter);
        let s_int = tape.mul_scalar(s_int, hw);
        let s_p = tape.global_avg_pool(probs);
        let s_p = tape.mul_scalar(s_p, hw);
        let s_y = tape.global_avg_pool(y_onehot);
        let s_y = tape.mul_scalar(s_y, hw);
        let num = tape.mul_scalar(s_int, 2.0);
        let num = tape.add_scalar(num, super::DICE_EPS);
        let den = tape.add(s_p, s_y);
        let den = tape.add_scalar(den, super::DICE_EPS);
        let dice = tape.div(num, den);
        let fg = tape.slice_cols(dice, 1, k - 1);
        tape.mean(fg)
    }

    /// PSNR of estimate against a constant target, batch-global MSE.
    pub fn psnr(tape: &mut Tape, estimate: VarId, target: VarId, max_value: f64) -> VarId {
        let d = tape.sub(estimate, target);
        let sq = tape.square(d);
        let mse = tape.mean(sq);
        tape.psnr_from_mse(mse, max_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::{arr1, arr2, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_map(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn pull_x_perfect_alignment_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x_ref = rand_map(&mut rng, &[2, 4, 4]);
        let ts = vec![TransformSpec::rot90(), TransformSpec::flip_h()];
        let x_set: Vec<ArrayD<f64>> = ts
            .iter()
            .map(|t| apply_transform(t, &x_ref).unwrap())
            .collect();
        assert_eq!(pull_loss_x(&x_ref, &x_set, &ts).unwrap(), 0.0);
    }

    #[test]
    fn pull_x_constant_offset() {
        let x_ref = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        let x_set = vec![x_ref.mapv(|v| v + 1.0)];
        let ts = vec![TransformSpec::identity()];
        assert!((pull_loss_x(&x_ref, &x_set, &ts).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pull_x_matches_oracle_on_random_tensors() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x_ref = rand_map(&mut rng, &[2, 2, 2]);
            let ts = vec![TransformSpec::rot90(), TransformSpec::new(2, true, false)];
            let x_set = vec![rand_map(&mut rng, &[2, 2, 2]), rand_map(&mut rng, &[2, 2, 2])];
            let got = pull_loss_x(&x_ref, &x_set, &ts).unwrap();
            // Oracle: explicit loops, fresh transform application.
            let mut total = 0.0;
            for (i, t) in ts.iter().enumerate() {
                let moved = apply_transform(t, &x_ref).unwrap();
                let mut s = 0.0;
                let mut cnt = 0.0;
                for (a, b) in moved.iter().zip(x_set[i].iter()) {
                    s += (a - b) * (a - b);
                    cnt += 1.0;
                }
                total += s / cnt;
            }
            total /= ts.len() as f64;
            assert!((got - total).abs() < 1e-6);
        }
    }

    #[test]
    fn pull_x_rejects_mismatches() {
        let x_ref = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        assert!(pull_loss_x(&x_ref, &[], &[]).is_err());
        let bad = vec![ArrayD::zeros(IxDyn(&[1, 3, 3]))];
        assert!(pull_loss_x(&x_ref, &bad, &[TransformSpec::identity()]).is_err());
    }

    #[test]
    fn pull_delta_examples() {
        let same = vec![arr1(&[1.0, 2.0]), arr1(&[1.0, 2.0]), arr1(&[1.0, 2.0])];
        assert_eq!(pull_loss_delta(&same).unwrap(), 0.0);
        assert_eq!(pull_loss_delta(&[arr1(&[3.0])]).unwrap(), 0.0);
        let v = vec![arr1(&[0.0]), arr1(&[1.0]), arr1(&[2.0])];
        assert!((pull_loss_delta(&v).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pull_delta_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.random_range(2..5);
            let d = rng.random_range(1..4);
            let set: Vec<Array1<f64>> = (0..n)
                .map(|_| Array1::from_iter((0..d).map(|_| rng.random_range(-3.0..3.0))))
                .collect();
            let got = pull_loss_delta(&set).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut s = 0.0;
                        for k in 0..d {
                            let diff = set[j][k] - set[i][k];
                            s += diff * diff;
                        }
                        acc += s / d as f64;
                    }
                }
            }
            acc /= (n * (n - 1)) as f64;
            assert!((got - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn repel_closed_forms() {
        // Pooled x = (1, 0): one channel of ones, one of zeros.
        let mut x = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        x.slice_mut(ndarray::s![0, .., ..]).fill(1.0);
        let orth = vec![arr1(&[0.0, 1.0])];
        let par = vec![arr1(&[2.0, 0.0])];
        let diag = vec![arr1(&[1.0, 1.0])];
        let xs = vec![x.clone()];
        assert!(repel_loss(&xs, &orth).unwrap() < 1e-9);
        assert!((repel_loss(&xs, &par).unwrap() - 1.0).abs() < 1e-9);
        assert!((repel_loss(&xs, &diag).unwrap() - 0.5).abs() < 1e-9);
        // Zero delta: cosine defined as 0.
        let zero = vec![arr1(&[0.0, 0.0])];
        assert_eq!(repel_loss(&xs, &zero).unwrap(), 0.0);
    }

    #[test]
    fn repel_stays_in_unit_interval() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        for _ in 0..50 {
            let xs = vec![rand_map(&mut rng, &[3, 2, 2]), rand_map(&mut rng, &[3, 2, 2])];
            let ds = vec![
                Array1::from_iter((0..2).map(|_| rng.random_range(-2.0..2.0))),
                Array1::from_iter((0..2).map(|_| rng.random_range(-2.0..2.0))),
            ];
            let r = repel_loss(&xs, &ds).unwrap();
            assert!((0.0..=1.0).contains(&r), "repel {r} out of range");
        }
    }

    #[test]
    fn lasso_examples_and_oracle() {
        let zeros = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        assert_eq!(lasso_penalty(&zeros, &arr1(&[0.0, 0.0])), 0.0);
        let ones = ArrayD::from_elem(IxDyn(&[3, 2, 2]), 1.0);
        assert!((lasso_penalty(&ones, &arr1(&[0.0])) - 1.0).abs() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for _ in 0..100 {
            let x = rand_map(&mut rng, &[2, 3, 3]);
            let d = Array1::from_iter((0..4).map(|_| rng.random_range(-2.0..2.0_f64)));
            let got = lasso_penalty(&x, &d);
            let mx: f64 = x.iter().map(|v| v.abs()).sum::<f64>() / 18.0;
            let md: f64 = d.iter().map(|v| v.abs()).sum::<f64>() / 4.0;
            assert!((got - (mx + md)).abs() < 1e-6);
        }
    }

    #[test]
    fn dice_jaccard_examples() {
        let a = arr2(&[[1u8, 1], [0, 0]]);
        let b = arr2(&[[1u8, 1], [0, 0]]);
        assert_eq!(dice_score(&a, &b, 1), 1.0);
        assert_eq!(jaccard_score(&a, &b, 1), 1.0);

        let c = arr2(&[[0u8, 0], [1, 1]]);
        let d = arr2(&[[1u8, 1], [0, 0]]);
        assert_eq!(dice_score(&c, &d, 1), 0.0);
        assert_eq!(jaccard_score(&c, &d, 1), 0.0);

        // |A|=4, |B|=2, |A∩B|=2 -> dice 2/3; |A∪B|=4 -> jaccard 1/2.
        let p = arr2(&[[1u8, 1], [1, 1]]);
        let t = arr2(&[[1u8, 1], [0, 0]]);
        assert!((dice_score(&p, &t, 1) - 2.0 / 3.0).abs() < 1e-6);
        assert!((jaccard_score(&p, &t, 1) - 0.5).abs() < 1e-6);

        // Both empty for the queried class.
        let e = arr2(&[[0u8, 0], [0, 0]]);
        assert_eq!(dice_score(&e, &e, 2), 1.0);
        assert_eq!(jaccard_score(&e, &e, 2), 1.0);

        // Symmetry.
        assert_eq!(dice_score(&p, &t, 1), dice_score(&t, &p, 1));
        assert_eq!(jaccard_score(&p, &t, 1), jaccard_score(&t, &p, 1));
    }

    #[test]
    fn volume_metrics_pool_counts_over_slices() {
        // Slice 0 agrees perfectly, slice 1 misses all foreground. Pooled
        // voxel counts: |A|=4, |B|=8, inter=4 -> dice 2/3, jaccard 1/2,
        // different from the per-slice mean (1+0)/2.
        let mut pred = Array3::<u8>::zeros((2, 2, 2));
        let mut truth = Array3::<u8>::zeros((2, 2, 2));
        pred.index_axis_mut(ndarray::Axis(0), 0).fill(1);
        truth.index_axis_mut(ndarray::Axis(0), 0).fill(1);
        pred.index_axis_mut(ndarray::Axis(0), 1).fill(0);
        truth.index_axis_mut(ndarray::Axis(0), 1).fill(1);
        // pred class 1: 4 voxels (slice 0); truth class 1: 8; inter 4.
        assert!((volume_fg_mean_dice(&pred, &truth, 2) - 8.0 / 12.0).abs() < 1e-12);
        assert!((volume_fg_mean_jaccard(&pred, &truth, 2) - 4.0 / 8.0).abs() < 1e-12);

        // Two foreground classes average.
        let p = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i * 2 + j) as u8 % 3);
        assert_eq!(volume_fg_mean_dice(&p, &p, 3), 1.0);
        assert_eq!(volume_fg_mean_jaccard(&p, &p, 3), 1.0);
    }

    #[test]
    fn dice_jaccard_match_counting_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha12Rng| {
                Array2::from_shape_fn((4, 4), |_| rng.random_range(0..3) as u8)
            };
            let p = mk(&mut rng);
            let t = mk(&mut rng);
            for class in 0..3u8 {
                let inter = p
                    .iter()
                    .zip(t.iter())
                    .filter(|(a, b)| **a == class && **b == class)
                    .count();
                let na = p.iter().filter(|v| **v == class).count();
                let nb = t.iter().filter(|v| **v == class).count();
                let dice = if na + nb == 0 {
                    1.0
                } else {
                    2.0 * inter as f64 / (na + nb) as f64
                };
                let union = na + nb - inter;
                let jac = if union == 0 {
                    1.0
                } else {
                    inter as f64 / union as f64
                };
                assert!((dice_score(&p, &t, class) - dice).abs() < 1e-6);
                assert!((jaccard_score(&p, &t, class) - jac).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_dice_saturates_to_hard_dice() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mask = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..3) as u8);
        // Logits +20 on the true class, -20 elsewhere: predicted = truth.
        let mut logits = Array3::from_elem((3, 6, 6), -20.0);
        for i in 0..6 {
            for j in 0..6 {
                logits[[mask[[i, j]] as usize, i, j]] = 20.0;
            }
        }
        let soft = soft_dice_utility(&logits, &mask).unwrap();
        let pred = mask.clone();
        let hard = (dice_score(&pred, &mask, 1) + dice_score(&pred, &mask, 2)) / 2.0;
        assert!((soft - hard).abs() < 1e-3, "soft {soft} vs hard {hard}");
    }

    #[test]
    fn soft_dice_handles_empty_foreground() {
        let mask = Array2::<u8>::zeros((4, 4));
        let logits = Array3::<f64>::zeros((3, 4, 4));
        let v = soft_dice_utility(&logits, &mask).unwrap();
        assert!(v.is_finite());
        assert!(v < 0.01, "epsilon-dominated value expected, got {v}");
    }

    #[test]
    fn soft_dice_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        for _ in 0..100 {
            let k = 3;
            let mask = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..k) as u8);
            let logits = Array3::from_shape_fn((k as usize, 4, 4), |_| rng.random_range(-2.0..2.0));
            let got = soft_dice_utility(&logits, &mask).unwrap();

            let mut acc = 0.0;
            for c in 1..k as usize {
                let mut pc = 0.0;
                let mut yc = 0.0;
                let mut pyc = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        let mut z = 0.0;
                        for cc in 0..k as usize {
                            z += logits[[cc, i, j]].exp();
                        }
                        let p = logits[[c, i, j]].exp() / z;
                        let y = if mask[[i, j]] as usize == c { 1.0 } else { 0.0 };
                        pc += p;
                        yc += y;
                        pyc += p * y;
                    }
                }
                acc += (2.0 * pyc + DICE_EPS) / (pc + yc + DICE_EPS);
            }
            acc /= (k - 1) as f64;
            assert!((got - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_closed_forms_and_monotonicity() {
        let a = ArrayD::from_elem(IxDyn(&[4]), 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);

        let zeros = ArrayD::zeros(IxDyn(&[4]));
        let off01 = ArrayD::from_elem(IxDyn(&[4]), 0.1); // MSE 0.01
        assert!((psnr(&zeros, &off01, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let off1 = ArrayD::from_elem(IxDyn(&[4]), 1.0); // MSE 1
        assert!(psnr(&zeros, &off1, 1.0).unwrap().abs() < 1e-9);

        let mut last = f64::INFINITY;
        for mse in [1e-8f64, 1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0] {
            let est = ArrayD::from_elem(IxDyn(&[4]), mse.sqrt());
            let v = psnr(&zeros, &est, 1.0).unwrap();
            assert!(v < last, "psnr must strictly decrease, {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn total_objective_weights() {
        let zero = total_objective(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.05).unwrap();
        assert_eq!(zero.total, 0.0);
        let lasso = total_objective(0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 5.0, 0.05).unwrap();
        assert_eq!(lasso.total, 5.0);
        let udelta = total_objective(0.0, 0.0, 0.0, 0.0, 0.0, 20.0, 5.0, 0.05).unwrap();
        assert!((udelta.total + 1.0).abs() < 1e-12);

        let err = total_objective(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.05);
        match err {
            Err(SdsegError::NonFinite { term, .. }) => assert_eq!(term, "pull_x"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn graph_builders_agree_with_plain_functions() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let b = 2;
        let n = 3;
        let (cx, cd, hp) = (4, 3, 4);

        // Per-window data.
        let x_ref: Vec<ArrayD<f64>> = (0..b).map(|_| rand_map(&mut rng, &[cx, hp, hp])).collect();
        let x_trans: Vec<Vec<ArrayD<f64>>> = (0..b)
            .map(|_| (0..n).map(|_| rand_map(&mut rng, &[cx, hp, hp])).collect())
            .collect();
        let deltas: Vec<Vec<Array1<f64>>> = (0..b)
            .map(|_| {
                (0..n)
                    .map(|_| Array1::from_iter((0..cd).map(|_| rng.random_range(-1.0..1.0_f64))))
                    .collect()
            })
            .collect();
        let ts: Vec<Vec<TransformSpec>> = (0..b)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let all = TransformSpec::all_canonical();
                        all[rng.random_range(0..8)]
                    })
                    .collect()
            })
            .collect();

        // Stack into block layout.
        let mut xr = ArrayD::zeros(IxDyn(&[b, cx, hp, hp]));
        for (bi, x) in x_ref.iter().enumerate() {
            xr.index_axis_mut(ndarray::Axis(0), bi).assign(x);
        }
        let mut xt = ArrayD::zeros(IxDyn(&[n * b, cx, hp, hp]));
        let mut dt = ArrayD::zeros(IxDyn(&[n * b, cd]));
        let mut flat_ts = Vec::new();
        for i in 0..n {
            for bi in 0..b {
                xt.index_axis_mut(ndarray::Axis(0), i * b + bi)
                    .assign(&x_trans[bi][i]);
                dt.index_axis_mut(ndarray::Axis(0), i * b + bi)
                    .assign(&deltas[bi][i]);
                flat_ts.push(ts[bi][i]);
            }
        }

        let mut tape = Tape::new();
        let xr_id = tape.leaf(xr);
        let xt_id = tape.leaf(xt);
        let dt_id = tape.leaf(dt);

        let g_pull_x = graph::pull_x(&mut tape, xr_id, xt_id, flat_ts, n);
        let mut plain_pull_x = 0.0;
        for bi in 0..b {
            plain_pull_x += pull_loss_x(&x_ref[bi], &x_trans[bi], &ts[bi]).unwrap();
        }
        plain_pull_x /= b as f64;
        assert!((tape.scalar_value(g_pull_x) - plain_pull_x).abs() < 1e-9);

        let g_pull_d = graph::pull_delta(&mut tape, dt_id, n, b);
        let mut plain_pull_d = 0.0;
        for win in &deltas {
            plain_pull_d += pull_loss_delta(win).unwrap();
        }
        plain_pull_d /= b as f64;
        assert!((tape.scalar_value(g_pull_d) - plain_pull_d).abs() < 1e-9);

        let g_repel = graph::repel(&mut tape, xt_id, dt_id, cd);
        let mut flat_xs = Vec::new();
        let mut flat_ds = Vec::new();
        for i in 0..n {
            for bi in 0..b {
                flat_xs.push(x_trans[bi][i].clone());
                flat_ds.push(deltas[bi][i].clone());
            }
        }
        let plain_repel = repel_loss(&flat_xs, &flat_ds).unwrap();
        assert!((tape.scalar_value(g_repel) - plain_repel).abs() < 1e-9);

        let delta_ref_rows = tape.slice_batch(dt_id, 0, b);
        let g_lasso = graph::lasso(&mut tape, xr_id, delta_ref_rows);
        let mut plain_lasso_x = 0.0;
        let mut plain_lasso_d = 0.0;
        for bi in 0..b {
            plain_lasso_x += x_ref[bi].iter().map(|v| v.abs()).sum::<f64>();
            plain_lasso_d += deltas[bi][0].iter().map(|v| v.abs()).sum::<f64>();
        }
        plain_lasso_x /= (b * cx * hp * hp) as f64;
        plain_lasso_d /= (b * cd) as f64;
        assert!((tape.scalar_value(g_lasso) - (plain_lasso_x + plain_lasso_d)).abs() < 1e-9);
    }

    #[test]
    fn graph_soft_dice_and_psnr_agree_with_plain() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let (n, k, hp) = (3, 3, 4);
        let mut logits4 = ArrayD::zeros(IxDyn(&[n, k, hp, hp]));
        let mut onehot = ArrayD::zeros(IxDyn(&[n, k, hp, hp]));
        let mut plain = 0.0;
        for ni in 0..n {
            let logits = Array3::from_shape_fn((k, hp, hp), |_| rng.random_range(-2.0..2.0));
            let mask = Array2::from_shape_fn((hp, hp), |_| rng.random_range(0..k as i32) as u8);
            plain += soft_dice_utility(&logits, &mask).unwrap();
            for i in 0..hp {
                for j in 0..hp {
                    for c in 0..k {
                        logits4[[ni, c, i, j]] = logits[[c, i, j]];
                    }
                    onehot[[ni, mask[[i, j]] as usize, i, j]] = 1.0;
                }
            }
        }
        plain /= n as f64;
        let mut tape = Tape::new();
        let l_id = tape.leaf(logits4);
        let y_id = tape.leaf(onehot);
        let g = graph::soft_dice(&mut tape, l_id, y_id);
        assert!((tape.scalar_value(g) - plain).abs() < 1e-9);

        let target = rand_map(&mut rng, &[2, 3, 3]).mapv(|v| v.abs() % 1.0);
        let est = rand_map(&mut rng, &[2, 3, 3]).mapv(|v| v.abs() % 1.0);
        let plain_p = psnr(&target, &est, 1.0).unwrap();
        let mut tape = Tape::new();
        let e_id = tape.leaf(est);
        let t_id = tape.leaf(target);
        let g_p = graph::psnr(&mut tape, e_id, t_id, 1.0);
        assert!((tape.scalar_value(g_p) - plain_p).abs() < 1e-9);
    }
}
