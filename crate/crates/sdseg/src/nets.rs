//! The four parametric players: anatomical encoder, domain encoder,
//! segmentation decoder, and the delta-conditioned reconstruction decoder.
//!
//! All nets are plain strided-conv / transposed-conv stacks with one
//! normalization-free residual block, sized by [`NetConfig`]. Parameters live
//! in [`ParamSet`]s; graph builders insert them as tape leaves so the same
//! definitions serve training (with gradients) and inference.

use crate::error::{Result, SdsegError};
use crate::tape::{Tape, VarId};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Architecture hyperparameters shared by all four nets.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of stride-2 down stages in the encoders (and up stages in the
    /// decoders). Input H and W must be divisible by 2^depth.
    pub depth: usize,
    /// Channels of the spatial anatomical map.
    pub x_channels: usize,
    /// Dimension of the pooled domain vector.
    pub delta_dim: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 16,
            depth: 3,
            x_channels: 32,
            delta_dim: 16,
            num_classes: 3,
        }
    }
}

impl NetConfig {
    /// Small sizing for fast desk runs.
    pub fn desk(num_classes: usize) -> Self {
        NetConfig {
            base_channels: 6,
            depth: 2,
            x_channels: 16,
            delta_dim: 6,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.depth == 0
            || self.x_channels == 0
            || self.delta_dim == 0
        {
            return Err(SdsegError::Config(
                "net config: all sizes must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(SdsegError::Config(
                "net config: need at least 2 classes".into(),
            ));
        }
        if self.delta_dim > self.x_channels {
            // The repel loss compares delta against the first delta_dim
            // channels of the pooled anatomical map.
            return Err(SdsegError::Config(format!(
                "net config: delta_dim {} exceeds x_channels {}",
                self.delta_dim, self.x_channels
            )));
        }
        Ok(())
    }

    /// Trunk channels at the bottleneck.
    fn trunk_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    pub fn validate_window(&self, shape: &[usize]) -> Result<()> {
        let div = 1usize << self.depth;
        let ok = shape.len() == 3
            && shape[0] == 3
            && shape[1] == shape[2]
            && shape[1] % div == 0
            && shape[1] >= div;
        if !ok {
            return Err(SdsegError::InvalidArgument(format!(
                "window: expected shape [3, s, s] with s a positive multiple of {div}, got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn validate_x_map(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 3 && shape[0] == self.x_channels && shape[1] == shape[2];
        if !ok {
            return Err(SdsegError::InvalidArgument(format!(
                "x_map: expected shape [{}, s, s], got {shape:?}",
                self.x_channels
            )));
        }
        Ok(())
    }
}

/// One named tensor of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
}

/// All parameters of one net, in a fixed build order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub name: String,
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Content digest over names, shapes, and little-endian values. Two sets
    /// hash equal iff they are bit-identical.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        for e in &self.entries {
            hasher.update([0xff]);
            hasher.update(e.name.as_bytes());
            hasher.update([0xfe]);
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Inserts every entry as a tape leaf, in order.
    pub fn insert_into(&self, tape: &mut Tape) -> Vec<VarId> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }
}

/// He-normal init for a conv weight [Co, Ci, k, k].
fn conv_init(
    rng: &mut ChaCha12Rng,
    co: usize,
    ci: usize,
    k: usize,
    entries: &mut Vec<ParamEntry>,
    name: &str,
) {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let w: Vec<f64> = (0..co * ci * k * k).map(|_| dist.sample(rng)).collect();
    entries.push(ParamEntry {
        name: format!("{name}.w"),
        value: ArrayD::from_shape_vec(IxDyn(&[co, ci, k, k]), w).unwrap(),
    });
    entries.push(ParamEntry {
        name: format!("{name}.b"),
        value: ArrayD::zeros(IxDyn(&[co])),
    });
}

/// Init for a transposed-conv weight [Ci, Co, 2, 2]. Stride-2 kernel-2 means
/// each output pixel sees exactly Ci contributions.
fn convt_init(
    rng: &mut ChaCha12Rng,
    ci: usize,
    co: usize,
    entries: &mut Vec<ParamEntry>,
    name: &str,
) {
    let std = (2.0 / ci as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let w: Vec<f64> = (0..ci * co * 4).map(|_| dist.sample(rng)).collect();
    entries.push(ParamEntry {
        name: format!("{name}.w"),
        value: ArrayD::from_shape_vec(IxDyn(&[ci, co, 2, 2]), w).unwrap(),
    });
    entries.push(ParamEntry {
        name: format!("{name}.b"),
        value: ArrayD::zeros(IxDyn(&[co])),
    });
}

fn zero_linear(fin: usize, fout: usize, entries: &mut Vec<ParamEntry>, name: &str) {
    entries.push(ParamEntry {
        name: format!("{name}.w"),
        value: ArrayD::zeros(IxDyn(&[fin, fout])),
    });
    entries.push(ParamEntry {
        name: format!("{name}.b"),
        value: ArrayD::zeros(IxDyn(&[fout])),
    });
}

/// Shared encoder trunk: stem, `depth` stride-2 stages, one residual block.
fn encoder_trunk_init(cfg: &NetConfig, rng: &mut ChaCha12Rng, entries: &mut Vec<ParamEntry>) {
    conv_init(rng, cfg.base_channels, 3, 3, entries, "stem");
    let mut c = cfg.base_channels;
    for i in 0..cfg.depth {
        conv_init(rng, c * 2, c, 3, entries, &format!("down{i}"));
        c *= 2;
    }
    conv_init(rng, c, c, 3, entries, "res1");
    conv_init(rng, c, c, 3, entries, "res2");
}

pub fn init_anatomy_encoder(cfg: &NetConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut entries = Vec::new();
    encoder_trunk_init(cfg, rng, &mut entries);
    conv_init(rng, cfg.x_channels, cfg.trunk_channels(), 1, &mut entries, "head");
    ParamSet {
        name: "anatomy_encoder".into(),
        entries,
    }
}

pub fn init_domain_encoder(cfg: &NetConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut entries = Vec::new();
    encoder_trunk_init(cfg, rng, &mut entries);
    conv_init(rng, cfg.delta_dim, cfg.trunk_channels(), 1, &mut entries, "head");
    ParamSet {
        name: "domain_encoder".into(),
        entries,
    }
}

fn decoder_init(
    cfg: &NetConfig,
    rng: &mut ChaCha12Rng,
    out_channels: usize,
    modulated: bool,
    name: &str,
) -> ParamSet {
    let mut entries = Vec::new();
    let mut c = cfg.trunk_channels();
    conv_init(rng, c, cfg.x_channels, 1, &mut entries, "inproj");
    for i in 0..cfg.depth {
        convt_init(rng, c, c / 2, &mut entries, &format!("up{i}"));
        c /= 2;
        if modulated {
            zero_linear(cfg.delta_dim, c, &mut entries, &format!("mod{i}.scale"));
            zero_linear(cfg.delta_dim, c, &mut entries, &format!("mod{i}.shift"));
        }
    }
    conv_init(rng, out_channels, c, 3, &mut entries, "out");
    ParamSet {
        name: name.into(),
        entries,
    }
}

pub fn init_segmentation_decoder(cfg: &NetConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    decoder_init(cfg, rng, cfg.num_classes, false, "segmentation_decoder")
}

pub fn init_reconstruction_decoder(cfg: &NetConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    decoder_init(cfg, rng, 3, true, "reconstruction_decoder")
}

struct Cursor<'a> {
    ids: &'a [VarId],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(ids: &'a [VarId]) -> Self {
        Cursor { ids, pos: 0 }
    }
    fn next(&mut self) -> VarId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }
    fn finish(self) {
        assert_eq!(self.pos, self.ids.len(), "unused parameters in builder");
    }
}

fn encoder_trunk_graph(tape: &mut Tape, cur: &mut Cursor, x: VarId, depth: usize) -> VarId {
    let (w, b) = (cur.next(), cur.next());
    let mut h = tape.conv2d(x, w, b, 1, 1);
    h = tape.elu(h);
    for _ in 0..depth {
        let (w, b) = (cur.next(), cur.next());
        h = tape.conv2d(h, w, b, 2, 1);
        h = tape.elu(h);
    }
    let (w1, b1) = (cur.next(), cur.next());
    let mut r = tape.conv2d(h, w1, b1, 1, 1);
    r = tape.elu(r);
    let (w2, b2) = (cur.next(), cur.next());
    r = tape.conv2d(r, w2, b2, 1, 1);
    let s = tape.add(h, r);
    tape.elu(s)
}

/// Batched anatomical encoder: [N,3,H,W] -> [N,Cx,H/2^d,W/2^d].
pub fn anatomy_encoder_graph(tape: &mut Tape, ids: &[VarId], x: VarId, cfg: &NetConfig) -> VarId {
    let mut cur = Cursor::new(ids);
    let h = encoder_trunk_graph(tape, &mut cur, x, cfg.depth);
    let (w, b) = (cur.next(), cur.next());
    let out = tape.conv2d(h, w, b, 1, 0);
    cur.finish();
    out
}

/// Batched domain encoder: [N,3,H,W] -> [N,Cd].
pub fn domain_encoder_graph(tape: &mut Tape, ids: &[VarId], x: VarId, cfg: &NetConfig) -> VarId {
    let mut cur = Cursor::new(ids);
    let h = encoder_trunk_graph(tape, &mut cur, x, cfg.depth);
    let (w, b) = (cur.next(), cur.next());
    let mapped = tape.conv2d(h, w, b, 1, 0);
    cur.finish();
    tape.global_avg_pool(mapped)
}

/// Batched segmentation decoder: [N,Cx,h,w] -> logits [N,K,2^d·h,2^d·w].
pub fn segmentation_decoder_graph(
    tape: &mut Tape,
    ids: &[VarId],
    x_map: VarId,
    cfg: &NetConfig,
) -> VarId {
    let mut cur = Cursor::new(ids);
    let (w, b) = (cur.next(), cur.next());
    let mut h = tape.conv2d(x_map, w, b, 1, 0);
    h = tape.elu(h);
    for _ in 0..cfg.depth {
        let (w, b) = (cur.next(), cur.next());
        h = tape.conv_transpose_2x2(h, w, b);
        h = tape.elu(h);
    }
    let (w, b) = (cur.next(), cur.next());
    let out = tape.conv2d(h, w, b, 1, 1);
    cur.finish();
    out
}

/// Batched reconstruction decoder: ([N,Cx,h,w], [N,Cd]) -> [N,3,2^d·h,2^d·w].
/// Delta enters through per-stage channel-wise affine modulation.
pub fn reconstruction_decoder_graph(
    tape: &mut Tape,
    ids: &[VarId],
    x_map: VarId,
    delta: VarId,
    cfg: &NetConfig,
) -> VarId {
    let mut cur = Cursor::new(ids);
    let (w, b) = (cur.next(), cur.next());
    let mut h = tape.conv2d(x_map, w, b, 1, 0);
    h = tape.elu(h);
    for _ in 0..cfg.depth {
        let (w, b) = (cur.next(), cur.next());
        h = tape.conv_transpose_2x2(h, w, b);
        let (sw, sb) = (cur.next(), cur.next());
        let scale = tape.linear(delta, sw, sb);
        let (tw, tb) = (cur.next(), cur.next());
        let shift = tape.linear(delta, tw, tb);
        h = tape.channel_scale_shift(h, scale, shift);
        h = tape.elu(h);
    }
    let (w, b) = (cur.next(), cur.next());
    let out = tape.conv2d(h, w, b, 1, 1);
    cur.finish();
    out
}

fn batch_of_one(a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(a.shape());
    a.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn drop_batch(a: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.shape()[0], 1);
    let shape: Vec<usize> = a.shape()[1..].to_vec();
    a.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

/// Single-window anatomical encoding: [3,H,W] -> [Cx,H/2^d,W/2^d].
pub fn encode_x(cfg: &NetConfig, params: &ParamSet, window: &Array3<f64>) -> Result<ArrayD<f64>> {
    cfg.validate()?;
    cfg.validate_window(window.shape())?;
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape);
    let x = tape.leaf(batch_of_one(&window.clone().into_dyn()));
    let out = anatomy_encoder_graph(&mut tape, &ids, x, cfg);
    Ok(drop_batch(tape.value(out)))
}

/// Single-window domain encoding: [3,H,W] -> [Cd].
pub fn encode_delta(
    cfg: &NetConfig,
    params: &ParamSet,
    window: &Array3<f64>,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    cfg.validate_window(window.shape())?;
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape);
    let x = tape.leaf(batch_of_one(&window.clone().into_dyn()));
    let out = domain_encoder_graph(&mut tape, &ids, x, cfg);
    let v = drop_batch(tape.value(out));
    Ok(Array1::from_iter(v.iter().cloned()))
}

/// Single-sample segmentation logits: [Cx,h,w] -> [K,2^d·h,2^d·w].
pub fn decode_segmentation(
    cfg: &NetConfig,
    params: &ParamSet,
    x_map: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    cfg.validate()?;
    cfg.validate_x_map(x_map.shape())?;
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape);
    let x = tape.leaf(batch_of_one(x_map));
    let out = segmentation_decoder_graph(&mut tape, &ids, x, cfg);
    Ok(drop_batch(tape.value(out)))
}

/// Single-sample reconstruction: ([Cd], [Cx,h,w]) -> [3,2^d·h,2^d·w].
pub fn decode_reconstruction(
    cfg: &NetConfig,
    params: &ParamSet,
    delta_vec: &Array1<f64>,
    x_map: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    cfg.validate()?;
    cfg.validate_x_map(x_map.shape())?;
    if delta_vec.len() != cfg.delta_dim {
        return Err(SdsegError::InvalidArgument(format!(
            "delta_vec: expected length {}, got {}",
            cfg.delta_dim,
            delta_vec.len()
        )));
    }
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape);
    let x = tape.leaf(batch_of_one(x_map));
    let d = tape.leaf(
        ArrayD::from_shape_vec(IxDyn(&[1, delta_vec.len()]), delta_vec.to_vec()).unwrap(),
    );
    let out = reconstruction_decoder_graph(&mut tape, &ids, x, d, cfg);
    Ok(drop_batch(tape.value(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, TransformSpec};
    use crate::seeding::derive_rng;
    use ndarray::Array3;

    fn tiny() -> NetConfig {
        NetConfig {
            base_channels: 2,
            depth: 1,
            x_channels: 4,
            delta_dim: 2,
            num_classes: 2,
        }
    }

    fn rand_window(cfg: &NetConfig, side: usize, seed: u64) -> Array3<f64> {
        let _ = cfg;
        let mut rng = derive_rng(seed, &["win"]);
        use rand::Rng;
        Array3::from_shape_fn((3, side, side), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn param_counts_are_stable_and_exact() {
        let cfg = tiny();
        let mut rng = derive_rng(1, &["p"]);
        let ex = init_anatomy_encoder(&cfg, &mut rng);
        let ed = init_domain_encoder(&cfg, &mut rng);
        let fy = init_segmentation_decoder(&cfg, &mut rng);
        let fi = init_reconstruction_decoder(&cfg, &mut rng);
        // Hand-counted from the layer shapes.
        assert_eq!(ex.param_count(), 448);
        assert_eq!(ed.param_count(), 438);
        assert_eq!(fy.param_count(), 92);
        assert_eq!(fi.param_count(), 123);
        // Same seed, same bits.
        let mut rng2 = derive_rng(1, &["p"]);
        assert_eq!(
            init_anatomy_encoder(&cfg, &mut rng2).content_hash(),
            ex.content_hash()
        );
        // Different seed, different bits.
        let mut rng3 = derive_rng(2, &["p"]);
        assert_ne!(
            init_anatomy_encoder(&cfg, &mut rng3).content_hash(),
            ex.content_hash()
        );
    }

    #[test]
    fn config_validation_rejects_bad_sizes() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = NetConfig::default();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = NetConfig::default();
        c.delta_dim = c.x_channels + 1;
        assert!(c.validate().is_err());
        let mut c = NetConfig::default();
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zeroed_head_forces_zero_x_map() {
        let cfg = tiny();
        let mut rng = derive_rng(3, &["z"]);
        let mut params = init_anatomy_encoder(&cfg, &mut rng);
        for e in params.entries.iter_mut() {
            if e.name.starts_with("head") {
                e.value.fill(0.0);
            }
        }
        let out = encode_x(&cfg, &params, &rand_window(&cfg, 8, 7)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_config_shapes_match() {
        let cfg = NetConfig::default();
        let mut rng = derive_rng(4, &["s"]);
        let ex = init_anatomy_encoder(&cfg, &mut rng);
        let ed = init_domain_encoder(&cfg, &mut rng);
        let fy = init_segmentation_decoder(&cfg, &mut rng);
        let fi = init_reconstruction_decoder(&cfg, &mut rng);
        let window = rand_window(&cfg, 32, 8);
        let x_map = encode_x(&cfg, &ex, &window).unwrap();
        assert_eq!(x_map.shape(), [32, 4, 4]);
        let delta = encode_delta(&cfg, &ed, &window).unwrap();
        assert_eq!(delta.len(), 16);
        let logits = decode_segmentation(&cfg, &fy, &x_map).unwrap();
        assert_eq!(logits.shape(), [3, 32, 32]);
        let recon = decode_reconstruction(&cfg, &fi, &delta, &x_map).unwrap();
        assert_eq!(recon.shape(), [3, 32, 32]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let mut rng = derive_rng(5, &["d"]);
        let ex = init_anatomy_encoder(&cfg, &mut rng);
        let window = rand_window(&cfg, 8, 9);
        let a = encode_x(&cfg, &ex, &window).unwrap();
        let b = encode_x(&cfg, &ex, &window).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_window_gives_transform_invariant_delta() {
        let cfg = tiny();
        let mut rng = derive_rng(6, &["c"]);
        let ed = init_domain_encoder(&cfg, &mut rng);
        let window = Array3::from_elem((3, 8, 8), 0.37).into_dyn();
        let t = TransformSpec::new(1, true, false);
        let transformed = apply_transform(&t, &window).unwrap();
        let d1 = encode_delta(&cfg, &ed, &window.clone().into_dimensionality().unwrap()).unwrap();
        let d2 =
            encode_delta(&cfg, &ed, &transformed.into_dimensionality().unwrap()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn segmentation_gradient_reaches_x_map() {
        let cfg = tiny();
        let mut rng = derive_rng(7, &["g"]);
        let fy = init_segmentation_decoder(&cfg, &mut rng);
        let mut x_map = ArrayD::zeros(IxDyn(&[4, 4, 4]));
        {
            use rand::Rng;
            let mut r = derive_rng(8, &["x"]);
            x_map.mapv_inplace(|_| r.random_range(-1.0..1.0));
        }
        let probe = |m: &ArrayD<f64>| -> f64 {
            let l = decode_segmentation(&cfg, &fy, m).unwrap();
            l.iter().map(|v| v * v).sum()
        };
        let base = probe(&x_map);
        let mut bumped = x_map.clone();
        bumped[[0, 1, 2]] += 1e-4;
        assert!((probe(&bumped) - base).abs() > 0.0, "no gradient into x_map");
    }

    #[test]
    fn zero_init_modulation_ignores_delta() {
        let cfg = tiny();
        let mut rng = derive_rng(9, &["m"]);
        let fi = init_reconstruction_decoder(&cfg, &mut rng);
        let x_map = {
            use rand::Rng;
            let mut r = derive_rng(11, &["xm"]);
            ArrayD::from_shape_fn(IxDyn(&[4, 4, 4]), |_| r.random_range(-1.0..1.0))
        };
        let d1 = Array1::from_vec(vec![0.3, -0.8]);
        let d2 = Array1::from_vec(vec![5.0, 2.0]);
        let r1 = decode_reconstruction(&cfg, &fi, &d1, &x_map).unwrap();
        let r2 = decode_reconstruction(&cfg, &fi, &d2, &x_map).unwrap();
        assert_eq!(r1, r2, "zero-init heads must ignore delta");

        // Randomize the modulation heads: deltas must now matter.
        let mut fi2 = fi.clone();
        {
            use rand::Rng;
            let mut r = derive_rng(12, &["mh"]);
            for e in fi2.entries.iter_mut() {
                if e.name.contains("mod") {
                    e.value.mapv_inplace(|_| r.random_range(-0.5..0.5));
                }
            }
        }
        let r1 = decode_reconstruction(&cfg, &fi2, &d1, &x_map).unwrap();
        let r2 = decode_reconstruction(&cfg, &fi2, &d2, &x_map).unwrap();
        let dist: f64 = r1
            .iter()
            .zip(r2.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(dist > 0.0, "nonzero heads must separate deltas");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let mut rng = derive_rng(13, &["all"]);
        let ex = init_anatomy_encoder(&cfg, &mut rng);
        let ed = init_domain_encoder(&cfg, &mut rng);
        let fy = init_segmentation_decoder(&cfg, &mut rng);
        let mut fi = init_reconstruction_decoder(&cfg, &mut rng);
        // Zero-init heads would get zero (but present) grads; randomize so the
        // presence check is meaningful everywhere.
        {
            use rand::Rng;
            let mut r = derive_rng(14, &["mh"]);
            for e in fi.entries.iter_mut() {
                if e.name.contains("mod") {
                    e.value.mapv_inplace(|_| r.random_range(-0.1..0.1));
                }
            }
        }
        let window = rand_window(&cfg, 8, 15);

        let mut tape = Tape::new();
        let ex_ids = ex.insert_into(&mut tape);
        let ed_ids = ed.insert_into(&mut tape);
        let fy_ids = fy.insert_into(&mut tape);
        let fi_ids = fi.insert_into(&mut tape);
        let x = tape.leaf(batch_of_one(&window.into_dyn()));
        let x_map = anatomy_encoder_graph(&mut tape, &ex_ids, x, &cfg);
        let delta = domain_encoder_graph(&mut tape, &ed_ids, x, &cfg);
        let logits = segmentation_decoder_graph(&mut tape, &fy_ids, x_map, &cfg);
        let recon = reconstruction_decoder_graph(&mut tape, &fi_ids, x_map, delta, &cfg);
        let a = tape.square(logits);
        let a = tape.mean(a);
        let b = tape.square(recon);
        let b = tape.mean(b);
        let total = tape.add(a, b);
        let grads = tape.backward(total);
        for (ids, set) in [(&ex_ids, &ex), (&ed_ids, &ed), (&fy_ids, &fy), (&fi_ids, &fi)] {
            for (id, e) in ids.iter().zip(&set.entries) {
                let g = grads.wrt(*id);
                assert!(
                    g.is_some(),
                    "{}::{} never received a gradient",
                    set.name,
                    e.name
                );
                assert_eq!(g.unwrap().shape(), e.value.shape());
            }
        }
    }

    #[test]
    fn shape_errors_name_expected_and_actual() {
        let cfg = tiny();
        let mut rng = derive_rng(16, &["e"]);
        let ex = init_anatomy_encoder(&cfg, &mut rng);
        let bad = Array3::<f64>::zeros((3, 8, 6));
        let err = encode_x(&cfg, &ex, &bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 8, 6]"), "missing actual shape: {msg}");
        assert!(msg.contains("window"), "missing context: {msg}");
    }
}
