//! Exact geometric transform group (dihedral group of the square).
//!
//! The transform set is quarter-turn rotations crossed with axis flips, applied
//! as pure index permutations over the trailing two dimensions of an array.
//! Labels and feature maps are permuted, never resampled, so transport is
//! lossless and the equivariance losses are exactly computable.
//!
//! Conventions, fixed for cross-implementation test vectors:
//! - `rot90` is counterclockwise: `out[i][j] = in[j][N-1-i]`.
//! - A spec's action is: rotate first, then horizontal flip, then vertical flip.
//! - Canonical form uses only rotation + horizontal flip (`flip_vertical` is
//!   folded away via `flip_v = flip_h ∘ rot180`), giving exactly 8 elements.

use crate::error::{Result, SdsegError};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One element of the exact transform group.
///
/// Any (rotation, flip_h, flip_v) triple is a valid spec; triples with the
/// same pixel action canonicalize to the same element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformSpec {
    /// Number of 90° counterclockwise quarter turns, in {0,1,2,3}.
    pub rotation_quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl TransformSpec {
    pub fn new(rotation_quarter_turns: u8, flip_horizontal: bool, flip_vertical: bool) -> Self {
        TransformSpec {
            rotation_quarter_turns: rotation_quarter_turns % 4,
            flip_horizontal,
            flip_vertical,
        }
    }

    pub const fn identity() -> Self {
        TransformSpec {
            rotation_quarter_turns: 0,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    pub const fn rot90() -> Self {
        TransformSpec {
            rotation_quarter_turns: 1,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    pub const fn flip_h() -> Self {
        TransformSpec {
            rotation_quarter_turns: 0,
            flip_horizontal: true,
            flip_vertical: false,
        }
    }

    pub const fn flip_v() -> Self {
        TransformSpec {
            rotation_quarter_turns: 0,
            flip_horizontal: false,
            flip_vertical: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        let c = self.canonicalize();
        c.rotation_quarter_turns == 0 && !c.flip_horizontal
    }

    /// Reduce to the canonical representative of the same pixel action.
    ///
    /// Uses `flip_v = flip_h ∘ rot180`, so canonical forms never carry a
    /// vertical flip. Two specs act identically on every array iff their
    /// canonical forms are equal.
    pub fn canonicalize(&self) -> TransformSpec {
        let mut r = self.rotation_quarter_turns % 4;
        let mut h = self.flip_horizontal;
        if self.flip_vertical {
            r = (r + 2) % 4;
            h = !h;
        }
        TransformSpec {
            rotation_quarter_turns: r,
            flip_horizontal: h,
            flip_vertical: false,
        }
    }

    /// All 8 canonical group elements, identity first.
    pub fn all_canonical() -> [TransformSpec; 8] {
        let mut out = [TransformSpec::identity(); 8];
        for r in 0..4u8 {
            out[r as usize] = TransformSpec::new(r, false, false);
            out[4 + r as usize] = TransformSpec::new(r, true, false);
        }
        out
    }
}

/// Composition `t1 ∘ t2`: applying the result equals applying `t2` first,
/// then `t1`. The result is canonical.
pub fn compose(t1: &TransformSpec, t2: &TransformSpec) -> TransformSpec {
    let a = t1.canonicalize();
    let b = t2.canonicalize();
    // With canonical forms H^m R^r: (H^m1 R^r1)(H^m2 R^r2)
    //   = H^(m1 xor m2) R^(r2 - r1)  when m2,
    //   = H^m1 R^(r1 + r2)           otherwise.
    let (r1, m1) = (a.rotation_quarter_turns, a.flip_horizontal);
    let (r2, m2) = (b.rotation_quarter_turns, b.flip_horizontal);
    let m = m1 ^ m2;
    let r = if m2 { (4 + r2 - r1) % 4 } else { (r1 + r2) % 4 };
    TransformSpec::new(r, m, false)
}

/// Group inverse; canonical. Reflections are involutions, rotations invert
/// by negation.
pub fn invert(t: &TransformSpec) -> TransformSpec {
    let c = t.canonicalize();
    if c.flip_horizontal {
        c
    } else {
        TransformSpec::new((4 - c.rotation_quarter_turns) % 4, false, false)
    }
}

/// Apply the transform over the last two dimensions of `a`.
///
/// A pure index permutation: leading dimensions are untouched and the value
/// multiset is preserved exactly. Odd rotations require square trailing dims.
pub fn apply_transform<T: Clone>(t: &TransformSpec, a: &ArrayD<T>) -> Result<ArrayD<T>> {
    let shape = a.shape().to_vec();
    if shape.len() < 2 {
        return Err(SdsegError::InvalidArgument(format!(
            "apply_transform needs at least 2 dimensions, got shape {shape:?}"
        )));
    }
    let rows = shape[shape.len() - 2];
    let cols = shape[shape.len() - 1];
    let c = t.canonicalize();
    if c.rotation_quarter_turns % 2 == 1 && rows != cols {
        return Err(SdsegError::shape(
            vec![rows, rows],
            vec![rows, cols],
            "odd quarter-turn rotation requires square trailing dims",
        ));
    }

    let lead: usize = shape[..shape.len() - 2].iter().product();
    let owned = a.as_standard_layout();
    let src = owned
        .as_slice()
        .expect("standard layout array has a slice");
    let mut dst = Vec::with_capacity(src.len());
    for l in 0..lead {
        let base = l * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                let (si, sj) = source_index(&c, i, j, rows, cols);
                dst.push(src[base + si * cols + sj].clone());
            }
        }
    }
    Ok(ArrayD::from_shape_vec(shape, dst).expect("same element count"))
}

/// For output coordinate (i, j), the input coordinate under canonical `t`.
/// Inverts the action stages in reverse order: vertical flip (absent in
/// canonical forms), horizontal flip, then rotation.
#[inline]
fn source_index(c: &TransformSpec, i: usize, j: usize, rows: usize, cols: usize) -> (usize, usize) {
    let j = if c.flip_horizontal { cols - 1 - j } else { j };
    match c.rotation_quarter_turns {
        0 => (i, j),
        1 => (j, rows - 1 - i),
        2 => (rows - 1 - i, cols - 1 - j),
        3 => (cols - 1 - j, i),
        _ => unreachable!(),
    }
}

/// Draw `n` independent uniform elements from the subgroup generated by the
/// enabled generators. Deterministic given the rng state.
pub fn sample_transform_set<R: Rng>(
    n: usize,
    rng: &mut R,
    enable_rotation: bool,
    enable_flip: bool,
) -> Result<Vec<TransformSpec>> {
    if n < 1 {
        return Err(SdsegError::InvalidArgument(
            "sample_transform_set: n must be >= 1".into(),
        ));
    }
    let pool = enabled_subgroup(enable_rotation, enable_flip);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(0..pool.len());
        out.push(pool[idx]);
    }
    Ok(out)
}

/// The subgroup generated by the enabled generators, in canonical form.
pub fn enabled_subgroup(enable_rotation: bool, enable_flip: bool) -> Vec<TransformSpec> {
    match (enable_rotation, enable_flip) {
        (true, true) => TransformSpec::all_canonical().to_vec(),
        (true, false) => (0..4).map(|r| TransformSpec::new(r, false, false)).collect(),
        (false, true) => vec![
            TransformSpec::identity(),
            TransformSpec::flip_h().canonicalize(),
            TransformSpec::flip_v().canonicalize(),
            TransformSpec::new(0, true, true).canonicalize(),
        ],
        (false, false) => vec![TransformSpec::identity()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, ArrayD};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn dynify(a: ndarray::Array2<f64>) -> ArrayD<f64> {
        a.into_dyn()
    }

    fn probe3x3() -> ArrayD<f64> {
        dynify(arr2(&[[1., 2., 3.], [4., 5., 6.], [7., 8., 9.]]))
    }

    #[test]
    fn rot90_convention_on_2x2() {
        let a = dynify(arr2(&[[1., 2.], [3., 4.]]));
        let r = apply_transform(&TransformSpec::rot90(), &a).unwrap();
        assert_eq!(r, dynify(arr2(&[[2., 4.], [1., 3.]])));
    }

    #[test]
    fn identity_is_bit_exact() {
        let a = probe3x3();
        let r = apply_transform(&TransformSpec::identity(), &a).unwrap();
        assert_eq!(r, a);
    }

    #[test]
    fn flip_h_on_2x2() {
        let a = dynify(arr2(&[[1., 2.], [3., 4.]]));
        let r = apply_transform(&TransformSpec::flip_h(), &a).unwrap();
        assert_eq!(r, dynify(arr2(&[[2., 1.], [4., 3.]])));
    }

    #[test]
    fn flip_v_on_2x2() {
        let a = dynify(arr2(&[[1., 2.], [3., 4.]]));
        let r = apply_transform(&TransformSpec::flip_v(), &a).unwrap();
        assert_eq!(r, dynify(arr2(&[[3., 4.], [1., 2.]])));
    }

    #[test]
    fn odd_rotation_rejects_non_square() {
        let a = ArrayD::<f64>::zeros(ndarray::IxDyn(&[2, 3]));
        assert!(apply_transform(&TransformSpec::rot90(), &a).is_err());
        // Even rotations are fine on rectangles.
        assert!(apply_transform(&TransformSpec::new(2, false, false), &a).is_ok());
    }

    #[test]
    fn canonicalization_yields_exactly_8_actions() {
        // All 16 triples collapse onto the 8 canonical elements, and canonical
        // forms are equal iff pixel actions are equal.
        let probe = probe3x3();
        let mut triples = Vec::new();
        for r in 0..4u8 {
            for h in [false, true] {
                for v in [false, true] {
                    triples.push(TransformSpec::new(r, h, v));
                }
            }
        }
        let mut distinct_actions: Vec<(TransformSpec, ArrayD<f64>)> = Vec::new();
        for t in &triples {
            let act = apply_transform(t, &probe).unwrap();
            let canon = t.canonicalize();
            assert!(!canon.flip_vertical);
            match distinct_actions.iter().find(|(c, _)| *c == canon) {
                Some((_, prev)) => assert_eq!(*prev, act, "canonical form must pin the action"),
                None => distinct_actions.push((canon, act)),
            }
        }
        assert_eq!(distinct_actions.len(), 8);
        // Pairwise distinct actions across the 8 canonical elements.
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(distinct_actions[i].1, distinct_actions[j].1);
            }
        }
    }

    #[test]
    fn compose_matches_sequential_application_for_all_pairs() {
        let probe = probe3x3();
        let all = TransformSpec::all_canonical();
        for t1 in &all {
            for t2 in &all {
                let c = compose(t1, t2);
                let seq =
                    apply_transform(t1, &apply_transform(t2, &probe).unwrap()).unwrap();
                let direct = apply_transform(&c, &probe).unwrap();
                assert_eq!(seq, direct, "compose({t1:?},{t2:?})");
                // Closure: the result is one of the 8 canonical elements.
                assert!(all.contains(&c));
            }
        }
    }

    #[test]
    fn rot90_and_flip_do_not_commute() {
        let a = compose(&TransformSpec::rot90(), &TransformSpec::flip_h());
        let b = compose(&TransformSpec::flip_h(), &TransformSpec::rot90());
        assert_ne!(a, b);
        let probe = probe3x3();
        assert_ne!(
            apply_transform(&a, &probe).unwrap(),
            apply_transform(&b, &probe).unwrap()
        );
    }

    #[test]
    fn rot90_has_order_4_and_flip_is_involution() {
        let r = TransformSpec::rot90();
        let r2 = compose(&r, &r);
        let r4 = compose(&r2, &r2);
        assert!(r4.is_identity());
        let h = TransformSpec::flip_h();
        assert!(compose(&h, &h).is_identity());
    }

    #[test]
    fn invert_basics() {
        assert!(invert(&TransformSpec::identity()).is_identity());
        assert_eq!(
            invert(&TransformSpec::rot90()),
            TransformSpec::new(3, false, false)
        );
    }

    #[test]
    fn all_elements_round_trip_bit_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut v = Vec::with_capacity(25);
        for _ in 0..25 {
            v.push(rng.random_range(-10.0..10.0));
        }
        let a = ArrayD::from_shape_vec(ndarray::IxDyn(&[5, 5]), v).unwrap();
        for t in TransformSpec::all_canonical() {
            let fwd = apply_transform(&t, &a).unwrap();
            let back = apply_transform(&invert(&t), &fwd).unwrap();
            assert_eq!(back, a, "round trip through {t:?}");
            assert!(compose(&invert(&t), &t).is_identity());
        }
    }

    #[test]
    fn leading_dimensions_untouched() {
        // [2, 2, 2]: each leading slice is transformed independently.
        let a = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[2, 2, 2]),
            vec![1., 2., 3., 4., 10., 20., 30., 40.],
        )
        .unwrap();
        let r = apply_transform(&TransformSpec::flip_h(), &a).unwrap();
        let expect = ArrayD::from_shape_vec(
            ndarray::IxDyn(&[2, 2, 2]),
            vec![2., 1., 4., 3., 20., 10., 40., 30.],
        )
        .unwrap();
        assert_eq!(r, expect);
    }

    #[test]
    fn sampling_is_deterministic_and_canonical() {
        let mut rng1 = ChaCha12Rng::seed_from_u64(42);
        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        let a = sample_transform_set(4, &mut rng1, true, true).unwrap();
        let b = sample_transform_set(4, &mut rng2, true, true).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert_eq!(*t, t.canonicalize());
        }
    }

    #[test]
    fn sampling_restricted_subgroups() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rot_only = sample_transform_set(200, &mut rng, true, false).unwrap();
        assert!(rot_only.iter().all(|t| !t.flip_horizontal));
        let flips = enabled_subgroup(false, true);
        assert_eq!(flips.len(), 4);
        let flip_only = sample_transform_set(200, &mut rng, false, true).unwrap();
        assert!(flip_only.iter().all(|t| flips.contains(t)));
        let none = sample_transform_set(5, &mut rng, false, false).unwrap();
        assert!(none.iter().all(|t| t.is_identity()));
        assert!(sample_transform_set(0, &mut rng, true, true).is_err());
    }

    #[test]
    fn sampling_is_empirically_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let draws = sample_transform_set(10_000, &mut rng, true, true).unwrap();
        let all = TransformSpec::all_canonical();
        for t in &all {
            let freq = draws.iter().filter(|d| *d == t).count() as f64 / 10_000.0;
            assert!(
                (freq - 0.125).abs() <= 0.02,
                "element {t:?} frequency {freq} out of 0.125 +/- 0.02"
            );
        }
    }

    proptest! {
        #[test]
        fn value_multiset_preserved(values in proptest::collection::vec(-100i64..100, 16), idx in 0usize..8) {
            let a = ArrayD::from_shape_vec(ndarray::IxDyn(&[4, 4]), values).unwrap();
            let t = TransformSpec::all_canonical()[idx];
            let r = apply_transform(&t, &a).unwrap();
            let mut before: Vec<i64> = a.iter().cloned().collect();
            let mut after: Vec<i64> = r.iter().cloned().collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn commutes_with_pointwise_functions(values in proptest::collection::vec(-10.0f64..10.0, 9), idx in 0usize..8) {
            let a = ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 3]), values).unwrap();
            let t = TransformSpec::all_canonical()[idx];
            let f = |x: f64| (x * 0.5).tanh() + 1.0;
            let lhs = apply_transform(&t, &a.mapv(f)).unwrap();
            let rhs = apply_transform(&t, &a).unwrap().mapv(f);
            prop_assert_eq!(lhs, rhs);
        }
    }
}
