//! Descriptor-space distances and column alignment.
//!
//! The distance between two descriptors is the mean column-wise cosine
//! distance at the best circular column shift of the query. Searching every
//! shift costs `O(n_r * n_a^2)`; pre-aligning on the aligning keys first and
//! then checking only a small neighborhood of that shift brings it down to
//! roughly `O(n_r * n_a)`.

use std::cell::RefCell;
use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::descriptor::{self, AligningKey, DescriptorKind, DescriptorParams, ScanContextDescriptor};
use crate::error::{Error, Result};

/// The aligned descriptor distance `D` and the query column shift achieving it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignedDistance {
    pub distance: f64,
    pub shift: usize,
}

/// 1-DOF relative pose recovered from a column shift.
///
/// `Yaw` (degrees, CCW) is the query heading relative to the map heading.
/// `Lateral` (meters) is the query position relative to the map position
/// along the map's `+y` axis. Both describe the motion that carries the
/// query's points onto the map's points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SemiMetricPose {
    Yaw(f64),
    Lateral(f64),
}

impl SemiMetricPose {
    pub fn value(&self) -> f64 {
        match *self {
            SemiMetricPose::Yaw(v) | SemiMetricPose::Lateral(v) => v,
        }
    }
}

impl fmt::Display for SemiMetricPose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemiMetricPose::Yaw(v) => write!(f, "yaw {v} deg"),
            SemiMetricPose::Lateral(v) => write!(f, "lateral {v} m"),
        }
    }
}

/// Column-major `f64` copy of a descriptor plus squared column norms.
pub(crate) struct Columns {
    n_r: usize,
    n_a: usize,
    data: Vec<f64>,
    norm_sq: Vec<f64>,
}

impl Columns {
    pub(crate) fn new(d: &ScanContextDescriptor) -> Self {
        let (n_r, n_a) = (d.rows(), d.cols());
        let m = d.matrix();
        let mut data = vec![0.0; n_r * n_a];
        for j in 0..n_a {
            for i in 0..n_r {
                data[j * n_r + i] = f64::from(m[i * n_a + j]);
            }
        }
        let norm_sq = data
            .chunks_exact(n_r)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        Self {
            n_r,
            n_a,
            data,
            norm_sq,
        }
    }

    fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_r..(j + 1) * self.n_r]
    }
}

/// `d(f_{Q,n}, f_M)` without materializing the shifted query.
///
/// Column pairs where either side is all zeros are skipped and the mean is
/// taken over the remaining pairs; with no valid pair the distance is 1.
pub(crate) fn shifted_distance(q: &Columns, m: &Columns, n: usize) -> f64 {
    let n_a = m.n_a;
    let mut total = 0.0;
    let mut valid = 0usize;
    for j in 0..n_a {
        let src = (j + n_a - n % n_a) % n_a;
        let (nq, nm) = (q.norm_sq[src], m.norm_sq[j]);
        if nq <= 0.0 || nm <= 0.0 {
            continue;
        }
        let dot: f64 = q.column(src).iter().zip(m.column(j)).map(|(a, b)| a * b).sum();
        let cos = dot / (nq * nm).sqrt();
        total += (1.0 - cos).clamp(0.0, 1.0);
        valid += 1;
    }
    if valid == 0 {
        1.0
    } else {
        total / valid as f64
    }
}

fn check_shape(q: &ScanContextDescriptor, m: &ScanContextDescriptor) -> Result<()> {
    if q.kind() != m.kind() || q.rows() != m.rows() || q.cols() != m.cols() {
        return Err(Error::Shape(format!(
            "cannot compare {} {}x{} with {} {}x{}",
            q.kind(),
            q.rows(),
            q.cols(),
            m.kind(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Mean column-wise cosine distance at the current alignment, in `[0, 1]`.
pub fn column_cosine_distance(q: &ScanContextDescriptor, m: &ScanContextDescriptor) -> Result<f64> {
    check_shape(q, m)?;
    Ok(shifted_distance(&Columns::new(q), &Columns::new(m), 0))
}

/// Circular column shift: output column `j` is input column `(j - n) mod n_a`.
pub fn shift_columns(f: &ScanContextDescriptor, n: usize) -> Result<ScanContextDescriptor> {
    if n >= f.cols() {
        return Err(Error::Range(format!("shift {n} outside [0, {})", f.cols())));
    }
    Ok(f.circular_shift(n))
}

/// Exhaustive search over every column shift of the query. Ties go to the
/// smallest shift.
pub fn brute_force_align(q: &ScanContextDescriptor, m: &ScanContextDescriptor) -> Result<AlignedDistance> {
    check_shape(q, m)?;
    let (qc, mc) = (Columns::new(q), Columns::new(m));
    Ok(best_of(&qc, &mc, 0..q.cols()))
}

fn best_of(q: &Columns, m: &Columns, shifts: impl IntoIterator<Item = usize>) -> AlignedDistance {
    let mut best = AlignedDistance {
        distance: f64::INFINITY,
        shift: usize::MAX,
    };
    for n in shifts {
        let d = shifted_distance(q, m, n);
        if d < best.distance || (d == best.distance && n < best.shift) {
            best = AlignedDistance { distance: d, shift: n };
        }
    }
    best
}

/// Above this length the aligning-key search goes through an FFT
/// cross-correlation instead of the direct quadratic loop.
const DIRECT_KEY_ALIGN_MAX: usize = 64;

/// Shift `n` minimizing `|circshift(w_q, n) - w_m|_2`; ties go to the
/// smallest shift.
pub fn align_keys(wq: &AligningKey, wm: &AligningKey) -> Result<usize> {
    if wq.len() != wm.len() {
        return Err(Error::Shape(format!(
            "aligning keys have lengths {} and {}",
            wq.len(),
            wm.len()
        )));
    }
    if wq.is_empty() {
        return Err(Error::Shape("aligning keys are empty".into()));
    }
    let (a, b) = (wq.values(), wm.values());
    if a.len() <= DIRECT_KEY_ALIGN_MAX {
        Ok(argmin_key_shift(a, b, 0..a.len()))
    } else {
        Ok(align_keys_fft(a, b))
    }
}

fn key_shift_sq(a: &[f64], b: &[f64], n: usize) -> f64 {
    let len = a.len();
    let mut s = 0.0;
    for (j, bj) in b.iter().enumerate() {
        let d = a[(j + len - n) % len] - bj;
        s += d * d;
    }
    s
}

fn argmin_key_shift(a: &[f64], b: &[f64], shifts: impl IntoIterator<Item = usize>) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for n in shifts {
        let s = key_shift_sq(a, b, n);
        if s < best.0 || (s == best.0 && n < best.1) {
            best = (s, n);
        }
    }
    best.1
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// `|shift(a, n) - b|^2 = |a|^2 + |b|^2 - 2 c(n)` with `c` the circular
/// cross-correlation. Every shift whose FFT correlation is within round-off
/// of the maximum is then re-scored exactly, so the result equals the direct
/// search bit for bit.
fn align_keys_fft(a: &[f64], b: &[f64]) -> usize {
    let len = a.len();
    let corr = PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut fb: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
        forward.process(&mut fa);
        forward.process(&mut fb);
        let mut prod: Vec<Complex<f64>> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
        inverse.process(&mut prod);
        prod.into_iter().map(|c| c.re / len as f64).collect::<Vec<f64>>()
    });
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-9 * norm_a * norm_b;
    let max = corr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let candidates = (0..len).filter(|&n| corr[n] >= max - tol);
    argmin_key_shift(a, b, candidates)
}

/// Pre-aligns with the aligning keys, then searches only the shifts within
/// `half_width` of that estimate. A `half_width` of at least `n_a / 2`
/// searches every shift.
pub fn fast_align(
    q: &ScanContextDescriptor,
    m: &ScanContextDescriptor,
    half_width: usize,
) -> Result<AlignedDistance> {
    check_shape(q, m)?;
    let (wq, wm) = (descriptor::aligning_key(q), descriptor::aligning_key(m));
    let (qc, mc) = (Columns::new(q), Columns::new(m));
    fast_align_prepared(&qc, &mc, &wq, &wm, half_width)
}

pub(crate) fn fast_align_prepared(
    q: &Columns,
    m: &Columns,
    wq: &AligningKey,
    wm: &AligningKey,
    half_width: usize,
) -> Result<AlignedDistance> {
    let n_a = q.n_a;
    let center = align_keys(wq, wm)?;
    if 2 * half_width + 1 >= n_a {
        return Ok(best_of(q, m, 0..n_a));
    }
    let shifts = (0..=2 * half_width).map(|o| (center + n_a + o - half_width) % n_a);
    Ok(best_of(q, m, shifts))
}

/// Converts a column shift into a yaw (polar) or lateral offset (Cartesian).
pub fn shift_to_pose(shift: usize, params: &DescriptorParams) -> Result<SemiMetricPose> {
    if shift >= params.n_a {
        return Err(Error::Range(format!("shift {shift} outside [0, {})", params.n_a)));
    }
    let delta = params.delta_a();
    Ok(match params.kind {
        DescriptorKind::Polar => {
            let mut yaw = (shift as f64 * delta) % 360.0;
            if yaw > 180.0 {
                yaw -= 360.0;
            }
            SemiMetricPose::Yaw(yaw)
        }
        DescriptorKind::Cartesian => {
            let signed = if 2 * shift <= params.n_a {
                shift as f64
            } else {
                shift as f64 - params.n_a as f64
            };
            SemiMetricPose::Lateral(signed * delta)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::default_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn polar() -> DescriptorParams {
        default_params(DescriptorKind::Polar)
    }

    fn random_desc(rng: &mut ChaCha8Rng, params: DescriptorParams) -> ScanContextDescriptor {
        let m = (0..params.n_r * params.n_a)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..12.0) })
            .collect();
        ScanContextDescriptor::from_matrix(params, m).unwrap()
    }

    /// Independent reference: materialize every shifted query and evaluate
    /// the cosine distance from scratch on the row-major matrix.
    fn oracle_align(q: &ScanContextDescriptor, m: &ScanContextDescriptor) -> (f64, usize) {
        let (n_r, n_a) = (q.rows(), q.cols());
        let mut best = (f64::INFINITY, 0);
        for n in 0..n_a {
            let s = q.circular_shift(n);
            let (mut total, mut valid) = (0.0, 0);
            for j in 0..n_a {
                let a: Vec<f64> = (0..n_r).map(|i| f64::from(s.get(i, j))).collect();
                let b: Vec<f64> = (0..n_r).map(|i| f64::from(m.get(i, j))).collect();
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                total += 1.0 - dot / (na * nb);
                valid += 1;
            }
            let d = if valid == 0 { 1.0 } else { total / valid as f64 };
            if d < best.0 - 1e-12 {
                best = (d, n);
            }
        }
        best
    }

    #[test]
    fn identical_descriptors_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_desc(&mut rng, polar());
        assert_eq!(column_cosine_distance(&d, &d).unwrap(), 0.0);
        assert_eq!(brute_force_align(&d, &d).unwrap(), AlignedDistance { distance: 0.0, shift: 0 });
        for hw in [0, 3, 30] {
            assert_eq!(fast_align(&d, &d, hw).unwrap(), AlignedDistance { distance: 0.0, shift: 0 });
        }
    }

    #[test]
    fn orthogonal_columns_have_unit_distance() {
        let params = DescriptorParams { n_r: 2, n_a: 3, ..polar() };
        let q = ScanContextDescriptor::from_matrix(params, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let m = ScanContextDescriptor::from_matrix(params, vec![0.0, 0.0, 0.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(column_cosine_distance(&q, &m).unwrap(), 1.0);
    }

    #[test]
    fn empty_descriptors_are_farthest() {
        let z = ScanContextDescriptor::zeros(polar()).unwrap();
        assert_eq!(column_cosine_distance(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn misalignment_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_desc(&mut rng, polar());
        let s = shift_columns(&d, 1).unwrap();
        assert!(column_cosine_distance(&s, &d).unwrap() > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = ScanContextDescriptor::zeros(polar()).unwrap();
        let c = ScanContextDescriptor::zeros(default_params(DescriptorKind::Cartesian)).unwrap();
        assert!(matches!(column_cosine_distance(&p, &c), Err(Error::Shape(_))));
        assert!(matches!(brute_force_align(&p, &c), Err(Error::Shape(_))));
        assert!(matches!(fast_align(&p, &c, 0), Err(Error::Shape(_))));
        let short = AligningKey::new(vec![0.0; 3]);
        assert!(matches!(align_keys(&short, &AligningKey::new(vec![0.0; 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn shift_columns_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_desc(&mut rng, polar());
        assert_eq!(shift_columns(&d, 0).unwrap(), d);
        assert!(matches!(shift_columns(&d, 60), Err(Error::Range(_))));
        let ab = shift_columns(&shift_columns(&d, 45).unwrap(), 20).unwrap();
        assert_eq!(ab, shift_columns(&d, 5).unwrap());
        let s = shift_columns(&d, 7).unwrap();
        for i in 0..20 {
            for j in 0..60 {
                assert_eq!(s.get(i, (j + 7) % 60), d.get(i, j));
            }
        }
    }

    #[test]
    fn exact_circular_match_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_desc(&mut rng, polar());
        let m = shift_columns(&q, 5).unwrap();
        assert_eq!(brute_force_align(&q, &m).unwrap(), AlignedDistance { distance: 0.0, shift: 5 });
        for k in [0, 1, 29, 30, 59] {
            let m = shift_columns(&q, k).unwrap();
            assert_eq!(fast_align(&q, &m, 0).unwrap(), AlignedDistance { distance: 0.0, shift: k });
        }
    }

    #[test]
    fn brute_force_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let (q, m) = (random_desc(&mut rng, polar()), random_desc(&mut rng, polar()));
            let got = brute_force_align(&q, &m).unwrap();
            let (d, n) = oracle_align(&q, &m);
            assert!((got.distance - d).abs() < 1e-12);
            assert_eq!(got.shift, n);
        }
    }

    #[test]
    fn align_keys_examples() {
        let w = AligningKey::new((0..60).map(|j| ((j * 37) % 61) as f64).collect());
        assert_eq!(align_keys(&w, &w).unwrap(), 0);
        let shifted = AligningKey::new((0..60).map(|j| w.values()[(j + 60 - 7) % 60]).collect());
        assert_eq!(align_keys(&w, &shifted).unwrap(), 7);
        let zero = AligningKey::new(vec![0.0; 60]);
        assert_eq!(align_keys(&zero, &zero).unwrap(), 0);
    }

    #[test]
    fn fft_key_alignment_equals_direct_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for len in [65, 100, 128, 240, 241] {
            for _ in 0..50 {
                let a: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
                let b: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
                assert_eq!(align_keys_fft(&a, &b), argmin_key_shift(&a, &b, 0..len));
            }
            let a: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..5.0)).collect();
            let k = rng.gen_range(0..len);
            let b: Vec<f64> = (0..len).map(|j| a[(j + len - k) % len]).collect();
            assert_eq!(align_keys_fft(&a, &b), k);
            // Constant keys tie everywhere.
            assert_eq!(align_keys_fft(&vec![1.0; len], &vec![1.0; len]), 0);
        }
    }

    #[test]
    fn shift_to_pose_examples() {
        let p = polar();
        assert_eq!(shift_to_pose(30, &p).unwrap(), SemiMetricPose::Yaw(180.0));
        assert_eq!(shift_to_pose(0, &p).unwrap(), SemiMetricPose::Yaw(0.0));
        assert_eq!(shift_to_pose(2, &p).unwrap(), SemiMetricPose::Yaw(12.0));
        assert_eq!(shift_to_pose(58, &p).unwrap(), SemiMetricPose::Yaw(-12.0));
        assert!(matches!(shift_to_pose(60, &p), Err(Error::Range(_))));
        let c = default_params(DescriptorKind::Cartesian);
        assert_eq!(shift_to_pose(2, &c).unwrap(), SemiMetricPose::Lateral(4.0));
        assert_eq!(shift_to_pose(38, &c).unwrap(), SemiMetricPose::Lateral(-4.0));
        assert_eq!(shift_to_pose(20, &c).unwrap(), SemiMetricPose::Lateral(40.0));
        assert_eq!(shift_to_pose(21, &c).unwrap(), SemiMetricPose::Lateral(-38.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_pair() -> impl Strategy<Value = (ScanContextDescriptor, ScanContextDescriptor)> {
            (1usize..8, 1usize..24).prop_flat_map(|(n_r, n_a)| {
                let params = DescriptorParams { n_r, n_a, ..polar() };
                let cell = prop_oneof![Just(0.0f32), 0.0f32..20.0];
                let mat = prop::collection::vec(cell, n_r * n_a);
                (mat.clone(), mat).prop_map(move |(a, b)| {
                    (
                        ScanContextDescriptor::from_matrix(params, a).unwrap(),
                        ScanContextDescriptor::from_matrix(params, b).unwrap(),
                    )
                })
            })
        }

        proptest! {
            #[test]
            fn distance_is_bounded((q, m) in arb_pair()) {
                let d = column_cosine_distance(&q, &m).unwrap();
                prop_assert!((0.0..=1.0).contains(&d));
                let a = brute_force_align(&q, &m).unwrap();
                prop_assert!((0.0..=1.0).contains(&a.distance) && a.shift < q.cols());
            }

            #[test]
            fn self_alignment_is_zero((q, _m) in arb_pair()) {
                prop_assume!(!q.is_zero());
                let a = brute_force_align(&q, &q).unwrap();
                prop_assert_eq!(a, AlignedDistance { distance: 0.0, shift: 0 });
            }

            #[test]
            fn aligned_distance_is_symmetric((q, m) in arb_pair()) {
                let ab = brute_force_align(&q, &m).unwrap();
                let ba = brute_force_align(&m, &q).unwrap();
                prop_assert!((ab.distance - ba.distance).abs() < 1e-12);
            }

            #[test]
            fn full_neighborhood_equals_brute_force((q, m) in arb_pair()) {
                let full = fast_align(&q, &m, q.cols() / 2).unwrap();
                prop_assert_eq!(full, brute_force_align(&q, &m).unwrap());
            }

            #[test]
            fn alignment_is_scale_invariant((q, m) in arb_pair(), scale in 0.01f32..100.0) {
                let scaled = ScanContextDescriptor::from_matrix(
                    *q.params(),
                    q.matrix().iter().map(|v| v * scale).collect(),
                ).unwrap();
                let a = brute_force_align(&q, &m).unwrap();
                let b = brute_force_align(&scaled, &m).unwrap();
                // Scaled cells are re-rounded to f32.
                prop_assert!((a.distance - b.distance).abs() < 1e-6);
                // Powers of two scale without rounding, so everything is bit-identical.
                let doubled = ScanContextDescriptor::from_matrix(
                    *q.params(),
                    q.matrix().iter().map(|v| v * 2.0).collect(),
                ).unwrap();
                prop_assert_eq!(brute_force_align(&doubled, &m).unwrap(), a);
            }
        }
    }
}
