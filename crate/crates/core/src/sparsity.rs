//! Runtime magnitude pruning, sparsity-ratio math, threshold profiles, the
//! top-k baseline, and the binary-mask compressed-data pipeline.
//!
//! Mask polarity: a set bit marks an effectual (nonzero) element, so a
//! bit-wise AND of two masks yields the common effectual positions used by
//! the pre-compute filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::numerics::{quantize, FixedFormat, FixedTensor};

#[derive(Debug, Error, PartialEq)]
pub enum SparsityError {
    #[error("threshold must be nonnegative, got {0}")]
    NegativeThreshold(f64),
    #[error("empty tile")]
    EmptyTile,
    #[error("k={k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("mask inconsistent with tile at flat index {0}")]
    MaskInconsistent(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("values length {values} != effectual bit count {popcount}")]
    LengthMismatch { values: usize, popcount: usize },
    #[error("threshold grid must be nonempty, sorted ascending, and nonnegative")]
    BadGrid,
    #[error("profile is empty")]
    EmptyProfile,
    #[error("rho target {0} outside [0, 1]")]
    BadRhoTarget(f64),
    #[error("profile points violate invariants: {0}")]
    BadProfile(String),
}

/// Binary effectual-position mask with the logical tile shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub bits: Vec<bool>,
    pub shape: (usize, usize, usize),
}

impl Mask {
    pub fn new(bits: Vec<bool>, shape: (usize, usize, usize)) -> Self {
        assert_eq!(bits.len(), shape.0 * shape.1 * shape.2);
        Self { bits, shape }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask, SparsityError> {
        if self.shape != other.shape {
            return Err(SparsityError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Mask::new(
            self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
            self.shape,
        ))
    }

    /// Mask storage cost in bytes (one bit per logical element).
    pub fn stored_bytes(&self) -> u64 {
        (self.bits.len() as u64 + 7) / 8
    }
}

/// Zero-free value sequence plus the mask that restores its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTile {
    pub values: Vec<i32>,
    pub mask: Mask,
    pub fmt: FixedFormat,
}

impl CompressedTile {
    pub fn value_bytes(&self, bits_per_element: u32) -> u64 {
        (self.values.len() as u64 * bits_per_element as u64 + 7) / 8
    }
}

/// Magnitude pruning threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneThreshold(f64);

impl PruneThreshold {
    pub fn new(tau: f64) -> Result<Self, SparsityError> {
        if tau < 0.0 || tau.is_nan() {
            return Err(SparsityError::NegativeThreshold(tau));
        }
        Ok(Self(tau))
    }

    pub fn value(&self) -> f64 {
        self.0
    }

    /// Threshold at comparator resolution: quantized to the tile format so
    /// the hardware comparison is a plain integer compare.
    pub fn raw(&self, fmt: FixedFormat) -> i32 {
        quantize(self.0, fmt)
    }
}

/// Zero every element with magnitude below the threshold; mask bit set iff
/// the surviving element is nonzero. The input is not modified.
pub fn dynatran_prune(tile: &FixedTensor, tau: PruneThreshold) -> (FixedTensor, Mask) {
    let t = tau.raw(tile.fmt).unsigned_abs();
    let mut out = tile.clone();
    let mut bits = Vec::with_capacity(tile.raw.len());
    for v in out.raw.iter_mut() {
        if v.unsigned_abs() < t {
            *v = 0;
        }
        bits.push(*v != 0);
    }
    (out, Mask::new(bits, tile.shape))
}

/// Fraction of zero elements.
pub fn pruning_ratio(tile: &FixedTensor) -> Result<f64, SparsityError> {
    if tile.is_empty() {
        return Err(SparsityError::EmptyTile);
    }
    let zeros = tile.raw.iter().filter(|&&v| v == 0).count();
    Ok(zeros as f64 / tile.raw.len() as f64)
}

/// Keep the k largest-magnitude elements per row (ties keep the lower column
/// index); zero the rest.
pub fn topk_prune(scores: &FixedTensor, k: usize) -> Result<(FixedTensor, Mask), SparsityError> {
    let cols = scores.shape.2;
    if k == 0 || k > cols {
        return Err(SparsityError::KOutOfRange { k, max: cols });
    }
    let mut out = scores.clone();
    for b in 0..scores.shape.0 {
        for r in 0..scores.shape.1 {
            let start = scores.idx(b, r, 0);
            let row = &scores.raw[start..start + cols];
            let mut order: Vec<usize> = (0..cols).collect();
            order.sort_by(|&x, &y| {
                row[y].unsigned_abs().cmp(&row[x].unsigned_abs()).then(x.cmp(&y))
            });
            for &c in &order[k..] {
                out.raw[start + c] = 0;
            }
        }
    }
    let bits = out.raw.iter().map(|&v| v != 0).collect();
    let mask = Mask::new(bits, scores.shape);
    Ok((out, mask))
}

/// Pack the effectual elements in row-major order.
pub fn compress(tile: &FixedTensor, mask: &Mask) -> Result<CompressedTile, SparsityError> {
    if mask.shape != tile.shape {
        return Err(SparsityError::ShapeMismatch(format!(
            "mask {:?} vs tile {:?}",
            mask.shape, tile.shape
        )));
    }
    let mut values = Vec::with_capacity(mask.popcount());
    for (i, (&v, &m)) in tile.raw.iter().zip(&mask.bits).enumerate() {
        if m != (v != 0) {
            return Err(SparsityError::MaskInconsistent(i));
        }
        if m {
            values.push(v);
        }
    }
    Ok(CompressedTile { values, mask: mask.clone(), fmt: tile.fmt })
}

/// Compress a tile directly, treating every nonzero element as effectual.
pub fn compress_dense(tile: &FixedTensor) -> CompressedTile {
    let bits: Vec<bool> = tile.raw.iter().map(|&v| v != 0).collect();
    let values = tile.raw.iter().copied().filter(|&v| v != 0).collect();
    CompressedTile { values, mask: Mask::new(bits, tile.shape), fmt: tile.fmt }
}

/// Restore the dense layout: stored values at set positions, zeros elsewhere.
pub fn decompress(ct: &CompressedTile) -> Result<FixedTensor, SparsityError> {
    let pop = ct.mask.popcount();
    if ct.values.len() != pop {
        return Err(SparsityError::LengthMismatch { values: ct.values.len(), popcount: pop });
    }
    let mut out = FixedTensor::zeros(ct.mask.shape, ct.fmt);
    let mut vi = 0;
    for (slot, &m) in out.raw.iter_mut().zip(&ct.mask.bits) {
        if m {
            *slot = ct.values[vi];
            vi += 1;
        }
    }
    Ok(out)
}

/// Output of the pre-compute filter: zero-free operand pairs over the common
/// effectual positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFiltered {
    pub act_values: Vec<i32>,
    pub wt_values: Vec<i32>,
    pub common: Mask,
}

/// AND the operand masks, XOR out the non-common positions, and collapse the
/// survivors so the compute modules see only effectual pairs.
pub fn pair_filter(act: &CompressedTile, wt: &CompressedTile) -> Result<PairFiltered, SparsityError> {
    let common = act.mask.and(&wt.mask)?;
    let mut act_values = Vec::with_capacity(common.popcount());
    let mut wt_values = Vec::with_capacity(common.popcount());
    let (mut ai, mut wi) = (0usize, 0usize);
    for i in 0..common.bits.len() {
        let (am, wm) = (act.mask.bits[i], wt.mask.bits[i]);
        if am && wm {
            act_values.push(act.values[ai]);
            wt_values.push(wt.values[wi]);
        }
        if am {
            ai += 1;
        }
        if wm {
            wi += 1;
        }
    }
    Ok(PairFiltered { act_values, wt_values, common })
}

/// Inverse of the pre-compute filter on output activations: drop results that
/// computed to exactly zero and clear their mask bits.
pub fn post_expand(
    results: &[i32],
    out_mask: &Mask,
    fmt: FixedFormat,
) -> Result<CompressedTile, SparsityError> {
    let pop = out_mask.popcount();
    if results.len() != pop {
        return Err(SparsityError::LengthMismatch { values: results.len(), popcount: pop });
    }
    let mut bits = out_mask.bits.clone();
    let mut values = Vec::with_capacity(results.len());
    let mut ri = 0;
    for b in bits.iter_mut() {
        if *b {
            let v = results[ri];
            ri += 1;
            if v == 0 {
                *b = false;
            } else {
                values.push(v);
            }
        }
    }
    Ok(CompressedTile { values, mask: Mask::new(bits, out_mask.shape), fmt })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub tau: f64,
    pub rho: f64,
}

/// Profiled threshold-to-sparsity transfer curve for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub model_name: String,
    pub points: Vec<ProfilePoint>,
}

impl SparsityProfile {
    pub fn validate(&self) -> Result<(), SparsityError> {
        if self.points.is_empty() {
            return Err(SparsityError::EmptyProfile);
        }
        for w in self.points.windows(2) {
            if w[1].tau <= w[0].tau {
                return Err(SparsityError::BadProfile("tau not strictly increasing".into()));
            }
            if w[1].rho + 1e-12 < w[0].rho {
                return Err(SparsityError::BadProfile("rho decreases with tau".into()));
            }
        }
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.rho) {
                return Err(SparsityError::BadProfile(format!("rho {} out of range", p.rho)));
            }
        }
        Ok(())
    }
}

/// Run the functional forward pass once per grid threshold, pruning every
/// weight and activation operand, and record the achieved activation
/// sparsity. Deterministic in (cfg, seed).
pub fn profile_thresholds(
    cfg: &ModelConfig,
    fmt: FixedFormat,
    seed: u64,
    tau_grid: &[f64],
) -> Result<SparsityProfile, SparsityError> {
    if tau_grid.is_empty()
        || tau_grid.iter().any(|&t| t < 0.0)
        || tau_grid.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(SparsityError::BadGrid);
    }
    let graph = crate::model::build_op_graph(cfg);
    let weights = crate::model::generate_weights(cfg, &graph, fmt, seed);
    let input = crate::model::generate_input(cfg, fmt, seed);
    let mut points = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let th = PruneThreshold::new(tau)?;
        let (_, stats) =
            crate::forward::forward_with_pruning(cfg, &graph, &weights, &input, Some(th))
                .map_err(|e| SparsityError::ShapeMismatch(e.to_string()))?;
        points.push(ProfilePoint { tau, rho: stats.activation_sparsity() });
    }
    // quantization can make rho locally flat; clamp monotone within epsilon
    for i in 1..points.len() {
        if points[i].rho < points[i - 1].rho {
            points[i].rho = points[i - 1].rho;
        }
    }
    let profile = SparsityProfile { model_name: cfg.name.clone(), points };
    profile.validate()?;
    Ok(profile)
}

/// Smallest tau on the piecewise-linear interpolant achieving rho >=
/// rho_target, clamped to the last grid point when unreachable.
pub fn threshold_lookup(
    profile: &SparsityProfile,
    rho_target: f64,
) -> Result<PruneThreshold, SparsityError> {
    profile.validate()?;
    if !(0.0..=1.0).contains(&rho_target) {
        return Err(SparsityError::BadRhoTarget(rho_target));
    }
    let pts = &profile.points;
    if rho_target <= pts[0].rho {
        return PruneThreshold::new(pts[0].tau);
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if rho_target <= b.rho {
            if (b.rho - a.rho).abs() < f64::EPSILON {
                return PruneThreshold::new(b.tau);
            }
            let frac = (rho_target - a.rho) / (b.rho - a.rho);
            return PruneThreshold::new(a.tau + frac * (b.tau - a.tau));
        }
    }
    PruneThreshold::new(pts[pts.len() - 1].tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DEFAULT_FORMAT;

    fn tile(vals: &[f64], shape: (usize, usize, usize)) -> FixedTensor {
        FixedTensor::from_f64(shape, vals, DEFAULT_FORMAT)
    }

    #[test]
    fn prune_piecewise_definition() {
        let t = tile(&[0.0625, -0.25, 0.0, 0.375], (1, 1, 4));
        let (out, mask) = dynatran_prune(&t, PruneThreshold::new(0.1).unwrap());
        assert_eq!(out.to_f64(), vec![0.0, -0.25, 0.0, 0.375]);
        assert_eq!(mask.bits, vec![false, true, false, true]);
        assert_eq!(pruning_ratio(&out).unwrap(), 0.5);
    }

    #[test]
    fn prune_identity_and_total() {
        let t = tile(&[0.05, -0.2, 0.0, 0.3], (1, 2, 2));
        let (out, mask) = dynatran_prune(&t, PruneThreshold::new(0.0).unwrap());
        assert_eq!(out.raw, t.raw);
        assert_eq!(mask.bits, vec![true, true, false, true]);

        let (out, _) = dynatran_prune(&t, PruneThreshold::new(0.5).unwrap());
        assert!(out.raw.iter().all(|&v| v == 0));
        assert_eq!(pruning_ratio(&out).unwrap(), 1.0);
    }

    #[test]
    fn prune_idempotent_and_nested() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let t = tile(&vals, (1, 8, 8));
        for tau in [0.0, 0.05, 0.2] {
            let th = PruneThreshold::new(tau).unwrap();
            let (once, m1) = dynatran_prune(&t, th);
            let (twice, m2) = dynatran_prune(&once, th);
            assert_eq!(once.raw, twice.raw);
            assert_eq!(m1, m2);
        }
        let (t1, _) = dynatran_prune(&t, PruneThreshold::new(0.05).unwrap());
        let (t2, _) = dynatran_prune(&t, PruneThreshold::new(0.2).unwrap());
        for (a, b) in t1.raw.iter().zip(&t2.raw) {
            if *a == 0 {
                assert_eq!(*b, 0, "zero set must nest");
            }
        }
    }

    #[test]
    fn ratio_errors_on_empty() {
        let t = FixedTensor::zeros((0, 0, 0), DEFAULT_FORMAT);
        assert_eq!(pruning_ratio(&t), Err(SparsityError::EmptyTile));
    }

    #[test]
    fn topk_basics() {
        let t = tile(&[0.125, 0.5, 0.375, 0.25], (1, 1, 4));
        let (out, _) = topk_prune(&t, 2).unwrap();
        assert_eq!(out.to_f64(), vec![0.0, 0.5, 0.375, 0.0]);
        // k = s is the identity
        let (out, _) = topk_prune(&t, 4).unwrap();
        assert_eq!(out.raw, t.raw);
        assert!(topk_prune(&t, 0).is_err());
        assert!(topk_prune(&t, 5).is_err());
    }

    #[test]
    fn topk_ties_keep_lower_column() {
        let t = tile(&[0.25, 0.25, 0.25, 0.125], (1, 1, 4));
        let (out, _) = topk_prune(&t, 2).unwrap();
        assert_eq!(out.to_f64(), vec![0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn compress_roundtrip_and_errors() {
        let t = tile(&[0.0, -0.2, 0.0, 0.3], (1, 2, 2));
        let ct = compress_dense(&t);
        assert_eq!(ct.values.len(), 2);
        let back = decompress(&ct).unwrap();
        assert_eq!(back.raw, t.raw);

        // dense tile keeps all values
        let d = tile(&[0.1, 0.2, 0.3, 0.4], (1, 2, 2));
        assert_eq!(compress_dense(&d).values.len(), 4);

        // all-zero tile
        let z = FixedTensor::zeros((1, 2, 2), DEFAULT_FORMAT);
        let ct = compress_dense(&z);
        assert!(ct.values.is_empty());
        assert_eq!(ct.mask.popcount(), 0);

        // inconsistent mask rejected
        let bad = Mask::new(vec![true, true, false, true], (1, 2, 2));
        assert_eq!(compress(&t, &bad), Err(SparsityError::MaskInconsistent(0)));

        // truncated values rejected
        let mut ct = compress_dense(&d);
        ct.values.pop();
        assert!(decompress(&ct).is_err());
    }

    #[test]
    fn pair_filter_by_definition() {
        let shape = (1, 1, 4);
        let act = CompressedTile {
            values: vec![3, 5],
            mask: Mask::new(vec![true, true, false, false], shape),
            fmt: DEFAULT_FORMAT,
        };
        let wt = CompressedTile {
            values: vec![7, 2],
            mask: Mask::new(vec![true, false, true, false], shape),
            fmt: DEFAULT_FORMAT,
        };
        let out = pair_filter(&act, &wt).unwrap();
        assert_eq!(out.common.bits, vec![true, false, false, false]);
        assert_eq!(out.act_values, vec![3]);
        assert_eq!(out.wt_values, vec![7]);

        // disjoint masks: nothing to compute
        let wt2 = CompressedTile {
            values: vec![7, 2],
            mask: Mask::new(vec![false, false, true, true], shape),
            fmt: DEFAULT_FORMAT,
        };
        let out = pair_filter(&act, &wt2).unwrap();
        assert_eq!(out.common.popcount(), 0);
        assert!(out.act_values.is_empty() && out.wt_values.is_empty());

        // both dense: everything passes through
        let d1 = compress_dense(&tile(&[0.1, 0.2, 0.3, 0.4], shape));
        let d2 = compress_dense(&tile(&[0.5, 0.6, 0.7, 0.8], shape));
        let out = pair_filter(&d1, &d2).unwrap();
        assert_eq!(out.act_values, d1.values);
        assert_eq!(out.wt_values, d2.values);
    }

    #[test]
    fn post_expand_drops_zero_results() {
        let f = DEFAULT_FORMAT;
        let mask = Mask::new(vec![true, false, true, true], (1, 1, 4));
        let out = post_expand(&[5, 0, 9], &mask, f).unwrap();
        assert_eq!(out.values, vec![5, 9]);
        assert_eq!(out.mask.popcount(), 2);
        // no zeros: mask unchanged
        let out = post_expand(&[5, 4, 9], &mask, f).unwrap();
        assert_eq!(out.mask, mask);
        // all zeros: empty tile
        let out = post_expand(&[0, 0, 0], &mask, f).unwrap();
        assert!(out.values.is_empty());
        assert_eq!(out.mask.popcount(), 0);
        // mismatched length
        assert!(post_expand(&[1, 2], &mask, f).is_err());
    }

    #[test]
    fn lookup_interpolates() {
        let profile = SparsityProfile {
            model_name: "t".into(),
            points: vec![
                ProfilePoint { tau: 0.0, rho: 0.1 },
                ProfilePoint { tau: 0.04, rho: 0.3 },
                ProfilePoint { tau: 0.08, rho: 0.5 },
            ],
        };
        // exact hit
        assert_eq!(threshold_lookup(&profile, 0.3).unwrap().value(), 0.04);
        // rho 0 -> first grid point
        assert_eq!(threshold_lookup(&profile, 0.0).unwrap().value(), 0.0);
        // midpoint: two-point interpolation by hand: (0.4-0.3)/(0.5-0.3)=0.5
        let tau = threshold_lookup(&profile, 0.4).unwrap().value();
        assert!((tau - 0.06).abs() < 1e-12);
        // unreachable clamps
        assert_eq!(threshold_lookup(&profile, 0.9).unwrap().value(), 0.08);
        assert!(threshold_lookup(&profile, 1.5).is_err());
    }

    #[test]
    fn profile_single_point_and_determinism() {
        let mut cfg = ModelConfig::bert_tiny();
        cfg.seq_len = 8;
        cfg.batch = 1;
        let cfg = crate::model::validate_config(cfg).unwrap();
        let p0 = profile_thresholds(&cfg, DEFAULT_FORMAT, 42, &[0.0]).unwrap();
        assert_eq!(p0.points.len(), 1);
        let p1 = profile_thresholds(&cfg, DEFAULT_FORMAT, 42, &[0.0, 0.03, 0.06]).unwrap();
        let p2 = profile_thresholds(&cfg, DEFAULT_FORMAT, 42, &[0.0, 0.03, 0.06]).unwrap();
        assert_eq!(p1, p2);
        assert!(profile_thresholds(&cfg, DEFAULT_FORMAT, 42, &[]).is_err());
        assert!(profile_thresholds(&cfg, DEFAULT_FORMAT, 42, &[0.1, 0.05]).is_err());
    }

    use crate::model::ModelConfig;
}
