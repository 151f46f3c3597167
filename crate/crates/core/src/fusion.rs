//! Re-parameterization fusion: collapse parallel linear branches into one
//! layer by summing their weights and biases, and certify the result.
//!
//! For branches sharing one input, `Σ_s (x·W⁽ˢ⁾ + b⁽ˢ⁾) = x·ΣW⁽ˢ⁾ + Σb⁽ˢ⁾`,
//! and the same holds for convolution kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv1dParams, DenseParams, MultiConv1d, MultiDense, Parameters};
use crate::real::{DType, Real};
use crate::rng;
use crate::rvafm::{rollout_values, Mode, ProjectionHook, RolloutLength, RolloutTrace, RvafmConfig, RvafmParams};
use crate::tensor::Tensor;

/// Elementwise sum accumulated in `f64`, cast once at the end.
fn sum_tensors<'a, T: Real>(op: &'static str, parts: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let mut parts = parts.into_iter();
    let first = parts.next().ok_or_else(|| Error::InvalidArgument(format!("{op}: nothing to sum")))?;
    let mut acc: Vec<f64> = first.data().iter().map(|v| v.as_f64()).collect();
    for t in parts {
        if t.shape() != first.shape() {
            return Err(shape_err(op, format!("branch {:?} vs {:?}", t.shape(), first.shape())));
        }
        for (a, v) in acc.iter_mut().zip(t.data()) {
            *a += v.as_f64();
        }
    }
    Tensor::new(first.shape().to_vec(), acc.into_iter().map(T::of).collect())
}

pub fn fuse_multi_dense<T: Real>(m: &MultiDense<T>) -> Result<DenseParams<T>> {
    if let [single] = m.sublayers() {
        return Ok(single.clone());
    }
    DenseParams::new(
        sum_tensors("fuse_multi_dense", m.sublayers().iter().map(|s| &s.weight))?,
        sum_tensors("fuse_multi_dense", m.sublayers().iter().map(|s| &s.bias))?,
    )
}

pub fn fuse_multi_conv1d<T: Real>(m: &MultiConv1d<T>) -> Result<Conv1dParams<T>> {
    let first = &m.sublayers()[0];
    if m.nsl() == 1 {
        return Ok(first.clone());
    }
    if m.sublayers().iter().any(|s| s.stride != first.stride || s.padding != first.padding) {
        return Err(Error::ConfigMismatch("conv branches differ in stride or padding".into()));
    }
    Conv1dParams::new(
        sum_tensors("fuse_multi_conv1d", m.sublayers().iter().map(|s| &s.kernel))?,
        sum_tensors("fuse_multi_conv1d", m.sublayers().iter().map(|s| &s.bias))?,
        first.stride,
        first.padding,
    )
}

/// Fuses all five multi-branch layers; the input is left untouched.
pub fn fuse_rvafm<T: Real>(p: &RvafmParams<T>) -> Result<RvafmParams<T>> {
    if p.mode() == Mode::InferenceFused {
        return Err(Error::AlreadyFused);
    }
    Ok(RvafmParams {
        config: p.config.with_mode(Mode::InferenceFused),
        conv: MultiConv1d::single(fuse_multi_conv1d(&p.conv)?),
        d_h: MultiDense::single(fuse_multi_dense(&p.d_h)?),
        d_f: MultiDense::single(fuse_multi_dense(&p.d_f)?),
        d_j: MultiDense::single(fuse_multi_dense(&p.d_j)?),
        d_a: MultiDense::single(fuse_multi_dense(&p.d_a)?),
        collapse: p.collapse.clone(),
        halt: p.halt.clone(),
    })
}

/// Floor of the denominator in [`relative_diff`].
pub const REL_DIFF_FLOOR: f64 = 1e-9;

/// `max|a − b| / max(max|b|, floor)`: the deviation of `a` measured against
/// the magnitude of the reference tensor `b`.
pub fn relative_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, f64)> {
    let abs = a.max_abs_diff(b)?;
    Ok((abs, abs / b.max_abs().max(REL_DIFF_FLOOR)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffStats {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

impl DiffStats {
    fn absorb(&mut self, (abs, rel): (f64, f64)) {
        self.max_abs_diff = self.max_abs_diff.max(abs);
        self.max_rel_diff = self.max_rel_diff.max(rel);
    }

    fn merge(&mut self, other: DiffStats) {
        self.absorb((other.max_abs_diff, other.max_rel_diff));
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputDiffs {
    pub line_features: DiffStats,
    pub alphas: DiffStats,
    pub halt_logits: DiffStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub per_output: OutputDiffs,
    /// Trials whose first predicted halt step differs.
    pub halt_step_mismatches: usize,
    pub tolerance: f64,
    pub dtype: DType,
    pub pass: bool,
}

/// Accumulates differences between pairs of rollout traces.
#[derive(Clone, Debug, Default)]
pub struct TraceComparison {
    pub per_output: OutputDiffs,
    pub halt_step_mismatches: usize,
    pub trials: usize,
}

impl TraceComparison {
    pub fn add<T: Real>(&mut self, a: &RolloutTrace<T>, reference: &RolloutTrace<T>) -> Result<()> {
        if a.lines.len() != reference.lines.len() {
            return Err(Error::InvalidArgument(format!(
                "rollouts have {} and {} steps",
                a.lines.len(),
                reference.lines.len()
            )));
        }
        for t in 0..a.lines.len() {
            self.per_output.line_features.absorb(relative_diff(&a.lines[t], &reference.lines[t])?);
            self.per_output.alphas.absorb(relative_diff(&a.alphas[t], &reference.alphas[t])?);
            self.per_output.halt_logits.absorb(relative_diff(&a.halts[t], &reference.halts[t])?);
        }
        self.halt_step_mismatches += usize::from(a.predicted_halt != reference.predicted_halt);
        self.trials += 1;
        Ok(())
    }

    pub fn report(&self, tolerance: f64, dtype: DType) -> EquivalenceReport {
        let mut all = DiffStats::default();
        all.merge(self.per_output.line_features);
        all.merge(self.per_output.alphas);
        all.merge(self.per_output.halt_logits);
        EquivalenceReport {
            trials: self.trials,
            max_abs_diff: all.max_abs_diff,
            max_rel_diff: all.max_rel_diff,
            per_output: self.per_output,
            halt_step_mismatches: self.halt_step_mismatches,
            tolerance,
            dtype,
            pass: all.max_rel_diff <= tolerance && self.halt_step_mismatches == 0,
        }
    }
}

fn same_except_mode(a: &RvafmConfig, b: &RvafmConfig) -> bool {
    a.with_mode(Mode::TrainMultibranch) == b.with_mode(Mode::TrainMultibranch)
}

/// Runs `trials` full rollouts of `max_steps` steps on seeded random
/// feature maps through both parameter sets and compares every line
/// feature, attention vector and halt logit pair.
///
/// Each trial draws `H_f ∈ [4, 12]`, `W_f ∈ [collapse_width, 2·collapse_width]`,
/// features in `[-1, 1]` and a random [`ProjectionHook`] decoder.
pub fn verify_equivalence<T: Real>(
    multi: &RvafmParams<T>,
    fused: &RvafmParams<T>,
    trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    if !same_except_mode(&multi.config, &fused.config) {
        return Err(Error::ConfigMismatch(format!("{:?} vs {:?}", multi.config, fused.config)));
    }
    let cfg = &multi.config;
    let mut cmp = TraceComparison::default();
    for trial in 0..trials {
        let mut r = rng::stream(seed, &format!("verify.{trial}"));
        let h = r.gen_range(4..=12);
        let w = r.gen_range(cfg.collapse_width..=2 * cfg.collapse_width);
        let f = Tensor::<T>::uniform(vec![h, w, cfg.c_f], -1.0, 1.0, &mut r)?;
        let hook = ProjectionHook::random(cfg.c_f, cfg.c_h, &mut r)?;
        let length = RolloutLength::Forced(cfg.max_steps);
        let a = rollout_values(fused, &f, &mut hook.clone(), length)?;
        let b = rollout_values(multi, &f, &mut hook.clone(), length)?;
        cmp.add(&a, &b)?;
    }
    Ok(cmp.report(tolerance, T::DTYPE))
}

/// Parameter counts before and after fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionCounts {
    pub fusable_multi: usize,
    pub fusable_fused: usize,
    pub attention_multi: usize,
    pub attention_fused: usize,
}

impl FusionCounts {
    pub fn of<T: Real>(multi: &RvafmParams<T>, fused: &RvafmParams<T>) -> Self {
        FusionCounts {
            fusable_multi: multi.fusable_param_count(),
            fusable_fused: fused.fusable_param_count(),
            attention_multi: multi.param_count(),
            attention_fused: fused.param_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvafm::DualLayers;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn fuse_dense_by_hand() {
        let a = DenseParams::new(t(&[1, 1], &[1.0]), t(&[1], &[0.5])).unwrap();
        let b = DenseParams::new(t(&[1, 1], &[2.0]), t(&[1], &[-0.5])).unwrap();
        let fused = fuse_multi_dense(&MultiDense::new(vec![a.clone(), b]).unwrap()).unwrap();
        assert_eq!(fused.weight.data(), &[3.0]);
        assert_eq!(fused.bias.data(), &[0.0]);
        assert_eq!(fuse_multi_dense(&MultiDense::single(a.clone())).unwrap(), a);
    }

    #[test]
    fn fuse_conv_delta_pair() {
        let delta = Conv1dParams::new(t(&[1, 1, 3], &[0.0, 1.0, 0.0]), t(&[1], &[0.0]), 1, 1).unwrap();
        let fused = fuse_multi_conv1d(&MultiConv1d::new(vec![delta.clone(), delta]).unwrap()).unwrap();
        assert_eq!(fused.kernel.data(), &[0.0, 2.0, 0.0]);
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(fused.forward(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    fn cfg(nsl: usize) -> RvafmConfig {
        RvafmConfig {
            c_f: 6,
            c_j: 4,
            kernel_size: 5,
            collapse_width: 4,
            c_u: 5,
            c_h: 6,
            nsl,
            max_steps: 3,
            ..RvafmConfig::desk()
        }
    }

    #[test]
    fn fused_rollout_matches_multi_in_f64() {
        let multi = RvafmParams::<f64>::init(cfg(3), 11).unwrap();
        let fused = fuse_rvafm(&multi).unwrap();
        assert_eq!(fused.conv.nsl(), 1);
        assert_eq!(fused.fusable_param_count() * 3, multi.fusable_param_count());
        let rep = verify_equivalence(&multi, &fused, 10, 1e-12, 0).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(matches!(fuse_rvafm(&fused), Err(Error::AlreadyFused)));
    }

    #[test]
    fn perturbed_fusion_fails_verification() {
        let multi = RvafmParams::<f64>::init(cfg(2), 12).unwrap();
        let mut fused = fuse_rvafm(&multi).unwrap();
        fused.d_a.sublayers_mut()[0].weight.data_mut()[0] += 1e-3;
        let rep = verify_equivalence(&multi, &fused, 5, 1e-12, 0).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn partial_ablation_fuses_only_multi_layers() {
        let c = RvafmConfig { dual: DualLayers { d_j: true, ..DualLayers::NONE }, ..cfg(2) };
        let multi = RvafmParams::<f64>::init(c, 13).unwrap();
        let fused = fuse_rvafm(&multi).unwrap();
        assert_eq!(fused.d_h, multi.d_h);
        assert_eq!(fused.conv, multi.conv);
        assert_ne!(fused.d_j, multi.d_j);
        assert!(verify_equivalence(&multi, &fused, 5, 1e-12, 1).unwrap().pass);
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let a = RvafmParams::<f64>::init(cfg(2), 1).unwrap();
        let b = fuse_rvafm(&RvafmParams::<f64>::init(RvafmConfig { c_u: 7, ..cfg(2) }, 1).unwrap()).unwrap();
        assert!(matches!(verify_equivalence(&a, &b, 1, 1e-9, 0), Err(Error::ConfigMismatch(_))));
    }
}
