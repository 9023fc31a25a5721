//! The three branch objectives and their shared machinery: temperature-
//! sharpened softmax, teacher-output centering, cross-entropy consistency for
//! the localizability branch, and mean-squared-error agreement for the
//! composability and decomposability branches, combined by a weighted sum.
//!
//! All loss math runs in `f64` regardless of activation precision, and every
//! branch loss has a `_grad` variant returning analytic gradients with
//! respect to its *student-side* inputs only — teacher inputs are
//! stop-gradient by construction (no gradient is ever computed for them).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Branch weights for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub localizability: f64,
    pub composability: f64,
    pub decomposability: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            localizability: 1.0,
            composability: 1.0,
            decomposability: 1.0,
        }
    }
}

impl LossWeights {
    /// Localizability-only weighting used by warm-up phases.
    pub fn warmup() -> Self {
        LossWeights {
            localizability: 1.0,
            composability: 0.0,
            decomposability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.localizability, self.composability, self.decomposability];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("loss weights must not all be zero"));
        }
        Ok(())
    }
}

/// Student and teacher softmax temperatures. The teacher runs sharper
/// (smaller temperature) than the student; its value is ramped linearly from
/// `teacher_start` to `teacher_end` over the warm-up span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperaturePair {
    pub student: f64,
    pub teacher_start: f64,
    pub teacher_end: f64,
}

impl Default for TemperaturePair {
    fn default() -> Self {
        TemperaturePair {
            student: 0.1,
            teacher_start: 0.04,
            teacher_end: 0.07,
        }
    }
}

impl TemperaturePair {
    pub fn validate(&self) -> Result<()> {
        if self.student <= 0.0 || self.teacher_start <= 0.0 || self.teacher_end <= 0.0 {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if self.teacher_start > self.student || self.teacher_end >= self.student {
            return Err(Error::invalid(
                "teacher temperature must stay below the student temperature",
            ));
        }
        Ok(())
    }

    /// Teacher temperature after `step` of `warmup_steps` ramp steps.
    pub fn teacher_at(&self, step: u64, warmup_steps: u64) -> f64 {
        if warmup_steps == 0 || step >= warmup_steps {
            return self.teacher_end;
        }
        let frac = step as f64 / warmup_steps as f64;
        self.teacher_start + (self.teacher_end - self.teacher_start) * frac
    }
}

/// Temperature-sharpened softmax with max-subtraction:
/// `P^(i) = exp(z^(i)/tau) / sum_k exp(z^(k)/tau)`.
pub fn sharpened_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be > 0")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Shannon entropy in nats of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// Running-mean update of the teacher center:
/// `center <- momentum * center + (1 - momentum) * mean(batch logits)`.
pub fn center_update(center: &mut [f32], teacher_logit_batch: &[Vec<f32>], momentum: f64) -> Result<()> {
    if teacher_logit_batch.is_empty() {
        return Err(Error::invalid("center update on empty batch"));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("center momentum {momentum} outside [0,1]")));
    }
    let k = center.len();
    for (i, z) in teacher_logit_batch.iter().enumerate() {
        if z.len() != k {
            return Err(Error::shape(format!(
                "teacher logits {i} length {} != center length {k}",
                z.len()
            )));
        }
    }
    let n = teacher_logit_batch.len() as f64;
    for j in 0..k {
        let mean: f64 = teacher_logit_batch.iter().map(|z| z[j] as f64).sum::<f64>() / n;
        center[j] = (momentum * center[j] as f64 + (1.0 - momentum) * mean) as f32;
    }
    Ok(())
}

/// Centered, sharpened teacher distribution. `center = None` disables
/// centering (config switch; centering is on in the default pipeline).
pub fn teacher_distribution(
    teacher_logits: &[f64],
    center: Option<&[f64]>,
    tau_teacher: f64,
) -> Result<Vec<f64>> {
    match center {
        None => sharpened_softmax(teacher_logits, tau_teacher),
        Some(c) => {
            if c.len() != teacher_logits.len() {
                return Err(Error::shape(format!(
                    "center length {} != logits length {}",
                    c.len(),
                    teacher_logits.len()
                )));
            }
            let centered: Vec<f64> = teacher_logits.iter().zip(c).map(|(&z, &m)| z - m).collect();
            sharpened_softmax(&centered, tau_teacher)
        }
    }
}

/// Localizability consistency loss:
/// `-(1/|Zs|) * sum_{zs in Zs} sum_i Pt^(i) * log Ps(zs)^(i)`,
/// with `Pt` from centered, teacher-sharpened logits (stop-gradient) and
/// `Ps` from student-sharpened logits.
pub fn localizability_loss(
    teacher_logits: &[f64],
    student_logit_set: &[Vec<f64>],
    temps: &TemperaturePair,
    tau_teacher: f64,
    center: Option<&[f64]>,
) -> Result<f64> {
    localizability_loss_grad(teacher_logits, student_logit_set, temps, tau_teacher, center)
        .map(|(loss, _)| loss)
}

/// As [`localizability_loss`], also returning `d loss / d zs` for every
/// student logit vector.
pub fn localizability_loss_grad(
    teacher_logits: &[f64],
    student_logit_set: &[Vec<f64>],
    temps: &TemperaturePair,
    tau_teacher: f64,
    center: Option<&[f64]>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if student_logit_set.is_empty() {
        return Err(Error::invalid("localizability loss needs at least one student view"));
    }
    let k = teacher_logits.len();
    for (i, z) in student_logit_set.iter().enumerate() {
        if z.len() != k {
            return Err(Error::shape(format!(
                "student logits {i} length {} != K {k}",
                z.len()
            )));
        }
    }
    let p_t = teacher_distribution(teacher_logits, center, tau_teacher)?;
    let n = student_logit_set.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(student_logit_set.len());
    for z_s in student_logit_set {
        let p_s = sharpened_softmax(z_s, temps.student)?;
        // cross-entropy via log-softmax for stability
        let max = z_s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = z_s
            .iter()
            .map(|&z| ((z - max) / temps.student).exp())
            .sum::<f64>()
            .ln();
        let mut ce = 0.0;
        for i in 0..k {
            let log_ps = (z_s[i] - max) / temps.student - log_sum;
            ce -= p_t[i] * log_ps;
        }
        loss += ce / n;
        // d ce / d zs = (Ps - Pt) / tau_s, scaled by the 1/|Zs| average
        let g: Vec<f64> = p_s
            .iter()
            .zip(p_t.iter())
            .map(|(&ps, &pt)| (ps - pt) / (temps.student * n))
            .collect();
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Mean squared error over coordinates. The first argument is the
/// stop-gradient (teacher) side.
pub fn composability_loss(z_whole_teacher: &[f64], z_parts_student: &[f64]) -> Result<f64> {
    composability_loss_grad(z_whole_teacher, z_parts_student).map(|(l, _)| l)
}

/// As [`composability_loss`], also returning `d loss / d z_parts_student`.
pub fn composability_loss_grad(
    z_whole_teacher: &[f64],
    z_parts_student: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if z_whole_teacher.len() != z_parts_student.len() {
        return Err(Error::shape(format!(
            "embedding lengths differ: {} vs {}",
            z_whole_teacher.len(),
            z_parts_student.len()
        )));
    }
    if z_whole_teacher.is_empty() {
        return Err(Error::invalid("empty embeddings"));
    }
    let d = z_whole_teacher.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(z_whole_teacher.len());
    for (&t, &s) in z_whole_teacher.iter().zip(z_parts_student.iter()) {
        let diff = s - t;
        loss += diff * diff / d;
        grad.push(2.0 * diff / d);
    }
    Ok((loss, grad))
}

/// Mean over parts of the per-part MSE between true part embeddings
/// (teacher, stop-gradient) and decomposed predictions (student), paired
/// index-wise in canonical part order.
pub fn decomposability_loss(
    part_teacher: &[Vec<f64>],
    decomposed_student: &[Vec<f64>],
) -> Result<f64> {
    decomposability_loss_grad(part_teacher, decomposed_student).map(|(l, _)| l)
}

/// As [`decomposability_loss`], also returning per-part gradients with
/// respect to the decomposed student embeddings.
pub fn decomposability_loss_grad(
    part_teacher: &[Vec<f64>],
    decomposed_student: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if part_teacher.len() != decomposed_student.len() {
        return Err(Error::shape(format!(
            "part counts differ: {} vs {}",
            part_teacher.len(),
            decomposed_student.len()
        )));
    }
    if part_teacher.is_empty() {
        return Err(Error::invalid("decomposability loss needs at least one part"));
    }
    let n = part_teacher.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(part_teacher.len());
    for (t, s) in part_teacher.iter().zip(decomposed_student.iter()) {
        let (l, g) = composability_loss_grad(t, s)?;
        loss += l / n;
        grads.push(g.into_iter().map(|v| v / n).collect());
    }
    Ok((loss, grads))
}

/// Weighted sum of the three branch losses.
pub fn total_loss(l_loc: f64, l_comp: f64, l_decomp: f64, w: &LossWeights) -> Result<f64> {
    if !l_loc.is_finite() || !l_comp.is_finite() || !l_decomp.is_finite() {
        return Err(Error::NonFinite(format!(
            "branch losses ({l_loc}, {l_comp}, {l_decomp})"
        )));
    }
    Ok(w.localizability * l_loc + w.composability * l_comp + w.decomposability * l_decomp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_for_equal_logits() {
        for tau in [0.04, 0.1, 1.0] {
            let p = sharpened_softmax(&[3.0; 8], tau).unwrap();
            for &v in &p {
                assert!((v - 0.125).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_hand_values() {
        // logits [ln 2, 0] at tau 1 -> [2/3, 1/3]
        let p = sharpened_softmax(&[(2.0f64).ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);

        // logits [1, 0] at tau 0.1 -> [1/(1+e^-10), e^-10/(1+e^-10)]
        let p = sharpened_softmax(&[1.0, 0.0], 0.1).unwrap();
        let e10 = (-10.0f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e10)).abs() < 1e-9);
        assert!((p[1] - e10 / (1.0 + e10)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(sharpened_softmax(&[1.0], 0.0).is_err());
        assert!(sharpened_softmax(&[1.0], -0.5).is_err());
        assert!(sharpened_softmax(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(sharpened_softmax(&[f64::INFINITY, 0.0], 1.0).is_err());
        assert!(sharpened_softmax(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_sharpening_monotone_in_temperature() {
        let logits = [0.3, -0.8, 1.7, 0.0, 0.4];
        let mut prev_max = 1.0;
        for tau in [0.04, 0.07, 0.1, 1.0] {
            let p = sharpened_softmax(&logits, tau).unwrap();
            let mx = p.iter().cloned().fold(0.0, f64::max);
            assert!(mx <= prev_max + 1e-12, "max prob must not increase with tau");
            prev_max = mx;
        }
    }

    #[test]
    fn center_update_hand_values() {
        let batch = vec![vec![1.0f32; 4], vec![1.0f32; 4]];
        let mut center = vec![0.0f32; 4];
        center_update(&mut center, &batch, 1.0).unwrap();
        assert_eq!(center, vec![0.0; 4]);
        center_update(&mut center, &batch, 0.0).unwrap();
        assert_eq!(center, vec![1.0; 4]);
        let mut center = vec![0.0f32; 4];
        center_update(&mut center, &batch, 0.9).unwrap();
        for &c in &center {
            assert!((c - 0.1).abs() < 1e-6);
        }
        assert!(center_update(&mut center, &[], 0.9).is_err());
    }

    #[test]
    fn localizability_matched_sharp_distributions_reach_zero() {
        // teacher extremely peaked at index 0, student likewise
        let k = 6;
        let mut zt = vec![0.0; k];
        zt[0] = 100.0;
        let mut zs = vec![0.0; k];
        zs[0] = 100.0;
        let temps = TemperaturePair::default();
        let loss =
            localizability_loss(&zt, &[zs], &temps, temps.teacher_end, None).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn localizability_uniform_equals_ln_k() {
        let k = 16;
        let zt = vec![0.5; k];
        let zs = vec![-1.25; k];
        let temps = TemperaturePair::default();
        let loss =
            localizability_loss(&zt, &[zs], &temps, temps.teacher_end, None).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn localizability_duplicate_views_average_cleanly() {
        let zt = vec![0.2, -0.4, 1.0];
        let zs = vec![0.9, 0.0, -0.3];
        let temps = TemperaturePair::default();
        let one =
            localizability_loss(&zt, &[zs.clone()], &temps, 0.05, None).unwrap();
        let two =
            localizability_loss(&zt, &[zs.clone(), zs], &temps, 0.05, None).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn localizability_bounded_below_by_teacher_entropy() {
        let zt = vec![0.9, -0.2, 0.05, 1.4];
        let zs = vec![-0.3, 0.8, 0.0, 0.1];
        let temps = TemperaturePair::default();
        let tau_t = temps.teacher_end;
        let p_t = teacher_distribution(&zt, None, tau_t).unwrap();
        let loss = localizability_loss(&zt, &[zs], &temps, tau_t, None).unwrap();
        assert!(loss >= entropy(&p_t) - 1e-12);
        assert!(entropy(&p_t) >= 0.0);
    }

    #[test]
    fn localizability_rejects_empty_and_mismatched() {
        let temps = TemperaturePair::default();
        assert!(localizability_loss(&[0.0; 4], &[], &temps, 0.05, None).is_err());
        assert!(
            localizability_loss(&[0.0; 4], &[vec![0.0; 3]], &temps, 0.05, None).is_err()
        );
        assert!(localizability_loss(
            &[0.0; 4],
            &[vec![0.0; 4]],
            &temps,
            0.05,
            Some(&[0.0; 3])
        )
        .is_err());
    }

    #[test]
    fn centering_shifts_teacher_distribution() {
        let zt = vec![2.0, 0.0];
        let centered = teacher_distribution(&zt, Some(&[2.0, 0.0]), 0.5).unwrap();
        assert!((centered[0] - 0.5).abs() < 1e-12);
        let raw = teacher_distribution(&zt, None, 0.5).unwrap();
        assert!(raw[0] > 0.9);
    }

    #[test]
    fn composability_hand_values() {
        assert_eq!(composability_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let l = composability_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        // scaling both sides by c scales the loss by c^2
        let base = composability_loss(&[0.3, -0.7], &[0.1, 0.2]).unwrap();
        let scaled = composability_loss(&[0.9, -2.1], &[0.3, 0.6]).unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-12);
        assert!(composability_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn decomposability_hand_values() {
        let t = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let s = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(decomposability_loss(&t, &s).unwrap(), 0.0);

        // single part reduces to plain MSE
        let l1 = decomposability_loss(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
        let l2 = composability_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        // two parts with MSEs 0.5 and 1.5 average to 1.0
        let t = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let s = vec![vec![1.0, 0.0], vec![1.0, (2.0f64).sqrt()]];
        let l = decomposability_loss(&t, &s).unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        assert!(decomposability_loss(&t, &s[..1]).is_err());
        assert!(decomposability_loss(&[], &[]).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w).unwrap(), 6.0);
        let warm = LossWeights::warmup();
        assert_eq!(total_loss(1.5, 9.0, 9.0, &warm).unwrap(), 1.5);
        let w = LossWeights {
            localizability: 2.0,
            composability: 3.0,
            decomposability: 4.0,
        };
        let t = total_loss(0.1, 0.1, 0.1, &w).unwrap();
        assert!((t - 0.9).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            localizability: 0.0,
            composability: 0.0,
            decomposability: 0.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            localizability: -1.0,
            composability: 0.0,
            decomposability: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn temperature_validation_and_warmup() {
        let t = TemperaturePair::default();
        t.validate().unwrap();
        assert_eq!(t.teacher_at(0, 100), 0.04);
        assert!((t.teacher_at(50, 100) - 0.055).abs() < 1e-12);
        assert_eq!(t.teacher_at(100, 100), 0.07);
        assert_eq!(t.teacher_at(500, 100), 0.07);
        assert_eq!(t.teacher_at(0, 0), 0.07);

        let bad = TemperaturePair {
            student: 0.05,
            teacher_start: 0.04,
            teacher_end: 0.07,
        };
        assert!(bad.validate().is_err());
    }

    /// Norm-relative error between an analytic gradient vector and its
    /// central-difference counterpart: `||a - fd|| / max(||fd||, tiny)`.
    pub(crate) fn grad_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    /// Central-difference check on every branch loss gradient, plus the
    /// stop-gradient contract: perturbing the teacher side changes the loss
    /// value while reported gradients stay attached to student inputs only.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = crate::rng::Pcg32::new(42, 0);
        let temps = TemperaturePair::default();
        let eps = 1e-5;
        for trial in 0..20 {
            let k = 4 + rng.below(13); // K <= 16
            let d = 2 + rng.below(7); // d <= 8
            let n = 1 + rng.below(4); // n <= 4

            // localizability
            let zt: Vec<f64> = (0..k).map(|_| rng.normal_f32() as f64).collect();
            let center: Vec<f64> = (0..k).map(|_| rng.normal_f32() as f64 * 0.1).collect();
            let zs_set: Vec<Vec<f64>> = (0..1 + rng.below(3))
                .map(|_| (0..k).map(|_| rng.normal_f32() as f64).collect())
                .collect();
            let (_, grads) =
                localizability_loss_grad(&zt, &zs_set, &temps, 0.07, Some(&center)).unwrap();
            for vi in 0..zs_set.len() {
                let mut fd = Vec::with_capacity(k);
                for i in 0..k {
                    let mut plus = zs_set.clone();
                    plus[vi][i] += eps;
                    let up =
                        localizability_loss(&zt, &plus, &temps, 0.07, Some(&center)).unwrap();
                    let mut minus = zs_set.clone();
                    minus[vi][i] -= eps;
                    let down =
                        localizability_loss(&zt, &minus, &temps, 0.07, Some(&center)).unwrap();
                    fd.push((up - down) / (2.0 * eps));
                }
                let rel = grad_rel_error(&grads[vi], &fd);
                assert!(rel <= 1e-4, "trial {trial} loc grad[{vi}]: rel {rel}");
            }

            // composability
            let zwt: Vec<f64> = (0..d).map(|_| rng.normal_f32() as f64).collect();
            let zps: Vec<f64> = (0..d).map(|_| rng.normal_f32() as f64).collect();
            let (_, g) = composability_loss_grad(&zwt, &zps).unwrap();
            let mut fd = Vec::with_capacity(d);
            for i in 0..d {
                let mut plus = zps.clone();
                plus[i] += eps;
                let mut minus = zps.clone();
                minus[i] -= eps;
                fd.push(
                    (composability_loss(&zwt, &plus).unwrap()
                        - composability_loss(&zwt, &minus).unwrap())
                        / (2.0 * eps),
                );
            }
            let rel = grad_rel_error(&g, &fd);
            assert!(rel <= 1e-4, "trial {trial} comp grad: rel {rel}");

            // decomposability
            let zpt: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.normal_f32() as f64).collect())
                .collect();
            let zps_dec: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.normal_f32() as f64).collect())
                .collect();
            let (_, gd) = decomposability_loss_grad(&zpt, &zps_dec).unwrap();
            for pi in 0..n {
                let mut fd = Vec::with_capacity(d);
                for i in 0..d {
                    let mut plus = zps_dec.clone();
                    plus[pi][i] += eps;
                    let mut minus = zps_dec.clone();
                    minus[pi][i] -= eps;
                    fd.push(
                        (decomposability_loss(&zpt, &plus).unwrap()
                            - decomposability_loss(&zpt, &minus).unwrap())
                            / (2.0 * eps),
                    );
                }
                let rel = grad_rel_error(&gd[pi], &fd);
                assert!(rel <= 1e-4, "trial {trial} decomp grad[{pi}]: rel {rel}");
            }

            // stop-gradient: teacher-side perturbation moves the loss, yet no
            // gradient is reported for it (the API offers none).
            let base = composability_loss(&zwt, &zps).unwrap();
            let mut zwt2 = zwt.clone();
            zwt2[0] += 0.1;
            let moved = composability_loss(&zwt2, &zps).unwrap();
            assert!((base - moved).abs() > 1e-9);
        }
    }
}
