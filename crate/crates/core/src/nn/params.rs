//! Named flat parameter storage shared by the optimizer, the EMA update, and
//! the checkpoint codec.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// One named tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Ordered set of named parameters. Iteration order is insertion order, which
/// the trainer relies on for deterministic gradient reduction; lookups go
/// through a name index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamCollection {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamCollection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, param: Param) {
        assert!(
            !self.index.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> &Param {
        let i = self.index[name];
        &self.params[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Same names and shapes, all values zero. Gradient/optimizer buffers.
    pub fn zeros_like(&self) -> ParamCollection {
        let mut out = ParamCollection::new();
        for p in &self.params {
            out.add(Param::zeros(p.name.clone(), p.shape.clone()));
        }
        out
    }

    /// Elementwise `self += other` over matching names.
    pub fn accumulate(&mut self, other: &ParamCollection) -> Result<()> {
        self.check_same_structure(other)?;
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
                *d += *s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= factor;
            }
        }
    }

    pub fn zero(&mut self) {
        for p in &mut self.params {
            p.data.fill(0.0);
        }
    }

    /// Max absolute difference across all values of two structurally equal
    /// collections.
    pub fn max_abs_diff(&self, other: &ParamCollection) -> Result<f32> {
        self.check_same_structure(other)?;
        let mut m = 0.0f32;
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                m = m.max((x - y).abs());
            }
        }
        Ok(m)
    }

    pub fn check_same_structure(&self, other: &ParamCollection) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(format!(
                    "parameter mismatch: {}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Subset view (cloned) of every parameter whose name starts with `prefix`.
    pub fn subset_by_prefix(&self, prefix: &str) -> ParamCollection {
        let mut out = ParamCollection::new();
        for p in &self.params {
            if p.name.starts_with(prefix) {
                out.add(p.clone());
            }
        }
        out
    }
}

/// Teacher-side EMA: `teacher <- lambda * teacher + (1 - lambda) * student`
/// for every teacher parameter, matched to the student parameter of the same
/// name. The student may carry extra parameters (heads the teacher lacks);
/// a teacher parameter missing from the student is a structure error.
pub fn ema_update(
    teacher: &mut ParamCollection,
    student: &ParamCollection,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("ema lambda {lambda} outside [0,1]")));
    }
    for t in teacher.iter_mut() {
        let s = student.try_get(&t.name).ok_or_else(|| {
            Error::shape(format!("student has no parameter named {}", t.name))
        })?;
        if s.shape != t.shape {
            return Err(Error::shape(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                t.name, t.shape, s.shape
            )));
        }
        for (tv, sv) in t.data.iter_mut().zip(s.data.iter()) {
            *tv = (lambda * *tv as f64 + (1.0 - lambda) * *sv as f64) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collection(vals: &[(&str, Vec<f32>)]) -> ParamCollection {
        let mut c = ParamCollection::new();
        for (name, data) in vals {
            c.add(Param {
                name: name.to_string(),
                shape: vec![data.len()],
                data: data.clone(),
            });
        }
        c
    }

    #[test]
    fn ema_lambda_one_is_identity() {
        let mut t = collection(&[("enc.w", vec![2.0, -1.0])]);
        let s = collection(&[("enc.w", vec![4.0, 4.0])]);
        let before = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn ema_lambda_zero_copies_student() {
        let mut t = collection(&[("enc.w", vec![2.0, -1.0])]);
        let s = collection(&[("enc.w", vec![4.0, 4.0])]);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.get("enc.w").data, vec![4.0, 4.0]);
    }

    #[test]
    fn ema_halfway() {
        let mut t = collection(&[("enc.w", vec![2.0])]);
        let s = collection(&[("enc.w", vec![4.0])]);
        ema_update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.get("enc.w").data, vec![3.0]);
    }

    #[test]
    fn ema_ignores_student_only_params() {
        let mut t = collection(&[("enc.w", vec![0.0])]);
        let s = collection(&[("comp.w", vec![9.0]), ("enc.w", vec![1.0])]);
        ema_update(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.get("enc.w").data, vec![0.5]);
    }

    #[test]
    fn ema_rejects_missing_or_mismatched() {
        let mut t = collection(&[("enc.w", vec![0.0])]);
        let s = collection(&[("other.w", vec![1.0])]);
        assert!(ema_update(&mut t, &s, 0.5).is_err());

        let mut t2 = collection(&[("enc.w", vec![0.0, 0.0])]);
        let s2 = collection(&[("enc.w", vec![1.0])]);
        assert!(ema_update(&mut t2, &s2, 0.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically_with_frozen_student() {
        let mut t = collection(&[("enc.w", vec![1.0])]);
        let s = collection(&[("enc.w", vec![0.0])]);
        let lambda = 0.9;
        let mut prev_gap = 1.0f32;
        for _ in 0..20 {
            ema_update(&mut t, &s, lambda).unwrap();
            let gap = t.get("enc.w").data[0].abs();
            assert!((gap - prev_gap * lambda as f32).abs() < 1e-6);
            prev_gap = gap;
        }
        assert!(prev_gap < 0.15);
    }

    #[test]
    fn accumulate_and_scale() {
        let mut a = collection(&[("w", vec![1.0, 2.0])]);
        let b = collection(&[("w", vec![0.5, 0.5])]);
        a.accumulate(&b).unwrap();
        a.scale(2.0);
        assert_eq!(a.get("w").data, vec![3.0, 5.0]);
    }
}
