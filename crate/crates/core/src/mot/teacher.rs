//! Stand-in for a vision teacher: a fixed random codebook quantizes patches into codes,
//! and a fixed random rotation of the mean patch gives each element a global feature.

use serde::{Deserialize, Serialize};

use super::params::CODEBOOK_SIZE;
use super::MotError;
use crate::numerics::{self, NumericsError, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSignals {
    /// One code per patch, in sequence order.
    pub codes: Vec<u32>,
    /// One unit vector per visual element.
    pub f_teacher: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    rotation: Vec<Vec<f64>>,
}

impl SyntheticTeacher {
    pub fn new(dim: usize, seed: u64) -> Result<Self, MotError> {
        if dim == 0 {
            return Err(MotError::InvalidArgument("teacher dimension must be positive".into()));
        }
        let mut rng = RngStream::new(seed, 0x7EAC);
        let prototypes = (0..CODEBOOK_SIZE).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        Ok(Self {
            dim,
            prototypes,
            rotation: random_rotation(dim, &mut rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, code: usize) -> &[f64] {
        &self.prototypes[code]
    }

    /// Nearest prototype by Euclidean distance; ties go to the lower code.
    pub fn quantize(&self, patch: &[f64]) -> Result<u32, MotError> {
        self.check(patch)?;
        let mut best = (f64::INFINITY, 0);
        for (j, p) in self.prototypes.iter().enumerate() {
            let d: f64 = p.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        Ok(best.1 as u32)
    }

    /// Unit-normalized rotated mean of an element's patches.
    pub fn global_feature(&self, patches: &[Vec<f64>]) -> Result<Vec<f64>, MotError> {
        if patches.is_empty() {
            return Err(MotError::InvalidArgument("visual element has no patches".into()));
        }
        let mut mean = vec![0.0; self.dim];
        for p in patches {
            self.check(p)?;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / patches.len() as f64;
            }
        }
        let rotated: Vec<f64> = self.rotation.iter().map(|row| numerics::dot(row, &mean)).collect();
        let n = numerics::norm(&rotated);
        if n == 0.0 {
            return Err(NumericsError::DegenerateVector.into());
        }
        Ok(rotated.into_iter().map(|v| v / n).collect())
    }

    /// Signals for a sequence of visual elements, each a list of patch vectors.
    pub fn signals(&self, elements: &[Vec<Vec<f64>>]) -> Result<TeacherSignals, MotError> {
        let mut codes = Vec::new();
        let mut f_teacher = Vec::with_capacity(elements.len());
        for e in elements {
            for p in e {
                codes.push(self.quantize(p)?);
            }
            f_teacher.push(self.global_feature(e)?);
        }
        Ok(TeacherSignals { codes, f_teacher })
    }

    fn check(&self, patch: &[f64]) -> Result<(), MotError> {
        if patch.len() != self.dim || patch.iter().any(|v| !v.is_finite()) {
            return Err(MotError::InvalidArgument(format!(
                "patch must have {} finite entries, got {}",
                self.dim,
                patch.len()
            )));
        }
        Ok(())
    }
}

/// Orthonormal rows from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for r in &rows {
            let p = numerics::dot(&v, r);
            for (a, b) in v.iter_mut().zip(r) {
                *a -= p * b;
            }
        }
        let n = numerics::norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_fixed_point() {
        let a = SyntheticTeacher::new(6, 3).unwrap();
        let b = SyntheticTeacher::new(6, 3).unwrap();
        let mut rng = RngStream::new(9, 0);
        let e: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        assert_eq!(a.signals(&[e.clone(), e.clone()]).unwrap(), b.signals(&[e.clone(), e]).unwrap());
        for j in [0, 17, 2047] {
            assert_eq!(a.quantize(&a.prototype(j).to_vec()).unwrap(), j as u32);
        }
    }

    #[test]
    fn rotation_is_orthonormal_and_feature_unit() {
        let t = SyntheticTeacher::new(5, 1).unwrap();
        for (i, r) in t.rotation.iter().enumerate() {
            for (j, s) in t.rotation.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((numerics::dot(r, s) - want).abs() < 1e-12);
            }
        }
        let f = t.global_feature(&[vec![1.0, 2.0, 0.0, -1.0, 0.5]]).unwrap();
        assert!((numerics::norm(&f) - 1.0).abs() < 1e-12);
        assert!(t.global_feature(&[vec![0.0; 5]]).is_err());
    }

    #[test]
    fn code_histogram_is_spread() {
        let t = SyntheticTeacher::new(6, 11).unwrap();
        let mut rng = RngStream::new(12, 0);
        let n = 5000;
        let mut counts = vec![0usize; CODEBOOK_SIZE];
        for _ in 0..n {
            let p: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            counts[t.quantize(&p).unwrap() as usize] += 1;
        }
        let top = *counts.iter().max().unwrap();
        assert!((top as f64) / (n as f64) <= 0.05, "top code share {top}/{n}");
        assert!(counts.iter().filter(|&&c| c > 0).count() > 500);
    }
}
