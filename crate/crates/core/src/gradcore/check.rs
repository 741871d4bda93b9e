//! Central finite-difference gradient checks.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Outcome of comparing an analytic gradient with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Larger of the two gradient norms.
    pub scale: f64,
}

impl GradCheck {
    /// Relative error below `tol`; gradients that vanish on both sides
    /// (norm under 1e-8, i.e. finite-difference noise) also pass.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || self.scale < 1e-8
    }
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` with respect to selected coordinates of
/// each named tensor. At most `max_coords` coordinates per tensor are probed,
/// chosen with `rng`; smaller tensors are probed completely.
pub fn numeric_grads<R: Rng>(
    point: &BTreeMap<String, Tensor>,
    mut loss: impl FnMut(&BTreeMap<String, Tensor>) -> f64,
    max_coords: usize,
    rng: &mut R,
) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out = BTreeMap::new();
    let mut probe = point.clone();
    for (name, t) in point {
        let coords: Vec<usize> = if t.len() <= max_coords {
            (0..t.len()).collect()
        } else {
            let mut c = sample(rng, t.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut g = Vec::with_capacity(coords.len());
        for &i in &coords {
            let x0 = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x0 + FD_STEP;
            let up = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x0 - FD_STEP;
            let down = loss(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = x0;
            g.push((i, (up - down) / (2.0 * FD_STEP)));
        }
        out.insert(name.clone(), g);
    }
    out
}

/// Compares analytic gradients against [`numeric_grads`] per tensor.
pub fn compare(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Vec<(usize, f64)>>,
) -> Vec<GradCheck> {
    numeric
        .iter()
        .map(|(name, coords)| {
            let a: Vec<f64> = coords
                .iter()
                .map(|(i, _)| analytic.get(name).map_or(0.0, |t| t.data()[*i]))
                .collect();
            let n: Vec<f64> = coords.iter().map(|(_, v)| *v).collect();
            let max_abs_error = a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            GradCheck {
                name: name.clone(),
                checked: coords.len(),
                rel_error: rel_error(&a, &n),
                max_abs_error,
                scale: norm(&a).max(norm(&n)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_numeric_gradient() {
        let mut p = BTreeMap::new();
        p.insert("x".to_string(), Tensor::vector(vec![1.5, -2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = numeric_grads(&p, |q| q["x"].data().iter().map(|v| v * v * v).sum(), 10, &mut rng);
        let want = [3.0 * 1.5 * 1.5, 3.0 * 4.0];
        for ((_, got), w) in g["x"].iter().zip(want) {
            assert!((got - w).abs() < 1e-6);
        }
    }

    #[test]
    fn rel_error_of_identical_vectors_is_zero() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }
}
