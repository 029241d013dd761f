//! Proposal attention maps and max-aggregate consistency.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::nn::sigmoid;

/// One input-wise view of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageTransform {
    pub scale: f64,
    pub hflip: bool,
}

pub fn default_transforms() -> Vec<ImageTransform> {
    let mut v = Vec::new();
    for scale in [1.0, 0.5] {
        for hflip in [false, true] {
            v.push(ImageTransform { scale, hflip });
        }
    }
    v
}

/// `sigmoid(mean over channels)` for each cell of a `cells x channels`
/// pooled tensor.
pub fn attention_map(pooled: ArrayView2<f64>) -> Vec<f64> {
    let k = pooled.ncols().max(1) as f64;
    pooled.rows().into_iter().map(|r| sigmoid(r.sum() / k)).collect()
}

/// Elementwise max over members.
pub fn aggregate(members: &[Vec<f64>]) -> Vec<f64> {
    let mut out = members[0].clone();
    for m in &members[1..] {
        for (a, b) in out.iter_mut().zip(m) {
            *a = a.max(*b);
        }
    }
    out
}

/// `sum_m mean_cells (teacher - member)^2` and its gradient with respect to
/// each member, the teacher held fixed.
pub fn consistency_with_teacher(members: &[Vec<f64>], teacher: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let n = teacher.len().max(1) as f64;
    let mut loss = 0.0;
    let grads = members
        .iter()
        .map(|m| {
            m.iter()
                .zip(teacher)
                .map(|(&a, &t)| {
                    loss += (t - a) * (t - a) / n;
                    -2.0 * (t - a) / n
                })
                .collect()
        })
        .collect();
    (loss, grads)
}

/// Consistency against the members' own max aggregate.
pub fn consistency_loss(members: &[Vec<f64>]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    if members.is_empty() {
        return (0.0, Vec::new(), Vec::new());
    }
    let teacher = aggregate(members);
    let (loss, grads) = consistency_with_teacher(members, &teacher);
    (loss, teacher, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn attention_edges() {
        let z = Array2::<f64>::zeros((49, 3));
        assert!(attention_map(z.view()).iter().all(|&v| v == 0.5));
        let k = Array2::from_elem((4, 2), 1.5);
        assert!(attention_map(k.view()).iter().all(|&v| (v - sigmoid(1.5)).abs() < 1e-15));
    }

    #[test]
    fn attention_is_monotone_in_a_channel() {
        let base = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut up = base.clone();
        up.column_mut(1).mapv_inplace(|v| v + 0.7);
        let a = attention_map(base.view());
        let b = attention_map(up.view());
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
    }

    #[test]
    fn single_or_identical_members_give_zero() {
        let m = vec![0.2, 0.9, 0.4];
        assert_eq!(consistency_loss(std::slice::from_ref(&m)).0, 0.0);
        assert_eq!(consistency_loss(&[m.clone(), m.clone(), m]).0, 0.0);
    }

    #[test]
    fn two_members_by_hand() {
        let a = vec![0.2, 0.4, 0.6, 0.8];
        let b = vec![0.5, 0.1, 0.6, 0.9];
        let (loss, teacher, _) = consistency_loss(&[a, b]);
        assert_eq!(teacher, vec![0.5, 0.4, 0.6, 0.9]);
        assert!((loss - 0.0475).abs() < 1e-15);
    }

    #[test]
    fn aggregate_dominates_members() {
        let ms = vec![vec![0.1, 0.7], vec![0.4, 0.2], vec![0.3, 0.3]];
        let t = aggregate(&ms);
        assert!(ms.iter().all(|m| m.iter().zip(&t).all(|(a, b)| b >= a)));
    }
}
