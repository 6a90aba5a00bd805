use crate::scalar::Scalar;

use super::graph::{Graph, NodeId};
use super::AutodiffError;

/// Worst gradient disagreement found by [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport<S> {
    pub max_relative_error: S,
    /// Leaf that produced the maximum.
    pub worst_leaf: Option<NodeId>,
}

/// Compares reverse-mode gradients of `root` against central differences.
///
/// For every leaf the error is `‖analytic − numeric‖ / max(‖analytic‖,
/// ‖numeric‖, 1e-12)` with Euclidean norms taken over the leaf's elements;
/// the maximum over leaves is returned. Leaf values are restored afterwards.
pub fn grad_check<S: Scalar>(
    graph: &mut Graph<S>,
    root: NodeId,
    leaves: &[NodeId],
    eps: S,
) -> Result<GradCheckReport<S>, AutodiffError> {
    if !(eps > S::zero() && eps <= S::from_f64_lossy(1e-2)) {
        return Err(AutodiffError::InvalidStep(eps.to_f64_lossy()));
    }
    graph.forward()?;
    let grads = graph.backward(root)?;
    let floor = S::from_f64_lossy(1e-12);
    let two = S::one() + S::one();

    let mut report = GradCheckReport {
        max_relative_error: S::zero(),
        worst_leaf: None,
    };
    for &leaf in leaves {
        let original = graph
            .value(leaf)
            .cloned()
            .ok_or(AutodiffError::UnboundLeaf(leaf.index()))?;
        let analytic = grads
            .get(leaf)
            .cloned()
            .unwrap_or_else(|| super::DenseArray::zeros_like(&original));

        let mut numeric = Vec::with_capacity(original.len());
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.values_mut()[i] = plus.values()[i] + eps;
            graph.bind(leaf, plus)?;
            let f_plus = scalar_root(graph, root)?;

            let mut minus = original.clone();
            minus.values_mut()[i] = minus.values()[i] - eps;
            graph.bind(leaf, minus)?;
            let f_minus = scalar_root(graph, root)?;

            numeric.push((f_plus - f_minus) / (two * eps));
        }
        graph.bind(leaf, original)?;

        let diff: S = analytic
            .values()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a - n) * (a - n))
            .sum::<S>()
            .sqrt();
        let a_norm = analytic.norm_sq().sqrt();
        let n_norm = numeric.iter().map(|&n| n * n).sum::<S>().sqrt();
        let rel = diff / a_norm.max(n_norm).max(floor);
        if report.worst_leaf.is_none() || !(rel <= report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_leaf = Some(leaf);
        }
    }
    graph.forward()?;
    Ok(report)
}

fn scalar_root<S: Scalar>(graph: &mut Graph<S>, root: NodeId) -> Result<S, AutodiffError> {
    graph.forward()?;
    let v = graph.v(root);
    v.item().ok_or_else(|| AutodiffError::RootNotScalar(v.shape().to_vec()))
}
