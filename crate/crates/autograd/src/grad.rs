use std::collections::{HashMap, HashSet};

use crate::error::{AutogradError, Result};
use crate::tensor::{set_grad_enabled, Tensor};

/// Gradients of a single-element `output` with respect to each of `wrt`.
///
/// Only the part of the graph lying between `output` and the requested
/// tensors is traversed. Tensors that `output` does not depend on receive a
/// zero gradient. With `create_graph` the returned gradients are themselves
/// recorded, so they can be differentiated again (gradient penalties); every
/// operation on the traversed path must then support higher-order gradients.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(AutogradError::NonScalarOutput(output.shape().to_vec()));
    }
    let targets: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    // Nodes reachable from the output through grad-requiring edges.
    let mut reachable: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || reachable.contains_key(&t.id()) {
            continue;
        }
        stack.extend(t.0.inputs.iter().cloned());
        reachable.insert(t.id(), t);
    }

    // Ids grow in creation order, so ascending id is a topological order.
    let mut order: Vec<Tensor> = reachable.into_values().collect();
    order.sort_by_key(Tensor::id);
    let mut needed: HashSet<u64> = HashSet::new();
    for t in &order {
        if targets.contains(&t.id()) || t.0.inputs.iter().any(|i| needed.contains(&i.id())) {
            needed.insert(t.id());
        }
    }

    let _mode = set_grad_enabled(create_graph);
    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape()));

    for t in order.iter().rev() {
        if !needed.contains(&t.id()) {
            continue;
        }
        let Some(op) = t.0.grad_fn.as_ref() else { continue };
        let Some(g) = grads.get(&t.id()).cloned() else { continue };
        if create_graph && !op.higher_order() {
            return Err(AutogradError::SecondOrderUnsupported(op.name()));
        }
        let input_grads = op.backward(&t.0.inputs, t, &g)?;
        for (input, ig) in t.0.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !needed.contains(&input.id()) {
                continue;
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(input.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}
