//! Reverse-mode replay.
//!
//! The graph is built define-by-run: each recorded tensor keeps its producing
//! operation and inputs. `Tape::record` linearizes the ancestry of a root into
//! topological order; `backward` replays it in reverse.

use std::collections::{HashMap, HashSet};

use super::tensor::{BackwardCtx, Tensor};
use crate::error::{Error, Result};

/// Recorded operations reachable from a root, producers before consumers.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; graphs can be thousands of nodes deep
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Tape { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in order (`"leaf"` for leaves).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .map(|t| t.0.node.as_ref().map_or("leaf", |n| n.op.name()))
            .collect()
    }

    /// Position of each tensor on the tape, for order checks.
    pub fn positions(&self) -> HashMap<usize, usize> {
        self.nodes.iter().enumerate().map(|(i, t)| (t.id(), i)).collect()
    }

    pub fn position_of(&self, t: &Tensor) -> Option<usize> {
        self.nodes.iter().position(|n| n.id() == t.id())
    }

    pub(crate) fn entries(&self) -> &[Tensor] {
        &self.nodes
    }
}

/// Populates gradients of every trainable leaf reachable from `loss`.
/// Repeated calls accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Ok(());
    }
    let tape = Tape::record(loss);
    let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for t in tape.entries().iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        match &t.0.node {
            None => t.accumulate_grad(&g),
            Some(node) => {
                let ctx = BackwardCtx {
                    inputs: &node.inputs,
                    output: t,
                };
                let input_grads = node.op.backward(&ctx, &g);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "{}", node.op.name());
                    match grads.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(input.id(), ig);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
