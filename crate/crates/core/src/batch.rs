//! Two-level forward/backward over a batch of sequences.
//!
//! Each sequence gets its own [`Session`] (built in parallel). Whatever
//! couples the sequences, such as batch means, FLOPS, or softmax over
//! candidates, is expressed on a separate loss graph whose inputs are the
//! per-sequence outputs. The loss graph is differentiated first, its input
//! gradients seed the per-sequence graphs, and the parameter gradients are
//! summed in sequence order so the result does not depend on the thread count.

use rayon::prelude::*;

use crate::autograd::{Graph, NodeId};
use crate::encoder::{EncoderModel, Session};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub struct StepResult<T> {
    pub total: T,
    /// Values of the auxiliary loss terms, in the order returned by the loss
    /// builder.
    pub parts: Vec<T>,
    pub grads: Vec<Matrix<T>>,
}

/// Output of a loss builder: the scalar to minimize and any scalar terms
/// worth reporting.
pub struct LossNodes {
    pub total: NodeId,
    pub parts: Vec<NodeId>,
}

/// `build(i, session)` records sequence `i` and returns its output nodes;
/// `loss(graph, inputs)` receives one input node per output (same nesting)
/// and builds the batch loss.
pub fn batch_step<'a, T, F, L>(model: &'a EncoderModel<T>, n: usize, build: F, loss: L) -> Result<StepResult<T>>
where
    T: Scalar,
    F: Fn(usize, &mut Session<'a, T>) -> Result<Vec<NodeId>> + Sync,
    L: for<'g> FnOnce(&mut Graph<'g, T>, &[Vec<NodeId>]) -> Result<LossNodes>,
{
    let seqs: Vec<(Session<'a, T>, Vec<NodeId>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = model.session();
            let outs = build(i, &mut s)?;
            Ok((s, outs))
        })
        .collect::<Result<_>>()?;

    let mut lg: Graph<'_, T> = Graph::new();
    let inputs: Vec<Vec<NodeId>> =
        seqs.iter().map(|(s, outs)| outs.iter().map(|&o| lg.input(s.value(o).clone())).collect()).collect();
    let nodes = loss(&mut lg, &inputs)?;
    let total = lg.value(nodes.total).item();
    let parts = nodes.parts.iter().map(|&p| lg.value(p).item()).collect();
    let lgrads = lg.backward_scalar(nodes.total);

    let per_seq: Vec<Vec<Matrix<T>>> = seqs
        .par_iter()
        .zip(inputs.par_iter())
        .map(|((s, outs), ins)| {
            let seeds: Vec<(NodeId, Matrix<T>)> = outs
                .iter()
                .zip(ins)
                .filter_map(|(&o, &i)| lgrads.get(i).map(|g| (o, g.clone())))
                .collect();
            let mut g = model.zero_grads();
            if !seeds.is_empty() {
                s.accumulate_grads(&seeds, &mut g);
            }
            g
        })
        .collect();

    let mut grads = model.zero_grads();
    for g in &per_seq {
        for (acc, x) in grads.iter_mut().zip(g) {
            acc.add_assign(x);
        }
    }
    Ok(StepResult { total, parts, grads })
}

/// Forward-only map over sequences, order preserving.
pub fn par_map<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync + Send,
{
    items.par_iter().map(f).collect()
}
