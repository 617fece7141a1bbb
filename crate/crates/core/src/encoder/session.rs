use crate::autograd::{Grads, Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, NUM_SPECIAL};

use super::EncoderModel;

/// One differentiable pass over an [`EncoderModel`]. Parameter leaves are
/// created on first use and shared by every head built in the session.
pub struct Session<'a, T> {
    model: &'a EncoderModel<T>,
    graph: Graph<'a, T>,
    leaves: Vec<Option<NodeId>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(model: &'a EncoderModel<T>) -> Self {
        Self { model, graph: Graph::new(), leaves: vec![None; model.params.len()] }
    }

    pub fn model(&self) -> &'a EncoderModel<T> {
        self.model
    }

    pub fn graph_mut(&mut self) -> &mut Graph<'a, T> {
        &mut self.graph
    }

    pub fn graph(&self) -> &Graph<'a, T> {
        &self.graph
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        self.graph.value(id)
    }

    fn p(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.leaves[index] {
            return id;
        }
        let model = self.model;
        let id = self.graph.param(index, &model.params[index]);
        self.leaves[index] = Some(id);
        id
    }

    fn linear(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.graph.matmul(x, w);
        self.graph.add_row(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, g: usize, b: usize) -> NodeId {
        let (g, b) = (self.p(g), self.p(b));
        self.graph.layer_norm(x, g, b)
    }

    /// Transformer stack. `segments` defaults to all zeros.
    pub fn encode(&mut self, ids: &[TokenId], segments: Option<&[u8]>, mask: &[bool]) -> Result<NodeId> {
        let model = self.model;
        let cfg = &model.config;
        if ids.len() > cfg.max_positions {
            return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_positions });
        }
        if mask.len() != ids.len() {
            return Err(Error::DimensionMismatch { expected: ids.len(), actual: mask.len() });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::IdOutOfRange { id: bad as usize, size: cfg.vocab_size });
        }
        let layout = &model.layout;
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let seg_ids: Vec<usize> = match segments {
            Some(s) => {
                if s.len() != ids.len() {
                    return Err(Error::DimensionMismatch { expected: ids.len(), actual: s.len() });
                }
                s.iter().map(|&x| (x as usize).min(1)).collect()
            }
            None => vec![0; ids.len()],
        };

        let tok_table = self.p(layout.token);
        let pos_table = self.p(layout.position);
        let seg_table = self.p(layout.segment);
        let tok = self.graph.gather(tok_table, &tok_ids);
        let pos = self.graph.gather(pos_table, &pos_ids);
        let seg = self.graph.gather(seg_table, &seg_ids);
        let x = self.graph.add(tok, pos);
        let x = self.graph.add(x, seg);
        let mut x = self.layer_norm(x, layout.emb_ln_g, layout.emb_ln_b);

        let heads = cfg.num_heads;
        for l in 0..layout.layers.len() {
            let lp = &layout.layers[l];
            let q = self.linear(x, lp.q_w, lp.q_b);
            let k = self.linear(x, lp.k_w, lp.k_b);
            let v = self.linear(x, lp.v_w, lp.v_b);
            let a = self.graph.attention(q, k, v, heads, mask);
            let a = self.linear(a, lp.o_w, lp.o_b);
            let r = self.graph.add(x, a);
            let h = self.layer_norm(r, lp.ln1_g, lp.ln1_b);
            let f = self.linear(h, lp.ff1_w, lp.ff1_b);
            let f = self.graph.gelu(f);
            let f = self.linear(f, lp.ff2_w, lp.ff2_b);
            let r = self.graph.add(h, f);
            x = self.layer_norm(r, lp.ln2_g, lp.ln2_b);
        }
        Ok(x)
    }

    /// MLM head: dense + GELU + layer norm, then the (tied or untied)
    /// vocabulary projection plus bias.
    pub fn mlm_logits(&mut self, hidden: NodeId) -> NodeId {
        let layout = &self.model.layout;
        let (w, b, g, lb, out_b) = (layout.mlm_w, layout.mlm_b, layout.mlm_ln_g, layout.mlm_ln_b, layout.mlm_out_b);
        let decoder = layout.mlm_decoder.unwrap_or(layout.token);
        let t = self.linear(hidden, w, b);
        let t = self.graph.gelu(t);
        let t = self.layer_norm(t, g, lb);
        let dec = self.p(decoder);
        let logits = self.graph.matmul_bt(t, dec);
        let ob = self.p(out_b);
        self.graph.add_row(logits, ob)
    }

    /// MLM logits restricted to the given positions.
    pub fn mlm_logits_at(&mut self, hidden: NodeId, rows: &[usize]) -> NodeId {
        let sel = self.graph.select_rows(hidden, rows);
        self.mlm_logits(sel)
    }

    /// `1 x vocab` SPLADE row: max over unmasked positions of
    /// `log(1 + relu(logits))`, special-token columns zeroed.
    pub fn splade_pool(&mut self, logits: NodeId, mask: &[bool]) -> Result<NodeId> {
        if mask.len() != self.value(logits).rows() {
            return Err(Error::DimensionMismatch { expected: self.value(logits).rows(), actual: mask.len() });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllPositionsMasked);
        }
        let act = self.graph.splade_act(logits);
        let pooled = self.graph.max_pool_rows(act, mask);
        Ok(self.graph.zero_prefix_cols(pooled, NUM_SPECIAL))
    }

    /// `1 x hidden` CLS row.
    pub fn cls(&mut self, hidden: NodeId) -> NodeId {
        self.graph.select_rows(hidden, &[0])
    }

    /// `1 x 1` relevance score from the CLS row.
    pub fn cross_score(&mut self, hidden: NodeId) -> NodeId {
        let cls = self.cls(hidden);
        let (w, b) = (self.model.layout.cross_w, self.model.layout.cross_b);
        self.linear(cls, w, b)
    }

    pub fn backward(&self, seeds: &[(NodeId, Matrix<T>)]) -> Grads<T> {
        self.graph.backward(seeds)
    }

    /// Adds parameter gradients for the given seeds into `out`.
    pub fn accumulate_grads(&self, seeds: &[(NodeId, Matrix<T>)], out: &mut [Matrix<T>]) {
        let grads = self.graph.backward(seeds);
        self.graph.accumulate_param_grads(&grads, out);
    }
}
