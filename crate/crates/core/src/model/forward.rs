use super::{Attn, Ffn, Layout, Linear, ModelConfig, Norm, Result, SeqModel};
use crate::data::{Batch, BOS, EOS, PAD};
use crate::numerics::{AttentionMask, Graph, NodeId, ParamSet, Real, RngState, Tensor};

const LN_EPS: f64 = 1e-5;

/// Decoder input `[BOS, y]`, decoder output `[y, EOS]` and the validity mask,
/// all row-major `[batch, tgt_len + 1]`.
pub fn decoder_io(batch: &Batch) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let len = batch.tgt_len + 1;
    let mut dec_in = vec![PAD; batch.size * len];
    let mut dec_out = vec![PAD; batch.size * len];
    let mut mask = vec![false; batch.size * len];
    for b in 0..batch.size {
        let y = batch.tgt_row(b);
        let row = b * len;
        dec_in[row] = BOS;
        dec_in[row + 1..row + 1 + y.len()].copy_from_slice(y);
        dec_out[row..row + y.len()].copy_from_slice(y);
        dec_out[row + y.len()] = EOS;
        mask[row..row + y.len() + 1].fill(true);
    }
    (dec_in, dec_out, mask)
}

fn sinusoid<T: Real>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..d {
                let rate = 10000f64.powf((i - i % 2) as f64 / d as f64);
                let a = pos as f64 / rate;
                data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
            }
        }
    }
    Tensor::new(vec![batch * len, d], data)
}

struct Builder<'a, T> {
    g: &'a mut Graph<T>,
    params: &'a ParamSet<T>,
    layout: &'a Layout,
    cfg: &'a ModelConfig,
    rng: &'a mut RngState,
    dropout: bool,
}

impl<T: Real> Builder<'_, T> {
    fn p(&mut self, id: crate::numerics::ParamId) -> NodeId {
        self.g.param(self.params, id)
    }

    fn linear(&mut self, x: NodeId, l: Linear) -> NodeId {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.g.linear(x, w, b)
    }

    fn norm(&mut self, x: NodeId, n: Norm) -> NodeId {
        let (g, b) = (self.p(n.g), self.p(n.b));
        self.g.layer_norm(x, g, b, T::lit(LN_EPS))
    }

    fn drop(&mut self, x: NodeId) -> Result<NodeId> {
        Ok(self.g.dropout(x, self.cfg.dropout, self.rng, self.dropout)?)
    }

    fn attention(&mut self, x: NodeId, kv: NodeId, a: Attn, mask: AttentionMask) -> NodeId {
        let q = self.linear(x, a.q);
        let k = self.linear(kv, a.k);
        let v = self.linear(kv, a.v);
        let o = self.g.attention(q, k, v, self.cfg.heads, mask);
        self.linear(o, a.o)
    }

    fn ffn(&mut self, x: NodeId, f: Ffn) -> NodeId {
        let h = self.linear(x, f.up);
        let h = self.g.relu(h);
        self.linear(h, f.down)
    }

    /// `x + dropout(sublayer)`.
    fn residual(&mut self, x: NodeId, sub: NodeId) -> Result<NodeId> {
        let s = self.drop(sub)?;
        Ok(self.g.add(x, s))
    }

    fn embed(&mut self, table: crate::numerics::ParamId, ids: &[usize], batch: usize, len: usize) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let t = self.p(table);
        let e = self.g.embedding(t, ids)?;
        let e = self.g.scale(e, T::lit((d as f64).sqrt()));
        let pe = self.g.input(sinusoid(batch, len, d));
        let x = self.g.add(e, pe);
        self.drop(x)
    }

    fn encode(&mut self, src: &[usize], batch: usize, len: usize, src_mask: &[bool]) -> Result<NodeId> {
        let mut x = self.embed(self.layout.src_emb, src, batch, len)?;
        for l in 0..self.layout.enc.len() {
            let layer = self.layout.enc[l];
            let h = self.norm(x, layer.ln1);
            let a = self.attention(h, h, layer.attn, AttentionMask::key_padding(batch, len, src_mask));
            x = self.residual(x, a)?;
            let h = self.norm(x, layer.ln2);
            let f = self.ffn(h, layer.ffn);
            x = self.residual(x, f)?;
        }
        Ok(self.norm(x, self.layout.enc_ln))
    }

    /// Per-layer decoder outputs and the cross-attention nodes.
    fn decode(
        &mut self,
        memory: NodeId,
        src_mask: &[bool],
        dec_in: &[usize],
        dec_valid: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let mut x = self.embed(self.layout.tgt_emb, dec_in, batch, len)?;
        let mut hidden = Vec::with_capacity(self.layout.dec.len());
        let mut cross_nodes = Vec::with_capacity(self.layout.dec.len());
        for l in 0..self.layout.dec.len() {
            let layer = self.layout.dec[l];
            let h = self.norm(x, layer.ln1);
            let a = self.attention(h, h, layer.self_attn, AttentionMask::causal(batch, len, dec_valid));
            x = self.residual(x, a)?;
            let h = self.norm(x, layer.ln2);
            let q = self.linear(h, layer.cross.q);
            let k = self.linear(memory, layer.cross.k);
            let v = self.linear(memory, layer.cross.v);
            let mask = AttentionMask::key_padding(batch, len, src_mask);
            let o = self.g.attention(q, k, v, self.cfg.heads, mask);
            cross_nodes.push(o);
            let c = self.linear(o, layer.cross.o);
            x = self.residual(x, c)?;
            let h = self.norm(x, layer.ln3);
            let f = self.ffn(h, layer.ffn);
            x = self.residual(x, f)?;
            hidden.push(x);
        }
        Ok((hidden, cross_nodes))
    }

    /// Output distribution from the top layer and confidence from the mean of
    /// the configured layers.
    fn heads(&mut self, hidden: &[NodeId]) -> Result<(NodeId, NodeId)> {
        let top = self.norm(*hidden.last().expect("at least one layer"), self.layout.dec_ln);
        let logits = self.linear(top, self.layout.out);
        let probs = self.g.softmax(logits);
        let selected: Vec<NodeId> = self.cfg.conf_layers.iter().map(|&l| hidden[l - 1]).collect();
        let mut h = self.g.mean_of(&selected);
        if self.cfg.detach_confidence {
            h = self.g.detach(h);
        }
        let h = self.drop(h)?;
        let z = self.linear(h, self.layout.conf);
        let conf = self.g.sigmoid(z);
        Ok((probs, conf))
    }
}

/// Per-position outputs for one target position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T = f32> {
    pub p: Vec<T>,
    pub c: T,
    /// Decoder layer outputs `h^1..h^N`.
    pub hidden: Vec<Vec<T>>,
}

/// Teacher-forced graph over a batch: the model part is declared, and
/// callers may append loss nodes before evaluating.
pub struct TeacherForced<T> {
    pub graph: Graph<T>,
    /// `[batch * len, V]`.
    pub probs: NodeId,
    /// `[batch * len, 1]`.
    pub conf: NodeId,
    /// Per decoder layer, `[batch * len, d]`.
    pub hidden: Vec<NodeId>,
    /// Per decoder layer cross-attention output (weights via the graph).
    pub cross_attention: Vec<NodeId>,
    pub batch: usize,
    /// Decoder positions per sentence: target length + 1.
    pub len: usize,
    /// Gold output ids `[y, EOS]`, PAD beyond.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<T: Real> TeacherForced<T> {
    /// Declares the graph without evaluating it. `params` may be any
    /// precision cast of the model's parameters.
    pub fn build(
        model: &SeqModel,
        params: &ParamSet<T>,
        batch: &Batch,
        dropout: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let (dec_in, targets, mask) = decoder_io(batch);
        let len = batch.tgt_len + 1;
        let mut graph = Graph::new();
        let mut b = Builder { g: &mut graph, params, layout: model.layout(), cfg: model.config(), rng, dropout };
        let memory = b.encode(&batch.src, batch.size, batch.src_len, &batch.src_mask)?;
        let (hidden, cross_attention) = b.decode(memory, &batch.src_mask, &dec_in, &mask, batch.size, len)?;
        let (probs, conf) = b.heads(&hidden)?;
        Ok(Self { graph, probs, conf, hidden, cross_attention, batch: batch.size, len, targets, mask })
    }

    /// Outputs at every valid position, grouped by sentence. Requires an
    /// evaluated graph.
    pub fn step_outputs(&self) -> Result<Vec<Vec<StepOutput<T>>>> {
        let probs = self.graph.value(self.probs)?;
        let conf = self.graph.value(self.conf)?;
        let hidden: Vec<&[T]> = self.hidden.iter().map(|&h| self.graph.value(h)).collect::<Result<_, _>>()?;
        let v = probs.len() / (self.batch * self.len);
        let d = hidden[0].len() / (self.batch * self.len);
        Ok((0..self.batch)
            .map(|b| {
                (0..self.len)
                    .map(|t| b * self.len + t)
                    .filter(|&r| self.mask[r])
                    .map(|r| StepOutput {
                        p: probs[r * v..(r + 1) * v].to_vec(),
                        c: conf[r],
                        hidden: hidden.iter().map(|h| h[r * d..(r + 1) * d].to_vec()).collect(),
                    })
                    .collect()
            })
            .collect())
    }
}

/// Encoder output for a set of sources, computed without dropout.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[batch * src_len, d]`.
    pub memory: Tensor<f32>,
    pub src_mask: Vec<bool>,
    pub batch: usize,
    pub src_len: usize,
}

impl SeqModel {
    /// Builds and evaluates the teacher-forced pass in 32-bit precision.
    pub fn forward_teacher_forced(
        &self,
        batch: &Batch,
        dropout: bool,
        rng: &mut RngState,
    ) -> Result<TeacherForced<f32>> {
        let mut tf = TeacherForced::build(self, self.params(), batch, dropout, rng)?;
        tf.graph.forward(self.params())?;
        Ok(tf)
    }

    pub fn encode(&self, srcs: &[&[usize]]) -> Result<Encoded> {
        let tgts: Vec<&[usize]> = vec![&[]; srcs.len()];
        let batch = Batch::from_sequences(srcs, &tgts, (0..srcs.len()).collect());
        let mut graph = Graph::new();
        let mut rng = RngState::new(0);
        let mut b = Builder {
            g: &mut graph,
            params: self.params(),
            layout: self.layout(),
            cfg: self.config(),
            rng: &mut rng,
            dropout: false,
        };
        let memory = b.encode(&batch.src, batch.size, batch.src_len, &batch.src_mask)?;
        graph.forward(self.params())?;
        Ok(Encoded {
            memory: graph.tensor(memory)?,
            src_mask: batch.src_mask,
            batch: batch.size,
            src_len: batch.src_len,
        })
    }

    /// Runs the decoder on `[BOS, prefix]` for each prefix (all of equal
    /// length) against encoded source `rows[i]`, returning the outputs at the
    /// last position.
    pub fn decode_last(&self, enc: &Encoded, rows: &[usize], prefixes: &[&[usize]]) -> Result<Vec<StepOutput<f32>>> {
        assert_eq!(rows.len(), prefixes.len());
        let n = rows.len();
        let len = prefixes.first().map_or(0, |p| p.len()) + 1;
        let (ls, d) = (enc.src_len, self.config().d_model);
        let mut mem = Vec::with_capacity(n * ls * d);
        let mut src_mask = Vec::with_capacity(n * ls);
        let mut dec_in = Vec::with_capacity(n * len);
        for (&r, p) in rows.iter().zip(prefixes) {
            assert_eq!(p.len() + 1, len, "prefixes must share a length");
            mem.extend_from_slice(&enc.memory.data()[r * ls * d..(r + 1) * ls * d]);
            src_mask.extend_from_slice(&enc.src_mask[r * ls..(r + 1) * ls]);
            dec_in.push(BOS);
            dec_in.extend_from_slice(p);
        }
        let valid = vec![true; n * len];
        let mut graph = Graph::new();
        let mut rng = RngState::new(0);
        let mut b = Builder {
            g: &mut graph,
            params: self.params(),
            layout: self.layout(),
            cfg: self.config(),
            rng: &mut rng,
            dropout: false,
        };
        let memory = b.g.input(Tensor::new(vec![n * ls, d], mem));
        let (hidden, _) = b.decode(memory, &src_mask, &dec_in, &valid, n, len)?;
        let (probs, conf) = b.heads(&hidden)?;
        graph.forward(self.params())?;
        let (pv, cv) = (graph.value(probs)?, graph.value(conf)?);
        let hv: Vec<&[f32]> = hidden.iter().map(|&h| graph.value(h)).collect::<Result<_, _>>()?;
        let v = self.config().vocab_size;
        Ok((0..n)
            .map(|i| {
                let r = i * len + len - 1;
                StepOutput {
                    p: pv[r * v..(r + 1) * v].to_vec(),
                    c: cv[r],
                    hidden: hv.iter().map(|h| h[r * d..(r + 1) * d].to_vec()).collect(),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn small() -> (SeqModel, Batch) {
        let cfg =
            ModelConfig { vocab_size: 20, d_model: 16, heads: 2, ffn_dim: 24, dropout: 0.2, ..ModelConfig::default() };
        let m = init_model(&cfg, &RngState::new(1)).unwrap();
        let srcs: [&[usize]; 3] = [&[4, 5, 6], &[7, 8], &[9, 10, 11, 12]];
        let tgts: [&[usize]; 3] = [&[5, 6], &[8, 9, 10], &[4]];
        (m, Batch::from_sequences(&srcs, &tgts, vec![0, 1, 2]))
    }

    #[test]
    fn decoder_io_layout() {
        let (_, batch) = small();
        let (i, o, m) = decoder_io(&batch);
        assert_eq!(&i[0..4], &[BOS, 5, 6, PAD]);
        assert_eq!(&o[0..4], &[5, 6, EOS, PAD]);
        assert_eq!(&m[0..4], &[true, true, true, false]);
        assert_eq!(&o[8..12], &[4, EOS, PAD, PAD]);
    }

    #[test]
    fn outputs_are_valid() {
        let (m, batch) = small();
        let tf = m.forward_teacher_forced(&batch, true, &mut RngState::new(3)).unwrap();
        let steps = tf.step_outputs().unwrap();
        assert_eq!(steps.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 4, 2]);
        for s in steps.iter().flatten() {
            let sum: f32 = s.p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(s.c > 0.0 && s.c < 1.0);
            assert_eq!(s.hidden.len(), 2);
        }
    }

    #[test]
    fn deterministic_without_dropout() {
        let (m, batch) = small();
        let a = m.forward_teacher_forced(&batch, false, &mut RngState::new(1)).unwrap();
        let b = m.forward_teacher_forced(&batch, false, &mut RngState::new(2)).unwrap();
        assert_eq!(a.graph.value(a.probs).unwrap(), b.graph.value(b.probs).unwrap());
        assert_eq!(a.graph.value(a.conf).unwrap(), b.graph.value(b.conf).unwrap());
    }

    #[test]
    fn dropout_changes_outputs() {
        let (m, batch) = small();
        let a = m.forward_teacher_forced(&batch, false, &mut RngState::new(1)).unwrap();
        let b = m.forward_teacher_forced(&batch, true, &mut RngState::new(1)).unwrap();
        assert_ne!(a.graph.value(a.probs).unwrap(), b.graph.value(b.probs).unwrap());
    }

    #[test]
    fn causal_masking() {
        let (m, batch) = small();
        let base = m.forward_teacher_forced(&batch, false, &mut RngState::new(0)).unwrap();
        // decoder input position k + 1 holds target token k; perturbing it may
        // only affect positions after it
        let mut changed = batch.clone();
        let len = batch.tgt_len;
        changed.tgt[len + 1] = 15; // sentence 1, target position 1
        let alt = m.forward_teacher_forced(&changed, false, &mut RngState::new(0)).unwrap();
        let (p0, p1) = (base.step_outputs().unwrap(), alt.step_outputs().unwrap());
        for t in 0..=1 {
            assert_eq!(p0[1][t].p, p1[1][t].p, "position {t}");
        }
        assert_ne!(p0[1][2].p, p1[1][2].p);
        assert_eq!(p0[0], p1[0]);
    }

    #[test]
    fn padded_source_gets_no_attention() {
        let (m, batch) = small();
        let tf = m.forward_teacher_forced(&batch, false, &mut RngState::new(0)).unwrap();
        let heads = m.config().heads;
        for &node in &tf.cross_attention {
            let w = tf.graph.attention_weights(node).unwrap();
            let (lq, lk) = (tf.len, batch.src_len);
            for b in 0..batch.size {
                let valid = batch.src_row(b).len();
                for h in 0..heads {
                    for i in 0..lq {
                        let row = &w[((b * heads + h) * lq + i) * lk..((b * heads + h) * lq + i + 1) * lk];
                        assert!(row[valid..].iter().all(|&x| x == 0.0));
                        let s: f32 = row.iter().sum();
                        assert!((s - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        let (m, batch) = small();
        let tf = m.forward_teacher_forced(&batch, false, &mut RngState::new(0)).unwrap();
        let steps = tf.step_outputs().unwrap();
        let srcs: Vec<&[usize]> = (0..batch.size).map(|b| batch.src_row(b)).collect();
        let enc = m.encode(&srcs).unwrap();
        for (b, step) in steps.iter().enumerate() {
            let y = batch.tgt_row(b);
            for t in 0..=y.len() {
                let out = m.decode_last(&enc, &[b], &[&y[..t]]).unwrap();
                assert_eq!(out[0].p, step[t].p, "sentence {b} position {t}");
                assert_eq!(out[0].c, step[t].c);
            }
        }
    }

    #[test]
    fn confidence_matches_head_on_hidden_states() {
        let (m, batch) = small();
        let tf = m.forward_teacher_forced(&batch, false, &mut RngState::new(0)).unwrap();
        for s in tf.step_outputs().unwrap().iter().flatten() {
            let c = m.confidence_head(&s.hidden, &m.config().conf_layers).unwrap();
            assert!((c - s.c).abs() < 1e-6);
        }
    }
}
