use std::collections::HashMap;
use std::sync::Arc;

use super::config::Pooling;
use super::mask::build_generation_mask;
use super::params::{Expert, Model};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, AttnSegment, Tape, Tensor, Var};
use crate::vocab::{TokenId, IMG_CLS, PAD};

/// Per-token modality tag that picks the feed-forward expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Language,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vision" => Ok(Modality::Vision),
            "language" => Ok(Modality::Language),
            other => Err(Error::InvalidArgument(format!("unknown modality tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Image and text in one sequence under the generation mask.
    Cross,
    /// One modality at a time, for retrieval embeddings.
    Dual,
}

/// Expert used by a token in `layer`.
pub fn route(model: &Model, layer: usize, mode: Mode, tag: Modality) -> Expert {
    if mode == Mode::Cross && model.config().has_vl_expert(layer) {
        return Expert::VisionLanguage;
    }
    match tag {
        Modality::Vision => Expert::Vision,
        Modality::Language => Expert::Language,
    }
}

/// One image-text pair for the cross encoder.
#[derive(Debug, Clone, Copy)]
pub struct CrossInput<'a> {
    pub image: &'a Image,
    pub tokens: &'a [TokenId],
}

/// A differentiable forward pass over a borrowed model. Parameters are bound
/// to the tape lazily, so unused ones never receive a gradient slot.
pub struct Graph<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Vec<Option<Var>>,
    trainable: bool,
    masks: HashMap<(usize, usize), Arc<AttentionMask>>,
}

impl<'m> Graph<'m> {
    /// Graph whose parameters are differentiable.
    pub fn new(model: &'m Model) -> Self {
        Self::with_grad(model, true)
    }

    /// Graph for evaluation only.
    pub fn frozen(model: &'m Model) -> Self {
        Self::with_grad(model, false)
    }

    fn with_grad(model: &'m Model, trainable: bool) -> Self {
        Graph {
            model,
            tape: Tape::new(),
            bound: vec![None; model.params().len()],
            trainable,
            masks: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn tape(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let t = self.model.params()[idx].clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[idx] = Some(v);
        v
    }

    /// Temperature parameter in log space.
    pub fn log_tau(&mut self) -> Var {
        self.param(self.model.layout.log_tau)
    }

    /// Gradient of `loss` for every model parameter, in layout order; unused
    /// parameters get exact zeros.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .zip(self.model.params())
            .map(|(b, p)| match b.and_then(|v| grads.get(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            })
            .collect())
    }

    fn linear(&mut self, x: Var, w: usize, b: Option<usize>) -> Result<Var> {
        let w = self.param(w);
        let y = self.tape.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                self.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, x: Var, gain: usize, bias: usize) -> Result<Var> {
        let (g, b) = (self.param(gain), self.param(bias));
        self.tape.layer_norm(x, g, b)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.model.config().image_size;
        if image.width != s || image.height != s {
            return Err(Error::Dimension {
                op: "patch_embed",
                lhs: vec![image.height, image.width],
                rhs: vec![s, s],
            });
        }
        Ok(())
    }

    /// Embeds images given as `[-1, 1]` channel-interleaved pixel arrays.
    /// Returns `[B * n_img x D]`, each image contributing its class token
    /// followed by its patches in raster order.
    pub fn patch_embed_unit(&mut self, pixels: &[&[f64]]) -> Result<Var> {
        let cfg = *self.model.config();
        let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
        let b = pixels.len();
        let np = g * g;
        let pd = cfg.patch_dim();
        let mut flat = Vec::with_capacity(b * np * pd);
        for px in pixels {
            if px.len() != s * s * 3 {
                return Err(Error::Dimension {
                    op: "patch_embed",
                    lhs: vec![px.len()],
                    rhs: vec![s * s * 3],
                });
            }
            for pr in 0..g {
                for pc in 0..g {
                    for dy in 0..p {
                        let start = ((pr * p + dy) * s + pc * p) * 3;
                        flat.extend_from_slice(&px[start..start + p * 3]);
                    }
                }
            }
        }
        let x = self.tape.constant(Tensor::new(vec![b * np, pd], flat)?);
        let layout = &self.model.layout;
        let (pw, pb, prow, pcol, emb) = (
            layout.patch_w,
            layout.patch_b,
            layout.pos_row,
            layout.pos_col,
            layout.text_embed,
        );
        let content = self.linear(x, pw, Some(pb))?;
        let rows: Vec<usize> = (0..b * np).map(|i| (i % np) / g).collect();
        let cols: Vec<usize> = (0..b * np).map(|i| i % g).collect();
        let (prow, pcol) = (self.param(prow), self.param(pcol));
        let pr = self.tape.gather_rows(prow, &rows)?;
        let pc = self.tape.gather_rows(pcol, &cols)?;
        let pos = self.tape.add(pr, pc)?;
        let patches = self.tape.add(content, pos)?;
        let table = self.param(emb);
        let cls = self.tape.gather_rows(table, &vec![IMG_CLS as usize; b])?;
        let all = self.tape.concat_rows(&[cls, patches])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| std::iter::once(i).chain((0..np).map(move |k| b + i * np + k)))
            .collect();
        self.tape.gather_rows(all, &order)
    }

    pub fn patch_embed(&mut self, images: &[&Image]) -> Result<Var> {
        for im in images {
            self.check_image(im)?;
        }
        let unit: Vec<Vec<f64>> = images.iter().map(|im| im.to_unit()).collect();
        let refs: Vec<&[f64]> = unit.iter().map(Vec::as_slice).collect();
        self.patch_embed_unit(&refs)
    }

    /// Token plus 1-D position embeddings, row-stacked.
    pub fn text_embed(&mut self, texts: &[&[TokenId]]) -> Result<Var> {
        let cfg = *self.model.config();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for t in texts {
            if t.len() > cfg.max_text_len {
                return Err(Error::TextTooLong {
                    len: t.len(),
                    max: cfg.max_text_len,
                });
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= cfg.vocab_size) {
                return Err(Error::UnknownId(bad));
            }
            ids.extend(t.iter().map(|&id| id as usize));
            pos.extend(0..t.len());
        }
        let (e, p) = (self.model.layout.text_embed, self.model.layout.text_pos);
        let (e, p) = (self.param(e), self.param(p));
        let tok = self.tape.gather_rows(e, &ids)?;
        let at = self.tape.gather_rows(p, &pos)?;
        self.tape.add(tok, at)
    }

    /// Pre-norm block: shared attention then per-token expert feed-forward.
    pub fn block(
        &mut self,
        h: Var,
        tags: &[Modality],
        segments: &[AttnSegment],
        layer: usize,
        mode: Mode,
    ) -> Result<Var> {
        let rows = self.value(h).shape()[0];
        if tags.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "{} modality tags for {rows} rows",
                tags.len()
            )));
        }
        let ids = self.model.layout.layers[layer].clone();
        let x = self.norm(h, ids.norm_gain, ids.norm_bias)?;
        let q = self.linear(x, ids.q_w, Some(ids.q_b))?;
        let k = self.linear(x, ids.k_w, Some(ids.k_b))?;
        let v = self.linear(x, ids.v_w, Some(ids.v_b))?;
        let heads = self.model.config().heads;
        let a = self.tape.attention(q, k, v, heads, segments.to_vec())?;
        let o = self.linear(a, ids.o_w, Some(ids.o_b))?;
        let h = self.tape.add(h, o)?;

        let mut groups: Vec<(Expert, Vec<usize>)> = Vec::new();
        for (r, &tag) in tags.iter().enumerate() {
            let e = route(self.model, layer, mode, tag);
            match groups.iter_mut().find(|g| g.0 == e) {
                Some(g) => g.1.push(r),
                None => groups.push((e, vec![r])),
            }
        }
        let single = groups.len() == 1;
        let mut outs = Vec::with_capacity(groups.len());
        for (e, idx) in &groups {
            let eid = *ids
                .expert(*e)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} has no {} expert", e.name())))?;
            let xe = if single { h } else { self.tape.gather_rows(h, idx)? };
            let y = self.norm(xe, eid.norm_gain, eid.norm_bias)?;
            let y = self.linear(y, eid.fc1_w, Some(eid.fc1_b))?;
            let y = self.tape.gelu(y);
            outs.push(self.linear(y, eid.fc2_w, Some(eid.fc2_b))?);
        }
        let ffn = if single {
            outs[0]
        } else {
            let stacked = self.tape.concat_rows(&outs)?;
            let mut inverse = vec![0; rows];
            for (k, r) in groups.iter().flat_map(|g| g.1.iter()).enumerate() {
                inverse[*r] = k;
            }
            self.tape.gather_rows(stacked, &inverse)?
        };
        self.tape.add(h, ffn)
    }

    /// All blocks followed by the final norm.
    pub fn encode(&mut self, h: Var, tags: &[Modality], segments: &[AttnSegment], mode: Mode) -> Result<Var> {
        let mut h = h;
        for l in 0..self.model.config().layers {
            h = self.block(h, tags, segments, l, mode)?;
        }
        let (g, b) = (self.model.layout.final_gain, self.model.layout.final_bias);
        self.norm(h, g, b)
    }

    fn generation_mask(&mut self, n_img: usize, n_txt: usize) -> Arc<AttentionMask> {
        self.masks
            .entry((n_img, n_txt))
            .or_insert_with(|| Arc::new(build_generation_mask(n_img, n_txt)))
            .clone()
    }

    /// Cross-encoder logits at the requested text positions of each input,
    /// row-stacked in input order: `[sum |rows_i| x vocab]`.
    pub fn cross_logits(&mut self, inputs: &[CrossInput], rows: &[Vec<usize>]) -> Result<Var> {
        if rows.len() != inputs.len() {
            return Err(Error::InvalidArgument("one row list per input".into()));
        }
        for (inp, r) in inputs.iter().zip(rows) {
            if let Some(&bad) = r.iter().find(|&&p| p >= inp.tokens.len()) {
                return Err(Error::InvalidArgument(format!(
                    "text position {bad} beyond length {}",
                    inp.tokens.len()
                )));
            }
        }
        let n_img = self.model.config().image_tokens();
        let b = inputs.len();
        let images: Vec<&Image> = inputs.iter().map(|i| i.image).collect();
        let texts: Vec<&[TokenId]> = inputs.iter().map(|i| i.tokens).collect();
        let img = self.patch_embed(&images)?;
        let txt = self.text_embed(&texts)?;
        let both = self.tape.concat_rows(&[img, txt])?;

        let mut order = Vec::new();
        let mut tags = Vec::new();
        let mut segments = Vec::with_capacity(b);
        let mut pick = Vec::new();
        let mut txt_offset = b * n_img;
        for (i, inp) in inputs.iter().enumerate() {
            let start = order.len();
            let n_txt = inp.tokens.len();
            order.extend(i * n_img..(i + 1) * n_img);
            order.extend(txt_offset..txt_offset + n_txt);
            txt_offset += n_txt;
            tags.extend(std::iter::repeat_n(Modality::Vision, n_img));
            tags.extend(std::iter::repeat_n(Modality::Language, n_txt));
            segments.push(AttnSegment::new(start, self.generation_mask(n_img, n_txt)));
            pick.extend(rows[i].iter().map(|&p| start + n_img + p));
        }
        let h = self.tape.gather_rows(both, &order)?;
        let h = self.encode(h, &tags, &segments, Mode::Cross)?;
        let h = self.tape.gather_rows(h, &pick)?;
        let table = self.model.layout.text_embed;
        let table = self.param(table);
        self.tape.matmul_bt(h, table)
    }

    fn pool_project(&mut self, h: Var, spans: &[(usize, usize)], proj: usize) -> Result<Var> {
        let pooled = match self.model.config().pooling {
            Pooling::Cls => {
                let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
                self.tape.gather_rows(h, &starts)?
            }
            Pooling::Mean => {
                let rows = self.value(h).shape()[0];
                let mut avg = vec![0.0; spans.len() * rows];
                for (i, &(start, valid)) in spans.iter().enumerate() {
                    for r in start..start + valid {
                        avg[i * rows + r] = 1.0 / valid as f64;
                    }
                }
                let a = self.tape.constant(Tensor::new(vec![spans.len(), rows], avg)?);
                self.tape.matmul(a, h)?
            }
        };
        let z = self.linear(pooled, proj, None)?;
        self.tape.l2_normalize_rows(z)
    }

    /// Unit-norm image embeddings `[B x proj_dim]`.
    pub fn embed_images(&mut self, images: &[&Image]) -> Result<Var> {
        let n = self.model.config().image_tokens();
        let h = self.patch_embed(images)?;
        let mask = Arc::new(AttentionMask::full(n));
        let segments: Vec<_> = (0..images.len())
            .map(|i| AttnSegment::new(i * n, mask.clone()))
            .collect();
        let tags = vec![Modality::Vision; n * images.len()];
        let h = self.encode(h, &tags, &segments, Mode::Dual)?;
        let spans: Vec<_> = (0..images.len()).map(|i| (i * n, n)).collect();
        let proj = self.model.layout.proj_image;
        self.pool_project(h, &spans, proj)
    }

    /// Unit-norm text embeddings `[B x proj_dim]`. Trailing `PAD` tokens are
    /// excluded from attention and pooling.
    pub fn embed_texts(&mut self, texts: &[&[TokenId]]) -> Result<Var> {
        if texts.iter().any(|t| t.is_empty() || t[0] == PAD) {
            return Err(Error::InvalidArgument("empty text".into()));
        }
        let h = self.text_embed(texts)?;
        let mut segments = Vec::with_capacity(texts.len());
        let mut spans = Vec::with_capacity(texts.len());
        let mut start = 0;
        for t in texts {
            let valid = t.iter().position(|&id| id == PAD).unwrap_or(t.len());
            let mask = if valid == t.len() {
                AttentionMask::full(t.len())
            } else {
                AttentionMask::padded(t.len(), valid)
            };
            segments.push(AttnSegment::new(start, Arc::new(mask)));
            spans.push((start, valid));
            start += t.len();
        }
        let tags = vec![Modality::Language; start];
        let h = self.encode(h, &tags, &segments, Mode::Dual)?;
        let proj = self.model.layout.proj_text;
        self.pool_project(h, &spans, proj)
    }
}

impl Model {
    /// Logits at every text position, `[n_txt x vocab]`.
    pub fn cross_forward(&self, image: &Image, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::frozen(self);
        let rows = vec![(0..tokens.len()).collect()];
        let v = g.cross_logits(&[CrossInput { image, tokens }], &rows)?;
        Ok(g.value(v).clone())
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.encode_images(&[image])?.remove(0))
    }

    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.encode_texts(&[tokens])?.remove(0))
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::frozen(self);
        let v = g.embed_images(images)?;
        Ok(rows_of(g.value(v)))
    }

    pub fn encode_texts(&self, texts: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::frozen(self);
        let v = g.embed_texts(texts)?;
        Ok(rows_of(g.value(v)))
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2();
    (0..m).map(|i| t.row(i).to_vec()).collect()
}
