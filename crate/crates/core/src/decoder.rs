//! The stand-in vision-language backbone: a small transformer over the
//! words--[SEP]--concepts--[SEP]--ROIs prompt with a tied output head.
//!
//! The decoder is pretrained once on the synthetic corpus (ordinary masked
//! captioning with raw concept embeddings) and then permanently frozen;
//! afterwards only the graph network's output rows change what it sees.
//! Backward passes exist for both its parameters (pretraining) and its
//! input rows (the prompt-learning path into the graph network).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamStore};
use crate::tensor::{
    gelu, gelu_prime, layer_norm_backward, layer_norm_cached, matmul, LayerNormCache, Tensor,
};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const SEP: usize = 2;
pub const STOP: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<mask>", "<sep>", "<stop>"];

const NORM_EPS: f64 = 1e-5;

/// Whitespace token table with the four special ids first.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for s in sentences {
            for tok in tokenize(s) {
                set.insert(tok);
            }
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(set);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS.map(String::from) {
            return Err(Error::Parse("vocabulary missing special tokens".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .into_iter()
            .map(|tok| {
                self.id_of(&tok)
                    .ok_or_else(|| Error::Parse(format!("word `{tok}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Word,
    Sep,
    Concept,
    Roi,
}

impl Segment {
    fn id(self) -> usize {
        match self {
            Segment::Word => 0,
            Segment::Sep => 1,
            Segment::Concept => 2,
            Segment::Roi => 3,
        }
    }
}

/// The assembled prompt: content plus position and segment embeddings, the
/// attention mask, and the index bookkeeping the loss needs.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    pub embeddings: Tensor,
    pub segments: Vec<Segment>,
    pub attention: Vec<Vec<bool>>,
    pub word_positions: Vec<usize>,
    pub concept_positions: Vec<usize>,
    pub word_ids: Vec<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl DecoderConfig {
    pub fn toy(d: usize, feature_dim: usize, max_positions: usize, seed: u64) -> Self {
        Self {
            d,
            heads: 4,
            blocks: 2,
            ffn_width: 4 * d,
            max_positions,
            feature_dim,
            seed,
        }
    }
}

/// The backbone. `store` holds every parameter; after `freeze()` all of them
/// are flagged frozen and stay bit-identical for the rest of the run.
#[derive(Debug, Clone)]
pub struct FrozenDecoder {
    pub cfg: DecoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
}

impl FrozenDecoder {
    /// Random initialization; everything except the ROI projection starts
    /// trainable so the backbone can be pretrained before freezing.
    pub fn init(cfg: DecoderConfig, vocab: Vocab) -> Result<Self> {
        if cfg.d % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                cfg.d, cfg.heads
            )));
        }
        let mut rng = crate::params::seeded_rng(cfg.seed);
        let mut store = ParamStore::new();
        store.register("dec.tok_emb", xavier_uniform(vocab.len(), cfg.d, &mut rng), true)?;
        store.register(
            "dec.pos_emb",
            xavier_uniform(cfg.max_positions, cfg.d, &mut rng),
            true,
        )?;
        store.register("dec.seg_emb", xavier_uniform(4, cfg.d, &mut rng), true)?;
        // The ROI embedding layer stays frozen from the start so graphs and
        // context features are stable across pretraining.
        store.register(
            "dec.proj_w",
            xavier_uniform(cfg.feature_dim, cfg.d, &mut rng),
            false,
        )?;
        store.register("dec.proj_b", Tensor::zeros(vec![cfg.d]), false)?;
        for b in 0..cfg.blocks {
            // No key bias: a constant added to every key shifts each query's
            // logits uniformly, which the softmax cancels exactly.
            for name in ["attn_query", "attn_key", "attn_value", "attn_out"] {
                store.register(
                    &format!("dec.b{b}.{name}"),
                    xavier_uniform(cfg.d, cfg.d, &mut rng),
                    true,
                )?;
                if name != "attn_key" {
                    store.register(
                        &format!("dec.b{b}.{name}_bias"),
                        Tensor::zeros(vec![cfg.d]),
                        true,
                    )?;
                }
            }
            store.register(
                &format!("dec.b{b}.norm1_gain"),
                Tensor::filled(vec![cfg.d], 1.0),
                true,
            )?;
            store.register(&format!("dec.b{b}.norm1_bias"), Tensor::zeros(vec![cfg.d]), true)?;
            store.register(
                &format!("dec.b{b}.ffn_w1"),
                xavier_uniform(cfg.d, cfg.ffn_width, &mut rng),
                true,
            )?;
            store.register(&format!("dec.b{b}.ffn_b1"), Tensor::zeros(vec![cfg.ffn_width]), true)?;
            store.register(
                &format!("dec.b{b}.ffn_w2"),
                xavier_uniform(cfg.ffn_width, cfg.d, &mut rng),
                true,
            )?;
            store.register(&format!("dec.b{b}.ffn_b2"), Tensor::zeros(vec![cfg.d]), true)?;
            store.register(
                &format!("dec.b{b}.norm2_gain"),
                Tensor::filled(vec![cfg.d], 1.0),
                true,
            )?;
            store.register(&format!("dec.b{b}.norm2_bias"), Tensor::zeros(vec![cfg.d]), true)?;
        }
        Ok(Self { cfg, vocab, store })
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_names().is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint_all()
    }

    pub fn proj_w(&self) -> &Tensor {
        self.store.value("dec.proj_w").expect("proj_w registered")
    }

    pub fn proj_b(&self) -> &Tensor {
        self.store.value("dec.proj_b").expect("proj_b registered")
    }
}

/// Lay out words(L), [SEP], concepts, [SEP], ROIs with position and segment
/// embeddings added. Word ids embed through the frozen table; concept and
/// ROI rows are injected as continuous embeddings.
pub fn assemble_prompt(
    word_ids: &[usize],
    enriched: &Tensor,
    rois: &Tensor,
    dec: &FrozenDecoder,
) -> Result<PromptSequence> {
    let d = dec.cfg.d;
    if word_ids.is_empty() {
        return Err(Error::Degenerate {
            op: "assemble_prompt",
            detail: "empty word slot list".into(),
        });
    }
    if enriched.cols() != d {
        return Err(Error::Shape {
            op: "assemble_prompt",
            lhs: vec![d],
            rhs: enriched.shape().to_vec(),
        });
    }
    if rois.cols() != d {
        return Err(Error::Shape {
            op: "assemble_prompt",
            lhs: vec![d],
            rhs: rois.shape().to_vec(),
        });
    }
    let l = word_ids.len();
    let c = enriched.rows();
    let n = rois.rows();
    let total = l + 1 + c + 1 + n;
    if total > dec.cfg.max_positions {
        return Err(Error::Degenerate {
            op: "assemble_prompt",
            detail: format!(
                "prompt length {total} exceeds position table {}",
                dec.cfg.max_positions
            ),
        });
    }
    let tok = dec.store.value("dec.tok_emb")?;
    let pos = dec.store.value("dec.pos_emb")?;
    let seg = dec.store.value("dec.seg_emb")?;

    let mut segments = Vec::with_capacity(total);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(total);
    for (t, &id) in word_ids.iter().enumerate() {
        if id >= dec.vocab.len() {
            return Err(Error::Degenerate {
                op: "assemble_prompt",
                detail: format!("token id {id} out of vocabulary"),
            });
        }
        rows.push(tok.row(id).to_vec());
        segments.push(Segment::Word);
        let _ = t;
    }
    rows.push(tok.row(SEP).to_vec());
    segments.push(Segment::Sep);
    for r in 0..c {
        rows.push(enriched.row(r).to_vec());
        segments.push(Segment::Concept);
    }
    rows.push(tok.row(SEP).to_vec());
    segments.push(Segment::Sep);
    for r in 0..n {
        rows.push(rois.row(r).to_vec());
        segments.push(Segment::Roi);
    }

    for (p, (row, segment)) in rows.iter_mut().zip(&segments).enumerate() {
        for (x, (pv, sv)) in row
            .iter_mut()
            .zip(pos.row(p).iter().zip(seg.row(segment.id())))
        {
            *x += pv + sv;
        }
    }

    // Word positions attend causally among words and fully to the prompt
    // side; prompt positions attend among themselves and never to words.
    let mut attention = vec![vec![false; total]; total];
    for i in 0..total {
        for j in 0..total {
            attention[i][j] = match (segments[i], segments[j]) {
                (Segment::Word, Segment::Word) => j <= i,
                (Segment::Word, _) => true,
                (_, Segment::Word) => false,
                _ => true,
            };
        }
    }

    Ok(PromptSequence {
        embeddings: Tensor::from_rows(&rows)?,
        segments,
        attention,
        word_positions: (0..l).collect(),
        concept_positions: (l + 1..l + 1 + c).collect(),
        word_ids: word_ids.to_vec(),
    })
}

struct BlockCache {
    input: Tensor,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    head_probs: Vec<Tensor>,
    concat: Tensor,
    norm1: Vec<LayerNormCache>,
    after_attn: Tensor,
    ffn_pre: Tensor,
    ffn_act: Tensor,
    norm2: Vec<LayerNormCache>,
}

pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    final_hidden: Tensor,
    prompt_len: usize,
}

fn block_forward(
    store: &ParamStore,
    b: usize,
    x: &Tensor,
    mask: &[Vec<bool>],
    heads: usize,
) -> Result<(Tensor, BlockCache)> {
    let d = x.cols();
    let s = x.rows();
    let hd = d / heads;
    let scale = (hd as f64).sqrt();
    let queries = matmul(x, store.value(&format!("dec.b{b}.attn_query"))?)?
        .add_row_broadcast(store.value(&format!("dec.b{b}.attn_query_bias"))?)?;
    let keys = matmul(x, store.value(&format!("dec.b{b}.attn_key"))?)?;
    let values = matmul(x, store.value(&format!("dec.b{b}.attn_value"))?)?
        .add_row_broadcast(store.value(&format!("dec.b{b}.attn_value_bias"))?)?;

    let mut head_probs = Vec::with_capacity(heads);
    let mut concat = Tensor::zeros(vec![s, d]);
    for h in 0..heads {
        let lo = h * hd;
        let hi = lo + hd;
        let mut probs = Tensor::zeros(vec![s, s]);
        for i in 0..s {
            let qi = &queries.row(i)[lo..hi];
            let mut best = f64::NEG_INFINITY;
            let mut raw = vec![f64::NEG_INFINITY; s];
            for j in 0..s {
                if !mask[i][j] {
                    continue;
                }
                let score = crate::tensor::dot(qi, &keys.row(j)[lo..hi]) / scale;
                raw[j] = score;
                best = best.max(score);
            }
            let mut sum = 0.0;
            for v in raw.iter_mut() {
                if v.is_finite() {
                    *v = (*v - best).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            let prow = probs.row_mut(i);
            for (p, v) in prow.iter_mut().zip(&raw) {
                *p = v / sum;
            }
        }
        for i in 0..s {
            let out = concat.row_mut(i);
            for j in 0..s {
                let p = probs.at(i, j);
                if p == 0.0 {
                    continue;
                }
                for (o, v) in out[lo..hi].iter_mut().zip(&values.row(j)[lo..hi]) {
                    *o += p * v;
                }
            }
        }
        head_probs.push(probs);
    }

    let o = matmul(&concat, store.value(&format!("dec.b{b}.attn_out"))?)?
        .add_row_broadcast(store.value(&format!("dec.b{b}.attn_out_bias"))?)?;
    let gain1 = store.value(&format!("dec.b{b}.norm1_gain"))?;
    let bias1 = store.value(&format!("dec.b{b}.norm1_bias"))?;
    let mut after_attn = Tensor::zeros(vec![s, d]);
    let mut norm1 = Vec::with_capacity(s);
    for i in 0..s {
        let pre: Vec<f64> = x.row(i).iter().zip(o.row(i)).map(|(a, b)| a + b).collect();
        let (row, cache) = layer_norm_cached(&pre, gain1.data(), bias1.data(), NORM_EPS)?;
        after_attn.row_mut(i).copy_from_slice(&row);
        norm1.push(cache);
    }

    let ffn_pre = matmul(&after_attn, store.value(&format!("dec.b{b}.ffn_w1"))?)?
        .add_row_broadcast(store.value(&format!("dec.b{b}.ffn_b1"))?)?;
    let mut ffn_act = ffn_pre.clone();
    for v in ffn_act.data_mut() {
        *v = gelu(*v);
    }
    let f = matmul(&ffn_act, store.value(&format!("dec.b{b}.ffn_w2"))?)?
        .add_row_broadcast(store.value(&format!("dec.b{b}.ffn_b2"))?)?;
    let gain2 = store.value(&format!("dec.b{b}.norm2_gain"))?;
    let bias2 = store.value(&format!("dec.b{b}.norm2_bias"))?;
    let mut out = Tensor::zeros(vec![s, d]);
    let mut norm2 = Vec::with_capacity(s);
    for i in 0..s {
        let pre: Vec<f64> = after_attn
            .row(i)
            .iter()
            .zip(f.row(i))
            .map(|(a, b)| a + b)
            .collect();
        let (row, cache) = layer_norm_cached(&pre, gain2.data(), bias2.data(), NORM_EPS)?;
        out.row_mut(i).copy_from_slice(&row);
        norm2.push(cache);
    }
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            queries,
            keys,
            values,
            head_probs,
            concat,
            norm1,
            after_attn,
            ffn_pre,
            ffn_act,
            norm2,
        },
    ))
}

/// Run the transformer under the prompt's attention mask and emit logits
/// over the vocabulary at the word positions only.
pub fn decoder_forward(dec: &FrozenDecoder, prompt: &PromptSequence) -> Result<Tensor> {
    decoder_forward_cached(dec, prompt).map(|(logits, _)| logits)
}

pub fn decoder_forward_cached(
    dec: &FrozenDecoder,
    prompt: &PromptSequence,
) -> Result<(Tensor, DecoderCache)> {
    let mut x = prompt.embeddings.clone();
    let mut blocks = Vec::with_capacity(dec.cfg.blocks);
    for b in 0..dec.cfg.blocks {
        let (next, cache) = block_forward(&dec.store, b, &x, &prompt.attention, dec.cfg.heads)?;
        blocks.push(cache);
        x = next;
    }
    let tok = dec.store.value("dec.tok_emb")?;
    let mut logits = Tensor::zeros(vec![prompt.word_positions.len(), dec.vocab.len()]);
    for (row, &p) in prompt.word_positions.iter().enumerate() {
        let h = x.row(p);
        let out = logits.row_mut(row);
        for (v, o) in out.iter_mut().enumerate() {
            *o = crate::tensor::dot(h, tok.row(v));
        }
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("decoder_forward"));
    }
    let cache = DecoderCache {
        blocks,
        final_hidden: x,
        prompt_len: prompt.len(),
    };
    Ok((logits, cache))
}

fn block_backward(
    store: &mut ParamStore,
    b: usize,
    cache: &BlockCache,
    upstream: &Tensor,
    heads: usize,
    with_params: bool,
) -> Result<Tensor> {
    let d = cache.input.cols();
    let s = cache.input.rows();
    let hd = d / heads;
    let scale = (hd as f64).sqrt();

    let gain2 = store.value(&format!("dec.b{b}.norm2_gain"))?.clone();
    let mut dgain2 = vec![0.0; d];
    let mut dbias2 = vec![0.0; d];
    let mut dpre2 = Tensor::zeros(vec![s, d]);
    for i in 0..s {
        let du = layer_norm_backward(
            upstream.row(i),
            gain2.data(),
            &cache.norm2[i],
            &mut dgain2,
            &mut dbias2,
        );
        dpre2.row_mut(i).copy_from_slice(&du);
    }

    // pre2 = after_attn + ffn(after_attn)
    let w2 = store.value(&format!("dec.b{b}.ffn_w2"))?.clone();
    let w1 = store.value(&format!("dec.b{b}.ffn_w1"))?.clone();
    let dffn = dpre2.clone();
    let dact = matmul(&dffn, &w2.transpose())?;
    let mut dffn_pre = dact;
    for (g, z) in dffn_pre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
        *g *= gelu_prime(*z);
    }
    let mut dafter = dpre2; // residual
    dafter.add_scaled(&matmul(&dffn_pre, &w1.transpose())?, 1.0)?;

    if with_params {
        store.accumulate_grad(
            &format!("dec.b{b}.ffn_w2"),
            &matmul(&cache.ffn_act.transpose(), &dffn)?,
        )?;
        store.accumulate_grad(&format!("dec.b{b}.ffn_b2"), &dffn.column_sums())?;
        store.accumulate_grad(
            &format!("dec.b{b}.ffn_w1"),
            &matmul(&cache.after_attn.transpose(), &dffn_pre)?,
        )?;
        store.accumulate_grad(&format!("dec.b{b}.ffn_b1"), &dffn_pre.column_sums())?;
        store.accumulate_grad(&format!("dec.b{b}.norm2_gain"), &Tensor::vector(dgain2))?;
        store.accumulate_grad(&format!("dec.b{b}.norm2_bias"), &Tensor::vector(dbias2))?;
    }

    let gain1 = store.value(&format!("dec.b{b}.norm1_gain"))?.clone();
    let mut dgain1 = vec![0.0; d];
    let mut dbias1 = vec![0.0; d];
    let mut dpre1 = Tensor::zeros(vec![s, d]);
    for i in 0..s {
        let du = layer_norm_backward(
            dafter.row(i),
            gain1.data(),
            &cache.norm1[i],
            &mut dgain1,
            &mut dbias1,
        );
        dpre1.row_mut(i).copy_from_slice(&du);
    }

    // pre1 = input + concat * Wo + bo
    let wo = store.value(&format!("dec.b{b}.attn_out"))?.clone();
    let dconcat = matmul(&dpre1, &wo.transpose())?;
    if with_params {
        store.accumulate_grad(
            &format!("dec.b{b}.attn_out"),
            &matmul(&cache.concat.transpose(), &dpre1)?,
        )?;
        store.accumulate_grad(&format!("dec.b{b}.attn_out_bias"), &dpre1.column_sums())?;
        store.accumulate_grad(&format!("dec.b{b}.norm1_gain"), &Tensor::vector(dgain1))?;
        store.accumulate_grad(&format!("dec.b{b}.norm1_bias"), &Tensor::vector(dbias1))?;
    }

    let mut dqueries = Tensor::zeros(vec![s, d]);
    let mut dkeys = Tensor::zeros(vec![s, d]);
    let mut dvalues = Tensor::zeros(vec![s, d]);
    for h in 0..heads {
        let lo = h * hd;
        let hi = lo + hd;
        let probs = &cache.head_probs[h];
        for i in 0..s {
            // dprobs_ij = dconcat_i . v_j ; dv_j += p_ij dconcat_i (head slice)
            let dci = &dconcat.row(i)[lo..hi];
            let mut dprobs = vec![0.0; s];
            let mut inner = 0.0;
            for j in 0..s {
                let p = probs.at(i, j);
                if p == 0.0 {
                    continue;
                }
                let dp = crate::tensor::dot(dci, &cache.values.row(j)[lo..hi]);
                dprobs[j] = dp;
                inner += p * dp;
                let dv = dvalues.row_mut(j);
                for (dvx, dx) in dv[lo..hi].iter_mut().zip(dci) {
                    *dvx += p * dx;
                }
            }
            for j in 0..s {
                let p = probs.at(i, j);
                if p == 0.0 {
                    continue;
                }
                let dscore = p * (dprobs[j] - inner) / scale;
                let dq = dqueries.row_mut(i);
                for (dqx, kx) in dq[lo..hi].iter_mut().zip(&cache.keys.row(j)[lo..hi]) {
                    *dqx += dscore * kx;
                }
                let dk = dkeys.row_mut(j);
                for (dkx, qx) in dk[lo..hi].iter_mut().zip(&cache.queries.row(i)[lo..hi]) {
                    *dkx += dscore * qx;
                }
            }
        }
    }

    if with_params {
        store.accumulate_grad(
            &format!("dec.b{b}.attn_query"),
            &matmul(&cache.input.transpose(), &dqueries)?,
        )?;
        store.accumulate_grad(&format!("dec.b{b}.attn_query_bias"), &dqueries.column_sums())?;
        store.accumulate_grad(
            &format!("dec.b{b}.attn_key"),
            &matmul(&cache.input.transpose(), &dkeys)?,
        )?;
        store.accumulate_grad(
            &format!("dec.b{b}.attn_value"),
            &matmul(&cache.input.transpose(), &dvalues)?,
        )?;
        store.accumulate_grad(&format!("dec.b{b}.attn_value_bias"), &dvalues.column_sums())?;
    }

    let wq = store.value(&format!("dec.b{b}.attn_query"))?.clone();
    let wk = store.value(&format!("dec.b{b}.attn_key"))?.clone();
    let wv = store.value(&format!("dec.b{b}.attn_value"))?.clone();
    let mut dinput = dpre1; // residual path
    dinput.add_scaled(&matmul(&dqueries, &wq.transpose())?, 1.0)?;
    dinput.add_scaled(&matmul(&dkeys, &wk.transpose())?, 1.0)?;
    dinput.add_scaled(&matmul(&dvalues, &wv.transpose())?, 1.0)?;
    Ok(dinput)
}

/// Backpropagate logit gradients to every prompt input row. When
/// `with_params` is set (pretraining) parameter gradients accumulate into
/// the decoder's own store, including both uses of the tied embedding table.
pub fn decoder_backward(
    dec: &mut FrozenDecoder,
    prompt: &PromptSequence,
    cache: &DecoderCache,
    dlogits: &Tensor,
    with_params: bool,
) -> Result<Tensor> {
    if cache.prompt_len != prompt.len() || dlogits.rows() != prompt.word_positions.len() {
        return Err(Error::StaleCache(format!(
            "logit gradient {:?} does not match cached prompt of length {}",
            dlogits.shape(),
            cache.prompt_len
        )));
    }
    let tok = dec.store.value("dec.tok_emb")?.clone();
    let d = dec.cfg.d;
    let s = prompt.len();

    let mut dhidden = Tensor::zeros(vec![s, d]);
    let mut dtok = Tensor::zeros(vec![dec.vocab.len(), d]);
    for (row, &p) in prompt.word_positions.iter().enumerate() {
        let dl = dlogits.row(row);
        let dh = dhidden.row_mut(p);
        for (v, &g) in dl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (dhx, tx) in dh.iter_mut().zip(tok.row(v)) {
                *dhx += g * tx;
            }
        }
        if with_params {
            let h = cache.final_hidden.row(p);
            for (v, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let dt = dtok.row_mut(v);
                for (tx, hx) in dt.iter_mut().zip(h) {
                    *tx += g * hx;
                }
            }
        }
    }

    let mut dx = dhidden;
    for b in (0..dec.cfg.blocks).rev() {
        dx = block_backward(
            &mut dec.store,
            b,
            &cache.blocks[b],
            &dx,
            dec.cfg.heads,
            with_params,
        )?;
    }

    if with_params {
        // Input-side use of the tied table, plus position and segment tables.
        let mut dpos = Tensor::zeros(vec![dec.cfg.max_positions, d]);
        let mut dseg = Tensor::zeros(vec![4, d]);
        for p in 0..s {
            for (dst, src) in dpos.row_mut(p).iter_mut().zip(dx.row(p)) {
                *dst += src;
            }
            let seg = prompt.segments[p].id();
            for (dst, src) in dseg.row_mut(seg).iter_mut().zip(dx.row(p)) {
                *dst += src;
            }
        }
        for (t, &id) in prompt.word_ids.iter().enumerate() {
            for (dst, src) in dtok.row_mut(id).iter_mut().zip(dx.row(t)) {
                *dst += src;
            }
        }
        // Both separators share the SEP embedding row.
        let l = prompt.word_positions.len();
        let c = prompt.concept_positions.len();
        for sep_pos in [l, l + 1 + c] {
            for (dst, src) in dtok.row_mut(SEP).iter_mut().zip(dx.row(sep_pos)) {
                *dst += src;
            }
        }
        dec.store.accumulate_grad("dec.tok_emb", &dtok)?;
        dec.store.accumulate_grad("dec.pos_emb", &dpos)?;
        dec.store.accumulate_grad("dec.seg_emb", &dseg)?;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check;
    use crate::tensor::cross_entropy_loss;

    fn tiny_decoder(words: &[&str], d: usize, blocks: usize, heads: usize) -> FrozenDecoder {
        let vocab = Vocab::build(words.iter().copied());
        let cfg = DecoderConfig {
            d,
            heads,
            blocks,
            ffn_width: 2 * d,
            max_positions: 32,
            feature_dim: 6,
            seed: 77,
        };
        FrozenDecoder::init(cfg, vocab).unwrap()
    }

    fn tiny_prompt(dec: &FrozenDecoder, l: usize, c: usize, n: usize) -> PromptSequence {
        let d = dec.cfg.d;
        let fill = |rows: usize, salt: u64| {
            let mut data = Vec::with_capacity(rows * d);
            let mut state = salt;
            for _ in 0..rows * d {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(11);
                data.push((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5);
            }
            Tensor::new(vec![rows, d], data).unwrap()
        };
        let word_ids = vec![MASK; l];
        assemble_prompt(&word_ids, &fill(c, 1), &fill(n, 2), dec).unwrap()
    }

    #[test]
    fn vocab_round_trip_and_specials() {
        let vocab = Vocab::build(["the dog runs", "a dog sleeps"]);
        assert_eq!(vocab.word(PAD), "<pad>");
        assert_eq!(vocab.word(STOP), "<stop>");
        let ids = vocab.encode("the dog sleeps").unwrap();
        assert_eq!(vocab.decode(&ids), "the dog sleeps");
        assert!(vocab.encode("unknownword").is_err());
    }

    #[test]
    fn prompt_layout_lengths() {
        let dec = tiny_decoder(&["a b c"], 8, 1, 2);
        let p = tiny_prompt(&dec, 6, 5, 4);
        assert_eq!(p.len(), 6 + 1 + 5 + 1 + 4);
        assert_eq!(p.word_positions.len(), 6);
        assert_eq!(p.concept_positions, (7..12).collect::<Vec<_>>());
    }

    #[test]
    fn all_mask_words_share_the_mask_row() {
        let dec = tiny_decoder(&["x y"], 8, 1, 2);
        let p = tiny_prompt(&dec, 4, 2, 2);
        let tok = dec.store.value("dec.tok_emb").unwrap();
        let pos = dec.store.value("dec.pos_emb").unwrap();
        let seg = dec.store.value("dec.seg_emb").unwrap();
        for t in 0..4 {
            let expect: Vec<f64> = tok
                .row(MASK)
                .iter()
                .zip(pos.row(t).iter().zip(seg.row(0)))
                .map(|(a, (b, c))| a + (b + c))
                .collect();
            assert_eq!(p.embeddings.row(t), expect.as_slice());
        }
    }

    #[test]
    fn word_mask_is_causal_and_prompt_is_blind_to_words() {
        let dec = tiny_decoder(&["q"], 8, 1, 2);
        let p = tiny_prompt(&dec, 3, 2, 1);
        assert!(p.attention[1][0]);
        assert!(p.attention[1][1]);
        assert!(!p.attention[1][2]);
        assert!(p.attention[0][4]); // word sees concepts
        assert!(!p.attention[4][0]); // concept does not see words
        assert!(p.attention[4][6]); // concept sees rois
    }

    #[test]
    fn forward_is_deterministic() {
        let dec = tiny_decoder(&["alpha beta"], 8, 2, 2);
        let p = tiny_prompt(&dec, 4, 3, 2);
        let a = decoder_forward(&dec, &p).unwrap();
        let b = decoder_forward(&dec, &p).unwrap();
        assert_eq!(a, b);
    }

    /// Hand-unrolled single-head attention on a 3-token prompt.
    #[test]
    fn single_block_matches_hand_unrolled_attention() {
        let dec = tiny_decoder(&["w"], 4, 1, 1);
        let p = tiny_prompt(&dec, 1, 1, 1);
        let (logits, cache) = decoder_forward_cached(&dec, &p).unwrap();

        // Prompt rows: word(0), sep(1), concept(2), sep(3), roi(4).
        let x = &p.embeddings;
        let s = x.rows();
        let d = 4usize;
        let st = &dec.store;
        let q = matmul(x, st.value("dec.b0.attn_query").unwrap())
            .unwrap()
            .add_row_broadcast(st.value("dec.b0.attn_query_bias").unwrap())
            .unwrap();
        let k = matmul(x, st.value("dec.b0.attn_key").unwrap()).unwrap();
        let v = matmul(x, st.value("dec.b0.attn_value").unwrap())
            .unwrap()
            .add_row_broadcast(st.value("dec.b0.attn_value_bias").unwrap())
            .unwrap();
        let scale = (d as f64).sqrt();
        let mut hand = Tensor::zeros(vec![s, d]);
        for i in 0..s {
            let allowed: Vec<usize> = (0..s).filter(|&j| p.attention[i][j]).collect();
            let mut weights: Vec<f64> = allowed
                .iter()
                .map(|&j| crate::tensor::dot(q.row(i), k.row(j)) / scale)
                .collect();
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for w in &mut weights {
                *w = (*w - max).exp();
                sum += *w;
            }
            for (&j, w) in allowed.iter().zip(&weights) {
                for (o, vv) in hand.row_mut(i).iter_mut().zip(v.row(j)) {
                    *o += (w / sum) * vv;
                }
            }
        }
        for (got, want) in cache.blocks[0].concat.data().iter().zip(hand.data()) {
            assert!((got - want).abs() < 1e-10);
        }
        assert_eq!(logits.rows(), 1);
    }

    #[test]
    fn roi_row_permutation_with_positions_keeps_logits() {
        let dec = tiny_decoder(&["z"], 8, 1, 2);
        let d = 8;
        let rois = Tensor::from_rows(&[
            (0..d).map(|i| i as f64 / 10.0).collect::<Vec<_>>(),
            (0..d).map(|i| -(i as f64) / 7.0).collect::<Vec<_>>(),
        ])
        .unwrap();
        let enriched = Tensor::from_rows(&[(0..d).map(|i| (i as f64).sin()).collect::<Vec<_>>()])
            .unwrap();
        let prompt = assemble_prompt(&[MASK, MASK], &enriched, &rois, &dec).unwrap();
        let base = decoder_forward(&dec, &prompt).unwrap();

        // Swap ROI rows but also swap the assembled embedding rows, keeping
        // position embeddings attached to their rows: logits must not move,
        // because attention over the prompt side is permutation-blind once
        // the content+position rows travel together.
        let mut swapped = prompt.clone();
        let n0 = swapped.len() - 2;
        let n1 = swapped.len() - 1;
        let r0 = swapped.embeddings.row(n0).to_vec();
        let r1 = swapped.embeddings.row(n1).to_vec();
        swapped.embeddings.row_mut(n0).copy_from_slice(&r1);
        swapped.embeddings.row_mut(n1).copy_from_slice(&r0);
        let moved = decoder_forward(&dec, &swapped).unwrap();
        // Rows moved *with* their position embeddings: the set of key/value
        // rows is unchanged, so word logits are identical.
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        // Swapping only the content (fresh assembly with permuted ROI input)
        // moves rows across position embeddings and generically changes logits.
        let rois_swapped =
            Tensor::from_rows(&[rois.row(1).to_vec(), rois.row(0).to_vec()]).unwrap();
        let reassembled = assemble_prompt(&[MASK, MASK], &enriched, &rois_swapped, &dec).unwrap();
        let changed = decoder_forward(&dec, &reassembled).unwrap();
        let delta: f64 = base
            .data()
            .iter()
            .zip(changed.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 1e-9);
    }

    #[test]
    fn causality_logits_ignore_future_word_ids() {
        let dec = tiny_decoder(&["cat dog owl"], 8, 2, 2);
        let d = 8;
        let enriched = Tensor::zeros(vec![2, d]);
        let rois = Tensor::zeros(vec![2, d]);
        let a_id = dec.vocab.id_of("cat").unwrap();
        let b_id = dec.vocab.id_of("dog").unwrap();
        let c_id = dec.vocab.id_of("owl").unwrap();
        let p1 = assemble_prompt(&[a_id, b_id, c_id], &enriched, &rois, &dec).unwrap();
        let p2 = assemble_prompt(&[a_id, b_id, a_id], &enriched, &rois, &dec).unwrap();
        let l1 = decoder_forward(&dec, &p1).unwrap();
        let l2 = decoder_forward(&dec, &p2).unwrap();
        // Positions 0..=1 cannot see position 2.
        for t in 0..2 {
            for (x, y) in l1.row(t).iter().zip(l2.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_decoder_reports_frozen() {
        let mut dec = tiny_decoder(&["a"], 4, 1, 1);
        assert!(!dec.is_frozen());
        dec.freeze();
        assert!(dec.is_frozen());
    }

    #[test]
    fn full_decoder_gradient_check_on_tiny_instance() {
        let mut dec = tiny_decoder(&["sun moon"], 4, 2, 2);
        let d = 4;
        let enriched = Tensor::from_rows(&[vec![0.3, -0.1, 0.7, 0.2]]).unwrap();
        let rois = Tensor::from_rows(&[vec![-0.4, 0.5, 0.1, -0.2]]).unwrap();
        let sun = dec.vocab.id_of("sun").unwrap();
        let moon = dec.vocab.id_of("moon").unwrap();
        let word_ids = vec![MASK, sun];
        let targets = vec![sun, moon];
        let mask = vec![true, true];

        let cfg = dec.cfg.clone();
        let vocab = dec.vocab.clone();
        let loss_fn = move |store: &ParamStore| -> Result<f64> {
            let probe = FrozenDecoder {
                cfg: cfg.clone(),
                vocab: vocab.clone(),
                store: store.clone(),
            };
            let prompt = assemble_prompt(&word_ids, &enriched, &rois, &probe)?;
            let logits = decoder_forward(&probe, &prompt)?;
            Ok(cross_entropy_loss(&logits, &targets, &mask)?.0)
        };

        let word_ids = vec![MASK, sun];
        let targets = vec![sun, moon];
        let mask = vec![true, true];
        let enriched = Tensor::from_rows(&[vec![0.3, -0.1, 0.7, 0.2]]).unwrap();
        let rois = Tensor::from_rows(&[vec![-0.4, 0.5, 0.1, -0.2]]).unwrap();
        let prompt = assemble_prompt(&word_ids, &enriched, &rois, &dec).unwrap();
        let (logits, cache) = decoder_forward_cached(&dec, &prompt).unwrap();
        let (_, dlogits) = cross_entropy_loss(&logits, &targets, &mask).unwrap();
        dec.store.zero_grads();
        decoder_backward(&mut dec, &prompt, &cache, &dlogits, true).unwrap();

        let mut store = dec.store.clone();
        let report = grad_check(loss_fn, &mut store, 1e-5).unwrap();
        assert!(
            report.max_rel_error() < 1e-4,
            "worst: {:?}",
            report
                .per_param
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
        );
        let _ = d;
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut dec = tiny_decoder(&["ash elm"], 4, 1, 2);
        let enriched = Tensor::from_rows(&[vec![0.2, 0.4, -0.3, 0.1], vec![0.0, -0.5, 0.25, 0.6]])
            .unwrap();
        let rois = Tensor::from_rows(&[vec![0.1, 0.1, -0.1, 0.3]]).unwrap();
        let ash = dec.vocab.id_of("ash").unwrap();
        let targets = vec![ash];
        let mask = vec![true];

        let prompt = assemble_prompt(&[MASK], &enriched, &rois, &dec).unwrap();
        let (logits, cache) = decoder_forward_cached(&dec, &prompt).unwrap();
        let (_, dlogits) = cross_entropy_loss(&logits, &targets, &mask).unwrap();
        let dx = decoder_backward(&mut dec, &prompt, &cache, &dlogits, false).unwrap();

        // Perturb one enriched row element through prompt assembly.
        let eps = 1e-6;
        let concept_row = prompt.concept_positions[0];
        for col in 0..4 {
            let mut plus = enriched.clone();
            *plus.at_mut(0, col) += eps;
            let mut minus = enriched.clone();
            *minus.at_mut(0, col) -= eps;
            let lp = {
                let p = assemble_prompt(&[MASK], &plus, &rois, &dec).unwrap();
                let l = decoder_forward(&dec, &p).unwrap();
                cross_entropy_loss(&l, &targets, &mask).unwrap().0
            };
            let lm = {
                let p = assemble_prompt(&[MASK], &minus, &rois, &dec).unwrap();
                let l = decoder_forward(&dec, &p).unwrap();
                cross_entropy_loss(&l, &targets, &mask).unwrap().0
            };
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = dx.at(concept_row, col);
            assert!(
                (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8) < 1e-4,
                "col {col}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}
