//! Graph attention stack over the knowledge graph.
//!
//! Two attention layers update each node from its neighbor set (self
//! included): attention logits are query-key products scaled by 1/sqrt(D),
//! normalized only over the neighbor set, aggregated through the value
//! projection, passed through the output projection, and layer-normalized
//! onto the residual. Two fully connected layers then taper the width back
//! down to the embedding size. Every backward pass here is hand-derived and
//! checked against central finite differences.

use crate::concepts::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::params::{xavier_uniform, ParamStore};
use crate::tensor::{
    gelu, gelu_prime, layer_norm_backward, layer_norm_cached, matmul, softmax_inplace,
    LayerNormCache, Tensor,
};

pub const GAT_LAYERS: usize = 2;
const NORM_EPS: f64 = 1e-5;

/// Shape schema of the trainable stack: node width D = 2d (embedding plus
/// context), reduction D -> D/2 (GELU) -> d.
#[derive(Debug, Clone, Copy)]
pub struct GatStack {
    pub d: usize,
}

impl GatStack {
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    /// Width of a node row inside the attention layers.
    pub fn node_width(&self) -> usize {
        2 * self.d
    }

    pub fn mid_width(&self) -> usize {
        self.node_width() / 2
    }

    /// Register all trainable entries with seeded Xavier weights.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = crate::params::seeded_rng(seed);
        let big = self.node_width();
        for layer in 0..GAT_LAYERS {
            for name in ["attn_query", "attn_key", "attn_value", "attn_out"] {
                store.register(
                    &format!("gat.l{layer}.{name}"),
                    xavier_uniform(big, big, &mut rng),
                    true,
                )?;
            }
            store.register(
                &format!("gat.l{layer}.norm_gain"),
                Tensor::filled(vec![big], 1.0),
                true,
            )?;
            store.register(
                &format!("gat.l{layer}.norm_bias"),
                Tensor::zeros(vec![big]),
                true,
            )?;
        }
        store.register(
            "gat.reduce.w1",
            xavier_uniform(big, self.mid_width(), &mut rng),
            true,
        )?;
        store.register("gat.reduce.b1", Tensor::zeros(vec![self.mid_width()]), true)?;
        store.register(
            "gat.reduce.w2",
            xavier_uniform(self.mid_width(), self.d, &mut rng),
            true,
        )?;
        store.register("gat.reduce.b2", Tensor::zeros(vec![self.d]), true)?;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in 0..GAT_LAYERS {
            for field in [
                "attn_query",
                "attn_key",
                "attn_value",
                "attn_out",
                "norm_gain",
                "norm_bias",
            ] {
                names.push(format!("gat.l{layer}.{field}"));
            }
        }
        for field in ["w1", "b1", "w2", "b2"] {
            names.push(format!("gat.reduce.{field}"));
        }
        names
    }
}

/// Per-node input rows: `[embedding; context]`, the initial node state.
pub fn init_node_inputs(
    graph: &KnowledgeGraph,
    provider: &EmbeddingProvider,
    context: &Tensor,
) -> Result<Tensor> {
    if context.len() != provider.dim {
        return Err(Error::Shape {
            op: "init_node_inputs",
            lhs: vec![provider.dim],
            rhs: context.shape().to_vec(),
        });
    }
    let mut rows = Vec::with_capacity(graph.node_count());
    for (concept, _) in graph.nodes() {
        let mut row = provider.embed(concept).data().to_vec();
        row.extend_from_slice(context.data());
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Everything one attention layer needs to replay its backward pass.
pub struct LayerCache {
    input: Tensor,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    aggregated: Tensor,
    neighbor_sets: Vec<Vec<usize>>,
    attention: Vec<Vec<f64>>,
    norms: Vec<LayerNormCache>,
}

fn layer_names(layer: usize) -> [String; 6] {
    [
        format!("gat.l{layer}.attn_query"),
        format!("gat.l{layer}.attn_key"),
        format!("gat.l{layer}.attn_value"),
        format!("gat.l{layer}.attn_out"),
        format!("gat.l{layer}.norm_gain"),
        format!("gat.l{layer}.norm_bias"),
    ]
}

fn layer_forward_cached(
    store: &ParamStore,
    layer: usize,
    h: &Tensor,
    graph: &KnowledgeGraph,
) -> Result<(Tensor, LayerCache)> {
    let n = graph.node_count();
    if h.rows() != n {
        return Err(Error::Shape {
            op: "gat_layer_forward",
            lhs: vec![n],
            rhs: h.shape().to_vec(),
        });
    }
    let [wq, wk, wv, wo, gain, bias] = layer_names(layer);
    let queries = matmul(h, store.value(&wq)?)?;
    let keys = matmul(h, store.value(&wk)?)?;
    let values = matmul(h, store.value(&wv)?)?;
    let width = h.cols();
    let scale = (width as f64).sqrt();

    let mut neighbor_sets = graph.neighbor_lists();
    for (i, set) in neighbor_sets.iter_mut().enumerate() {
        set.push(i);
        set.sort_unstable();
    }

    let mut attention = Vec::with_capacity(n);
    let mut aggregated = Tensor::zeros(vec![n, width]);
    for i in 0..n {
        let set = &neighbor_sets[i];
        let mut logits: Vec<f64> = set
            .iter()
            .map(|&j| crate::tensor::dot(queries.row(i), keys.row(j)))
            .collect();
        softmax_inplace(&mut logits, scale);
        let out_row = aggregated.row_mut(i);
        for (&j, &alpha) in set.iter().zip(&logits) {
            for (o, v) in out_row.iter_mut().zip(values.row(j)) {
                *o += alpha * v;
            }
        }
        attention.push(logits);
    }

    let projected = matmul(&aggregated, store.value(&wo)?)?;
    let gain = store.value(&gain)?;
    let bias = store.value(&bias)?;
    let mut out = Tensor::zeros(vec![n, width]);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let pre: Vec<f64> = h
            .row(i)
            .iter()
            .zip(projected.row(i))
            .map(|(a, b)| a + b)
            .collect();
        let (row, cache) = layer_norm_cached(&pre, gain.data(), bias.data(), NORM_EPS)?;
        out.row_mut(i).copy_from_slice(&row);
        norms.push(cache);
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("gat_layer_forward"));
    }
    Ok((
        out,
        LayerCache {
            input: h.clone(),
            queries,
            keys,
            values,
            aggregated,
            neighbor_sets,
            attention,
            norms,
        },
    ))
}

/// One attention layer, forward only.
pub fn gat_layer_forward(
    store: &ParamStore,
    layer: usize,
    h: &Tensor,
    graph: &KnowledgeGraph,
) -> Result<Tensor> {
    layer_forward_cached(store, layer, h, graph).map(|(out, _)| out)
}

fn layer_backward(
    store: &mut ParamStore,
    layer: usize,
    cache: &LayerCache,
    upstream: &Tensor,
) -> Result<Tensor> {
    let [wq_n, wk_n, wv_n, wo_n, gain_n, bias_n] = layer_names(layer);
    let n = cache.input.rows();
    let width = cache.input.cols();
    let scale = (width as f64).sqrt();
    let gain = store.value(&gain_n)?.clone();
    let wq = store.value(&wq_n)?.clone();
    let wk = store.value(&wk_n)?.clone();
    let wv = store.value(&wv_n)?.clone();
    let wo = store.value(&wo_n)?.clone();

    let mut dgain = vec![0.0; width];
    let mut dbias = vec![0.0; width];
    let mut dpre = Tensor::zeros(vec![n, width]);
    for i in 0..n {
        let du = layer_norm_backward(
            upstream.row(i),
            gain.data(),
            &cache.norms[i],
            &mut dgain,
            &mut dbias,
        );
        dpre.row_mut(i).copy_from_slice(&du);
    }

    // pre = input + aggregated * Wo
    let dwo = matmul(&cache.aggregated.transpose(), &dpre)?;
    let dagg = matmul(&dpre, &wo.transpose())?;

    let mut dqueries = Tensor::zeros(vec![n, width]);
    let mut dkeys = Tensor::zeros(vec![n, width]);
    let mut dvalues = Tensor::zeros(vec![n, width]);
    for i in 0..n {
        let set = &cache.neighbor_sets[i];
        let alphas = &cache.attention[i];
        let dagg_row = dagg.row(i);
        // dalpha_j = dagg_i . v_j ; dv_j += alpha_j * dagg_i
        let mut dalpha: Vec<f64> = Vec::with_capacity(set.len());
        for (&j, &alpha) in set.iter().zip(alphas) {
            dalpha.push(crate::tensor::dot(dagg_row, cache.values.row(j)));
            let dv = dvalues.row_mut(j);
            for (dvx, dx) in dv.iter_mut().zip(dagg_row) {
                *dvx += alpha * dx;
            }
        }
        // softmax backward over the neighbor set, then undo the 1/sqrt(D).
        let inner: f64 = alphas.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        for ((&j, &alpha), &da) in set.iter().zip(alphas).zip(&dalpha) {
            let dlogit = alpha * (da - inner) / scale;
            let dq = dqueries.row_mut(i);
            for (dqx, kx) in dq.iter_mut().zip(cache.keys.row(j)) {
                *dqx += dlogit * kx;
            }
            let dk = dkeys.row_mut(j);
            for (dkx, qx) in dk.iter_mut().zip(cache.queries.row(i)) {
                *dkx += dlogit * qx;
            }
        }
    }

    store.accumulate_grad(&wq_n, &matmul(&cache.input.transpose(), &dqueries)?)?;
    store.accumulate_grad(&wk_n, &matmul(&cache.input.transpose(), &dkeys)?)?;
    store.accumulate_grad(&wv_n, &matmul(&cache.input.transpose(), &dvalues)?)?;
    store.accumulate_grad(&wo_n, &dwo)?;
    store.accumulate_grad(&gain_n, &Tensor::vector(dgain))?;
    store.accumulate_grad(&bias_n, &Tensor::vector(dbias))?;

    let mut dinput = dpre; // residual path
    dinput.add_scaled(&matmul(&dqueries, &wq.transpose())?, 1.0)?;
    dinput.add_scaled(&matmul(&dkeys, &wk.transpose())?, 1.0)?;
    dinput.add_scaled(&matmul(&dvalues, &wv.transpose())?, 1.0)?;
    Ok(dinput)
}

/// Forward intermediates of the whole stack.
pub struct GatCache {
    layers: Vec<LayerCache>,
    reduced_input: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
    node_count: usize,
    out_width: usize,
}

/// Full stack: node inputs -> two attention layers -> GELU taper -> linear.
pub fn gnn_forward_cached(
    stack: &GatStack,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    provider: &EmbeddingProvider,
    context: &Tensor,
) -> Result<(Tensor, GatCache)> {
    let mut h = init_node_inputs(graph, provider, context)?;
    if h.cols() != stack.node_width() {
        return Err(Error::Shape {
            op: "gnn_forward",
            lhs: vec![stack.node_width()],
            rhs: h.shape().to_vec(),
        });
    }
    let mut layers = Vec::with_capacity(GAT_LAYERS);
    for layer in 0..GAT_LAYERS {
        let (next, cache) = layer_forward_cached(store, layer, &h, graph)?;
        layers.push(cache);
        h = next;
    }
    let reduced_input = h;
    let w1 = store.value("gat.reduce.w1")?;
    let b1 = store.value("gat.reduce.b1")?;
    let w2 = store.value("gat.reduce.w2")?;
    let b2 = store.value("gat.reduce.b2")?;
    let hidden_pre = matmul(&reduced_input, w1)?.add_row_broadcast(b1)?;
    let mut hidden = hidden_pre.clone();
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    let out = matmul(&hidden, w2)?.add_row_broadcast(b2)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("gnn_forward"));
    }
    let cache = GatCache {
        layers,
        reduced_input,
        hidden_pre,
        hidden,
        node_count: graph.node_count(),
        out_width: stack.d,
    };
    Ok((out, cache))
}

pub fn gnn_forward(
    stack: &GatStack,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    provider: &EmbeddingProvider,
    context: &Tensor,
) -> Result<Tensor> {
    gnn_forward_cached(stack, store, graph, provider, context).map(|(out, _)| out)
}

/// Accumulate exact gradients for every stack parameter given the gradient
/// of the loss with respect to the enriched output rows. Returns the
/// gradient with respect to the initial node inputs (embeddings are inputs,
/// not parameters, so callers normally drop it).
pub fn gnn_backward(
    store: &mut ParamStore,
    cache: &GatCache,
    upstream: &Tensor,
) -> Result<Tensor> {
    if upstream.rows() != cache.node_count || upstream.cols() != cache.out_width {
        return Err(Error::StaleCache(format!(
            "upstream gradient {:?} does not match cached forward ({} nodes, width {})",
            upstream.shape(),
            cache.node_count,
            cache.out_width
        )));
    }
    let w1 = store.value("gat.reduce.w1")?.clone();
    let w2 = store.value("gat.reduce.w2")?.clone();

    store.accumulate_grad("gat.reduce.w2", &matmul(&cache.hidden.transpose(), upstream)?)?;
    store.accumulate_grad("gat.reduce.b2", &upstream.column_sums())?;
    let dhidden = matmul(upstream, &w2.transpose())?;
    let mut dhidden_pre = dhidden;
    for (g, z) in dhidden_pre.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
        *g *= gelu_prime(*z);
    }
    store.accumulate_grad(
        "gat.reduce.w1",
        &matmul(&cache.reduced_input.transpose(), &dhidden_pre)?,
    )?;
    store.accumulate_grad("gat.reduce.b1", &dhidden_pre.column_sums())?;
    let mut dh = matmul(&dhidden_pre, &w1.transpose())?;

    for layer in (0..GAT_LAYERS).rev() {
        dh = layer_backward(store, layer, &cache.layers[layer], &dh)?;
    }
    Ok(dh)
}
