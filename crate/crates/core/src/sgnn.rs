//! Scene-graph message passing over lane and traffic-element queries.
//!
//! One layer refines lane queries with messages from neighbouring lanes and
//! from traffic elements, weighted by the previous layer's predicted
//! adjacencies. Two variants are provided: `Sg` (one GCN weight per
//! relationship) and `Skg` (weights per lane role and per TE attribute,
//! aggregated by classification score).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::DenseMatrix;
use crate::nn::{join, Activation, Linear, Mlp, MlpCache, Params};
use crate::rng::Rng;
use crate::scene::NUM_ATTRIBUTES;

/// Lane roles in the knowledge graph, in slice order.
pub const LANE_ROLES: [&str; 3] = ["successor", "predecessor", "self_loop"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sg,
    #[default]
    Skg,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sg" => Ok(Variant::Sg),
            "skg" => Ok(Variant::Skg),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected sg|skg)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgnnConfig {
    pub lane_dim: usize,
    pub te_dim: usize,
    pub embed_hidden: usize,
    pub variant: Variant,
    pub activation: Activation,
    pub adapter_bias: bool,
    pub beta_ll: f64,
    pub beta_lt: f64,
    /// Recorded only; dropout is never sampled here.
    pub dropout: f64,
    pub layers: usize,
}

impl Default for SgnnConfig {
    fn default() -> Self {
        Self {
            lane_dim: 256,
            te_dim: 256,
            embed_hidden: 512,
            variant: Variant::Skg,
            activation: Activation::Relu,
            adapter_bias: true,
            beta_ll: 0.5,
            beta_lt: 0.5,
            dropout: 0.1,
            layers: 6,
        }
    }
}

impl SgnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lane_dim == 0 || self.te_dim == 0 || self.embed_hidden == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        for (name, b) in [("beta_ll", self.beta_ll), ("beta_lt", self.beta_lt)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout = {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Learnable tensors of one layer. The propagation weights of both variants
/// are held so a single checkpoint can drive either.
#[derive(Debug, Clone, PartialEq)]
pub struct SgnnParams {
    pub embed: Mlp,
    /// `[successor, predecessor, self_loop]`, each `F_l × F_l`.
    pub w_ll: Vec<DenseMatrix>,
    /// One `F_t × F_l` map per TE attribute.
    pub w_lt: Vec<DenseMatrix>,
    pub gcn_ll: DenseMatrix,
    pub gcn_lt: DenseMatrix,
    pub adapter: Linear,
    pub beta_ll: f64,
    pub beta_lt: f64,
    pub dropout: f64,
}

impl SgnnParams {
    pub fn init(config: &SgnnConfig, rng: &mut Rng) -> Self {
        let (fl, ft) = (config.lane_dim, config.te_dim);
        let embed = Mlp::new(rng, &[ft, config.embed_hidden, ft], false);
        let w_ll = (0..3).map(|_| crate::nn::init_uniform(rng, fl, fl, fl)).collect();
        let w_lt = (0..NUM_ATTRIBUTES).map(|_| crate::nn::init_uniform(rng, ft, ft, fl)).collect();
        let gcn_ll = crate::nn::init_uniform(rng, fl, fl, fl);
        let gcn_lt = crate::nn::init_uniform(rng, ft, ft, fl);
        let adapter = Linear::new(rng, 2 * fl, fl, config.adapter_bias);
        Self {
            embed,
            w_ll,
            w_lt,
            gcn_ll,
            gcn_lt,
            adapter,
            beta_ll: config.beta_ll,
            beta_lt: config.beta_lt,
            dropout: config.dropout,
        }
    }

    pub fn lane_dim(&self) -> usize {
        self.gcn_ll.rows()
    }

    pub fn te_dim(&self) -> usize {
        self.gcn_lt.rows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (fl, ft) = (self.lane_dim(), self.te_dim());
        self.gcn_ll.expect_shape("gcn_ll", fl, fl)?;
        self.gcn_lt.expect_shape("gcn_lt", ft, fl)?;
        if self.w_ll.len() != 3 {
            return Err(shape_err("w_ll slices", 3, self.w_ll.len()));
        }
        if self.w_lt.len() != NUM_ATTRIBUTES {
            return Err(shape_err("w_lt slices", NUM_ATTRIBUTES, self.w_lt.len()));
        }
        for w in &self.w_ll {
            w.expect_shape("w_ll", fl, fl)?;
        }
        for w in &self.w_lt {
            w.expect_shape("w_lt", ft, fl)?;
        }
        self.adapter.weight.expect_shape("adapter", 2 * fl, fl)?;
        if self.embed.input_dim() != ft || self.embed.output_dim() != ft {
            return Err(shape_err("embed", format!("{ft}->{ft}"), format!("{}->{}", self.embed.input_dim(), self.embed.output_dim())));
        }
        Ok(())
    }
}

impl Params for SgnnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (role, w) in LANE_ROLES.iter().zip(&self.w_ll) {
            f(join(prefix, &format!("w_ll.{role}")), w.shape(), w.data());
        }
        for (c, w) in self.w_lt.iter().enumerate() {
            f(join(prefix, &format!("w_lt.{c}")), w.shape(), w.data());
        }
        f(join(prefix, "gcn_ll"), self.gcn_ll.shape(), self.gcn_ll.data());
        f(join(prefix, "gcn_lt"), self.gcn_lt.shape(), self.gcn_lt.data());
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (role, w) in LANE_ROLES.iter().zip(self.w_ll.iter_mut()) {
            let s = w.shape();
            f(join(prefix, &format!("w_ll.{role}")), s, w.data_mut());
        }
        for (c, w) in self.w_lt.iter_mut().enumerate() {
            let s = w.shape();
            f(join(prefix, &format!("w_lt.{c}")), s, w.data_mut());
        }
        let s = self.gcn_ll.shape();
        f(join(prefix, "gcn_ll"), s, self.gcn_ll.data_mut());
        let s = self.gcn_lt.shape();
        f(join(prefix, "gcn_lt"), s, self.gcn_lt.data_mut());
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

/// Inputs fed back from the previous layer. Treated as constants: no
/// gradient flows into them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub a_ll: DenseMatrix,
    pub a_lt: DenseMatrix,
    /// `13 × N_t` attribute scores.
    pub s_t: DenseMatrix,
    pub layer_index: usize,
}

impl LayerState {
    /// State of the first layer: no adjacency information yet.
    pub fn initial(n_l: usize, n_t: usize) -> Self {
        Self {
            a_ll: DenseMatrix::zeros(n_l, n_l),
            a_lt: DenseMatrix::zeros(n_l, n_t),
            s_t: DenseMatrix::zeros(NUM_ATTRIBUTES, n_t),
            layer_index: 0,
        }
    }

    fn check(&self, n_l: usize, n_t: usize) -> Result<()> {
        self.a_ll.expect_shape("A_ll", n_l, n_l)?;
        self.a_lt.expect_shape("A_lt", n_l, n_t)?;
        self.s_t.expect_shape("S_t", NUM_ATTRIBUTES, n_t)?;
        for (name, m) in [("A_ll", &self.a_ll), ("A_lt", &self.a_lt), ("S_t", &self.s_t)] {
            if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("{name} entries must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn embed_te(q_t: &DenseMatrix, params: &SgnnParams) -> Result<DenseMatrix> {
    q_t.expect_shape("embed_te", q_t.rows(), params.te_dim())?;
    params.embed.forward(q_t)
}

pub fn build_t_ll(a_prev: &DenseMatrix, beta: f64, layer_index: usize) -> Result<DenseMatrix> {
    if !a_prev.is_square() {
        return Err(shape_err("build_t_ll", "square", format!("{}x{}", a_prev.rows(), a_prev.cols())));
    }
    let n = a_prev.rows();
    if layer_index == 0 {
        return Ok(DenseMatrix::identity(n));
    }
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        beta * (a_prev.get(i, j) + a_prev.get(j, i)) + if i == j { 1.0 } else { 0.0 }
    }))
}

pub fn build_t_lt(a_prev: &DenseMatrix, beta: f64, layer_index: usize) -> DenseMatrix {
    if layer_index == 0 {
        DenseMatrix::zeros(a_prev.rows(), a_prev.cols())
    } else {
        a_prev.scale(beta)
    }
}

/// `σ(T·Q·W)`.
pub fn gcn_propagate(q: &DenseMatrix, t: &DenseMatrix, w: &DenseMatrix, act: Activation) -> Result<DenseMatrix> {
    Ok(act.forward(&t.matmul(q)?.matmul(w)?))
}

/// Lane-role slices `[βA, βAᵀ, I]`; the non-self slices vanish at layer 0.
/// The self-loop slice carries no β so that β = 0 leaves the node's own
/// transform intact.
pub fn skg_ll_kernels(a_prev: &DenseMatrix, beta: f64, layer_index: usize) -> Result<[DenseMatrix; 3]> {
    if !a_prev.is_square() {
        return Err(shape_err("skg_ll", "square", format!("{}x{}", a_prev.rows(), a_prev.cols())));
    }
    let n = a_prev.rows();
    if layer_index == 0 {
        return Ok([DenseMatrix::zeros(n, n), DenseMatrix::zeros(n, n), DenseMatrix::identity(n)]);
    }
    Ok([a_prev.scale(beta), a_prev.transpose().scale(beta), DenseMatrix::identity(n)])
}

/// `Q'_x = Σ_c Σ_y K_c[x,y] · (Q_y W_c)`.
pub fn skg_ll_propagate(q_l: &DenseMatrix, state: &LayerState, w_ll: &[DenseMatrix], beta: f64) -> Result<DenseMatrix> {
    let kernels = skg_ll_kernels(&state.a_ll, beta, state.layer_index)?;
    if w_ll.len() != 3 {
        return Err(shape_err("skg_ll weights", 3, w_ll.len()));
    }
    let mut out = DenseMatrix::zeros(q_l.rows(), w_ll[0].cols());
    for (k, w) in kernels.iter().zip(w_ll) {
        out.add_assign(&k.matmul(q_l)?.matmul(w)?)?;
    }
    Ok(out)
}

/// Score-weighted kernel for attribute `c`: `M_c[x,y] = A[x,y]·S[c,y]`.
pub fn skg_lt_kernel(a_lt: &DenseMatrix, s_t: &DenseMatrix, c: usize) -> DenseMatrix {
    DenseMatrix::from_fn(a_lt.rows(), a_lt.cols(), |x, y| a_lt.get(x, y) * s_t.get(c, y))
}

/// `Q''_x = β Σ_y Σ_c S[c,y]·A[x,y]·(Q̃_t[y] W_c)`; zero at layer 0.
pub fn skg_lt_propagate(q_t_tilde: &DenseMatrix, state: &LayerState, w_lt: &[DenseMatrix], beta: f64) -> Result<DenseMatrix> {
    if w_lt.len() != NUM_ATTRIBUTES {
        return Err(shape_err("skg_lt weights", NUM_ATTRIBUTES, w_lt.len()));
    }
    let mut out = DenseMatrix::zeros(state.a_lt.rows(), w_lt[0].cols());
    if state.layer_index == 0 {
        return Ok(out);
    }
    for (c, w) in w_lt.iter().enumerate() {
        let m = skg_lt_kernel(&state.a_lt, &state.s_t, c);
        out.add_assign(&m.matmul(q_t_tilde)?.matmul(w)?.scale(beta))?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum PropagationCache {
    Sg {
        /// `T_ll·Q_l`, `T_lt·Q̃_t`.
        tq_ll: DenseMatrix,
        tq_lt: DenseMatrix,
        pre_ll: DenseMatrix,
        pre_lt: DenseMatrix,
        t_ll: DenseMatrix,
        t_lt: DenseMatrix,
    },
    Skg {
        kernels_ll: [DenseMatrix; 3],
        kq_ll: Vec<DenseMatrix>,
        kernels_lt: Vec<DenseMatrix>,
        kq_lt: Vec<DenseMatrix>,
    },
}

/// Intermediates recorded by [`sgnn_layer`] for [`sgnn_backward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    variant: Variant,
    activation: Activation,
    beta_lt: f64,
    layer_index: usize,
    q_l: DenseMatrix,
    embed: MlpCache,
    q_t_tilde: DenseMatrix,
    propagation: PropagationCache,
    concat: DenseMatrix,
    hidden: DenseMatrix,
}

impl LayerCache {
    /// Distance of every ReLU input from its kink; finite differences need
    /// this to be comfortably larger than the step.
    pub fn kink_margin(&self) -> f64 {
        let mut m = self.embed.kink_margin();
        let mut scan = |x: &DenseMatrix| {
            for v in x.data() {
                m = m.min(v.abs());
            }
        };
        match (&self.propagation, self.activation) {
            // relu(relu(p)) only bends where p does.
            (PropagationCache::Sg { pre_ll, pre_lt, .. }, Activation::Relu) => {
                scan(pre_ll);
                scan(pre_lt);
            }
            // Before any adjacency exists the TE half is identically zero.
            (PropagationCache::Skg { .. }, _) if self.layer_index == 0 => {
                let (lanes, _) = self.concat.split_cols(self.concat.cols() / 2);
                scan(&lanes);
            }
            _ => scan(&self.concat),
        }
        m
    }

    pub fn q_t_tilde(&self) -> &DenseMatrix {
        &self.q_t_tilde
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub q_l_tilde: DenseMatrix,
    pub q_t_tilde: DenseMatrix,
    /// Un-embedded TE queries, passed on to the TE detection head.
    pub q_t: DenseMatrix,
}

pub fn sgnn_layer(
    q_l: &DenseMatrix,
    q_t: &DenseMatrix,
    state: &LayerState,
    params: &SgnnParams,
    variant: Variant,
    activation: Activation,
) -> Result<(LayerOutput, LayerCache)> {
    params.check_shapes()?;
    let (fl, ft) = (params.lane_dim(), params.te_dim());
    q_l.expect_shape("q_l", q_l.rows(), fl)?;
    q_t.expect_shape("q_t", q_t.rows(), ft)?;
    state.check(q_l.rows(), q_t.rows())?;
    if !q_l.is_finite() || !q_t.is_finite() {
        return Err(Error::InvalidInput("queries must be finite".into()));
    }

    let (q_t_tilde, embed) = params.embed.forward_cached(q_t)?;
    let (q1, q2, propagation) = match variant {
        Variant::Sg => {
            let t_ll = build_t_ll(&state.a_ll, params.beta_ll, state.layer_index)?;
            let t_lt = build_t_lt(&state.a_lt, params.beta_lt, state.layer_index);
            let tq_ll = t_ll.matmul(q_l)?;
            let tq_lt = t_lt.matmul(&q_t_tilde)?;
            let pre_ll = tq_ll.matmul(&params.gcn_ll)?;
            let pre_lt = tq_lt.matmul(&params.gcn_lt)?;
            let q1 = activation.forward(&pre_ll);
            let q2 = activation.forward(&pre_lt);
            (q1, q2, PropagationCache::Sg { tq_ll, tq_lt, pre_ll, pre_lt, t_ll, t_lt })
        }
        Variant::Skg => {
            let kernels_ll = skg_ll_kernels(&state.a_ll, params.beta_ll, state.layer_index)?;
            let mut q1 = DenseMatrix::zeros(q_l.rows(), fl);
            let mut kq_ll = Vec::with_capacity(3);
            for (k, w) in kernels_ll.iter().zip(&params.w_ll) {
                let kq = k.matmul(q_l)?;
                q1.add_assign(&kq.matmul(w)?)?;
                kq_ll.push(kq);
            }
            let mut q2 = DenseMatrix::zeros(q_l.rows(), fl);
            let mut kernels_lt = Vec::new();
            let mut kq_lt = Vec::new();
            if state.layer_index > 0 {
                for (c, w) in params.w_lt.iter().enumerate() {
                    let m = skg_lt_kernel(&state.a_lt, &state.s_t, c);
                    let mq = m.matmul(&q_t_tilde)?;
                    q2.add_assign(&mq.matmul(w)?.scale(params.beta_lt))?;
                    kernels_lt.push(m);
                    kq_lt.push(mq);
                }
            }
            (q1, q2, PropagationCache::Skg { kernels_ll, kq_ll, kernels_lt, kq_lt })
        }
    };
    let concat = q1.hcat(&q2)?;
    let hidden = Activation::Relu.forward(&concat);
    let r = params.adapter.forward(&hidden)?;
    let q_l_tilde = q_l.add(&r)?;
    let cache = LayerCache {
        variant,
        activation,
        beta_lt: params.beta_lt,
        layer_index: state.layer_index,
        q_l: q_l.clone(),
        embed,
        q_t_tilde: q_t_tilde.clone(),
        propagation,
        concat,
        hidden,
    };
    Ok((LayerOutput { q_l_tilde, q_t_tilde, q_t: q_t.clone() }, cache))
}

/// Gradients of one layer. Adjacency and score gradients are zero by
/// construction: those inputs are fed back without differentiation.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub q_l: DenseMatrix,
    pub q_t: DenseMatrix,
    pub params: SgnnParams,
    pub a_ll: DenseMatrix,
    pub a_lt: DenseMatrix,
    pub s_t: DenseMatrix,
}

/// Reverse pass. `d_q_l_tilde` is the upstream gradient on the refined lane
/// queries, `d_q_t_tilde` on the embedded TE queries and `d_q_t` on the
/// pass-through TE queries (either may be absent).
pub fn sgnn_backward(
    cache: &LayerCache,
    params: &SgnnParams,
    d_q_l_tilde: &DenseMatrix,
    d_q_t_tilde: Option<&DenseMatrix>,
    d_q_t: Option<&DenseMatrix>,
) -> Result<LayerGrads> {
    let (n_l, fl) = cache.q_l.shape();
    let n_t = cache.q_t_tilde.rows();
    let ft = params.te_dim();
    d_q_l_tilde.expect_shape("d_q_l_tilde", n_l, fl)?;
    let mut grads = params.zeros_like();

    // Residual: q̃_l = q_l + adapter(relu(concat)).
    let mut d_q_l = d_q_l_tilde.clone();
    let d_hidden = params.adapter.backward(&cache.hidden, d_q_l_tilde, &mut grads.adapter)?;
    let d_concat = Activation::Relu.backward(&cache.concat, &d_hidden)?;
    let (d_q1, d_q2) = d_concat.split_cols(fl);

    let mut d_qt_tilde = match d_q_t_tilde {
        Some(g) => {
            g.expect_shape("d_q_t_tilde", n_t, ft)?;
            g.clone()
        }
        None => DenseMatrix::zeros(n_t, ft),
    };

    match &cache.propagation {
        PropagationCache::Sg { tq_ll, tq_lt, pre_ll, pre_lt, t_ll, t_lt } => {
            let d_pre_ll = cache.activation.backward(pre_ll, &d_q1)?;
            let d_pre_lt = cache.activation.backward(pre_lt, &d_q2)?;
            grads.gcn_ll.add_assign(&tq_ll.t_matmul(&d_pre_ll)?)?;
            grads.gcn_lt.add_assign(&tq_lt.t_matmul(&d_pre_lt)?)?;
            d_q_l.add_assign(&t_ll.t_matmul(&d_pre_ll.matmul_t(&params.gcn_ll)?)?)?;
            d_qt_tilde.add_assign(&t_lt.t_matmul(&d_pre_lt.matmul_t(&params.gcn_lt)?)?)?;
        }
        PropagationCache::Skg { kernels_ll, kq_ll, kernels_lt, kq_lt } => {
            for c in 0..3 {
                grads.w_ll[c].add_assign(&kq_ll[c].t_matmul(&d_q1)?)?;
                d_q_l.add_assign(&kernels_ll[c].t_matmul(&d_q1.matmul_t(&params.w_ll[c])?)?)?;
            }
            if cache.layer_index > 0 {
                let d_q2b = d_q2.scale(cache.beta_lt);
                for c in 0..NUM_ATTRIBUTES {
                    grads.w_lt[c].add_assign(&kq_lt[c].t_matmul(&d_q2b)?)?;
                    d_qt_tilde.add_assign(&kernels_lt[c].t_matmul(&d_q2b.matmul_t(&params.w_lt[c])?)?)?;
                }
            }
        }
    }

    let mut d_q_t_total = params.embed.backward(&cache.embed, &d_qt_tilde, &mut grads.embed)?;
    if let Some(g) = d_q_t {
        d_q_t_total.add_assign(g)?;
    }
    Ok(LayerGrads {
        q_l: d_q_l,
        q_t: d_q_t_total,
        params: grads,
        a_ll: DenseMatrix::zeros(n_l, n_l),
        a_lt: DenseMatrix::zeros(n_l, n_t),
        s_t: DenseMatrix::zeros(NUM_ATTRIBUTES, n_t),
    })
}

impl LayerCache {
    pub fn variant(&self) -> Variant {
        self.variant
    }
}

/// Runs a stack of layers. Layer 0 sees `initial`; each later layer sees the
/// state returned by `feedback` for the previous layer's output.
pub fn run_stack(
    q_l: &DenseMatrix,
    q_t: &DenseMatrix,
    layers: &[SgnnParams],
    variant: Variant,
    activation: Activation,
    initial: LayerState,
    mut feedback: impl FnMut(usize, &LayerOutput) -> Result<LayerState>,
) -> Result<Vec<LayerOutput>> {
    let mut outputs: Vec<LayerOutput> = Vec::with_capacity(layers.len());
    let mut state = initial;
    let mut lanes = q_l.clone();
    for (i, params) in layers.iter().enumerate() {
        let (out, _) = sgnn_layer(&lanes, q_t, &state, params, variant, activation)?;
        if i + 1 < layers.len() {
            state = feedback(i, &out)?;
            state.layer_index = i + 1;
        }
        lanes = out.q_l_tilde.clone();
        outputs.push(out);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn small_config() -> SgnnConfig {
        SgnnConfig { lane_dim: 5, te_dim: 4, embed_hidden: 6, ..SgnnConfig::default() }
    }

    fn random(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.uniform_in(lo, hi))
    }

    fn random_state(rng: &mut Rng, n_l: usize, n_t: usize, layer: usize) -> LayerState {
        LayerState {
            a_ll: random(rng, n_l, n_l, 0.0, 1.0),
            a_lt: random(rng, n_l, n_t, 0.0, 1.0),
            s_t: random(rng, NUM_ATTRIBUTES, n_t, 0.0, 1.0),
            layer_index: layer,
        }
    }

    fn relu(x: f64) -> f64 {
        x.max(0.0)
    }

    // Straight-line oracle: every product spelled out index by index.
    fn dense(x: &[f64], w: &DenseMatrix, b: Option<&Vec<f64>>) -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.map_or(0.0, |b| b[j]))
            .collect()
    }

    fn oracle_embed(q: &[f64], p: &SgnnParams) -> Vec<f64> {
        let l0 = &p.embed.layers[0];
        let l1 = &p.embed.layers[1];
        let h: Vec<f64> = dense(q, &l0.weight, l0.bias.as_ref()).into_iter().map(relu).collect();
        dense(&h, &l1.weight, l1.bias.as_ref())
    }

    fn oracle_layer(q_l: &DenseMatrix, q_t: &DenseMatrix, s: &LayerState, p: &SgnnParams, variant: Variant) -> DenseMatrix {
        let (n_l, fl) = q_l.shape();
        let n_t = q_t.rows();
        let qt: Vec<Vec<f64>> = (0..n_t).map(|y| oracle_embed(q_t.row(y), p)).collect();
        let mut out = DenseMatrix::zeros(n_l, fl);
        for x in 0..n_l {
            let mut q1 = vec![0.0; fl];
            let mut q2 = vec![0.0; fl];
            match variant {
                Variant::Sg => {
                    for y in 0..n_l {
                        let t = if s.layer_index == 0 {
                            if x == y { 1.0 } else { 0.0 }
                        } else {
                            p.beta_ll * (s.a_ll.get(x, y) + s.a_ll.get(y, x)) + if x == y { 1.0 } else { 0.0 }
                        };
                        let v = dense(q_l.row(y), &p.gcn_ll, None);
                        for f in 0..fl {
                            q1[f] += t * v[f];
                        }
                    }
                    for y in 0..n_t {
                        let t = if s.layer_index == 0 { 0.0 } else { p.beta_lt * s.a_lt.get(x, y) };
                        let v = dense(&qt[y], &p.gcn_lt, None);
                        for f in 0..fl {
                            q2[f] += t * v[f];
                        }
                    }
                    q1.iter_mut().for_each(|v| *v = relu(*v));
                    q2.iter_mut().for_each(|v| *v = relu(*v));
                }
                Variant::Skg => {
                    for y in 0..n_l {
                        for c in 0..3 {
                            let k = match (c, s.layer_index) {
                                (2, _) => if x == y { 1.0 } else { 0.0 },
                                (_, 0) => 0.0,
                                (0, _) => p.beta_ll * s.a_ll.get(x, y),
                                _ => p.beta_ll * s.a_ll.get(y, x),
                            };
                            let v = dense(q_l.row(y), &p.w_ll[c], None);
                            for f in 0..fl {
                                q1[f] += k * v[f];
                            }
                        }
                    }
                    if s.layer_index > 0 {
                        for y in 0..n_t {
                            for c in 0..NUM_ATTRIBUTES {
                                let k = p.beta_lt * s.s_t.get(c, y) * s.a_lt.get(x, y);
                                let v = dense(&qt[y], &p.w_lt[c], None);
                                for f in 0..fl {
                                    q2[f] += k * v[f];
                                }
                            }
                        }
                    }
                }
            }
            let h: Vec<f64> = q1.into_iter().chain(q2).map(relu).collect();
            let r = dense(&h, &p.adapter.weight, p.adapter.bias.as_ref());
            for f in 0..fl {
                out.set(x, f, q_l.get(x, f) + r[f]);
            }
        }
        out
    }

    fn max_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.zip_map(b, |x, y| (x - y).abs()).unwrap().max_abs()
    }

    #[test]
    fn t_ll_examples() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], 0).unwrap();
        assert_eq!(build_t_ll(&a, 0.5, 0).unwrap(), DenseMatrix::identity(2));
        assert_eq!(build_t_ll(&a, 0.0, 3).unwrap(), DenseMatrix::identity(2));
        let t = build_t_ll(&a, 0.5, 1).unwrap();
        assert_eq!(t.to_rows(), vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert!(build_t_ll(&DenseMatrix::zeros(2, 3), 0.5, 1).is_err());
    }

    #[test]
    fn t_lt_examples() {
        let a = DenseMatrix::from_rows(&[vec![0.8, 0.0]], 0).unwrap();
        assert_eq!(build_t_lt(&a, 0.5, 0), DenseMatrix::zeros(1, 2));
        assert_eq!(build_t_lt(&a, 0.5, 1).get(0, 0), 0.4);
        assert_eq!(build_t_lt(&DenseMatrix::zeros(1, 2), 0.5, 1), DenseMatrix::zeros(1, 2));
    }

    #[test]
    fn gcn_examples_and_loop_oracle() {
        let mut rng = Rng::new(11);
        let q = random(&mut rng, 4, 8, 0.0, 1.0);
        let id = DenseMatrix::identity(4);
        assert_eq!(gcn_propagate(&q, &id, &DenseMatrix::identity(8), Activation::Relu).unwrap(), q);
        let zero = gcn_propagate(&q, &DenseMatrix::zeros(4, 4), &DenseMatrix::identity(8), Activation::Relu).unwrap();
        assert_eq!(zero.max_abs(), 0.0);

        let q = random(&mut rng, 4, 8, -1.0, 1.0);
        let t = random(&mut rng, 4, 4, -1.0, 1.0);
        let w = random(&mut rng, 8, 8, -1.0, 1.0);
        let got = gcn_propagate(&q, &t, &w, Activation::Relu).unwrap();
        for i in 0..4 {
            for o in 0..8 {
                let mut acc = 0.0;
                for j in 0..4 {
                    for f in 0..8 {
                        acc += t.get(i, j) * q.get(j, f) * w.get(f, o);
                    }
                }
                assert!((got.get(i, o) - relu(acc)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_examples() {
        let cfg = small_config();
        let mut p = SgnnParams::init(&cfg, &mut Rng::new(1));
        let mut zero_bias = p.clone();
        for l in &mut zero_bias.embed.layers {
            l.bias.as_mut().unwrap().fill(0.0);
        }
        let out = embed_te(&DenseMatrix::zeros(2, 4), &zero_bias).unwrap();
        assert_eq!(out.max_abs(), 0.0);

        // Identity-like embedding reproduces non-negative input.
        p.embed.layers[0].weight = DenseMatrix::from_fn(4, 6, |i, j| if i == j { 1.0 } else { 0.0 });
        p.embed.layers[1].weight = DenseMatrix::from_fn(6, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        for l in &mut p.embed.layers {
            l.bias.as_mut().unwrap().fill(0.0);
        }
        let q = DenseMatrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]], 0).unwrap();
        assert_eq!(embed_te(&q, &p).unwrap(), q);
        assert!(embed_te(&DenseMatrix::zeros(1, 3), &p).is_err());
    }

    #[test]
    fn skg_ll_examples() {
        let cfg = small_config();
        let mut rng = Rng::new(5);
        let p = SgnnParams::init(&cfg, &mut rng);
        let q = random(&mut rng, 2, 5, -1.0, 1.0);
        let mut state = LayerState::initial(2, 1);
        state.layer_index = 2;
        let out = skg_ll_propagate(&q, &state, &p.w_ll, 1.0).unwrap();
        assert!(max_diff(&out, &q.matmul(&p.w_ll[2]).unwrap()) < 1e-14);

        // Chain 0 → 1: lane 0 hears its successor, lane 1 its predecessor.
        state.a_ll.set(0, 1, 1.0);
        let out = skg_ll_propagate(&q, &state, &p.w_ll, 1.0).unwrap();
        let qw = |r: usize, c: usize| dense(q.row(r), &p.w_ll[c], None);
        for f in 0..5 {
            assert!((out.get(0, f) - (qw(1, 0)[f] + qw(0, 2)[f])).abs() < 1e-12);
            assert!((out.get(1, f) - (qw(0, 1)[f] + qw(1, 2)[f])).abs() < 1e-12);
        }
    }

    #[test]
    fn skg_ll_matches_loop_oracle() {
        let mut rng = Rng::new(8);
        let w: Vec<DenseMatrix> = (0..3).map(|_| random(&mut rng, 5, 5, -1.0, 1.0)).collect();
        let q = random(&mut rng, 4, 5, -1.0, 1.0);
        let state = random_state(&mut rng, 4, 2, 1);
        let got = skg_ll_propagate(&q, &state, &w, 0.5).unwrap();
        for x in 0..4 {
            for o in 0..5 {
                let mut acc = 0.0;
                for y in 0..4 {
                    let k = [0.5 * state.a_ll.get(x, y), 0.5 * state.a_ll.get(y, x), if x == y { 1.0 } else { 0.0 }];
                    for c in 0..3 {
                        for f in 0..5 {
                            acc += k[c] * w[c].get(f, o) * q.get(y, f);
                        }
                    }
                }
                assert!((got.get(x, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skg_lt_examples_and_loop_oracle() {
        let mut rng = Rng::new(9);
        let w: Vec<DenseMatrix> = (0..NUM_ATTRIBUTES).map(|_| random(&mut rng, 4, 5, -1.0, 1.0)).collect();
        let qt = random(&mut rng, 2, 4, -1.0, 1.0);
        let mut state = LayerState::initial(3, 2);
        state.layer_index = 1;
        assert_eq!(skg_lt_propagate(&qt, &state, &w, 0.5).unwrap().max_abs(), 0.0);

        // Single lane, single TE of class 3 with confidence-1 edge.
        let mut single = LayerState::initial(1, 1);
        single.layer_index = 1;
        single.a_lt.set(0, 0, 1.0);
        single.s_t.set(3, 0, 1.0);
        let q1 = DenseMatrix::from_rows(&[qt.row(0).to_vec()], 0).unwrap();
        let got = skg_lt_propagate(&q1, &single, &w, 0.5).unwrap();
        let expect = dense(qt.row(0), &w[3], None);
        for f in 0..5 {
            assert!((got.get(0, f) - 0.5 * expect[f]).abs() < 1e-14);
        }

        let state = random_state(&mut rng, 3, 2, 1);
        let got = skg_lt_propagate(&qt, &state, &w, 0.5).unwrap();
        for x in 0..3 {
            for o in 0..5 {
                let mut acc = 0.0;
                for y in 0..2 {
                    for c in 0..NUM_ATTRIBUTES {
                        for f in 0..4 {
                            acc += 0.5 * state.s_t.get(c, y) * state.a_lt.get(x, y) * w[c].get(f, o) * qt.get(y, f);
                        }
                    }
                }
                assert!((got.get(x, o) - acc).abs() < 1e-12);
            }
        }
        let mut layer0 = state.clone();
        layer0.layer_index = 0;
        assert_eq!(skg_lt_propagate(&qt, &layer0, &w, 0.5).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn layer_matches_straight_line_oracle() {
        let cfg = small_config();
        for seed in 0..4u64 {
            let mut rng = Rng::new(seed);
            let p = SgnnParams::init(&cfg, &mut rng);
            let q_l = random(&mut rng, 4, 5, -1.0, 1.0);
            let q_t = random(&mut rng, 3, 4, -1.0, 1.0);
            for layer in [0, 1] {
                let state = random_state(&mut rng, 4, 3, layer);
                for variant in [Variant::Sg, Variant::Skg] {
                    let (out, _) = sgnn_layer(&q_l, &q_t, &state, &p, variant, Activation::Relu).unwrap();
                    let oracle = oracle_layer(&q_l, &q_t, &state, &p, variant);
                    assert!(max_diff(&out.q_l_tilde, &oracle) < 1e-12, "{variant:?} layer {layer}");
                    assert_eq!(out.q_t, q_t);
                }
            }
        }
    }

    #[test]
    fn baseline_degeneration_returns_input() {
        let cfg = SgnnConfig { beta_ll: 0.0, beta_lt: 0.0, ..small_config() };
        let mut rng = Rng::new(2);
        let mut p = SgnnParams::init(&cfg, &mut rng);
        p.gcn_ll = DenseMatrix::zeros(5, 5);
        p.gcn_lt = DenseMatrix::zeros(4, 5);
        p.adapter.bias.as_mut().unwrap().fill(0.0);
        let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
        let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
        let state = random_state(&mut rng, 3, 2, 2);
        let (out, _) = sgnn_layer(&q_l, &q_t, &state, &p, Variant::Sg, Activation::Relu).unwrap();
        assert_eq!(out.q_l_tilde, q_l);
    }

    #[test]
    fn layer0_skg_zero_self_weight_passes_only_bias() {
        let mut rng = Rng::new(4);
        let mut p = SgnnParams::init(&small_config(), &mut rng);
        p.w_ll[2] = DenseMatrix::zeros(5, 5);
        let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
        let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
        let state = random_state(&mut rng, 3, 2, 0);
        let (out, _) = sgnn_layer(&q_l, &q_t, &state, &p, Variant::Skg, Activation::Relu).unwrap();
        let bias = p.adapter.bias.clone().unwrap();
        for x in 0..3 {
            for f in 0..5 {
                assert!((out.q_l_tilde.get(x, f) - q_l.get(x, f) - bias[f]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(6);
        let p = SgnnParams::init(&small_config(), &mut rng);
        let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
        let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
        let state = random_state(&mut rng, 3, 2, 1);
        for variant in [Variant::Sg, Variant::Skg] {
            let (_, cache) = sgnn_layer(&q_l, &q_t, &state, &p, variant, Activation::Relu).unwrap();
            let g = sgnn_backward(&cache, &p, &DenseMatrix::zeros(3, 5), None, None).unwrap();
            assert_eq!(g.params.max_abs(), 0.0);
            assert_eq!(g.q_l.max_abs() + g.q_t.max_abs(), 0.0);
        }
    }

    #[test]
    fn gradient_on_linear_path_is_closed_form() {
        // 2 lanes, 2 features, SKG layer 0 with only the self slice active and
        // all ReLUs open: q̃ = q + [qW_self, 0]·W_a, so dL/dW_self = qᵀ G W_a,topᵀ.
        let cfg = SgnnConfig { lane_dim: 2, te_dim: 2, embed_hidden: 2, adapter_bias: false, ..SgnnConfig::default() };
        let mut p = SgnnParams::init(&cfg, &mut Rng::new(0));
        p.w_ll[2] = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.25, 2.0]], 0).unwrap();
        p.adapter.weight = DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4], vec![0.0, 0.0], vec![0.0, 0.0]], 0).unwrap();
        let q_l = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.25]], 0).unwrap();
        let q_t = DenseMatrix::from_rows(&[vec![0.1, 0.2]], 0).unwrap();
        let state = LayerState::initial(2, 1);
        let (_, cache) = sgnn_layer(&q_l, &q_t, &state, &p, Variant::Skg, Activation::Relu).unwrap();
        let g_up = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]], 0).unwrap();
        let grads = sgnn_backward(&cache, &p, &g_up, None, None).unwrap();
        let wa_top = DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]], 0).unwrap();
        let expect_w = q_l.t_matmul(&g_up.matmul_t(&wa_top).unwrap()).unwrap();
        assert!(max_diff(&grads.params.w_ll[2], &expect_w) < 1e-14);
        let expect_q = g_up.add(&g_up.matmul_t(&wa_top).unwrap().matmul_t(&p.w_ll[2]).unwrap()).unwrap();
        assert!(max_diff(&grads.q_l, &expect_q) < 1e-14);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_config();
        for variant in [Variant::Sg, Variant::Skg] {
            // Draw instances until no ReLU input sits within reach of the step.
            let (p, q_l, q_t, state, g_l, g_t) = (0u64..)
                .map(|s| {
                    let mut rng = Rng::new(21 + s);
                    let p = SgnnParams::init(&cfg, &mut rng);
                    let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
                    let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
                    let state = random_state(&mut rng, 3, 2, 1);
                    let g_l = random(&mut rng, 3, 5, -1.0, 1.0);
                    let g_t = random(&mut rng, 2, 4, -1.0, 1.0);
                    (p, q_l, q_t, state, g_l, g_t)
                })
                .find(|(p, ql, qt, st, _, _)| {
                    sgnn_layer(ql, qt, st, p, variant, Activation::Relu).unwrap().1.kink_margin() > 1e-4
                })
                .unwrap();
            let objective = |p: &SgnnParams, ql: &DenseMatrix, qt: &DenseMatrix| {
                let (o, _) = sgnn_layer(ql, qt, &state, p, variant, Activation::Relu).unwrap();
                o.q_l_tilde.hadamard(&g_l).unwrap().sum() + o.q_t_tilde.hadamard(&g_t).unwrap().sum()
            };
            let (_, cache) = sgnn_layer(&q_l, &q_t, &state, &p, variant, Activation::Relu).unwrap();
            let grads = sgnn_backward(&cache, &p, &g_l, Some(&g_t), None).unwrap();
            let eps = 1e-6;
            for (m, dm, is_lane) in [(&q_l, &grads.q_l, true), (&q_t, &grads.q_t, false)] {
                for k in 0..m.data().len() {
                    let mut plus = m.clone();
                    plus.data_mut()[k] += eps;
                    let mut minus = m.clone();
                    minus.data_mut()[k] -= eps;
                    let (fp, fm) = if is_lane {
                        (objective(&p, &plus, &q_t), objective(&p, &minus, &q_t))
                    } else {
                        (objective(&p, &q_l, &plus), objective(&p, &q_l, &minus))
                    };
                    let fd = (fp - fm) / (2.0 * eps);
                    assert!((fd - dm.data()[k]).abs() < 1e-7, "{variant:?} input {k}");
                }
            }
            let mut analytic = Vec::new();
            grads.params.visit("", &mut |_, _, d| analytic.extend_from_slice(d));
            let mut probe = p.clone();
            for (k, an) in analytic.iter().enumerate() {
                let bump = |q: &mut SgnnParams, delta: f64| {
                    let mut i = 0;
                    q.visit_mut("", &mut |_, _, d| {
                        for v in d.iter_mut() {
                            if i == k {
                                *v += delta;
                            }
                            i += 1;
                        }
                    });
                };
                bump(&mut probe, eps);
                let fp = objective(&probe, &q_l, &q_t);
                bump(&mut probe, -2.0 * eps);
                let fm = objective(&probe, &q_l, &q_t);
                bump(&mut probe, eps);
                assert!(((fp - fm) / (2.0 * eps) - an).abs() < 1e-7, "{variant:?} param {k}");
            }
        }
    }

    #[test]
    fn run_stack_feeds_state_forward() {
        let cfg = small_config();
        let mut rng = Rng::new(12);
        let layers: Vec<SgnnParams> = (0..3).map(|_| SgnnParams::init(&cfg, &mut rng)).collect();
        let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
        let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
        let fixed = random_state(&mut rng, 3, 2, 0);
        let mut seen = Vec::new();
        let outs = run_stack(&q_l, &q_t, &layers, Variant::Skg, Activation::Relu, LayerState::initial(3, 2), |i, _| {
            seen.push(i);
            Ok(fixed.clone())
        })
        .unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(seen, vec![0, 1]);
        let mut s1 = fixed.clone();
        s1.layer_index = 1;
        let (o1, _) = sgnn_layer(&outs[0].q_l_tilde, &q_t, &s1, &layers[1], Variant::Skg, Activation::Relu).unwrap();
        assert_eq!(o1.q_l_tilde, outs[1].q_l_tilde);
    }

    fn permute(m: &DenseMatrix, perm: &[usize], rows: bool, cols: bool) -> DenseMatrix {
        DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| {
            let r = if rows { perm[i] } else { i };
            let c = if cols { perm[j] } else { j };
            m.get(r, c)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, shift in 1usize..4) {
            let mut rng = Rng::new(seed);
            let p = SgnnParams::init(&small_config(), &mut rng);
            let q_l = random(&mut rng, 4, 5, -1.0, 1.0);
            let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
            let state = random_state(&mut rng, 4, 2, 1);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let pstate = LayerState {
                a_ll: permute(&state.a_ll, &perm, true, true),
                a_lt: permute(&state.a_lt, &perm, true, false),
                ..state.clone()
            };
            for variant in [Variant::Sg, Variant::Skg] {
                let (o, _) = sgnn_layer(&q_l, &q_t, &state, &p, variant, Activation::Relu).unwrap();
                let (po, _) = sgnn_layer(&permute(&q_l, &perm, true, false), &q_t, &pstate, &p, variant, Activation::Relu).unwrap();
                prop_assert!(max_diff(&permute(&o.q_l_tilde, &perm, true, false), &po.q_l_tilde) < 1e-12);
            }
        }

        #[test]
        fn isolated_lane_is_local(seed in 0u64..1000, other in 1usize..4, delta in -1.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let p = SgnnParams::init(&small_config(), &mut rng);
            let q_l = random(&mut rng, 4, 5, -1.0, 1.0);
            let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
            let mut state = random_state(&mut rng, 4, 2, 1);
            for j in 0..4 {
                state.a_ll.set(0, j, 0.0);
                state.a_ll.set(j, 0, 0.0);
            }
            for j in 0..2 {
                state.a_lt.set(0, j, 0.0);
            }
            let (o, _) = sgnn_layer(&q_l, &q_t, &state, &p, Variant::Skg, Activation::Relu).unwrap();
            let mut q2 = q_l.clone();
            for f in 0..5 {
                q2.set(other, f, q2.get(other, f) + delta);
            }
            let q_t2 = q_t.map(|v| v + delta);
            let (o2, _) = sgnn_layer(&q2, &q_t2, &state, &p, Variant::Skg, Activation::Relu).unwrap();
            prop_assert_eq!(o.q_l_tilde.row(0), o2.q_l_tilde.row(0));
        }

        #[test]
        fn propagation_is_linear_in_beta(seed in 0u64..1000, b in 0.0f64..1.0) {
            let mut rng = Rng::new(seed);
            let p = SgnnParams::init(&small_config(), &mut rng);
            let q_l = random(&mut rng, 3, 5, -1.0, 1.0);
            let q_t = random(&mut rng, 2, 4, -1.0, 1.0);
            let state = random_state(&mut rng, 3, 2, 1);
            let qt = embed_te(&q_t, &p).unwrap();
            // Non-self part of each propagation, with identity σ.
            let sg = |beta: f64| {
                let t_ll = build_t_ll(&state.a_ll, beta, 1).unwrap();
                let ll = gcn_propagate(&q_l, &t_ll, &p.gcn_ll, Activation::Identity).unwrap()
                    .add(&q_l.matmul(&p.gcn_ll).unwrap().scale(-1.0)).unwrap();
                let lt = gcn_propagate(&qt, &build_t_lt(&state.a_lt, beta, 1), &p.gcn_lt, Activation::Identity).unwrap();
                (ll, lt)
            };
            let skg = |beta: f64| {
                let ll = skg_ll_propagate(&q_l, &state, &p.w_ll, beta).unwrap()
                    .add(&q_l.matmul(&p.w_ll[2]).unwrap().scale(-1.0)).unwrap();
                (ll, skg_lt_propagate(&qt, &state, &p.w_lt, beta).unwrap())
            };
            for f in [&sg as &dyn Fn(f64) -> (DenseMatrix, DenseMatrix), &skg] {
                let (ll1, lt1) = f(1.0);
                let (llb, ltb) = f(b);
                prop_assert!(max_diff(&ll1.scale(b), &llb) < 1e-12);
                prop_assert!(max_diff(&lt1.scale(b), &ltb) < 1e-12);
            }
        }
    }
}
