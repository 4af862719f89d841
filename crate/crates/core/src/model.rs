//! The refinement stack wired end to end: SGNN layers, heads, feedback of
//! predicted adjacencies, and the single-layer loss with its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{detection_backward, detection_heads, topology_head_backward, topology_head_cached, HeadConfig, HeadParams};
use crate::loss::{loss_backward, loss_kink_margin, FrameMatching, LayerPrediction, LossBreakdown, LossConfig};
use crate::matrix::DenseMatrix;
use crate::nn::{join, Activation, Params};
use crate::rng::Rng;
use crate::scene::FrameGraph;
use crate::sgnn::{run_stack, sgnn_backward, sgnn_layer, LayerOutput, LayerState, SgnnConfig, SgnnParams, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub sgnn: SgnnConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    /// Head input widths follow the SGNN widths.
    pub fn aligned(mut self) -> Self {
        self.heads.lane_dim = self.sgnn.lane_dim;
        self.heads.te_dim = self.sgnn.te_dim;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<SgnnParams>,
    pub heads: HeadParams,
    pub variant: Variant,
    pub activation: Activation,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.sgnn.validate()?;
        let config = config.clone().aligned();
        let mut rng = Rng::new(seed);
        let layers = (0..config.sgnn.layers.max(1)).map(|_| SgnnParams::init(&config.sgnn, &mut rng)).collect();
        let heads = HeadParams::init(&config.heads, &mut rng);
        Ok(Self { layers, heads, variant: config.sgnn.variant, activation: config.sgnn.activation })
    }

    /// Runs every layer. Layer `i > 0` is fed the topology and attribute
    /// predictions of layer `i − 1`.
    pub fn run(&self, q_l: &DenseMatrix, q_t: &DenseMatrix) -> Result<Vec<(LayerOutput, LayerPrediction)>> {
        let initial = LayerState::initial(q_l.rows(), q_t.rows());
        self.run_from(q_l, q_t, initial, true)
    }

    /// Runs every layer with a fixed adjacency/score state after layer 0
    /// (`feedback = false`) or with head feedback (`feedback = true`).
    pub fn run_from(&self, q_l: &DenseMatrix, q_t: &DenseMatrix, initial: LayerState, feedback: bool) -> Result<Vec<(LayerOutput, LayerPrediction)>> {
        let fixed = initial.clone();
        let outputs = run_stack(q_l, q_t, &self.layers, self.variant, self.activation, initial, |_, out| {
            if feedback {
                Ok(self.predict(out)?.state())
            } else {
                Ok(fixed.clone())
            }
        })?;
        outputs
            .into_iter()
            .map(|o| {
                let p = self.predict(&o)?;
                Ok((o, p))
            })
            .collect()
    }

    pub fn predict(&self, out: &LayerOutput) -> Result<LayerPrediction> {
        let (det, _) = detection_heads(&out.q_l_tilde, &out.q_t, &self.heads)?;
        let conf_ll = topology_head_cached(&out.q_l_tilde, &out.q_l_tilde, &self.heads.topo_ll)?.confidence().clone();
        let conf_lt = topology_head_cached(&out.q_l_tilde, &out.q_t_tilde, &self.heads.topo_lt)?.confidence().clone();
        Ok(LayerPrediction { det, conf_ll, conf_lt })
    }
}

impl LayerPrediction {
    /// Feedback state for the next layer (`layer_index` set by the caller).
    pub fn state(&self) -> LayerState {
        LayerState {
            a_ll: self.conf_ll.clone(),
            a_lt: self.conf_lt.clone(),
            s_t: self.det.te_scores.transpose(),
            layer_index: 1,
        }
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("sgnn.{i}")), f);
        }
        self.heads.visit(&join(prefix, "heads"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("sgnn.{i}")), f);
        }
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

/// One layer plus heads plus loss, with the gradient with respect to every
/// parameter and both query sets.
#[derive(Debug, Clone)]
pub struct ChainGrads {
    pub loss: LossBreakdown,
    pub sgnn: SgnnParams,
    pub heads: HeadParams,
    pub q_l: DenseMatrix,
    pub q_t: DenseMatrix,
    pub a_ll: DenseMatrix,
    pub a_lt: DenseMatrix,
    pub s_t: DenseMatrix,
    /// Smallest distance from a non-differentiable point over the whole chain.
    pub kink_margin: f64,
}

pub struct ChainInput<'a> {
    pub q_l: &'a DenseMatrix,
    pub q_t: &'a DenseMatrix,
    pub state: &'a LayerState,
    pub gt: &'a FrameGraph,
    pub matching: &'a FrameMatching,
    pub loss: &'a LossConfig,
}

pub fn chain_loss(sgnn: &SgnnParams, heads: &HeadParams, variant: Variant, activation: Activation, input: &ChainInput) -> Result<f64> {
    let (out, _) = sgnn_layer(input.q_l, input.q_t, input.state, sgnn, variant, activation)?;
    let (det, _) = detection_heads(&out.q_l_tilde, &out.q_t, heads)?;
    let conf_ll = topology_head_cached(&out.q_l_tilde, &out.q_l_tilde, &heads.topo_ll)?.confidence().clone();
    let conf_lt = topology_head_cached(&out.q_l_tilde, &out.q_t_tilde, &heads.topo_lt)?.confidence().clone();
    let pred = LayerPrediction { det, conf_ll, conf_lt };
    Ok(crate::loss::total_loss(&pred, input.gt, input.matching, input.loss)?.total)
}

pub fn chain_grad(sgnn: &SgnnParams, heads: &HeadParams, variant: Variant, activation: Activation, input: &ChainInput) -> Result<ChainGrads> {
    let (out, scache) = sgnn_layer(input.q_l, input.q_t, input.state, sgnn, variant, activation)?;
    let (det, dcache) = detection_heads(&out.q_l_tilde, &out.q_t, heads)?;
    let tll = topology_head_cached(&out.q_l_tilde, &out.q_l_tilde, &heads.topo_ll)?;
    let tlt = topology_head_cached(&out.q_l_tilde, &out.q_t_tilde, &heads.topo_lt)?;
    let pred = LayerPrediction { det, conf_ll: tll.confidence().clone(), conf_lt: tlt.confidence().clone() };
    let (loss, lg) = loss_backward(&pred, input.gt, input.matching, input.loss)?;

    let mut hg = heads.zeros_like();
    let (mut d_ql, d_qt_pass) = detection_backward(&dcache, &pred.det, heads, &lg.det, &mut hg)?;
    let gll = topology_head_backward(&tll, &heads.topo_ll, &lg.logits_ll, &mut hg.topo_ll)?;
    let glt = topology_head_backward(&tlt, &heads.topo_lt, &lg.logits_lt, &mut hg.topo_lt)?;
    d_ql.add_assign(&gll.q_a)?;
    d_ql.add_assign(&gll.q_b)?;
    d_ql.add_assign(&glt.q_a)?;
    let sg = sgnn_backward(&scache, sgnn, &d_ql, Some(&glt.q_b), Some(&d_qt_pass))?;

    let extent = heads.bev_range.extent();
    let kink_margin = scache
        .kink_margin()
        .min(dcache.kink_margin())
        .min(tll.kink_margin())
        .min(tlt.kink_margin())
        .min(loss_kink_margin(&pred, input.gt, input.matching, extent));
    Ok(ChainGrads {
        loss,
        sgnn: sg.params,
        heads: hg,
        q_l: sg.q_l,
        q_t: sg.q_t,
        a_ll: sg.a_ll,
        a_lt: sg.a_lt,
        s_t: sg.s_t,
        kink_margin,
    })
}

/// Checks that a model's layer and head widths agree.
pub fn check_model(model: &Model) -> Result<()> {
    let Some(first) = model.layers.first() else {
        return Err(Error::Config("model has no layers".into()));
    };
    for l in &model.layers {
        l.check_shapes()?;
        if l.lane_dim() != first.lane_dim() || l.te_dim() != first.te_dim() {
            return Err(Error::Config("layers disagree on feature widths".into()));
        }
    }
    if model.heads.lc_reg.input_dim() != first.lane_dim() || model.heads.te_cls.input_dim() != first.te_dim() {
        return Err(Error::Config("head input widths differ from the layer widths".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            sgnn: SgnnConfig { lane_dim: 6, te_dim: 5, embed_hidden: 7, layers: 3, ..SgnnConfig::default() },
            heads: HeadConfig { hidden: Some(7), topo_dim: 4, ..HeadConfig::default() },
        }
    }

    #[test]
    fn run_feeds_topology_back() {
        let model = Model::init(&small(), 4).unwrap();
        check_model(&model).unwrap();
        let mut rng = Rng::new(1);
        let q_l = DenseMatrix::from_fn(4, 6, |_, _| rng.uniform_in(-1.0, 1.0));
        let q_t = DenseMatrix::from_fn(3, 5, |_, _| rng.uniform_in(-1.0, 1.0));
        let outs = model.run(&q_l, &q_t).unwrap();
        assert_eq!(outs.len(), 3);
        // Layer 1 must equal a direct call fed with layer 0's predictions.
        let mut s = outs[0].1.state();
        s.layer_index = 1;
        let (o1, _) = sgnn_layer(&outs[0].0.q_l_tilde, &q_t, &s, &model.layers[1], model.variant, model.activation).unwrap();
        assert_eq!(o1.q_l_tilde, outs[1].0.q_l_tilde);
        for (_, p) in &outs {
            assert!(p.conf_ll.data().iter().all(|&c| c > 0.0 && c < 1.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(Model::init(&small(), 9).unwrap(), Model::init(&small(), 9).unwrap());
        assert_ne!(Model::init(&small(), 9).unwrap(), Model::init(&small(), 10).unwrap());
    }
}
