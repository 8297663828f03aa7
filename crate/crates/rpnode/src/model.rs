//! Model variants and the shared episode forward graph.
//!
//! Every consumer (training, evaluation, attacks) builds the same graph: all
//! images are tape leaves, support features flow through the encoder and the
//! ODE block, prototypes come from clean masked pooling, and each query ends
//! in a cosine-softmax probability map plus its cross-entropy. Input
//! gradients for attacks and parameter gradients for training then come from
//! one backward pass over that graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{encode_on_tape, EncoderConfig, EncoderParams, EncoderVars, ImageTensor};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::losses::cross_entropy_on_tape;
use crate::ode::{integrate_on_tape, ConvDynamics, ConvDynamicsVars, Dynamics, SolverConfig, ZeroDynamics};
use crate::protoseg::{
    argmax_mask, build_prototype_matrix, predict_on_tape, prototype_set, upsample_features, MaskTensor,
    ProbabilityMap, PrototypeSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Full model: ODE block plus cluster and consistency regularization.
    Rpnode,
    /// ODE block but clean cross-entropy only.
    RpnodeNoLosses,
    /// Encoder only, cross-entropy only.
    VanillaCnn,
    /// Full training recipe but the ODE block is frozen at zero dynamics.
    IdentityOde,
    /// Encoder-only backbone trained with standard adversarial training.
    Sat,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Rpnode,
        ModelVariant::RpnodeNoLosses,
        ModelVariant::VanillaCnn,
        ModelVariant::IdentityOde,
        ModelVariant::Sat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Rpnode => "rpnode",
            ModelVariant::RpnodeNoLosses => "rpnode_no_losses",
            ModelVariant::VanillaCnn => "vanilla_cnn",
            ModelVariant::IdentityOde => "identity_ode",
            ModelVariant::Sat => "sat",
        }
    }

    /// Whether training draws Gaussian companions and applies the auxiliary
    /// losses for this variant.
    pub fn uses_companions(self) -> bool {
        matches!(self, ModelVariant::Rpnode | ModelVariant::IdentityOde)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

/// What sits between the encoder and the prototype head.
#[derive(Clone, Debug, PartialEq)]
pub enum OdeBlock {
    /// Nothing; encoder features go straight to pooling.
    None,
    /// A zero-dynamics solve; numerically the identity map.
    Identity,
    Learned(ConvDynamics),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FssModel {
    pub variant: ModelVariant,
    pub encoder_cfg: EncoderConfig,
    pub encoder: EncoderParams,
    pub ode: OdeBlock,
    pub solver: SolverConfig,
    pub temperature: f64,
}

impl FssModel {
    /// Fresh model with seeded parameters. The ODE block kind follows the
    /// variant; `time_conditioning` only matters for learned dynamics.
    pub fn new(
        variant: ModelVariant,
        encoder_cfg: &EncoderConfig,
        solver: &SolverConfig,
        time_conditioning: bool,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        solver.validate()?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let encoder = crate::encoder::init_params(encoder_cfg, seed)?;
        let ode = match variant {
            ModelVariant::Rpnode | ModelVariant::RpnodeNoLosses => {
                OdeBlock::Learned(ConvDynamics::init(encoder_cfg.feature_dim(), time_conditioning, seed))
            }
            ModelVariant::IdentityOde => OdeBlock::Identity,
            ModelVariant::VanillaCnn | ModelVariant::Sat => OdeBlock::None,
        };
        Ok(FssModel {
            variant,
            encoder_cfg: encoder_cfg.clone(),
            encoder,
            ode,
            solver: *solver,
            temperature,
        })
    }

    /// Stable name/tensor listing, encoder stages first, then dynamics layers.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.stages.iter().enumerate() {
            out.push((format!("encoder.{i}.kernel"), &layer.kernel));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        if let OdeBlock::Learned(d) = &self.ode {
            for (i, layer) in d.layers.iter().enumerate() {
                out.push((format!("dynamics.{i}.kernel"), &layer.kernel));
                out.push((format!("dynamics.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.stages.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.kernel"), &mut layer.kernel));
            out.push((format!("encoder.{i}.bias"), &mut layer.bias));
        }
        if let OdeBlock::Learned(d) = &mut self.ode {
            for (i, layer) in d.layers.iter_mut().enumerate() {
                out.push((format!("dynamics.{i}.kernel"), &mut layer.kernel));
                out.push((format!("dynamics.{i}.bias"), &mut layer.bias));
            }
        }
        out
    }

    pub fn attach<'m>(&'m self, tape: &mut Tape) -> AttachedModel<'m> {
        let encoder = self.encoder.attach(tape);
        let dynamics = match &self.ode {
            OdeBlock::Learned(d) => Some(d.attach(tape)),
            _ => None,
        };
        let mut names = Vec::new();
        for (i, &(k, b)) in encoder.stages.iter().enumerate() {
            names.push((format!("encoder.{i}.kernel"), k));
            names.push((format!("encoder.{i}.bias"), b));
        }
        if let Some(d) = &dynamics {
            for (i, &(k, b)) in d.layers.iter().enumerate() {
                names.push((format!("dynamics.{i}.kernel"), k));
                names.push((format!("dynamics.{i}.bias"), b));
            }
        }
        AttachedModel { model: self, encoder, dynamics, names }
    }

    /// Checks an image against the encoder's divisibility requirement.
    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let f = self.encoder_cfg.downsample_factor;
        if image.height() % f != 0 || image.width() % f != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by the encoder downsample factor {f}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// Model parameters registered on a tape, ready to build episode graphs.
pub struct AttachedModel<'m> {
    pub model: &'m FssModel,
    pub encoder: EncoderVars,
    pub dynamics: Option<ConvDynamicsVars>,
    /// Parameter name to leaf var mapping, in [`FssModel::named_params`] order.
    pub names: Vec<(String, Var)>,
}

impl AttachedModel<'_> {
    /// Encoder plus ODE block: `[1, h, w]` image var to `[d, h/f, w/f]`
    /// terminal features.
    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let z = encode_on_tape(tape, &self.encoder, image);
        match &self.model.ode {
            OdeBlock::None => Ok(z),
            OdeBlock::Identity => integrate_on_tape(tape, &ZeroDynamics, z, &self.model.solver),
            OdeBlock::Learned(_) => {
                let dynamics = self.dynamics.as_ref().expect("learned block was attached");
                integrate_on_tape(tape, dynamics as &dyn Dynamics, z, &self.model.solver)
            }
        }
    }

    /// Registers an image and runs it to terminal features.
    /// Returns `(leaf, features)`.
    pub fn image_features(&self, tape: &mut Tape, image: &ImageTensor) -> Result<(Var, Var)> {
        self.model.check_image(image)?;
        let leaf = tape.leaf(image.to_input());
        let z = self.features(tape, leaf)?;
        Ok((leaf, z))
    }
}

/// One query branch hanging off shared prototypes.
pub struct QueryBranch {
    pub leaf: Var,
    pub probs: Var,
    pub ce: Var,
}

/// Adds a query image to the graph: features, upsampling, prediction against
/// `protos`, and cross-entropy against `gt`.
pub fn add_query_branch(
    tape: &mut Tape,
    attached: &AttachedModel<'_>,
    protos: Var,
    class_ids: &[u8],
    image: &ImageTensor,
    gt: &MaskTensor,
) -> Result<QueryBranch> {
    let (leaf, z) = attached.image_features(tape, image)?;
    let up = upsample_features(tape, z, gt.height(), gt.width())?;
    let probs = predict_on_tape(tape, up, protos, attached.model.temperature);
    let ce = cross_entropy_on_tape(tape, probs, class_ids, gt)?;
    Ok(QueryBranch { leaf, probs, ce })
}

/// The full clean-episode graph.
pub struct EpisodeGraph<'m> {
    pub tape: Tape,
    pub attached: AttachedModel<'m>,
    pub support_leaves: Vec<Var>,
    /// Terminal support features, before upsampling; cluster-loss anchors.
    pub support_features: Vec<Var>,
    /// Background plus foreground classes, ascending.
    pub class_ids: Vec<u8>,
    pub protos: Var,
    pub queries: Vec<QueryBranch>,
    /// Mean cross-entropy over the query branches.
    pub query_ce: Var,
}

/// Builds the episode graph from explicit parts. Support masks must cover
/// every episode class across the shots; query masks provide the targets.
pub fn build_episode_graph<'m>(
    model: &'m FssModel,
    support_images: &[ImageTensor],
    support_masks: &[&MaskTensor],
    query_images: &[ImageTensor],
    query_masks: &[&MaskTensor],
    class_set: &[u8],
) -> Result<EpisodeGraph<'m>> {
    if support_images.len() != support_masks.len() || support_images.is_empty() {
        return Err(Error::Config("episode graph needs matching, non-empty support images and masks".into()));
    }
    if query_images.len() != query_masks.len() || query_images.is_empty() {
        return Err(Error::Config("episode graph needs matching, non-empty query images and masks".into()));
    }
    let mut tape = Tape::new();
    let attached = model.attach(&mut tape);

    let mut support_leaves = Vec::with_capacity(support_images.len());
    let mut support_features = Vec::with_capacity(support_images.len());
    let mut upsampled = Vec::with_capacity(support_images.len());
    for (img, mask) in support_images.iter().zip(support_masks) {
        let (leaf, z) = attached.image_features(&mut tape, img)?;
        let up = upsample_features(&mut tape, z, mask.height(), mask.width())?;
        support_leaves.push(leaf);
        support_features.push(z);
        upsampled.push(up);
    }
    let (class_ids, protos) = build_prototype_matrix(&mut tape, &upsampled, support_masks, class_set)?;

    let mut queries = Vec::with_capacity(query_images.len());
    for (img, gt) in query_images.iter().zip(query_masks) {
        queries.push(add_query_branch(&mut tape, &attached, protos, &class_ids, img, gt)?);
    }
    let mut ce = queries[0].ce;
    for q in &queries[1..] {
        ce = tape.add(ce, q.ce);
    }
    let query_ce = tape.div_scalar(ce, queries.len() as f64);

    Ok(EpisodeGraph {
        tape,
        attached,
        support_leaves,
        support_features,
        class_ids,
        protos,
        queries,
        query_ce,
    })
}

/// Convenience: graph for a sampled [`Episode`].
pub fn episode_graph<'m>(model: &'m FssModel, episode: &Episode) -> Result<EpisodeGraph<'m>> {
    let support_images: Vec<ImageTensor> = episode.support.iter().map(|(i, _)| i.clone()).collect();
    let support_masks: Vec<&MaskTensor> = episode.support.iter().map(|(_, m)| m).collect();
    let query_images: Vec<ImageTensor> = episode.query.iter().map(|(i, _)| i.clone()).collect();
    let query_masks: Vec<&MaskTensor> = episode.query.iter().map(|(_, m)| m).collect();
    build_episode_graph(model, &support_images, &support_masks, &query_images, &query_masks, &episode.class_set)
}

/// Value-level episode forward: per-query probability maps and predictions,
/// plus the pooled prototypes.
#[derive(Clone, Debug)]
pub struct EpisodeForward {
    pub prototypes: PrototypeSet,
    pub probability_maps: Vec<ProbabilityMap>,
    pub predictions: Vec<MaskTensor>,
    pub query_ce: f64,
}

pub fn forward_episode(model: &FssModel, episode: &Episode) -> Result<EpisodeForward> {
    let graph = episode_graph(model, episode)?;
    let prototypes = prototype_set(&graph.tape, &graph.class_ids, graph.protos);
    let mut probability_maps = Vec::with_capacity(graph.queries.len());
    let mut predictions = Vec::with_capacity(graph.queries.len());
    for q in &graph.queries {
        let map = ProbabilityMap::new(graph.class_ids.clone(), graph.tape.value(q.probs).clone())?;
        predictions.push(argmax_mask(&map));
        probability_maps.push(map);
    }
    Ok(EpisodeForward {
        prototypes,
        probability_maps,
        predictions,
        query_ce: graph.tape.value(graph.query_ce).item(),
    })
}
