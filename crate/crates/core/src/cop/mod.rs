//! Chain-of-prediction attribute estimator and its ablation variants.
//!
//! A trunk maps observation features to a query `q`. Class, 2D box and
//! projected center are always read from `q`. Size, angle and depth each
//! have an AttributeNet (`Linear -> ReLU -> Linear`, width preserving) whose
//! output feeds the attribute's head. How those features are formed depends
//! on [`Variant`]:
//!
//! * `Baseline` / `Htl`: every head reads `q`.
//! * `Parallel`: head `k` reads `q + A_k(q)`; nets see only the query.
//! * `CoopEmbed`: head `k` reads `q + e_k` with a learned embedding `e_k`.
//! * `Cop`: features are chained in the configured order,
//!   `f_k = A_k(f_prev) (+ f_prev when residual)`, starting from `f_prev = q`.
//!
//! Attributes outside the configured set read `q` directly in every variant.

pub mod decode;
mod htl;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::micronet::layers::{self, Gradients, Layer, LinearGrad, LinearLayer, Trace};
use crate::micronet::{Matrix, MicronetError, Rng};

pub use decode::{AttributePrediction, Decoder, RawOutputs, CLASS_LOGITS, NUM_CLASSES};
pub use htl::{htl_stage_mask, LossMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CopError {
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] MicronetError),
}

pub type Result<T> = std::result::Result<T, CopError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attribute {
    Size,
    Angle,
    Depth,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Size, Attribute::Angle, Attribute::Depth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Attribute::Size => 'S',
            Attribute::Angle => 'A',
            Attribute::Depth => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'S' => Some(Attribute::Size),
            'A' => Some(Attribute::Angle),
            'D' => Some(Attribute::Depth),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Size => "size",
            Attribute::Angle => "angle",
            Attribute::Depth => "depth",
        }
    }
}

/// Parses an attribute sequence such as `S,A,D` or `SAD`.
pub fn parse_attributes(text: &str) -> Result<Vec<Attribute>> {
    let mut out = Vec::new();
    for c in text.chars().filter(|c| !c.is_whitespace() && *c != ',' && *c != '>') {
        let attr = Attribute::from_letter(c)
            .ok_or_else(|| CopError::InvalidConfig(format!("unknown attribute '{c}' in {text:?}")))?;
        out.push(attr);
    }
    Ok(out)
}

pub fn format_attributes(attrs: &[Attribute]) -> String {
    attrs.iter().map(|a| a.letter().to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Parallel,
    Cop,
    CoopEmbed,
    Htl,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Parallel => "parallel",
            Variant::Cop => "cop",
            Variant::CoopEmbed => "coop_embed",
            Variant::Htl => "htl",
        }
    }

    fn uses_attribute_nets(self) -> bool {
        matches!(self, Variant::Parallel | Variant::Cop)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CopError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Variant::Baseline),
            "parallel" => Ok(Variant::Parallel),
            "cop" => Ok(Variant::Cop),
            "coop_embed" | "coop" => Ok(Variant::CoopEmbed),
            "htl" => Ok(Variant::Htl),
            other => Err(CopError::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    /// Attributes in prediction order.
    pub attributes: Vec<Attribute>,
    pub residual: bool,
    pub chain_count: usize,
    pub variant: Variant,
    pub query_dim: usize,
    /// Hidden width of each AttributeNet.
    pub hidden_dim: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            attributes: Attribute::ALL.to_vec(),
            residual: true,
            chain_count: 1,
            variant: Variant::Cop,
            query_dim: 64,
            hidden_dim: 64,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(CopError::InvalidConfig("attribute list is empty".into()));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].contains(a) {
                return Err(CopError::InvalidConfig(format!(
                    "attribute {} listed twice",
                    a.letter()
                )));
            }
        }
        if !(1..=3).contains(&self.chain_count) {
            return Err(CopError::InvalidConfig(format!(
                "chain count {} not in 1..=3",
                self.chain_count
            )));
        }
        if self.query_dim == 0 || self.hidden_dim == 0 {
            return Err(CopError::InvalidConfig("zero width".into()));
        }
        Ok(())
    }

    pub fn contains(&self, a: Attribute) -> bool {
        self.attributes.contains(&a)
    }

    /// Short comma-free label such as `cop[SAD]+res`.
    pub fn label(&self) -> String {
        let letters: String = self.attributes.iter().map(|a| a.letter()).collect();
        let mut s = format!("{}[{letters}]", self.variant);
        if self.variant == Variant::Cop {
            s.push_str(if self.residual { "+res" } else { "-res" });
        }
        if self.chain_count > 1 {
            s.push_str(&format!("x{}", self.chain_count));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub trunk_hidden: usize,
    pub dropout: f64,
    pub bias: bool,
    pub chain: ChainConfig,
    pub decoder: Decoder,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        if self.input_dim == 0 || self.trunk_hidden == 0 {
            return Err(CopError::InvalidConfig("zero trunk width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CopError::InvalidConfig(format!("dropout {}", self.dropout)));
        }
        if !(self.decoder.depth_scale > 0.0) {
            return Err(CopError::InvalidConfig("depth scale must be positive".into()));
        }
        Ok(())
    }
}

/// Width-preserving two-layer MLP with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeNet {
    pub layers: Vec<Layer>,
}

impl AttributeNet {
    pub fn new(width: usize, hidden: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            layers: layers::two_layer(width, hidden, width, bias, rng),
        }
    }

    pub fn from_weights(first: LinearLayer, second: LinearLayer) -> Self {
        Self {
            layers: vec![Layer::Linear(first), Layer::Relu, Layer::Linear(second)],
        }
    }

    pub fn forward(&self, q: &Matrix) -> Result<Matrix> {
        Ok(layers::infer(&self.layers, q)?)
    }

    pub fn first_mut(&mut self) -> &mut LinearLayer {
        match &mut self.layers[0] {
            Layer::Linear(l) => l,
            _ => unreachable!(),
        }
    }

    pub fn second_mut(&mut self) -> &mut LinearLayer {
        match &mut self.layers[2] {
            Layer::Linear(l) => l,
            _ => unreachable!(),
        }
    }

    /// Zeroes the output layer, making the net output identically zero.
    pub fn zero_output(&mut self) {
        let l = self.second_mut();
        l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        l.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Output heads; each is a single linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub class: LinearLayer,
    pub box2d: LinearLayer,
    pub center: LinearLayer,
    pub size: LinearLayer,
    pub angle: LinearLayer,
    pub depth: LinearLayer,
}

impl Heads {
    fn new(d: usize, bias: bool, rng: &mut Rng) -> Self {
        Self {
            class: LinearLayer::new(d, CLASS_LOGITS, bias, rng),
            box2d: LinearLayer::new(d, 4, bias, rng),
            center: LinearLayer::new(d, 2, bias, rng),
            size: LinearLayer::new(d, 3, bias, rng),
            angle: LinearLayer::new(d, 2, bias, rng),
            depth: LinearLayer::new(d, 1, bias, rng),
        }
    }

    fn all(&self) -> [&LinearLayer; 6] {
        [&self.class, &self.box2d, &self.center, &self.size, &self.angle, &self.depth]
    }

    fn all_mut(&mut self) -> [&mut LinearLayer; 6] {
        [
            &mut self.class,
            &mut self.box2d,
            &mut self.center,
            &mut self.size,
            &mut self.angle,
            &mut self.depth,
        ]
    }

    pub fn attribute(&self, a: Attribute) -> &LinearLayer {
        match a {
            Attribute::Size => &self.size,
            Attribute::Angle => &self.angle,
            Attribute::Depth => &self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopModel {
    pub config: ModelConfig,
    pub trunk: Vec<Layer>,
    pub heads: Heads,
    /// One AttributeNet triple (indexed by [`Attribute::index`]) per chain.
    pub chains: Vec<[AttributeNet; 3]>,
    /// Additive per-attribute embeddings used by [`Variant::CoopEmbed`].
    pub embeddings: [Vec<f64>; 3],
}

/// Per-chain intermediate values.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub nets: [Option<Trace>; 3],
    /// Head input per attribute.
    pub features: [Matrix; 3],
}

#[derive(Debug, Clone)]
pub struct CopTrace {
    pub trunk: Trace,
    pub chains: Vec<ChainTrace>,
}

impl CopTrace {
    pub fn query(&self) -> &Matrix {
        &self.trunk.output
    }
}

/// Gradients mirroring [`CopModel`]'s structure.
#[derive(Debug, Clone)]
pub struct CopGrads {
    pub trunk: Gradients,
    pub heads: [LinearGrad; 6],
    pub chains: Vec<[Option<Gradients>; 3]>,
    pub embeddings: [Vec<f64>; 3],
}

impl CopModel {
    /// Components are drawn in a fixed order (trunk, heads, three chains of
    /// nets), so equal seeds give equal shared weights across variants.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.chain.query_dim;
        let trunk = vec![
            Layer::Linear(LinearLayer::new(config.input_dim, config.trunk_hidden, config.bias, rng)),
            Layer::Relu,
            Layer::Dropout(config.dropout),
            Layer::Linear(LinearLayer::new(config.trunk_hidden, d, config.bias, rng)),
        ];
        let heads = Heads::new(d, config.bias, rng);
        let all_chains: Vec<[AttributeNet; 3]> = (0..3)
            .map(|_| {
                std::array::from_fn(|_| AttributeNet::new(d, config.chain.hidden_dim, config.bias, rng))
            })
            .collect();
        let chains = all_chains.into_iter().take(config.chain.chain_count).collect();
        Ok(Self {
            trunk,
            heads,
            chains,
            embeddings: std::array::from_fn(|_| vec![0.0; d]),
            config,
        })
    }

    pub fn chain_config(&self) -> &ChainConfig {
        &self.config.chain
    }

    fn active_chains(&self) -> usize {
        if self.config.chain.variant.uses_attribute_nets() {
            self.chains.len()
        } else {
            1
        }
    }

    /// Query vectors for a batch of observation features.
    pub fn query(&self, x: &Matrix) -> Result<Matrix> {
        Ok(layers::infer(&self.trunk, x)?)
    }

    /// Attribute features of one chain given queries `q`.
    pub fn chain_forward(&self, chain: usize, q: &Matrix) -> Result<ChainTrace> {
        let cfg = &self.config.chain;
        if q.cols() != cfg.query_dim {
            return Err(MicronetError::ShapeMismatch(format!(
                "query width {} but model expects {}",
                q.cols(),
                cfg.query_dim
            ))
            .into());
        }
        let mut nets: [Option<Trace>; 3] = [None, None, None];
        let mut features: [Matrix; 3] = std::array::from_fn(|_| q.clone());
        let mut unused = Rng::new(0);
        match cfg.variant {
            Variant::Baseline | Variant::Htl => {}
            Variant::CoopEmbed => {
                for &a in &cfg.attributes {
                    features[a.index()].add_row_broadcast(&self.embeddings[a.index()])?;
                }
            }
            Variant::Parallel => {
                for &a in &cfg.attributes {
                    let t = layers::forward(&self.chains[chain][a.index()].layers, q, false, &mut unused)?;
                    features[a.index()].add_assign(&t.output)?;
                    nets[a.index()] = Some(t);
                }
            }
            Variant::Cop => {
                let mut prev = q.clone();
                for &a in &cfg.attributes {
                    let t = layers::forward(&self.chains[chain][a.index()].layers, &prev, false, &mut unused)?;
                    let mut f = t.output.clone();
                    if cfg.residual {
                        f.add_assign(&prev)?;
                    }
                    nets[a.index()] = Some(t);
                    features[a.index()] = f.clone();
                    prev = f;
                }
            }
        }
        Ok(ChainTrace { nets, features })
    }

    pub fn forward(&self, x: &Matrix, train_mode: bool, rng: &mut Rng) -> Result<(RawOutputs, CopTrace)> {
        let trunk = layers::forward(&self.trunk, x, train_mode, rng)?;
        let q = &trunk.output;
        let chains: Vec<ChainTrace> = (0..self.active_chains())
            .map(|c| self.chain_forward(c, q))
            .collect::<Result<_>>()?;
        let scale = 1.0 / chains.len() as f64;
        let averaged = |a: Attribute| -> Result<Matrix> {
            let head = self.heads.attribute(a);
            let mut acc = head.forward(&chains[0].features[a.index()])?;
            for c in &chains[1..] {
                acc.add_assign(&head.forward(&c.features[a.index()])?)?;
            }
            if chains.len() > 1 {
                acc.scale(scale);
            }
            Ok(acc)
        };
        let raw = RawOutputs {
            class: self.heads.class.forward(q)?,
            box2d: self.heads.box2d.forward(q)?,
            center: self.heads.center.forward(q)?,
            size: averaged(Attribute::Size)?,
            angle: averaged(Attribute::Angle)?,
            depth: averaged(Attribute::Depth)?,
        };
        Ok((raw, CopTrace { trunk, chains }))
    }

    /// Evaluation-mode forward pass.
    pub fn predict_raw(&self, x: &Matrix) -> Result<RawOutputs> {
        Ok(self.forward(x, false, &mut Rng::new(0))?.0)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<AttributePrediction>> {
        Ok(self.config.decoder.decode(&self.predict_raw(x)?))
    }

    pub fn backward(&self, trace: &CopTrace, grad: &RawOutputs) -> Result<CopGrads> {
        let cfg = &self.config.chain;
        let q = trace.query();
        if grad.rows() != q.rows() {
            return Err(MicronetError::ShapeMismatch("gradient rows vs batch".into()).into());
        }
        let mut head_grads: [LinearGrad; 6] = std::array::from_fn(|i| LinearGrad::zeros_like(self.heads.all()[i]));
        let (g, mut grad_q) = self.heads.class.backward(q, &grad.class)?;
        head_grads[0] = g;
        for (slot, (head, upstream)) in [(1, (&self.heads.box2d, &grad.box2d)), (2, (&self.heads.center, &grad.center))] {
            let (g, dq) = head.backward(q, upstream)?;
            head_grads[slot] = g;
            grad_q.add_assign(&dq)?;
        }

        let chain_scale = 1.0 / trace.chains.len() as f64;
        let mut chain_grads: Vec<[Option<Gradients>; 3]> = Vec::with_capacity(trace.chains.len());
        let mut embed_grads: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; cfg.query_dim]);
        for (c, ct) in trace.chains.iter().enumerate() {
            let mut feature_grads: Vec<Matrix> = Vec::with_capacity(3);
            for a in Attribute::ALL {
                let mut upstream = match a {
                    Attribute::Size => grad.size.clone(),
                    Attribute::Angle => grad.angle.clone(),
                    Attribute::Depth => grad.depth.clone(),
                };
                if trace.chains.len() > 1 {
                    upstream.scale(chain_scale);
                }
                let (g, df) = self.heads.attribute(a).backward(&ct.features[a.index()], &upstream)?;
                head_grads[3 + a.index()].accumulate(&g)?;
                feature_grads.push(df);
            }
            let mut net_grads: [Option<Gradients>; 3] = [None, None, None];
            for a in Attribute::ALL {
                if !cfg.contains(a) {
                    grad_q.add_assign(&feature_grads[a.index()])?;
                }
            }
            match cfg.variant {
                Variant::Baseline | Variant::Htl => {
                    for &a in &cfg.attributes {
                        grad_q.add_assign(&feature_grads[a.index()])?;
                    }
                }
                Variant::CoopEmbed => {
                    for &a in &cfg.attributes {
                        let df = &feature_grads[a.index()];
                        grad_q.add_assign(df)?;
                        for (e, s) in embed_grads[a.index()].iter_mut().zip(df.column_sums()) {
                            *e += s;
                        }
                    }
                }
                Variant::Parallel => {
                    for &a in &cfg.attributes {
                        let t = ct.nets[a.index()].as_ref().expect("parallel trace");
                        let df = &feature_grads[a.index()];
                        let g = layers::backward(&self.chains[c][a.index()].layers, t, df)?;
                        grad_q.add_assign(&g.input)?;
                        grad_q.add_assign(df)?;
                        net_grads[a.index()] = Some(g);
                    }
                }
                Variant::Cop => {
                    let mut carry = Matrix::zeros(q.rows(), cfg.query_dim);
                    for &a in cfg.attributes.iter().rev() {
                        let mut g_f = feature_grads[a.index()].clone();
                        g_f.add_assign(&carry)?;
                        let t = ct.nets[a.index()].as_ref().expect("chain trace");
                        let g = layers::backward(&self.chains[c][a.index()].layers, t, &g_f)?;
                        carry = g.input.clone();
                        if cfg.residual {
                            carry.add_assign(&g_f)?;
                        }
                        net_grads[a.index()] = Some(g);
                    }
                    grad_q.add_assign(&carry)?;
                }
            }
            chain_grads.push(net_grads);
        }
        let trunk = layers::backward(&self.trunk, &trace.trunk, &grad_q)?;
        Ok(CopGrads {
            trunk,
            heads: head_grads,
            chains: chain_grads,
            embeddings: embed_grads,
        })
    }

    /// Which (chain, attribute) nets carry trainable parameters.
    fn trainable_nets(&self) -> Vec<(usize, Attribute)> {
        let cfg = &self.config.chain;
        if !cfg.variant.uses_attribute_nets() {
            return Vec::new();
        }
        (0..self.chains.len())
            .flat_map(|c| {
                Attribute::ALL
                    .into_iter()
                    .filter(|a| cfg.contains(*a))
                    .map(move |a| (c, a))
            })
            .collect()
    }

    fn trainable_embeddings(&self) -> Vec<Attribute> {
        if self.config.chain.variant == Variant::CoopEmbed {
            Attribute::ALL
                .into_iter()
                .filter(|a| self.config.chain.contains(*a))
                .collect()
        } else {
            Vec::new()
        }
    }

    /// Trainable tensors in canonical order: trunk, heads (class, box2d,
    /// center, size, angle, depth), attribute nets per chain in S, A, D
    /// order, embeddings.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = layers::params(&self.trunk);
        for h in self.heads.all() {
            out.extend(h.params());
        }
        for (c, a) in self.trainable_nets() {
            out.extend(layers::params(&self.chains[c][a.index()].layers));
        }
        for a in self.trainable_embeddings() {
            out.push(&self.embeddings[a.index()]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let nets = self.trainable_nets();
        let embeds = self.trainable_embeddings();
        let mut out = layers::params_mut(&mut self.trunk);
        for h in self.heads.all_mut() {
            out.extend(h.params_mut());
        }
        let mut chain_refs: Vec<Vec<Option<&mut AttributeNet>>> = self
            .chains
            .iter_mut()
            .map(|triple| triple.iter_mut().map(Some).collect())
            .collect();
        for (c, a) in nets {
            let net = chain_refs[c][a.index()].take().expect("each net listed once");
            out.extend(layers::params_mut(&mut net.layers));
        }
        let mut embed_refs: Vec<Option<&mut Vec<f64>>> = self.embeddings.iter_mut().map(Some).collect();
        for a in embeds {
            out.push(embed_refs[a.index()].take().expect("each embedding listed once"));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = layers::param_shapes(&self.trunk);
        for h in self.heads.all() {
            out.extend(h.param_shapes());
        }
        for (c, a) in self.trainable_nets() {
            out.extend(layers::param_shapes(&self.chains[c][a.index()].layers));
        }
        for a in self.trainable_embeddings() {
            out.push((1, self.embeddings[a.index()].len()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Flattens gradients in the order of [`CopModel::params`].
    pub fn flatten_grads(&self, grads: &CopGrads) -> Vec<Vec<f64>> {
        let mut out = grads.trunk.flatten(&self.trunk);
        for (h, g) in self.heads.all().iter().zip(&grads.heads) {
            g.flatten_into(h, &mut out);
        }
        for (c, a) in self.trainable_nets() {
            let g = grads.chains[c][a.index()].as_ref().expect("gradient for trainable net");
            out.extend(g.flatten(&self.chains[c][a.index()].layers));
        }
        for a in self.trainable_embeddings() {
            out.push(grads.embeddings[a.index()].clone());
        }
        out
    }
}

#[cfg(test)]
mod tests;
