use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::adapters::{
    param_count, Adapter, ConvLoRA, ConvMetaCPAdapter, ConvMetaTRAdapter, MatrixLoRA,
    MetaCPAdapter, MetaTRAdapter,
};
use crate::autograd::{Tape, Var};
use crate::meta_net::{
    extract_features, mapping_forward, Activation, ExtractorKind, FeatureExtractor, MappingNet,
};
use crate::tensor::{contract, conv2d_forward, global_avg_pool, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelGeometry {
    /// Square conv kernel size `K` (odd, so same padding is symmetric).
    pub kernel: usize,
    /// Conv output channels `F`, which is also the embedding width.
    pub filters: usize,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self {
            kernel: 3,
            filters: 8,
        }
    }
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(TrainingError::Config("geometry.kernel must be odd".into()));
        }
        if self.filters == 0 {
            return Err(TrainingError::Config("geometry.filters must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen toy base: `conv (K×K×I×F, stride 1, same padding) → tanh →
/// global average pool → linear head (F×N) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub conv: DenseTensor,
    pub head: DenseTensor,
    pub bias: DenseTensor,
}

impl BaseModel {
    pub fn init<R: Rng + ?Sized>(
        geometry: &ModelGeometry,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let (k, f) = (geometry.kernel, geometry.filters);
        Self {
            conv: DenseTensor::randn(&[k, k, channels, f], 1.0 / ((k * k * channels) as f64).sqrt(), rng),
            head: DenseTensor::randn(&[f, classes], 1.0 / (f as f64).sqrt(), rng),
            bias: DenseTensor::zeros(&[classes]),
        }
    }

    pub fn new(conv: DenseTensor, head: DenseTensor, bias: DenseTensor) -> Result<Self, TrainingError> {
        let ok = conv.order() == 4
            && conv.shape()[0] == conv.shape()[1]
            && conv.shape()[0] % 2 == 1
            && head.order() == 2
            && head.shape()[0] == conv.shape()[3]
            && bias.shape() == [head.shape()[1]];
        if !ok {
            return Err(TrainingError::Config(format!(
                "base weights {:?} / {:?} / {:?} do not form conv → pool → head",
                conv.shape(),
                head.shape(),
                bias.shape()
            )));
        }
        Ok(Self { conv, head, bias })
    }

    pub fn kernel(&self) -> usize {
        self.conv.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.conv.shape()[2]
    }

    pub fn filters(&self) -> usize {
        self.conv.shape()[3]
    }

    pub fn classes(&self) -> usize {
        self.head.shape()[1]
    }

    pub fn padding(&self) -> usize {
        (self.kernel() - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// The frozen base, no adaptation.
    Original,
    Lora,
    /// One independent LoRA set per task, routed by the true task id.
    MultiLora,
    MetaCp,
    MetaTr,
}

impl VariantKind {
    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Original => "Original",
            VariantKind::Lora => "LoRA",
            VariantKind::MultiLora => "Multi-LoRA (per-task)",
            VariantKind::MetaCp => "MetaLoRA (CP)",
            VariantKind::MetaTr => "MetaLoRA (TR)",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, VariantKind::MetaCp | VariantKind::MetaTr)
    }
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    #[serde(default)]
    pub rank: usize,
    #[serde(default = "yes")]
    pub adapt_conv: bool,
    #[serde(default = "yes")]
    pub adapt_head: bool,
    #[serde(default = "one")]
    pub scale: f64,
    /// Display name; defaults to the kind's label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl VariantSpec {
    pub fn new(kind: VariantKind, rank: usize) -> Self {
        Self {
            kind,
            rank,
            adapt_conv: true,
            adapt_head: true,
            scale: 1.0,
            name: None,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.kind == VariantKind::Original {
            return Ok(());
        }
        if self.rank == 0 {
            return Err(TrainingError::Config(format!("{}: rank must be positive", self.display_name())));
        }
        if !(self.adapt_conv || self.adapt_head) {
            return Err(TrainingError::Config(format!(
                "{}: adapts neither the conv layer nor the head",
                self.display_name()
            )));
        }
        if !self.scale.is_finite() {
            return Err(TrainingError::Config(format!("{}: scale must be finite", self.display_name())));
        }
        Ok(())
    }
}

/// How a Meta adapter's seed is formed from a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Every input gets its own seed.
    #[default]
    PerSample,
    /// Inputs in a batch that share a route share the mean of their seeds.
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingSpec {
    /// Hidden widths; `None` means one hidden layer of width `2·R`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    pub activation: Activation,
    /// One net per route emitting the seeds of both adapted layers,
    /// instead of one net per layer.
    pub shared: bool,
    pub seed_mode: SeedMode,
}

impl Default for MappingSpec {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Tanh,
            shared: false,
            seed_mode: SeedMode::PerSample,
        }
    }
}

impl MappingSpec {
    pub fn hidden_layers(&self, rank: usize) -> Vec<(usize, Activation)> {
        match &self.hidden {
            Some(widths) => widths.iter().map(|&w| (w, self.activation)).collect(),
            None => vec![(2 * rank, self.activation)],
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return Err(TrainingError::Config("mapping.hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    /// Pooled-conv feature count (ignored for raw flattening).
    pub features: usize,
    /// Pooled-conv kernel size.
    pub kernel: usize,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::PooledConv,
            features: 8,
            kernel: 3,
        }
    }
}

impl ExtractorSpec {
    pub fn build<R: Rng + ?Sized>(&self, input: [usize; 3], rng: &mut R) -> FeatureExtractor {
        match self.kind {
            ExtractorKind::RawFlatten => FeatureExtractor::raw_flatten(input[0], input[1], input[2]),
            ExtractorKind::PooledConv => {
                FeatureExtractor::random_pooled_conv(self.kernel, input[2], self.features, rng)
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.kind == ExtractorKind::PooledConv
            && (self.features == 0 || self.kernel == 0 || self.kernel.is_multiple_of(2))
        {
            return Err(TrainingError::Config(
                "extractor: pooled_conv needs positive features and an odd kernel".into(),
            ));
        }
        Ok(())
    }
}

/// One adapted weight: its adapter plus, for Meta adapters with a
/// per-layer mapping net, the net producing its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    pub adapter: Adapter,
    pub mapping: Option<MappingNet>,
}

impl AdaptedLayer {
    fn params(&self) -> Vec<&DenseTensor> {
        let mut out = vec![self.adapter.factor_a(), self.adapter.factor_b()];
        if let Some(net) = &self.mapping {
            out.extend(net.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out: Vec<&mut DenseTensor> = self.adapter.factors_mut().into_iter().collect();
        if let Some(net) = &mut self.mapping {
            out.extend(net.params_mut());
        }
        out
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = vec![format!("{prefix}.A"), format!("{prefix}.B")];
        if let Some(net) = &self.mapping {
            out.extend(net_names(net, prefix));
        }
        out
    }
}

fn net_names(net: &MappingNet, prefix: &str) -> Vec<String> {
    (0..net.layers().len())
        .flat_map(|k| [format!("{prefix}.map.W{k}"), format!("{prefix}.map.b{k}")])
        .collect()
}

/// The adapters applied for one routing key. With a shared mapping net,
/// its output is the flattened conv seed followed by the head seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Route {
    pub conv: Option<AdaptedLayer>,
    pub head: Option<AdaptedLayer>,
    pub shared_mapping: Option<MappingNet>,
}

type Seeds<T> = [Option<T>; 2];

impl Route {
    fn layers(&self) -> impl Iterator<Item = &AdaptedLayer> {
        self.conv.iter().chain(self.head.iter())
    }

    fn slots(&self) -> [Option<&AdaptedLayer>; 2] {
        [self.conv.as_ref(), self.head.as_ref()]
    }

    fn nets(&self) -> impl Iterator<Item = &MappingNet> {
        self.layers().filter_map(|l| l.mapping.as_ref()).chain(self.shared_mapping.iter())
    }

    fn params(&self) -> Vec<&DenseTensor> {
        let mut out: Vec<&DenseTensor> = self.layers().flat_map(|l| l.params()).collect();
        if let Some(net) = &self.shared_mapping {
            out.extend(net.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out: Vec<&mut DenseTensor> =
            self.conv.iter_mut().chain(self.head.iter_mut()).flat_map(|l| l.params_mut()).collect();
        if let Some(net) = &mut self.shared_mapping {
            out.extend(net.params_mut());
        }
        out
    }

    /// `(offset, shape)` of each layer's seed within the shared net output.
    fn shared_layout(&self) -> Seeds<(usize, Vec<usize>)> {
        let mut offset = 0;
        self.slots().map(|l| {
            let shape = l?.adapter.seed_shape()?;
            let start = offset;
            offset += shape.iter().product::<usize>();
            Some((start, shape))
        })
    }

    /// Seeds of this route's Meta layers for input `x`.
    fn seeds(&self, x: &DenseTensor, extractor: &FeatureExtractor) -> Result<Seeds<DenseTensor>, TrainingError> {
        if self.nets().next().is_none() {
            return Ok([None, None]);
        }
        let f = extract_features(x, extractor)?;
        if let Some(net) = &self.shared_mapping {
            let out = mapping_forward(net, &f)?;
            let mut seeds = [None, None];
            for (s, entry) in self.shared_layout().into_iter().enumerate() {
                if let Some((start, shape)) = entry {
                    let n = shape.iter().product::<usize>();
                    seeds[s] = Some(DenseTensor::new(shape, out.data()[start..start + n].to_vec())?);
                }
            }
            return Ok(seeds);
        }
        let mut seeds = [None, None];
        for (s, l) in self.slots().into_iter().enumerate() {
            if let Some(net) = l.and_then(|l| l.mapping.as_ref()) {
                seeds[s] = Some(mapping_forward(net, &f)?);
            }
        }
        Ok(seeds)
    }
}

/// All trainable state of one variant. Static and Meta variants use one
/// route; Multi-LoRA uses one per task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSet {
    pub kind: VariantKind,
    pub seed_mode: SeedMode,
    pub routes: Vec<Route>,
}

impl AdaptationSet {
    pub fn original() -> Self {
        Self {
            kind: VariantKind::Original,
            seed_mode: SeedMode::PerSample,
            routes: Vec::new(),
        }
    }

    /// Fresh adapters with `B = 0`. Mapping nets start with their final
    /// bias at the all-ones seed (CP) or the identity seed (TR), so a Meta
    /// adapter begins at its static-LoRA operating point.
    pub fn init<R: Rng + ?Sized>(
        spec: &VariantSpec,
        base: &BaseModel,
        tasks: usize,
        mapping: &MappingSpec,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self, TrainingError> {
        spec.validate()?;
        mapping.validate()?;
        let (k, i, f, n, r) = (base.kernel(), base.channels(), base.filters(), base.classes(), spec.rank);
        let hidden = mapping.hidden_layers(r);
        let shared = mapping.shared && spec.kind.is_meta();
        let seed_bias = |shape: &[usize]| {
            if shape.len() == 1 {
                DenseTensor::ones(shape)
            } else {
                DenseTensor::identity(shape[0])
            }
        };
        let net = |seed_shape: &[usize], bias: &DenseTensor, rng: &mut R| -> Result<MappingNet, TrainingError> {
            Ok(MappingNet::init(feature_dim, &hidden, seed_shape, rng).with_output_bias(bias)?)
        };
        let layer = |adapter: Adapter, rng: &mut R| -> Result<AdaptedLayer, TrainingError> {
            let mapping = match adapter.seed_shape() {
                Some(shape) if !shared => Some(net(&shape, &seed_bias(&shape), rng)?),
                _ => None,
            };
            Ok(AdaptedLayer { adapter, mapping })
        };
        let route = |rng: &mut R| -> Result<Route, TrainingError> {
            let conv = if spec.adapt_conv {
                let adapter = match spec.kind {
                    VariantKind::Lora | VariantKind::MultiLora => Adapter::ConvLora(ConvLoRA::init(k, i, f, r, rng)),
                    VariantKind::MetaCp => Adapter::ConvMetaCp(ConvMetaCPAdapter::init(k, i, f, r, rng)),
                    VariantKind::MetaTr => Adapter::ConvMetaTr(ConvMetaTRAdapter::init(k, i, f, r, rng)),
                    VariantKind::Original => unreachable!("original has no routes"),
                };
                Some(layer(adapter, rng)?)
            } else {
                None
            };
            let head = if spec.adapt_head {
                let adapter = match spec.kind {
                    VariantKind::Lora | VariantKind::MultiLora => Adapter::MatrixLora(MatrixLoRA::init(f, n, r, rng)),
                    VariantKind::MetaCp => Adapter::MetaCp(MetaCPAdapter::init(f, n, r, rng)),
                    VariantKind::MetaTr => Adapter::MetaTr(MetaTRAdapter::init(f, n, r, rng)),
                    VariantKind::Original => unreachable!("original has no routes"),
                };
                Some(layer(adapter, rng)?)
            } else {
                None
            };
            let mut route = Route { conv, head, shared_mapping: None };
            for layer in route.conv.iter_mut().chain(route.head.iter_mut()) {
                layer.adapter.set_scale(spec.scale);
            }
            if shared {
                let mut bias = Vec::new();
                for shape in route.slots().into_iter().flatten().filter_map(|l| l.adapter.seed_shape()) {
                    bias.extend_from_slice(seed_bias(&shape).data());
                }
                let len = bias.len();
                route.shared_mapping = Some(net(&[len], &DenseTensor::vector(&bias), rng)?);
            }
            Ok(route)
        };
        let count = match spec.kind {
            VariantKind::Original => 0,
            VariantKind::MultiLora => tasks,
            _ => 1,
        };
        let routes = (0..count).map(|_| route(rng)).collect::<Result<_, _>>()?;
        Ok(Self {
            kind: spec.kind,
            seed_mode: mapping.seed_mode,
            routes,
        })
    }

    /// Route serving samples of `task`.
    pub fn route(&self, task: usize) -> Option<&Route> {
        match self.routes.len() {
            0 => None,
            1 => Some(&self.routes[0]),
            _ => self.routes.get(task),
        }
    }

    fn route_index(&self, task: usize) -> Result<Option<usize>, TrainingError> {
        match self.routes.len() {
            0 => Ok(None),
            1 => Ok(Some(0)),
            n if task < n => Ok(Some(task)),
            n => Err(TrainingError::Config(format!("task {task} has no route among {n}"))),
        }
    }

    /// Trainable tensors in a fixed order: per route, conv then head, each
    /// as `A, B, W0, b0, ...`, then the route's shared net if any.
    pub fn params(&self) -> Vec<&DenseTensor> {
        self.routes.iter().flat_map(Route::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.routes.iter_mut().flat_map(Route::params_mut).collect()
    }

    /// Names matching [`params`](Self::params), e.g. `route0.conv.map.W1`
    /// or `route0.map.b0` for a shared net.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (ri, r) in self.routes.iter().enumerate() {
            if let Some(l) = &r.conv {
                out.extend(l.param_names(&format!("route{ri}.conv")));
            }
            if let Some(l) = &r.head {
                out.extend(l.param_names(&format!("route{ri}.head")));
            }
            if let Some(net) = &r.shared_mapping {
                out.extend(net_names(net, &format!("route{ri}")));
            }
        }
        out
    }

    /// Adapter-factor parameters, the quantity budgets are matched on.
    pub fn param_count(&self) -> usize {
        self.routes.iter().flat_map(|r| r.layers()).map(|l| param_count(&l.adapter)).sum()
    }

    pub fn mapping_param_count(&self) -> usize {
        self.routes.iter().flat_map(|r| r.nets()).map(MappingNet::param_count).sum()
    }

    pub fn has_mapping(&self) -> bool {
        self.routes.iter().any(|r| r.nets().next().is_some())
    }
}

/// `logsumexp(z) − z[label]`.
pub fn cross_entropy(logits: &DenseTensor, label: usize) -> f64 {
    let z = logits.data();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[label]
}

/// Replaces each seed by the mean over the batch members sharing its route.
fn batch_mean<T: Clone>(
    routes: &[Option<usize>],
    seeds: &mut [Seeds<T>],
    mut add: impl FnMut(&T, &T) -> Result<T, TrainingError>,
    mut scale: impl FnMut(&T, f64) -> T,
) -> Result<(), TrainingError> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in routes.iter().enumerate() {
        if let Some(r) = r {
            groups.entry(*r).or_default().push(i);
        }
    }
    for members in groups.values() {
        for slot in 0..2 {
            let Some(first) = seeds[members[0]][slot].clone() else { continue };
            let mut sum = first;
            for &m in &members[1..] {
                let s = seeds[m][slot].as_ref().expect("same route, same seeds");
                sum = add(&sum, s)?;
            }
            let mean = scale(&sum, 1.0 / members.len() as f64);
            for &m in members {
                seeds[m][slot] = Some(mean.clone());
            }
        }
    }
    Ok(())
}

/// Straight-line evaluation of a batch without a tape: materializes
/// `W + Δ` with the adapters' own delta functions. Returns
/// `(logits, embedding)` per input.
pub fn forward_reference_batch(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    batch: &[(&DenseTensor, usize)],
) -> Result<Vec<(DenseTensor, DenseTensor)>, TrainingError> {
    let routes = batch.iter().map(|&(_, t)| set.route_index(t)).collect::<Result<Vec<_>, _>>()?;
    let mut seeds = batch
        .iter()
        .zip(&routes)
        .map(|(&(x, _), r)| match r {
            Some(r) => set.routes[*r].seeds(x, extractor),
            None => Ok([None, None]),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if set.seed_mode == SeedMode::BatchMean {
        batch_mean(&routes, &mut seeds, |a, b| Ok(a.add(b)?), |a, s| a.scale(s))?;
    }
    let mut out = Vec::with_capacity(batch.len());
    for ((&(x, _), r), seed) in batch.iter().zip(&routes).zip(&seeds) {
        let layers = r.map(|r| set.routes[r].slots()).unwrap_or([None, None]);
        let effective = |w: &DenseTensor, slot: usize| -> Result<DenseTensor, TrainingError> {
            match layers[slot] {
                Some(l) => Ok(w.add(&l.adapter.delta(seed[slot].as_ref())?)?),
                None => Ok(w.clone()),
            }
        };
        let conv = effective(&base.conv, 0)?;
        let head = effective(&base.head, 1)?;
        let maps = conv2d_forward(x, &conv, 1, base.padding())?.map(f64::tanh);
        let embedding = global_avg_pool(&maps)?;
        let logits = contract(&embedding, &head, &[(0, 0)])?.add(&base.bias)?;
        out.push((logits, embedding));
    }
    Ok(out)
}

/// Single-input [`forward_reference_batch`].
pub fn forward_reference(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    x: &DenseTensor,
    task: usize,
) -> Result<(DenseTensor, DenseTensor), TrainingError> {
    Ok(forward_reference_batch(base, set, extractor, &[(x, task)])?.remove(0))
}

/// Tape-recorded forward pass, returning the recorded values.
pub fn forward_adapted(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    x: &DenseTensor,
    task: usize,
) -> Result<(DenseTensor, DenseTensor), TrainingError> {
    let mut tape = Tape::new();
    let mut model = TapeModel::new(&mut tape, base, set, extractor)?;
    let (logits, emb) = model.forward(&mut tape, x, task)?;
    Ok((tape.value(logits).clone(), tape.value(emb).clone()))
}

struct LayerVars {
    a: Var,
    b: Var,
    map: Vec<Var>,
}

#[derive(Default)]
struct RouteVars {
    layers: [Option<LayerVars>; 2],
    shared: Vec<Var>,
}

/// Binds an adaptation set's parameters to a tape (ids in
/// [`AdaptationSet::params`] order) and records batch forwards.
/// Effective weights of static layers are built once and shared.
pub(crate) struct TapeModel<'a> {
    base: &'a BaseModel,
    set: &'a AdaptationSet,
    extractor: &'a FeatureExtractor,
    weights: [Var; 2],
    bias: Var,
    vars: Vec<RouteVars>,
    cached: Vec<[Option<Var>; 2]>,
}

impl<'a> TapeModel<'a> {
    pub(crate) fn new(
        tape: &mut Tape,
        base: &'a BaseModel,
        set: &'a AdaptationSet,
        extractor: &'a FeatureExtractor,
    ) -> Result<Self, TrainingError> {
        let weights = [tape.constant(base.conv.clone()), tape.constant(base.head.clone())];
        let bias = tape.constant(base.bias.clone());
        let mut id = 0;
        let mut next = |tape: &mut Tape, t: &DenseTensor| {
            id += 1;
            tape.param(id - 1, t.clone())
        };
        let mut vars = Vec::with_capacity(set.routes.len());
        for r in &set.routes {
            let mut rv = RouteVars::default();
            for (s, l) in r.slots().into_iter().enumerate() {
                let Some(l) = l else { continue };
                let a = next(tape, l.adapter.factor_a())?;
                let b = next(tape, l.adapter.factor_b())?;
                let mut map = Vec::new();
                for p in l.mapping.iter().flat_map(MappingNet::params) {
                    map.push(next(tape, p)?);
                }
                rv.layers[s] = Some(LayerVars { a, b, map });
            }
            for p in r.shared_mapping.iter().flat_map(MappingNet::params) {
                rv.shared.push(next(tape, p)?);
            }
            vars.push(rv);
        }
        Ok(Self {
            base,
            set,
            extractor,
            weights,
            bias,
            cached: vec![[None, None]; vars.len()],
            vars,
        })
    }

    fn seeds(&self, tape: &mut Tape, r: usize, x: &DenseTensor) -> Result<Seeds<Var>, TrainingError> {
        let route = &self.set.routes[r];
        if route.nets().next().is_none() {
            return Ok([None, None]);
        }
        let f = tape.constant(extract_features(x, self.extractor)?);
        let mut seeds = [None, None];
        if let Some(net) = &route.shared_mapping {
            let out = tape_mapping(tape, net, &self.vars[r].shared, f)?;
            for (s, entry) in route.shared_layout().into_iter().enumerate() {
                if let Some((start, shape)) = entry {
                    let piece = tape.slice(out, start, shape.iter().product())?;
                    seeds[s] = Some(tape.reshape(piece, &shape)?);
                }
            }
            return Ok(seeds);
        }
        for (s, l) in route.slots().into_iter().enumerate() {
            if let (Some(net), Some(v)) = (l.and_then(|l| l.mapping.as_ref()), &self.vars[r].layers[s]) {
                seeds[s] = Some(tape_mapping(tape, net, &v.map, f)?);
            }
        }
        Ok(seeds)
    }

    fn weight(&mut self, tape: &mut Tape, slot: usize, route: Option<usize>, seed: Option<Var>) -> Result<Var, TrainingError> {
        let base = self.weights[slot];
        let Some(r) = route else { return Ok(base) };
        let (Some(layer), Some(vars)) = (self.set.routes[r].slots()[slot], &self.vars[r].layers[slot]) else {
            return Ok(base);
        };
        if let Some(w) = self.cached[r][slot] {
            return Ok(w);
        }
        let delta = tape_delta(tape, &layer.adapter, vars, seed)?;
        let w = tape.add(base, delta)?;
        if !layer.adapter.variant().is_meta() {
            self.cached[r][slot] = Some(w);
        }
        Ok(w)
    }

    /// Returns `(logits, embedding)` variables per input.
    pub(crate) fn forward_batch(
        &mut self,
        tape: &mut Tape,
        batch: &[(&DenseTensor, usize)],
    ) -> Result<Vec<(Var, Var)>, TrainingError> {
        let routes = batch.iter().map(|&(_, t)| self.set.route_index(t)).collect::<Result<Vec<_>, _>>()?;
        let mut seeds = Vec::with_capacity(batch.len());
        for (&(x, _), r) in batch.iter().zip(&routes) {
            seeds.push(match r {
                Some(r) => self.seeds(tape, *r, x)?,
                None => [None, None],
            });
        }
        if self.set.seed_mode == SeedMode::BatchMean {
            let cell = std::cell::RefCell::new(&mut *tape);
            batch_mean(
                &routes,
                &mut seeds,
                |a, b| Ok(cell.borrow_mut().add(*a, *b)?),
                |a, s| cell.borrow_mut().scale(*a, s),
            )?;
        }
        let mut out = Vec::with_capacity(batch.len());
        for ((&(x, _), &r), seed) in batch.iter().zip(&routes).zip(seeds) {
            let conv = self.weight(tape, 0, r, seed[0])?;
            let head = self.weight(tape, 1, r, seed[1])?;
            let xv = tape.constant(x.clone());
            let maps = tape.conv2d(xv, conv, 1, self.base.padding())?;
            let maps = tape.activate(maps, Activation::Tanh);
            let emb = tape.avg_pool(maps)?;
            let z = tape.contract(emb, head, &[(0, 0)])?;
            out.push((tape.add(z, self.bias)?, emb));
        }
        Ok(out)
    }

    pub(crate) fn forward(&mut self, tape: &mut Tape, x: &DenseTensor, task: usize) -> Result<(Var, Var), TrainingError> {
        Ok(self.forward_batch(tape, &[(x, task)])?[0])
    }
}

fn tape_mapping(tape: &mut Tape, net: &MappingNet, vars: &[Var], f: Var) -> Result<Var, TrainingError> {
    let mut h = f;
    for (k, layer) in net.layers().iter().enumerate() {
        let pre = tape.contract(vars[2 * k], h, &[(1, 0)])?;
        let pre = tape.add(pre, vars[2 * k + 1])?;
        h = tape.activate(pre, layer.activation);
    }
    Ok(tape.reshape(h, net.seed_shape())?)
}

/// The adapters' delta constructions expressed as tape operations.
fn tape_delta(
    tape: &mut Tape,
    adapter: &Adapter,
    v: &LayerVars,
    seed: Option<Var>,
) -> Result<Var, TrainingError> {
    let seed = || {
        seed.ok_or(TrainingError::Config(format!(
            "{:?} adapter has no mapping net",
            adapter.variant()
        )))
    };
    let raw = match adapter {
        Adapter::MatrixLora(_) => tape.contract(v.a, v.b, &[(1, 0)])?,
        Adapter::ConvLora(_) => tape.contract(v.a, v.b, &[(3, 0)])?,
        Adapter::MetaCp(_) => {
            let scaled = tape.mul_axis(v.a, seed()?, 1)?;
            tape.contract(scaled, v.b, &[(1, 0)])?
        }
        Adapter::ConvMetaCp(_) => {
            let scaled = tape.mul_axis(v.a, seed()?, 3)?;
            tape.contract(scaled, v.b, &[(3, 0)])?
        }
        Adapter::MetaTr(_) => {
            let ab = tape.contract(v.a, v.b, &[(2, 0)])?;
            tape.contract(ab, seed()?, &[(3, 0), (0, 1)])?
        }
        Adapter::ConvMetaTr(ad) => {
            let ab = tape.contract(v.a, v.b, &[(2, 0)])?;
            let m = tape.contract(ab, seed()?, &[(3, 0), (0, 1)])?;
            let (k, i, o) = ad.geometry();
            tape.reshape(m, &[k, k, i, o])?
        }
    };
    Ok(tape.scale(raw, adapter.scale()))
}
