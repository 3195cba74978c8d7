//! Model descriptions: the compiler's input format.
//!
//! A model is a JSON document listing layers (kind, named extents, optional
//! dataflow hint, pruning request and fuzzy extents), producer→consumer
//! edges, and the boundary layers. [`parse_model`] validates it into a
//! [`ModelGraph`]; [`classify_layers`] splits layers into predictable and
//! fuzzy ones.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Attention,
    MatMul,
    Conv2d,
    Linear,
    #[serde(rename = "GELU")]
    Gelu,
    Softmax,
    LayerNorm,
    ElementwiseAdd,
    TokenPrune,
    GnnAggregate,
    Embed,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Attention,
        LayerKind::MatMul,
        LayerKind::Conv2d,
        LayerKind::Linear,
        LayerKind::Gelu,
        LayerKind::Softmax,
        LayerKind::LayerNorm,
        LayerKind::ElementwiseAdd,
        LayerKind::TokenPrune,
        LayerKind::GnnAggregate,
        LayerKind::Embed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Attention => "Attention",
            LayerKind::MatMul => "MatMul",
            LayerKind::Conv2d => "Conv2d",
            LayerKind::Linear => "Linear",
            LayerKind::Gelu => "GELU",
            LayerKind::Softmax => "Softmax",
            LayerKind::LayerNorm => "LayerNorm",
            LayerKind::ElementwiseAdd => "ElementwiseAdd",
            LayerKind::TokenPrune => "TokenPrune",
            LayerKind::GnnAggregate => "GnnAggregate",
            LayerKind::Embed => "Embed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Kinds that emit per-token scores and may therefore carry a pruning request.
    pub fn produces_token_scores(self) -> bool {
        matches!(self, LayerKind::Attention | LayerKind::TokenPrune)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataflowHint {
    PreferWS,
    PreferOS,
    Auto,
}

/// Pruning request: either a fraction of tokens to drop or an absolute keep count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum PruneRequest {
    Rate { rate: f64 },
    Keep { keep: usize },
}

impl PruneRequest {
    /// Number of tokens kept out of `tokens`: `ceil((1 - p) * T)` for a rate,
    /// `min(k, T)` for a keep count. Never below one.
    pub fn kept(&self, tokens: usize) -> usize {
        let k = match *self {
            PruneRequest::Rate { rate } => kept_for_rate(rate, tokens),
            PruneRequest::Keep { keep } => keep.min(tokens),
        };
        k.max(1)
    }
}

/// `ceil((1 - p) * T)`, computed so that exact products (e.g. 0.7 * 197 = 137.9)
/// are not pushed over an integer boundary by binary rounding.
pub fn kept_for_rate(rate: f64, tokens: usize) -> usize {
    let exact = (1.0 - rate) * tokens as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Named extents in element counts.
    pub dims: BTreeMap<String, usize>,
    pub hint: Option<DataflowHint>,
    pub prune: Option<PruneRequest>,
    /// Dims whose values are only known at run time; the declared value is
    /// the compile-time estimate.
    pub fuzzy: BTreeSet<String>,
    /// Optional per-node degree list for graph layers.
    pub degrees: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.into(),
            kind,
            dims: BTreeMap::new(),
            hint: None,
            prune: None,
            fuzzy: BTreeSet::new(),
            degrees: None,
        }
    }

    pub fn dim(mut self, name: &str, value: usize) -> Self {
        self.dims.insert(name.to_string(), value);
        self
    }

    pub fn with_prune(mut self, prune: PruneRequest) -> Self {
        self.prune = Some(prune);
        self
    }

    pub fn with_fuzzy(mut self, dim: &str) -> Self {
        self.fuzzy.insert(dim.to_string());
        self
    }

    pub fn get(&self, dim: &str) -> Option<usize> {
        self.dims.get(dim).copied()
    }

    /// True when this layer's own output extent can change at run time.
    pub fn varies_at_runtime(&self) -> bool {
        !self.fuzzy.is_empty() || self.prune.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub edges: Vec<(String, String)>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerClass {
    Predictable,
    Fuzzy,
}

impl ModelGraph {
    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Predecessors of `id` in edge-declaration order (operand order matters
    /// for two-input layers).
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, d)| d == id)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(s, _)| s == id)
            .map(|(_, d)| d.as_str())
            .collect()
    }

    pub fn is_input(&self, id: &str) -> bool {
        self.inputs.iter().any(|i| i == id)
    }

    /// Kahn topological order; ties resolved by declaration order.
    pub fn topo_order(&self) -> Result<Vec<usize>, ModelError> {
        let n = self.layers.len();
        let index: BTreeMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect();
        let mut indeg = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for (s, d) in &self.edges {
            let si = *index
                .get(s.as_str())
                .ok_or_else(|| ModelError::DanglingEdge(s.clone()))?;
            let di = *index
                .get(d.as_str())
                .ok_or_else(|| ModelError::DanglingEdge(d.clone()))?;
            indeg[di] += 1;
            succ[si].push(di);
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).expect("cycle leaves a node");
            return Err(ModelError::Cycle(self.layers[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Checks every structural invariant of a model graph.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.id.as_str()) {
                return Err(ModelError::DuplicateLayer(l.id.clone()));
            }
            for dim in &l.fuzzy {
                if !l.dims.contains_key(dim) {
                    return Err(ModelError::UndeclaredFuzzy {
                        layer: l.id.clone(),
                        dim: dim.clone(),
                    });
                }
            }
            for (dim, &v) in &l.dims {
                if v == 0 {
                    return Err(ModelError::BadExtent {
                        layer: l.id.clone(),
                        dim: dim.clone(),
                        value: 0,
                    });
                }
            }
            if let Some(p) = l.prune {
                if !l.kind.produces_token_scores() {
                    return Err(ModelError::PruneNotAllowed { layer: l.id.clone() });
                }
                match p {
                    PruneRequest::Rate { rate } if !(0.0..1.0).contains(&rate) => {
                        return Err(ModelError::BadPrune {
                            layer: l.id.clone(),
                            reason: format!("rate {rate} outside [0, 1)"),
                        })
                    }
                    PruneRequest::Keep { keep: 0 } => {
                        return Err(ModelError::BadPrune {
                            layer: l.id.clone(),
                            reason: "keep count must be at least 1".into(),
                        })
                    }
                    _ => {}
                }
            }
        }
        for (s, d) in &self.edges {
            for end in [s, d] {
                if !seen.contains(end.as_str()) {
                    return Err(ModelError::DanglingEdge(end.clone()));
                }
            }
        }
        for b in self.inputs.iter().chain(&self.outputs) {
            if !seen.contains(b.as_str()) {
                return Err(ModelError::UnknownBoundary(b.clone()));
            }
        }
        self.topo_order()?;
        for l in &self.layers {
            let has_pred = self.edges.iter().any(|(_, d)| *d == l.id);
            match (self.is_input(&l.id), has_pred) {
                (true, true) => return Err(ModelError::InputWithPredecessor(l.id.clone())),
                (false, false) => return Err(ModelError::Orphan(l.id.clone())),
                _ => {}
            }
        }
        Ok(())
    }
}

// Raw document shapes; extents are signed so negative values produce a
// validation error rather than a type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    layers: Vec<RawLayer>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    outputs: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    id: String,
    kind: String,
    #[serde(default)]
    dims: BTreeMap<String, i64>,
    #[serde(default)]
    hint: Option<DataflowHint>,
    #[serde(default)]
    prune: Option<PruneRequest>,
    #[serde(default)]
    fuzzy: Vec<String>,
    #[serde(default)]
    degrees: Option<Vec<usize>>,
}

/// Parses and validates a model-description document.
pub fn parse_model(text: &str) -> Result<ModelGraph, ModelError> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| ModelError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut layers = Vec::with_capacity(raw.layers.len());
    for rl in raw.layers {
        let kind = LayerKind::from_name(&rl.kind).ok_or(ModelError::UnknownKind(rl.kind))?;
        let mut dims = BTreeMap::new();
        for (name, v) in rl.dims {
            if v <= 0 {
                return Err(ModelError::BadExtent {
                    layer: rl.id,
                    dim: name,
                    value: v,
                });
            }
            dims.insert(name, v as usize);
        }
        layers.push(LayerSpec {
            id: rl.id,
            kind,
            dims,
            hint: rl.hint,
            prune: rl.prune,
            fuzzy: rl.fuzzy.into_iter().collect(),
            degrees: rl.degrees,
        });
    }
    let graph = ModelGraph {
        name: raw.name,
        layers,
        edges: raw.edges,
        inputs: raw.inputs,
        outputs: raw.outputs,
    };
    graph.validate()?;
    Ok(graph)
}

/// Canonical serialization: sorted keys, layers and edges in declaration order.
pub fn render_model(g: &ModelGraph) -> String {
    let layers: Vec<Value> = g
        .layers
        .iter()
        .map(|l| {
            let mut obj = Map::new();
            obj.insert("id".into(), json!(l.id));
            obj.insert("kind".into(), json!(l.kind.name()));
            obj.insert("dims".into(), json!(l.dims));
            if let Some(h) = l.hint {
                obj.insert("hint".into(), json!(h));
            }
            if let Some(p) = l.prune {
                obj.insert("prune".into(), json!(p));
            }
            if !l.fuzzy.is_empty() {
                obj.insert("fuzzy".into(), json!(l.fuzzy));
            }
            if let Some(d) = &l.degrees {
                obj.insert("degrees".into(), json!(d));
            }
            Value::Object(obj)
        })
        .collect();
    let doc = json!({
        "name": g.name,
        "layers": layers,
        "edges": g.edges,
        "inputs": g.inputs,
        "outputs": g.outputs,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("model documents serialize");
    s.push('\n');
    s
}

/// Tags every layer as predictable or fuzzy.
///
/// A layer is fuzzy when it declares fuzzy extents itself, or when any
/// transitive predecessor can change its output extent at run time
/// (fuzzy extents or a pruning request).
pub fn classify_layers(g: &ModelGraph) -> BTreeMap<String, LayerClass> {
    let order = g.topo_order().expect("classify_layers requires a validated graph");
    // tainted[i]: some transitive predecessor of i varies at run time
    let mut tainted = vec![false; g.layers.len()];
    let mut out = BTreeMap::new();
    for i in order {
        let l = &g.layers[i];
        let t = g.predecessors(&l.id).iter().any(|p| {
            let pi = g.index_of(p).expect("validated edge");
            tainted[pi] || g.layers[pi].varies_at_runtime()
        });
        tainted[i] = t;
        let class = if t || !l.fuzzy.is_empty() {
            LayerClass::Fuzzy
        } else {
            LayerClass::Predictable
        };
        out.insert(l.id.clone(), class);
    }
    out
}

/// Layers reachable backwards from `id`, breadth first.
pub fn ancestors(g: &ModelGraph, id: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&str> = g.predecessors(id).into_iter().collect();
    while let Some(p) = queue.pop_front() {
        if seen.insert(p.to_string()) {
            queue.extend(g.predecessors(p));
        }
    }
    seen
}
