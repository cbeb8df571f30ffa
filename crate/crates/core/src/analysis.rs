//! Per-node SAE feature activations, feature summaries and rankings, the
//! human-assigned feature taxonomy, and overlay exports for the explorer.
//!
//! Overlay files (`schema_version` 1):
//!
//! ```json
//! {"schema_version": 1, "feature": 3,
//!  "instances": [{"id": 0, "seed": 123, "marker": "circle",
//!                 "nodes": [{"x": 0.1, "y": 0.7, "a": 0.0}, ...]}, ...],
//!  "max_activation": 1.25, "inactive": false,
//!  "normalization": {"min": 0.0, "max": 1.25},
//!  "meta": {...}}
//! ```
//!
//! Activations are raw; colour mapping is left to the renderer. Label files
//! are `{"version": 1, "labels": {"3": "boundary"}}`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::capture_instance;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::sae::SaeModel;
use crate::tsp::{Distribution, TspInstance};

pub const OVERLAY_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const LABEL_FILE_VERSION: u32 = 1;

/// Marker shapes assigned to overlay instances in order, cycling.
pub const MARKERS: [&str; 10] =
    ["circle", "square", "triangle-up", "triangle-down", "diamond", "cross", "x", "star", "pentagon", "hexagon"];

/// Sparse SAE activations for every node of one instance, `nodes × features`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureActivations {
    pub instance_id: u64,
    nodes: usize,
    features: usize,
    values: Vec<f64>,
}

impl FeatureActivations {
    pub fn new(instance_id: u64, nodes: usize, features: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes * features || nodes == 0 || features == 0 {
            return Err(Error::Dimension(format!("{} values for {nodes} nodes × {features} features", values.len())));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Parameter("feature activations must be non-negative".into()));
        }
        Ok(FeatureActivations { instance_id, nodes, features, values })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn get(&self, node: usize, feature: usize) -> f64 {
        self.values[node * self.features + feature]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.features..(node + 1) * self.features]
    }

    pub fn column(&self, feature: usize) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        Ok((0..self.nodes).map(|j| self.get(j, feature)).collect())
    }

    fn check_feature(&self, feature: usize) -> Result<()> {
        if feature >= self.features {
            return Err(Error::Parameter(format!("feature {feature} out of {}", self.features)));
        }
        Ok(())
    }
}

/// `μ_i = (1/N) Σ_j z_sparse[j, i]`.
pub fn mean_activation(fa: &FeatureActivations, feature: usize) -> Result<f64> {
    fa.check_feature(feature)?;
    let sum: f64 = (0..fa.nodes).map(|j| fa.get(j, feature)).sum();
    Ok(sum / fa.nodes as f64)
}

/// SAE activations from residual vectors (`nodes × d`, row-major).
pub fn activations_from_residuals(sae: &SaeModel, instance_id: u64, residuals: &[f64]) -> Result<FeatureActivations> {
    let d = sae.d();
    if residuals.is_empty() || residuals.len() % d != 0 {
        return Err(Error::Format(format!("{} residual values are not rows of d = {d}", residuals.len())));
    }
    let nodes = residuals.len() / d;
    let n = sae.latent();
    let mut values = vec![0.0; nodes * n];
    for (j, x) in residuals.chunks_exact(d).enumerate() {
        for (i, v) in sae.encode_sparse(x)?.entries {
            values[j * n + i] = v;
        }
    }
    FeatureActivations::new(instance_id, nodes, n, values)
}

/// Encodes `instance` with the policy and runs every node through the SAE.
pub fn feature_activations(
    sae: &SaeModel,
    policy: &Policy,
    instance: &TspInstance,
    instance_id: u64,
) -> Result<FeatureActivations> {
    check_pair(sae, policy)?;
    let emb = policy.encode(instance)?;
    activations_from_residuals(sae, instance_id, emb.nodes.data())
}

/// Rejects an SAE trained on a different residual width.
pub fn check_pair(sae: &SaeModel, policy: &Policy) -> Result<()> {
    if sae.d() != policy.config().d_model {
        return Err(Error::Format(format!(
            "SAE expects d = {}, policy has d_model = {}",
            sae.d(),
            policy.config().d_model
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Activates along the outer edge of the point set.
    Boundary,
    /// Activates on one dense spot.
    Spot,
    /// Splits the plane along a line.
    Separator,
    Unclear,
    #[default]
    Unlabeled,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Boundary, Category::Spot, Category::Separator, Category::Unclear, Category::Unlabeled];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Boundary => "boundary",
            Category::Spot => "spot",
            Category::Separator => "separator",
            Category::Unclear => "unclear",
            Category::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown feature category `{s}`")))
    }
}

/// Human-assigned feature labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub version: u32,
    pub labels: BTreeMap<usize, Category>,
}

impl LabelFile {
    pub fn new(labels: BTreeMap<usize, Category>) -> Self {
        LabelFile { version: LABEL_FILE_VERSION, labels }
    }

    pub fn label(&self, feature: usize) -> Category {
        self.labels.get(&feature).copied().unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: LabelFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if f.version != LABEL_FILE_VERSION {
            return Err(Error::Format(format!("unsupported label file version {}", f.version)));
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub feature: usize,
    /// μ averaged over the instance set.
    pub mean_activation: f64,
    /// μ for each instance, in input order.
    pub per_instance_mean: Vec<f64>,
    /// Fraction of nodes where the feature is non-zero.
    pub firing_frequency: f64,
    pub max_activation: f64,
    pub label: Category,
}

/// One summary per feature over a set of instances.
pub fn summarize(sets: &[FeatureActivations], labels: &LabelFile) -> Result<Vec<FeatureSummary>> {
    let first = sets.first().ok_or_else(|| Error::Parameter("no activations to summarise".into()))?;
    let features = first.features;
    if sets.iter().any(|s| s.features != features) {
        return Err(Error::Dimension("activation sets disagree on the feature count".into()));
    }
    let total_nodes: usize = sets.iter().map(|s| s.nodes).sum();
    (0..features)
        .map(|i| {
            let per_instance_mean = sets.iter().map(|s| mean_activation(s, i)).collect::<Result<Vec<_>>>()?;
            let mut fired = 0usize;
            let mut max = 0.0f64;
            for s in sets {
                for j in 0..s.nodes {
                    let v = s.get(j, i);
                    if v > 0.0 {
                        fired += 1;
                    }
                    max = max.max(v);
                }
            }
            Ok(FeatureSummary {
                feature: i,
                mean_activation: per_instance_mean.iter().sum::<f64>() / sets.len() as f64,
                per_instance_mean,
                firing_frequency: fired as f64 / total_nodes as f64,
                max_activation: max,
                label: labels.label(i),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    Mean,
    FiringFrequency,
    Max,
}

impl RankKey {
    pub const ALL: [RankKey; 3] = [RankKey::Mean, RankKey::FiringFrequency, RankKey::Max];

    fn value(self, s: &FeatureSummary) -> f64 {
        match self {
            RankKey::Mean => s.mean_activation,
            RankKey::FiringFrequency => s.firing_frequency,
            RankKey::Max => s.max_activation,
        }
    }
}

impl FromStr for RankKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RankKey::Mean),
            "firing_frequency" | "firing-frequency" | "freq" => Ok(RankKey::FiringFrequency),
            "max" => Ok(RankKey::Max),
            _ => Err(Error::Parameter(format!("unknown rank key `{s}`"))),
        }
    }
}

/// Feature indices by descending `key`, ties by ascending index.
pub fn rank_features(summaries: &[FeatureSummary], key: RankKey) -> Vec<usize> {
    let mut order: Vec<&FeatureSummary> = summaries.iter().collect();
    order.sort_by(|a, b| key.value(b).total_cmp(&key.value(a)).then(a.feature.cmp(&b.feature)));
    order.into_iter().map(|s| s.feature).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaxonomyReport {
    pub counts: BTreeMap<Category, usize>,
    pub features: BTreeMap<Category, Vec<usize>>,
    pub unlabeled: Vec<usize>,
}

/// Groups `num_features` features by their label.
pub fn taxonomy_report(num_features: usize, labels: &LabelFile) -> Result<TaxonomyReport> {
    if let Some((&bad, _)) = labels.labels.range(num_features..).next() {
        return Err(Error::Parameter(format!("label for feature {bad}, but only {num_features} features exist")));
    }
    let mut features: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    let mut unlabeled = Vec::new();
    for i in 0..num_features {
        match labels.label(i) {
            Category::Unlabeled => unlabeled.push(i),
            c => features.entry(c).or_default().push(i),
        }
    }
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for (c, v) in &features {
        counts.insert(*c, v.len());
    }
    counts.insert(Category::Unlabeled, unlabeled.len());
    Ok(TaxonomyReport { counts, features, unlabeled })
}

/// Which instances an overlay or analysis pass looks at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSetSpec {
    pub distribution: Distribution,
    pub num_instances: u64,
    pub n: usize,
    pub seed: u64,
}

impl Default for InstanceSetSpec {
    fn default() -> Self {
        InstanceSetSpec { distribution: Distribution::Uniform, num_instances: 10, n: 100, seed: 2024 }
    }
}

impl InstanceSetSpec {
    pub fn instances(&self) -> Result<Vec<TspInstance>> {
        (0..self.num_instances).map(|i| capture_instance(self.distribution, self.n, self.seed, i)).collect()
    }
}

/// Activations for every instance of `spec`, in instance order.
pub fn activations_for(sae: &SaeModel, policy: &Policy, spec: &InstanceSetSpec) -> Result<(Vec<TspInstance>, Vec<FeatureActivations>)> {
    check_pair(sae, policy)?;
    let instances = spec.instances()?;
    let acts = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| feature_activations(sae, policy, inst, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok((instances, acts))
}

/// Checkpoint provenance copied into exports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportMeta {
    pub policy_checkpoint_sha256: String,
    pub sae_checkpoint_sha256: String,
    pub distribution: Distribution,
    pub seed: u64,
    pub num_instances: u64,
    pub n: usize,
    pub k: usize,
    pub latent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayNode {
    pub x: f64,
    pub y: f64,
    pub a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayInstance {
    pub id: u64,
    pub seed: u64,
    pub marker: String,
    pub nodes: Vec<OverlayNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayExport {
    pub schema_version: u32,
    pub feature: usize,
    pub instances: Vec<OverlayInstance>,
    pub max_activation: f64,
    /// The feature never fired on these instances.
    pub inactive: bool,
    pub normalization: Normalization,
    pub meta: ExportMeta,
}

impl OverlayExport {
    pub fn point_count(&self) -> usize {
        self.instances.iter().map(|i| i.nodes.len()).sum()
    }

    /// Structural checks a renderer relies on.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(format!("overlay for feature {}: {m}", self.feature)));
        if self.schema_version != OVERLAY_SCHEMA_VERSION {
            return bad(format!("schema version {}", self.schema_version));
        }
        if self.instances.len() as u64 != self.meta.num_instances {
            return bad(format!("{} instances, meta says {}", self.instances.len(), self.meta.num_instances));
        }
        let mut max = 0.0f64;
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.nodes.len() != self.meta.n {
                return bad(format!("instance {} has {} nodes, meta says {}", inst.id, inst.nodes.len(), self.meta.n));
            }
            if inst.marker != MARKERS[k % MARKERS.len()] {
                return bad(format!("instance {} has marker `{}`", inst.id, inst.marker));
            }
            for p in &inst.nodes {
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) || !(p.a >= 0.0) || !p.a.is_finite() {
                    return bad(format!("invalid point ({}, {}, {}) in instance {}", p.x, p.y, p.a, inst.id));
                }
                max = max.max(p.a);
            }
        }
        if max != self.max_activation || self.normalization.max != max || self.normalization.min != 0.0 {
            return bad("max_activation or normalization does not match the points".into());
        }
        if self.inactive != (max == 0.0) {
            return bad("inactive flag disagrees with the activations".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let e: OverlayExport = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        e.validate()?;
        Ok(e)
    }
}

/// Overlay for one feature from precomputed activations.
pub fn build_overlay(
    feature: usize,
    instances: &[TspInstance],
    acts: &[FeatureActivations],
    meta: &ExportMeta,
) -> Result<OverlayExport> {
    if instances.len() != acts.len() {
        return Err(Error::Dimension("one activation set per instance required".into()));
    }
    let mut max = 0.0f64;
    let mut out = Vec::with_capacity(instances.len());
    for (k, (inst, fa)) in instances.iter().zip(acts).enumerate() {
        let col = fa.column(feature)?;
        if col.len() != inst.n {
            return Err(Error::Dimension(format!("instance {k} has {} nodes, activations {}", inst.n, col.len())));
        }
        let nodes = inst
            .coords
            .iter()
            .zip(&col)
            .map(|(&[x, y], &a)| {
                max = max.max(a);
                OverlayNode { x, y, a }
            })
            .collect();
        out.push(OverlayInstance { id: fa.instance_id, seed: inst.seed, marker: MARKERS[k % MARKERS.len()].into(), nodes });
    }
    Ok(OverlayExport {
        schema_version: OVERLAY_SCHEMA_VERSION,
        feature,
        instances: out,
        max_activation: max,
        inactive: max == 0.0,
        normalization: Normalization { min: 0.0, max },
        meta: meta.clone(),
    })
}

pub fn overlay_file_name(feature: usize) -> String {
    format!("feature_{feature:05}.json")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one overlay file per feature into `out_dir`.
pub fn export_overlay(
    sae: &SaeModel,
    policy: &Policy,
    features: &[usize],
    spec: &InstanceSetSpec,
    meta: &ExportMeta,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (instances, acts) = activations_for(sae, policy, spec)?;
    features
        .iter()
        .map(|&f| {
            let export = build_overlay(f, &instances, &acts, meta)?;
            let path = out_dir.join(overlay_file_name(f));
            write_json(&path, &export)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub mean_activation: f64,
    pub firing_frequency: f64,
    pub max_activation: f64,
    pub label: Category,
    /// Overlay file, relative to the manifest.
    pub overlay: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorerManifest {
    pub schema_version: u32,
    pub features: Vec<ManifestEntry>,
    pub meta: ExportMeta,
}

impl ExplorerManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: ExplorerManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.schema_version)));
        }
        Ok(m)
    }

    /// Loads and validates every overlay the manifest points at.
    pub fn validate_overlays(&self, manifest_dir: &Path) -> Result<()> {
        for e in &self.features {
            let o = OverlayExport::load(&manifest_dir.join(&e.overlay))?;
            if o.feature != e.index {
                return Err(Error::Format(format!("{} holds feature {}, manifest says {}", e.overlay, o.feature, e.index)));
            }
        }
        Ok(())
    }
}

/// Overlays for `features` (all features when `None`) plus `manifest.json`
/// listing them in index order. Summaries are computed on the overlay
/// instances.
pub fn export_explorer(
    sae: &SaeModel,
    policy: &Policy,
    features: Option<&[usize]>,
    labels: &LabelFile,
    spec: &InstanceSetSpec,
    meta: &ExportMeta,
    out_dir: &Path,
) -> Result<(PathBuf, ExplorerManifest)> {
    let (instances, acts) = activations_for(sae, policy, spec)?;
    let summaries = summarize(&acts, labels)?;
    let all: Vec<usize> = (0..sae.latent()).collect();
    let mut chosen = features.unwrap_or(&all).to_vec();
    chosen.sort_unstable();
    chosen.dedup();
    let mut entries = Vec::with_capacity(chosen.len());
    for &f in &chosen {
        let s = summaries.get(f).ok_or_else(|| Error::Parameter(format!("feature {f} out of {}", sae.latent())))?;
        let export = build_overlay(f, &instances, &acts, meta)?;
        let name = format!("overlays/{}", overlay_file_name(f));
        write_json(&out_dir.join(&name), &export)?;
        entries.push(ManifestEntry {
            index: f,
            mean_activation: s.mean_activation,
            firing_frequency: s.firing_frequency,
            max_activation: s.max_activation,
            label: s.label,
            overlay: name,
        });
    }
    let manifest = ExplorerManifest { schema_version: MANIFEST_SCHEMA_VERSION, features: entries, meta: meta.clone() };
    let path = out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok((path, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub summaries: Vec<FeatureSummary>,
    pub rankings: BTreeMap<String, Vec<usize>>,
    pub taxonomy: TaxonomyReport,
    pub meta: ExportMeta,
}

/// Summaries, rankings under every key and the taxonomy for one instance set.
pub fn analyze(sae: &SaeModel, policy: &Policy, spec: &InstanceSetSpec, labels: &LabelFile, meta: &ExportMeta) -> Result<AnalysisReport> {
    let taxonomy = taxonomy_report(sae.latent(), labels)?;
    let (_, acts) = activations_for(sae, policy, spec)?;
    let summaries = summarize(&acts, labels)?;
    let rankings = RankKey::ALL
        .iter()
        .map(|&k| {
            let name = serde_json::to_value(k).expect("rank key").as_str().expect("string").to_string();
            (name, rank_features(&summaries, k))
        })
        .collect();
    Ok(AnalysisReport { summaries, rankings, taxonomy, meta: meta.clone() })
}

pub fn save_report(path: &Path, report: &AnalysisReport) -> Result<()> {
    write_json(path, report)
}
