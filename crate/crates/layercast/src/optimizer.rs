//! Cross-container base-image selection: given service requirements and a
//! three-tier base catalog (CPU architecture, Linux distribution, language
//! runtime), choose base images minimizing the deduplicated stack size.
//!
//! Each service with a runtime requirement has two candidates: the matching
//! runtime image, or the distribution image plus a private runtime layer.
//! The exhaustive solver is exact; the greedy solver commits services in
//! descending app size; the baseline models independently chosen bases with
//! no shared layers at all.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagebuild::Image;
use crate::layerfs::{FileEntry, Layer, LayerError, LayerOp};

/// Upper bound on exhaustive-search combinations unless overridden.
pub const DEFAULT_SEARCH_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no matching base for service `{service}`: {detail}")]
    NoMatchingBase { service: String, detail: String },
    #[error("search space of {combinations} combinations exceeds limit {limit}")]
    SearchSpaceTooLarge { combinations: u128, limit: u64 },
    #[error("invalid catalog: {reason}")]
    InvalidCatalog { reason: String },
    #[error("invalid service `{name}`: {reason}")]
    InvalidService { name: String, reason: String },
    #[error("malformed input: {reason}")]
    MalformedInput { reason: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

type Result<T> = std::result::Result<T, OptimizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Arch,
    Distro,
    Runtime,
}

/// One catalog row as it appears in the catalog file; `own_layer_sizes` are
/// the sizes of the layers this node appends to its parent's chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    #[serde(rename = "ref")]
    pub reference: String,
    pub kind: BaseKind,
    pub parent: Option<String>,
    pub own_layer_sizes: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    bases: Vec<CatalogEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNode {
    pub reference: String,
    pub kind: BaseKind,
    pub parent: Option<String>,
    /// Own layers only; the full chain is the parent chain plus these.
    pub layers: Vec<Layer>,
}

/// The base-image hierarchy: arch nodes are roots, distro nodes sit on an
/// arch, runtime nodes sit on a distro. Chains within one arch share the
/// arch prefix by digest because nodes are synthesized exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCatalog {
    nodes: BTreeMap<String, BaseNode>,
}

fn valid_token(value: &str) -> bool {
    !value.is_empty()
        && !value.contains('/')
        && !value.chars().any(|c| c.is_whitespace() || c.is_control())
}

impl BaseCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<BaseCatalog> {
        let invalid = |reason: String| OptimizerError::InvalidCatalog { reason };
        let mut nodes = BTreeMap::new();
        for entry in &entries {
            if !valid_token(&entry.reference) {
                return Err(invalid(format!("invalid base ref `{}`", entry.reference)));
            }
            let layers = entry
                .own_layer_sizes
                .iter()
                .enumerate()
                .map(|(i, size)| {
                    Layer::new(vec![LayerOp::Add(FileEntry::new(
                        format!("/base/{}/layer-{i}", entry.reference),
                        *size,
                        format!("{}.layer{i}", entry.reference),
                    )?)])
                })
                .collect::<std::result::Result<Vec<Layer>, LayerError>>()?;
            let node = BaseNode {
                reference: entry.reference.clone(),
                kind: entry.kind,
                parent: entry.parent.clone(),
                layers,
            };
            if nodes.insert(entry.reference.clone(), node).is_some() {
                return Err(invalid(format!("duplicate base ref `{}`", entry.reference)));
            }
        }
        let catalog = BaseCatalog { nodes };
        for node in catalog.nodes.values() {
            let parent_kind = node
                .parent
                .as_ref()
                .map(|p| {
                    catalog.nodes.get(p).map(|n| n.kind).ok_or_else(|| {
                        invalid(format!("unknown parent `{p}` of `{}`", node.reference))
                    })
                })
                .transpose()?;
            let ok = match node.kind {
                BaseKind::Arch => parent_kind.is_none(),
                BaseKind::Distro => parent_kind == Some(BaseKind::Arch),
                BaseKind::Runtime => parent_kind == Some(BaseKind::Distro),
            };
            if !ok {
                return Err(invalid(format!(
                    "`{}` ({:?}) has an invalid parent tier",
                    node.reference, node.kind
                )));
            }
        }
        Ok(catalog)
    }

    pub fn from_json(text: &str) -> Result<BaseCatalog> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| OptimizerError::MalformedInput {
                reason: e.to_string(),
            })?;
        BaseCatalog::new(file.bases)
    }

    pub fn node(&self, reference: &str) -> Option<&BaseNode> {
        self.nodes.get(reference)
    }

    /// Full layer chain of a node: parent chain followed by own layers.
    pub fn chain(&self, reference: &str) -> Result<Vec<Layer>> {
        let node = self
            .nodes
            .get(reference)
            .ok_or_else(|| OptimizerError::InvalidCatalog {
                reason: format!("unknown base ref `{reference}`"),
            })?;
        let mut layers = match &node.parent {
            Some(parent) => self.chain(parent)?,
            None => Vec::new(),
        };
        layers.extend(node.layers.iter().cloned());
        Ok(layers)
    }
}

/// What one service needs from a base image, plus the cost of installing its
/// runtime privately when basing on a plain distribution image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    pub arch: String,
    pub distro: String,
    pub runtime: Option<String>,
    pub app_size: u64,
    pub private_runtime_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ServicesFile {
    services: Vec<ServiceSpec>,
}

/// Parses the services file: `{"services": [...]}`.
pub fn services_from_json(text: &str) -> Result<Vec<ServiceSpec>> {
    let file: ServicesFile =
        serde_json::from_str(text).map_err(|e| OptimizerError::MalformedInput {
            reason: e.to_string(),
        })?;
    Ok(file.services)
}

fn validate_service(service: &ServiceSpec) -> Result<()> {
    if service.name.is_empty()
        || !service
            .name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | '_' | '-'))
    {
        return Err(OptimizerError::InvalidService {
            name: service.name.clone(),
            reason: "name must match [a-z0-9._-]+".to_string(),
        });
    }
    Ok(())
}

fn app_layer(service: &ServiceSpec) -> Layer {
    Layer::new(vec![LayerOp::Add(
        FileEntry::new(
            format!("/srv/{}/app", service.name),
            service.app_size,
            format!("{}.app", service.name),
        )
        .expect("validated service name yields a valid entry"),
    )])
    .expect("single add is a valid layer")
}

fn private_runtime_layer(service: &ServiceSpec) -> Layer {
    Layer::new(vec![LayerOp::Add(
        FileEntry::new(
            format!("/srv/{}/runtime", service.name),
            service.private_runtime_size,
            format!("{}.private-runtime", service.name),
        )
        .expect("validated service name yields a valid entry"),
    )])
    .expect("single add is a valid layer")
}

/// One admissible base choice for a service. The implied image is the base
/// chain, then the private layers (runtime install and app, both with
/// digests unique to the service).
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub base_ref: String,
    pub private_layers: Vec<Layer>,
}

/// Candidates for a service, sorted by base ref: the matching runtime node
/// (if the service declares a runtime) and the distro node with a private
/// runtime layer. Services without a runtime get the distro node alone.
pub fn enumerate_candidates(
    service: &ServiceSpec,
    catalog: &BaseCatalog,
) -> Result<Vec<Candidate>> {
    validate_service(service)?;
    let mismatch = |detail: String| OptimizerError::NoMatchingBase {
        service: service.name.clone(),
        detail,
    };
    let arch = catalog
        .node(&service.arch)
        .filter(|n| n.kind == BaseKind::Arch)
        .ok_or_else(|| mismatch(format!("arch `{}` not in catalog", service.arch)))?;
    let distro = catalog
        .node(&service.distro)
        .filter(|n| n.kind == BaseKind::Distro)
        .ok_or_else(|| mismatch(format!("distro `{}` not in catalog", service.distro)))?;
    if distro.parent.as_deref() != Some(arch.reference.as_str()) {
        return Err(mismatch(format!(
            "distro `{}` is not built on arch `{}`",
            service.distro, service.arch
        )));
    }

    let mut candidates = Vec::new();
    match &service.runtime {
        Some(runtime) => {
            let node = catalog
                .node(runtime)
                .filter(|n| n.kind == BaseKind::Runtime)
                .ok_or_else(|| mismatch(format!("runtime `{runtime}` not in catalog")))?;
            if node.parent.as_deref() != Some(distro.reference.as_str()) {
                return Err(mismatch(format!(
                    "runtime `{runtime}` is not built on distro `{}`",
                    service.distro
                )));
            }
            candidates.push(Candidate {
                base_ref: runtime.clone(),
                private_layers: vec![app_layer(service)],
            });
            candidates.push(Candidate {
                base_ref: service.distro.clone(),
                private_layers: vec![private_runtime_layer(service), app_layer(service)],
            });
        }
        None => candidates.push(Candidate {
            base_ref: service.distro.clone(),
            private_layers: vec![app_layer(service)],
        }),
    }
    candidates.sort_by(|a, b| a.base_ref.cmp(&b.base_ref));
    Ok(candidates)
}

/// A resolved base choice for one service.
#[derive(Debug, Clone, PartialEq)]
pub enum BasePlan {
    /// Bases on a catalog node; the chain is shared with every other image
    /// using the same node.
    Hierarchy {
        base_ref: String,
        private_layers: Vec<Layer>,
    },
    /// Everything private, including copies of the base layers; shares
    /// nothing.
    Private {
        base_ref: String,
        private_layers: Vec<Layer>,
    },
}

impl BasePlan {
    pub fn base_ref(&self) -> &str {
        match self {
            BasePlan::Hierarchy { base_ref, .. } | BasePlan::Private { base_ref, .. } => base_ref,
        }
    }

    pub fn private_layers(&self) -> &[Layer] {
        match self {
            BasePlan::Hierarchy { private_layers, .. }
            | BasePlan::Private { private_layers, .. } => private_layers,
        }
    }

    /// All layers of the image this plan implies.
    pub fn implied_layers(&self, catalog: &BaseCatalog) -> Result<Vec<Layer>> {
        match self {
            BasePlan::Hierarchy {
                base_ref,
                private_layers,
            } => {
                let mut layers = catalog.chain(base_ref)?;
                layers.extend(private_layers.iter().cloned());
                Ok(layers)
            }
            BasePlan::Private { private_layers, .. } => Ok(private_layers.clone()),
        }
    }

    pub fn implied_image(&self, service_name: &str, catalog: &BaseCatalog) -> Result<Image> {
        Image::new(service_name, "assigned", self.implied_layers(catalog)?).map_err(|e| {
            OptimizerError::InvalidService {
                name: service_name.to_string(),
                reason: e.to_string(),
            }
        })
    }
}

/// The output of a solver: one plan per service and the deduplicated total.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub choices: BTreeMap<String, BasePlan>,
    pub total_dedup_size: u64,
}

/// Deduplicated byte total of the implied images: every unique layer digest
/// counted once across the whole stack.
pub fn assignment_cost(choices: &BTreeMap<String, BasePlan>, catalog: &BaseCatalog) -> Result<u64> {
    let mut unique: BTreeMap<String, u64> = BTreeMap::new();
    for plan in choices.values() {
        for layer in plan.implied_layers(catalog)? {
            unique.insert(layer.digest().to_string(), layer.uncompressed_size());
        }
    }
    Ok(unique.values().sum())
}

fn candidate_table(
    services: &[ServiceSpec],
    catalog: &BaseCatalog,
) -> Result<Vec<(ServiceSpec, Vec<Candidate>)>> {
    let mut sorted: Vec<ServiceSpec> = services.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for pair in sorted.windows(2) {
        if pair[0].name == pair[1].name {
            return Err(OptimizerError::InvalidService {
                name: pair[0].name.clone(),
                reason: "duplicate service name".to_string(),
            });
        }
    }
    sorted
        .into_iter()
        .map(|service| {
            let candidates = enumerate_candidates(&service, catalog)?;
            Ok((service, candidates))
        })
        .collect()
}

/// Exhaustively enumerates all candidate combinations and returns the
/// cheapest assignment. Ties go to the lexicographically smallest vector of
/// (service name, base ref). Fails when the combination count exceeds
/// `limit`.
pub fn exact_assign(
    services: &[ServiceSpec],
    catalog: &BaseCatalog,
    limit: u64,
) -> Result<Assignment> {
    let table = candidate_table(services, catalog)?;
    let combinations: u128 = table
        .iter()
        .map(|(_, candidates)| candidates.len() as u128)
        .product();
    if combinations > limit as u128 {
        return Err(OptimizerError::SearchSpaceTooLarge {
            combinations,
            limit,
        });
    }

    let mut indices = vec![0usize; table.len()];
    let mut best: Option<(u64, Vec<usize>)> = None;
    loop {
        let mut choices = BTreeMap::new();
        for ((service, candidates), &index) in table.iter().zip(&indices) {
            let candidate = &candidates[index];
            choices.insert(
                service.name.clone(),
                BasePlan::Hierarchy {
                    base_ref: candidate.base_ref.clone(),
                    private_layers: candidate.private_layers.clone(),
                },
            );
        }
        let cost = assignment_cost(&choices, catalog)?;
        // Candidates are enumerated in lexicographic (service, base_ref)
        // order, so the first minimum seen is the tie-break winner.
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, indices.clone()));
        }

        let mut position = table.len();
        loop {
            if position == 0 {
                let (total, winner) = best.expect("at least one combination was evaluated");
                let mut choices = BTreeMap::new();
                for ((service, candidates), &index) in table.iter().zip(&winner) {
                    let candidate = &candidates[index];
                    choices.insert(
                        service.name.clone(),
                        BasePlan::Hierarchy {
                            base_ref: candidate.base_ref.clone(),
                            private_layers: candidate.private_layers.clone(),
                        },
                    );
                }
                return Ok(Assignment {
                    choices,
                    total_dedup_size: total,
                });
            }
            position -= 1;
            indices[position] += 1;
            if indices[position] < table[position].1.len() {
                break;
            }
            indices[position] = 0;
        }
    }
}

/// Greedy heuristic: services in descending app size (ties by name) each
/// pick the candidate with the smallest marginal cost given the layers
/// already committed. Marginal-cost ties go to the candidate with the
/// smallest private portion, keeping as many bytes as possible on shareable
/// chain layers; remaining ties to the smallest base ref.
pub fn greedy_assign(services: &[ServiceSpec], catalog: &BaseCatalog) -> Result<Assignment> {
    let mut table = candidate_table(services, catalog)?;
    table.sort_by(|a, b| {
        (Reverse(a.0.app_size), &a.0.name).cmp(&(Reverse(b.0.app_size), &b.0.name))
    });

    let mut committed: BTreeMap<String, u64> = BTreeMap::new();
    let mut choices = BTreeMap::new();
    for (service, candidates) in table {
        let mut chosen: Option<((u64, u64), &Candidate, Vec<Layer>)> = None;
        for candidate in &candidates {
            let plan = BasePlan::Hierarchy {
                base_ref: candidate.base_ref.clone(),
                private_layers: candidate.private_layers.clone(),
            };
            let layers = plan.implied_layers(catalog)?;
            let mut uncommitted = BTreeMap::new();
            for layer in &layers {
                if !committed.contains_key(layer.digest()) {
                    uncommitted.insert(layer.digest().to_string(), layer.uncompressed_size());
                }
            }
            let marginal: u64 = uncommitted.values().sum();
            let private_bytes: u64 = candidate
                .private_layers
                .iter()
                .map(Layer::uncompressed_size)
                .sum();
            let key = (marginal, private_bytes);
            if chosen.as_ref().is_none_or(|(best, _, _)| key < *best) {
                chosen = Some((key, candidate, layers));
            }
        }
        let (_, candidate, layers) = chosen.expect("every service has at least one candidate");
        for layer in layers {
            committed.insert(layer.digest().to_string(), layer.uncompressed_size());
        }
        choices.insert(
            service.name.clone(),
            BasePlan::Hierarchy {
                base_ref: candidate.base_ref.clone(),
                private_layers: candidate.private_layers.clone(),
            },
        );
    }
    Ok(Assignment {
        total_dedup_size: committed.values().sum(),
        choices,
    })
}

/// Models independently chosen bases: every service gets private copies of
/// its whole nominal base chain, so nothing is shared and the stack costs
/// the sum of the individual images.
pub fn baseline_assign(services: &[ServiceSpec], catalog: &BaseCatalog) -> Result<Assignment> {
    let mut choices = BTreeMap::new();
    for service in services {
        validate_service(service)?;
        let nominal = service
            .runtime
            .clone()
            .unwrap_or_else(|| service.distro.clone());
        // Run the hierarchy checks so mismatched services fail the same way.
        enumerate_candidates(service, catalog)?;
        let mut private_layers: Vec<Layer> = catalog
            .chain(&nominal)?
            .iter()
            .map(|layer| {
                let ops = layer
                    .ops()
                    .iter()
                    .map(|op| match op {
                        LayerOp::Add(entry) => Ok(LayerOp::Add(FileEntry::new(
                            entry.path.clone(),
                            entry.size,
                            format!("{}@{}", entry.content_id, service.name),
                        )?)),
                        LayerOp::Delete(path) => Ok(LayerOp::Delete(path.clone())),
                    })
                    .collect::<std::result::Result<Vec<LayerOp>, LayerError>>()?;
                Ok(Layer::new(ops)?)
            })
            .collect::<Result<Vec<Layer>>>()?;
        private_layers.push(app_layer(service));
        if choices
            .insert(
                service.name.clone(),
                BasePlan::Private {
                    base_ref: nominal,
                    private_layers,
                },
            )
            .is_some()
        {
            return Err(OptimizerError::InvalidService {
                name: service.name.clone(),
                reason: "duplicate service name".to_string(),
            });
        }
    }
    let total_dedup_size = assignment_cost(&choices, catalog)?;
    Ok(Assignment {
        choices,
        total_dedup_size,
    })
}

fn image_sizes(
    assignment: &Assignment,
    catalog: &BaseCatalog,
) -> Result<Vec<(String, String, u64)>> {
    assignment
        .choices
        .iter()
        .map(|(service, plan)| {
            let mut unique: BTreeMap<String, u64> = BTreeMap::new();
            for layer in plan.implied_layers(catalog)? {
                unique.insert(layer.digest().to_string(), layer.uncompressed_size());
            }
            Ok((
                service.clone(),
                plan.base_ref().to_string(),
                unique.values().sum(),
            ))
        })
        .collect()
}

/// CSV report: `service,base_ref,image_size`, one row per service in name
/// order.
pub fn assignment_csv(assignment: &Assignment, catalog: &BaseCatalog) -> Result<String> {
    let mut out = String::from("service,base_ref,image_size\n");
    for (service, base_ref, size) in image_sizes(assignment, catalog)? {
        out.push_str(&format!("{service},{base_ref},{size}\n"));
    }
    Ok(out)
}

/// JSON mirror of [`assignment_csv`] plus the deduplicated total, with
/// sorted keys.
pub fn assignment_json(assignment: &Assignment, catalog: &BaseCatalog) -> Result<String> {
    let rows: Vec<serde_json::Value> = image_sizes(assignment, catalog)?
        .into_iter()
        .map(|(service, base_ref, size)| {
            serde_json::json!({
                "service": service,
                "base_ref": base_ref,
                "image_size": size,
            })
        })
        .collect();
    let value = serde_json::json!({
        "choices": rows,
        "total_dedup_size": assignment.total_dedup_size,
    });
    Ok(serde_json::to_string(&value).expect("assignment serializes") + "\n")
}
