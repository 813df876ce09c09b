//! Layercast models layered container images at the granularity the numbers
//! live at: abstract file entries with sizes and content ids instead of real
//! bytes. It builds images from recipes (self-contained, multi-stage,
//! squashed), stores them in a content-addressed registry on disk, replays
//! absolute and incremental pulls through a download/extraction pipeline
//! cost model, and optimizes base-image selection across a multi-container
//! stack to maximize shared layers.

pub mod imagebuild;
pub mod layerfs;
pub mod optimizer;
pub mod registry;
pub mod simcost;

pub use imagebuild::{
    build, image_size, parse_recipe, parse_reference, squash, stack_size, BuildError, BuildOutput,
    BuildRecipe, Image, ParseError, StackSize,
};
pub use layerfs::{
    apply, canonicalize, diff, materialize, FileEntry, FileSystemView, Layer, LayerError, LayerOp,
};
pub use optimizer::{
    assignment_cost, baseline_assign, enumerate_candidates, exact_assign, greedy_assign,
    Assignment, BaseCatalog, BasePlan, OptimizerError, ServiceSpec,
};
pub use registry::{
    LayerCache, LayerDescriptor, Manifest, PullMode, PullReport, Registry, RegistryError,
};
pub use simcost::{
    simulate_pull, simulate_rollout, timed_pull, CostModel, PullSchedule, RolloutReport, Scenario,
    SimError,
};
