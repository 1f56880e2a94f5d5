//! Zero-redundancy Mixture-of-Experts computation kit.
//!
//! Tokens are grouped per expert through a padded re-index vector and the
//! expert MLPs are evaluated in place by expert-specific operators
//! ([`es_ops`]), without the dispatch/combine buffers of the conventional
//! formulation ([`oracle`], kept as the reference). On top of that sit the
//! full layer ([`layer`]), a deterministic multi-device simulator ([`dist`])
//! and a heterogeneity-aware workload allocator ([`hetero`]).

pub mod bench;
pub mod dist;
pub mod error;
pub mod es_ops;
pub mod hetero;
pub mod io;
pub mod layer;
pub mod oracle;
pub mod routing;
pub mod scenario;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use es_ops::{esfk, esmm, ess, estmm, EsKernels, EsOutputMode, TileOrder};
pub use layer::{moe_backward, moe_forward, ForwardStash, LayerConfig, MoeGrads, MoeParams, Scheme};
pub use routing::{build_reindex, build_reindex_all, synthesize_routing, ReIndex, RoutingChoice, RoutingDistribution};
pub use tensor::{Activation, Matrix, Tensor3};
