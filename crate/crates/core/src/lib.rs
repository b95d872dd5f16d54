//! Spatial context engine.
//!
//! A scene is held as a [`SpatialContext`]: a portrait (text plus image
//! references), a semantically labeled point cloud and a scene hypergraph
//! whose typed hyperedges describe spatial relations between instances.
//! On top of that representation the crate provides
//!
//! * readout of the context as point maps and text ([`projection`], [`protocol`]),
//! * per-instance mesh-to-segment similarity alignment ([`layout`]),
//! * relation-driven joint pose optimization ([`ergonomics`]),
//! * top-down occupancy planning between instances ([`navigation`]),
//! * bundle persistence ([`io`]).
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default); see [`exec::Execution`].

pub mod context;
pub mod demo;
pub mod ergonomics;
pub mod exec;
pub mod geometry;
pub mod io;
pub mod layout;
pub mod navigation;
pub mod projection;
pub mod protocol;

pub use context::{
    HyperEdge, InstanceId, LabeledPoint, LabeledPointCloud, Node, Relation, RelationParams,
    SceneHypergraph, ScenePortrait, SpatialContext,
};
pub use ergonomics::{Pose, PoseSet};
pub use exec::Execution;
pub use geometry::{Aabb, MeshInstance, Obb, SimilarityTransform, SpatialIndex};

/// Scene-space 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;
