//! Boltzmann-distributed rooted planar maps built through four-type labeled
//! mobiles.
//!
//! The pipeline is: a face-degree weight sequence is classified by solving a
//! two-variable fixed point ([`weights`]), the fixed point induces offspring
//! and spatial displacement laws for a four-type Galton-Watson tree
//! ([`trees`]), the forward mobile-to-map construction turns well-labeled
//! trees into rooted planar maps ([`bijection`]), and re-rooting surgery plus
//! map/tree observables ([`reroot`], [`stats`], [`snake`]) support the
//! scaling checks. Everything distributional is backed by the exact rational
//! enumeration oracle in [`oracle`].

pub mod bijection;
pub mod combinatorics;
pub mod oracle;
pub mod reroot;
pub mod rng;
pub mod snake;
pub mod stats;
pub mod trees;
pub mod weights;

pub use bijection::RootedPlanarMap;
pub use trees::{ContourPair, MultitypeSpatialTree, NodeType};
pub use weights::{Classification, CriticalityReport, OffspringLaws, WeightSequence};
