//! Tree-structured deformable part models.
//!
//! A configuration `L` places every part filter at a cell of one pyramid
//! level. Its score is the sum of the part appearance responses, the
//! quadratic deformation terms of every tree edge, and a bias. The best
//! configuration is found by leaf-to-root message passing where each message
//! is a generalized distance transform ([`dt`]).

pub mod detect;
pub mod dt;
pub mod infer;
pub mod io;
pub mod model;
pub mod response;

pub use detect::{detect_characters, non_maximum_suppression, DetectorConfig};
pub use dt::{distance_transform_message, DtMessage};
pub use infer::{
    configuration_features, infer_best, infer_best_restricted, score_configuration,
    InferenceResult, LevelInference, RootWindow,
};
pub use model::{
    deformation_term, CharacterMixtureSet, CharacterTreeModel, ClassMixture, DeformationParams,
    Detection, Label, PartFilter, PartPlacement, TreeEdge, DEFORMATION_EPS,
};
pub use response::{appearance_response, ScoreMap};
