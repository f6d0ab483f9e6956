//! A discrete-epoch multi-agent simulator of a scientific research society.
//!
//! Agents built from a scholarly graph form teams, walk a six-stage
//! collaboration pipeline (collaborator selection, topic discussion, idea
//! generation, novelty assessment, abstract generation, peer review), cite
//! retrieved papers, and publish accepted work back into the reference
//! database. The [`metrics`] module turns the outcome into diversity versus
//! impact statistics.

pub mod backend;
pub mod channel;
pub mod corpus;
pub mod index;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod review;
pub mod rng;
pub mod sim;
pub mod society;
pub mod synth;

pub use backend::{Backend, BackendError, BackendMode, MockBackend, MockConfig};
pub use corpus::{AuthorId, AuthorRecord, Corpus, Discipline, PaperId, PaperRecord};
pub use par::Execution;
pub use sim::{SimulationConfig, SimulationError};
