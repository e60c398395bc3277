//! Chat service: per-session dialogue state, the retrieve-then-respond loop,
//! rater evaluations persisted as one JSON file per session, and the HTTP
//! API used by the web frontend.

pub mod engine;
pub mod error;
pub mod http;
pub mod session;
pub mod summary;

pub use engine::{Engine, EngineConfig, ModelTag, Reply, RetrievalStack};
pub use error::{ChatError, Result};
pub use http::{router, serve, MessageResponse, ServiceEnv, DATA_DIR_VAR, PORT_VAR};
pub use session::{SessionEval, SessionManager, SessionRecord, SessionTurn, TurnEval, TurnScores};
pub use summary::{aggregate_eval, Summary, SummaryRow};
