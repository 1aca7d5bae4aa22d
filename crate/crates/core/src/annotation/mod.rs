//! Pairwise-comparison annotation sessions used to build ranked groups.

mod session;
mod store;

pub use session::{
    Choice, ComparisonSession, Decision, PairView, SessionError, SessionSpec, SessionStatus, Vote,
};
pub use store::{Event, SessionStore};
