//! Cross-domain attack laboratory.

pub mod corpus;
pub mod exploit;
pub mod extract;
pub mod fuzz;
pub mod machine;
pub mod matcher;
pub mod report;
pub mod scenario;
