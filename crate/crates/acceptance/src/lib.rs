//! Reference implementations written independently of `seeker-core`, and
//! seeded generators for synthetic corpora.

pub mod oracle;
pub mod synth;
