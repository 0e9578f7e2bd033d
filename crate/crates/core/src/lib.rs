pub mod corpus;
pub mod eval;
pub mod jsonl;
pub mod modelio;
pub mod pipeline;
pub mod taskgen;
pub mod textops;
