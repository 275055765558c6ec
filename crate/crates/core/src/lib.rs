pub mod builder;
pub mod eval;
pub mod kb;
pub mod knowledge;
pub mod llm;
pub mod par;
pub mod prompt;
pub mod reasoning;
pub mod retrieval;
pub mod trainer;
