//! Pieces of the `paravla` binary that need I/O beyond the core library:
//! configuration loading, an OpenAI-compatible LLM client, and the HTTP
//! curation API.

pub mod config;
pub mod llm;
pub mod server;
