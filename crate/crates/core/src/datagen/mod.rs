//! Synthetic music Q&A generation from captions: prompt rendering, response
//! parsing, hygiene and verification filters, and audit sampling.

pub mod audit;
pub mod client;
pub mod parse;
pub mod pipeline;
pub mod prompts;

pub use audit::{render_summary, sample_audit, summarize, AuditRow, AuditSheet, AuditSummary};
pub use client::{ChatClient, ClientError, HttpChatClient, RetryPolicy, ScriptedClient, SyntheticClient};
pub use parse::{hygiene_filter, parse_response, DropReason, GenerationOutcome, Hygiene, RawPair};
pub use pipeline::{parse_verdict, run_pipeline, verify_pair, PipelineOptions, RunReport, Verdict};
pub use prompts::{render_prompt, render_prompt_v1, render_prompt_v2, ChatPrompt, PromptVersion};
