//! Mining ordered image-text instruction sequences from narrated how-to videos.
//!
//! The crate covers the whole curation path, from timestamped narration to a
//! split, statistics-annotated corpus, plus the embedding-based protocol used
//! to score generated instruction sequences:
//!
//! ```text
//! transcript ──► filtering ──► steps ──► alignment ──► dataset ──► metrics
//!   (SRT/VTT/JSON)  (LLM yes/no)  (LLM JSON)  (monotone DP)  (stats, split,
//!                                                             sampler)
//! ```
//!
//! Model inference (speech recognition, image/text encoders, the text
//! generation service) happens elsewhere; this crate consumes its outputs as
//! sentence JSON files, `SHTE` embedding stores and chat-completion
//! responses.
//!
//! Data-parallel loops (corpus alignment, similarity matrices, per-sequence
//! evaluation) go through [`exec::Execution`]; with the default `parallel`
//! feature they run on rayon, without it everything runs sequentially and
//! produces identical results.

pub mod alignment;
pub mod dataset;
pub mod embeddings;
pub mod exec;
pub mod filtering;
pub mod llm;
pub mod metrics;
pub mod pipeline;
mod prompt;
pub mod steps;
pub mod transcript;

pub use alignment::{align, align_video, brute_force_align, expand_windows, Alignment, AlignmentWindow};
pub use dataset::{CorpusStats, DatasetManifest, SequenceRecord};
pub use embeddings::{EmbeddingStore, EntryId, SimilarityMatrix, StoreKind};
pub use exec::Execution;
pub use metrics::{GeneratedSequence, MetricReport};
pub use steps::{InstructionStep, StepList};
pub use transcript::{NarrationSentence, Transcript, TranscriptFormat};
