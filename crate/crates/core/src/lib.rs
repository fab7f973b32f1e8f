pub mod agent;
pub mod align;
pub mod dsp;
pub mod eval;
pub mod formats;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod score;
