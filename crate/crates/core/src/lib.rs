//! Co-generation of narrative scenes, a dynamic scene graph, image prompts
//! and soundscape cues, over pluggable model backends.

pub mod arc;
pub mod backends;
pub mod director;
pub mod graph;
pub mod narrator;
pub mod project;
pub mod prompts;
pub mod tone;
pub mod visual;
