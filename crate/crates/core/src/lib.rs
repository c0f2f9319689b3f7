//! Training-free visual search for fine-grained visual question answering.
//!
//! The pipeline turns cached token features of a multimodal model into object
//! relevance maps, proposes regions of interest on them, ranks the proposals
//! with an existence oracle under a forward-pass budget, and plans the final
//! crops handed back to the model.

pub mod geometry;
pub mod inference_plan;
pub mod metrics;
pub mod pipeline;
pub mod ranking;
pub mod relevance_map;
pub mod roi_proposal;
pub mod synthetic;
pub mod tensor_io;
