//! placeholder
#[derive(Debug, Clone)]
pub struct Checkpoint;
