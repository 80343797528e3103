pub mod anchors;
pub mod boxes;
pub mod checkpoint;
pub mod clips;
pub mod convlstm;
pub mod detector;
pub mod frames;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;
