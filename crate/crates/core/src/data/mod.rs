//! Frame acquisition, decoding, resizing, sequence building and synthetic
//! data.

pub mod dataset;
pub mod fetch;
pub mod frame;
pub mod resize;
pub mod sequence;
pub mod synth;

pub use dataset::{load_dataset, load_manifest, save_dataset, Manifest};
pub use fetch::{fetch_frames, FetchClient, FetchConfig, FetchOutcome, RetryPolicy};
pub use frame::{
    decode_frame, encode_frame, encode_gray_png, load_frame, save_frame, FrameFormat, FrameSource, RadarFrame,
};
pub use resize::resize_area;
pub use sequence::{
    build_sequences, split_train_val, stack_frames, SequenceLayout, SequenceSample, Split, SplitPolicy,
};
pub use synth::{sequence_start, synth_advection, SynthConfig, Velocity};
