//! Dataset manifests, frame decoding, Pad-and-Resize preprocessing and the
//! identity-balanced batch sampler.

mod frame;
mod manifest;
mod sampler;

pub use frame::{
    load_frame, pad_and_resize, pad_to_ratio, padding_for, resize, save_frame, stretch_resize,
    DiskFrames, Frame, FrameSource, Padding, SequenceSample, TARGET_H, TARGET_W,
};
pub use manifest::{load_manifest, DatasetManifest, SequenceRecord, Split, SplitCounts};
pub use sampler::{class_labels, sample_batch, spaced_frames, BatchEntry, BatchSpec, Sampler, SamplerState};
