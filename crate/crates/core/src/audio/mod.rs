//! Audio ingestion: WAV I/O, 8-bit codecs, persisted datasets, and
//! synthetic corpora.

pub mod codec;
pub mod dataset;
pub mod synth;
pub mod wav;

pub use codec::{linear_decode, linear_encode, mulaw_decode, mulaw_encode, Encoding};
pub use dataset::{build_dataset, QuantizedDataset};
pub use synth::{synth_generate, SynthKind};
pub use wav::{read_wav, write_wav, PcmAudio};
