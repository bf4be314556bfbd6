//! Waveform ingestion and the log-mel patch frontend.

pub mod mel;
pub mod patch;
pub mod wav;

pub use mel::{dump_mels, load_mels, log_mel, FrontendConfig, MelSpectrogram};
pub use patch::{patchify, unpatchify, PatchSequence};
pub use wav::{decode_wav, encode_wav, load_wav, Waveform};
