//! Short-time Fourier analysis/synthesis and WAV I/O.

mod stft;
mod wav;

pub use stft::{istft, istft_on_tape, stft, ComplexSpectrogram, StftConfig, WindowKind};
pub use wav::{decode_wav, encode_wav, quantize, read_wav, write_wav};
