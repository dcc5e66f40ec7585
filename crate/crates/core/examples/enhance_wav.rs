//! Write a noisy WAV, enhance it with an untrained toy network and with the
//! identity mask, and compare both against the clean signal.
//!
//! `cargo run --release --example enhance_wav -- [output_dir]`

use std::path::PathBuf;

use dptfsnet::metrics::si_sdr;
use dptfsnet::model::{DptFsNet, MaskSource, ModelConfig};
use dptfsnet::signal::{read_wav, write_wav};
use dptfsnet::training::make_synthetic_pair;

fn main() -> dptfsnet::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let (clean, noisy) = make_synthetic_pair(7, 16_000, 0.0)?;
    let noisy_path = dir.join("noisy.wav");
    write_wav(&noisy_path, &noisy, 16_000)?;

    let (wave, rate) = read_wav(&noisy_path)?;
    let net = DptFsNet::new(ModelConfig::toy(), 0)?;
    println!("input: {} samples at {rate} Hz, SI-SDR {:+.2} dB", wave.numel(), si_sdr(&wave, &clean)?);
    for (label, source) in [("identity mask", MaskSource::Identity), ("untrained network", MaskSource::Network)] {
        let out = net.enhance_with(&wave, source)?;
        let path = dir.join(format!("{}.wav", label.replace(' ', "_")));
        write_wav(&path, &out, rate)?;
        println!("{label:<18} SI-SDR {:+.2} dB -> {}", si_sdr(&out, &clean)?, path.display());
    }
    Ok(())
}
