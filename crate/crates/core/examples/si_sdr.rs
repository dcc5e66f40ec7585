//! SI-SDR ignores gain and reduces to a power ratio for orthogonal noise.

use dptfsnet::metrics::si_sdr;
use dptfsnet::numerics::Tensor;

fn main() -> dptfsnet::Result<()> {
    // Whole numbers of cycles at different frequencies are orthogonal over the window.
    let reference = Tensor::from_fn(&[1000], |i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / 1000.0).sin());
    let noise = Tensor::from_fn(&[1000], |i| 0.1 * (2.0 * std::f64::consts::PI * 37.0 * i as f64 / 1000.0).cos());
    let estimate = Tensor::from_fn(&[1000], |i| reference.data()[i] + noise.data()[i]);

    let base = si_sdr(&estimate, &reference)?;
    println!("SI-SDR:                {base:.6} dB");
    for gain in [0.5, 3.0, -20.0] {
        println!("  estimate x {gain:>6}: {:.6} dB", si_sdr(&estimate.map(|v| v * gain), &reference)?);
    }

    let p: f64 = reference.data().iter().map(|v| v * v).sum();
    let q: f64 = noise.data().iter().map(|v| v * v).sum();
    let overlap: f64 = reference.data().iter().zip(noise.data()).map(|(a, b)| a * b).sum();
    println!("10 log10(P / p):       {:.6} dB (noise overlap {overlap:.1e})", 10.0 * (p / q).log10());
    Ok(())
}
