//! Parameter breakdown of the reference and toy configurations.

use dptfsnet::model::{count_params, DptFsNet, ModelConfig, REFERENCE_PARAMS};

fn main() -> dptfsnet::Result<()> {
    for (label, cfg) in [("reference", ModelConfig::reference()), ("toy", ModelConfig::toy())] {
        let net = DptFsNet::new(cfg, 0)?;
        let counts = count_params(&net.params, 2);
        println!("{label}:");
        for (name, n) in &counts.per_component {
            println!("  {name:<24} {n:>9}");
        }
        println!(
            "  {:<24} {:>9}  ({:.3} x 0.88 M)",
            "total",
            counts.total,
            counts.total as f64 / REFERENCE_PARAMS as f64
        );
    }
    Ok(())
}
