//! Train the toy network on synthetic 0 dB mixtures and report held-out SI-SDR.
//!
//! `cargo run --release --example train_toy -- [steps] [seed]`

use std::time::Instant;

use dptfsnet::model::{DptFsNet, ModelConfig};
use dptfsnet::training::{block_means, evaluate, heldout_pairs, train, TrainConfig, TrainState};

fn main() -> dptfsnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(Ok(600), |s| s.parse()).expect("steps must be an integer");
    let seed = args.next().map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");

    let mut cfg = TrainConfig::desk();
    cfg.steps = steps;
    cfg.data_seed = seed;
    cfg.eval_items = 2;
    cfg.eval_every = 100;

    let mut net = DptFsNet::new(ModelConfig::toy(), seed)?;
    let mut state = TrainState::new(&net.params, seed);
    let start = Instant::now();
    let history = train(&mut net, &mut state, &cfg)?;

    for e in &history.evals {
        println!(
            "step {:>5}: noisy {:+.2} dB, enhanced {:+.2} dB",
            e.step, e.report.si_sdr_noisy, e.report.si_sdr_enhanced
        );
    }
    let smoothed: Vec<String> = block_means(&history.losses(), 100).iter().map(|v| format!("{v:.4}")).collect();
    println!("loss per 100 steps: {}", smoothed.join(" "));
    let report = evaluate(&net, &heldout_pairs(&cfg)?)?;
    println!("improvement {:+.2} dB after {steps} steps in {:.0?}", report.improvement, start.elapsed());
    Ok(())
}
