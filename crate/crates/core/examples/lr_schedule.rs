//! Print the warmup ramp and epoch decay of the learning rate.

use dptfsnet::training::{lr_schedule, ScheduleConfig};

fn main() -> dptfsnet::Result<()> {
    let cfg = ScheduleConfig::default();
    println!("peak at step {}: {:.4e}", cfg.warmup, cfg.peak());
    for n in [1, 100, 1000, 2000, 4000] {
        println!("step {n:>5}           lr {:.4e}", lr_schedule(n, 0, &cfg)?);
    }
    for epoch in [0, 1, 2, 3, 10, 50] {
        println!("step 4001 epoch {epoch:>3} lr {:.4e}", lr_schedule(cfg.warmup + 1, epoch, &cfg)?);
    }
    Ok(())
}
