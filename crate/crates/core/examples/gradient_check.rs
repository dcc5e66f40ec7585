//! Compare tape gradients of a GRU against central differences, then show
//! that a deliberately broken backward rule is caught.

use dptfsnet::nn::{Bound, Gru, ParamBuilder, ParamStore};
use dptfsnet::numerics::{grad_check_many, OpKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dptfsnet::Result<()> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gru = Gru::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("gru"), 3, 4)?;
    let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-1.0..1.0));

    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());

    for fault in [None, Some(OpKind::MatMul)] {
        let report = grad_check_many(
            |tape, v| {
                if let Some(kind) = fault {
                    tape.inject_grad_fault(kind, 1.5);
                }
                let p = Bound::from_vars(v[1..].to_vec());
                let h = gru.forward(tape, &p, v[0])?;
                let sq = tape.square(h);
                Ok(tape.sum(sq))
            },
            &inputs,
            None,
            1e-5,
            1e-4,
        )?;
        let label = match fault {
            None => "intact".to_string(),
            Some(k) => format!("{k:?} backward scaled by 1.5"),
        };
        println!(
            "{label:<32} pass={} max rel err {:.2e} over {} coords",
            report.pass, report.max_rel_err, report.coords_checked
        );
    }
    Ok(())
}
