use std::f64::consts::PI;

use dptfsnet::model::{
    apply_mask, checkpoint, count_params, identity_mask, DptFsNet, MaskSource, ModelConfig, PathSelection,
};
use dptfsnet::numerics::{Tape, Tensor};
use dptfsnet::signal::{istft, stft, StftConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Closed-form parameter counts, written out layer by layer.
fn conv(c_in: usize, c_out: usize, kt: usize, kf: usize) -> usize {
    c_out * c_in * kt * kf + c_out
}
fn conv_unit(c_in: usize, c_out: usize, kt: usize, kf: usize) -> usize {
    conv(c_in, c_out, kt, kf) + 2 * c_out + c_out
}
fn dense(c: usize) -> usize {
    (1..=4).map(|i| conv_unit(i * c, c, 2, 3)).sum()
}
fn transformer(d: usize, d_ff: usize) -> usize {
    let attn = 4 * d * d;
    let gru = 3 * (d_ff * d + d_ff * d_ff + d_ff);
    attn + 2 * d + gru + d_ff * d + d + 2 * d
}
fn closed_form(c: usize, blocks: usize) -> (usize, usize, usize) {
    let d = c / 2;
    let encoder = conv_unit(2, c, 1, 1) + dense(c);
    let dptpm = conv(c, d, 1, 1) + d + blocks * 2 * transformer(d, 4 * d) + conv(d, c, 1, 1) + c + 2 * conv(c, c, 1, 1);
    let decoder = dense(c) + conv(c, 2, 1, 1);
    (encoder, dptpm, decoder)
}

#[test]
fn reference_parameter_count_matches_closed_form() {
    let net = DptFsNet::new(ModelConfig::reference(), 0).unwrap();
    let counts = count_params(&net.params, 1);
    let (e, d, o) = closed_form(64, 4);
    assert_eq!(counts.per_component["encoder"], e);
    assert_eq!(counts.per_component["dptpm"], d);
    assert_eq!(counts.per_component["decoder"], o);
    assert_eq!(counts.total, e + d + o);
    assert_eq!(counts.total, 1_068_098);
}

#[test]
fn toy_parameter_count_matches_closed_form() {
    let net = DptFsNet::new(ModelConfig::toy(), 0).unwrap();
    let (e, d, o) = closed_form(8, 1);
    assert_eq!(net.params.numel(), e + d + o);
    assert_eq!(net.params.numel(), 10_546);
}

#[test]
fn each_extra_block_adds_two_transformers() {
    let mut cfg = ModelConfig::toy();
    let base = DptFsNet::new(cfg.clone(), 0).unwrap().params.numel();
    cfg.blocks = 2;
    let more = DptFsNet::new(cfg, 0).unwrap().params.numel();
    assert_eq!(more - base, 2 * transformer(4, 16));
}

#[test]
fn grouping_depth_two_refines_depth_one() {
    let net = DptFsNet::new(ModelConfig::toy(), 0).unwrap();
    let shallow = count_params(&net.params, 1);
    let deep = count_params(&net.params, 2);
    for (top, n) in &shallow.per_component {
        let sum: usize = deep.per_component.iter().filter(|(k, _)| k.starts_with(&format!("{top}."))).map(|(_, v)| v).sum();
        assert_eq!(sum, *n, "{top}");
    }
}

#[test]
fn dense_block_grows_linearly_in_channels() {
    let net = DptFsNet::new(ModelConfig::reference(), 0).unwrap();
    assert_eq!(net.encoder.dense.layer_inputs(), vec![64, 128, 192, 256]);
    assert_eq!(net.decoder.dense.layer_inputs(), vec![64, 128, 192, 256]);
    assert_eq!(net.config.dense_receptive_field(), 16);
}

#[test]
fn reference_shapes_through_each_stage() {
    let net = DptFsNet::new(ModelConfig::reference(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let x = tape.constant(random(&mut rng, &[2, 10, 257]));
    let u = net.encoder.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(u), &[64, 10, 257]);
    let m = net.dptpm.forward(&mut tape, &p, u).unwrap();
    assert_eq!(tape.shape(m), &[64, 10, 257]);
    let mask = net.decoder.forward(&mut tape, &p, m).unwrap();
    assert_eq!(tape.shape(mask), &[2, 10, 257]);
    assert!(tape.value(mask).all_finite());
}

#[test]
fn dptpm_without_blocks_is_a_channel_bottleneck() {
    let mut cfg = ModelConfig::toy();
    cfg.blocks = 0;
    let net = DptFsNet::new(cfg, 2).unwrap();
    assert!(net.dptpm.blocks.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let u = tape.constant(random(&mut rng, &[8, 5, 17]));
    let y = net.dptpm.forward(&mut tape, &p, u).unwrap();
    assert_eq!(tape.shape(y), &[8, 5, 17]);
}

#[test]
fn zero_encoder_input_with_zero_biases_gives_zero_features() {
    let mut net = DptFsNet::new(ModelConfig::toy(), 3).unwrap();
    let ids: Vec<_> = net.params.ids().collect();
    for id in ids {
        if net.params.name(id).starts_with("encoder") && net.params.name(id).ends_with("bias") {
            net.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[2, 4, 17]));
    let u = net.encoder.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_output_conv_silences_everything() {
    let mut net = DptFsNet::new(ModelConfig::toy(), 4).unwrap();
    for name in ["decoder.conv_out.weight", "decoder.conv_out.bias"] {
        net.params.by_name_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let wave = random(&mut rng, &[400]);
    let spec = stft(&wave, &net.config.stft).unwrap();
    assert!(net.predict_mask(&spec).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(net.enhance(&wave).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wave = random(&mut rng, &[300]);
    let spec = stft(&wave, &StftConfig::toy()).unwrap();
    let (t, f) = (spec.frames(), spec.bins());

    let same = apply_mask(&spec, &identity_mask(t, f)).unwrap();
    assert_eq!(same, spec);

    let rot = Tensor::from_fn(&[2, t, f], |i| if i < t * f { 0.0 } else { 1.0 });
    let turned = apply_mask(&spec, &rot).unwrap();
    for k in 0..t * f {
        assert_eq!(turned.real.data()[k], -spec.imag.data()[k]);
        assert_eq!(turned.imag.data()[k], spec.real.data()[k]);
    }

    // Polar-form product as an independent oracle.
    let mask = random(&mut rng, &[2, t, f]);
    let out = apply_mask(&spec, &mask).unwrap();
    for k in 0..t * f {
        let (xr, xi) = (spec.real.data()[k], spec.imag.data()[k]);
        let (mr, mi) = (mask.data()[k], mask.data()[t * f + k]);
        let r = xr.hypot(xi) * mr.hypot(mi);
        let ang = xi.atan2(xr) + mi.atan2(mr);
        assert!((out.real.data()[k] - r * ang.cos()).abs() < 1e-12);
        assert!((out.imag.data()[k] - r * ang.sin()).abs() < 1e-12);
    }

    assert!(apply_mask(&spec, &Tensor::zeros(&[2, t, f + 1])).is_err());
}

#[test]
fn enhance_preserves_length() {
    let cfg = ModelConfig {
        stft: StftConfig::default(),
        ..ModelConfig::toy()
    };
    let net = DptFsNet::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [1600, 16000, 16013] {
        let y = net.enhance(&random(&mut rng, &[n]).map(|v| 0.5 * v)).unwrap();
        assert_eq!(y.numel(), n);
        assert!(y.all_finite());
    }
}

#[test]
fn identity_mask_reproduces_stft_round_trip() {
    let net = DptFsNet::new(ModelConfig::toy(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let wave = random(&mut rng, &[1000]);
    let via = net.enhance_with(&wave, MaskSource::Identity).unwrap();
    let direct = istft(&stft(&wave, &net.config.stft).unwrap()).unwrap();
    assert!(via.max_abs_diff(&direct) <= 1e-9);
}

#[test]
fn enhance_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let wave = random(&mut rng, &[800]);
    let a = DptFsNet::new(ModelConfig::toy(), 8).unwrap();
    let b = DptFsNet::new(ModelConfig::toy(), 8).unwrap();
    assert_eq!(a.enhance(&wave).unwrap(), a.enhance(&wave).unwrap());
    assert_eq!(a.enhance(&wave).unwrap(), b.enhance(&wave).unwrap());
    let c = DptFsNet::new(ModelConfig::toy(), 9).unwrap();
    assert_ne!(a.enhance(&wave).unwrap(), c.enhance(&wave).unwrap());
}

#[test]
fn forward_stays_finite_over_seeded_trials() {
    for trial in 0..100u64 {
        let net = DptFsNet::new(ModelConfig::toy(), trial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let n = rng.random_range(32..400);
        let wave = random(&mut rng, &[n]);
        assert!(net.enhance(&wave).unwrap().all_finite(), "trial {trial}");
    }
}

fn dptpm_paths(net: &DptFsNet, u: &Tensor, paths: PathSelection) -> Tensor {
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let x = tape.constant(u.clone());
    let y = net.dptpm.forward_paths(&mut tape, &p, x, paths).unwrap();
    tape.value(y).clone()
}

fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    Tensor::from_fn(&s, |k| {
        let mut idx = [k / (s[1] * s[2]), (k / s[2]) % s[1], k % s[2]];
        idx[axis] = perm[idx[axis]];
        t.get(&idx)
    })
}

#[test]
fn intra_path_is_frequency_permutation_equivariant() {
    let net = DptFsNet::new(ModelConfig::toy(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let u = random(&mut rng, &[8, 6, 17]);
    let perm: Vec<usize> = (0..17).map(|i| (7 * i + 4) % 17).collect();
    let a = dptpm_paths(&net, &permute_axis(&u, 2, &perm), PathSelection::INTRA_ONLY);
    let b = permute_axis(&dptpm_paths(&net, &u, PathSelection::INTRA_ONLY), 2, &perm);
    assert!(a.max_abs_diff(&b) <= 1e-10);
}

#[test]
fn intra_path_keeps_sub_bands_independent() {
    let net = DptFsNet::new(ModelConfig::toy(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random(&mut rng, &[8, 6, 17]);
    let mut bumped = u.clone();
    for c in 0..8 {
        bumped.set(&[c, 2, 5], u.get(&[c, 2, 5]) + 1.0);
    }
    let (a, b) = (
        dptpm_paths(&net, &u, PathSelection::INTRA_ONLY),
        dptpm_paths(&net, &bumped, PathSelection::INTRA_ONLY),
    );
    for c in 0..8 {
        for t in 0..6 {
            for f in 0..17 {
                let same = a.get(&[c, t, f]) == b.get(&[c, t, f]);
                assert_eq!(same, f != 5, "({c},{t},{f})");
            }
        }
    }
}

#[test]
fn inter_path_is_time_permutation_equivariant_but_full_module_is_not() {
    let net = DptFsNet::new(ModelConfig::toy(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let u = random(&mut rng, &[8, 6, 17]);
    let perm = [4, 2, 0, 5, 1, 3];
    let a = dptpm_paths(&net, &permute_axis(&u, 1, &perm), PathSelection::INTER_ONLY);
    let b = permute_axis(&dptpm_paths(&net, &u, PathSelection::INTER_ONLY), 1, &perm);
    assert!(a.max_abs_diff(&b) <= 1e-10);

    let a = dptpm_paths(&net, &permute_axis(&u, 1, &perm), PathSelection::BOTH);
    let b = permute_axis(&dptpm_paths(&net, &u, PathSelection::BOTH), 1, &perm);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn model_input_shape_is_checked() {
    let net = DptFsNet::new(ModelConfig::toy(), 13).unwrap();
    let mut tape = Tape::new();
    let p = net.params.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[2, 4, 16]));
    assert!(net.forward_mask(&mut tape, &p, x).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = DptFsNet::new(ModelConfig::toy(), 14).unwrap();
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path, Some(&ModelConfig::toy())).unwrap();
    assert_eq!(back.params.tensors(), net.params.tensors());
    assert_eq!(back.config, net.config);
    let wave = Tensor::from_fn(&[300], |i| (2.0 * PI * i as f64 / 37.0).sin());
    assert_eq!(back.enhance(&wave).unwrap(), net.enhance(&wave).unwrap());
    assert!(checkpoint::load(&dir.path().join("missing.ckpt"), None).is_err());
}
