use mstcn::data::{
    batch_indices, dequantize, frame, frame_mask, generate_synthetic, generate_synthetic_labeled, lag1_autocorrelation, make_batch,
    pad_to_multiple, unframe, ChannelKind, SequenceDataset, Split, SyntheticSpec,
};
use mstcn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq(c: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64([c, data.len() / c], data).unwrap()
}

#[test]
fn frame_examples() {
    let y = seq(1, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(frame(&y, 1).unwrap(), y);
    let f = frame(&y, 2).unwrap();
    assert_eq!(f.shape(), [2, 2]);
    assert_eq!(f.data(), &[1.0, 3.0, 2.0, 4.0]);
    assert_eq!(unframe(&f, 2).unwrap(), y);
    assert!(frame(&seq(1, &[1.0, 2.0, 3.0]), 2).is_err());

    // two channels: framed channel c·FW + j
    let y = seq(2, &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
    let f = frame(&y, 2).unwrap();
    assert_eq!(f.data(), &[1.0, 3.0, 2.0, 4.0, 10.0, 30.0, 20.0, 40.0]);
}

#[test]
fn padding_examples() {
    let (p, n) = pad_to_multiple(&seq(1, &[1.0; 10]), 8).unwrap();
    assert_eq!((p.shape()[1], n), (16, 10));
    assert!(p.data()[10..].iter().all(|&v| v == 0.0));
    let y = seq(1, &[2.0; 16]);
    assert_eq!(pad_to_multiple(&y, 8).unwrap(), (y, 16));
    assert!(pad_to_multiple(&seq(1, &[1.0]), 0).is_err());
}

#[test]
fn frames_starting_inside_the_sequence_are_valid() {
    assert_eq!(frame_mask(5, 2, 4), [1.0, 1.0, 1.0, 0.0]);
    assert_eq!(frame_mask(4, 2, 4), [1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn batches_pad_frame_and_mask() {
    let a = seq(1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let b = seq(1, &[6.0, 7.0]);
    let batch = make_batch::<f32>(&[&a, &b], 2, 2).unwrap();
    assert_eq!(batch.y.shape(), [2, 2, 4]);
    assert_eq!(batch.mask.data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(&batch.y.data()[..8], &[1.0, 3.0, 5.0, 0.0, 2.0, 4.0, 0.0, 0.0]);
    assert!(make_batch::<f64>(&[], 2, 2).is_err());
}

#[test]
fn shuffled_batches_are_reproducible_permutations() {
    let a = batch_indices(10, 3, true, 5, 2);
    assert_eq!(a, batch_indices(10, 3, true, 5, 2));
    assert_ne!(a, batch_indices(10, 3, true, 5, 3));
    let mut flat: Vec<usize> = a.concat();
    flat.sort();
    assert_eq!(flat, (0..10).collect::<Vec<_>>());
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
    assert_eq!(batch_indices(4, 2, false, 0, 0), [vec![0, 1], vec![2, 3]]);
}

#[test]
fn dequantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = seq(2, &[0.0; 200_000]);
    let kinds = [ChannelKind::Real, ChannelKind::Binary];
    assert_eq!(dequantize(&y, &kinds, 0.0, &mut rng).unwrap(), y);
    let w = 0.4;
    let d = dequantize(&y, &kinds, w, &mut rng).unwrap();
    let (real, binary) = d.data().split_at(100_000);
    assert!(binary.iter().all(|&v| v == 0.0));
    assert!(real.iter().all(|&v| (-w / 2.0..=w / 2.0).contains(&v)));
    // the draws fill the interval
    let lo = real.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo < -w / 2.0 + 1e-3 && hi > w / 2.0 - 1e-3);
    assert!(dequantize(&y, &kinds, -1.0, &mut rng).is_err());
}

#[test]
fn single_regime_is_plain_ar1() {
    let spec = SyntheticSpec {
        regime_count: 1,
        regime_dwell: 8,
        coefficients: vec![0.6],
        noise_scales: vec![1.0],
        offsets: vec![],
        length: 20_000,
        count: 1,
        seed: 3,
        binary: false,
    };
    let d = generate_synthetic(&spec, Split::Train).unwrap();
    let r = lag1_autocorrelation(d.sequences[0].data());
    assert!((r - 0.6).abs() < 0.1, "{r}");
}

#[test]
fn per_regime_autocorrelation_matches_coefficients() {
    let mut spec = SyntheticSpec::two_regime(4, 10_000, 7);
    spec.regime_dwell = 10_000;
    let (d, labels) = generate_synthetic_labeled(&spec, Split::Train).unwrap();
    let mut seen = [false; 2];
    for (s, l) in d.sequences.iter().zip(&labels) {
        // dwell == length: one regime per sequence
        assert!(l.iter().all(|&r| r == l[0]));
        seen[l[0]] = true;
        let r = lag1_autocorrelation(s.data());
        let a = spec.coefficients[l[0]];
        assert!((r - a).abs() < 0.1, "regime {}: {r} vs {a}", l[0]);
    }
    assert!(seen.iter().any(|&s| s));
}

#[test]
fn regimes_switch_only_at_dwell_boundaries() {
    let spec = SyntheticSpec::two_regime(20, 256, 9);
    let (_, labels) = generate_synthetic_labeled(&spec, Split::Train).unwrap();
    let mut switches = 0;
    for l in &labels {
        for t in 1..l.len() {
            if l[t] != l[t - 1] {
                assert_eq!(t % 8, 0);
                switches += 1;
            }
        }
    }
    assert!(switches > 0);
}

#[test]
fn synthetic_generation_is_reproducible() {
    let spec = SyntheticSpec::two_regime(5, 64, 11);
    assert_eq!(generate_synthetic(&spec, Split::Train).unwrap(), generate_synthetic(&spec, Split::Train).unwrap());
    let other = SyntheticSpec { seed: 12, ..spec.clone() };
    assert_ne!(generate_synthetic(&spec, Split::Train).unwrap(), generate_synthetic(&other, Split::Train).unwrap());
    let binary = SyntheticSpec { binary: true, ..spec };
    let d = generate_synthetic(&binary, Split::Train).unwrap();
    assert_eq!(d.kinds, [ChannelKind::Binary]);
    assert!(d.sequences.iter().flat_map(|s| s.data()).all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn invalid_synthetic_specs() {
    let mut s = SyntheticSpec::two_regime(1, 8, 0);
    s.coefficients[0] = 1.0;
    assert!(generate_synthetic(&s, Split::Train).is_err());
    let mut s = SyntheticSpec::two_regime(1, 8, 0);
    s.regime_dwell = 0;
    assert!(generate_synthetic(&s, Split::Train).is_err());
}

#[test]
fn binary_file_round_trip_and_layout() {
    let d = SequenceDataset::new(
        vec![seq(2, &[1.0, 2.0, 0.0, 1.0]), seq(2, &[0.5, 1.0, 1.5, 0.0, 0.0, 1.0])],
        vec![ChannelKind::Real, ChannelKind::Binary],
        Split::Valid,
    )
    .unwrap();
    let mut buf = Vec::new();
    d.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..8], b"MSTCNSEQ");
    assert_eq!(&buf[8..16], &1u64.to_le_bytes());
    assert_eq!(&buf[16..24], &2u64.to_le_bytes());
    assert_eq!(&buf[24..32], &2u64.to_le_bytes());
    assert_eq!(&buf[32..34], &[0, 1]);
    assert_eq!(SequenceDataset::read_from(&mut buf.as_slice(), Split::Valid).unwrap(), d);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("valid.seq");
    d.save(&path).unwrap();
    assert_eq!(SequenceDataset::load(&path, Split::Valid).unwrap(), d);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(SequenceDataset::read_from(&mut bad.as_slice(), Split::Valid).is_err());
    buf.truncate(buf.len() - 4);
    assert!(SequenceDataset::read_from(&mut buf.as_slice(), Split::Valid).is_err());
}

#[test]
fn text_import_and_export() {
    let text = "1,2,3\n\n4.5, -1\n";
    let d = SequenceDataset::read_text(text.as_bytes(), None, Split::Train).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.sequences[1].data(), &[4.5, -1.0]);
    let mut out = Vec::new();
    d.write_text(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "1,2,3\n4.5,-1\n");

    let two = SequenceDataset::read_text("1,0;0,1".as_bytes(), Some(vec![ChannelKind::Real, ChannelKind::Binary]), Split::Train).unwrap();
    assert_eq!(two.sequences[0].shape(), [2, 2]);
    assert!(SequenceDataset::read_text("1,2;3".as_bytes(), None, Split::Train).is_err());
    assert!(SequenceDataset::read_text("1,x".as_bytes(), None, Split::Train).is_err());
    assert!(SequenceDataset::read_text("1,2\n1,2;3,4".as_bytes(), None, Split::Train).is_err());
}

proptest! {
    #[test]
    fn frame_unframe_round_trip(c in 1usize..4, fw in 1usize..5, n in 0usize..6, seed in 0u64..1000) {
        let l = fw * n;
        let data: Vec<f64> = (0..c * l).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        let y = Tensor::<f64>::from_f64([c, l], &data).unwrap();
        let f = frame(&y, fw).unwrap();
        prop_assert_eq!(f.shape(), &[c * fw, n]);
        prop_assert_eq!(unframe(&f, fw).unwrap(), y);
    }
}
