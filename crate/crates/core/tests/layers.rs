use mstcn::gradcheck;
use mstcn::layers::{receptive_field, Conv1d, Conv1dSpec, Resample, WavenetBlock, WavenetStack, WavenetStackSpec};
use mstcn::{Graph, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64([1, 1, data.len()], data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn init_store(block: &WavenetBlock, seed: u64) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    // non-zero biases so the oracle exercises them
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    store
}

fn zero_residual(block: &WavenetBlock, store: &mut ParameterStore<f64>) {
    for name in block.residual_params() {
        for v in store.get_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
}

fn run_block(block: &WavenetBlock, store: &ParameterStore<f64>, x: &Tensor<f64>, c: Option<&Tensor<f64>>) -> Tensor<f64> {
    let mut g = Graph::with_params(store);
    let xv = g.constant(x.clone());
    let cv = c.map(|c| g.constant(c.clone()));
    let y = block.forward(&mut g, xv, cv).unwrap();
    g.value(y).clone()
}

// ---- straight-line oracle -------------------------------------------------

type Mat = Vec<Vec<f64>>; // [channel][time]

fn to_mat(t: &Tensor<f64>, batch: usize) -> Mat {
    let (_, c, n) = t.dims3("oracle").unwrap();
    (0..c)
        .map(|i| t.data()[(batch * c + i) * n..][..n].to_vec())
        .collect()
}

/// Explicitly zero-pads the input by `(k-1)·μ` on the left and reads taps
/// `t·s + s - 1 + kk·μ` of the padded sequence.
fn oracle_conv(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>, dil: usize, stride: usize) -> Mat {
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = (k - 1) * dil;
    let t = x[0].len();
    let padded: Mat = x
        .iter()
        .map(|row| std::iter::repeat_n(0.0, pad).chain(row.iter().copied()).collect())
        .collect();
    (0..cout)
        .map(|o| {
            (0..t / stride)
                .map(|tt| {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for kk in 0..k {
                            acc += w.data()[(o * cin + i) * k + kk] * padded[i][tt * stride + stride - 1 + kk * dil];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn oracle_transposed(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let (cin, cout, s) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t = x[0].len();
    let mut out = vec![vec![0.0; t * s]; cout];
    for o in 0..cout {
        for n in 0..t * s {
            let (tt, j) = (n / s, n % s);
            out[o][n] = b.data()[o] + (0..cin).map(|i| w.data()[(i * cout + o) * s + j] * x[i][tt]).sum::<f64>();
        }
    }
    out
}

fn oracle_block(
    store: &ParameterStore<f64>,
    name: &str,
    x: &Mat,
    c: Option<&Mat>,
    filters: usize,
    dil: usize,
    resample: Resample,
) -> Mat {
    let mut inp = x.clone();
    if let Some(c) = c {
        inp.extend(c.iter().cloned());
    }
    let down = if let Resample::Down(s) = resample { s } else { 1 };
    let gate = oracle_conv(
        &inp,
        store.get(&format!("{name}.gate.weight")).unwrap(),
        store.get(&format!("{name}.gate.bias")).unwrap(),
        dil,
        down,
    );
    let h: Mat = (0..filters)
        .map(|f| {
            gate[f]
                .iter()
                .zip(&gate[f + filters])
                .map(|(a, b)| a.tanh() * (1.0 / (1.0 + (-b).exp())))
                .collect()
        })
        .collect();
    let ow = store.get(&format!("{name}.out.weight")).unwrap();
    let ob = store.get(&format!("{name}.out.bias")).unwrap();
    let residual = match resample {
        Resample::Up(s) if s > 1 => oracle_transposed(&h, ow, ob),
        _ => oracle_conv(&h, ow, ob, 1, 1),
    };
    let mut identity: Mat = match resample {
        Resample::Down(s) => x
            .iter()
            .map(|row| row.chunks(s).map(|w| w.iter().sum::<f64>() / s as f64).collect())
            .collect(),
        _ => x.clone(),
    };
    if let Ok(pw) = store.get(&format!("{name}.skip.weight")) {
        identity = oracle_conv(&identity, pw, store.get(&format!("{name}.skip.bias")).unwrap(), 1, 1);
    }
    if let Resample::Up(s) = resample {
        identity = identity
            .iter()
            .map(|row| row.iter().flat_map(|&v| std::iter::repeat_n(v, s)).collect())
            .collect();
    }
    identity
        .iter()
        .zip(&residual)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn max_diff(a: &Mat, t: &Tensor<f64>, batch: usize) -> f64 {
    let b = to_mat(t, batch);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- convolution --------------------------------------------------------

#[test]
fn identity_kernel_is_identity() {
    let conv = Conv1d::new("c", Conv1dSpec::pointwise(1, 1)).unwrap();
    let mut store = ParameterStore::<f64>::new();
    store.insert("c.weight", Tensor::from_f64([1, 1, 1], &[1.0]).unwrap());
    store.insert("c.bias", Tensor::zeros([1]));
    let mut g = Graph::with_params(&store);
    let x = g.constant(seq(&[0.3, -1.0, 2.5]));
    let y = conv.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.3, -1.0, 2.5]);
}

#[test]
fn conv_matches_oracle_for_random_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(k, dil, stride) in &[(1, 1, 1), (2, 1, 1), (3, 2, 1), (2, 4, 1), (2, 1, 2), (3, 3, 4), (2, 2, 3)] {
        let t = 12;
        let x = random(&[2, 3, t], &mut rng);
        let w = random(&[4, 3, k], &mut rng);
        let b = random(&[4], &mut rng);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv1d(xv, wv, bv, dil, stride).unwrap();
        assert_eq!(g.shape(y), &[2, 4, t / stride]);
        for batch in 0..2 {
            let expect = oracle_conv(&to_mat(&x, batch), &w, &b, dil, stride);
            assert!(max_diff(&expect, g.value(y), batch) < 1e-12, "k={k} dil={dil} stride={stride}");
        }
    }
}

// ---- blocks ---------------------------------------------------------------

#[test]
fn zero_residual_block_is_identity() {
    let block = WavenetBlock::new("b", 3, 0, 3, 2, 2, Resample::None).unwrap();
    let mut store = init_store(&block, 1);
    zero_residual(&block, &mut store);
    let x = random(&[2, 3, 8], &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(run_block(&block, &store, &x, None), x);
}

#[test]
fn zero_residual_down_block_averages() {
    let block = WavenetBlock::new("b", 1, 0, 1, 2, 1, Resample::Down(2)).unwrap();
    let mut store = init_store(&block, 1);
    zero_residual(&block, &mut store);
    let y = run_block(&block, &store, &seq(&[2.0, 4.0, 6.0, 8.0]), None);
    assert_eq!(y.data(), &[3.0, 7.0]);
    let mut g = Graph::with_params(&store);
    let odd = g.constant(seq(&[1.0; 3]));
    assert!(block.forward(&mut g, odd, None).is_err());
}

#[test]
fn zero_residual_up_block_repeats() {
    let block = WavenetBlock::new("b", 1, 1, 1, 1, 1, Resample::Up(2)).unwrap();
    let mut store = init_store(&block, 1);
    zero_residual(&block, &mut store);
    let y = run_block(&block, &store, &seq(&[1.0, 2.0]), Some(&seq(&[5.0, -5.0])));
    assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);

    let block = WavenetBlock::new("b", 2, 1, 2, 1, 1, Resample::Up(3)).unwrap();
    let store = init_store(&block, 3);
    let y = run_block(&block, &store, &Tensor::zeros([1, 2, 4]), Some(&Tensor::zeros([1, 1, 4])));
    assert_eq!(y.shape(), &[1, 2, 12]);
}

#[test]
fn blocks_match_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = [
        (3, 0, 3, 2, 1, Resample::None),
        (3, 0, 3, 3, 2, Resample::None),
        (2, 0, 4, 2, 1, Resample::None),
        (3, 2, 3, 2, 1, Resample::None),
        (3, 0, 3, 2, 1, Resample::Down(2)),
        (2, 0, 5, 2, 2, Resample::Down(4)),
        (3, 2, 3, 1, 1, Resample::Up(2)),
        (4, 3, 2, 1, 1, Resample::Up(3)),
    ];
    for (i, &(cin, cc, f, k, dil, rs)) in cases.iter().enumerate() {
        let block = WavenetBlock::new("b", cin, cc, f, k, dil, rs).unwrap();
        let store = init_store(&block, i as u64);
        let x = random(&[2, cin, 8], &mut rng);
        let c = (cc > 0).then(|| random(&[2, cc, 8], &mut rng));
        let y = run_block(&block, &store, &x, c.as_ref());
        for batch in 0..2 {
            let cm = c.as_ref().map(|c| to_mat(c, batch));
            let expect = oracle_block(&store, "b", &to_mat(&x, batch), cm.as_ref(), f, dil, rs);
            let d = max_diff(&expect, &y, batch);
            assert!(d < 1e-12, "case {i}: {d}");
        }
    }
}

#[test]
fn degenerate_strides_reduce_to_plain_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 3, 6], &mut rng);
    let c = random(&[1, 2, 6], &mut rng);
    let plain = WavenetBlock::new("b", 3, 0, 3, 2, 1, Resample::None).unwrap();
    let down1 = WavenetBlock::new("b", 3, 0, 3, 2, 1, Resample::Down(1)).unwrap();
    let store = init_store(&plain, 4);
    assert_eq!(run_block(&plain, &store, &x, None), run_block(&down1, &store, &x, None));

    let cplain = WavenetBlock::new("b", 3, 2, 3, 1, 1, Resample::None).unwrap();
    let up1 = WavenetBlock::new("b", 3, 2, 3, 1, 1, Resample::Up(1)).unwrap();
    let store = init_store(&cplain, 5);
    assert_eq!(run_block(&cplain, &store, &x, Some(&c)), run_block(&up1, &store, &x, Some(&c)));
}

#[test]
fn ablated_conditioning_equals_unconditional_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (cin, cc, f, k) = (3, 2, 3, 2);
    let plain = WavenetBlock::new("b", cin, 0, f, k, 2, Resample::None).unwrap();
    let cond = WavenetBlock::new("b", cin, cc, f, k, 2, Resample::None).unwrap();
    let store = init_store(&plain, 6);
    let mut cstore = store.clone();
    let w = store.get("b.gate.weight").unwrap();
    let mut cw = vec![0.0; 2 * f * (cin + cc) * k];
    for o in 0..2 * f {
        for i in 0..cin {
            for kk in 0..k {
                cw[(o * (cin + cc) + i) * k + kk] = w.data()[(o * cin + i) * k + kk];
            }
        }
    }
    cstore.insert("b.gate.weight", Tensor::from_f64([2 * f, cin + cc, k], &cw).unwrap());
    let x = random(&[2, cin, 7], &mut rng);
    let c = random(&[2, cc, 7], &mut rng);
    let a = run_block(&plain, &store, &x, None);
    let b = run_block(&cond, &cstore, &x, Some(&c));
    assert_eq!(a, b);
}

#[test]
fn conditional_stack_feeds_same_sequence_to_every_block() {
    let spec = WavenetStackSpec {
        in_channels: 2,
        cond_channels: 1,
        filters: 2,
        kernel_size: 1,
        dilations: vec![1, 1, 1],
        one_by_one: true,
        resample: Resample::None,
    };
    let stack = WavenetStack::new("s", spec).unwrap();
    let mut store = ParameterStore::<f64>::new();
    stack.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5], &mut rng);
    let c = random(&[1, 1, 5], &mut rng);

    let mut g = Graph::with_params(&store);
    let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
    let y = stack.forward(&mut g, xv, Some(cv)).unwrap();
    let via_stack = g.value(y).clone();

    let mut g = Graph::with_params(&store);
    let mut h = g.constant(x);
    let cv = g.constant(c);
    for b in &stack.blocks {
        h = b.forward(&mut g, h, Some(cv)).unwrap();
    }
    assert_eq!(g.value(h), &via_stack);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let block = WavenetBlock::new("b", 3, 2, 3, 2, 1, Resample::None).unwrap();
    let store = init_store(&block, 0);
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros([1, 4, 6]));
    assert!(block.forward(&mut g, x, None).is_err());
    let x = g.constant(Tensor::zeros([1, 3, 6]));
    let c = g.constant(Tensor::zeros([1, 2, 5]));
    assert!(block.forward(&mut g, x, Some(c)).is_err());
    assert!(block.forward(&mut g, x, None).is_err());
}

// ---- causality ---------------------------------------------------------------

/// Times at which the output changes when input time `t` is perturbed.
fn affected_times(
    f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    t: usize,
) -> Vec<usize> {
    let base = f(x);
    let mut bumped = x.clone();
    let (_, c, n) = x.dims3("probe").unwrap();
    for ch in 0..c {
        bumped.data_mut()[ch * n + t] += 1.0;
    }
    let out = f(&bumped);
    let (_, oc, on) = out.dims3("probe").unwrap();
    (0..on)
        .filter(|&s| (0..oc).any(|ch| (out.data()[ch * on + s] - base.data()[ch * on + s]).abs() > 1e-12))
        .collect()
}

#[test]
fn every_block_variant_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(k, dil, rs) in &[
        (2, 1, Resample::None),
        (3, 2, Resample::None),
        (2, 1, Resample::Down(2)),
        (2, 2, Resample::Down(3)),
        (1, 1, Resample::Up(2)),
    ] {
        let block = WavenetBlock::new("b", 2, 0, 2, k, dil, rs).unwrap();
        let store = init_store(&block, 3);
        let x = random(&[1, 2, 12], &mut rng);
        let f = |x: &Tensor<f64>| run_block(&block, &store, x, None);
        for t in 0..12 {
            for s in affected_times(&f, &x, t) {
                // map output index back to the latest input it may read
                let last_read = match rs {
                    Resample::Down(st) => s * st + st - 1,
                    Resample::Up(st) => s / st,
                    Resample::None => s,
                };
                assert!(last_read >= t, "{rs:?}: input {t} affected output {s}");
            }
        }
    }
}

#[test]
fn receptive_field_matches_impulse_probe() {
    for dilations in [vec![1, 2, 4, 8, 16], vec![1, 1, 1, 1, 1], vec![1, 2, 4, 8], vec![3]] {
        let spec = WavenetStackSpec {
            in_channels: 2,
            cond_channels: 0,
            filters: 2,
            kernel_size: 2,
            dilations: dilations.clone(),
            one_by_one: false,
            resample: Resample::None,
        };
        let stack = WavenetStack::new("s", spec.clone()).unwrap();
        let mut store = ParameterStore::<f64>::new();
        stack.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let r = receptive_field(&spec);
        let n = r + 8;
        let x = random(&[1, 2, n], &mut ChaCha8Rng::seed_from_u64(3));
        let f = |x: &Tensor<f64>| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x.clone());
            let y = stack.forward(&mut g, xv, None).unwrap();
            g.value(y).clone()
        };
        let hit = affected_times(&f, &x, 0);
        assert_eq!(hit.first(), Some(&0));
        assert_eq!(*hit.last().unwrap(), r - 1, "dilations {dilations:?}");
        assert_eq!(r, stack.receptive_field());
    }
}

// ---- gradients, counts --------------------------------------------------------

#[test]
fn block_gradients_match_finite_differences() {
    let cases = [
        (2, 0, 2, 2, 2, Resample::None),
        (3, 2, 2, 2, 1, Resample::None),
        (2, 0, 3, 2, 1, Resample::Down(2)),
        (2, 1, 3, 1, 1, Resample::Up(2)),
    ];
    for (i, &(cin, cc, f, k, dil, rs)) in cases.iter().enumerate() {
        let block = WavenetBlock::new("b", cin, cc, f, k, dil, rs).unwrap();
        let store = init_store(&block, i as u64);
        let names: Vec<String> = store.names().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        let mut inputs = vec![random(&[2, cin, 6], &mut rng)];
        if cc > 0 {
            inputs.push(random(&[2, cc, 6], &mut rng));
        }
        let n_data = inputs.len();
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
        let report = gradcheck::check(&inputs, 1e-5, |g, v| {
            for (n, &p) in names.iter().zip(&v[n_data..]) {
                g.bind_param(n.clone(), p);
            }
            let y = block.forward(g, v[0], (cc > 0).then(|| v[1]))?;
            let y = g.tanh(y)?;
            let y = g.square(y)?;
            g.sum(y)
        })
        .unwrap();
        assert!(report.passes(1e-4), "case {i}: {report:?}");
    }
}

#[test]
fn stack_param_and_mac_counts_are_closed_form() {
    let spec = WavenetStackSpec {
        in_channels: 3,
        cond_channels: 0,
        filters: 4,
        kernel_size: 2,
        dilations: vec![1, 2, 4],
        one_by_one: false,
        resample: Resample::Down(2),
    };
    let stack = WavenetStack::new("s", spec).unwrap();
    let mut store = ParameterStore::<f64>::new();
    stack.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    // first block: gate 3->8 k2, out 4->4, skip 3->4; then two blocks gate 4->8 k2, out 4->4
    let expected = (3 * 8 * 2 + 8) + (4 * 4 + 4) + (3 * 4 + 4) + 2 * ((4 * 8 * 2 + 8) + (4 * 4 + 4));
    assert_eq!(stack.param_count(), expected);
    assert_eq!(store.num_scalars(), expected);

    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros([1, 3, 16]));
    stack.forward(&mut g, x, None).unwrap();
    assert_eq!(g.macs(), stack.macs(16).total());
    // gate is strided: 8*3*2*8; out 4*4*8; skip 4*3*8; then 2 blocks at length 8
    assert_eq!(stack.macs(16).total(), (8 * 3 * 2 * 8 + 4 * 4 * 8 + 4 * 3 * 8 + 2 * (8 * 4 * 2 * 8 + 4 * 4 * 8)) as u64);
}
