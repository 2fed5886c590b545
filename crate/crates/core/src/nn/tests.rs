use rand::Rng;

use super::*;
use crate::autodiff::{GradCheckConfig, Tensor};
use crate::error::Error;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore, id: ParamId, values: &[f64]) {
    let t = store.get_mut(id);
    t.data_mut().copy_from_slice(values);
}

fn zero_all(store: &mut ParamStore) {
    for t in store.tensors_mut() {
        t.data_mut().fill(0.0);
    }
}

#[test]
fn padding_rule_per_input_size() {
    let s = DEFAULT_STRIDES;
    assert_eq!(CnnSpec::auto_padding(16, 16, &s).unwrap(), [0, 2, 1]);
    assert_eq!(CnnSpec::auto_padding(128, 128, &s).unwrap(), [0, 0, 0]);
    assert_eq!(CnnSpec::auto_padding(65, 65, &s).unwrap(), [0, 0, 0]);
    assert_eq!(CnnSpec::auto_padding(65, 26, &s).unwrap(), [0, 1, 1]);
    assert!(matches!(CnnSpec::auto_padding(2, 2, &s), Err(Error::Config(_))));
}

#[test]
fn paper_depth_image_encodes_to_512() {
    let spec = CnnSpec::new(1, 128, 128, [32, 64, 64], 512).unwrap();
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", spec, &mut module_rng(0, "enc")).unwrap();
    let img = random_tensor(&[128, 128, 1], &mut module_rng(1, "img"));
    let mut g = Graph::inference(&store);
    let y = enc.encode_image(&mut g, &img).unwrap();
    assert_eq!(g.shape(y), &[512]);
}

#[test]
fn desk_spectrogram_encodes_to_feature_dim() {
    let spec = CnnSpec::new(2, 16, 16, [8, 16, 8], 64).unwrap();
    assert_eq!(spec.feature_map().unwrap(), (2, 2));
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", spec, &mut module_rng(0, "enc")).unwrap();
    let img = random_tensor(&[16, 16, 2], &mut module_rng(1, "img"));
    let mut g = Graph::inference(&store);
    let y = enc.encode_image(&mut g, &img).unwrap();
    assert_eq!(g.shape(y), &[64]);

    let wrong = Tensor::zeros([16, 16, 1]);
    assert!(matches!(enc.encode_image(&mut g, &wrong), Err(Error::Shape { .. })));
}

#[test]
fn zero_input_with_zero_biases_gives_zero_features() {
    let spec = CnnSpec::new(2, 16, 16, [8, 16, 8], 64).unwrap();
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", spec, &mut module_rng(3, "enc")).unwrap();
    for (name, t) in store.iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
    let mut g = Graph::inference(&store);
    let y = enc.encode_image(&mut g, &Tensor::zeros([16, 16, 2])).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_output_does_not_depend_on_tracking() {
    let spec = CnnSpec::new(2, 16, 16, [4, 4, 4], 8).unwrap();
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", spec, &mut module_rng(4, "enc")).unwrap();
    let img = random_tensor(&[16, 16, 2], &mut module_rng(5, "img"));
    let mut a = Graph::new(&store);
    let ya = enc.encode_image(&mut a, &img).unwrap();
    let mut b = Graph::inference(&store);
    let yb = enc.encode_image(&mut b, &img).unwrap();
    assert_eq!(a.value(ya), b.value(yb));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let spec = CnnSpec::new(2, 16, 16, [2, 2, 2], 3).unwrap();
    let mut store = ParamStore::new();
    let enc = CnnEncoder::new(&mut store, "enc", spec, &mut module_rng(6, "enc")).unwrap();
    let mut rng = module_rng(7, "bias");
    // nonzero biases so ReLU kinks are not all sitting on exact zeros
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") {
            let n = store.get(id).len();
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.2)).collect();
            set(&mut store, id, &vals);
        }
    }
    let x = random_tensor(&[1, 2, 16, 16], &mut module_rng(8, "x"));
    let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
        let xv = g.input(x.clone());
        let y = enc.forward(g, xv)?;
        let y = g.tanh(y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn equal_logits_average_the_values() {
    let mut store = ParamStore::new();
    let mha = Mha::new(&mut store, "mha", 1, 1, &mut module_rng(0, "mha")).unwrap();
    for l in [&mha.query, &mha.key, &mha.value, &mha.out] {
        set(&mut store, l.weight, &[1.0]);
    }
    set(&mut store, mha.out.bias.unwrap(), &[0.0]);
    let mut g = Graph::inference(&store);
    let q = g.input(Tensor::new([1, 1, 1], vec![1.0]).unwrap());
    let ctx = g.input(Tensor::new([1, 2, 1], vec![1.0, 1.0]).unwrap());
    let out = mha.forward(&mut g, q, ctx).unwrap();
    // context rows are both 1 so the keys tie; the values are 2 and 4
    let v = g.input(Tensor::new([1, 2, 1], vec![2.0, 4.0]).unwrap());
    let k = g.input(Tensor::new([1, 2, 1], vec![1.0, 1.0]).unwrap());
    let (o, w) = scaled_dot_product(&mut g, q, k, v, 1).unwrap();
    assert_eq!(g.value(o).data(), &[3.0]);
    assert_eq!(g.value(w).data(), &[0.5, 0.5]);
    assert_eq!(g.value(out.out).data(), &[1.0]);
}

#[test]
fn identical_keys_give_projected_mean_of_values() {
    let d = 8;
    let mut store = ParamStore::new();
    let mha = Mha::new(&mut store, "mha", d, 4, &mut module_rng(1, "mha")).unwrap();
    let mut rng = module_rng(2, "x");
    let row = random_tensor(&[d], &mut rng);
    let mut ctx = Vec::new();
    for _ in 0..5 {
        ctx.extend_from_slice(row.data());
    }
    let mut g = Graph::inference(&store);
    let q = g.input(random_tensor(&[1, 3, d], &mut rng));
    let c = g.input(Tensor::new([1, 5, d], ctx).unwrap());
    let out = mha.forward(&mut g, q, c).unwrap();

    // every context row is the same, so each head averages equal values
    let r = g.input(Tensor::new([1, d], row.data().to_vec()).unwrap());
    let v = mha.value.forward(&mut g, r).unwrap();
    let expect = mha.out.forward(&mut g, v).unwrap();
    let expect = g.value(expect).data().to_vec();
    for chunk in g.value(out.out).data().chunks(d) {
        for (a, b) in chunk.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let mha = Mha::new(&mut store, "mha", 12, 4, &mut module_rng(3, "mha")).unwrap();
    let mut rng = module_rng(4, "x");
    let mut g = Graph::inference(&store);
    let q = g.input(random_tensor(&[2, 3, 12], &mut rng));
    let c = g.input(random_tensor(&[2, 7, 12], &mut rng));
    let out = mha.forward(&mut g, q, c).unwrap();
    assert_eq!(g.shape(out.weights), &[8, 3, 7]);
    for row in g.value(out.weights).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn permuting_context_rows_leaves_output_unchanged() {
    let d = 8;
    let mut store = ParamStore::new();
    let mha = Mha::new(&mut store, "mha", d, 2, &mut module_rng(5, "mha")).unwrap();
    let mut rng = module_rng(6, "x");
    let q = random_tensor(&[1, 2, d], &mut rng);
    let ctx = random_tensor(&[1, 4, d], &mut rng);
    let perm = [2, 0, 3, 1];
    let mut shuffled = Vec::new();
    for &p in &perm {
        shuffled.extend_from_slice(&ctx.data()[p * d..(p + 1) * d]);
    }
    let run = |c: Tensor| {
        let mut g = Graph::inference(&store);
        let qv = g.input(q.clone());
        let cv = g.input(c);
        let out = mha.forward(&mut g, qv, cv).unwrap();
        g.value(out.out).data().to_vec()
    };
    let a = run(ctx.clone());
    let b = run(Tensor::new([1, 4, d], shuffled).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn head_count_must_divide_model_dim() {
    let mut store = ParamStore::new();
    let r = Mha::new(&mut store, "mha", 10, 4, &mut module_rng(0, "mha"));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let d = 4;
    let mut store = ParamStore::new();
    let mha = Mha::new(&mut store, "mha", d, 2, &mut module_rng(7, "mha")).unwrap();
    let mut rng = module_rng(8, "x");
    let bias = mha.out.bias.unwrap();
    let b = random_tensor(&[d], &mut rng);
    set(&mut store, bias, b.data());
    let q = store.add("q", random_tensor(&[2, 2, d], &mut rng));
    let c = store.add("c", random_tensor(&[2, 3, d], &mut rng));
    let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
        let (qv, cv) = (g.param(q), g.param(c));
        let out = mha.forward(g, qv, cv)?;
        let y = g.tanh(out.out)?;
        g.sum(y)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst());
}

fn gru_fixture(input: usize, hidden: usize, seed: u64) -> (ParamStore, Gru) {
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "gru", input, hidden, &mut module_rng(seed, "gru"));
    (store, gru)
}

fn gru_step(store: &ParamStore, gru: &Gru, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut g = Graph::inference(store);
    let xv = g.input(Tensor::new([1, x.len()], x.to_vec()).unwrap());
    let hv = g.input(Tensor::new([1, h.len()], h.to_vec()).unwrap());
    let out = gru.step(&mut g, xv, hv).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn zero_gru_keeps_zero_state() {
    let (mut store, gru) = gru_fixture(3, 2, 0);
    zero_all(&mut store);
    assert_eq!(gru_step(&store, &gru, &[0.0; 3], &[0.0; 2]), vec![0.0, 0.0]);
}

#[test]
fn zero_gru_halves_unit_state() {
    let (mut store, gru) = gru_fixture(3, 2, 0);
    zero_all(&mut store);
    // z = 0.5 and candidate = 0, so h' = 0.5 * 1
    assert_eq!(gru_step(&store, &gru, &[0.0; 3], &[1.0; 2]), vec![0.5, 0.5]);
}

#[test]
fn gru_state_stays_inside_unit_interval() {
    let (store, gru) = gru_fixture(4, 6, 1);
    let mut rng = module_rng(2, "x");
    let mut h = vec![0.0; 6];
    for _ in 0..200 {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-20.0..20.0)).collect();
        h = gru_step(&store, &gru, &x, &h);
        assert!(h.iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn closed_update_gate_carries_state_through() {
    let (mut store, gru) = gru_fixture(3, 4, 2);
    let mut b = vec![0.0; 12];
    b[..4].fill(-1000.0);
    set(&mut store, gru.bias, &b);
    let h = [0.3, -0.7, 0.123456789, -0.999];
    assert_eq!(gru_step(&store, &gru, &[5.0, -2.0, 1.0], &h), h.to_vec());
}

#[test]
fn gru_rejects_mismatched_dims() {
    let (store, gru) = gru_fixture(3, 4, 0);
    let mut g = Graph::inference(&store);
    let x = g.input(Tensor::zeros([1, 2]));
    let h = g.input(Tensor::zeros([1, 4]));
    assert!(matches!(gru.step(&mut g, x, h), Err(Error::Shape { .. })));
}

#[test]
fn gru_gradients_match_finite_differences() {
    let (mut store, gru) = gru_fixture(3, 4, 3);
    let mut rng = module_rng(4, "x");
    let b = random_tensor(&[12], &mut rng);
    set(&mut store, gru.bias, b.data());
    let x = store.add("x", random_tensor(&[2, 3], &mut rng));
    let h0 = store.add("h0", random_tensor(&[2, 4], &mut rng));
    let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
        let (xv, hv) = (g.param(x), g.param(h0));
        let h1 = gru.step(g, xv, hv)?;
        let h2 = gru.step(g, xv, h1)?;
        let sq = g.mul(h2, h2)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut module_rng(9, "lin"));
    let x = store.add("x", random_tensor(&[4, 3], &mut module_rng(10, "x")));
    let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
        let xv = g.param(x);
        let y = lin.forward(g, xv)?;
        let y = g.sigmoid(y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(report.passed(), "worst {}", report.worst());
}
