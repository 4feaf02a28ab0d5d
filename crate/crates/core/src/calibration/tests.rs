use super::*;
use crate::nn::params::he_normal;
use rand::Rng;

fn desk_split(seed: u64) -> BackboneSplit {
    split_backbone(&Classifier::new(BackboneConfig::desk(6), seed).unwrap())
}

fn inputs(b: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng::stream(seed, &[]);
    let x = he_normal(&[b, 3, 16, 16], 2, &mut r);
    let f = he_normal(&[b, 1, 16, 16], 2, &mut r);
    (x, f)
}

fn perturb<T: Scalar>(store: &mut ParamStore<T>, scale: f64, seed: u64) {
    let mut r = rng::stream(seed, &[]);
    for p in store.entries_mut() {
        for v in p.value.data_mut() {
            *v += T::lit(r.random_range(-scale..scale));
        }
    }
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn identity_at_init_for_every_module_subset() {
    let split = desk_split(1);
    let (x, f) = inputs(2, 2);
    let plain = split.classifier.predict(&x);
    for bits in 0..64u32 {
        let mut cfg = CalibConfig::desk();
        for (i, name) in MODULE_NAMES.iter().enumerate() {
            cfg.modules.set(name, bits & (1 << i) != 0).unwrap();
        }
        if cfg.modules.channel_concat && !cfg.modules.residual {
            // Fresh concat without the skip is a random projection.
            continue;
        }
        let net = CalibrationNet::new(cfg, &split, 3).unwrap();
        let out = net.predict(&split, &x, &f).unwrap();
        assert_eq!(max_abs_diff(&out, &plain), 0.0, "modules {:?}", net.cfg.modules.enabled());
    }
}

#[test]
fn gates_stay_inside_zero_two() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::from_vec(&[5], vec![-30.0, -1.0, 0.0, 1.0, 30.0]).unwrap());
    let s = double_sigmoid(&mut g, z);
    let v = g.value(s).data().to_vec();
    assert!(v.iter().all(|&x| x > 0.0 && x < 2.0 + 1e-12));
    assert!((v[2] - 1.0).abs() < 1e-12);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn ensemble_endpoints() {
    let m = Tensor::from_vec(&[1, 3], vec![1.0f32, -2.0, 5.0]).unwrap();
    let o = Tensor::from_vec(&[1, 3], vec![3.0f32, 0.0, 5.0]).unwrap();
    let run = |gate: f32| {
        let mut g = Graph::<f32>::new();
        let (mv, ov) = (g.constant(m.clone()), g.constant(o.clone()));
        let p = g.constant(Tensor::full(&[3], gate));
        let e = ensemble(&mut g, mv, ov, p);
        g.take_value(e)
    };
    assert_eq!(run(-1e4), o);
    assert_eq!(run(1e4), m);
    assert_eq!(run(0.0).data(), &[2.0, -1.0, 5.0]);
}

#[test]
fn spatial_ops_broadcast_over_channels() {
    let mut r = rng::stream(4, &[]);
    let mut store = ParamStore::<f64>::new();
    let spec = ConvStackSpec {
        in_channels: 1,
        hidden: 4,
        out_channels: 1,
        layers: 3,
        kernel: 3,
    };
    let stack = ConvStack::init(&mut store, "s", spec, FinalInit::Xavier, &mut r);
    let x: Tensor<f64> = he_normal(&[1, 3, 5, 5], 2, &mut r);
    let fid: Tensor<f64> = he_normal(&[1, 1, 5, 5], 2, &mut r);
    let z = stack.infer(&store, &fid);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (xv, fv) = (g.constant(x.clone()), g.constant(fid));
    let m = spatial_multiply(&mut g, &p, &stack, xv, fv);
    let a = spatial_add(&mut g, &p, &stack, xv, fv);
    for c in 0..3 {
        for k in 0..25 {
            let xi = x.data()[c * 25 + k];
            let gate = 2.0 * crate::nn::graph::sigmoid(z.data()[k]);
            assert!((g.value(m).data()[c * 25 + k] - xi * gate).abs() < 1e-12);
            assert!((g.value(a).data()[c * 25 + k] - (xi + z.data()[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn channel_feature_reads_both_flatten_orders() {
    // Row-major flatten of a 2x4 map versus its transpose.
    let fid = FidelityMap::new(2, 4, (0..8).map(|v| v as f32).collect(), FidelityMetric::L1).unwrap();
    let v = channel_feature(&fid, 16, Interp::Nearest).unwrap();
    assert_eq!(&v[..8], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    assert_eq!(&v[8..], &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);

    // A symmetric map gives identical halves; an asymmetric one does not.
    let sym = FidelityMap::new(3, 3, vec![1.0, 2.0, 3.0, 2.0, 5.0, 6.0, 3.0, 6.0, 9.0], FidelityMetric::L1).unwrap();
    let v = channel_feature(&sym, 8, Interp::Bilinear).unwrap();
    assert_eq!(&v[..4], &v[4..]);
    let asym = FidelityMap::new(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], FidelityMetric::L1).unwrap();
    let v = channel_feature(&asym, 8, Interp::Bilinear).unwrap();
    assert_ne!(&v[..4], &v[4..]);
    assert!(channel_feature(&asym, 7, Interp::Bilinear).is_err());
}

#[test]
fn graph_channel_feature_matches_standalone() {
    let (_, f) = inputs(1, 7);
    let fid = FidelityMap::new(16, 16, f.data().to_vec(), FidelityMetric::L1).unwrap();
    let direct = channel_feature(&fid, 64, Interp::Bilinear).unwrap();
    let mut g = Graph::<f32>::new();
    let fv = g.constant(f);
    let v = channel_feature_graph(&mut g, fv, 64, Interp::Bilinear);
    assert_eq!(g.value(v).shape(), &[1, 64]);
    assert_eq!(g.value(v).data(), &direct[..]);
}

#[test]
fn concat_input_is_twice_the_feature_width() {
    let c = Classifier::new(BackboneConfig::resnet50_like(10), 0).unwrap();
    let split = split_backbone(&c);
    let cfg = CalibConfig {
        fc_hidden: 16,
        conv_hidden: 2,
        ..CalibConfig::desk()
    };
    let net = CalibrationNet::new(cfg, &split, 0).unwrap();
    assert_eq!(net.channel_concat.dims, vec![4096, 16, 2048]);
    assert_eq!(net.channel_mult.dims, vec![2048, 16, 2048]);
    assert_eq!(net.num_sites(), 6);
}

#[test]
fn disabled_modules_are_frozen() {
    let split = desk_split(0);
    let mut cfg = CalibConfig::desk();
    cfg.modules.spatial_add = false;
    cfg.modules.ensemble = false;
    let net = CalibrationNet::new(cfg, &split, 0).unwrap();
    for p in net.params.iter() {
        let off = p.name.contains(".add.") || p.name.starts_with("ensemble");
        assert_eq!(p.trainable, !off, "{}", p.name);
    }
    assert!(ModuleFlags::all().get("bogus").is_err());
}

#[test]
fn very_negative_ensemble_gate_recovers_the_backbone() {
    let split = desk_split(5);
    let mut net = CalibrationNet::new(CalibConfig::desk(), &split, 1).unwrap();
    perturb(&mut net.params, 0.5, 9);
    let (x, f) = inputs(3, 10);
    let plain = split.classifier.predict(&x);
    assert!(max_abs_diff(&net.predict(&split, &x, &f).unwrap(), &plain) > 1e-3);
    let e = net.ensemble_index();
    net.params.get_mut(e).data_mut().fill(-1e4);
    assert_eq!(net.predict(&split, &x, &f).unwrap(), plain);
}

#[test]
fn gradients_match_finite_differences() {
    let split = desk_split(2);
    let cfg = CalibConfig {
        conv_hidden: 3,
        fc_hidden: 8,
        ..CalibConfig::desk()
    };
    let net = CalibrationNet::new(cfg, &split, 4).unwrap();
    let mut store: ParamStore<f64> = net.params.cast();
    perturb(&mut store, 0.3, 11);
    let backbone: ParamStore<f64> = split.classifier.params.cast();
    let (x, f) = inputs(2, 12);
    let (x, f) = (x.cast::<f64>(), f.cast::<f64>());
    let targets = [1usize, 4];
    let loss = |store: &ParamStore<f64>, grads: bool| {
        let mut g = Graph::<f64>::new();
        let pb = bind_frozen(&backbone, &mut g);
        let pc = store.bind(&mut g);
        let (xv, fv) = (g.constant(x.clone()), g.constant(f.clone()));
        let out = net.forward(&mut g, &split, &pb, &pc, xv, fv);
        let l = g.smoothed_cross_entropy(out, &targets, 0.1);
        let value = g.value(l).data()[0];
        let gr = if grads {
            g.backward(l);
            store.grads(&g, &pc)
        } else {
            Vec::new()
        };
        (value, gr)
    };
    let (_, analytic) = loss(&store, true);
    let mut r = rng::stream(13, &[]);
    let h = 1e-5;
    for (pi, p) in net.params.iter().enumerate() {
        for _ in 0..3 {
            let k = r.random_range(0..p.value.len());
            let mut plus = store.clone();
            plus.get_mut(pi).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(pi).data_mut()[k] -= h;
            let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let tol = 1e-4 * a.abs().max(numeric.abs()) + 1e-8;
            assert!((a - numeric).abs() <= tol, "{} [{k}]: analytic {a} numeric {numeric}", p.name);
        }
    }
}

#[test]
fn checkpoint_binds_to_its_backbone() {
    let split = desk_split(3);
    let mut net = CalibrationNet::new(CalibConfig::desk(), &split, 2).unwrap();
    perturb(&mut net.params, 0.1, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.ckpt");
    net.save(&path).unwrap();
    let back = CalibrationNet::load(&path, &split).unwrap();
    assert_eq!(back.params.checksum(), net.params.checksum());
    assert_eq!(back.cfg, net.cfg);
    let other = desk_split(4);
    assert!(matches!(CalibrationNet::load(&path, &other), Err(Error::BackboneMismatch { .. })));
    let (x, f) = inputs(1, 0);
    assert!(matches!(net.predict(&other, &x, &f), Err(Error::BackboneMismatch { .. })));
}
