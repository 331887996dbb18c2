use simdiff::params::{Bound, ParamSet};
use simdiff::rng;
use simdiff::tensor::gradcheck::{check_gradients, GradCheck};
use simdiff::tensor::{Graph, Tensor};
use simdiff::trainer::RunConfig;
use simdiff::uvit::{self, BlockOrder, Cond, Patching, Trace, UViT, UViTConfig};
use simdiff::verify::tiny_uvit;

fn model_32(patching: Patching) -> UViT {
    let cfg = UViTConfig {
        image_size: 32,
        in_channels: 3,
        base_channels: 16,
        emb_channels: 32,
        channel_multiplier: vec![1, 2, 2],
        num_res_blocks: vec![1, 1],
        num_transformer_blocks: 1,
        num_heads: 2,
        patching,
        num_classes: 10,
        ..UViTConfig::default()
    };
    UViT::new(cfg, (-15.0, 15.0)).unwrap()
}

#[test]
fn fresh_model_predicts_exact_zero() {
    for patching in [Patching::None, Patching::Dwt(1), Patching::SpaceToDepth(2), Patching::ConvPatch(2)] {
        let m = model_32(patching);
        let p = m.init(3);
        let z: Tensor<f32> = rng::normal(&mut rng::stream(0, "z", 0), &[2, 32, 32, 3]);
        let v = m.predict(&p, &z, Cond { logsnr: &[-4.0, 9.0], classes: &[Some(7), None] }).unwrap();
        assert_eq!(v.shape(), &[2, 32, 32, 3]);
        assert_eq!(v.max_abs(), 0.0, "{patching}");
    }
}

#[test]
fn toy_parameter_count_is_frozen() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.cfg")).unwrap();
    let run = RunConfig::parse(&text, &[]).unwrap();
    let m = run.build_model().unwrap();
    assert_eq!(m.param_count(), 568_833);
    assert_eq!(m.init(0).count(), 568_833);
}

#[test]
fn imagenet_configs_parse() {
    for r in [128, 256, 512] {
        let path = format!("{}/../../configs/paper/uvit_{r}.cfg", env!("CARGO_MANIFEST_DIR"));
        let run = RunConfig::parse(&std::fs::read_to_string(path).unwrap(), &[]).unwrap();
        assert_eq!(run.model.image_size, r);
        assert_eq!(run.model.num_transformer_blocks, 36);
        let m = run.build_model().unwrap();
        // the transformer always runs on a 16×16 grid
        assert_eq!(m.cfg.resolution(m.cfg.levels()), 16);
    }
}

#[test]
fn dropout_gated_by_resolution() {
    let mut cfg = model_32(Patching::None).cfg;
    cfg.dropout = 0.1;
    cfg.transformer_dropout = 0.2;
    cfg.dropout_from_resolution = 16;
    let m = UViT::new(cfg, (-15.0, 15.0)).unwrap();
    let sites = m.dropout_sites();
    for s in &sites {
        let want = if s.name.starts_with("transformer") {
            0.2
        } else if s.resolution <= 16 {
            0.1
        } else {
            0.0
        };
        assert_eq!(s.rate, want, "{s:?}");
    }

    let g = Graph::<f32>::with_mode(true, 1);
    let p = m.init(0).bind(&g, true);
    let x = g.constant(Tensor::zeros(&[1, 32, 32, 3]));
    let (_, trace) = m.forward_traced(&g, &p, x, Cond { logsnr: &[0.0], classes: &[Some(1)] }).unwrap();
    let active: Vec<_> = sites.into_iter().filter(|s| s.rate > 0.0).collect();
    assert_eq!(trace.dropout_applied, active);
    assert_eq!(trace.skips_pushed, trace.skips_popped);
}

fn perturbed(m: &UViT, seed: u64) -> ParamSet<f64> {
    let mut r = rng::stream(seed, "perturb", 0);
    m.init(seed)
        .cast::<f64>()
        .iter()
        .map(|(n, t)| {
            let e: Tensor<f64> = rng::normal(&mut r, t.shape());
            (n.to_string(), t.zip_map(&e, |a, b| a + 0.3 * b).unwrap())
        })
        .collect()
}

#[test]
fn attention_is_permutation_equivariant() {
    let m = tiny_uvit().unwrap();
    let p = perturbed(&m, 2);
    let c = m.cfg.transformer_channels();
    let n = 6;
    let x: Tensor<f64> = rng::normal(&mut rng::stream(1, "x", 0), &[1, n, c]);
    let perm = [3, 0, 5, 1, 4, 2];
    let xp = Tensor::from_fn(&[1, n, c], |i| x.data()[perm[i / c] * c + i % c]);
    let run = |x: &Tensor<f64>| {
        let g = Graph::<f64>::new();
        let b = p.bind(&g, false);
        let y = uvit::self_attention(&g, &b, "transformer0", g.constant(x.clone()), m.cfg.num_heads).unwrap();
        let y = g.value(y).clone();
        y
    };
    let (y, yp) = (run(&x), run(&xp));
    for i in 0..n * c {
        assert!((yp.data()[i] - y.data()[perm[i / c] * c + i % c]).abs() < 1e-12);
    }
}

#[test]
fn film_resblock_gradients() {
    let m = tiny_uvit().unwrap();
    let p = perturbed(&m, 4);
    let prefix = "down0/res0";
    let names: Vec<String> = p.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    let c = m.cfg.level_channels(0);
    let mut r = rng::stream(5, "film", 0);
    let mut inputs = vec![rng::normal::<f64>(&mut r, &[2, 4, 4, c]), rng::normal::<f64>(&mut r, &[2, m.cfg.emb_channels])];
    inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
    let report = check_gradients(&inputs, GradCheck { step: 1e-5, ..GradCheck::default() }, |g, v| {
        let bound = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
        uvit::resnet_block(g, &bound, prefix, v[0], v[1], None, 0.0, &mut Trace::default(), 4)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

#[test]
fn block_order_changes_the_function() {
    let m = tiny_uvit().unwrap();
    let p = perturbed(&m, 6);
    let c = m.cfg.transformer_channels();
    let x: Tensor<f64> = rng::normal(&mut rng::stream(7, "x", 0), &[2, 4, c]);
    let e: Tensor<f64> = rng::normal(&mut rng::stream(8, "e", 0), &[2, m.cfg.emb_channels]);
    let run = |order| {
        let g = Graph::<f64>::new();
        let b = p.bind(&g, false);
        let y = uvit::transformer_block(&g, &b, "transformer0", g.constant(x.clone()), g.constant(e.clone()), 2, 0.0, order)
            .unwrap();
        let y = g.value(y).clone();
        y
    };
    assert!(run(BlockOrder::MlpFirst).max_abs_diff(&run(BlockOrder::AttentionFirst)) > 1e-3);
}

#[test]
fn null_class_is_its_own_row() {
    let m = tiny_uvit().unwrap();
    let p = perturbed(&m, 9);
    let g = Graph::<f64>::new();
    let b = p.bind(&g, false);
    let emb = m.conditioning(&g, &b, Cond { logsnr: &[1.0; 4], classes: &[Some(0), Some(2), None, None] }).unwrap();
    let emb = g.value(emb).clone();
    let e = m.cfg.emb_channels;
    let row = |i: usize| &emb.data()[i * e..(i + 1) * e];
    assert_ne!(row(0), row(2));
    assert_ne!(row(1), row(2));
    assert_eq!(row(2), row(3));
    assert!(m.conditioning(&g, &b, Cond { logsnr: &[1.0], classes: &[Some(3)] }).is_err());
}
