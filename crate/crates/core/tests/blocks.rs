mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jcrnet::blocks::{
    ChannelAttention, ColorCorrect, DetailEnhance, EncoderDecoder, Exposure, ExposureBlock, FeatureAggregate,
    IasResidual, Rcab, ResidualBlock, Sft, Ssb,
};
use jcrnet::{Ctx, Error, ParamStore, Registry, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Initializer draws plus a perturbation of every entry, so zero biases are not special.
fn params(reg: &Registry, seed: u64) -> ParamStore<f64> {
    let mut store = reg.initialize(seed).cast::<f64>();
    let mut r = rng(seed + 100);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    store
}

fn zero(store: &mut ParamStore<f64>, names: &[&str]) {
    for n in names {
        store.fill(n, 0.0).unwrap();
    }
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(1);
    let x = random(&mut r, &[1, 3, 5, 5], -1.0, 1.0);
    let w = random(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    let b = random(&mut r, &[2], -1.0, 1.0);
    for pad in [0, 1] {
        let (expected, [oh, ow]) =
            common::conv_oracle(x.data(), [1, 3, 5, 5], w.data(), [2, 3, 3, 3], b.data(), 1, pad);
        let tape = Tape::<f64>::new();
        let out = tape
            .constant(x.clone())
            .unwrap()
            .conv2d(tape.constant(w.clone()).unwrap(), Some(tape.constant(b.clone()).unwrap()), 1, pad)
            .unwrap();
        assert_eq!(out.shape(), vec![1, 2, oh, ow]);
        for (a, e) in out.value().data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_stamps_kernel_for_centered_impulse() {
    let mut x = Tensor::<f64>::zeros([1, 1, 5, 5]);
    x.data_mut()[12] = 1.0;
    let w = Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let tape = Tape::<f64>::new();
    let y = tape.constant(x).unwrap().conv2d(tape.constant(w).unwrap(), None, 1, 1).unwrap();
    let y = y.value();
    // cross-correlation stamps the kernel flipped around the impulse
    let window: Vec<f64> = (1..4).flat_map(|i| (1..4).map(move |j| i * 5 + j)).map(|k| y.data()[k]).collect();
    assert_eq!(window, vec![9., 8., 7., 6., 5., 4., 3., 2., 1.]);
    assert_eq!(y.data().iter().filter(|v| **v != 0.0).count(), 9);
}

#[test]
fn global_pool_of_one_plane() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()).unwrap();
    assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5]);
}

#[test]
fn residual_block_paths() {
    let mut reg = Registry::new();
    let block = ResidualBlock::new(&mut reg, "rb", 4);
    let mut r = rng(2);
    let x = random(&mut r, &[2, 4, 6, 6], -1.0, 1.0);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let out = block.forward(&ctx, xv).unwrap().value().data().to_vec();
        let r1 = block.res1.forward(&ctx, xv).unwrap();
        let r2 = block.res2.forward(&ctx, r1.sub(xv).unwrap()).unwrap();
        let manual = xv.sub(r2).unwrap().value().data().to_vec();
        (out, manual)
    };
    let full = params(&reg, 2);
    let (out, manual) = run(&full);
    assert_eq!(out, manual);

    // direct path alone
    let mut only_direct = full.clone();
    zero(&mut only_direct, &[&block.res1.conv.weight, &block.res1.conv.bias, &block.res2.conv.weight, &block.res2.conv.bias]);
    assert_eq!(run(&only_direct).0, x.data());

    // res2 fed by -x only: differs from the direct path and from the full composition
    let mut no_res1 = full.clone();
    zero(&mut no_res1, &[&block.res1.conv.weight, &block.res1.conv.bias]);
    let via_res2 = run(&no_res1).0;
    assert_ne!(via_res2, x.data());
    assert_ne!(via_res2, out);

    // perturbing res1 moves the output: the res1 -> res2 path carries signal
    let mut bumped = full.clone();
    bumped.get_mut(&block.res1.conv.weight).unwrap().data_mut()[0] += 0.05;
    assert_ne!(run(&bumped).0, out);
}

#[test]
fn residual_block_channel_mismatch() {
    let mut reg = Registry::new();
    let block = ResidualBlock::new(&mut reg, "rb", 4);
    let store = params(&reg, 0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(Tensor::<f64>::zeros([1, 3, 4, 4])).unwrap();
    assert!(matches!(block.forward(&ctx, x), Err(Error::Dimension { .. })));
}

#[test]
fn rcab_attention_broadcast_and_skip() {
    let mut reg = Registry::new();
    let rcab = Rcab::new(&mut reg, "rcab", 8, 4).unwrap();
    let store = params(&reg, 3);
    let mut r = rng(3);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(random(&mut r, &[2, 8, 5, 5], -1.0, 1.0)).unwrap();
    let t = rcab.trace(&ctx, x).unwrap();
    let (u, s, att, out) = (t.u.value(), t.scales.value(), t.attended.value(), t.out.value());
    assert_eq!(s.shape(), &[2, 8, 1, 1]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    for n in 0..2 {
        for c in 0..8 {
            for k in 0..25 {
                let i = (n * 8 + c) * 25 + k;
                assert_eq!(att.data()[i], u.data()[i] * s.data()[n * 8 + c]);
                // skip purity, bit-exact
                assert_eq!(out.data()[i], x.value().data()[i] + att.data()[i]);
            }
        }
    }
}

#[test]
fn rcab_half_gate_and_bad_ratio() {
    let mut reg = Registry::new();
    let rcab = Rcab::new(&mut reg, "rcab", 8, 2).unwrap();
    let mut store = params(&reg, 4);
    zero(&mut store, &[&rcab.attention.w2]);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(random(&mut rng(4), &[1, 8, 4, 4], -1.0, 1.0)).unwrap();
    let t = rcab.trace(&ctx, x).unwrap();
    for (a, u) in t.attended.value().data().iter().zip(t.u.value().data()) {
        assert_eq!(*a, u / 2.0);
    }
    assert!(matches!(Rcab::new(&mut Registry::new(), "r", 6, 4), Err(Error::Config(_))));
    assert!(ChannelAttention::new(&mut Registry::new(), "a", 8, 0).is_err());
}

#[test]
fn encoder_decoder_shapes_and_skips() {
    for depth in [0, 1, 2] {
        let mut reg = Registry::new();
        let ed = EncoderDecoder::new(&mut reg, "ed", 16, depth);
        let store = params(&reg, 5);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store).unwrap();
        let x = tape.constant(random(&mut rng(5), &[1, 16, 16, 16], -1.0, 1.0)).unwrap();
        let y = ed.forward(&ctx, x).unwrap();
        assert_eq!(y.shape(), vec![1, 16, 16, 16]);
        if depth > 0 {
            let ablated = ed.forward_with_skips(&ctx, x, 0.0).unwrap();
            assert!(ablated.value().max_abs_diff(&y.value()) > 1e-3, "depth {depth}");
        }
    }
    let mut reg = Registry::new();
    let ed = EncoderDecoder::new(&mut reg, "ed", 4, 2);
    let store = params(&reg, 5);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(Tensor::<f64>::zeros([1, 4, 6, 8])).unwrap();
    assert!(matches!(ed.forward(&ctx, x), Err(Error::Dimension { .. })));
}

#[test]
fn ssb_mask_and_prediction_paths() {
    let mut reg = Registry::new();
    let ssb = Ssb::new(&mut reg, "ssb", 8);
    let full = params(&reg, 6);
    let mut r = rng(6);
    let f = random(&mut r, &[1, 8, 6, 6], -1.0, 1.0);
    let img = random(&mut r, &[1, 3, 6, 6], 0.0, 1.0);
    let run = |store: &ParamStore<f64>, img: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store).unwrap();
        let (out, aux) = ssb
            .forward(&ctx, tape.constant(f.clone()).unwrap(), tape.constant(img.clone()).unwrap())
            .unwrap();
        (out.value().data().to_vec(), aux.value().data().to_vec())
    };

    let mut flat_mask = full.clone();
    zero(&mut flat_mask, &[&ssb.mask.weight, &ssb.mask.bias]);
    let (out, _) = run(&flat_mask, &img);
    for (o, v) in out.iter().zip(f.data()) {
        assert_eq!(*o, 1.5 * v);
    }

    let mut no_pred = full.clone();
    zero(&mut no_pred, &[&ssb.pred.weight, &ssb.pred.bias]);
    assert_eq!(run(&no_pred, &img).1, img.data());

    // image content reaches the features only through the mask
    let mut brighter = img.clone();
    brighter.data_mut().iter_mut().for_each(|v| *v += 0.1);
    let (a, _) = run(&full, &img);
    let (b, _) = run(&full, &brighter);
    assert!(a.iter().zip(&b).any(|(p, q)| (p - q).abs() > 1e-6));
}

#[test]
fn sft_matches_loop_oracle() {
    let mut reg = Registry::new();
    let sft = Sft::new(&mut reg, "sft", 4, 6);
    let store = params(&reg, 7);
    let mut r = rng(7);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let s1 = tape.constant(random(&mut r, &[2, 6, 5, 5], -1.0, 1.0)).unwrap();
    let cond = tape.constant(random(&mut r, &[2, 4, 5, 5], -1.0, 1.0)).unwrap();
    let out = sft.forward(&ctx, s1, cond).unwrap().value();
    let (sc, sh) = sft.heads(&ctx, cond).unwrap();
    let (sc, sh, s1) = (sc.value(), sh.value(), s1.value());
    for i in 0..out.numel() {
        assert_eq!(out.data()[i], sc.data()[i] * s1.data()[i] + sh.data()[i]);
    }
    let misaligned = tape.constant(Tensor::<f64>::zeros([2, 4, 4, 5])).unwrap();
    assert!(matches!(sft.forward(&ctx, tape.constant((*s1).clone()).unwrap(), misaligned), Err(Error::Dimension { .. })));
}

#[test]
fn detail_branches_do_not_mix_channels() {
    let mut reg = Registry::new();
    let de = DetailEnhance::new(&mut reg, "de", 4);
    let store = params(&reg, 8);
    let mut r = rng(8);
    let x = random(&mut r, &[1, 3, 6, 6], 0.0, 1.0);
    let run = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store).unwrap();
        de.forward(&ctx, tape.constant(x.clone()).unwrap()).unwrap().value().data().to_vec()
    };
    let base = run(&x);
    assert_eq!(base.len(), 3 * 4 * 36);
    // finite-difference probe: bump the G plane, R and B branch outputs stay bit-identical
    let mut bumped = x.clone();
    for v in &mut bumped.data_mut()[36..72] {
        *v += 1e-3;
    }
    let moved = run(&bumped);
    let branch = 4 * 36;
    assert_eq!(&moved[..branch], &base[..branch]);
    assert_eq!(&moved[2 * branch..], &base[2 * branch..]);
    assert_ne!(&moved[branch..2 * branch], &base[branch..2 * branch]);

    // analytic Jacobian block dR/dG is exactly zero
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let xv = tape.leaf(x.clone().with_requires_grad(true)).unwrap();
    let r_out = de.forward(&ctx, xv).unwrap().slice_channels(0, 4).unwrap();
    let g = r_out.sum().unwrap().backward().unwrap();
    let gx = g.get(xv).unwrap();
    assert!(gx[36..].iter().all(|&v| v == 0.0));

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let two = tape.constant(Tensor::<f64>::zeros([1, 2, 6, 6])).unwrap();
    assert!(matches!(de.forward(&ctx, two), Err(Error::Dimension { .. })));
}

#[test]
fn color_correct_divisor_regimes() {
    let mut reg = Registry::new();
    let cc = ColorCorrect::new(&mut reg, "cc", 6, 8, 0.01);
    let mut r = rng(9);
    let xa = random(&mut r, &[1, 3, 6, 6], 0.0, 1.0);
    let refined = random(&mut r, &[1, 6, 6, 6], -1.0, 1.0);
    let with_head = |bias: f64| {
        let mut store = params(&reg, 9);
        store.fill(&cc.head.weight, 0.0).unwrap();
        store.fill(&cc.head.bias, bias).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store).unwrap();
        let xj = cc
            .forward(&ctx, tape.constant(xa.clone()).unwrap(), tape.constant(refined.clone()).unwrap())
            .unwrap();
        xj.value().data().to_vec()
    };
    // sigmoid(0) = 0.5 halves the divisor
    for (o, a) in with_head(0.0).iter().zip(xa.data()) {
        assert_eq!(*o, 2.0 * a);
    }
    // saturated at 1: identity
    assert_eq!(with_head(60.0), xa.data());
    // clamped at the floor: gain capped at 1 / 0.01
    let floor = with_head(-60.0);
    assert!(floor.iter().all(|v| v.is_finite()));
    for (o, a) in floor.iter().zip(xa.data()) {
        assert_eq!(*o, a / 0.01);
        assert!(*o <= 100.0 * a * (1.0 + 1e-15));
    }

    // illumination stays inside [floor, 1] for random heads
    let store = params(&reg, 10);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let l = cc.illumination(&ctx, tape.constant(refined.clone()).unwrap()).unwrap().value();
    assert!(l.data().iter().all(|&v| (0.01..=1.0).contains(&v)));
}

#[test]
fn feature_aggregate_is_order_sensitive() {
    let mut reg = Registry::new();
    let agg = FeatureAggregate::new(&mut reg, "agg", 8, 4).unwrap();
    let store = params(&reg, 11);
    let mut r = rng(11);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let a = tape.constant(random(&mut r, &[1, 8, 4, 4], -1.0, 1.0)).unwrap();
    let b = tape.constant(random(&mut r, &[1, 8, 4, 4], -1.0, 1.0)).unwrap();
    let ab = agg.forward(&ctx, a, b).unwrap();
    let ba = agg.forward(&ctx, b, a).unwrap();
    assert_eq!(ab.shape(), vec![1, 8, 4, 4]);
    assert!(ab.value().max_abs_diff(&ba.value()) > 1e-3);
    let c = tape.constant(Tensor::<f64>::zeros([1, 8, 2, 4])).unwrap();
    assert!(agg.forward(&ctx, a, c).is_err());
}

#[test]
fn exposure_bottleneck_extents_and_offset_sign() {
    let mut reg = Registry::new();
    let block = ExposureBlock::new(&mut reg, "l", 64, Exposure::Lighten).unwrap();
    let shape = |name: &str| reg.decls().iter().find(|d| d.name == name).unwrap().shape.clone();
    assert_eq!(shape(&block.encode.conv.weight), vec![32, 64, 3, 3]);
    assert_eq!(shape(&block.offset.conv.weight), vec![32, 32, 3, 3]);
    assert_eq!(shape(&block.decode.weight), vec![64, 32, 3, 3]);

    let mut store = params(&reg, 12);
    store.fill(&block.offset.act.slope, 0.0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(random(&mut rng(12), &[1, 64, 4, 4], -1.0, 1.0)).unwrap();
    let (encoded, offset) = block.parts(&ctx, x).unwrap();
    assert_eq!(encoded.shape(), vec![1, 32, 4, 4]);
    assert!(offset.value().data().iter().all(|&v| v >= 0.0));
    assert_eq!(block.forward(&ctx, x).unwrap().shape(), vec![1, 64, 4, 4]);
    assert!(ExposureBlock::new(&mut Registry::new(), "odd", 7, Exposure::Darken).is_err());
}

#[test]
fn lighten_minus_darken_is_decoded_double_offset() {
    let mut reg = Registry::new();
    let light = ExposureBlock::new(&mut reg, "x", 8, Exposure::Lighten).unwrap();
    let dark = ExposureBlock { mode: Exposure::Darken, ..light.clone() };
    let mut store = params(&reg, 13);
    store.fill(&light.decode.bias, 0.0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let x = tape.constant(random(&mut rng(13), &[1, 8, 4, 4], -1.0, 1.0)).unwrap();
    let diff = light.forward(&ctx, x).unwrap().sub(dark.forward(&ctx, x).unwrap()).unwrap();
    let (_, offset) = light.parts(&ctx, x).unwrap();
    let expected = offset
        .affine(2.0, 0.0)
        .unwrap()
        .conv2d(ctx.p(&light.decode.weight).unwrap(), None, 1, 1)
        .unwrap();
    assert!(diff.value().max_abs_diff(&expected.value()) < 1e-12);
}

#[test]
fn back_projection_matches_hand_trace() {
    let mut reg = Registry::new();
    let bp = IasResidual::new(&mut reg, "bp", 64, 1.0).unwrap();
    let mut store = params(&reg, 14);
    store.fill(&bp.lambda, 0.75).unwrap();
    let xf = random(&mut rng(14), &[1, 64, 2, 2], -1.0, 1.0);

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let t = bp.trace(&ctx, tape.constant(xf.clone()).unwrap()).unwrap();

    // three separate calls on fresh tapes, combined by hand
    let call = |block: &ExposureBlock, input: &Tensor<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store).unwrap();
        (*block.forward(&ctx, tape.constant(input.clone()).unwrap()).unwrap().value()).clone()
    };
    let pred = call(&bp.l1, &xf);
    let darkened = call(&bp.d, &pred);
    let residual: Vec<f64> = xf.data().iter().zip(darkened.data()).map(|(x, d)| 0.75 * x - d).collect();
    let residual = Tensor::new(vec![1, 64, 2, 2], residual).unwrap();
    let rf = call(&bp.l2, &residual);
    assert_eq!(t.pred.value().data(), pred.data());
    assert_eq!(t.darkened.value().data(), darkened.data());
    assert_eq!(t.residual_map.value().data(), residual.data());
    assert_eq!(t.rf.value().data(), rf.data());

    // weight zero: the residual map is the negated darkened prediction
    store.fill(&bp.lambda, 0.0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store).unwrap();
    let t = bp.trace(&ctx, tape.constant(xf.clone()).unwrap()).unwrap();
    let neg: Vec<f64> = darkened.data().iter().map(|d| -d).collect();
    assert_eq!(t.residual_map.value().data(), &neg[..]);
}

#[test]
fn parameter_names_are_prefixed_and_unique() {
    let model = jcrnet::Jcrnet::new(jcrnet::ModelConfig::desk()).unwrap();
    let names: Vec<&str> = model.registry().decls().iter().map(|d| d.name.as_str()).collect();
    let unique: std::collections::BTreeSet<&str> = names.iter().copied().collect();
    assert_eq!(unique.len(), names.len());
    assert!(names.iter().all(|n| n.starts_with("fes.") || n.starts_with("jrs.") || n.starts_with("ias.")));
    let w1 = model.registry().decls().iter().find(|d| d.name == "fes.rcab.ca.w1").unwrap();
    assert_eq!(w1.shape, vec![4, 16]);
}
