use approx::assert_relative_eq;
use proptest::prelude::*;

use faceprior::autograd::Graph;
use faceprior::dni::{interpolate, pearson};
use faceprior::model_io::{Checkpoint, CheckpointMeta, Params};
use faceprior::nn::cs_sft;
use faceprior::tensor::Tensor;

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, n)
}

fn ckpt(w: Vec<f32>, b: Vec<f32>) -> Checkpoint {
    let mut p = Params::new();
    p.insert("fc.weight".into(), Tensor::new([2, 3], w).unwrap());
    p.insert("fc.bias".into(), Tensor::new([2], b).unwrap());
    Checkpoint::new(CheckpointMeta { arch: "toy".into(), ..Default::default() }, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cs_sft_passes_prior_channels_through(
        c in 2usize..8,
        k_frac in 0.0f64..1.0,
        h in 1usize..5,
        w in 1usize..5,
        seed in any::<u64>(),
    ) {
        let k = ((c as f64 * k_frac) as usize).min(c - 1);
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 4.0 - 2.0
        };
        let f = Tensor::from_fn([1, c, h, w], |_| next());
        let g = Graph::<f32>::new();
        let fv = g.constant(f.clone());
        let a = g.constant(Tensor::from_fn([1, c - k, h, w], |_| next()));
        let b = g.constant(Tensor::from_fn([1, c - k, h, w], |_| next()));
        let out = cs_sft(&g, fv, a, b, k).unwrap();
        let out = g.value(out).clone();
        prop_assert_eq!(&out.data()[..k * h * w], &f.data()[..k * h * w]);
    }

    #[test]
    fn interpolation_is_symmetric_and_affine(
        wa in values(6), ba in values(2), wb in values(6), bb in values(2), step in 0usize..=20,
    ) {
        let alpha = step as f64 / 20.0;
        let (a, b) = (ckpt(wa, ba), ckpt(wb, bb));
        let ab = interpolate(&a, &b, alpha).unwrap();
        let ba = interpolate(&b, &a, 1.0 - alpha).unwrap();
        prop_assert_eq!(&ab.params, &ba.params);
        for (name, t) in &ab.params {
            for (i, &v) in t.data().iter().enumerate() {
                let expect = alpha * a.params[name].data()[i] as f64 + (1.0 - alpha) * b.params[name].data()[i] as f64;
                prop_assert!((v as f64 - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn pearson_is_affine_invariant(a in values(12), b in values(12), scale in 0.1f32..5.0, shift in -3.0f32..3.0) {
        let base = pearson(&a, &b);
        let moved: Vec<f32> = a.iter().map(|v| v * scale + shift).collect();
        let r = pearson(&moved, &b);
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - base).abs() < 1e-4, "{} vs {}", r, base);
    }

    #[test]
    fn gram_ignores_spatial_permutation(data in values(3 * 6), rot in 1usize..6) {
        let g = Graph::<f64>::new();
        let x: Tensor<f64> = Tensor::new([1, 3, 2, 3], data.iter().map(|&v| v as f64).collect()).unwrap();
        let permuted = Tensor::from_fn([1, 3, 2, 3], |i| {
            let (c, p) = (i / 6, i % 6);
            x.data()[c * 6 + (p + rot) % 6]
        });
        let ga = g.gram(g.constant(x)).unwrap();
        let gb = g.gram(g.constant(permuted)).unwrap();
        let (va, vb) = (g.value(ga).clone(), g.value(gb).clone());
        for (p, q) in va.data().iter().zip(vb.data()) {
            assert_relative_eq!(*p, *q, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_loop(
        x in values(2 * 5 * 4), wt in values(3 * 2 * 3 * 3), bias in values(3), stride in 1usize..3, pad in 0usize..2,
    ) {
        let (c, h, w, o, k) = (2, 5, 4, 3, 3);
        let g = Graph::<f64>::new();
        let xt = Tensor::new([1, c, h, w], x.iter().map(|&v| v as f64).collect()).unwrap();
        let wtt = Tensor::new([o, c, k, k], wt.iter().map(|&v| v as f64).collect()).unwrap();
        let bt = Tensor::new([o], bias.iter().map(|&v| v as f64).collect()).unwrap();
        let y = g.conv2d(g.constant(xt.clone()), g.constant(wtt.clone()), Some(g.constant(bt.clone())), stride, pad).unwrap();
        let y = g.value(y).clone();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(y.shape(), &[1, o, ho, wo][..]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bt.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += xt.data()[(ic * h + iy as usize) * w + ix as usize]
                                    * wtt.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    let got = y.data()[(oc * ho + oy) * wo + ox];
                    prop_assert!((got - acc).abs() < 1e-9, "{} vs {}", got, acc);
                }
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(w in values(6), b in values(2), seed in any::<u64>(), tag in "[a-z0-9:_-]{0,12}") {
        let mut c = ckpt(w, b);
        c.meta.seed = seed;
        c.meta.provenance = tag;
        let bytes = c.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back.params, &c.params);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}
