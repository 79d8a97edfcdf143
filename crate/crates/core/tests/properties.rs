use kbpn::autograd::{Graph, ParamStore};
use kbpn::blocks::{BlurUpdater, Builder, Sft, WeightInit};
use kbpn::degradation::{degrade, gaussian_kernel, stretch, BlurKernel, DownMode, GaussianSpec, KernelDistribution, KernelPca, KERNEL_SUM_TOL};
use kbpn::eval::{psnr, ssim, PSNR_CAP};
use kbpn::imaging::{load_image, random_patch_pair, rgb_to_y, save_image, BitDepth, Image, PatchSpec};
use kbpn::losses::{kernel_code_loss, kernel_loss, lr_loss, sr_loss};
use kbpn::selfcheck::toy_block_config;
use kbpn::tensor::Tensor;
use kbpn::training::LrSchedule;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
    Image::new(c, h, w, data).unwrap()
}

fn kernel(seed: u64, k: usize) -> BlurKernel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BlurKernel::normalized(k, (0..k * k).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn mode() -> impl Strategy<Value = DownMode> {
    prop_oneof![Just(DownMode::Decimate), Just(DownMode::Area), Just(DownMode::Bicubic)]
}

fn permute(img: &Image, order: [usize; 3]) -> Image {
    let (_, h, w) = img.shape();
    Image::from_fn(3, h, w, |c, y, x| img.get(order[c], y, x))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gaussian_kernels_are_valid(sx in 0.05f64..=10.0, sy in 0.05f64..=10.0, theta in -7.0f64..7.0, half in 1usize..12) {
        let k = gaussian_kernel(&GaussianSpec { sigma_x: sx, sigma_y: sy, theta }, 2 * half + 1).unwrap();
        let sum: f64 = k.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= KERNEL_SUM_TOL);
        prop_assert!(k.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!(k.point_asymmetry() <= 1e-15);
    }

    #[test]
    fn degrade_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let (a, b) = (image(seed, 3, 16, 16), image(seed ^ 1, 3, 16, 16));
        let k = kernel(seed ^ 2, 9);
        let mix = Image::new(3, 16, 16, a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
        let lhs = degrade(&mix, &k, 4, DownMode::Decimate).unwrap();
        let (da, db) = (degrade(&a, &k, 4, DownMode::Decimate).unwrap(), degrade(&b, &k, 4, DownMode::Decimate).unwrap());
        let rhs: Vec<f64> = da.data().iter().zip(db.data()).map(|(x, y)| alpha * x + beta * y).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= 1e-9);
    }

    #[test]
    fn degrade_commutes_with_channel_permutation(seed in any::<u64>(), m in mode(), s in 1usize..=4) {
        let hr = image(seed, 3, 8 * s, 4 * s);
        let k = kernel(seed ^ 3, 7);
        let order = [2, 0, 1];
        let a = degrade(&permute(&hr, order), &k, s, m).unwrap();
        let b = permute(&degrade(&hr, &k, s, m).unwrap(), order);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encode_decode_is_a_projection(seed in any::<u64>(), sigma in 0.6f64..3.5) {
        let dist = KernelDistribution::default();
        let pca = KernelPca::fit_distribution(&dist, 15, 9, 300, seed % 4).unwrap();
        let k = gaussian_kernel(&GaussianSpec::isotropic(sigma), 15).unwrap();
        let code = pca.encode(&k).unwrap();
        let raw = pca.reconstruct_raw(&code).unwrap();
        prop_assume!(raw.iter().all(|v| *v >= 0.0));
        let again = pca.encode(&pca.decode(&code).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&again.vector, &code.vector) <= 1e-8);
    }

    #[test]
    fn stretch_of_spatial_mean_recovers_the_map(v in prop::collection::vec(-5.0f64..5.0, 1..12), h in 1usize..9, w in 1usize..9) {
        let map = stretch(&v, h, w).unwrap();
        let again = stretch(&map.spatial_mean(), h, w).unwrap();
        prop_assert!(max_abs_diff(map.data(), again.data()) <= 1e-12);
    }

    #[test]
    fn luma_is_linear(seed in any::<u64>(), a in 0.0f64..=1.0) {
        let img = image(seed, 3, 5, 7);
        let scaled = Image::new(3, 5, 7, img.data().iter().map(|v| a * v).collect()).unwrap();
        let lhs = rgb_to_y(&scaled).unwrap();
        let rhs: Vec<f64> = rgb_to_y(&img).unwrap().data().iter().map(|v| a * v).collect();
        prop_assert!(max_abs_diff(lhs.data(), &rhs) <= 1e-15);
    }

    #[test]
    fn patch_draw_is_pure(seed in any::<u64>(), flips in any::<bool>()) {
        let hr = image(seed ^ 5, 3, 40, 36);
        let spec = PatchSpec { lr_patch_size: 4, scale: 4, flip_horizontal: flips, flip_vertical: flips };
        let (a, ra) = random_patch_pair(&hr, &spec, seed).unwrap();
        let (b, rb) = random_patch_pair(&hr, &spec, seed).unwrap();
        prop_assert_eq!(ra, rb);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equality(seed in any::<u64>(), m in mode()) {
        let (sr, hr) = (image(seed, 3, 16, 16), image(seed ^ 7, 3, 16, 16));
        let (k1, k2) = (kernel(seed, 5), kernel(seed ^ 9, 5));
        prop_assert!(sr_loss(&sr, &hr).unwrap() > 0.0);
        prop_assert_eq!(sr_loss(&sr, &sr).unwrap(), 0.0);
        prop_assert!(kernel_loss(&k1, &k2).unwrap() > 0.0);
        prop_assert_eq!(kernel_loss(&k1, &k1).unwrap(), 0.0);
        let pca = KernelPca::fit(&[k1.clone(), k2.clone(), kernel(seed ^ 11, 5)], 2).unwrap();
        let (c1, c2) = (pca.encode(&k1).unwrap(), pca.encode(&k2).unwrap());
        prop_assert!(kernel_code_loss(&c1, &c2).unwrap() > 0.0);
        prop_assert_eq!(kernel_code_loss(&c1, &c1).unwrap(), 0.0);
        let lr = degrade(&sr, &k1, 4, m).unwrap();
        prop_assert_eq!(lr_loss(&sr, &k1, &lr, 4, m).unwrap(), 0.0);
        prop_assert!(lr_loss(&hr, &k1, &lr, 4, m).unwrap() > 0.0);
    }

    #[test]
    fn schedule_drops_exactly_once(total in 1usize..5000, initial in 1e-5f64..1e-2) {
        let sched = LrSchedule { initial, drop_to: initial / 10.0, drop_step: None };
        let lrs: Vec<f64> = (0..total).map(|s| sched.lr(s, total)).collect();
        let drops = lrs.windows(2).filter(|w| w[0] != w[1]).count();
        prop_assert!(drops <= 1);
        prop_assert!(lrs.iter().all(|v| *v == initial || *v == initial / 10.0));
        prop_assert_eq!(drops == 1, total * 3 / 4 > 0);
    }

    #[test]
    fn psnr_symmetric_and_permutation_invariant(seed in any::<u64>(), luma in any::<bool>()) {
        let (a, b) = (image(seed, 3, 20, 20), image(seed ^ 13, 3, 20, 20));
        let p = psnr(&a, &b, 2, luma).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, 2, luma).unwrap());
        if !luma {
            let order = [1, 2, 0];
            let q = psnr(&permute(&a, order), &permute(&b, order), 2, false).unwrap();
            prop_assert!((p - q).abs() <= 1e-12);
        }
        prop_assert_eq!(psnr(&a, &a, 2, luma).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_of_identical_images_is_one(seed in any::<u64>(), shift in -0.5f64..0.5) {
        let a = image(seed, 3, 24, 24);
        prop_assert_eq!(ssim(&a, &a, 4, true).unwrap(), 1.0);
        let shifted = Image::new(3, 24, 24, a.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert_eq!(ssim(&shifted, &shifted, 4, true).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn png_round_trip_is_within_quantisation(seed in any::<u64>(), sixteen in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = image(seed, 3, 9, 11);
        let (depth, levels) = if sixteen { (BitDepth::Sixteen, 65535.0) } else { (BitDepth::Eight, 255.0) };
        save_image(&img, &path, depth).unwrap();
        let back = load_image(&path).unwrap();
        prop_assert!(max_abs_diff(img.data(), back.data()) <= 0.5 / levels + 1e-12);
    }

    #[test]
    fn blur_update_keeps_kernels_valid(seed in any::<u64>(), spread in 0.1f64..20.0) {
        let cfg = toy_block_config(3);
        let mut store = ParamStore::new();
        let upd = {
            let mut b = Builder::new(&mut store, cfg.clone(), seed);
            BlurUpdater::with_head_init(&mut b, WeightInit::He)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= spread);
        }
        let k = cfg.kernel_size;
        let prev = kernel(seed ^ 17, k);
        let mut g = Graph::<f64>::new();
        let sr = g.input(Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect()));
        let kv = g.input(Tensor::from_vec(&[k * k], prev.data().to_vec()));
        let out = upd.blur_update(&mut g, &store, sr, kv);
        prop_assert!(BlurKernel::new(k, g.value(out).data().to_vec()).is_ok());
    }

    #[test]
    fn sft_with_zero_map_depends_on_features_only(seed in any::<u64>(), d in 1usize..6) {
        let cfg = toy_block_config(3);
        let c = cfg.base_channels;
        let mut store = ParamStore::new();
        let sft = {
            let mut b = Builder::new(&mut store, cfg.clone(), seed);
            Sft::new(&mut b, d)
        };
        let f = Tensor::from_vec(&[c, 6, 6], image(seed, c, 6, 6).data().to_vec());
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::<f64>::new();
            let fv = g.input(f.clone());
            let v = g.input(Tensor::from_vec(&[d], vec![0.0; d]));
            let out = sft.forward(&mut g, store, fv, v);
            g.value(out).data().to_vec()
        };
        let before = run(&store);
        // Scramble every weight that multiplies a map channel.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 19);
        for conv in [&sft.gamma[0], &sft.beta[0]] {
            let w = store.get_mut(conv.w);
            let (co, ci, kk) = (w.shape()[0], w.shape()[1], w.shape()[2] * w.shape()[3]);
            for o in 0..co {
                for i in c..ci {
                    for t in 0..kk {
                        w.data_mut()[(o * ci + i) * kk + t] = rng.random::<f64>() * 10.0 - 5.0;
                    }
                }
            }
        }
        prop_assert!(before.iter().all(|v| v.is_finite()));
        prop_assert_eq!(run(&store), before);
    }
}
