use bevshape::adf::{adf_fuse, Adf, AdfCfg};
use bevshape::grid::BevGrid;
use bevshape::nn::Forward;
use bevshape::pillars::{augment_pillar, pillarize, PillarEncoder, Point};
use bevshape::psc::{psc_loss, Psc, PscCfg, ShapeLossCfg};
use bevshape::tensor::gradcheck::check_params;
use bevshape::tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-0.5..21.0),
                rng.random_range(-10.5..10.5),
                rng.random_range(-3.2..1.2),
                rng.random(),
            ]
        })
        .collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn single_cell_loss(z: f64, y: f64) -> f64 {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![z]).unwrap());
    let target = Tensor::from_vec(&[1, 1, 1, 1], vec![y]).unwrap();
    let l = psc_loss(&mut g, x, &target, &ShapeLossCfg::default()).unwrap();
    g.value(l).data()[0]
}

fn adf_cfg() -> AdfCfg {
    AdfCfg {
        channels: 6,
        reduction: 2,
        attention: true,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pillarize_keeps_every_in_range_point(seed in any::<u64>(), n in 0usize..400) {
        let grid = BevGrid::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(n, &mut rng);
        let batch = pillarize(&cloud, &grid, usize::MAX);
        let in_range = cloud.iter().filter(|p| grid.cell_of(p[0], p[1], p[2]).is_some()).count();
        prop_assert_eq!(batch.num_points(), in_range);
        for pillar in &batch.pillars {
            for p in &pillar.points {
                prop_assert_eq!(grid.cell_of(p[0], p[1], p[2]), Some((pillar.ix, pillar.iy)));
            }
        }
        prop_assert!(batch.pillars.windows(2).all(|w| (w[0].ix, w[0].iy) < (w[1].ix, w[1].iy)));
    }

    #[test]
    fn pillar_features_ignore_point_order(seed in any::<u64>()) {
        let grid = BevGrid::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(300, &mut rng);
        let mut shuffled = cloud.clone();
        shuffled.shuffle(&mut rng);
        let mut store = ParamStore::new();
        let enc = PillarEncoder::new(&mut store, "pfn", 5, &mut rng).unwrap();
        let f = Forward::new(&store, false);
        let run = |pts: &[Point]| {
            let batch = pillarize(pts, &grid, 1024);
            let mut g = Graph::new();
            let y = enc.forward(&mut g, &f, &[&batch]).unwrap();
            g.value(y).clone()
        };
        prop_assert!(run(&cloud).max_abs_diff(&run(&shuffled)) < 1e-12);
    }

    #[test]
    fn scatter_matches_per_pillar_max(seed in any::<u64>()) {
        let grid = BevGrid::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = random_cloud(200, &mut rng);
        let batch = pillarize(&cloud, &grid, 32);
        let mut store = ParamStore::new();
        let enc = PillarEncoder::new(&mut store, "pfn", 4, &mut rng).unwrap();
        let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-0.2..0.2)).collect();
        store.value_mut(enc.linear.b).copy_from_slice(&bias);
        let f = Forward::new(&store, false);
        let mut g = Graph::new();
        let y = enc.forward(&mut g, &f, &[&batch]).unwrap();
        let map = g.value(y);
        let w = store.value(enc.linear.w).data();
        let mut expected = vec![0.0; 4 * grid.num_cells()];
        for pillar in &batch.pillars {
            for feat in augment_pillar(pillar, &grid) {
                for c in 0..4 {
                    let v = (0..feat.len()).fold(bias[c], |acc, k| acc + feat[k] * w[k * 4 + c]).max(0.0);
                    let slot = &mut expected[c * grid.num_cells() + grid.linear_index(pillar.ix, pillar.iy)];
                    *slot = f64::max(*slot, v);
                }
            }
        }
        let got = map.data();
        for (a, b) in got.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_loss_orders_predictions(z in -8.0..8.0f64, dz in 0.01..2.0f64, y in 0.0..0.99f64) {
        prop_assert!(single_cell_loss(z, 1.0) >= 0.0);
        prop_assert!(single_cell_loss(z, y) >= 0.0);
        prop_assert!(single_cell_loss(z + dz, 1.0) < single_cell_loss(z, 1.0));
        prop_assert!(single_cell_loss(z + dz, 0.0) > single_cell_loss(z, 0.0));
        prop_assert!(single_cell_loss(z + dz, y) > single_cell_loss(z, y));
    }

    #[test]
    fn attention_only_attenuates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let adf = Adf::new(&mut store, "adf", 4, 1, &adf_cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let mut f = Forward::new(&store, true);
        let fb = g.input(random_tensor(&[2, 4, 6, 6], &mut rng));
        let heat = g.input(random_tensor(&[2, 1, 12, 12], &mut rng));
        let out = adf.forward(&mut g, &mut f, fb, heat).unwrap();
        let (fid, fused) = (g.value(out.f_id).data(), g.value(out.fused).data());
        for (a, b) in fused.iter().zip(fid) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn fusion_matches_broadcast_loops(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w) = (2, 3, 4, 5);
        let fid = random_tensor(&[n, c, h, w], &mut rng);
        let mc = random_tensor(&[n, c, 1, 1], &mut rng);
        let mg = random_tensor(&[n, 1, h, w], &mut rng);
        let mut g = Graph::new();
        let (a, b, d) = (g.input(fid.clone()), g.input(mc.clone()), g.input(mg.clone()));
        let fused = adf_fuse(&mut g, a, b, d).unwrap();
        let swapped = adf_fuse(&mut g, a, d, b).unwrap();
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let want = fid.at4(ni, ci, hi, wi) * mc.at4(ni, ci, 0, 0) * mg.at4(ni, 0, hi, wi);
                        prop_assert_eq!(g.value(fused).at4(ni, ci, hi, wi), want);
                        prop_assert!((g.value(swapped).at4(ni, ci, hi, wi) - want).abs() <= 1e-15);
                    }
                }
            }
        }
    }
}

#[test]
fn adf_gradients_reach_both_attention_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let adf = Adf::new(&mut store, "adf", 3, 1, &adf_cfg(), &mut rng).unwrap();
    let fb = random_tensor(&[2, 3, 4, 4], &mut rng);
    let heat = random_tensor(&[2, 1, 4, 4], &mut rng);
    let cot = random_tensor(&[2, 6, 4, 4], &mut rng);
    let report = check_params(
        &mut store,
        |s| {
            let mut g = Graph::new();
            let mut f = Forward::new(s, true);
            let x = g.input(fb.clone());
            let h = g.input(heat.clone());
            let out = adf.forward(&mut g, &mut f, x, h)?;
            let c = g.constant(cot.clone());
            let y = g.mul(out.fused, c)?;
            let l = g.sum(y);
            Ok((g, l))
        },
        1e-5,
        8,
        3,
    )
    .unwrap();
    let names: Vec<&str> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| store.name(id))
        .collect();
    assert!(names.iter().any(|n| n.contains("channel_mlp")));
    assert!(names.iter().any(|n| n.contains("grid_conv")));
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn forward_pass_is_bitwise_reproducible() {
    let grid = BevGrid::desk();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cloud = random_cloud(500, &mut rng);
        let batch = pillarize(&cloud, &grid, 32);
        let mut store = ParamStore::new();
        let psc = Psc::new(&mut store, "psc", &PscCfg::desk(), &mut rng).unwrap();
        // The head starts at zero; perturb everything so the logits depend on every layer.
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            store
                .value_mut(id)
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let mut g = Graph::new();
        let mut f = Forward::new(&store, true);
        let out = psc.forward(&mut g, &mut f, &[&batch]).unwrap();
        g.value(out.logits)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}
