use super::*;
use crate::geometry::{knn, sample_rigid, sample_rotation, apply};
use crate::tensor::tests::{finite_diff, rel_err};
use crate::test_util::{max_abs_diff, random_cloud, rotate_last3};

#[test]
fn gvp_vector_path_is_linear_in_v() {
    let mut rng = Rng::from_seed(1);
    let gvp = Gvp::init(&mut rng, 4, 3, 5, 2).unwrap();
    let s = Tensor::from_data(&[6, 4], rng.uniform_vec(24, -1.0, 1.0), false).unwrap();
    let v = Tensor::zeros(&[6, 3, 3]);
    let (_, v_out) = gvp.forward(&s, &v).unwrap();
    assert!(v_out.value().iter().all(|x| *x == 0.0));
}

#[test]
fn gvp_is_rotation_equivariant() {
    let mut rng = Rng::from_seed(2);
    let gvp = Gvp::init(&mut rng, 4, 3, 5, 2).unwrap();
    for _ in 0..10 {
        let s = Tensor::from_data(&[6, 4], rng.uniform_vec(24, -1.0, 1.0), false).unwrap();
        let v = Tensor::from_data(&[6, 3, 3], rng.uniform_vec(54, -1.0, 1.0), false).unwrap();
        let g = sample_rotation(&mut rng);

        let (s1, v1) = gvp.forward(&s, &v).unwrap();
        let (s2, v2) = gvp.forward(&s, &rotate_last3(&v, &g)).unwrap();

        assert!(max_abs_diff(&s1, &s2) < 1e-10, "scalars must be invariant");
        assert!(max_abs_diff(&rotate_last3(&v1, &g), &v2) < 1e-10);
    }
}

#[test]
fn vgconv_zero_features_reduce_to_edge_gvp() {
    // with all node features zero, the message for a single edge is exactly
    // the message GVP applied to (distance, offset) alone
    let mut rng = Rng::from_seed(3);
    let layer = VGConvLayer::init(&mut rng, 2, 2, 2, 2).unwrap();
    let coords = Tensor::from_data(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, -1.0], false).unwrap();
    let idx = IndexMatrix::new(2, 1, vec![1, 0]).unwrap();
    let f0 = FeaturePair::zeros(2, 2, 2);
    let out = layer.forward(&coords, &f0, &coords, &idx).unwrap();

    // manual assembly for point 0: edge = x_0 - x_1
    let edge = Tensor::from_data(&[1, 1, 3], vec![-1.0, -2.0, 1.0], false).unwrap();
    let dist = edge.l2_norm_rows(NORM_EPS).unwrap().reshape(&[1, 1, 1]).unwrap();
    let s_in = Tensor::concat(&[&Tensor::zeros(&[1, 1, 2]), &dist], 2).unwrap();
    let v_in = Tensor::concat(&[&Tensor::zeros(&[1, 1, 2, 3]), &edge.reshape(&[1, 1, 1, 3]).unwrap()], 2).unwrap();
    let (ms, mv) = layer.msg.forward(&s_in, &v_in).unwrap();
    // layer: h_mid = 0 + mean over the single message, then residual ff
    let h_mid = ms.reshape(&[1, 2]).unwrap();
    let v_mid = mv.reshape(&[1, 2, 3]).unwrap();
    let (fs, fv) = layer.ff.forward(&h_mid, &v_mid).unwrap();
    let expect_s = h_mid.add(&fs).unwrap();
    let expect_v = v_mid.add(&fv).unwrap();

    let got_s = out.scalars.slice(0, 0, 1).unwrap();
    let got_v = out.vectors.slice(0, 0, 1).unwrap();
    assert!(max_abs_diff(&got_s, &expect_s) < 1e-14);
    assert!(max_abs_diff(&got_v, &expect_v) < 1e-14);
}

#[test]
fn vgconv_outputs_are_equivariant_under_rigid_motion() {
    let mut rng = Rng::from_seed(4);
    let layer = VGConvLayer::init(&mut rng, 3, 2, 3, 2).unwrap();
    for _ in 0..10 {
        let cloud = random_cloud(&mut rng, 20);
        let g = knn(&cloud, 5).unwrap();
        let feats = FeaturePair {
            scalars: Tensor::from_data(&[20, 3], rng.uniform_vec(60, -1.0, 1.0), false).unwrap(),
            vectors: Tensor::zeros(&[20, 2, 3]),
        };
        let rigid = sample_rigid(&mut rng, 2.0);
        let moved = apply(&rigid, &cloud);

        let out = layer
            .forward(&cloud.coords_tensor(), &feats, &cloud.coords_tensor(), &g.idx)
            .unwrap();
        let rot_feats = FeaturePair {
            scalars: feats.scalars.clone(),
            vectors: rotate_last3(&feats.vectors, &rigid),
        };
        let out_moved = layer
            .forward(&moved.coords_tensor(), &rot_feats, &moved.coords_tensor(), &g.idx)
            .unwrap();

        assert!(max_abs_diff(&out.scalars, &out_moved.scalars) < 1e-9);
        assert!(max_abs_diff(&rotate_last3(&out.vectors, &rigid), &out_moved.vectors) < 1e-9);
    }
}

#[test]
fn vgconv_commutes_with_permutation() {
    let mut rng = Rng::from_seed(5);
    let layer = VGConvLayer::init(&mut rng, 2, 2, 2, 2).unwrap();
    let cloud = random_cloud(&mut rng, 12);
    let g = knn(&cloud, 4).unwrap();
    let f0 = FeaturePair::zeros(12, 2, 2);
    let out = layer
        .forward(&cloud.coords_tensor(), &f0, &cloud.coords_tensor(), &g.idx)
        .unwrap();

    let mut perm: Vec<usize> = (0..12).collect();
    rng.shuffle(&mut perm);
    let permuted = crate::geometry::PointCloud::from_points(
        perm.iter().map(|&i| cloud.points[i]).collect(),
    );
    let gp = knn(&permuted, 4).unwrap();
    let out_p = layer
        .forward(&permuted.coords_tensor(), &f0, &permuted.coords_tensor(), &gp.idx)
        .unwrap();

    let s = out.scalars.value();
    let sp = out_p.scalars.value();
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..2 {
            assert!((sp[new * 2 + c] - s[old * 2 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn stack_single_layer_matches_direct_call() {
    let mut rng = Rng::from_seed(6);
    let stack = VGConvStack::init(&mut rng, 3, 2, 1, 2).unwrap();
    let cloud = random_cloud(&mut rng, 10);
    let g = knn(&cloud, 3).unwrap();
    let coords = cloud.coords_tensor();
    let via_stack = stack.forward_flat(&coords, &g).unwrap();
    let f0 = FeaturePair::zeros(10, 3, 2);
    let direct = stack.layers[0].forward(&coords, &f0, &coords, &g.idx).unwrap();
    assert!(max_abs_diff(&via_stack.scalars, &direct.scalars) < 1e-15);
    assert!(max_abs_diff(&via_stack.vectors, &direct.vectors) < 1e-15);
}

#[test]
fn stack_is_equivariant_and_emits_requested_channels() {
    let mut rng = Rng::from_seed(7);
    let stack = VGConvStack::init(&mut rng, 8, 4, 3, 2).unwrap();
    assert_eq!(stack.output_vector_channels(), 2);
    for _ in 0..5 {
        let cloud = random_cloud(&mut rng, 24);
        let g = knn(&cloud, 6).unwrap();
        let rigid = sample_rigid(&mut rng, 2.0);
        let moved = apply(&rigid, &cloud);

        let out = stack.forward_flat(&cloud.coords_tensor(), &g).unwrap();
        let out_moved = stack.forward_flat(&moved.coords_tensor(), &g).unwrap();
        assert_eq!(out.vectors.shape(), &[24, 2, 3]);
        assert!(max_abs_diff(&out.scalars, &out_moved.scalars) < 1e-9);
        assert!(max_abs_diff(&rotate_last3(&out.vectors, &rigid), &out_moved.vectors) < 1e-9);
    }
}

#[test]
fn stack_rejects_non_chaining_layers() {
    let mut rng = Rng::from_seed(8);
    let a = VGConvLayer::init(&mut rng, 3, 2, 3, 2).unwrap();
    let b = VGConvLayer::init(&mut rng, 4, 2, 4, 2).unwrap();
    match VGConvStack::new(vec![a, b]) {
        Err(Error::Config(_)) => {}
        _ => panic!("expected a configuration error for non-chaining layers"),
    }
}

#[test]
fn layer_parameter_gradients_match_finite_differences() {
    let mut rng = Rng::from_seed(9);
    let layer = VGConvLayer::init(&mut rng, 2, 2, 2, 2).unwrap();
    let cloud = random_cloud(&mut rng, 8);
    let g = knn(&cloud, 3).unwrap();
    let coords = cloud.coords_tensor();
    let f0 = FeaturePair::zeros(8, 2, 2);

    let fwd = || {
        let out = layer.forward(&coords, &f0, &coords, &g.idx).unwrap();
        let s2 = out.scalars.square().unwrap().sum_all().unwrap();
        let v2 = out.vectors.square().unwrap().sum_all().unwrap();
        s2.add(&v2).unwrap()
    };
    fwd().backward().unwrap();
    for (name, p) in layer.parameters() {
        let analytic = match p.grad() {
            Some(g) => g,
            None => continue, // parameter unused in this configuration
        };
        let f = || fwd().item().unwrap();
        let fd = finite_diff(&f, &p, 1e-5);
        for (a, b) in analytic.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b) < 1e-4, "{name}: {a} vs {b}");
        }
    }
}
