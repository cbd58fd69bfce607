use super::*;
use crate::geometry::{apply, rotation_z, sample_rigid, RigidTransform};
use crate::test_util::{max_abs_diff, random_cloud, rotate_last3};

fn frame_from_matrix(m: [[f64; 3]; 3]) -> OrientationSet {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    OrientationSet::new(Tensor::from_data(&[1, 3, 3], flat, false).unwrap()).unwrap()
}

#[test]
fn projection_maps_offsets_into_the_frame() {
    // O = Rz(90 deg), r = e_y  =>  Oᵀ r = e_x
    let o = frame_from_matrix(rotation_z(std::f64::consts::FRAC_PI_2));
    let r = Tensor::from_data(&[1, 1, 3], vec![0.0, 1.0, 0.0], false).unwrap();
    let p = o.project(&r).unwrap().value();
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12 && p[2].abs() < 1e-12);
}

#[test]
fn project_multi_single_and_duplicated_frames() {
    let mut rng = Rng::from_seed(1);
    let cloud = random_cloud(&mut rng, 6);
    let g = knn(&cloud, 3).unwrap();
    let coords = cloud.coords_tensor();
    let r = neighbor_offsets(&coords, &g).unwrap();
    let o = OrientationSet::identity(6);

    let single = project_multi(std::slice::from_ref(&o), &r).unwrap();
    assert!(max_abs_diff(&single, &o.project(&r).unwrap()) < 1e-15);

    let double = project_multi(&[o.clone(), o.clone()], &r).unwrap();
    assert_eq!(double.shape(), &[6, 3, 6]);
    let d = double.value();
    let s = single.value();
    for row in 0..18 {
        for c in 0..3 {
            assert_eq!(d[row * 6 + c], s[row * 3 + c]);
            assert_eq!(d[row * 6 + 3 + c], s[row * 3 + c]);
        }
    }
}

#[test]
fn identity_frames_reduce_to_vanilla_message_passing() {
    let mut rng = Rng::from_seed(2);
    let h_net = Mlp::init(&mut rng, &[2 * 2 + 3, 4, 4]).unwrap();
    let cloud = random_cloud(&mut rng, 10);
    let g = knn(&cloud, 4).unwrap();
    let coords = cloud.coords_tensor();
    let h = Tensor::from_data(&[10, 2], rng.uniform_vec(20, -1.0, 1.0), false).unwrap();
    let frames = vec![OrientationSet::identity(10)];

    let oriented = oriented_mp_layer(&h_net, Agg::Mean, &h, &coords, &g, &frames).unwrap();

    // vanilla: H(h_i, h_j, x_j - x_i) aggregated, no projection anywhere
    let hi = broadcast_rows(&h, 4).unwrap();
    let hj = h.gather_rows(&g.idx).unwrap();
    let r = neighbor_offsets(&coords, &g).unwrap();
    let vanilla = h_net
        .forward(&Tensor::concat(&[&hi, &hj, &r], 2).unwrap())
        .unwrap()
        .mean_axis(1)
        .unwrap();

    assert!(max_abs_diff(&oriented, &vanilla) < 1e-12);
}

#[test]
fn vanilla_message_passing_is_not_invariant() {
    // frozen identity frames: rotating the cloud changes the output.
    // This guards the power of the invariance tests themselves.
    let mut rng = Rng::from_seed(3);
    let h_net = Mlp::init(&mut rng, &[2 + 3, 8, 8]).unwrap();
    let cloud = random_cloud(&mut rng, 12);
    let g = knn(&cloud, 4).unwrap();
    let h = Tensor::ones(&[12, 1]);
    let frames = vec![OrientationSet::identity(12)];

    let out = oriented_mp_layer(&h_net, Agg::Mean, &h, &cloud.coords_tensor(), &g, &frames).unwrap();
    let rigid = sample_rigid(&mut rng, 0.0);
    let moved = apply(&rigid, &cloud);
    let out_moved =
        oriented_mp_layer(&h_net, Agg::Mean, &h, &moved.coords_tensor(), &g, &frames).unwrap();
    assert!(max_abs_diff(&out, &out_moved) > 1e-2);
}

fn learned_frames(
    net: &crate::orientation::OrientationNet,
    cloud: &crate::geometry::PointCloud,
    g: &KnnGraph,
) -> Vec<OrientationSet> {
    net.learn(&cloud.coords_tensor(), g).unwrap()
}

#[test]
fn all_layer_kinds_are_invariant_with_learned_frames() {
    let mut rng = Rng::from_seed(4);
    let ort_cfg = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let ort = crate::orientation::OrientationNet::init(&mut rng, &ort_cfg, 1).unwrap();
    let h_net = Mlp::init(&mut rng, &[2 * 2 + 3, 6, 6]).unwrap();
    let m_net = Mlp::init(&mut rng, &[1 + 3, 6, 6]).unwrap();
    let lift = xavier(&mut rng, 2, 6);
    let m0_net = Mlp::init(&mut rng, &[3, 6, 6]).unwrap();

    for _ in 0..8 {
        let cloud = random_cloud(&mut rng, 16);
        let g = knn(&cloud, 5).unwrap();
        let rigid = sample_rigid(&mut rng, 2.0);
        let moved = apply(&rigid, &cloud);
        let h = Tensor::from_data(&[16, 2], rng.uniform_vec(32, -1.0, 1.0), false).unwrap();

        let f1 = learned_frames(&ort, &cloud, &g);
        let f2 = learned_frames(&ort, &moved, &g);
        let coords1 = cloud.coords_tensor();
        let coords2 = moved.coords_tensor();

        let a1 = oriented_mp_layer(&h_net, Agg::Mean, &h, &coords1, &g, &f1).unwrap();
        let a2 = oriented_mp_layer(&h_net, Agg::Mean, &h, &coords2, &g, &f2).unwrap();
        assert!(max_abs_diff(&a1, &a2) < 1e-9, "generic layer");

        let b1 = rscnn_layer(&m_net, &lift, Agg::Max, &h, &coords1, &g, &f1).unwrap();
        let b2 = rscnn_layer(&m_net, &lift, Agg::Max, &h, &coords2, &g, &f2).unwrap();
        assert!(max_abs_diff(&b1, &b2) < 1e-9, "rscnn layer");

        let c1 = dgcnn_first_layer(&m0_net, Agg::Max, &coords1, &g, &f1, None).unwrap();
        let c2 = dgcnn_first_layer(&m0_net, Agg::Max, &coords2, &g, &f2, None).unwrap();
        assert!(max_abs_diff(&c1, &c2) < 1e-9, "dgcnn first layer");
    }
}

#[test]
fn rscnn_norm_argument_is_isometric_and_zeros_gate_through() {
    let mut rng = Rng::from_seed(5);
    let cloud = random_cloud(&mut rng, 10);
    let g = knn(&cloud, 4).unwrap();
    let coords = cloud.coords_tensor();
    let ort_cfg = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let ort = crate::orientation::OrientationNet::init(&mut rng, &ort_cfg, 1).unwrap();
    let frames = learned_frames(&ort, &cloud, &g);

    // |O_iᵀ r| = |r| for every orthogonal frame
    let r = neighbor_offsets(&coords, &g).unwrap();
    let before = r.l2_norm_rows(1e-12).unwrap();
    let after = frames[0].project(&r).unwrap().l2_norm_rows(1e-12).unwrap();
    assert!(max_abs_diff(&before, &after) < 1e-12);

    // zero neighbor features gate everything to zero
    let m_net = Mlp::init(&mut rng, &[4, 6, 6]).unwrap();
    let lift = xavier(&mut rng, 3, 6);
    let h0 = Tensor::zeros(&[10, 3]);
    let out = rscnn_layer(&m_net, &lift, Agg::Max, &h0, &coords, &g, &frames).unwrap();
    assert!(out.value().iter().all(|v| *v == 0.0));
}

#[test]
fn dgcnn_feature_layer_constant_features() {
    let mut rng = Rng::from_seed(6);
    let m_net = Mlp::init(&mut rng, &[4, 5, 5]).unwrap();
    // all rows identical: h_j - h_i = 0 and every output row equals
    // relu(M(0, h)) regardless of the graph
    let row = rng.uniform_vec(2, -1.0, 1.0);
    let mut vals = Vec::new();
    for _ in 0..7 {
        vals.extend_from_slice(&row);
    }
    let h = Tensor::from_data(&[7, 2], vals, false).unwrap();
    let (out, g) = dgcnn_feature_layer(&m_net, Agg::Max, &h, 3).unwrap();

    let direct_in = Tensor::from_data(&[1, 1, 4], vec![0.0, 0.0, row[0], row[1]], false).unwrap();
    let direct = m_net.forward(&direct_in).unwrap().relu().value();
    let ov = out.value();
    for i in 0..7 {
        for c in 0..5 {
            assert!((ov[i * 5 + c] - direct[c]).abs() < 1e-12);
        }
    }

    // graph construction on equal distances is deterministic: ties by index
    let (_, g2) = dgcnn_feature_layer(&m_net, Agg::Max, &h, 3).unwrap();
    assert_eq!(g.idx, g2.idx);
    for i in 0..7 {
        let expected: Vec<usize> = (0..7).filter(|&j| j != i).take(3).collect();
        let row: Vec<usize> = (0..3).map(|j| g.idx.at(i, j)).collect();
        assert_eq!(row, expected);
    }
}

fn invariance_deviation(backbone: &Backbone, n: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::from_seed(seed);
    let mut worst = 0.0f64;
    let mut executed = 0;
    while executed < trials {
        let cloud = random_cloud(&mut rng, n);
        let rigid = sample_rigid(&mut rng, 2.0);
        let moved = apply(&rigid, &cloud);
        let out1 = backbone.forward(&cloud, None).unwrap();
        let out2 = backbone.forward(&moved, None).unwrap();
        if out1.graphs != out2.graphs {
            continue; // kNN tie guard
        }
        executed += 1;
        for (a, b) in out1.per_layer.iter().zip(out2.per_layer.iter()) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    worst
}

#[test]
fn full_backbones_are_invariant_at_every_layer_boundary() {
    let ort = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    for kind in [BackboneKind::Generic, BackboneKind::Dgcnn, BackboneKind::Rscnn] {
        let mut cfg = match kind {
            BackboneKind::Generic => BackboneConfig::generic(vec![8, 8], 5),
            BackboneKind::Dgcnn => BackboneConfig::dgcnn(vec![8, 8], 5),
            BackboneKind::Rscnn => BackboneConfig::rscnn(vec![8, 8], 5),
        };
        cfg.orientation = ort.clone();
        let backbone = Backbone::init(&mut Rng::from_seed(7), cfg).unwrap();
        let dev = invariance_deviation(&backbone, 20, 8, 70);
        assert!(dev < 1e-9, "{kind:?} deviation {dev:.3e}");
    }
}

#[test]
fn global_coordinates_preserve_invariance() {
    let mut cfg = BackboneConfig::dgcnn(vec![8, 8], 5);
    cfg.use_global_coords = true;
    cfg.orientation = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let backbone = Backbone::init(&mut Rng::from_seed(8), cfg).unwrap();
    let dev = invariance_deviation(&backbone, 24, 6, 80);
    assert!(dev < 1e-9, "deviation {dev:.3e}");
}

#[test]
fn multi_frame_backbone_is_invariant() {
    let mut cfg = BackboneConfig::generic(vec![8], 5);
    cfg.num_orientation_frames = 2;
    cfg.orientation = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let backbone = Backbone::init(&mut Rng::from_seed(9), cfg).unwrap();
    let dev = invariance_deviation(&backbone, 16, 6, 90);
    assert!(dev < 1e-9, "deviation {dev:.3e}");
}

#[test]
fn per_point_features_permute_with_the_cloud() {
    let mut cfg = BackboneConfig::generic(vec![6, 6], 4);
    cfg.orientation = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let backbone = Backbone::init(&mut Rng::from_seed(10), cfg).unwrap();
    let mut rng = Rng::from_seed(100);
    let cloud = random_cloud(&mut rng, 14);
    let out = backbone.forward(&cloud, None).unwrap();

    let mut perm: Vec<usize> = (0..14).collect();
    rng.shuffle(&mut perm);
    let permuted =
        crate::geometry::PointCloud::from_points(perm.iter().map(|&i| cloud.points[i]).collect());
    let out_p = backbone.forward(&permuted, None).unwrap();

    let h = out.features().value();
    let hp = out_p.features().value();
    let d = out.features().shape()[1];
    for (new, &old) in perm.iter().enumerate() {
        for c in 0..d {
            assert!((hp[new * d + c] - h[old * d + c]).abs() < 1e-10);
        }
    }
}

#[test]
fn forward_with_identity_frames_differs_across_rotations() {
    // the mutation the audit suite must catch
    let mut cfg = BackboneConfig::generic(vec![8], 5);
    cfg.orientation = OrientationConfig {
        layers: 2,
        scalar_channels: 8,
        vector_channels: 4,
    };
    let backbone = Backbone::init(&mut Rng::from_seed(11), cfg).unwrap();
    let mut rng = Rng::from_seed(110);
    let cloud = random_cloud(&mut rng, 16);
    let rigid = sample_rigid(&mut rng, 0.0);
    let moved = apply(&rigid, &cloud);

    let g1 = knn(&cloud, 5).unwrap();
    let g2 = knn(&moved, 5).unwrap();
    let o1 = backbone
        .forward_with_frames(&cloud, None, vec![OrientationSet::identity(16)], g1)
        .unwrap();
    let o2 = backbone
        .forward_with_frames(&moved, None, vec![OrientationSet::identity(16)], g2)
        .unwrap();
    assert!(max_abs_diff(o1.features(), o2.features()) > 1e-2);
}

#[test]
fn extra_features_require_matching_width() {
    let mut cfg = BackboneConfig::generic(vec![4], 3);
    cfg.extra_input_dim = 5;
    cfg.orientation = OrientationConfig {
        layers: 1,
        scalar_channels: 4,
        vector_channels: 2,
    };
    let backbone = Backbone::init(&mut Rng::from_seed(12), cfg).unwrap();
    let cloud = random_cloud(&mut Rng::from_seed(120), 8);
    assert!(backbone.forward(&cloud, None).is_err());
    let bad = Tensor::zeros(&[8, 4]);
    assert!(backbone.forward(&cloud, Some(&bad)).is_err());
    let good = Tensor::zeros(&[8, 5]);
    assert!(backbone.forward(&cloud, Some(&good)).is_ok());
}

#[test]
fn rotated_equivariant_rotation_test_uses_rotate_helper() {
    // rotate_last3 sanity: rotating twice by inverse returns the original
    let mut rng = Rng::from_seed(13);
    let t = Tensor::from_data(&[4, 3], rng.uniform_vec(12, -1.0, 1.0), false).unwrap();
    let g = sample_rigid(&mut rng, 0.0);
    let mut inv = RigidTransform::identity();
    for i in 0..3 {
        for j in 0..3 {
            inv.rotation[i][j] = g.rotation[j][i];
        }
    }
    let back = rotate_last3(&rotate_last3(&t, &g), &inv);
    assert!(max_abs_diff(&t, &back) < 1e-12);
}
