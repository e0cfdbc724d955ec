use mvr_core::backbone::{encoder_forward, init_params, init_weights, EncoderConfig, FeatureMap};
use mvr_core::nn::{attention_forward, patch_embed_forward, AttentionKind};
use mvr_core::reconstruction::{
    aggregate_layers, bottleneck_forward, decoder_forward, init_student, student_forward, DecoderConfig,
};
use mvr_core::tensor::ParamSet;
use mvr_core::weights::WeightArchive;
use ndarray::{s, Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-scale..scale))
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

fn attention_params(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("attn.qkv.weight", random(rng, &[dim, 3 * dim], scale));
    p.insert("attn.qkv.bias", random(rng, &[3 * dim], scale));
    p.insert("attn.proj.weight", random(rng, &[dim, dim], scale));
    p.insert("attn.proj.bias", random(rng, &[dim], scale));
    p
}

fn image(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((size, size, 3), || rng.random_range(0.0..1.0))
}

/// Makes every value vector equal to one and the output projection the identity,
/// so each output entry is the sum of one row of attention weights.
fn unit_values(p: &mut ParamSet<f64>, dim: usize) {
    p.mat_mut("attn.qkv.weight")
        .unwrap()
        .slice_mut(s![.., 2 * dim..])
        .fill(0.0);
    p.vector_mut("attn.qkv.bias")
        .unwrap()
        .slice_mut(s![2 * dim..])
        .fill(1.0);
    p.mat_mut("attn.proj.weight").unwrap().assign(&Array2::eye(dim));
    p.vector_mut("attn.proj.bias").unwrap().fill(0.0);
}

#[test]
fn single_token_attention_is_the_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 8;
    for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
        let p = attention_params(&mut rng, dim, 1.0);
        let x = random_mat(&mut rng, 1, dim, 1.0);
        let (y, _) = attention_forward(&p, "attn", &x, 2, kind).unwrap();
        let wv = p.mat("attn.qkv.weight").unwrap().slice(s![.., 2 * dim..]).to_owned();
        let bv = p.vector("attn.qkv.bias").unwrap().slice(s![2 * dim..]).to_owned();
        let v = x.dot(&wv) + &bv;
        let expected = v.dot(&p.mat("attn.proj.weight").unwrap()) + p.vector("attn.proj.bias").unwrap();
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
        }
    }
}

#[test]
fn attention_weights_are_normalized_per_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 12;
    for trial in 0..50 {
        let scale = if trial % 2 == 0 { 1.0 } else { 6.0 };
        for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
            let mut p = attention_params(&mut rng, dim, scale);
            unit_values(&mut p, dim);
            let n = rng.random_range(1..40);
            let x = random_mat(&mut rng, n, dim, scale);
            let (y, _) = attention_forward(&p, "attn", &x, 3, kind).unwrap();
            for v in y.iter() {
                assert!((v - 1.0).abs() < 1e-6, "{kind:?} trial {trial}: row sum {v}");
            }
        }
    }
}

#[test]
fn softmax_attention_commutes_with_token_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 8;
    let p = attention_params(&mut rng, dim, 0.5);
    let x = random_mat(&mut rng, 9, dim, 1.0);
    let perm: Vec<usize> = vec![4, 0, 8, 2, 7, 1, 3, 6, 5];
    let xp = x.select(ndarray::Axis(0), &perm);
    let (y, _) = attention_forward(&p, "attn", &x, 2, AttentionKind::Softmax).unwrap();
    let (yp, _) = attention_forward(&p, "attn", &xp, 2, AttentionKind::Softmax).unwrap();
    let expected = y.select(ndarray::Axis(0), &perm);
    assert!((&yp - &expected).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn patch_embed_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (size, patch, dim) = (28, 14, 5);
    let k = patch * patch * 3;

    // Zero image and zero projection leave only the positional embedding.
    let mut p = ParamSet::new();
    p.insert("pe.proj.weight", ArrayD::zeros(IxDyn(&[k, dim])));
    p.insert("pe.proj.bias", ArrayD::zeros(IxDyn(&[dim])));
    let pos = random(&mut rng, &[4, dim], 1.0);
    p.insert("pe.pos_embed", pos.clone());
    let (t, _) = patch_embed_forward(&p, "pe", Array3::zeros((size, size, 3)).view(), patch).unwrap();
    assert_eq!(t.into_dyn(), pos);

    // A constant image gives identical tokens before the positional add.
    p.insert("pe.proj.weight", random(&mut rng, &[k, dim], 1.0));
    p.insert("pe.proj.bias", random(&mut rng, &[dim], 1.0));
    p.insert("pe.pos_embed", ArrayD::zeros(IxDyn(&[4, dim])));
    let (t, _) = patch_embed_forward(&p, "pe", Array3::from_elem((size, size, 3), 0.3).view(), patch).unwrap();
    for row in t.rows() {
        assert_eq!(row, t.row(0));
    }

    // Token (gy, gx) equals the projection of its own tile, gathered independently.
    let img = image(&mut rng, size);
    let (t, _) = patch_embed_forward(&p, "pe", img.view(), patch).unwrap();
    let w = p.mat("pe.proj.weight").unwrap();
    let b = p.vector("pe.proj.bias").unwrap();
    for gy in 0..2 {
        for gx in 0..2 {
            let tile: Vec<f64> = (0..patch)
                .flat_map(|dy| (0..patch).map(move |dx| (dy, dx)))
                .flat_map(|(dy, dx)| (0..3).map(move |c| (dy, dx, c)))
                .map(|(dy, dx, c)| img[(gy * patch + dy, gx * patch + dx, c)])
                .collect();
            let expected = Array1::from(tile).dot(&w) + b;
            let got = t.row(gy * 2 + gx);
            assert!((&got - &expected).iter().all(|d| d.abs() < 1e-12));
        }
    }
}

#[test]
fn full_size_image_gives_sixteen_by_sixteen_tokens() {
    let cfg = EncoderConfig::desk();
    assert_eq!(cfg.grid(), (16, 16));
    let params = init_weights(&cfg, 0).unwrap().params;
    let img = Array3::<f32>::from_elem((224, 224, 3), 0.5);
    let maps = encoder_forward(img.view(), &cfg, &params).unwrap();
    assert_eq!(maps.len(), 4);
    for m in &maps {
        assert_eq!((m.grid_h, m.grid_w, m.channels()), (16, 16, 128));
    }
}

#[test]
fn depth_one_encoder_with_zeroed_branches_has_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig {
        image_size: 28,
        patch_size: 14,
        embed_dim: 6,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        tap_layers: vec![0],
    };
    let mut p: ParamSet<f64> = init_params(&cfg.param_shapes(), 9).cast();
    for (name, t) in p.iter_mut() {
        if name.starts_with("encoder.blocks.0.") && !name.contains("norm") {
            t.fill(0.0);
        }
    }
    let a = random(&mut rng, &[6], 1.0);
    let c = random(&mut rng, &[12], 2.0);
    let w2 = random(&mut rng, &[12, 6], 1.0);
    let b2 = random(&mut rng, &[6], 1.0);
    p.insert("encoder.blocks.0.attn.proj.bias", a.clone());
    p.insert("encoder.blocks.0.mlp.fc1.bias", c.clone());
    p.insert("encoder.blocks.0.mlp.fc2.weight", w2.clone());
    p.insert("encoder.blocks.0.mlp.fc2.bias", b2.clone());

    let img = image(&mut rng, 28);
    let (x, _) = patch_embed_forward(&p, "encoder.patch_embed", img.view(), 14).unwrap();
    let out = encoder_forward(img.view(), &cfg, &p).unwrap();

    // Zero query/key/value weights make attention emit its output bias; zero fc1
    // weights make the hidden layer the constant gelu(c).
    let gelu_c = c.mapv(|v| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
    let shift = a.into_dimensionality::<ndarray::Ix1>().unwrap()
        + gelu_c
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .dot(&w2.into_dimensionality::<ndarray::Ix2>().unwrap())
        + b2.into_dimensionality::<ndarray::Ix1>().unwrap();
    let expected = &x + &shift;
    assert_eq!(out.len(), 1);
    assert!((&out[0].data - &expected).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn saved_archive_reproduces_forward_bit_for_bit() {
    let cfg = EncoderConfig {
        image_size: 28,
        patch_size: 14,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        tap_layers: vec![0, 1],
    };
    let archive = init_weights(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.mvrw");
    archive.save(&path).unwrap();
    let loaded = WeightArchive::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = image(&mut rng, 28).mapv(|v| v as f32);
    let a = encoder_forward(img.view(), &cfg, &archive.params).unwrap();
    let b = encoder_forward(img.view(), &cfg, &loaded.params).unwrap();
    let c = encoder_forward(img.view(), &cfg, &archive.params).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert_eq!(x.data, y.data);
        assert_eq!(x.data, z.data);
    }
}

#[test]
fn decoder_pairs_one_map_per_tap() {
    for depth in [1, 4] {
        let enc = EncoderConfig {
            tap_layers: (0..depth).collect(),
            ..EncoderConfig::desk()
        };
        let dec = DecoderConfig::for_encoder(&enc);
        assert_eq!(dec.depth, depth);
        let student = init_student(&dec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latent = FeatureMap::new(16, 16, random_mat(&mut rng, 256, 128, 1.0).mapv(|v| v as f32)).unwrap();
        let maps = decoder_forward(&latent, &dec, &student).unwrap();
        assert_eq!(maps.len(), depth);
        for m in &maps {
            assert_eq!((m.grid_h, m.grid_w, m.channels()), (16, 16, 128));
        }
        let again = decoder_forward(&latent, &dec, &student).unwrap();
        assert!(maps.iter().zip(&again).all(|(a, b)| a.data == b.data));
        let taps = vec![latent.clone(); depth];
        let staged = decoder_forward(&bottleneck_forward(&taps, &student).unwrap(), &dec, &student).unwrap();
        let (taped, _) = student_forward(&latent, &dec, &student).unwrap();
        assert!(staged.iter().zip(&taped).all(|(a, b)| a.data == b.data));
    }
}

#[test]
fn aggregation_matches_elementwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let maps: Vec<FeatureMap<f32>> = (0..3)
            .map(|_| FeatureMap::new(3, 4, random_mat(&mut rng, 12, 5, 1.0).mapv(|v| v as f32)).unwrap())
            .collect();
        let agg = aggregate_layers(&maps).unwrap();
        for r in 0..12 {
            for c in 0..5 {
                let mean = maps.iter().map(|m| m.data[(r, c)] as f64).sum::<f64>() / 3.0;
                assert!((agg.data[(r, c)] as f64 - mean).abs() < 1e-7);
            }
        }
    }
}
