use geolle_core::digest::sha256_hex;
use geolle_core::{FusionMode, Model, ModelConfig, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        widths: vec![4, 8, 16],
        blocks_per_level: 1,
        depth_base_width: 4,
        ..ModelConfig::default()
    }
}

fn input(n: usize, seed: u32) -> Tensor<f32> {
    Tensor::from_fn(vec![n, 3, 16, 16], |i| {
        ((i as u32).wrapping_mul(2_654_435_761).wrapping_add(seed) >> 8) as f32 / 16_777_216.0
    })
}

/// sha256 of the output rounded to 1e-4, so the digest survives last-bit differences between CPUs.
fn digest(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .flat_map(|v| ((*v as f64 * 1e4).round() as i32).to_le_bytes())
        .collect();
    sha256_hex(&bytes)
}

/// Pinned outputs of freshly initialized models; a change means the forward pass or the initializer changed.
const DIGESTS: [(FusionMode, &str); 5] = [
    (
        FusionMode::Full,
        "b5c677f10b3e663f8a5efbe9860ecc1ad527abdd69b2742db94ee109bc097151",
    ),
    (
        FusionMode::DecoderFusion,
        "1aefaf38a7b230f836247d2a07045df778ed425e00313ee4197320da87db1780",
    ),
    (
        FusionMode::NoCorrelation,
        "978d14d79af4c656f178ceec3eb0538d49dd6136c7f395221451eacb6af0131a",
    ),
    (
        FusionMode::Additive,
        "06e8e79f240e819bf989d9078cfefba3b349cf3e96b918ce10d60b2e8e9b59b9",
    ),
    (
        FusionMode::None,
        "786f51a8a479a05be151ec39bfb40040246b5f1218d2f137ae3971df18a1eb3a",
    ),
];

#[test]
fn forward_pass_regression_digests() {
    for (mode, want) in DIGESTS {
        let m = Model::new(small(), mode).unwrap();
        let mut p = m.init_params::<f32>(3);
        // Fusion output projections start at zero; perturb every parameter so each path contributes.
        for (i, (_, t)) in p.iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.02 * (((i * 131 + j * 17) % 23) as f32 / 11.0 - 1.0);
            }
        }
        let (out, depth) = m.forward(&p, &input(2, 7)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 16, 16]);
        assert_eq!(depth.is_some(), mode != FusionMode::None);
        assert_eq!(digest(&out), want, "{mode}");
    }
}
