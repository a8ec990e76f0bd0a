//! Property tests for the structural invariants of the margin chain, the
//! activations, and the model format.

use proptest::prelude::*;

use gloro::certify::{
    augment, head_accepts, margin_affinity, margin_mk, margin_rtk, AffinityCollection,
};
use gloro::net::{minmax, Layer, Network};

fn kmat_strategy(c: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..3.0, c * (c - 1) / 2).prop_map(move |upper| {
        let mut k = vec![0.0; c * c];
        let mut it = upper.into_iter();
        for j in 0..c {
            for i in (j + 1)..c {
                let v = it.next().unwrap();
                k[j * c + i] = v;
                k[i * c + j] = v;
            }
        }
        k
    })
}

fn instance_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (3usize..=6).prop_flat_map(|c| {
        (
            proptest::collection::vec(-3.0f64..3.0, c),
            kmat_strategy(c),
            0.0f64..1.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// m^k is non-increasing in eps for every k.
    #[test]
    fn margin_monotone_in_eps((logits, kmat, eps) in instance_strategy()) {
        let c = logits.len();
        for k in 1..c {
            let lo = margin_mk(&logits, &kmat, eps, k).unwrap();
            let hi = margin_mk(&logits, &kmat, eps + 0.25, k).unwrap();
            prop_assert!(hi <= lo + 1e-12);
        }
    }

    /// The relaxation chain: margin_rtk is non-decreasing in K, and any
    /// accept persists for larger K.
    #[test]
    fn relaxation_chain((logits, kmat, eps) in instance_strategy()) {
        let c = logits.len();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..c {
            let m = margin_rtk(&logits, &kmat, eps, k).unwrap();
            prop_assert!(m >= prev - 1e-12);
            prev = m;
        }
    }

    /// The affinity margin never exceeds the RTK margin at the family's
    /// largest set size.
    #[test]
    fn affinity_below_rtk((logits, kmat, eps) in instance_strategy()) {
        let c = logits.len();
        let s = AffinityCollection::new(c, vec![vec![0, 1], vec![1, 2]]).unwrap();
        let aff = margin_affinity(&logits, &kmat, eps, &s).unwrap();
        let rtk = margin_rtk(&logits, &kmat, eps, 2).unwrap();
        prop_assert!(aff <= rtk + 1e-12);
    }

    /// Margins are invariant under a shared logit translation.
    #[test]
    fn margin_translation_invariant((logits, kmat, eps) in instance_strategy(), t in -5.0f64..5.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + t).collect();
        for k in 1..logits.len() {
            let a = margin_mk(&logits, &kmat, eps, k).unwrap();
            let b = margin_mk(&shifted, &kmat, eps, k).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    /// The head rejects exactly when the margin is non-positive.
    #[test]
    fn head_strictness((logits, _kmat, _eps) in instance_strategy(), m in -2.0f64..2.0) {
        let aug = augment(&logits, m);
        prop_assert_eq!(head_accepts(&aug), m > 0.0);
    }

    /// minmax preserves the multiset of values (it only reorders pairs).
    #[test]
    fn minmax_preserves_values(v in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
        let out = minmax(&v);
        let mut a = v.clone();
        let mut b = out.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    /// Save/load round-trips the forward function bit-exactly.
    #[test]
    fn model_roundtrip_forward(
        seed in 0u64..1000,
        x in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let net = gloro::train::init_dense_net(3, &[6], 4, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        net.save(&path).unwrap();
        let reloaded = Network::load(&path).unwrap();
        prop_assert_eq!(net.forward(&x).unwrap(), reloaded.forward(&x).unwrap());
    }

    /// Downsampling then reading the permutation back is the identity.
    #[test]
    fn downsample_invertible(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..4 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let net = Network::new(
            vec![
                Layer::InvertibleDownsample { factor: 2 },
                Layer::dense(identity(32), 32, 32, vec![0.0; 32]).unwrap(),
            ],
            vec![4, 4, 2],
        )
        .unwrap();
        let y = net.forward(&x).unwrap();
        let mut back = x.clone();
        let perm = gloro::net::downsample_permutation(4, 4, 2, 2);
        for (out_i, &in_i) in perm.iter().enumerate() {
            back[in_i] = y[out_i];
        }
        prop_assert_eq!(back, x);
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    w
}
