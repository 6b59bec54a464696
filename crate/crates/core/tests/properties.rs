use dialogctx::corpus::{generate_corpus, read_corpus, write_corpus, GeneratorConfig, NormStats};
use dialogctx::interaction::{
    contrastive_loss, ground_truth_matrix, interaction_enhance, retrieval_accuracy, AlignmentMatrices, IeParams,
};
use dialogctx::numerics::{DType, Params, Tape};
use dialogctx::pipeline::{Checkpoint, Model, ModelConfig};
use dialogctx::synthesizer::{frame_counts, length_regulate};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| (Just(r), Just(c), vec(-3.0f64..3.0, r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_matrix_is_bounded_and_scale_invariant(
        (r, c, a) in matrix(4, 5),
        rb in 1usize..4,
        seed in any::<u64>(),
        k in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..rb * c).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        prop_assume!(a.chunks(c).chain(b.chunks(c)).all(|row| row.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let p = Params::<f64>::new();
        let mut t = Tape::new(&p);
        let av = t.input(r, c, a.clone()).unwrap();
        let bv = t.input(rb, c, b).unwrap();
        let scaled = t.scale(av, k);
        let m1 = t.cosine_matrix(av, bv, 1e-8).unwrap();
        let m2 = t.cosine_matrix(scaled, bv, 1e-8).unwrap();
        for (x, y) in t.value(m1).iter().zip(t.value(m2)) {
            prop_assert!(x.abs() <= 1.0 + 1e-12);
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn contrastive_loss_is_the_mean_squared_gap((n, m_p) in (1usize..7).prop_flat_map(|n| (Just(n), vec(-1.0f64..1.0, n * n)))) {
        let gt = ground_truth_matrix(n).unwrap();
        let p = Params::<f64>::new();
        let mut t = Tape::new(&p);
        let mv = t.input(n, n, m_p.clone()).unwrap();
        let gv = t.input(n, n, gt.clone()).unwrap();
        let lv = contrastive_loss(&mut t, &AlignmentMatrices { m_p: mv, m_gt: gv, n }).unwrap();
        let l = t.scalar(lv).unwrap();
        let oracle = m_p.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (n * n) as f64;
        prop_assert!(l >= 0.0);
        prop_assert!((l - oracle).abs() <= 1e-12);
    }

    #[test]
    fn ground_truth_has_n_positive_entries(n in 1usize..30) {
        let gt = ground_truth_matrix(n).unwrap();
        prop_assert_eq!(gt.iter().filter(|&&x| x == 1.0).count(), n);
        prop_assert_eq!(gt.iter().filter(|&&x| x == -1.0).count(), n * n - n);
    }

    #[test]
    fn prefix_mean_ignores_order_within_the_prefix((n, c, h) in matrix(6, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::<f64>::new();
        let ie = IeParams::register(&mut params, "ie", c, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| h[i * c..(i + 1) * c].to_vec()).collect();
        let mut t = Tape::new(&params);
        let hv = t.input(n, c, h.clone()).unwrap();
        let sv = t.input(n, c, shuffled).unwrap();
        let f = interaction_enhance(&mut t, hv, &ie, false).unwrap();
        let g = interaction_enhance(&mut t, sv, &ie, false).unwrap();
        // the full-length prefix sees every row in both orders
        let (a, b) = (t.value(f[n - 1]).to_vec(), t.value(g[n - 1]).to_vec());
        for j in 0..c {
            let mean = (0..n).map(|i| h[i * c + j]).sum::<f64>() / n as f64;
            prop_assert!((a[j] - mean).abs() <= 1e-12);
            prop_assert!((a[j] - b[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_centres((r, c, a) in matrix(4, 6)) {
        let p = Params::<f64>::new();
        let mut t = Tape::new(&p);
        let av = t.input(r, c, a).unwrap();
        let s = t.softmax_rows(av);
        let ln = t.layer_norm_rows(av, 1e-5);
        for row in t.value(s).chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        for row in t.value(ln).chunks(c) {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn length_regulation_conserves_frames(log_d in vec(-3.0f64..4.0, 1..20)) {
        let counts = frame_counts(&log_d);
        prop_assert!(counts.iter().all(|&k| k >= 1));
        for (k, d) in counts.iter().zip(&log_d) {
            prop_assert_eq!(*k, (d.exp().round() as usize).max(1));
        }
        let rows: Vec<usize> = (0..log_d.len()).collect();
        let out = length_regulate(&rows, &counts).unwrap();
        prop_assert_eq!(out.len(), counts.iter().sum::<usize>());
        for (i, &k) in counts.iter().enumerate() {
            prop_assert_eq!(out.iter().filter(|&&x| x == i).count(), k);
        }
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn retrieval_accuracy_is_a_fraction((n, s) in (1usize..6).prop_flat_map(|n| (Just(n), vec(-1.0f64..1.0, n * n)))) {
        let acc = retrieval_accuracy(&s, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!(((acc * n as f64).round() - acc * n as f64).abs() < 1e-9);
        let mut diag = vec![0.0; n * n];
        for i in 0..n {
            diag[i * n + i] = 1.0;
        }
        prop_assert_eq!(retrieval_accuracy(&diag, n).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn corpus_files_round_trip_bit_exactly(seed in any::<u64>(), n in 1usize..8, gz in any::<bool>()) {
        let cfg = GeneratorConfig {
            num_dialogues: n,
            d_z: 3,
            d_t: 4,
            d_s: 5,
            vocab: 9,
            seed,
            ..GeneratorConfig::default()
        };
        let records = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "c.jsonl.gz" } else { "c.jsonl" });
        write_corpus(&records, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        prop_assert_eq!(&back, &records);
        let bits = |rs: &[dialogctx::corpus::DialogueRecord]| -> Vec<u64> {
            rs.iter()
                .flat_map(|r| {
                    r.utterances
                        .iter()
                        .flat_map(|u| u.semantic.iter().chain(&u.prosodic))
                        .chain(&r.target.pitch)
                        .chain(&r.target.energy)
                        .map(|x| x.to_bits())
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        prop_assert_eq!(bits(&back), bits(&records));
    }

    #[test]
    fn checkpoints_round_trip_and_reject_truncation(seed in any::<u64>(), f64_model in any::<bool>(), cut in 0.0f64..1.0) {
        let cfg = ModelConfig {
            d_t: 3,
            d_s: 4,
            d_h_text: 3,
            d_h_speech: 2,
            d_m: 4,
            vocab: 5,
            seed,
            precision: if f64_model { DType::F64 } else { DType::F32 },
            ..ModelConfig::default()
        };
        let norm = NormStats { pitch_mean: 0.5, pitch_std: 2.0, energy_mean: -1.0, energy_std: 0.25 };
        let ck = if f64_model {
            Checkpoint::from_model(&Model::<f64>::new(cfg).unwrap(), 3, norm)
        } else {
            Checkpoint::from_model(&Model::<f32>::new(cfg).unwrap(), 3, norm)
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        let at = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..at]).is_err());
    }
}
