use cadenza_core::align::{viterbi, viterbi_sparse, SparseTransitions};
use cadenza_core::dsp::{
    activations_to_notes, cqt_magnitude, pca_fit, pca_transform, ActivationMatrix, AudioBuffer, CqtConfig, FrameMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(frames: usize, cols: usize) -> impl Strategy<Value = FrameMatrix> {
    prop::collection::vec(0.0f64..1.0, frames * cols).prop_map(move |data| FrameMatrix {
        frame_period: 0.032,
        cols,
        data,
    })
}

/// Accepted onset peaks counted straight from the definition.
fn onset_peaks(onsets: &ActivationMatrix, threshold: f64) -> usize {
    let t_max = onsets.frames();
    let mut count = 0;
    for k in 0..onsets.cols {
        for t in 0..t_max {
            let v = onsets.get(t, k);
            let before = if t > 0 { onsets.get(t - 1, k) } else { f64::NEG_INFINITY };
            let after = if t + 1 < t_max { onsets.get(t + 1, k) } else { f64::NEG_INFINITY };
            if v >= threshold && v > before && v >= after {
                count += 1;
            }
        }
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_note_per_accepted_onset(onsets in matrix(30, 88), frames in matrix(30, 88), threshold in 0.3f64..0.9) {
        let notes = activations_to_notes(&onsets, &frames, threshold, 0.032).unwrap();
        prop_assert_eq!(notes.len(), onset_peaks(&onsets, threshold));
        for n in &notes.notes {
            prop_assert!(n.offset_sec > n.onset_sec);
            prop_assert_eq!(n.velocity, 80);
        }
    }

    #[test]
    fn pca_outputs_are_uncorrelated(data in matrix(60, 6), dims in 1usize..=6) {
        let model = pca_fit(&[&data], dims).unwrap();
        let out = pca_transform(&model, &data).unwrap();
        let n = out.frames() as f64;
        let mean: Vec<f64> = (0..dims).map(|c| out.rows().map(|r| r[c]).sum::<f64>() / n).collect();
        let cov = |a: usize, b: usize| out.rows().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n;
        let trace: f64 = (0..dims).map(|c| cov(c, c)).sum();
        for a in 0..dims {
            for b in 0..a {
                prop_assert!(cov(a, b).abs() < 1e-6 * trace.max(1e-12), "cov({a},{b}) = {}", cov(a, b));
            }
        }
    }

    #[test]
    fn cqt_is_linear_before_compression(seed in any::<u64>(), gain in 0.1f64..4.0) {
        // A short noise burst keeps the kernels busy at every bin.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.2..0.2)).collect();
        let config = CqtConfig { bins: 24, f_min: 220.0, ..CqtConfig::default() };
        let quiet = cqt_magnitude(&AudioBuffer::new(samples.clone(), 16_000).unwrap(), &config).unwrap();
        let loud = cqt_magnitude(&AudioBuffer::new(samples.iter().map(|v| v * gain).collect(), 16_000).unwrap(), &config).unwrap();
        for (q, l) in quiet.data.iter().zip(&loud.data) {
            prop_assert!((l - gain * q).abs() <= 1e-9 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn sparse_and_dense_decoders_agree(
        s in 1usize..6,
        t in 1usize..12,
        seed in any::<u64>(),
    ) {
        // Small integers make exact ties common.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || -f64::from(rng.random_range(0..7u8));
        let init: Vec<f64> = (0..s).map(|_| next()).collect();
        let trans: Vec<Vec<f64>> = (0..s).map(|_| (0..s).map(|_| next()).collect()).collect();
        let obs: Vec<Vec<f64>> = (0..t).map(|_| (0..s).map(|_| next()).collect()).collect();
        let dense = viterbi(&obs, &init, &trans).unwrap();
        let mut sparse = SparseTransitions::new(s);
        for (i, row) in trans.iter().enumerate() {
            for (j, lp) in row.iter().enumerate() {
                sparse.add(i, j, lp.exp());
            }
        }
        sparse.finish();
        let other = viterbi_sparse(t, &init, &sparse, |f, j| obs[f][j]).unwrap();
        prop_assert_eq!(dense.path, other.path);
        prop_assert!((dense.log_prob - other.log_prob).abs() < 1e-9);
    }
}
