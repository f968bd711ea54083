use migate::data::{augment_all, epoch_batches, AugmentConfig, Sample};
use migate::eval::{
    average_precision, cmc_single_shot, mean_average_precision, ranking, region_similarity, RegionSimilarityParams,
    ScoreMatrix,
};
use migate::head::{binomial_deviance_grad, binomial_deviance_loss, LossConfig, Supervision};
use migate::Tensor;
use proptest::prelude::*;

/// Brute-force single-shot CMC: position of the true match after a stable sort.
fn cmc_oracle(scores: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let mut hits = vec![0usize; n];
    for p in 0..n {
        let row = &scores[p * n..(p + 1) * n];
        let mut idx: Vec<usize> = (0..n).collect();
        // Stable sort by descending score keeps lower indices first on ties.
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let pos = idx.iter().position(|&g| g == perm[p]).unwrap();
        for h in hits.iter_mut().skip(pos) {
            *h += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / n as f64).collect()
}

fn matrix_strategy() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
    (2usize..9).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0, -0.5]), n * n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

fn matrix(n: usize, s: &[f64], perm: &[usize]) -> ScoreMatrix {
    // Probe p belongs to identity perm[p]; gallery g to identity g.
    ScoreMatrix::new(s.to_vec(), perm.to_vec(), (0..n).collect()).unwrap()
}

proptest! {
    #[test]
    fn cmc_matches_sort_oracle_and_is_monotone((n, s, perm) in matrix_strategy()) {
        let c = cmc_single_shot(&matrix(n, &s, &perm)).unwrap();
        prop_assert_eq!(&c.rates, &cmc_oracle(&s, n, &perm));
        prop_assert!(c.rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*c.rates.last().unwrap(), 1.0);
    }

    #[test]
    fn metrics_invariant_under_monotone_transform((n, s, perm) in matrix_strategy(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let m = matrix(n, &s, &perm);
        let t = m.map(|x| a * (x * 1.3).tanh() + b);
        prop_assert_eq!(cmc_single_shot(&m).unwrap(), cmc_single_shot(&t).unwrap());
        prop_assert_eq!(mean_average_precision(&m).unwrap(), mean_average_precision(&t).unwrap());
        for p in 0..n {
            prop_assert_eq!(ranking(m.row(p)), ranking(t.row(p)));
        }
    }

    #[test]
    fn single_relevant_ap_is_reciprocal_rank(len in 1usize..20, pos in 0usize..20) {
        let pos = pos % len;
        let rel: Vec<bool> = (0..len).map(|i| i == pos).collect();
        prop_assert_eq!(average_precision(&rel), Some(1.0 / (pos + 1) as f64));
    }

    #[test]
    fn supervision_weights_balance(labels in prop::collection::vec(0usize..4, 2..12)) {
        let Ok(sup) = Supervision::from_labels(&labels) else {
            // Only batches of a single identity lack negatives.
            prop_assert!(labels.iter().all(|&l| l == labels[0]));
            return Ok(());
        };
        let n = labels.len();
        let (mut pos, mut neg) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let (m, w) = sup.at(i, j);
                prop_assert_eq!(m, sup.at(j, i).0);
                if m > 0.0 { pos += w } else { neg += w }
            }
        }
        prop_assert!((pos - 1.0).abs() < 1e-12 && (neg - 1.0).abs() < 1e-12);
        prop_assert_eq!(sup.n1 + sup.n2, n * n);
    }

    #[test]
    fn loss_gradient_sign_is_minus_m(labels in prop::collection::vec(0usize..3, 3..8), seed in 0u64..1000) {
        prop_assume!(labels.iter().any(|&l| l != labels[0]));
        let n = labels.len();
        let sup = Supervision::from_labels(&labels).unwrap();
        let mut r = migate::rng::seeded(seed);
        let s: Tensor<f64> = migate::init::uniform(vec![n, n], -1.0, 1.0, &mut r);
        let g = binomial_deviance_grad(&s, &sup, &LossConfig::default()).unwrap();
        for (gv, m) in g.data().iter().zip(&sup.m) {
            prop_assert_eq!(gv.signum(), -m.signum());
        }
        prop_assert!(binomial_deviance_loss(&s, &sup, &LossConfig::default()).unwrap() > 0.0);
    }

    #[test]
    fn region_similarity_symmetric_and_nonnegative(
        xa in prop::collection::vec(-2.0f64..2.0, 3),
        xb in prop::collection::vec(-2.0f64..2.0, 3),
        l in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        // W = LLᵀ is symmetric positive semidefinite.
        let w: Vec<f64> = (0..9).map(|k| (0..3).map(|t| l[(k / 3) * 3 + t] * l[(k % 3) * 3 + t]).sum()).collect();
        let w = Tensor::<f64>::from_f64([3, 3], &w).unwrap();
        prop_assert!(RegionSimilarityParams::new(vec![w.clone()]).is_ok());
        let ab = region_similarity(&xa, &xb, &w).unwrap();
        let ba = region_similarity(&xb, &xa, &w).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
        prop_assert!(ab >= -1e-12);
        prop_assert_eq!(region_similarity(&xa, &xa, &w).unwrap(), 0.0);
    }

    #[test]
    fn augmentation_keeps_labels(ids in prop::collection::vec(0usize..5, 1..4), flip in any::<bool>(), shift in any::<bool>()) {
        let samples: Vec<Sample<f32>> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Sample {
                image: migate::init::uniform(vec![12, 12, 3], 0.0, 1.0, &mut migate::rng::seeded(i as u64)),
                identity: id,
                camera: i % 2,
                index: i,
            })
            .collect();
        let out = augment_all(&samples, AugmentConfig { flip, shift }).unwrap();
        let per = (1 + flip as usize) * (1 + 6 * shift as usize);
        prop_assert_eq!(out.len(), samples.len() * per);
        for s in &samples {
            let copies = out.iter().filter(|o| o.identity == s.identity && o.camera == s.camera && o.index == s.index).count();
            prop_assert_eq!(copies, per);
        }
        prop_assert!(out.iter().all(|o| o.image.shape() == [12, 12, 3]));
    }

    #[test]
    fn batches_carry_positive_and_negative_pairs(
        counts in prop::collection::vec(2usize..6, 2..6),
        batch in 4usize..10,
        seed in 0u64..100,
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(id, &c)| std::iter::repeat(id).take(c)).collect();
        prop_assume!(batch <= labels.len());
        let batches = epoch_batches(&labels, batch, seed, 0).unwrap();
        prop_assert_eq!(batches.len(), labels.len() / batch);
        for b in &batches {
            prop_assert_eq!(b.indices.len(), batch);
            let l: Vec<usize> = b.indices.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(&b.labels, &l);
            let distinct: std::collections::BTreeSet<_> = l.iter().collect();
            prop_assert!(distinct.len() >= 2 && distinct.len() < l.len());
        }
    }
}
