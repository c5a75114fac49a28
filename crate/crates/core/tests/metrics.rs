use std::collections::BTreeMap;

use pecl_core::metrics::{accuracy, auc, cohen_kappa, f1, kappa_calibration, AnnotatorTable, MetricsReport};
use pecl_core::{Error, Rng};
use proptest::prelude::*;

fn brute_auc(scores: &[f64], y: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

#[test]
fn accuracy_and_f1_examples() {
    let (p, y) = ([1, 1, 0, 1], [1, 0, 0, 1]);
    assert_eq!(accuracy(&p, &y).unwrap(), 0.75);
    assert!((f1(&p, &y).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap(), 0.0);
    assert_eq!(f1(&y, &y).unwrap(), 1.0);
    assert_eq!(f1(&[0, 0], &[0, 0]).unwrap(), 0.0);
    assert!(matches!(accuracy(&[], &[]), Err(Error::Validation(_))));
    assert!(f1(&[], &[]).is_err());
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn auc_matches_brute_force_on_random_instances() {
    let mut rng = Rng::new(77);
    let mut done = 0;
    while done < 100 {
        let n = 2 + rng.below(199);
        // Coarse scores force plenty of ties.
        let levels = 1 + rng.below(20);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        if y.iter().all(|&v| v == y[0]) {
            continue;
        }
        assert_eq!(auc(&scores, &y).unwrap(), brute_auc(&scores, &y));
        done += 1;
    }
}

#[test]
fn kappa_examples() {
    assert_eq!(cohen_kappa(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(cohen_kappa(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), -1.0);
    assert_eq!(cohen_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
    assert_eq!(cohen_kappa(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
    assert!(cohen_kappa::<u8>(&[], &[]).is_err());
}

fn random_binary(n: usize, rng: &mut Rng) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.bernoulli(0.5))).collect()
}

proptest! {
    #[test]
    fn kappa_is_symmetric(seed in 0u64..100_000, n in 1usize..60) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random_binary(n, &mut rng), random_binary(n, &mut rng));
        prop_assert_eq!(cohen_kappa(&a, &b).unwrap(), cohen_kappa(&b, &a).unwrap());
    }

    #[test]
    fn metrics_are_permutation_invariant(seed in 0u64..100_000, n in 2usize..80) {
        let mut rng = Rng::new(seed);
        let mut y = random_binary(n, &mut rng);
        y[0] = 0;
        y[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(10) as f64) / 10.0).collect();
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= 0.5)).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let ys: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        let ss: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let ps: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
        prop_assert_eq!(accuracy(&pred, &y).unwrap(), accuracy(&ps, &ys).unwrap());
        prop_assert_eq!(f1(&pred, &y).unwrap(), f1(&ps, &ys).unwrap());
        prop_assert_eq!(auc(&scores, &y).unwrap(), auc(&ss, &ys).unwrap());
    }

    #[test]
    fn report_metrics_lie_in_unit_interval(seed in 0u64..100_000, n in 1usize..50) {
        let mut rng = Rng::new(seed);
        let y = random_binary(n, &mut rng);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let r = MetricsReport::from_scores(&scores, &y).unwrap();
        for v in [Some(r.acc), Some(r.f1), r.auc].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn table(name: &str, rows: &[(&str, &[(&str, u8)])]) -> AnnotatorTable {
    AnnotatorTable {
        annotator: name.into(),
        items: rows
            .iter()
            .map(|(id, codes)| (id.to_string(), codes.iter().map(|(f, v)| (f.to_string(), *v)).collect()))
            .collect(),
    }
}

#[test]
fn calibration_examples() {
    let groups: BTreeMap<String, String> =
        [("smile", "visual"), ("pauses", "audio")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let items = |bits: [u8; 4]| -> Vec<(String, Vec<(&'static str, u8)>)> {
        (0..4).map(|i| (format!("c{i}"), vec![("smile", bits[i])])).collect()
    };
    let to_table = |name: &str, rows: Vec<(String, Vec<(&'static str, u8)>)>| {
        let refs: Vec<(&str, &[(&str, u8)])> = rows.iter().map(|(id, c)| (id.as_str(), c.as_slice())).collect();
        table(name, &refs)
    };
    let a = to_table("a", items([1, 1, 0, 0]));
    let b = to_table("b", items([1, 0, 1, 0]));
    let r = kappa_calibration(&[a.clone(), b], &groups).unwrap();
    assert_eq!(r.overall, 0.0);

    let r = kappa_calibration(&[a.clone(), a.clone(), a.clone()], &groups).unwrap();
    assert_eq!(r.overall, 1.0);
    assert!(r.group_means.values().all(|&m| m == 1.0));

    let mut short = a.clone();
    short.items.remove("c2");
    match kappa_calibration(&[a, short], &groups) {
        Err(Error::Validation(msg)) => assert!(msg.contains("c2"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn calibration_group_means_combine_to_overall() {
    let mut rng = Rng::new(5);
    let features = ["smile", "laugh", "scowl", "pauses", "pitch_rising"];
    let groups: BTreeMap<String, String> = features
        .iter()
        .map(|f| (f.to_string(), if f.starts_with('p') { "audio" } else { "visual" }.to_string()))
        .collect();
    let tables: Vec<AnnotatorTable> = (0..3)
        .map(|a| AnnotatorTable {
            annotator: format!("ann{a}"),
            items: (0..30)
                .map(|i| {
                    let codes = features.iter().map(|f| (f.to_string(), u8::from(rng.bernoulli(0.5)))).collect();
                    (format!("clip{i:02}"), codes)
                })
                .collect(),
        })
        .collect();
    let r = kappa_calibration(&tables, &groups).unwrap();
    let combined = (3.0 * r.group_means["visual"] + 2.0 * r.group_means["audio"]) / 5.0;
    assert!((combined - r.overall).abs() < 1e-12);
    // Each feature is the mean of its three pairwise kappas.
    let col = |t: &AnnotatorTable, f: &str| -> Vec<u8> { t.items.values().map(|c| c[f]).collect() };
    for fk in &r.features {
        let f = fk.feature.as_str();
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let mean = pairs.iter().map(|&(i, j)| cohen_kappa(&col(&tables[i], f), &col(&tables[j], f)).unwrap()).sum::<f64>() / 3.0;
        assert!((mean - fk.kappa).abs() < 1e-15);
    }
    assert!(r.to_text().contains("overall"));
}
