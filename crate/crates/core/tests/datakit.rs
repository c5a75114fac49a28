use std::collections::{BTreeMap, BTreeSet};

use pecl_core::datakit::*;
use pecl_core::{Error, ModelConfig, PeclModel, Rng, Tape};

fn records_with(alphabet: &FeatureAlphabet, n: usize, seed: u64) -> Vec<ClipRecord> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| ClipRecord {
            clip_id: format!("c{i:03}"),
            subject_id: format!("s{}", rng.below(12)),
            gender: if rng.bernoulli(0.5) { Gender::M } else { Gender::F },
            duration_s: (20.0 + rng.below(171) as f64) / 10.0,
            label: u8::from(rng.bernoulli(0.5)),
            annotations: alphabet.names().iter().map(|f| (f.to_string(), u8::from(rng.bernoulli(0.3)))).collect(),
        })
        .collect()
}

#[test]
fn alphabets() {
    let a = FeatureAlphabet::mumin30();
    assert_eq!((a.visual.len(), a.audio.len()), (25, 5));
    let b = FeatureAlphabet::mumin25();
    assert_eq!((b.visual.len(), b.audio.len()), (20, 5));
    assert_eq!(a.names().iter().collect::<BTreeSet<_>>().len(), 30);
    assert!(FeatureAlphabet::preset("x").is_err());
}

#[test]
fn manifest_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let alphabet = FeatureAlphabet::mumin30();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(load_manifest(&path, &alphabet).unwrap().is_empty());

    let recs = records_with(&alphabet, 50, 1);
    write_manifest(&path, &recs).unwrap();
    assert_eq!(load_manifest(&path, &alphabet).unwrap(), recs);

    let mut bad = recs.clone();
    bad[7].duration_s = 25.0;
    write_manifest(&path, &bad).unwrap();
    match load_manifest(&path, &alphabet) {
        Err(Error::Schema { line, field, .. }) => assert_eq!((line, field.as_str()), (8, "duration_s")),
        other => panic!("{other:?}"),
    }

    let mut dup = recs.clone();
    dup[3].clip_id = dup[2].clip_id.clone();
    write_manifest(&path, &dup).unwrap();
    match load_manifest(&path, &alphabet) {
        Err(Error::Schema { line, field, .. }) => assert_eq!((line, field.as_str()), (4, "clip_id")),
        other => panic!("{other:?}"),
    }

    let mut text = std::fs::read_to_string(&path).unwrap();
    text = text.replacen("\"gender\":\"M\"", "\"gender\":\"X\"", 1).replacen("\"gender\":\"F\"", "\"gender\":\"X\"", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_manifest(&path, &alphabet), Err(Error::Schema { .. })));

    write_manifest(&path, &recs).unwrap();
    match load_manifest(&path, &FeatureAlphabet::mumin25()) {
        Err(Error::Schema { line: 1, field, .. }) => assert_eq!(field, "annotations"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_manifest(&dir.path().join("missing.jsonl"), &alphabet), Err(Error::Io { .. })));
}

fn subject_of(records: &[ClipRecord]) -> BTreeMap<&str, &str> {
    records.iter().map(|r| (r.clip_id.as_str(), r.subject_id.as_str())).collect()
}

#[test]
fn folds_partition_and_are_subject_disjoint() {
    let recs = reference_like_manifest(7);
    assert_eq!(recs.len(), 1675);
    assert_eq!(recs.iter().filter(|r| r.label == 1).count(), 899);
    let subjects: BTreeSet<&str> = recs.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(subjects.len(), 213);
    let male: BTreeSet<&str> = recs.iter().filter(|r| r.gender == Gender::M).map(|r| r.subject_id.as_str()).collect();
    assert_eq!(male.len(), 141);

    let folds = make_folds(&recs, 3, 11, true).unwrap();
    let subj = subject_of(&recs);
    let mut union = BTreeSet::new();
    for f in &folds {
        f.validate(&recs).unwrap();
        assert!((f.test.len() as f64 - 1675.0 / 3.0).abs() <= 0.1 * 1675.0 / 3.0, "{}", f.test.len());
        assert_eq!(f.train.len() + f.test.len(), 1675);
        let train_subjects: BTreeSet<&str> = f.train.iter().map(|c| subj[c.as_str()]).collect();
        assert!(f.test.iter().all(|c| !train_subjects.contains(subj[c.as_str()])));
        for c in &f.test {
            assert!(union.insert(c.clone()), "{c} in two test folds");
        }
    }
    assert_eq!(union.len(), 1675);
}

#[test]
fn folds_ignore_input_order_and_follow_the_seed() {
    let recs = records_with(&FeatureAlphabet::mumin30(), 60, 3);
    let mut shuffled = recs.clone();
    Rng::new(1).shuffle(&mut shuffled);
    assert_eq!(make_folds(&recs, 3, 5, true).unwrap(), make_folds(&shuffled, 3, 5, true).unwrap());
    let loose = make_folds(&recs, 3, 5, false).unwrap();
    let sizes: Vec<usize> = loose.iter().map(|f| f.test.len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 60);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 2, "{sizes:?}");
    let label: BTreeMap<&str, u8> = recs.iter().map(|r| (r.clip_id.as_str(), r.label)).collect();
    let pos: Vec<usize> = loose.iter().map(|f| f.test.iter().filter(|c| label[c.as_str()] == 1).count()).collect();
    assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 2, "{pos:?}");
    assert!(make_folds(&recs[..2], 3, 5, true).is_err());
    assert!(make_folds(&recs, 1, 5, true).is_err());
}

#[test]
fn duration_buckets() {
    assert_eq!(duration_bucket(3.0), Some("short"));
    assert_eq!(duration_bucket(7.0), Some("long"));
    assert_eq!(duration_bucket(12.0), None);
    assert_eq!(duration_bucket(4.0), Some("short"));
    assert_eq!(duration_bucket(5.0), Some("long"));
    assert_eq!(duration_bucket(4.5), None);
    assert_eq!(duration_bucket(2.0), Some("short"));
    assert_eq!(duration_bucket(10.0), Some("long"));

    let recs = reference_like_manifest(2);
    let out = duration_protocol(&recs, 4, true).unwrap();
    let by_id: BTreeMap<&str, f64> = recs.iter().map(|r| (r.clip_id.as_str(), r.duration_s)).collect();
    let mut seen = BTreeSet::new();
    for s in &out.splits {
        s.validate(&recs).unwrap();
        for id in s.train.iter().chain(&s.test) {
            let d = by_id[id.as_str()];
            match s.name.as_str() {
                "short" => assert!((2.0..=4.0).contains(&d)),
                _ => assert!((5.0..=10.0).contains(&d)),
            }
            assert!(seen.insert(id.clone()));
        }
    }
    let expect = recs.iter().filter(|r| duration_bucket(r.duration_s).is_some()).count();
    assert_eq!(seen.len(), expect);
    assert!(out.warnings.is_empty());

    let only_long: Vec<ClipRecord> = recs.iter().filter(|r| r.duration_s > 5.0).cloned().collect();
    let out = duration_protocol(&only_long, 4, true).unwrap();
    assert_eq!(out.warnings.len(), 1);
}

#[test]
fn gender_protocol_properties() {
    let recs = reference_like_manifest(3);
    let gender: BTreeMap<&str, Gender> = recs.iter().map(|r| (r.clip_id.as_str(), r.gender)).collect();
    for cross in [false, true] {
        let out = gender_protocol(&recs, 9, true, cross).unwrap();
        let (m, f) = (&out.splits[0], &out.splits[1]);
        assert_eq!((m.name.as_str(), f.name.as_str()), ("male", "female"));
        assert!(m.test.iter().all(|c| gender[c.as_str()] == Gender::M));
        assert!(f.test.iter().all(|c| gender[c.as_str()] == Gender::F));
        if !cross {
            assert!(m.train.iter().all(|c| gender[c.as_str()] == Gender::M));
            let covered: BTreeSet<&String> = m.train.iter().chain(&m.test).chain(&f.train).chain(&f.test).collect();
            assert_eq!(covered.len(), recs.len());
        }
        m.validate(&recs).unwrap();
        f.validate(&recs).unwrap();
    }
}

#[test]
fn splits_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recs = records_with(&FeatureAlphabet::mumin30(), 40, 8);
    let folds = make_folds(&recs, 3, 1, true).unwrap();
    let path = dir.path().join("splits.json");
    write_splits(&path, &folds).unwrap();
    assert_eq!(read_splits(&path).unwrap(), folds);
}

#[test]
fn xor_latents_are_independent_of_the_label() {
    let cfg = ModelConfig::micro();
    let spec = SynthSpec { n_clips: 10_000, ..SynthSpec::default() };
    let clips = synth_generate(&spec, &cfg, 21).unwrap();
    let corr = |f: &dyn Fn(&SynthClip) -> f64| {
        let n = clips.len() as f64;
        let (xs, ys): (Vec<f64>, Vec<f64>) = clips.iter().map(|c| (f(c), f64::from(c.record.label))).unzip();
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    };
    assert!(corr(&|c| f64::from(c.z_v)).abs() < 0.05);
    assert!(corr(&|c| f64::from(c.z_a)).abs() < 0.05);
    // Best unimodal rule: predict the majority label given the latent.
    for pick in [0usize, 1] {
        let mut counts = [[0usize; 2]; 2];
        for c in &clips {
            let z = if pick == 0 { c.z_v } else { c.z_a };
            counts[z as usize][c.record.label as usize] += 1;
        }
        let best: usize = counts.iter().map(|r| r[0].max(r[1])).sum();
        let acc = best as f64 / clips.len() as f64;
        assert!((acc - 0.5).abs() <= 0.03, "{acc}");
    }
    let flips = clips
        .iter()
        .map(|c| c.aux.iter().enumerate().filter(|&(k, &b)| b != if k < 20 { c.z_v } else { c.z_a }).count())
        .sum::<usize>() as f64
        / (clips.len() * 25) as f64;
    assert!((flips - 0.1).abs() < 0.01, "{flips}");
}

#[test]
fn aligned_noise_free_tokens_are_nearest_neighbour_separable() {
    let cfg = ModelConfig::desk();
    let spec = SynthSpec { n_clips: 80, mode: SynthMode::Aligned, noise: 0.0, ..SynthSpec::default() };
    let clips = synth_generate(&spec, &cfg, 4).unwrap();
    let model = PeclModel::<f32>::build(&cfg, 4).unwrap();
    let tokens: Vec<Vec<f32>> = clips
        .iter()
        .map(|c| {
            let mut tape = Tape::new();
            let f = tape.constant(c.frames.clone());
            let w = tape.constant(c.wave.clone());
            let tv = model.net.visual_tokenizer.forward(&mut tape, &model.params, f).unwrap();
            let ta = model.net.audio_tokenizer.forward(&mut tape, &model.params, w, cfg.seq_len).unwrap();
            tape.value(tv).data().iter().chain(tape.value(ta).data()).copied().collect()
        })
        .collect();
    for (i, ti) in tokens.iter().enumerate() {
        let nearest = (0..tokens.len())
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| ti.iter().zip(&tokens[j]).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        assert_eq!(clips[nearest].record.label, clips[i].record.label, "clip {i}");
    }
}

#[test]
fn synth_is_deterministic_and_round_trips_through_disk() {
    let cfg = ModelConfig::micro();
    let spec = SynthSpec { n_clips: 30, n_subjects: 7, ..SynthSpec::default() };
    let a = synth_generate(&spec, &cfg, 3).unwrap();
    assert_eq!(a, synth_generate(&spec, &cfg, 3).unwrap());
    assert_ne!(a, synth_generate(&spec, &cfg, 4).unwrap());
    for c in &a {
        assert_eq!(c.wave.len(), cfg.audio_samples());
        assert_eq!(c.frames.shape()[0], cfg.seq_len);
        assert!((MIN_DURATION..=MAX_DURATION).contains(&c.record.duration_s));
        assert_eq!(c.record.label, c.z_v ^ c.z_a);
    }
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synth(d1.path(), &a, &spec, 3).unwrap();
    write_synth(d2.path(), &a, &spec, 3).unwrap();
    for f in [MANIFEST_FILE, MEDIA_FILE, "frames.bin", "waves.bin"] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let ds = Dataset::load(d1.path()).unwrap();
    assert_eq!(ds, Dataset::from_synth(&a, FeatureAlphabet::mumin25()));
    let subjects: BTreeSet<&str> = ds.records.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(subjects.len(), 7);
    let ids = vec![ds.records[4].clip_id.clone(), "nope".to_string()];
    assert!(ds.subset(&ids).is_err());
}
