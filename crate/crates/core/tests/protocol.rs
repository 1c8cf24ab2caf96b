use std::collections::BTreeMap;

use owl_core::features::{generate_synthetic, herding_select, read_features, write_features, Split, SynthSpec};
use owl_core::protocol::{report_csv, Annotator, Mode, PhaseSchedule, ProtocolRun, RunSettings, Threshold};
use owl_core::{
    ClassId, Dataset, EvmHyperParams, EvmModel, FeatureVector, Learner, LearnerConfig, LearnerKind,
    Observation, PerceptronModel, ProtocolConfig,
};

fn world(classes: u32, seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec {
        num_classes: classes,
        dim: 16,
        train_per_class: 30,
        val_per_class: 10,
        mean_radius: 10.0,
        within_class_stddev: 1.0,
        rng_seed: seed,
    })
    .unwrap()
}

fn train_of(d: &Dataset, classes: &[ClassId]) -> BTreeMap<ClassId, Vec<Observation>> {
    let by = d.by_class(Split::Train);
    classes
        .iter()
        .map(|c| (*c, by[c].iter().map(|s| Observation::from(*s)).collect()))
        .collect()
}

fn settings(kind: LearnerKind, threshold: Threshold, epochs: usize) -> RunSettings {
    let mut config = LearnerConfig::default();
    config.mlp.epochs = epochs;
    config.mlp.rng_seed = 9;
    RunSettings {
        learner: kind,
        config,
        threshold,
        seed: 9,
        min_samples_per_class: 2,
    }
}

fn incremental_schedule() -> PhaseSchedule {
    PhaseSchedule {
        initial_classes: vec![0, 1, 2, 3],
        phases: vec![vec![4, 5], vec![6, 7, 8]],
        mode: Mode::Incremental,
    }
}

#[test]
fn incremental_evm_equals_direct_append_chain() {
    let d = world(9, 1);
    let s = incremental_schedule();
    let out = ProtocolRun::new(&d, &s, settings(LearnerKind::Evm, Threshold::Fixed(0.0), 0))
        .unwrap()
        .run_full()
        .unwrap();
    let mut direct = EvmModel::fit(&train_of(&d, &s.initial_classes), EvmHyperParams::default()).unwrap();
    for p in &s.phases {
        direct = direct.append_classes(&train_of(&d, p)).unwrap();
    }
    match out.agent.learner() {
        Learner::Evm(m) => assert_eq!(m.to_bytes().unwrap(), direct.to_bytes().unwrap()),
        other => panic!("unexpected learner {:?}", other.kind()),
    }
}

fn pairs(data: &BTreeMap<ClassId, Vec<Observation>>) -> Vec<(ClassId, &FeatureVector)> {
    data.iter()
        .flat_map(|(c, v)| v.iter().map(move |o| (*c, &o.features)))
        .collect()
}

#[test]
fn incremental_perceptron_equals_direct_expand_chain() {
    let d = world(9, 2);
    let s = incremental_schedule();
    let st = settings(LearnerKind::Perceptron, Threshold::Fixed(0.0), 40);
    let cfg = st.config.mlp.clone();
    let out = ProtocolRun::new(&d, &s, st).unwrap().run_full().unwrap();

    let initial = train_of(&d, &s.initial_classes);
    let mut model = PerceptronModel::init(16, &s.initial_classes, cfg.rng_seed)
        .unwrap()
        .train(&pairs(&initial), &cfg, 0)
        .unwrap();
    let mut exemplars: BTreeMap<ClassId, Vec<FeatureVector>> = BTreeMap::new();
    let herd = |data: &BTreeMap<ClassId, Vec<Observation>>, store: &mut BTreeMap<ClassId, Vec<FeatureVector>>| {
        for (c, obs) in data {
            let fvs: Vec<FeatureVector> = obs.iter().map(|o| o.features.clone()).collect();
            let idx = herding_select(&fvs, 20).unwrap();
            store.insert(*c, idx.into_iter().map(|i| fvs[i].clone()).collect());
        }
    };
    herd(&initial, &mut exemplars);
    for (i, p) in s.phases.iter().enumerate() {
        let data = train_of(&d, p);
        model = model
            .expand_classes(p, exemplars.clone(), cfg.rng_seed)
            .unwrap()
            .train(&pairs(&data), &cfg, i + 1)
            .unwrap();
        herd(&data, &mut exemplars);
    }
    match out.agent.learner() {
        Learner::Perceptron(m) => assert_eq!(m.to_bytes().unwrap(), model.to_bytes().unwrap()),
        other => panic!("unexpected learner {:?}", other.kind()),
    }
}

#[test]
fn two_initial_classes_are_separated() {
    let d = world(4, 3);
    let s = PhaseSchedule {
        initial_classes: vec![0, 1],
        phases: vec![],
        mode: Mode::Incremental,
    };
    for kind in [LearnerKind::Evm, LearnerKind::Perceptron] {
        let out = ProtocolRun::new(&d, &s, settings(kind, Threshold::Fixed(0.0), 300))
            .unwrap()
            .run_full()
            .unwrap();
        assert!(out.reports[0].metrics.cwca.unwrap() >= 0.99, "{kind:?}");
    }
}

#[test]
fn calibrated_open_world_run_enrolls_only_unknowns() {
    let d = world(14, 4);
    let s = PhaseSchedule {
        initial_classes: (0..6).collect(),
        phases: vec![vec![6, 7], vec![8, 9, 10], vec![11, 12, 13]],
        mode: Mode::OpenWorld,
    };
    let out = ProtocolRun::new(&d, &s, settings(LearnerKind::Evm, Threshold::TargetUda(0.5), 0))
        .unwrap()
        .run_full()
        .unwrap();
    assert_eq!(out.reports.len(), 4);
    for r in &out.reports[1..] {
        assert!(r.enrolled.iter().all(|c| r.unknown_classes.contains(c)));
        assert!(r.detected > 0);
    }
    // every enrolled class came in through detection, so its EVs are train
    // samples of that class
    if let Learner::Evm(m) = out.agent.learner() {
        for (c, cm) in m.classes() {
            for ev in &cm.extreme_vectors {
                assert!(ev.source_sample_id.starts_with(&format!("c{c}-train-")));
            }
        }
    }
}

#[test]
fn carry_over_across_phases() {
    // class 9 shows up once in the first batch and twice in the second
    let d = world(10, 5);
    let truth = d
        .samples()
        .iter()
        .map(|s| (s.sample_id.clone(), s.class_id))
        .collect();
    let mut annotator = Annotator::new(truth, 2);
    let by = d.by_class(Split::Train);
    let obs = |c: ClassId, i: usize| Observation::from(by[&c][i]);
    let known = (0..5).collect();
    let first = annotator.annotate(vec![obs(9, 0), obs(6, 0), obs(6, 1), obs(1, 0)], &known).unwrap();
    assert_eq!(first.keys().copied().collect::<Vec<_>>(), vec![6]);
    let known = (0..7).collect();
    let second = annotator.annotate(vec![obs(9, 1), obs(9, 2)], &known).unwrap();
    assert_eq!(second[&9].len(), 3);
}

#[test]
fn reports_are_deterministic_and_survive_the_file_round_trip() {
    let d = world(10, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.owlf");
    write_features(&d, &path).unwrap();
    let back = read_features(&path).unwrap();
    let s = PhaseSchedule::shaped(&(0..10).collect::<Vec<_>>(), 4, 2, 3, Mode::OpenWorld, 6).unwrap();
    let a = ProtocolRun::new(&d, &s, settings(LearnerKind::Perceptron, Threshold::TargetUda(0.5), 30))
        .unwrap()
        .run_full()
        .unwrap();
    let b = ProtocolRun::new(&back, &s, settings(LearnerKind::Perceptron, Threshold::TargetUda(0.5), 30))
        .unwrap()
        .run_full()
        .unwrap();
    assert_eq!(report_csv(&a.reports), report_csv(&b.reports));
    assert_eq!(report_csv(&a.reports).lines().count(), 5);
}

#[test]
fn config_drives_a_run() {
    let d = world(8, 7);
    let c = ProtocolConfig::parse(
        "mode = \"openworld\"\nlearner = \"ffowl\"\nseed = 3\ndelta = 0\ninitial_classes = [0, 1, 2]\n\
         [[phases]]\nnew_classes = [3, 4]\n[[phases]]\nnew_classes = [5, 6, 7]\n",
    )
    .unwrap();
    let schedule = c.schedule();
    let out = ProtocolRun::new(&d, &schedule, c.settings()).unwrap().run_full().unwrap();
    assert!(out.reports.iter().all(|r| r.detected == 0));
}
