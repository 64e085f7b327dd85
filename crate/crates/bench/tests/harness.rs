use timba::mamba::Direction;
use timba_bench::ablation::run_ablation;
use timba_bench::config::{BenchConfig, NodeChoice};
use timba_bench::downstream::{resolve_node, run_downstream};
use timba_bench::experiment::{impute_case, DeskData, ModelCache};
use timba_bench::sensitivity::run_sensitivity;

fn tiny() -> BenchConfig {
    let mut cfg = BenchConfig::default();
    cfg.data.steps = 400;
    cfg.train.epochs = 1;
    cfg.train.windows_per_epoch = 8;
    cfg.train.batch_size = 4;
    cfg.impute.samples = 2;
    cfg.study.ablation_seeds = vec![0, 1];
    cfg.study.downstream_seeds = vec![0, 1];
    cfg.study.mlp_epochs = 20;
    cfg
}

#[test]
fn ablation_replays_identically() {
    let cfg = tiny();
    let data = DeskData::synthetic(&cfg).unwrap();
    let a = run_ablation(&cfg, &data, &mut ModelCache::new()).unwrap();
    let b = run_ablation(&cfg, &data, &mut ModelCache::new()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.rows.len(), 4);
    assert!(a.mae(1, Direction::Uni).is_some());
}

#[test]
fn sensitivity_and_downstream_replay() {
    let cfg = tiny();
    let data = DeskData::synthetic(&cfg).unwrap();
    let mut cache = ModelCache::new();
    let model = cache.get_or_train(&cfg, &data, Direction::Bi, 0).unwrap().model.clone();
    let rates = [0.2, 0.6];
    let s1 = run_sensitivity(&model, &data, &rates, 2, 3).unwrap();
    let s2 = run_sensitivity(&model, &data, &rates, 2, 3).unwrap();
    assert_eq!(serde_json::to_string(&s1).unwrap(), serde_json::to_string(&s2).unwrap());
    assert!(s1.points[1].targets > s1.points[0].targets);

    let case = data.test_case();
    let imputed = impute_case(&model, &data, &case, 2, 0).unwrap().imputed;
    let node = resolve_node(NodeChoice::MinDegree, &data.graph).unwrap();
    let d1 = run_downstream(&cfg.study, &data, &case, Some(&imputed), node).unwrap();
    let d2 = run_downstream(&cfg.study, &data, &case, Some(&imputed), node).unwrap();
    assert_eq!(serde_json::to_string(&d1).unwrap(), serde_json::to_string(&d2).unwrap());
    assert_eq!(d1.rows.len(), 2 * 4);
    // only truly observed target steps are scored
    let observed_in_test = (0..case.truth.steps()).filter(|&t| case.observed.get(node, t)).count();
    assert!(d1.rows.iter().all(|r| r.test_rows <= observed_in_test && r.test_rows > 0));
}

#[test]
fn node_choice_resolves_by_degree() {
    let data = DeskData::synthetic(&tiny()).unwrap();
    let deg = data.graph.degrees();
    let hi = resolve_node(NodeChoice::MaxDegree, &data.graph).unwrap();
    let lo = resolve_node(NodeChoice::MinDegree, &data.graph).unwrap();
    assert!(deg.iter().all(|&d| d <= deg[hi] && d >= deg[lo]));
    assert!(resolve_node(NodeChoice::Index(99), &data.graph).is_err());
}
