use epca_pomdp::controllers::*;
use epca_pomdp::epca::*;
use epca_pomdp::error::Error;
use epca_pomdp::io::*;
use epca_pomdp::planner::*;
use epca_pomdp::problems::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn maze_planner(kind: ApproximatorKind) -> Planner {
    let m = MazeConfig::new(10).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cc = CollectConfig { explore_terminal: false, ..Default::default() };
    let c = collect_beliefs(&m, 120, &cc, &mut rng).unwrap();
    let ecfg = planning_epca(3, 3);
    let fit = epca_fit(&c.beliefs, &ecfg).unwrap();
    let p = build_prototypes(&fit.coords, &PrototypeConfig { kind, ..Default::default() }).unwrap();
    Planner::build(&m, fit.basis, p, &PlannerConfig { epca: ecfg, ..Default::default() }).unwrap()
}

fn save(dir: &std::path::Path, planner: &Planner) -> PlannerManifest {
    let a = PlannerArtifacts {
        problem: "pomdp",
        spec_hash: "0",
        basis_file: "basis.csv",
        basis_hash: "0",
        epca: &planner.epca,
        prototypes: &planner.prototypes,
        mdp: &planner.mdp,
        iterations: planner.solution.iterations,
        residual: planner.solution.residual,
        converged: planner.solution.converged,
    };
    save_planner(dir, &a).unwrap()
}

#[test]
fn planner_directory_round_trips() {
    for kind in [ApproximatorKind::NearestNeighbor, ApproximatorKind::Grid] {
        let planner = maze_planner(kind);
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(dir.path(), &planner);
        let loaded = load_planner(dir.path()).unwrap();
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.prototypes.len(), planner.prototypes.len());
        for j in 0..planner.prototypes.len() {
            let (a, b) = (loaded.prototypes.prototype(j), planner.prototypes.prototype(j));
            assert!((a - b).amax() <= 1e-12 * (1.0 + b.amax()));
        }
        let mdp = loaded.mdp(planner.mdp.terminal_actions().to_vec()).unwrap();
        assert_eq!(mdp.rewards(), planner.mdp.rewards());
        assert_eq!(mdp.value, planner.mdp.value);
        for i in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                assert_eq!(mdp.row(i, a), planner.mdp.row(i, a));
            }
        }
    }
}

#[test]
fn edited_artifacts_are_rejected() {
    let planner = maze_planner(ApproximatorKind::NearestNeighbor);
    let dir = tempfile::tempdir().unwrap();
    save(dir.path(), &planner);
    let path = dir.path().join(VALUE_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen(',', ",1", 2)).unwrap();
    assert!(matches!(load_planner(dir.path()), Err(Error::Invariant(_))));
}

#[test]
fn person_spec_round_trips() {
    let mut model = PersonFindingModel::office();
    model.person_diffusion = 0.1;
    let spec = PersonSpec::from_model(&model);
    let json = spec_json(&ProblemSpec::Person(spec.clone())).unwrap();
    let ProblemSpec::Person(back) = serde_json::from_str(&json).unwrap() else { panic!("not a person spec") };
    assert_eq!(back, spec);
    assert_eq!(back.to_model().unwrap().map.free_cells().len(), 284);
}
