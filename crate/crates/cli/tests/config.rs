use mfc_cli::config::{ModelConfig, DEFAULT_OUT, DEFAULT_SEED};
use mfc_cli::{Experiment, Failure, Overrides, RunConfig};

fn parse(text: &str) -> Result<RunConfig, Failure> {
    RunConfig::from_toml(text, &Overrides::default())
}

#[test]
fn defaults_fill_every_table() {
    let cfg = parse("[model]\nname = \"lq_scalar\"\n").unwrap();
    assert_eq!(cfg.experiment, Experiment::Solve);
    assert_eq!(cfg.seed, DEFAULT_SEED);
    assert_eq!(cfg.out.to_str(), Some(DEFAULT_OUT));
    assert_eq!(cfg.grid.steps, 50);
    assert_eq!(cfg.solver.particles, 2000);
    assert_eq!(
        cfg.solver.continuation(),
        mfc_core::fbsde::ContinuationConfig::default()
    );
    let ModelConfig::LqScalar(p) = &cfg.model else {
        panic!()
    };
    assert_eq!(p.params(), mfc_core::model::LqParams::benchmark());
}

#[test]
fn model_params_override_defaults() {
    let cfg = parse("[model]\nname = \"lq_scalar\"\n[model.params]\nb1 = 0.4\nx0 = 2.0\n").unwrap();
    let ModelConfig::LqScalar(p) = &cfg.model else {
        panic!()
    };
    assert_eq!((p.b1, p.x0, p.q), (0.4, 2.0, 1.0));
}

#[test]
fn overrides_take_precedence() {
    let o = Overrides {
        seed: Some(5),
        out: Some("elsewhere".into()),
        experiment: Some(Experiment::Chaos),
    };
    let cfg = RunConfig::from_toml(
        "seed = 2\nout = \"here\"\nexperiment = \"oracle\"\n[model]\nname = \"zero\"\n",
        &o,
    )
    .unwrap();
    assert_eq!((cfg.seed, cfg.experiment), (5, Experiment::Chaos));
    assert_eq!(cfg.out.to_str(), Some("elsewhere"));
}

#[test]
fn experiment_names_round_trip() {
    for e in [
        Experiment::Solve,
        Experiment::Gradcheck,
        Experiment::Oracle,
        Experiment::Decouple,
        Experiment::Chaos,
    ] {
        assert_eq!(Experiment::parse(e.name()).unwrap(), e);
    }
    assert!(matches!(
        Experiment::parse("Solve"),
        Err(Failure::Config(_))
    ));
}

#[test]
fn solver_enums_parse_from_snake_case() {
    let cfg = parse("[model]\nname = \"zero\"\n[solver]\ninner = \"nested\"\nsweep = \"jacobi\"\ninit = \"zero\"\n").unwrap();
    let c = cfg.solver.continuation();
    assert_eq!(c.inner, mfc_core::fbsde::InnerSolve::Nested);
    assert_eq!(c.sweep, mfc_core::fbsde::Sweep::Jacobi);
    assert_eq!(c.init, mfc_core::fbsde::PicardInit::Zero);
}

#[test]
fn resolved_config_serializes_with_model_tag() {
    let cfg = parse("[model]\nname = \"first_order_quadratic\"\n").unwrap();
    let v = serde_json::to_value(&cfg).unwrap();
    assert_eq!(v["model"]["name"], "first_order_quadratic");
    assert_eq!(v["model"]["params"]["b_state"], 0.5);
    assert_eq!(v["solver"]["sweep"], "predictive");
}

#[test]
fn validation_failures_are_config_errors() {
    for bad in [
        "[model]\nname = \"lq_scalar\"\n[model.params]\nhorizon = 0.0\n",
        "[model]\nname = \"lq_scalar\"\n[decouple]\ndegree = 4\n",
        "[model]\nname = \"lq_scalar\"\n[decouple]\nprobe_lo = [0.0]\n",
        "[model]\nname = \"lq_scalar\"\n[gradcheck]\nepsilon = 0.0\n",
        "[model]\nname = \"lq_scalar\"\n[chaos]\nw2_reps = 1\n",
        "[model]\nname = \"lq_scalar\"\n[chaos]\nns = [0, 4]\n",
        "[model]\nname = \"lq_scalar\"\n[solver]\ndegree = 9\n",
        "[model]\nname = \"lq_scalar\"\n[solver]\ninner = \"sideways\"\n",
        "[grid]\nsteps = 10\n",
    ] {
        match parse(bad) {
            Err(f @ Failure::Config(_)) => assert_eq!(f.exit_code(), 2),
            other => panic!("{bad}: {other:?}"),
        }
    }
}

#[test]
fn every_shipped_config_is_valid() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            mfc_cli::load_config(&path, &Overrides::default())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
