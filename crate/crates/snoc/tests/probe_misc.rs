use snoc::controllers::Architecture;
use snoc::cost::EmpiricalObjective;
use snoc::dynamics::generate_dataset;
use snoc::experiment::*;
use snoc::pacbayes::*;
use std::time::Instant;

#[test]
fn probe_bound_study_paper() {
    let cfg = ExperimentConfig::preset(Scenario::Lti, Profile::Paper);
    let out = std::env::temp_dir().join(format!("snoc-probe-bs-{}", std::process::id()));
    let t0 = Instant::now();
    let csv = cmd_bound_study(&cfg, &out).unwrap();
    eprintln!("paper bound study: {:?} ({} rows)", t0.elapsed(), csv.lines().count() - 1);
    let model = cfg.noise_model(cfg.horizon).unwrap();
    let test = generate_dataset(&model, cfg.bound_study.test_sequences, cfg.seed, "bound-study-test");
    let t1 = Instant::now();
    let cell =
        bound_study_cell(&cfg, 8, 0.2, &PriorSpec::gaussian_offset(), 10_000, 20_000, &test)
            .unwrap();
    eprintln!(
        "one repetition: {:?} bound={:.4} max_true={:.4}",
        t1.elapsed(),
        cell.bound,
        cell.true_costs.iter().cloned().fold(f64::MIN, f64::max)
    );
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn probe_mc_vs_grid() {
    let cfg = ExperimentConfig::preset(Scenario::Lti, Profile::Ci);
    let sys = cfg.system();
    let stage = cfg.stage();
    let model = cfg.noise_model(cfg.horizon).unwrap();
    let dataset = generate_dataset(&model, 16, 7, "train-data");
    let objective = EmpiricalObjective {
        system: &sys,
        architecture: Architecture::Affine,
        stage: &stage,
        dataset: &dataset,
        transform: cfg.transform().unwrap(),
    };
    let prior = cfg.prior_distribution().unwrap();
    for lambda in [1.0, 3.0] {
        let gibbs = GibbsPosterior::new(&prior, lambda, &objective).unwrap();
        let t0 = Instant::now();
        let cert = gibbs.qstar_bound_empirical(0.2, 0.1, 100_000, 11).unwrap();
        let t_mc = t0.elapsed();
        let beta_axis = GridAxis::covering(&prior.factors()[1], 400, 4.0).unwrap();
        let k_axis = GridAxis::covering(&prior.factors()[0], 400, 4.0).unwrap();
        let t1 = Instant::now();
        let grid = build_grid_posterior(&prior, &objective, lambda, beta_axis, k_axis, "u").unwrap();
        let gcert = grid.qstar_exact_bound(0.2, 1.0, 16).unwrap();
        eprintln!(
            "lambda {lambda}: mc {:.6} ({t_mc:?})  grid {:.6} ({:?})  diff {:.2e}",
            cert.bound,
            gcert.bound,
            t1.elapsed(),
            (cert.bound - gcert.bound).abs()
        );
    }
}
