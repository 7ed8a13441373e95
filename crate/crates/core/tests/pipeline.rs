use elu_rmdn::autodiff::FreezeMask;
use elu_rmdn::data::{load_csv, write_csv};
use elu_rmdn::garch::{fit_garch, simulate_garch, GarchParams};
use elu_rmdn::harness::{
    load_garch_model, load_model, parse_report_csv, render_report, run_benchmark, save_garch_model,
    save_model, Method, ReportFormat,
};
use elu_rmdn::optim::{train, TrainSchedule};
use elu_rmdn::rmdn::{init_params, model_nll, InitScheme, RmdnConfig};

#[test]
fn simulate_fit_save_reload() {
    let dir = tempfile::tempdir().unwrap();
    let truth = GarchParams::new(0.01, 0.05, 0.05, 0.1, 0.85).unwrap();
    let series = simulate_garch(&truth, 400, 17).unwrap();
    let csv = dir.path().join("s.csv");
    write_csv(&series, &csv).unwrap();
    let loaded = load_csv(&csv, "return", None).unwrap();
    assert_eq!(loaded.values(), series.values());
    assert_eq!(loaded.name(), "s");

    let fit = fit_garch(loaded.values()).unwrap();
    let gpath = dir.path().join("g.json");
    save_garch_model(&fit, &gpath).unwrap();
    assert_eq!(load_garch_model(&gpath).unwrap().params, fit.params);

    let config = RmdnConfig::default();
    let p = init_params(&config, 3, InitScheme::Pretrain).unwrap();
    let sched = TrainSchedule {
        pretrain_epochs: 5,
        train_epochs: 20,
        learning_rate: 0.01,
    };
    let rep = train(loaded.values(), &p, &config, &sched, &FreezeMask::nonlinear(&p)).unwrap();
    let mpath = dir.path().join("m.json");
    save_model(&rep.final_params, &config, &rep.init_state, &mpath).unwrap();
    let back = load_model(&mpath).unwrap();
    let ll = -model_nll(loaded.values(), &back.params, &back.config, &back.state).unwrap();
    assert_eq!(ll.to_bits(), rep.final_loglik.to_bits());
}

#[test]
fn benchmark_report_round_trips_through_csv() {
    let truth = GarchParams::new(0.0, 0.0, 0.05, 0.1, 0.85).unwrap();
    let series: Vec<_> = (0..2)
        .map(|i| simulate_garch(&truth, 150, 60 + i).unwrap())
        .collect();
    let sched = TrainSchedule {
        pretrain_epochs: 3,
        train_epochs: 10,
        learning_rate: 0.01,
    };
    let report = run_benchmark(&series, 2, &RmdnConfig::default(), &sched, 8, 2).unwrap();
    let rows = parse_report_csv(&render_report(&report, ReportFormat::Csv)).unwrap();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        let expected = report.summary(&row.series, row.summary.method).unwrap();
        assert_eq!(row.summary, expected);
        let runs = if row.summary.method == Method::Garch { 1 } else { 2 };
        assert_eq!(row.summary.converged + row.summary.not_converged, runs);
    }
    let text = render_report(&report, ReportFormat::Text);
    assert!(text.contains("garch-60"));
    assert!(text.contains("seeds: "));
}
