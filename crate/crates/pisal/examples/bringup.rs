use pisal::metrics::{evaluate_model, GridSpec};
use pisal::physics::ProblemDefinition;
use pisal::sal::{sal_train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("stefan");
    let problem = ProblemDefinition::by_name(which).unwrap();
    let mut cfg = TrainConfig::default_for(&problem);
    if let Some(s) = args.get(2) {
        cfg.seed = s.parse().unwrap();
    }
    if let Some(k) = args.get(3) {
        cfg.k_max = k.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    match sal_train(&problem, &cfg) {
        Ok(out) => {
            for r in &out.log {
                println!(
                    "k={} mse={:.3e} (dmu1={:.2e} dmu2={:.2e} dmi={:.2e} pmu1={:.2e} pmu2={:.2e} pmi={:.2e}) l1={:.4} l2={:.4} |di|={} |ei|={} ferr={:.3e} t={:.1}s",
                    r.k, r.mse_total(), r.mse_dm_u1, r.mse_dm_u2, r.mse_dm_i,
                    r.mse_pm_u1, r.mse_pm_u2, r.mse_pm_i,
                    r.lambda1, r.lambda2, r.n_di, r.n_ei, r.field_error, r.seconds
                );
            }
            let report = evaluate_model(&out.model, &problem, &GridSpec::default_for(&problem));
            println!(
                "PE(l1)={:.4}% PE(l2)={:.4}% rmse={:?} rmse_iface={:.3e} iface_max={:.3e}",
                report.pe_lambda1, report.pe_lambda2, report.rmse_overall,
                report.rmse_interface, report.interface_max_abs_error
            );
        }
        Err(e) => println!("training failed: {e}"),
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
