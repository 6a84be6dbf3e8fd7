// Dev scratch: diagnose solution-AE generalization gap. Not shipped.
use latsolve::encoders::*;
use latsolve::grid::decompose;
use latsolve::pipeline::{load_dataset, Dataset};

fn main() {
    let (cfg, ds) = load_dataset(std::path::Path::new("/tmp/lat/data-laplace")).unwrap();
    let bundle = ModelBundle::load(std::path::Path::new("/tmp/lat/model-laplace")).unwrap();
    let grid = latsolve::grid::Grid::unit(cfg.grid_n).unwrap();
    let layout = decompose(grid, cfg.subdomain).unwrap();

    let (train, test) = match &ds {
        Dataset::Steady { train, test } => (train, test),
        _ => panic!(),
    };

    let recon_mae = |sc: &latsolve::pipeline::SteadyCase| -> f64 {
        let cond = conditions_for_case(&bundle.schema, &bundle.norm, None, None, &layout, &sc.case).unwrap();
        let eta_u = encode_solution(&bundle.sol.enc, &sc.solution, &layout, &bundle.norm).unwrap();
        let state = LatentState { eta_u, cond };
        let recon = decode_solution(&bundle.sol.dec, &state, &layout, &bundle.norm).unwrap();
        recon.mae(&sc.solution)
    };

    let mut train_maes: Vec<f64> = train.iter().take(50).map(recon_mae).collect();
    let mut test_maes: Vec<f64> = test.iter().map(recon_mae).collect();
    train_maes.sort_by(f64::total_cmp);
    test_maes.sort_by(f64::total_cmp);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "train recon MAE: mean {:.3e} median {:.3e} max {:.3e}",
        mean(&train_maes),
        train_maes[train_maes.len() / 2],
        train_maes.last().unwrap()
    );
    println!(
        "test  recon MAE: mean {:.3e} median {:.3e} max {:.3e}",
        mean(&test_maes),
        test_maes[test_maes.len() / 2],
        test_maes.last().unwrap()
    );

    // field value ranges (Neumann cases can leave [-1, 1])
    let mut ranges: Vec<f64> = train.iter().map(|sc| sc.solution.max_abs()).collect();
    ranges.sort_by(f64::total_cmp);
    println!(
        "train |solution| max: median {:.3} p90 {:.3} max {:.3}",
        ranges[ranges.len() / 2],
        ranges[ranges.len() * 9 / 10],
        ranges.last().unwrap()
    );

    // per-case: correlate recon error with field range
    for sc in test.iter().take(4) {
        println!(
            "  {}: |sol|max {:.3}, dirichlet edges {}, recon MAE {:.3e}",
            sc.name,
            sc.solution.max_abs(),
            sc.case.bc.dirichlet_count(),
            recon_mae(sc)
        );
    }

    // fixed-point dynamics: start at the encoded TRUE solution, iterate,
    // and watch the distance to the truth plus the step norm
    use latsolve::solver::propose_all;
    let sc = &test[0];
    let cond = conditions_for_case(&bundle.schema, &bundle.norm, None, None, &layout, &sc.case).unwrap();
    let eta_true = encode_solution(&bundle.sol.enc, &sc.solution, &layout, &bundle.norm).unwrap();
    let mut state = LatentState { eta_u: eta_true.clone(), cond: cond.clone() };
    println!("\niterating from the encoded true solution:");
    for it in 0..30 {
        let prop = propose_all(&bundle, &state, &layout).unwrap();
        let step = (&state.eta_u - &prop).mapv(|v| v * v).sum().sqrt() / 8.0;
        let dist = (&prop - &eta_true).mapv(|v| v * v).sum().sqrt() / 8.0;
        state.eta_u = prop;
        if it < 6 || it % 5 == 0 {
            let dec = decode_solution(&bundle.sol.dec, &state, &layout, &bundle.norm).unwrap();
            println!(
                "  iter {it:3}: step {step:.3e}, latent dist to truth {dist:.3e}, decoded MAE {:.3e}",
                dec.mae(&sc.solution)
            );
        }
    }

    // zero-init trace
    let cfg_solve = latsolve::solver::SolveConfig::default();
    let (pred, trace) = latsolve::solver::solve_steady(&bundle, &sc.case, grid, &cfg_solve).unwrap();
    println!(
        "\nzero init: {} iters, status {:?}, final eps {:.3e}, MAE {:.3e}",
        trace.iterations(),
        trace.status,
        trace.final_epsilon(),
        pred.mae(&sc.solution)
    );
    for e in trace.entries.iter().take(8) {
        println!("  iter {:3}: eps {:.4e}", e.iter, e.epsilon);
    }
}
