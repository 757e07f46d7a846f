//! Scratch rehearsal of the acceptance fixtures (deleted before release).
use flowplan_core::config::Config;
use flowplan_core::evalkit::{
    drive_score, energy_distance, flatten_waypoints, mean_waypoint_l2, mode_recall,
    multimodality_d, EvalConfig,
};
use flowplan_core::gmnprior::{build_gmn, normalized_expert, GaussianMixtureNoise};
use flowplan_core::meanflow::LossKind;
use flowplan_core::model::{ModelKind, PlannerModel};
use flowplan_core::rng::{derive_seed, rng_from};
use flowplan_core::synthworld::{generate_dataset, FamilyMix, Scenario};
use flowplan_core::flowbase::{SolverConfig, SolverMethod};

fn single_mode_cfg(epochs: usize) -> Config {
    let mut cfg = Config::default();
    cfg.seed = 2024;
    cfg.model.k = 1;
    cfg.dataset.n_scenarios = 200;
    cfg.dataset.family_mix = FamilyMix::only_stop_go();
    cfg.training.epochs = epochs;
    cfg.training.learning_rate = 3e-3;
    cfg.training.batch_size = 16;
    cfg.training.p_equal = 0.1;
    cfg.training.lambda_fusion = 0.0;
    cfg.training.loss = LossKind::L2;
    cfg
}

fn fork_cfg(epochs: usize, lr: f64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = 2025;
    cfg.dataset.v_min = 5.0;
    cfg.dataset.v_max = 9.5;
    cfg.dataset.n_scenarios = std::env::var("PROBE_N")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(200);
    cfg.dataset.family_mix = FamilyMix::only_fork();
    cfg.training.epochs = epochs;
    cfg.training.learning_rate = lr;
    cfg.training.batch_size = 16;
    cfg.training.p_equal = 0.1;
    cfg.training.lambda_fusion = 1.0;
    if std::env::var("PROBE_L2").is_ok() {
        cfg.training.loss = LossKind::L2;
    }
    if let Some(wd) = std::env::var("PROBE_WD").ok().and_then(|v| v.parse().ok()) {
        cfg.training.weight_decay = wd;
    }
    cfg
}

fn gen(cfg: &Config) -> Vec<Scenario> {
    generate_dataset(&cfg.dataset, cfg.seed).unwrap().scenarios
}

fn main() {
    let arg = |i: usize, d: f64| -> f64 {
        std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d)
    };
    let sm_epochs = arg(1, 300.0) as usize;
    let fk_epochs = arg(2, 0.0) as usize;
    let fk_lr = arg(3, 1e-3);
    let std_only = arg(4, 0.0) as usize;

    if std_only > 0 {
        std_probe(std_only, fk_lr);
        return;
    }

    if sm_epochs > 0 {
        single_mode(sm_epochs);
    }
    if fk_epochs > 0 {
        fork(fk_epochs, fk_lr);
    }
}

fn single_mode(epochs: usize) {
    let cfg = single_mode_cfg(epochs);
    let data = gen(&cfg);
    let (gmn, norm) = build_gmn(&data, cfg.model.k, cfg.seed).unwrap();
    let t0 = std::time::Instant::now();
    let mut mf =
        PlannerModel::new(ModelKind::MeanFlow, cfg.clone(), gmn.clone(), norm.clone()).unwrap();
    mf.train(&data).unwrap();
    let t_mf = t0.elapsed().as_secs_f64();
    let t0 = std::time::Instant::now();
    let mut fm =
        PlannerModel::new(ModelKind::FmBaseline, cfg.clone(), gmn.clone(), norm.clone()).unwrap();
    fm.train(&data).unwrap();
    let t_fm = t0.elapsed().as_secs_f64();

    // Waypoint fidelity: one-step sample with posterior-matched noise draw.
    let mut l2 = 0.0;
    for (i, sc) in data.iter().enumerate() {
        let mut rng = rng_from(derive_seed(7300, i as u64));
        let x0 = gmn.sample_component(i % gmn.k, &mut rng).unwrap();
        let plan = mf.one_step_from(&sc.scene, &x0).unwrap();
        l2 += mean_waypoint_l2(&plan, &sc.experts[0]);
    }
    l2 /= data.len() as f64;

    // Energy distance: 256 matched draws, one-step vs euler-5 on same x0.
    let mut mf_flats = Vec::new();
    let mut fm_flats = Vec::new();
    let solver = SolverConfig { method: SolverMethod::Euler, n_steps: 5 };
    for i in 0..256usize {
        let sc = &data[i % data.len()];
        let mut rng = rng_from(derive_seed(7100, i as u64));
        let x0 = gmn.sample_component(i % gmn.k, &mut rng).unwrap();
        let a = mf.one_step_from(&sc.scene, &x0).unwrap();
        let (b, _) = fm.ode_from(&sc.scene, &x0, &solver).unwrap();
        mf_flats.push(flatten_waypoints(&a));
        fm_flats.push(flatten_waypoints(&b));
    }
    let experts: Vec<Vec<f64>> = data
        .iter()
        .flat_map(|s| s.experts.iter().map(flatten_waypoints))
        .collect();
    let ed_mf = energy_distance(&mf_flats, &experts).unwrap();
    let ed_fm = energy_distance(&fm_flats, &experts).unwrap();
    println!(
        "single-mode e={epochs}: train mf {t_mf:.0}s fm {t_fm:.0}s | one-step L2 {l2:.4} m (<0.15) | ED {ed_mf:.4} vs euler-5 {ed_fm:.4} ratio {:.3} (<=1.5)",
        ed_mf / ed_fm
    );
}

fn std_probe(epochs: usize, lr: f64) {
    let mut cfg = fork_cfg(epochs, lr);
    cfg.training.lambda_fusion = 0.0;
    if let Ok(b) = std::env::var("PROBE_BATCH") {
        cfg.training.batch_size = b.parse().unwrap();
    }
    if let Ok(p) = std::env::var("PROBE_PEQ") {
        cfg.training.p_equal = p.parse().unwrap();
    }
    let data = gen(&cfg);
    let (gmn, norm) = build_gmn(&data, cfg.model.k, cfg.seed).unwrap();
    let std_prior = GaussianMixtureNoise::standard(cfg.model.k, gmn.dim);
    let t0 = std::time::Instant::now();
    let mut sg =
        PlannerModel::new(ModelKind::MeanFlow, cfg.clone(), std_prior, norm.clone()).unwrap();
    sg.train(&data).unwrap();
    let ec = EvalConfig::default();
    let (mut rec, mut d) = (0.0, 0.0);
    for (i, sc) in data.iter().enumerate() {
        let mut rng = rng_from(derive_seed(7500, i as u64));
        let ps = sg.plan_scene(&sc.scene, &mut rng, false).unwrap();
        rec += mode_recall(&ps.proposals, &sc.experts, 0.5);
        d += multimodality_d(&ps.proposals, &ec).unwrap();
    }
    let n = data.len() as f64;
    println!(
        "std-only e={epochs} lr={lr}: train {:.0}s | recall {:.3} | D {:.4}",
        t0.elapsed().as_secs_f64(), rec / n, d / n
    );
    if std::env::var("PROBE_DUMP").is_ok() {
        let sc = &data[0];
        let mut rng = rng_from(derive_seed(7500, 0));
        let ps = sg.plan_scene(&sc.scene, &mut rng, false).unwrap();
        println!("scene0 v0={:.2} expert0 wp: {:?}", sc.scene.ego_speed,
            sc.experts[0].waypoints.iter().map(|w| [(w[0]*10.0).round()/10.0,(w[1]*10.0).round()/10.0]).collect::<Vec<_>>());
        if sc.experts.len() > 1 {
            println!("          expert1 wp: {:?}",
                sc.experts[1].waypoints.iter().map(|w| [(w[0]*10.0).round()/10.0,(w[1]*10.0).round()/10.0]).collect::<Vec<_>>());
        }
        for (k, pr) in ps.proposals.iter().enumerate() {
            println!("  prop{k}: {:?}", pr.waypoints.iter().map(|w| [(w[0]*10.0).round()/10.0,(w[1]*10.0).round()/10.0]).collect::<Vec<_>>());
        }
    }
}

fn pairwise_d(props: &[flowplan_core::synthworld::Trajectory], ec: &EvalConfig) -> f64 {
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..props.len() {
        for j in i + 1..props.len() {
            acc += multimodality_d(&[props[i].clone(), props[j].clone()], ec).unwrap();
            count += 1;
        }
    }
    acc / count as f64
}

fn fork(epochs: usize, lr: f64) {
    let cfg = fork_cfg(epochs, lr);
    let data = gen(&cfg);
    let (gmn, norm) = build_gmn(&data, cfg.model.k, cfg.seed).unwrap();
    let t0 = std::time::Instant::now();
    let mut gm =
        PlannerModel::new(ModelKind::MeanFlow, cfg.clone(), gmn.clone(), norm.clone()).unwrap();
    gm.train(&data).unwrap();
    let std_prior = GaussianMixtureNoise::standard(cfg.model.k, gmn.dim);
    let mut sg =
        PlannerModel::new(ModelKind::MeanFlow, cfg.clone(), std_prior, norm.clone()).unwrap();
    sg.train(&data).unwrap();
    let t_tr = t0.elapsed().as_secs_f64();

    let ec = EvalConfig::default();
    let mut stats = [0.0f64; 8]; // recall_g, recall_s, d_g, d_s, score_arm, score_avg, pd_g, pd_s
    for (i, sc) in data.iter().enumerate() {
        let mut rng = rng_from(derive_seed(7500, i as u64));
        let pg = gm.plan_scene(&sc.scene, &mut rng, true).unwrap();
        let mut rng = rng_from(derive_seed(7500, i as u64));
        let ps = sg.plan_scene(&sc.scene, &mut rng, false).unwrap();
        stats[0] += mode_recall(&pg.proposals, &sc.experts, 0.5);
        stats[1] += mode_recall(&ps.proposals, &sc.experts, 0.5);
        stats[2] += multimodality_d(&pg.proposals, &ec).unwrap();
        stats[3] += multimodality_d(&ps.proposals, &ec).unwrap();
        stats[6] += pairwise_d(&pg.proposals, &ec);
        stats[7] += pairwise_d(&ps.proposals, &ec);
        let fused = pg.fused.as_ref().unwrap().trajectory.clone();
        let avg = flowplan_core::arm::average_proposals(&pg.proposals);
        stats[4] += drive_score(&fused, sc, &ec).score;
        stats[5] += drive_score(&avg, sc, &ec).score;
    }
    let n = data.len() as f64;
    println!(
        "fork e={epochs} lr={lr}: train {t_tr:.0}s | recall gmn {:.3} vs std {:.3} (>=0.9,>) | D gmn {:.4} vs std {:.4} (>) | score arm {:.1} vs avg {:.1} (gap {:.1} >= 10)",
        stats[0] / n, stats[1] / n, stats[2] / n, stats[3] / n, stats[4] / n, stats[5] / n,
        (stats[4] - stats[5]) / n
    );
    println!(
        "  pairwise D gmn {:.4} vs std {:.4} (>)",
        stats[6] / n, stats[7] / n
    );
    // per-expert-index min-L2 averaged over scenes: which mode is missed?
    let n_modes = data[0].experts.len();
    let mut per_mode = vec![0.0f64; n_modes];
    let mut per_mode_hit = vec![0.0f64; n_modes];
    for (i, sc) in data.iter().enumerate() {
        let mut rng = rng_from(derive_seed(7500, i as u64));
        let pg = gm.plan_scene(&sc.scene, &mut rng, false).unwrap();
        for (e, ex) in sc.experts.iter().enumerate() {
            let best = pg
                .proposals
                .iter()
                .map(|p| mean_waypoint_l2(p, ex))
                .fold(f64::INFINITY, f64::min);
            per_mode[e] += best;
            if best <= 0.5 {
                per_mode_hit[e] += 1.0;
            }
        }
    }
    for e in 0..n_modes {
        println!(
            "  mode {e}: mean min-L2 {:.3} m, hit@0.5 {:.0}%",
            per_mode[e] / n,
            100.0 * per_mode_hit[e] / n
        );
    }
}
