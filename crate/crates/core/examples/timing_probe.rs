//! Scratch probe: training wall-clock and post-training quality at the
//! candidate acceptance-fixture configuration.
use std::time::Instant;

use flowplan_core::config::Config;
use flowplan_core::evalkit::{
    drive_score, energy_distance, flatten_waypoints, mean_waypoint_l2, mode_recall,
    multimodality_d, EvalConfig,
};
use flowplan_core::flowbase::{SolverConfig, SolverMethod};
use flowplan_core::gmnprior::{build_gmn, GaussianMixtureNoise};
use flowplan_core::model::{ModelKind, PlannerModel};
use flowplan_core::rng::{derive_seed, rng_from};
use flowplan_core::synthworld::{generate_dataset, FamilyMix, GenConfig, Scenario};
use flowplan_core::arm::average_proposals;

fn fixture_config(seed: u64, epochs: usize, mix: FamilyMix) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.dataset.n_scenarios = 200;
    cfg.dataset.family_mix = mix;
    cfg.training.epochs = epochs;
    cfg
}

fn gen(cfg: &Config) -> Vec<Scenario> {
    let g = GenConfig {
        n_scenarios: cfg.dataset.n_scenarios,
        family_mix: cfg.dataset.family_mix.clone(),
        ..GenConfig::default()
    };
    generate_dataset(&g, cfg.seed).unwrap().scenarios
}

fn main() {
    let arg = |i: usize, d: f64| -> f64 {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(d)
    };
    let epochs = arg(1, 50.0) as usize;
    let lr = arg(2, 2e-4);
    let batch = arg(3, 32.0) as usize;
    let fork_epochs = arg(4, epochs as f64) as usize;
    let p_equal = arg(5, 0.25);
    let use_l2 = arg(6, 0.0) > 0.5;
    let wd = arg(7, 0.1);
    let eval_cfg = EvalConfig::default();

    // ---- single-mode fixture: one-step fidelity ----
    let mut cfg = fixture_config(2024, epochs, FamilyMix::only_stop_go());
    cfg.training.learning_rate = lr;
    cfg.training.batch_size = batch;
    cfg.training.lambda_fusion = 0.0;
    cfg.training.p_equal = p_equal;
    cfg.training.weight_decay = wd;
    if use_l2 {
        cfg.training.loss = flowplan_core::meanflow::LossKind::L2;
    }
    let data = gen(&cfg);
    let (gmn, norm) = build_gmn(&data, cfg.model.k, cfg.seed).unwrap();
    let t0 = Instant::now();
    let mut mf = PlannerModel::new(ModelKind::MeanFlow, cfg.clone(), gmn.clone(), norm.clone()).unwrap();
    let st = mf.train(&data).unwrap();
    let t_mf = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    let mut fm = PlannerModel::new(ModelKind::FmBaseline, cfg.clone(), gmn.clone(), norm.clone()).unwrap();
    let stf = fm.train(&data).unwrap();
    let t_fm = t0.elapsed().as_secs_f64();
    println!(
        "single-mode: mf train {t_mf:.1}s (loss {:.3}->{:.3}, fusion {:.3}->{:.3}), fm train {t_fm:.1}s (loss {:.4}->{:.4})",
        st[0].flow_loss, st.last().unwrap().flow_loss,
        st[0].fusion_loss, st.last().unwrap().fusion_loss,
        stf[0].flow_loss, stf.last().unwrap().flow_loss
    );

    // mean waypoint L2 of every one-step proposal to the scene expert
    let mut l2_sum = 0.0;
    let mut l2_n = 0usize;
    for (i, sc) in data.iter().enumerate() {
        let mut rng = rng_from(derive_seed(7000, i as u64));
        let plan = mf.plan_scene(&sc.scene, &mut rng, false).unwrap();
        for p in &plan.proposals {
            l2_sum += mean_waypoint_l2(p, &sc.experts[0]);
            l2_n += 1;
        }
    }
    println!("  mean one-step waypoint L2 = {:.4} m (threshold 0.15)", l2_sum / l2_n as f64);

    // 256-sample energy distance, one draw per scene (cycled), shared noise
    let expert_flats: Vec<Vec<f64>> = data.iter().flat_map(|s| s.experts.iter().map(flatten_waypoints)).collect();
    let solver = SolverConfig { method: SolverMethod::Euler, n_steps: 5 };
    let mut mf_samples = Vec::new();
    let mut fm_samples = Vec::new();
    for i in 0..256usize {
        let sc = &data[i % data.len()];
        let mut rng = rng_from(derive_seed(7100, i as u64));
        let x0 = gmn.sample_component(i % gmn.k, &mut rng).unwrap();
        let mf_traj = mf.one_step_from(&sc.scene, &x0).unwrap();
        mf_samples.push(flatten_waypoints(&mf_traj));
        let (fm_traj, _) = fm.ode_from(&sc.scene, &x0, &solver).unwrap();
        fm_samples.push(flatten_waypoints(&fm_traj));
    }
    let ed_mf = energy_distance(&mf_samples, &expert_flats).unwrap();
    let ed_fm = energy_distance(&fm_samples, &expert_flats).unwrap();
    println!("  ED one-step {ed_mf:.4} vs euler-5 {ed_fm:.4} (ratio {:.3}, threshold 1.5)", ed_mf / ed_fm);

    if fork_epochs == 0 {
        return;
    }
    // ---- fork fixture: coverage, diversity, fusion ----
    let mut cfg_f = fixture_config(2025, fork_epochs, FamilyMix::only_fork());
    cfg_f.training.learning_rate = lr;
    cfg_f.training.batch_size = batch;
    cfg_f.training.p_equal = p_equal;
    let data_f = gen(&cfg_f);
    let (gmn_f, norm_f) = build_gmn(&data_f, cfg_f.model.k, cfg_f.seed).unwrap();
    let t0 = Instant::now();
    let mut gm = PlannerModel::new(ModelKind::MeanFlow, cfg_f.clone(), gmn_f.clone(), norm_f.clone()).unwrap();
    gm.train(&data_f).unwrap();
    let t_gm = t0.elapsed().as_secs_f64();
    let std_prior = GaussianMixtureNoise::standard(cfg_f.model.k, cfg_f.dataset.t_f * 2);
    let t0 = Instant::now();
    let mut gs = PlannerModel::new(ModelKind::MeanFlow, cfg_f.clone(), std_prior, norm_f.clone()).unwrap();
    gs.train(&data_f).unwrap();
    let t_gs = t0.elapsed().as_secs_f64();
    println!("fork: gmn train {t_gm:.1}s, standard-prior train {t_gs:.1}s");

    let mut stats = |m: &PlannerModel, tag: &str| {
        let (mut rec, mut d_sum) = (0.0, 0.0);
        let (mut s_arm, mut s_avg) = (0.0, 0.0);
        for (i, sc) in data_f.iter().enumerate() {
            let mut rng = rng_from(derive_seed(7200, i as u64));
            let plan = m.plan_scene(&sc.scene, &mut rng, true).unwrap();
            rec += mode_recall(&plan.proposals, &sc.experts, 0.5);
            d_sum += multimodality_d(&plan.proposals, &eval_cfg).unwrap();
            let fused = plan.fused.as_ref().unwrap();
            s_arm += drive_score(&fused.trajectory, sc, &eval_cfg).score;
            s_avg += drive_score(&average_proposals(&plan.proposals), sc, &eval_cfg).score;
        }
        let n = data_f.len() as f64;
        println!(
            "  {tag}: recall@0.5 {:.3}  D {:.3}  score(arm) {:.1}  score(avg) {:.1}  gap {:.1}",
            rec / n, d_sum / n, s_arm / n, s_avg / n, (s_arm - s_avg) / n
        );
    };
    stats(&gm, "gmn    ");
    stats(&gs, "gauss  ");
}

