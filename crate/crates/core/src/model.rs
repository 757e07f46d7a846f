//! Full planner assembly: context encoder, flow decoder, optional fusion
//! head, and the mixture noise prior, together with the training loop,
//! one-step and multi-step sampling, and the NFE/latency comparison grid.
//!
//! Two model kinds share the same parameter layout apart from the extra
//! time-embedding row:
//!
//! * `MeanFlow` — the decoder predicts the *average* velocity over `[r, t]`
//!   and generates in a single network evaluation via `x̂1 = x0 + u(x0, 0, 1)`.
//!   It carries a fusion head that arbitrates the per-component proposals.
//! * `FmBaseline` — the decoder predicts the instantaneous velocity and
//!   generates by integrating an ODE with an explicit solver (Euler/Heun).

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{arm_loss, denormalized_waypoints, total_loss, ArmError, ArmNet};
use crate::config::Config;
use crate::diffkit::{cosine_lr, AdamW, DiffError, GradMap, ParamStore, Tape, Tensor, Var};
use crate::evalkit::{energy_distance, flatten_waypoints, mean_waypoint_l2, EvalError};
use crate::flowbase::{ode_sample, BaselineError, SolverConfig};
use crate::gmnprior::{
    flat_to_trajectory, normalized_expert, GaussianMixtureNoise, GmnError, NormalizationConstants,
};
use crate::meanflow::{
    flat_to_tokens, flow_loss, interpolate, meanflow_target_with, sample_time_pair, DecoderNet,
    FlowError, LossKind, TimePair,
};
use crate::rng::{derive_seed, rng_from, Rng};
use crate::synthworld::{ContextEncoder, SceneContext, Scenario, Trajectory};

/// Seed streams: every consumer of randomness hangs off the master seed
/// through its own named stream so adding one never perturbs the others.
pub const INIT_STREAM: u64 = 0x10;
pub const TRAIN_STREAM: u64 = 0x20;
pub const SAMPLE_STREAM: u64 = 0x30;

const ENC_PREFIX: &str = "enc";
const DEC_PREFIX: &str = "dec";
const FUSE_PREFIX: &str = "arm";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0}")]
    Diff(#[from] DiffError),
    #[error("{0}")]
    Gmn(#[from] GmnError),
    #[error("{0}")]
    Flow(#[from] FlowError),
    #[error("{0}")]
    Fusion(#[from] ArmError),
    #[error("{0}")]
    Baseline(#[from] BaselineError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("training needs a non-empty dataset")]
    EmptyDataset,
    #[error("this checkpoint has no fusion head")]
    NoFusionHead,
    #[error("one-step sampling needs an average-velocity model; this checkpoint is a flow-matching baseline (use an ODE solver)")]
    NotOneStep,
    #[error("ODE solvers apply to the flow-matching baseline; this checkpoint generates in one step")]
    NotOdeModel,
    #[error("noise prior dimension {gmn} does not match trajectory dimension {expected}")]
    DimMismatch { gmn: usize, expected: usize },
}

/// Which velocity the decoder predicts, and therefore how samples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "meanflow")]
    MeanFlow,
    #[serde(rename = "fm-baseline")]
    FmBaseline,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::MeanFlow => write!(f, "meanflow"),
            ModelKind::FmBaseline => write!(f, "fm-baseline"),
        }
    }
}

/// Per-epoch training record; serialized as one JSON line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean flow-matching loss over the epoch's batches.
    pub flow_loss: f64,
    /// Mean fusion (waypoint reconstruction) loss; 0 when the model has no
    /// fusion head or the term is switched off.
    pub fusion_loss: f64,
    /// Mean weighted total.
    pub total_loss: f64,
    /// Learning rate at the last step of the epoch.
    pub learning_rate: f64,
}

/// Fused plan plus the attention weights that produced it (length
/// `K + context tokens`).
#[derive(Debug, Clone)]
pub struct FusedPlan {
    pub trajectory: Trajectory,
    pub attention: Vec<f64>,
}

/// Everything sampled for one scene: per-component proposals (index ==
/// component id), their normalized flat outputs, and optionally the fused
/// trajectory.
#[derive(Debug, Clone)]
pub struct ScenePlan {
    pub proposals: Vec<Trajectory>,
    pub flats: Vec<Vec<f64>>,
    pub fused: Option<FusedPlan>,
}

#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub kind: ModelKind,
    pub config: Config,
    pub store: ParamStore,
    pub encoder: ContextEncoder,
    pub decoder: DecoderNet,
    pub fusion: Option<ArmNet>,
    pub gmn: GaussianMixtureNoise,
    pub norm: NormalizationConstants,
}

impl PlannerModel {
    /// Fresh model with freshly initialized parameters. The init RNG hangs
    /// off the config seed, so identical configs give bit-identical stores.
    pub fn new(
        kind: ModelKind,
        config: Config,
        gmn: GaussianMixtureNoise,
        norm: NormalizationConstants,
    ) -> Result<Self, ModelError> {
        let expected = config.dataset.t_f * 2;
        if gmn.dim != expected {
            return Err(ModelError::DimMismatch {
                gmn: gmn.dim,
                expected,
            });
        }
        let mut store = ParamStore::new();
        let mut rng = rng_from(derive_seed(config.seed, INIT_STREAM));
        let w = config.model.width;
        let encoder = ContextEncoder::init(&mut store, ENC_PREFIX, w, config.dataset.n_obs, &mut rng)?;
        let decoder = DecoderNet::init(
            &mut store,
            DEC_PREFIX,
            w,
            config.model.depth,
            config.model.heads,
            config.dataset.t_f,
            kind == ModelKind::MeanFlow,
            &mut rng,
        )?;
        let fusion = match kind {
            ModelKind::MeanFlow => Some(ArmNet::init(
                &mut store,
                FUSE_PREFIX,
                w,
                config.dataset.t_f,
                &mut rng,
            )?),
            ModelKind::FmBaseline => None,
        };
        Ok(Self {
            kind,
            config,
            store,
            encoder,
            decoder,
            fusion,
            gmn,
            norm,
        })
    }

    /// Rebuild the module views over an existing parameter store (checkpoint
    /// load). The store must already hold every parameter the views name.
    pub fn attach(
        kind: ModelKind,
        config: Config,
        gmn: GaussianMixtureNoise,
        norm: NormalizationConstants,
        store: ParamStore,
    ) -> Self {
        let w = config.model.width;
        let encoder = ContextEncoder::attach(ENC_PREFIX, w, config.dataset.n_obs);
        let decoder = DecoderNet::attach(
            DEC_PREFIX,
            w,
            config.model.depth,
            config.model.heads,
            config.dataset.t_f,
            kind == ModelKind::MeanFlow,
        );
        let fusion = match kind {
            ModelKind::MeanFlow => Some(ArmNet::attach(FUSE_PREFIX, w, config.dataset.t_f)),
            ModelKind::FmBaseline => None,
        };
        Self {
            kind,
            config,
            store,
            encoder,
            decoder,
            fusion,
            gmn,
            norm,
        }
    }

    // ------------------------------------------------------------------
    // Training
    // ------------------------------------------------------------------

    pub fn train(&mut self, dataset: &[Scenario]) -> Result<Vec<EpochStats>, ModelError> {
        self.train_with(dataset, |_| {})
    }

    /// Full training run; `on_epoch` fires after each epoch (progress
    /// reporting, loss-curve streaming).
    pub fn train_with(
        &mut self,
        dataset: &[Scenario],
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>, ModelError> {
        if dataset.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let tc = self.config.training.clone();
        let steps_per_epoch = dataset.len().div_ceil(tc.batch_size);
        let total_steps = tc.epochs * steps_per_epoch;
        let warmup_steps = tc.warmup_epochs * steps_per_epoch;
        let opt = AdamW {
            weight_decay: tc.weight_decay,
            ..AdamW::default()
        };
        let mut rng = rng_from(derive_seed(self.config.seed, TRAIN_STREAM));
        let mut stats = Vec::with_capacity(tc.epochs);
        let mut step = 0usize;
        for epoch in 0..tc.epochs {
            let order = shuffled_indices(dataset.len(), &mut rng);
            let (mut flow_sum, mut fusion_sum, mut total_sum) = (0.0, 0.0, 0.0);
            let mut last_lr = 0.0;
            for batch in order.chunks(tc.batch_size) {
                let out = self.batch_step(dataset, batch, &mut rng)?;
                self.store.set_grads(&out.grads)?;
                let lr = cosine_lr(step, total_steps, tc.learning_rate, warmup_steps);
                self.store.adamw_step(&opt, lr);
                step += 1;
                last_lr = lr;
                flow_sum += out.flow;
                fusion_sum += out.fusion;
                total_sum += out.total;
            }
            let n = steps_per_epoch as f64;
            let s = EpochStats {
                epoch,
                flow_loss: flow_sum / n,
                fusion_loss: fusion_sum / n,
                total_loss: total_sum / n,
                learning_rate: last_lr,
            };
            on_epoch(&s);
            stats.push(s);
        }
        Ok(stats)
    }

    /// One optimizer step's losses and gradients over a batch of scenario
    /// indices. A single tape records every scenario; one backward sweep
    /// yields the summed gradients.
    fn batch_step(
        &self,
        dataset: &[Scenario],
        batch: &[usize],
        rng: &mut Rng,
    ) -> Result<BatchOutput, ModelError> {
        use rand::Rng as _;
        let tc = &self.config.training;
        let mut tape = Tape::new();
        let mut flow_pairs: Vec<(Var, Tensor)> = Vec::with_capacity(batch.len());
        let mut fusion_terms: Vec<Var> = Vec::new();
        for &i in batch {
            let sc = &dataset[i];
            let ctx = self.encoder.encode(&mut tape, &self.store, &sc.scene)?;

            // Flow branch: pair one expert mode with a draw from its nearest
            // prior component, so each component learns the mode it anchors.
            let e_idx = rng.random_range(0..sc.experts.len());
            let x1 = normalized_expert(&sc.experts[e_idx], &self.norm);
            let k_star = self.gmn.nearest_component(&x1);
            let x0 = self.gmn.sample_component(k_star, rng)?;
            match self.kind {
                ModelKind::MeanFlow => {
                    let times = sample_time_pair(rng, tc.p_equal);
                    let fs = interpolate(&x0, &x1, times)?;
                    // the network is anchored at the start of its interval:
                    // input state z_r, so the one-step query (x0, 0, 1) is
                    // exactly a training-distribution point
                    let z_r = flat_to_tokens(&fs.z_r);
                    let v = flat_to_tokens(&fs.v);
                    let (u, tgt) =
                        meanflow_target_with(&mut tape, &z_r, &v, times, |tp, z, r, t| {
                            self.decoder.forward(tp, &self.store, z, Some(r), t, ctx, 1)
                        })?;
                    flow_pairs.push((u, tgt));
                }
                ModelKind::FmBaseline => {
                    let times = TimePair::instant(rng.random::<f64>())?;
                    let fs = interpolate(&x0, &x1, times)?;
                    let z = tape.constant(flat_to_tokens(&fs.z_t));
                    let t = tape.constant(Tensor::scalar(times.t));
                    let u = self.decoder.forward(&mut tape, &self.store, z, None, t, ctx, 1)?;
                    flow_pairs.push((u, flat_to_tokens(&fs.v)));
                }
            }

            // Fusion branch: fuse the model's own one-step proposals
            // (detached — the flow field is supervised only by the flow
            // loss) and supervise against the *closest* expert mode. The
            // fused plan commits to one mode; pulling it toward every mode
            // at once would drag it into the invalid average.
            if let Some(fusion_net) = &self.fusion {
                if tc.lambda_fusion > 0.0 {
                    let proposals = self.detached_proposal_rows(&mut tape, ctx, rng)?;
                    let fused = fusion_net.fuse(&mut tape, &self.store, proposals, ctx)?;
                    let wps = denormalized_waypoints(&mut tape, fused.deltas, &self.norm)?;
                    let mut best: Option<(f64, Var)> = None;
                    for expert in &sc.experts {
                        let l = arm_loss(&mut tape, wps, expert)?;
                        let val = tape.value(l).data()[0];
                        if best.as_ref().is_none_or(|(b, _)| val < *b) {
                            best = Some((val, l));
                        }
                    }
                    fusion_terms.push(best.expect("validated scenarios have experts").1);
                }
            }
        }

        let loss_kind = match self.kind {
            ModelKind::MeanFlow => tc.loss,
            // The baseline regresses instantaneous velocity with the
            // standard quadratic flow-matching objective.
            ModelKind::FmBaseline => LossKind::L2,
        };
        let l_flow = flow_loss(&mut tape, &flow_pairs, loss_kind)?;
        let l_fusion = match fusion_terms.len() {
            0 => None,
            n => {
                let mut acc = fusion_terms[0];
                for &t in &fusion_terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                Some(tape.scale(acc, 1.0 / n as f64)?)
            }
        };
        let total = total_loss(
            &mut tape,
            l_fusion,
            Some(l_flow),
            None,
            [tc.lambda_fusion, tc.lambda_flow, tc.lambda_map],
        )?;
        let flow_val = tape.value(l_flow).data()[0];
        let fusion_val = l_fusion.map_or(0.0, |v| tape.value(v).data()[0]);
        let total_val = tape.value(total).data()[0];
        let grads = tape.backward(total)?;
        Ok(BatchOutput {
            flow: flow_val,
            fusion: fusion_val,
            total: total_val,
            grads,
        })
    }

    /// One-step proposals for all prior components, recorded on the caller's
    /// tape and detached so no gradient reaches the flow field or encoder
    /// through them. Returns a `[K, T_f·2]` row matrix.
    fn detached_proposal_rows(
        &self,
        tape: &mut Tape,
        ctx: Var,
        rng: &mut Rng,
    ) -> Result<Var, ModelError> {
        let t_f = self.config.dataset.t_f;
        let draws = self.gmn.sample_all(rng);
        let k = draws.len();
        let stacked: Vec<f64> = draws.concat();
        let x0 = tape.constant(Tensor::new(vec![k * t_f, 2], stacked)?);
        let r = tape.constant(Tensor::scalar(0.0));
        let t = tape.constant(Tensor::scalar(1.0));
        let u = self
            .decoder
            .forward(tape, &self.store, x0, Some(r), t, ctx, k)?;
        let x1 = tape.add(x0, u)?;
        let det = tape.detach(x1)?;
        Ok(tape.reshape(det, vec![k, t_f * 2])?)
    }

    // ------------------------------------------------------------------
    // Sampling
    // ------------------------------------------------------------------

    /// One-step generation: each prior component contributes one proposal,
    /// produced in a single batched network evaluation (NFE = 1 per
    /// proposal). Optionally fuses them into a final plan.
    pub fn plan_scene(
        &self,
        scene: &SceneContext,
        rng: &mut Rng,
        with_fusion: bool,
    ) -> Result<ScenePlan, ModelError> {
        if self.kind != ModelKind::MeanFlow {
            return Err(ModelError::NotOneStep);
        }
        let draws = self.gmn.sample_all(rng);
        let flats = self.one_step_flats(scene, &draws)?;
        let proposals = self.flats_to_trajectories(&flats);
        let fused = if with_fusion {
            Some(self.fuse_flats(scene, &flats)?)
        } else {
            None
        };
        Ok(ScenePlan {
            proposals,
            flats,
            fused,
        })
    }

    /// `n` one-step draws from a single prior component.
    pub fn component_draws(
        &self,
        scene: &SceneContext,
        component: usize,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Trajectory>, ModelError> {
        if self.kind != ModelKind::MeanFlow {
            return Err(ModelError::NotOneStep);
        }
        let draws: Result<Vec<_>, _> = (0..n)
            .map(|_| self.gmn.sample_component(component, rng))
            .collect();
        let flats = self.one_step_flats(scene, &draws?)?;
        Ok(self.flats_to_trajectories(&flats))
    }

    /// One-step generation from a fixed starting noise (normalized flat
    /// layout). Used wherever two samplers must be compared on identical
    /// draws.
    pub fn one_step_from(
        &self,
        scene: &SceneContext,
        x0: &[f64],
    ) -> Result<Trajectory, ModelError> {
        if self.kind != ModelKind::MeanFlow {
            return Err(ModelError::NotOneStep);
        }
        let flats = self.one_step_flats(scene, std::slice::from_ref(&x0.to_vec()))?;
        Ok(flat_to_trajectory(&flats[0], &self.norm, self.config.dataset.dt))
    }

    /// ODE generation from a fixed starting noise; returns the trajectory
    /// and the measured NFE.
    pub fn ode_from(
        &self,
        scene: &SceneContext,
        x0: &[f64],
        solver: &SolverConfig,
    ) -> Result<(Trajectory, usize), ModelError> {
        if self.kind != ModelKind::FmBaseline {
            return Err(ModelError::NotOdeModel);
        }
        let (flat, nfe) = self.ode_flat(scene, x0, solver)?;
        Ok((
            flat_to_trajectory(&flat, &self.norm, self.config.dataset.dt),
            nfe,
        ))
    }

    /// Multi-step generation for the flow-matching baseline: one ODE solve
    /// per prior component. Returns the plan plus the measured NFE per
    /// trajectory.
    pub fn ode_plan_scene(
        &self,
        scene: &SceneContext,
        solver: &SolverConfig,
        rng: &mut Rng,
    ) -> Result<(ScenePlan, usize), ModelError> {
        if self.kind != ModelKind::FmBaseline {
            return Err(ModelError::NotOdeModel);
        }
        let draws = self.gmn.sample_all(rng);
        let mut flats = Vec::with_capacity(draws.len());
        let mut nfe = 0;
        for x0 in &draws {
            let (flat, n) = self.ode_flat(scene, x0, solver)?;
            nfe = n;
            flats.push(flat);
        }
        let proposals = self.flats_to_trajectories(&flats);
        Ok((
            ScenePlan {
                proposals,
                flats,
                fused: None,
            },
            nfe,
        ))
    }

    /// Fuse normalized flat proposals into a final trajectory. The fusion
    /// head sees the proposals and the scene context; attention weights are
    /// returned alongside.
    pub fn fuse_flats(
        &self,
        scene: &SceneContext,
        flats: &[Vec<f64>],
    ) -> Result<FusedPlan, ModelError> {
        let fusion_net = self.fusion.as_ref().ok_or(ModelError::NoFusionHead)?;
        let mut tape = Tape::new();
        let ctx = self.encoder.encode(&mut tape, &self.store, scene)?;
        let rows = tape.constant(Tensor::from_rows(flats)?);
        let fused = fusion_net.fuse(&mut tape, &self.store, rows, ctx)?;
        let wps = denormalized_waypoints(&mut tape, fused.deltas, &self.norm)?;
        let pts: Vec<[f64; 2]> = tape
            .value(wps)
            .data()
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        Ok(FusedPlan {
            trajectory: Trajectory::new(pts, self.config.dataset.dt),
            attention: fused.attention,
        })
    }

    /// Fuse proposals given as trajectories (re-normalizes them first).
    pub fn fuse_trajectories(
        &self,
        scene: &SceneContext,
        proposals: &[Trajectory],
    ) -> Result<FusedPlan, ModelError> {
        let flats: Vec<Vec<f64>> = proposals
            .iter()
            .map(|p| normalized_expert(p, &self.norm))
            .collect();
        self.fuse_flats(scene, &flats)
    }

    /// Single batched one-step evaluation for a set of starting noises.
    fn one_step_flats(
        &self,
        scene: &SceneContext,
        draws: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let t_f = self.config.dataset.t_f;
        let g = draws.len();
        let mut tape = Tape::new();
        let ctx = self.encoder.encode(&mut tape, &self.store, scene)?;
        let stacked: Vec<f64> = draws.concat();
        let x0 = tape.constant(Tensor::new(vec![g * t_f, 2], stacked)?);
        let r = tape.constant(Tensor::scalar(0.0));
        let t = tape.constant(Tensor::scalar(1.0));
        let u = self
            .decoder
            .forward(&mut tape, &self.store, x0, Some(r), t, ctx, g)?;
        let x1 = tape.add(x0, u)?;
        let flat = tape.value(x1).data();
        Ok((0..g)
            .map(|i| flat[i * t_f * 2..(i + 1) * t_f * 2].to_vec())
            .collect())
    }

    /// Integrate the instantaneous-velocity field for one starting noise;
    /// every field evaluation is a fresh forward pass (counted as one NFE).
    fn ode_flat(
        &self,
        scene: &SceneContext,
        x0: &[f64],
        solver: &SolverConfig,
    ) -> Result<(Vec<f64>, usize), ModelError> {
        let t_f = self.config.dataset.t_f;
        let out = ode_sample(x0, solver, |z, t| {
            let mut tape = Tape::new();
            let ctx = self.encoder.encode(&mut tape, &self.store, scene)?;
            let zv = tape.constant(Tensor::new(vec![t_f, 2], z.to_vec())?);
            let tv = tape.constant(Tensor::scalar(t));
            let u = self.decoder.forward(&mut tape, &self.store, zv, None, tv, ctx, 1)?;
            Ok(tape.value(u).data().to_vec())
        })?;
        Ok(out)
    }

    fn flats_to_trajectories(&self, flats: &[Vec<f64>]) -> Vec<Trajectory> {
        flats
            .iter()
            .map(|f| flat_to_trajectory(f, &self.norm, self.config.dataset.dt))
            .collect()
    }
}

struct BatchOutput {
    flow: f64,
    fusion: f64,
    total: f64,
    grads: GradMap,
}

/// Fisher–Yates shuffle driven by the training stream (the `rand` trait
/// version is not exposed for our seeded generator wrapper's lifetime, and
/// this keeps the draw order explicit and stable).
fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    use rand::Rng as _;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ----------------------------------------------------------------------
// NFE / latency comparison
// ----------------------------------------------------------------------

/// One row of the sampler comparison: how many network evaluations a method
/// needs per trajectory, how long a scene takes, and how close the samples
/// land to the expert distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NfeRow {
    pub method: String,
    pub nfe: usize,
    /// Median over repetitions of (wall-clock / scene count), milliseconds.
    pub median_ms_per_scene: f64,
    /// Mean over scenes of the distance to the closest expert mode (meters).
    pub mean_min_l2: f64,
    /// Energy distance between the sample set and the expert set.
    pub energy_distance: f64,
}

enum MethodSpec<'a> {
    OneStep(&'a PlannerModel),
    Ode(&'a PlannerModel, SolverConfig),
}

impl MethodSpec<'_> {
    fn name(&self) -> String {
        match self {
            MethodSpec::OneStep(_) => "meanflow-1".to_string(),
            MethodSpec::Ode(_, s) => format!("{}-{}", s.method, s.n_steps),
        }
    }

    /// One trajectory for one scene; returns the normalized flat plus NFE.
    fn sample(
        &self,
        scene: &SceneContext,
        x0: &[f64],
    ) -> Result<(Vec<f64>, usize), ModelError> {
        match self {
            MethodSpec::OneStep(m) => {
                let flats = m.one_step_flats(scene, std::slice::from_ref(&x0.to_vec()))?;
                Ok((flats.into_iter().next().expect("one draw in"), 1))
            }
            MethodSpec::Ode(m, solver) => m.ode_flat(scene, x0, solver),
        }
    }

    fn model(&self) -> &PlannerModel {
        match self {
            MethodSpec::OneStep(m) => m,
            MethodSpec::Ode(m, _) => m,
        }
    }
}

/// Sample every scene once per method (shared per-scene starting noise,
/// cycling through prior components), timing `reps` full sweeps, and score
/// the resulting sample sets. Rows come back in method order: one-step
/// first, then each solver configuration.
pub fn compare_nfe(
    one_step: &PlannerModel,
    baseline: &PlannerModel,
    scenes: &[Scenario],
    solver_grid: &[SolverConfig],
    reps: usize,
    seed: u64,
) -> Result<Vec<NfeRow>, ModelError> {
    assert!(reps >= 1 && !scenes.is_empty());
    let mut methods: Vec<MethodSpec> = vec![MethodSpec::OneStep(one_step)];
    for s in solver_grid {
        methods.push(MethodSpec::Ode(baseline, s.clone()));
    }

    // Shared starting noise per scene: both models carry the same prior in a
    // like-for-like comparison, so the draw stream matches across methods.
    let expert_flats: Vec<Vec<f64>> = scenes
        .iter()
        .flat_map(|sc| sc.experts.iter().map(flatten_waypoints))
        .collect();

    let mut rows = Vec::with_capacity(methods.len());
    for method in &methods {
        let model = method.model();
        let k = model.gmn.k;
        let draw_x0 = |i: usize| -> Result<Vec<f64>, ModelError> {
            let mut rng = rng_from(derive_seed(seed, i as u64));
            Ok(model.gmn.sample_component(i % k, &mut rng)?)
        };

        // Correctness pass: one trajectory per scene, NFE check.
        let mut nfe = 0usize;
        let mut samples = Vec::with_capacity(scenes.len());
        for (i, sc) in scenes.iter().enumerate() {
            let x0 = draw_x0(i)?;
            let (flat, n) = method.sample(&sc.scene, &x0)?;
            nfe = n;
            samples.push(flat_to_trajectory(&flat, &model.norm, model.config.dataset.dt));
        }

        // Timing pass: median over full-sweep repetitions.
        let mut per_scene_ms = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            for (i, sc) in scenes.iter().enumerate() {
                let x0 = draw_x0(i)?;
                let _ = method.sample(&sc.scene, &x0)?;
            }
            let total = start.elapsed().as_secs_f64() * 1e3;
            per_scene_ms.push(total / scenes.len() as f64);
        }
        per_scene_ms.sort_by(|a, b| a.total_cmp(b));
        let median = per_scene_ms[per_scene_ms.len() / 2];

        let mean_min_l2 = scenes
            .iter()
            .zip(&samples)
            .map(|(sc, s)| {
                sc.experts
                    .iter()
                    .map(|e| mean_waypoint_l2(s, e))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / scenes.len() as f64;
        let sample_flats: Vec<Vec<f64>> = samples.iter().map(flatten_waypoints).collect();
        let ed = energy_distance(&sample_flats, &expert_flats)?;

        rows.push(NfeRow {
            method: method.name(),
            nfe,
            median_ms_per_scene: median,
            mean_min_l2,
            energy_distance: ed,
        });
    }
    Ok(rows)
}
