use super::SceneContext;
use crate::diffkit::{xavier_uniform, DiffError, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Ego feature width: speed, acceleration, one-hot command.
pub const EGO_FEATURES: usize = 5;
/// Obstacle feature width: x, y, radius, validity flag.
pub const OBSTACLE_FEATURES: usize = 4;
/// Corridor feature width: centroid x, centroid y, length, width.
const CORRIDOR_FEATURES: usize = 4;

// Fixed feature scales keeping raw meters/speeds near unit range for the
// learned affines. Part of the featurization contract, not tunable.
const SPEED_SCALE: f64 = 10.0;
const ACCEL_SCALE: f64 = 2.0;
const X_SCALE: f64 = 20.0;
const Y_SCALE: f64 = 5.0;
const LENGTH_SCALE: f64 = 40.0;
const WIDTH_SCALE: f64 = 10.0;

/// Raw (pre-projection) feature rows for a scene: `(ego [1×5],
/// obstacles [n_obs×4], corridor [1×4])`.
///
/// Obstacles are sorted by (x, y, radius) for a canonical ordering, padded
/// with zero rows flagged invalid, and truncated to `n_obs`. Deterministic
/// and total on valid scenes.
pub fn scene_features(scene: &SceneContext, n_obs: usize) -> (Tensor, Tensor, Tensor) {
    let cmd = scene.command.one_hot();
    let ego = Tensor::from_parts(
        vec![1, EGO_FEATURES],
        vec![
            scene.ego_speed / SPEED_SCALE,
            scene.ego_accel / ACCEL_SCALE,
            cmd[0],
            cmd[1],
            cmd[2],
        ],
    );

    let mut sorted: Vec<_> = scene.obstacles.clone();
    sorted.sort_by(|a, b| {
        (a.center[0], a.center[1], a.radius)
            .partial_cmp(&(b.center[0], b.center[1], b.radius))
            .expect("finite obstacle coordinates")
    });
    let mut obs_data = Vec::with_capacity(n_obs * OBSTACLE_FEATURES);
    for slot in 0..n_obs {
        match sorted.get(slot) {
            Some(o) => obs_data.extend_from_slice(&[
                o.center[0] / X_SCALE,
                o.center[1] / Y_SCALE,
                o.radius,
                1.0,
            ]),
            None => obs_data.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]),
        }
    }
    let obstacles = Tensor::from_parts(vec![n_obs, OBSTACLE_FEATURES], obs_data);

    let n = scene.corridor.len().max(1) as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &scene.corridor {
        cx += v[0];
        cy += v[1];
        x_lo = x_lo.min(v[0]);
        x_hi = x_hi.max(v[0]);
        y_lo = y_lo.min(v[1]);
        y_hi = y_hi.max(v[1]);
    }
    let corridor = Tensor::from_parts(
        vec![1, CORRIDOR_FEATURES],
        vec![
            cx / n / X_SCALE,
            cy / n / Y_SCALE,
            (x_hi - x_lo) / LENGTH_SCALE,
            (y_hi - y_lo) / WIDTH_SCALE,
        ],
    );
    (ego, obstacles, corridor)
}

/// Learned projection of scene features to model-width context tokens:
/// one ego token, `n_obs` obstacle tokens, one corridor token.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub width: usize,
    pub n_obs: usize,
    prefix: String,
}

impl ContextEncoder {
    /// Create the encoder parameters under `prefix` in `store`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        n_obs: usize,
        rng: &mut Rng,
    ) -> Result<Self, DiffError> {
        let p = |s: &str| format!("{prefix}.{s}");
        store.insert(&p("ego_w"), xavier_uniform(rng, EGO_FEATURES, width))?;
        store.insert(&p("ego_b"), Tensor::zeros(&[width]))?;
        store.insert(&p("obs_w"), xavier_uniform(rng, OBSTACLE_FEATURES, width))?;
        store.insert(&p("obs_b"), Tensor::zeros(&[width]))?;
        store.insert(&p("cor_w"), xavier_uniform(rng, CORRIDOR_FEATURES, width))?;
        store.insert(&p("cor_b"), Tensor::zeros(&[width]))?;
        Ok(Self {
            width,
            n_obs,
            prefix: prefix.to_string(),
        })
    }

    /// Handle to parameters created by a previous `init` (checkpoint load).
    pub fn attach(prefix: &str, width: usize, n_obs: usize) -> Self {
        Self {
            width,
            n_obs,
            prefix: prefix.to_string(),
        }
    }

    fn p(&self, s: &str) -> String {
        format!("{}.{}", self.prefix, s)
    }

    /// Encode a scene to a `(1 + n_obs + 1) × width` token tensor on the
    /// tape.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        scene: &SceneContext,
    ) -> Result<Var, DiffError> {
        let (ego, obs, cor) = scene_features(scene, self.n_obs);
        let affine = |tape: &mut Tape, x: Var, w: &str, b: &str| -> Result<Var, DiffError> {
            let w = tape.param(store, w)?;
            let b = tape.param(store, b)?;
            let h = tape.matmul(x, w)?;
            tape.add(h, b)
        };
        let ego = tape.constant(ego);
        let obs = tape.constant(obs);
        let cor = tape.constant(cor);
        let ego_tok = affine(tape, ego, &self.p("ego_w"), &self.p("ego_b"))?;
        let obs_tok = affine(tape, obs, &self.p("obs_w"), &self.p("obs_b"))?;
        let cor_tok = affine(tape, cor, &self.p("cor_w"), &self.p("cor_b"))?;
        tape.concat_rows(&[ego_tok, obs_tok, cor_tok])
    }
}
