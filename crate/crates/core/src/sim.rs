//! Synthetic multi-user pHRI data: a 2-D air-hockey task under a robotic
//! guiding force, with per-user behavioral profiles inducing individual
//! differences.
//!
//! The table is `[-half_width, half_width] x [-half_length, half_length]`;
//! the user paddle lives on a line near the bottom, the scripted opponent
//! near the top. Each timestep the robot emits a guiding force toward an
//! intercept point (a function of the opponent-driven puck), the user blends
//! guidance-following with a personal intent and the puck advances
//! kinematically with elastic wall reflections.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{export_user_csv, save_user, Dims, InteractionSample, MetaDataset, UserDataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::seeds;

/// How one synthetic user responds to the task and the guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    /// Fraction of the guiding force followed, in [0, 1].
    pub compliance: f64,
    /// Preferred 2-D offset added to the user's own aim.
    pub lateral_bias: [f64; 2],
    /// Standard deviation of per-step action jitter.
    pub motor_noise: f64,
    /// Timesteps of first-order smoothing applied to the action.
    pub reaction_lag: u32,
    /// Paddle speed limit (table units per second).
    pub skill: f64,
}

impl UserProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.compliance) {
            return Err(Error::Config(format!("compliance {} outside [0,1]", self.compliance)));
        }
        if self.motor_noise < 0.0 {
            return Err(Error::Config("motor noise must be >= 0".to_string()));
        }
        if self.skill <= 0.0 {
            return Err(Error::Config("skill must be positive".to_string()));
        }
        Ok(())
    }

    /// Draw a profile from the seeded population distributions.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let bias = Normal::new(0.0, 0.1).expect("valid normal");
        UserProfile {
            compliance: rng.gen_range(0.3..0.95),
            lateral_bias: [bias.sample(rng), bias.sample(rng)],
            motor_noise: rng.gen_range(0.005..0.03),
            reaction_lag: rng.gen_range(0..4),
            skill: rng.gen_range(2.0..4.0),
        }
    }
}

/// Table geometry, physics constants and episode layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub half_width: f64,
    pub half_length: f64,
    pub restitution: f64,
    pub dt: f64,
    pub guidance_gain: f64,
    pub episode_len: usize,
    pub opponent_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            half_width: 1.0,
            half_length: 1.0,
            restitution: 0.95,
            dt: 0.05,
            guidance_gain: 5.0,
            episode_len: 250,
            opponent_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.half_width <= 0.0 || self.half_length <= 0.0 {
            return Err(Error::Config("table bounds must be positive".to_string()));
        }
        if self.episode_len < 2 {
            return Err(Error::Config("episode length must be >= 2".to_string()));
        }
        if self.dt <= 0.0 || self.guidance_gain <= 0.0 {
            return Err(Error::Config("dt and guidance gain must be positive".to_string()));
        }
        Ok(())
    }

    fn user_line(&self) -> f64 {
        -0.8 * self.half_length
    }

    fn opponent_line(&self) -> f64 {
        0.8 * self.half_length
    }
}

/// Reflect a coordinate into `[-bound, bound]` the way a ballistic path
/// folds at the walls.
fn fold(mut x: f64, bound: f64) -> f64 {
    let period = 4.0 * bound;
    x = (x + bound).rem_euclid(period);
    if x > 2.0 * bound {
        x = period - x;
    }
    x - bound
}

fn clamp_step(step: [f64; 2], max_len: f64) -> [f64; 2] {
    let n = (step[0] * step[0] + step[1] * step[1]).sqrt();
    if n <= max_len || n == 0.0 {
        step
    } else {
        [step[0] * max_len / n, step[1] * max_len / n]
    }
}

struct PuckState {
    pos: [f64; 2],
    vel: [f64; 2],
}

/// Simulate one episode, emitting `(x_s, x_r, x_h, y)` per timestep with
/// `x_h(t+1) = y(t)`.
pub fn simulate_episode(
    profile: &UserProfile,
    env: &EnvConfig,
    seed: u64,
    episode_id: u32,
) -> Result<Vec<InteractionSample>> {
    profile.validate()?;
    env.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[seed, episode_id as u64]));
    let mut opp_rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[env.opponent_seed, seed, episode_id as u64]));
    let noise = Normal::new(0.0, 1.0).expect("valid normal");

    let user_line = env.user_line();
    let opp_line = env.opponent_line();
    let serve = |rng: &mut ChaCha8Rng| -> PuckState {
        let angle: f64 = rng.gen_range(-1.0..1.0) * 0.9;
        let speed = rng.gen_range(1.2..2.0);
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        PuckState {
            pos: [rng.gen_range(-0.3..0.3), 0.0],
            vel: [speed * angle.sin(), dir * speed * angle.cos()],
        }
    };

    let mut puck = serve(&mut rng);
    let mut paddle = [0.0, user_line];
    let mut paddle_vel = [0.0, 0.0];
    let mut opp = [0.0, opp_line];
    let mut opp_vel = [0.0, 0.0];
    let kappa = 1.0 / (1.0 + profile.reaction_lag as f64);
    let max_step = profile.skill * env.dt;

    let mut samples = Vec::with_capacity(env.episode_len);
    for t in 0..env.episode_len {
        // guidance: pull toward the predicted puck crossing of the user line
        let intercept_x = if puck.vel[1] < -1e-9 {
            let tau = (puck.pos[1] - user_line) / -puck.vel[1];
            fold(puck.pos[0] + puck.vel[0] * tau, env.half_width)
        } else {
            0.0 // defensive home when the puck moves away
        };
        let guid_target = [intercept_x, user_line];
        let x_r = [
            env.guidance_gain * (guid_target[0] - paddle[0]),
            env.guidance_gain * (guid_target[1] - paddle[1]),
        ];

        // the user's own aim tracks the current puck x (less anticipation)
        // shifted by the personal bias
        let own_target = [
            fold(puck.pos[0], env.half_width) + profile.lateral_bias[0],
            user_line + profile.lateral_bias[1],
        ];
        let c = profile.compliance;
        let target = [
            c * guid_target[0] + (1.0 - c) * own_target[0],
            c * guid_target[1] + (1.0 - c) * own_target[1],
        ];
        let step = clamp_step([target[0] - paddle[0], target[1] - paddle[1]], max_step);
        let mut next = [paddle[0] + kappa * step[0], paddle[1] + kappa * step[1]];
        if profile.motor_noise > 0.0 {
            next[0] += profile.motor_noise * noise.sample(&mut rng);
            next[1] += profile.motor_noise * noise.sample(&mut rng);
            next[0] = next[0].clamp(-env.half_width, env.half_width);
            next[1] = next[1].clamp(-env.half_length, env.half_length);
        }

        let x_s = vec![
            puck.pos[0],
            puck.pos[1],
            puck.vel[0],
            puck.vel[1],
            paddle[0],
            paddle[1],
            paddle_vel[0],
            paddle_vel[1],
            opp[0],
            opp[1],
            opp_vel[0],
            opp_vel[1],
        ];
        samples.push(InteractionSample {
            x_s,
            x_r: x_r.to_vec(),
            x_h: paddle.to_vec(),
            y: next.to_vec(),
            episode_id,
            timestep: t as u32,
        });

        // advance the user paddle
        paddle_vel = [(next[0] - paddle[0]) / env.dt, (next[1] - paddle[1]) / env.dt];
        paddle = next;

        // scripted opponent: tracks the puck with jitter and a speed limit
        let opp_target = [
            fold(puck.pos[0] + opp_rng.gen_range(-0.1..0.1), env.half_width),
            opp_line,
        ];
        let opp_step = clamp_step([opp_target[0] - opp[0], opp_target[1] - opp[1]], 3.0 * env.dt);
        let opp_next = [opp[0] + opp_step[0], opp[1] + opp_step[1]];
        opp_vel = [(opp_next[0] - opp[0]) / env.dt, (opp_next[1] - opp[1]) / env.dt];
        opp = opp_next;

        // puck kinematics with elastic walls; paddle hits transfer velocity
        puck.pos[0] += puck.vel[0] * env.dt;
        puck.pos[1] += puck.vel[1] * env.dt;
        if puck.pos[0].abs() > env.half_width {
            puck.pos[0] = fold(puck.pos[0], env.half_width);
            puck.vel[0] = -puck.vel[0] * env.restitution;
        }
        let paddle_radius = 0.15 * env.half_width;
        if puck.pos[1] <= user_line && puck.vel[1] < 0.0 {
            if (puck.pos[0] - paddle[0]).abs() <= paddle_radius {
                puck.vel[1] = -puck.vel[1] * env.restitution;
                puck.vel[0] += 0.5 * paddle_vel[0];
                puck.pos[1] = user_line + (user_line - puck.pos[1]);
            }
        } else if puck.pos[1] >= opp_line && puck.vel[1] > 0.0 && (puck.pos[0] - opp[0]).abs() <= paddle_radius {
            puck.vel[1] = -puck.vel[1] * env.restitution;
            puck.vel[0] += 0.5 * opp_vel[0];
            puck.pos[1] = opp_line - (puck.pos[1] - opp_line);
        }
        // goal or stalled puck: re-serve
        let speed = (puck.vel[0] * puck.vel[0] + puck.vel[1] * puck.vel[1]).sqrt();
        if puck.pos[1].abs() > env.half_length || speed < 0.2 {
            puck = serve(&mut rng);
        }
    }
    Ok(samples)
}

// ── normalization ───────────────────────────────────────────────────

/// Per-dimension mean/std for the state, robot and action fields. The human
/// action `x_h` and the target `y` share the action statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub robot_mean: Vec<f64>,
    pub robot_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormalizationStats {
    /// Statistics of the raw samples: state and robot moments over all
    /// fields' occurrences, action moments over `y`.
    pub fn compute(users: &[UserDataset], dims: Dims) -> Result<Self> {
        let mut acc_state = MeanVar::new(dims.state);
        let mut acc_robot = MeanVar::new(dims.robot);
        let mut acc_action = MeanVar::new(dims.action);
        for u in users {
            for s in &u.samples {
                acc_state.push(&s.x_s);
                acc_robot.push(&s.x_r);
                acc_action.push(&s.y);
            }
        }
        if acc_state.count == 0 {
            return Err(Error::EmptyBatch("NormalizationStats::compute"));
        }
        let (state_mean, state_std) = acc_state.finish();
        let (robot_mean, robot_std) = acc_robot.finish();
        let (action_mean, action_std) = acc_action.finish();
        Ok(NormalizationStats { state_mean, state_std, robot_mean, robot_std, action_mean, action_std })
    }

    pub fn normalize_sample(&self, s: &InteractionSample) -> InteractionSample {
        InteractionSample {
            x_s: norm_vec(&s.x_s, &self.state_mean, &self.state_std),
            x_r: norm_vec(&s.x_r, &self.robot_mean, &self.robot_std),
            x_h: norm_vec(&s.x_h, &self.action_mean, &self.action_std),
            y: norm_vec(&s.y, &self.action_mean, &self.action_std),
            episode_id: s.episode_id,
            timestep: s.timestep,
        }
    }

    pub fn denormalize_action(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(self.action_mean.iter().zip(&self.action_std)).map(|(x, (m, s))| x * s + m).collect()
    }

    pub fn normalize_action(&self, v: &[f64]) -> Vec<f64> {
        norm_vec(v, &self.action_mean, &self.action_std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.17e}", x)).collect::<Vec<_>>().join(" ");
        let text = format!(
            "x_s.mean = {}\nx_s.std = {}\nx_r.mean = {}\nx_r.std = {}\naction.mean = {}\naction.std = {}\n",
            fmt(&self.state_mean),
            fmt(&self.state_std),
            fmt(&self.robot_mean),
            fmt(&self.robot_std),
            fmt(&self.action_mean),
            fmt(&self.action_std),
        );
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let get = |key: &str| -> Result<Vec<f64>> {
            text.lines()
                .find_map(|l| {
                    let (k, v) = l.split_once('=')?;
                    (k.trim() == key).then(|| {
                        v.split_whitespace()
                            .map(|x| x.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
                            .collect::<Result<Vec<f64>>>()
                    })
                })
                .ok_or_else(|| Error::Format {
                    path: path.display().to_string(),
                    detail: format!("missing key '{}'", key),
                })?
        };
        Ok(NormalizationStats {
            state_mean: get("x_s.mean")?,
            state_std: get("x_s.std")?,
            robot_mean: get("x_r.mean")?,
            robot_std: get("x_r.std")?,
            action_mean: get("action.mean")?,
            action_std: get("action.std")?,
        })
    }
}

fn norm_vec(v: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    v.iter().zip(mean.iter().zip(std)).map(|(x, (m, s))| (x - m) / s).collect()
}

struct MeanVar {
    count: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MeanVar {
    fn new(dim: usize) -> Self {
        MeanVar { count: 0, sum: vec![0.0; dim], sum_sq: vec![0.0; dim] }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1;
        for (i, &x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sum_sq[i] += x * x;
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        (mean, std)
    }
}

// ── meta-dataset generation ─────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n_users: usize,
    pub episodes_per_user: usize,
    pub env: EnvConfig,
    pub seed: u64,
    /// Normalization statistics are computed over users `0..train_users`
    /// only; the remaining users are normalized with the same statistics.
    /// `None` means all users.
    pub train_users: Option<usize>,
    pub csv_export: bool,
}

/// Draw per-user profiles, simulate episodes, normalize by the train-split
/// statistics and write per-user binary files plus `stats.txt` into `out`.
/// Returns the generated (normalized) datasets, the profiles and the stats.
pub fn gen_meta_dataset(
    cfg: &GenConfig,
    out: &Path,
) -> Result<(MetaDataset, Vec<UserProfile>, NormalizationStats)> {
    if cfg.n_users < 2 {
        return Err(Error::InsufficientUsers { needed: 2, got: cfg.n_users });
    }
    cfg.env.validate()?;
    let train_users = cfg.train_users.unwrap_or(cfg.n_users);
    if train_users == 0 || train_users > cfg.n_users {
        return Err(Error::Config(format!(
            "train_users {} out of range 1..={}",
            train_users, cfg.n_users
        )));
    }

    let mut profile_rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[cfg.seed, PROFILE_STREAM]));
    let profiles: Vec<UserProfile> = (0..cfg.n_users).map(|_| UserProfile::sample(&mut profile_rng)).collect();

    let raw = gen_raw_users(&profiles, &cfg.env, cfg.seed, cfg.episodes_per_user)?;
    let stats = NormalizationStats::compute(&raw[..train_users], raw[0].dims)?;

    std::fs::create_dir_all(out)?;
    let mut users = Vec::with_capacity(raw.len());
    for u in &raw {
        let normalized = UserDataset {
            user_id: u.user_id,
            dims: u.dims,
            samples: u.samples.iter().map(|s| stats.normalize_sample(s)).collect(),
        };
        save_user(out, &normalized)?;
        if cfg.csv_export {
            export_user_csv(out, &normalized)?;
        }
        users.push(normalized);
    }
    stats.save(&out.join("stats.txt"))?;
    Ok((MetaDataset { users }, profiles, stats))
}

/// Simulate raw (unnormalized) datasets for explicit profiles.
pub fn gen_raw_users(
    profiles: &[UserProfile],
    env: &EnvConfig,
    seed: u64,
    episodes_per_user: usize,
) -> Result<Vec<UserDataset>> {
    let users = exec::map_indexed(profiles.len(), |uid| -> Result<UserDataset> {
        let profile = &profiles[uid];
        let episodes = exec::map_indexed(episodes_per_user, |ep| {
            simulate_episode(profile, env, seeds::mix(&[seed, uid as u64]), ep as u32)
        });
        let mut samples = Vec::with_capacity(episodes_per_user * env.episode_len);
        for ep in episodes {
            samples.extend(ep?);
        }
        Ok(UserDataset { user_id: uid, dims: Dims::default_hockey(), samples })
    });
    users.into_iter().collect()
}

// keeps the profile stream distinct from episode streams under the same seed
const PROFILE_STREAM: u64 = 0x70726f66;
