//! Toy continuous-control domains with analytic dynamics and pixel rendering.
//!
//! Three domains ship: `pendulum` (swing-up with a sparse upright bonus),
//! `cartpole` (swing-up) and `point_mass` (planar reacher). Each control
//! period of `DT` seconds is integrated with semi-implicit Euler over
//! `MICRO_STEPS` equal micro-steps; an agent step applies the action for
//! `action_repeat` control periods and sums their rewards.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndmath::{Scalar, Tensor};
use crate::seeds;

pub const DOMAINS: [&str; 3] = ["pendulum", "cartpole", "point_mass"];

/// Control period per physics substep.
pub const DT: f64 = 0.05;
/// Semi-implicit Euler iterations per control period.
pub const MICRO_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Pixels per side.
    pub render_size: usize,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Episode length in physics substeps.
    pub episode_length: usize,
    pub action_repeat: usize,
    /// Frames per stacked observation.
    pub frame_stack: usize,
}

impl DomainSpec {
    /// 32x32 grayscale, 3-frame stacks, 200-substep episodes.
    pub fn desk(name: &str) -> Result<Self> {
        let (state_dim, action_dim) = match name {
            "pendulum" => (3, 1),
            "cartpole" => (5, 1),
            "point_mass" => (6, 2),
            other => return Err(Error::UnknownDomain(other.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            state_dim,
            action_dim,
            render_size: 32,
            channels: 1,
            episode_length: 200,
            action_repeat: 2,
            frame_stack: 3,
        })
    }

    /// 84x84 RGB, 3-frame stacks, 1000-substep episodes.
    pub fn paper(name: &str) -> Result<Self> {
        Ok(Self {
            render_size: 84,
            channels: 3,
            episode_length: 1000,
            ..Self::desk(name)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::desk(&self.name)?;
        let mut bad = Vec::new();
        if self.render_size < 16 {
            bad.push(format!("render size {} must be at least 16", self.render_size));
        }
        if self.channels != 1 && self.channels != 3 {
            bad.push(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.episode_length == 0 || self.action_repeat == 0 || self.frame_stack == 0 {
            bad.push("episode length, action repeat and frame stack must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }

    /// Agent decisions per episode.
    pub fn agent_steps_per_episode(&self) -> usize {
        self.episode_length.div_ceil(self.action_repeat)
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.render_size * self.render_size
    }

    /// Channel count of a stacked observation tensor.
    pub fn stacked_channels(&self) -> usize {
        self.channels * self.frame_stack
    }
}

/// K consecutive frames, oldest first, each `[C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub frames: Vec<Vec<f32>>,
    pub size: usize,
    pub channels: usize,
    pub timestep: usize,
}

impl FrameStack {
    pub fn latest(&self) -> &[f32] {
        self.frames.last().expect("stack is never empty")
    }

    /// Concatenate frames along the channel axis: `[K*C, H, W]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.frames.iter().flatten().map(|&p| T::lit(p as f64)).collect();
        Tensor::new(&[self.frames.len() * self.channels, self.size, self.size], data)
            .expect("frame sizes are uniform")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: FrameStack,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: FrameStack,
    pub terminal: bool,
}

/// Square raster over world coordinates `[-extent, extent]²`.
pub struct Canvas {
    pub size: usize,
    pub channels: usize,
    pub extent: f64,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy)]
pub struct Paint {
    pub rgb: [f32; 3],
    pub gray: f32,
}

impl Canvas {
    pub fn new(size: usize, channels: usize, extent: f64) -> Self {
        Self {
            size,
            channels,
            extent,
            data: vec![0.0; size * size * channels],
        }
    }

    fn pixel_world(&self) -> f64 {
        2.0 * self.extent / self.size as f64
    }

    /// Paint with coverage from a signed distance (negative inside).
    fn shade(&mut self, paint: Paint, sdf: impl Fn(f64, f64) -> f64) {
        let px = self.pixel_world();
        let plane = self.size * self.size;
        for row in 0..self.size {
            // Image rows grow downward, world y grows upward.
            let wy = self.extent - (row as f64 + 0.5) * px;
            for col in 0..self.size {
                let wx = -self.extent + (col as f64 + 0.5) * px;
                let coverage = (0.5 - sdf(wx, wy) / px).clamp(0.0, 1.0) as f32;
                if coverage <= 0.0 {
                    continue;
                }
                let idx = row * self.size + col;
                if self.channels == 1 {
                    self.data[idx] = self.data[idx].max(coverage * paint.gray);
                } else {
                    for c in 0..3 {
                        let d = &mut self.data[c * plane + idx];
                        *d = d.max(coverage * paint.rgb[c]);
                    }
                }
            }
        }
    }

    pub fn disc(&mut self, cx: f64, cy: f64, r: f64, paint: Paint) {
        self.shade(paint, |x, y| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r);
    }

    pub fn segment(&mut self, a: (f64, f64), b: (f64, f64), half_width: f64, paint: Paint) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        self.shade(paint, |x, y| {
            let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            ((x - qx).powi(2) + (y - qy).powi(2)).sqrt() - half_width
        });
    }

    pub fn rect(&mut self, cx: f64, cy: f64, hw: f64, hh: f64, paint: Paint) {
        self.shade(paint, |x, y| {
            let qx = (x - cx).abs() - hw;
            let qy = (y - cy).abs() - hh;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0)
        });
    }
}

/// Analytic dynamics of one domain.
pub trait Physics: Send {
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// Integrate one control period; returns that period's reward.
    fn advance(&mut self, action: &[f64]) -> f64;
    fn render(&self, canvas: &mut Canvas);
    fn extent(&self) -> f64;
    /// Raw integrator state.
    fn raw_state(&self) -> Vec<f64>;
    fn set_raw_state(&mut self, s: &[f64]) -> Result<()>;
    /// Observation-style state used by diagnostics.
    fn ground_truth(&self) -> Vec<f64>;
}

fn set_exact(dst: &mut [f64], src: &[f64], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::shape(format!(
            "{what} state has {} components, got {}",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited pendulum; angle 0 is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    /// `[angle, angular velocity]`.
    pub state: [f64; 2],
    pub gravity: f64,
    pub damping: f64,
    pub max_torque: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            state: [PI, 0.0],
            gravity: 10.0,
            damping: 0.05,
            max_torque: 5.0,
        }
    }
}

impl Pendulum {
    pub fn energy(&self) -> f64 {
        let [theta, omega] = self.state;
        0.5 * omega * omega + self.gravity * (1.0 + theta.cos())
    }
}

impl Physics for Pendulum {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.state = [rng.gen_range(-PI..PI), 0.0];
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let h = DT / MICRO_STEPS as f64;
        let torque = self.max_torque * action[0];
        let [mut theta, mut omega] = self.state;
        for _ in 0..MICRO_STEPS {
            omega += h * (self.gravity * theta.sin() - self.damping * omega + torque);
            theta += h * omega;
        }
        self.state = [wrap_angle(theta), omega];
        if self.state[0].cos() > (30f64).to_radians().cos() {
            1.0
        } else {
            0.0
        }
    }

    fn render(&self, canvas: &mut Canvas) {
        let theta = self.state[0];
        let tip = (0.8 * theta.sin(), 0.8 * theta.cos());
        let pole = Paint { rgb: [0.9, 0.5, 0.2], gray: 0.75 };
        let bob = Paint { rgb: [1.0, 0.9, 0.3], gray: 1.0 };
        canvas.disc(0.0, 0.0, 0.08, Paint { rgb: [0.4, 0.4, 0.4], gray: 0.35 });
        canvas.segment((0.0, 0.0), tip, 0.07, pole);
        canvas.disc(tip.0, tip.1, 0.14, bob);
    }

    fn extent(&self) -> f64 {
        1.0
    }

    fn raw_state(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn set_raw_state(&mut self, s: &[f64]) -> Result<()> {
        set_exact(&mut self.state, s, "pendulum")
    }

    fn ground_truth(&self) -> Vec<f64> {
        let [theta, omega] = self.state;
        vec![theta.cos(), theta.sin(), omega]
    }
}

/// Cart-pole with the pole starting down; angle 0 is upright.
#[derive(Clone, Debug)]
pub struct CartPole {
    /// `[x, x_dot, angle, angle_dot]`.
    pub state: [f64; 4],
}

impl CartPole {
    const GRAVITY: f64 = 9.8;
    const CART_MASS: f64 = 1.0;
    const POLE_MASS: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 4.0;
    const RAIL: f64 = 2.4;
}

impl Default for CartPole {
    fn default() -> Self {
        Self { state: [0.0, 0.0, PI, 0.0] }
    }
}

impl Physics for CartPole {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.state = [
            rng.gen_range(-0.1..0.1),
            0.0,
            PI + rng.gen_range(-0.1..0.1),
            0.0,
        ];
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let h = DT / MICRO_STEPS as f64;
        let force = Self::FORCE * action[0];
        let total = Self::CART_MASS + Self::POLE_MASS;
        let ml = Self::POLE_MASS * Self::HALF_LENGTH;
        let [mut x, mut v, mut th, mut w] = self.state;
        for _ in 0..MICRO_STEPS {
            let (s, c) = th.sin_cos();
            let temp = (force + ml * w * w * s) / total;
            let th_acc = (Self::GRAVITY * s - c * temp)
                / (Self::HALF_LENGTH * (4.0 / 3.0 - Self::POLE_MASS * c * c / total));
            let x_acc = temp - ml * th_acc * c / total;
            v += h * x_acc;
            w += h * th_acc;
            x += h * v;
            th += h * w;
            if x.abs() > Self::RAIL {
                x = x.clamp(-Self::RAIL, Self::RAIL);
                v = 0.0;
            }
        }
        self.state = [x, v, wrap_angle(th), w];
        let upright = (1.0 + self.state[2].cos()) / 2.0;
        let centered = (1.0 + (-x * x).exp()) / 2.0;
        upright * centered
    }

    fn render(&self, canvas: &mut Canvas) {
        let [x, _, th, _] = self.state;
        let cart_y = -0.4;
        let tip = (x + 2.0 * Self::HALF_LENGTH * th.sin(), cart_y + 2.0 * Self::HALF_LENGTH * th.cos());
        canvas.segment((-2.6, cart_y), (2.6, cart_y), 0.02, Paint { rgb: [0.3, 0.3, 0.3], gray: 0.25 });
        canvas.rect(x, cart_y, 0.25, 0.12, Paint { rgb: [0.2, 0.5, 0.9], gray: 0.55 });
        canvas.segment((x, cart_y), tip, 0.07, Paint { rgb: [0.9, 0.7, 0.3], gray: 1.0 });
    }

    fn extent(&self) -> f64 {
        2.6
    }

    fn raw_state(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn set_raw_state(&mut self, s: &[f64]) -> Result<()> {
        set_exact(&mut self.state, s, "cartpole")
    }

    fn ground_truth(&self) -> Vec<f64> {
        let [x, v, th, w] = self.state;
        vec![x, th.cos(), th.sin(), v, w]
    }
}

/// Damped planar point mass reaching a random goal inside `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct PointMass {
    /// `[x, y, x_dot, y_dot, goal_x, goal_y]`.
    pub state: [f64; 6],
}

impl PointMass {
    const GAIN: f64 = 2.0;
    const DAMPING: f64 = 1.0;
    const WALL: f64 = 1.0;
    pub const GOAL_RADIUS: f64 = 0.1;
}

impl Default for PointMass {
    fn default() -> Self {
        Self { state: [0.0; 6] }
    }
}

impl Physics for PointMass {
    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        let mut u = || rng.gen_range(-0.8..0.8);
        self.state = [u(), u(), 0.0, 0.0, u(), u()];
    }

    fn advance(&mut self, action: &[f64]) -> f64 {
        let h = DT / MICRO_STEPS as f64;
        let s = &mut self.state;
        for _ in 0..MICRO_STEPS {
            for axis in 0..2 {
                s[2 + axis] += h * (Self::GAIN * action[axis] - Self::DAMPING * s[2 + axis]);
                s[axis] += h * s[2 + axis];
                if s[axis].abs() > Self::WALL {
                    s[axis] = s[axis].clamp(-Self::WALL, Self::WALL);
                    s[2 + axis] = 0.0;
                }
            }
        }
        let dist = ((s[0] - s[4]).powi(2) + (s[1] - s[5]).powi(2)).sqrt();
        if dist < Self::GOAL_RADIUS {
            1.0
        } else {
            -dist
        }
    }

    fn render(&self, canvas: &mut Canvas) {
        let s = &self.state;
        canvas.disc(s[4], s[5], 0.12, Paint { rgb: [0.2, 0.8, 0.3], gray: 0.45 });
        canvas.disc(s[0], s[1], 0.1, Paint { rgb: [0.9, 0.2, 0.3], gray: 1.0 });
    }

    fn extent(&self) -> f64 {
        1.15
    }

    fn raw_state(&self) -> Vec<f64> {
        self.state.to_vec()
    }

    fn set_raw_state(&mut self, s: &[f64]) -> Result<()> {
        set_exact(&mut self.state, s, "point_mass")
    }

    fn ground_truth(&self) -> Vec<f64> {
        let s = &self.state;
        vec![s[0], s[1], s[2], s[3], s[4], s[5]]
    }
}

pub fn physics_for(name: &str) -> Result<Box<dyn Physics>> {
    Ok(match name {
        "pendulum" => Box::new(Pendulum::default()),
        "cartpole" => Box::new(CartPole::default()),
        "point_mass" => Box::new(PointMass::default()),
        other => return Err(Error::UnknownDomain(other.to_string())),
    })
}

/// A domain instance with frame stacking and episode bookkeeping.
pub struct Environment {
    spec: DomainSpec,
    physics: Box<dyn Physics>,
    stack: VecDeque<Vec<f32>>,
    steps: usize,
    ready: bool,
}

impl Environment {
    pub fn new(spec: DomainSpec) -> Result<Self> {
        spec.validate()?;
        let physics = physics_for(&spec.name)?;
        Ok(Self::with_physics(spec, physics))
    }

    pub fn with_physics(spec: DomainSpec, physics: Box<dyn Physics>) -> Self {
        Self {
            spec,
            physics,
            stack: VecDeque::new(),
            steps: 0,
            ready: false,
        }
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    /// Draw an initial physical state from `seed` and fill the stack with
    /// copies of the first frame.
    pub fn reset(&mut self, seed: u64) -> FrameStack {
        let mut rng = seeds::rng(seed);
        self.physics.reset(&mut rng);
        self.restart_stack()
    }

    fn restart_stack(&mut self) -> FrameStack {
        let frame = self.render();
        self.stack = std::iter::repeat_n(frame, self.spec.frame_stack).collect();
        self.steps = 0;
        self.ready = true;
        self.observation()
    }

    /// Overwrite the raw integrator state and re-render a fresh stack.
    pub fn set_physical_state(&mut self, state: &[f64]) -> Result<FrameStack> {
        self.physics.set_raw_state(state)?;
        Ok(self.restart_stack())
    }

    pub fn physical_state(&self) -> Vec<f64> {
        self.physics.raw_state()
    }

    pub fn render(&self) -> Vec<f32> {
        let mut canvas = Canvas::new(self.spec.render_size, self.spec.channels, self.physics.extent());
        self.physics.render(&mut canvas);
        canvas.data
    }

    pub fn observation(&self) -> FrameStack {
        FrameStack {
            frames: self.stack.iter().cloned().collect(),
            size: self.spec.render_size,
            channels: self.spec.channels,
            timestep: self.steps,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if !self.ready {
            return Err(Error::NotReset);
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::shape(format!(
                "action has {} components, domain expects {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        for (index, &value) in action.iter().enumerate() {
            if !(value.abs() <= 1.0 + 1e-9) {
                return Err(Error::OutOfBounds { index, value });
            }
        }
        let clipped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let state = self.observation();
        let reward = (0..self.spec.action_repeat)
            .map(|_| self.physics.advance(&clipped))
            .sum();
        self.stack.pop_front();
        self.stack.push_back(self.render());
        self.steps += 1;
        Ok(Transition {
            state,
            action: action.to_vec(),
            reward,
            next_state: self.observation(),
            terminal: false,
        })
    }

    /// Time limit reached; the next call must be `reset`.
    pub fn episode_done(&self) -> bool {
        self.steps * self.spec.action_repeat >= self.spec.episode_length
    }

    pub fn ground_truth_state(&self) -> Result<Vec<f64>> {
        if !self.ready {
            return Err(Error::NotReset);
        }
        Ok(self.physics.ground_truth())
    }
}

/// Uniform i.i.d. actions over the `[-1, 1]` box.
pub fn uniform_action(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> Environment {
        Environment::new(DomainSpec::desk(name).unwrap()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env("pendulum");
        let mut b = env("pendulum");
        assert_eq!(a.reset(7), b.reset(7));
        assert_eq!(a.ground_truth_state().unwrap(), b.ground_truth_state().unwrap());
        assert_ne!(a.reset(8).frames, b.reset(7).frames);
    }

    #[test]
    fn pendulum_initial_angles_cover_circle() {
        let mut e = env("pendulum");
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for seed in 0..1000 {
            e.reset(seed);
            let th = e.physical_state()[0];
            lo = lo.min(th);
            hi = hi.max(th);
        }
        let tol = 0.05 * 2.0 * PI;
        assert!(lo < -PI + tol && hi > PI - tol, "{lo} {hi}");
    }

    #[test]
    fn point_mass_is_visible() {
        let mut e = env("point_mass");
        for seed in 0..50 {
            let obs = e.reset(seed);
            assert!(obs.latest().iter().any(|&p| p > 0.5));
            assert!(obs.frames.iter().flatten().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn stable_equilibrium_is_fixed() {
        let mut e = env("pendulum");
        e.set_physical_state(&[PI, 0.0]).unwrap();
        for _ in 0..20 {
            e.step(&[0.0]).unwrap();
        }
        let s = e.physical_state();
        assert!((wrap_angle(s[0] - PI)).abs() < 1e-9 && s[1].abs() < 1e-9, "{s:?}");
    }

    #[test]
    fn reacher_reward_definition() {
        let mut e = env("point_mass");
        e.set_physical_state(&[0.3, -0.2, 0.0, 0.0, 0.3, -0.2]).unwrap();
        let t = e.step(&[0.0, 0.0]).unwrap();
        assert_eq!(t.reward, 2.0); // one per repeated substep
        e.set_physical_state(&[0.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap();
        let t = e.step(&[0.0, 0.0]).unwrap();
        assert!((t.reward + 2.0).abs() < 1e-12);
    }

    #[test]
    fn cartpole_pushes_right() {
        let mut e = env("cartpole");
        e.reset(3);
        let mut last = e.physical_state()[0];
        for _ in 0..10 {
            e.step(&[1.0]).unwrap();
            let x = e.physical_state()[0];
            assert!(x > last, "{x} <= {last}");
            last = x;
        }
    }

    #[test]
    fn ground_truth_layouts() {
        let mut p = env("pendulum");
        p.reset(1);
        let th = p.physical_state()[0];
        assert_eq!(p.ground_truth_state().unwrap(), vec![th.cos(), th.sin(), 0.0]);
        let mut m = env("point_mass");
        m.reset(1);
        assert_eq!(m.ground_truth_state().unwrap(), m.physical_state());
        assert_eq!(env("cartpole").spec().state_dim, 5);
    }

    #[test]
    fn errors() {
        let mut e = env("pendulum");
        assert!(matches!(e.step(&[0.0]), Err(Error::NotReset)));
        assert!(matches!(e.ground_truth_state(), Err(Error::NotReset)));
        e.reset(0);
        assert!(matches!(e.step(&[1.5]), Err(Error::OutOfBounds { index: 0, .. })));
        assert!(e.step(&[1.0 + 1e-10]).is_ok());
        assert!(matches!(e.step(&[f64::NAN]), Err(Error::OutOfBounds { .. })));
        assert!(matches!(DomainSpec::desk("walker"), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn undamped_energy_is_conserved() {
        let spec = DomainSpec::desk("pendulum").unwrap();
        let pend = Pendulum {
            damping: 0.0,
            state: [PI / 2.0, 0.0],
            ..Pendulum::default()
        };
        let e0 = pend.energy();
        let mut env = Environment::with_physics(spec, Box::new(pend));
        env.set_physical_state(&[PI / 2.0, 0.0]).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..500 {
            env.step(&[0.0]).unwrap(); // two substeps each
            let s = env.physical_state();
            let e = Pendulum { state: [s[0], s[1]], ..Pendulum::default() }.energy();
            worst = worst.max((e - e0).abs() / e0);
        }
        assert!(worst < 1e-3, "relative energy drift {worst}");
    }

    #[test]
    fn episode_boundary() {
        let mut e = env("pendulum");
        e.reset(0);
        for _ in 0..e.spec().agent_steps_per_episode() {
            assert!(!e.episode_done());
            e.step(&[0.0]).unwrap();
        }
        assert!(e.episode_done());
    }

    #[test]
    fn rendering_is_pure() {
        let mut a = env("cartpole");
        a.set_physical_state(&[0.4, 1.0, 0.3, -2.0]).unwrap();
        let mut b = env("cartpole");
        b.set_physical_state(&[0.4, 1.0, 0.3, -2.0]).unwrap();
        assert_eq!(a.render(), b.render());
        let rgb = DomainSpec { channels: 3, ..DomainSpec::desk("cartpole").unwrap() };
        let mut c = Environment::new(rgb).unwrap();
        assert_eq!(c.reset(0).latest().len(), 3 * 32 * 32);
    }
}
