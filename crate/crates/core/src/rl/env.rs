//! Small pixel environments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::RlError;

/// An RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn black(height: usize, width: usize) -> Self {
        Frame { height, width, pixels: vec![0; height * width * 3] }
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub frame: Frame,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn reset(&mut self) -> Frame;
    fn step(&mut self, action: usize) -> Result<Step, RlError>;
    fn action_count(&self) -> usize;
    /// `(height, width)` of emitted frames.
    fn frame_size(&self) -> (usize, usize);
}

/// Which environment to build, with its grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvSpec {
    Catch { height: usize, width: usize },
    Gridworld { height: usize, width: usize },
}

impl EnvSpec {
    /// Parses `catch`, `gridworld`, or either with a `:HxW` suffix.
    pub fn parse(s: &str) -> Result<Self, RlError> {
        let (name, size) = match s.split_once(':') {
            Some((n, size)) => {
                let (h, w) = size
                    .split_once('x')
                    .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
                    .ok_or_else(|| RlError::InvalidEnv(format!("bad size in {s:?}")))?;
                (n, (h, w))
            }
            None => (s, (10, 10)),
        };
        let spec = match name {
            "catch" => EnvSpec::Catch { height: size.0, width: size.1 },
            "gridworld" => EnvSpec::Gridworld { height: size.0, width: size.1 },
            _ => return Err(RlError::InvalidEnv(format!("unknown environment {name:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> String {
        match *self {
            EnvSpec::Catch { height, width } => format!("catch:{height}x{width}"),
            EnvSpec::Gridworld { height, width } => format!("gridworld:{height}x{width}"),
        }
    }

    fn validate(&self) -> Result<(), RlError> {
        let (EnvSpec::Catch { height, width } | EnvSpec::Gridworld { height, width }) = *self;
        if height < 5 || width < 5 {
            return Err(RlError::InvalidEnv(format!("grid must be at least 5x5, got {height}x{width}")));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>, RlError> {
        Ok(match *self {
            EnvSpec::Catch { height, width } => Box::new(Catch::new(height, width, seed)?),
            EnvSpec::Gridworld { height, width } => Box::new(Gridworld::new(height, width, seed)?),
        })
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvSpec::Catch { .. } => Catch::ACTIONS,
            EnvSpec::Gridworld { .. } => Gridworld::ACTIONS,
        }
    }
}

const WHITE: [u8; 3] = [255, 255, 255];

/// A ball falls one row per step from a random column of the top row; a
/// three-pixel paddle on the bottom row moves left, stays, or moves right.
/// The episode ends when the ball reaches the bottom row: +1 if it lands on
/// the paddle, −1 otherwise. Every episode lasts `height − 1` steps.
#[derive(Debug, Clone)]
pub struct Catch {
    height: usize,
    width: usize,
    rng: ChaCha8Rng,
    ball: (usize, usize),
    paddle: usize,
    done: bool,
}

impl Catch {
    pub const ACTIONS: usize = 3;

    pub fn new(height: usize, width: usize, seed: u64) -> Result<Self, RlError> {
        EnvSpec::Catch { height, width }.validate()?;
        let mut env = Catch { height, width, rng: ChaCha8Rng::seed_from_u64(seed), ball: (0, 0), paddle: width / 2, done: true };
        env.reset();
        Ok(env)
    }

    pub fn ball(&self) -> (usize, usize) {
        self.ball
    }

    /// Center column of the paddle.
    pub fn paddle(&self) -> usize {
        self.paddle
    }

    fn render(&self) -> Frame {
        let mut f = Frame::black(self.height, self.width);
        for c in self.paddle - 1..=self.paddle + 1 {
            f.set(self.height - 1, c, WHITE);
        }
        f.set(self.ball.0, self.ball.1, WHITE);
        f
    }
}

impl Environment for Catch {
    fn reset(&mut self) -> Frame {
        self.ball = (0, self.rng.random_range(0..self.width));
        self.paddle = self.width / 2;
        self.done = false;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step, RlError> {
        if self.done {
            return Err(RlError::StepAfterDone);
        }
        if action >= Self::ACTIONS {
            return Err(RlError::InvalidAction { action, actions: Self::ACTIONS });
        }
        self.paddle = (self.paddle + action).saturating_sub(1).clamp(1, self.width - 2);
        self.ball.0 += 1;
        let mut reward = 0.0;
        if self.ball.0 == self.height - 1 {
            self.done = true;
            reward = if self.ball.1.abs_diff(self.paddle) <= 1 { 1.0 } else { -1.0 };
        }
        Ok(Step { frame: self.render(), reward, done: self.done })
    }

    fn action_count(&self) -> usize {
        Self::ACTIONS
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// The agent starts in a random free cell of the left column and moves
/// up, down, left or right. Reaching the goal (bottom-right corner) gives +1,
/// stepping on a hazard gives −1; both end the episode, as does the step limit.
/// Hazards form a wall across the middle column with a gap.
#[derive(Debug, Clone)]
pub struct Gridworld {
    height: usize,
    width: usize,
    rng: ChaCha8Rng,
    agent: (usize, usize),
    hazards: Vec<(usize, usize)>,
    steps: usize,
    done: bool,
}

impl Gridworld {
    pub const ACTIONS: usize = 4;

    pub fn new(height: usize, width: usize, seed: u64) -> Result<Self, RlError> {
        EnvSpec::Gridworld { height, width }.validate()?;
        let col = width / 2;
        let gap = height / 2;
        let hazards = (0..height).filter(|&r| r != gap).map(|r| (r, col)).collect();
        let mut env = Gridworld { height, width, rng: ChaCha8Rng::seed_from_u64(seed), agent: (0, 0), hazards, steps: 0, done: true };
        env.reset();
        Ok(env)
    }

    pub fn step_limit(&self) -> usize {
        4 * (self.height + self.width)
    }

    fn goal(&self) -> (usize, usize) {
        (self.height - 1, self.width - 1)
    }

    fn render(&self) -> Frame {
        let mut f = Frame::black(self.height, self.width);
        for &(r, c) in &self.hazards {
            f.set(r, c, [0, 0, 255]);
        }
        let g = self.goal();
        f.set(g.0, g.1, [0, 255, 0]);
        f.set(self.agent.0, self.agent.1, [255, 0, 0]);
        f
    }
}

impl Environment for Gridworld {
    fn reset(&mut self) -> Frame {
        self.agent = (self.rng.random_range(0..self.height), 0);
        self.steps = 0;
        self.done = false;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step, RlError> {
        if self.done {
            return Err(RlError::StepAfterDone);
        }
        let (r, c) = self.agent;
        self.agent = match action {
            0 => (r.saturating_sub(1), c),
            1 => ((r + 1).min(self.height - 1), c),
            2 => (r, c.saturating_sub(1)),
            3 => (r, (c + 1).min(self.width - 1)),
            _ => return Err(RlError::InvalidAction { action, actions: Self::ACTIONS }),
        };
        self.steps += 1;
        let mut reward = 0.0;
        if self.agent == self.goal() {
            reward = 1.0;
            self.done = true;
        } else if self.hazards.contains(&self.agent) {
            reward = -1.0;
            self.done = true;
        } else if self.steps >= self.step_limit() {
            self.done = true;
        }
        Ok(Step { frame: self.render(), reward, done: self.done })
    }

    fn action_count(&self) -> usize {
        Self::ACTIONS
    }

    fn frame_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}
