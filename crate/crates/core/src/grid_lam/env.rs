//! The 4×4 grid world: one controllable pixel walking a fixed snaking cycle
//! over rows 0–2, and a bottom row of Bernoulli(0.5)·σ pixels redrawn every
//! frame.

use serde::{Deserialize, Serialize};

use super::GridError;
use crate::container::{Container, Tensor};
use crate::numerics::RngStream;

pub const SIDE: usize = 4;
pub const PIXELS: usize = SIDE * SIDE;
/// Rows the agent can occupy.
pub const CONTROL_ROWS: usize = 3;
/// Flat pixel indices of the exogenous row.
pub const EXO_REGION: [usize; SIDE] = [12, 13, 14, 15];

pub const STREAM_FRAMES: u64 = 0x21_0001;
pub const STREAM_PAIRED: u64 = 0x21_0002;
pub const STREAM_START: u64 = 0x21_0003;

pub type Frame = [f32; PIXELS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEnvConfig {
    pub sigma: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    12_000
}

impl Default for GridEnvConfig {
    fn default() -> Self {
        Self { sigma: 1.0, n_steps: default_steps(), seed: 0 }
    }
}

impl GridEnvConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(GridError::Config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.n_steps == 0 {
            return Err(GridError::Config("n_steps must be positive".into()));
        }
        Ok(())
    }
}

/// The fixed Hamiltonian cycle over the 12 controllable cells.
pub fn snaking_policy(cell: (usize, usize)) -> Result<Action, GridError> {
    use Action::*;
    let a = match cell {
        (0, 0) | (0, 1) | (0, 2) => Right,
        (0, 3) | (1, 3) => Down,
        (2, 3) | (1, 2) | (2, 1) => Left,
        (2, 2) | (2, 0) | (1, 0) => Up,
        (1, 1) => Down,
        _ => return Err(GridError::NotControllable(cell)),
    };
    Ok(a)
}

pub fn step_cell(cell: (usize, usize), a: Action) -> (usize, usize) {
    let (dr, dc) = a.delta();
    ((cell.0 as isize + dr) as usize, (cell.1 as isize + dc) as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTransition {
    pub obs: Frame,
    pub obs_next: Frame,
    pub obs_tilde: Frame,
    pub obs_tilde_next: Frame,
    pub action: Action,
    pub agent_cell: (usize, usize),
    pub agent_cell_next: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub config: GridEnvConfig,
    pub transitions: Vec<GridTransition>,
}

fn render(cell: (usize, usize), sigma: f32, rng: &mut RngStream) -> Frame {
    let mut f = [0.0; PIXELS];
    f[cell.0 * SIDE + cell.1] = 1.0;
    for i in EXO_REGION {
        if rng.bernoulli(0.5) {
            f[i] = sigma;
        }
    }
    f
}

/// `n_steps` consecutive transitions along one endless cycle, starting at a
/// seeded cell. The main and paired streams draw their exogenous rows from
/// separate generators, so `obs_next` of step t is `obs` of step t+1 in each.
pub fn generate_grid(cfg: &GridEnvConfig) -> Result<GridDataset, GridError> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, 0);
    let mut frames = root.derive(STREAM_FRAMES);
    let mut paired = root.derive(STREAM_PAIRED);
    let start = root.derive(STREAM_START).below(CONTROL_ROWS * SIDE);
    let sigma = cfg.sigma as f32;

    let mut cell = (start / SIDE, start % SIDE);
    let mut obs = render(cell, sigma, &mut frames);
    let mut obs_tilde = render(cell, sigma, &mut paired);
    let mut transitions = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        let action = snaking_policy(cell)?;
        let next = step_cell(cell, action);
        let obs_next = render(next, sigma, &mut frames);
        let obs_tilde_next = render(next, sigma, &mut paired);
        transitions.push(GridTransition {
            obs,
            obs_next,
            obs_tilde,
            obs_tilde_next,
            action,
            agent_cell: cell,
            agent_cell_next: next,
        });
        cell = next;
        obs = obs_next;
        obs_tilde = obs_tilde_next;
    }
    Ok(GridDataset { config: cfg.clone(), transitions })
}

impl GridDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn to_container(&self) -> Container {
        let n = self.len();
        let mut c = Container::new(serde_json::json!({ "kind": "grid_dataset", "env": self.config }));
        let frames = |f: fn(&GridTransition) -> &Frame| -> Vec<f64> {
            self.transitions.iter().flat_map(|t| f(t).iter().map(|v| *v as f64)).collect()
        };
        c.push(Tensor::f64("obs", &[n, SIDE, SIDE], frames(|t| &t.obs)));
        c.push(Tensor::f64("obs_next", &[n, SIDE, SIDE], frames(|t| &t.obs_next)));
        c.push(Tensor::f64("obs_tilde", &[n, SIDE, SIDE], frames(|t| &t.obs_tilde)));
        c.push(Tensor::f64("obs_tilde_next", &[n, SIDE, SIDE], frames(|t| &t.obs_tilde_next)));
        c.push(Tensor::u32("action", &[n], self.transitions.iter().map(|t| t.action.index() as u32).collect()));
        let cells = self
            .transitions
            .iter()
            .flat_map(|t| [t.agent_cell.0, t.agent_cell.1, t.agent_cell_next.0, t.agent_cell_next.1].map(|v| v as u32))
            .collect();
        c.push(Tensor::u32("agent_cells", &[n, 4], cells));
        c
    }

    /// Frames of the first `limit` transitions as CSV, one line per pixel row.
    pub fn frames_csv(&self, limit: usize) -> String {
        let mut out = String::from("# step,frame,row,c0,c1,c2,c3\n");
        for (i, t) in self.transitions.iter().take(limit).enumerate() {
            for (name, f) in [("obs", &t.obs), ("obs_next", &t.obs_next), ("obs_tilde", &t.obs_tilde), ("obs_tilde_next", &t.obs_tilde_next)] {
                for r in 0..SIDE {
                    let row: Vec<String> = f[r * SIDE..(r + 1) * SIDE].iter().map(|v| format!("{v}")).collect();
                    out.push_str(&format!("{i},{name},{r},{}\n", row.join(",")));
                }
            }
        }
        out
    }
}
