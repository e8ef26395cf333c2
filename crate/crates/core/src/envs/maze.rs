//! Continuous point-maze with axis-aligned walls and sparse `{-1, 0}` reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub const fn new(min: Point, max: Point) -> Self {
        Rect { min, max }
    }

    pub fn contains_interior(&self, p: Point) -> bool {
        (0..2).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn contains_closed(&self, p: Point) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// First parameter `t ∈ [0, 1]` at which the segment `p + t·d` enters the
    /// open interior, together with the face it crosses (`axis`, coordinate).
    /// Gliding along a face is not a contact.
    fn entry(&self, p: Point, d: Point) -> Option<(f64, Option<(usize, f64)>)> {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let mut face = None;
        for k in 0..2 {
            if d[k] == 0.0 {
                if p[k] < self.min[k] || p[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = ((self.min[k] - p[k]) / d[k], (self.max[k] - p[k]) / d[k]);
            let mut entry_face = self.min[k];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
                entry_face = self.max[k];
            }
            if ta > t0 {
                t0 = ta;
                face = Some((k, entry_face));
            }
            t1 = t1.min(tb);
        }
        if t0 > t1 {
            return None;
        }
        let tm = 0.5 * (t0 + t1);
        let mid = [p[0] + tm * d[0], p[1] + tm * d[1]];
        self.contains_interior(mid).then_some((t0, face))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub id: String,
    pub workspace: Rect,
    pub walls: Vec<Rect>,
    pub start: Point,
    pub goal: Point,
    pub goal_radius: f64,
    pub action_bound: f64,
    pub max_steps: usize,
    /// Waypoints followed by the scripted data-collection controller.
    pub waypoints: Vec<Point>,
    /// Center of the corridor turn, used by the region analysis.
    pub turn_corner: Point,
    /// Chebyshev radius around `turn_corner` that counts as the turn region.
    pub turn_radius: f64,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self::l_maze()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Point,
    pub reward: f64,
    pub done: bool,
    /// The action exceeded the bound and was clipped.
    pub clipped: bool,
    /// Motion stopped early at a wall or the workspace edge.
    pub contact: bool,
}

fn round_f32(p: Point) -> Point {
    [p[0] as f32 as f64, p[1] as f32 as f64]
}

impl MazeSpec {
    /// L-shaped corridor of width 2: east along the bottom, then north along
    /// the right edge.
    pub fn l_maze() -> Self {
        MazeSpec {
            id: "l-maze".into(),
            workspace: Rect::new([0.0, 0.0], [8.0, 8.0]),
            walls: vec![Rect::new([0.0, 2.0], [6.0, 8.0])],
            start: [0.5, 0.5],
            goal: [7.5, 7.5],
            goal_radius: 0.5,
            action_bound: 1.0,
            max_steps: 200,
            waypoints: vec![[7.0, 1.0], [7.5, 7.5]],
            turn_corner: [7.0, 1.0],
            turn_radius: 1.5,
        }
    }

    /// Open square with no walls; handy for tests.
    pub fn open(size: f64) -> Self {
        MazeSpec {
            id: "open".into(),
            workspace: Rect::new([0.0, 0.0], [size, size]),
            walls: vec![],
            start: [0.5, 0.5],
            goal: [size - 0.5, size - 0.5],
            goal_radius: 0.5,
            action_bound: 1.0,
            max_steps: 200,
            waypoints: vec![[size - 0.5, size - 0.5]],
            turn_corner: [size / 2.0, size / 2.0],
            turn_radius: 0.0,
        }
    }

    pub const OBS_DIM: usize = 2;
    pub const ACTION_DIM: usize = 2;

    pub fn validate(&self) -> Result<()> {
        let free = |p: Point| {
            self.workspace.contains_closed(p) && !self.walls.iter().any(|w| w.contains_interior(p))
        };
        if !free(self.start) || !free(self.goal) {
            return Err(Error::Config(format!(
                "maze {}: start and goal must be inside the workspace and outside walls",
                self.id
            )));
        }
        if !(self.goal_radius > 0.0) || !(self.action_bound > 0.0) || self.max_steps == 0 {
            return Err(Error::Config(format!(
                "maze {}: goal radius, action bound and max steps must be positive",
                self.id
            )));
        }
        if self.waypoints.is_empty() {
            return Err(Error::Config(format!("maze {}: no waypoints", self.id)));
        }
        Ok(())
    }

    pub fn in_wall(&self, p: Point) -> bool {
        self.walls.iter().any(|w| w.contains_interior(p))
    }

    pub fn is_free(&self, p: Point) -> bool {
        self.workspace.contains_closed(p) && !self.in_wall(p)
    }

    pub fn at_goal(&self, p: Point) -> bool {
        let (dx, dy) = (p[0] - self.goal[0], p[1] - self.goal[1]);
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }

    pub fn in_turn_region(&self, p: Point) -> bool {
        (p[0] - self.turn_corner[0])
            .abs()
            .max((p[1] - self.turn_corner[1]).abs())
            <= self.turn_radius
    }

    pub fn clip_action(&self, a: Point) -> (Point, bool) {
        let b = self.action_bound;
        let c = [a[0].clamp(-b, b), a[1].clamp(-b, b)];
        (c, c != a)
    }

    /// Deterministic transition: translate by the clipped action, stopping at
    /// the first wall or workspace contact. States are kept on the `f32` grid
    /// so that stored datasets replay exactly.
    pub fn step(&self, state: Point, action: Point) -> StepOutcome {
        let (d, clipped) = self.clip_action(action);
        let mut t_stop = 1.0;
        let mut snap: Option<(usize, f64)> = None;

        for k in 0..2 {
            if d[k] == 0.0 {
                continue;
            }
            let bound = if d[k] > 0.0 {
                self.workspace.max[k]
            } else {
                self.workspace.min[k]
            };
            let t = ((bound - state[k]) / d[k]).max(0.0);
            if t < t_stop {
                t_stop = t;
                snap = Some((k, bound));
            }
        }
        for wall in &self.walls {
            if let Some((t, face)) = wall.entry(state, d) {
                if t < t_stop {
                    t_stop = t;
                    snap = face;
                }
            }
        }

        let contact = t_stop < 1.0;
        let mut next = [state[0] + t_stop * d[0], state[1] + t_stop * d[1]];
        if let Some((k, v)) = snap.filter(|_| contact) {
            next[k] = v;
        }
        next = round_f32(next);
        for k in 0..2 {
            next[k] = next[k].clamp(self.workspace.min[k], self.workspace.max[k]);
        }
        if self.in_wall(next) {
            next = state;
        }

        let done = self.at_goal(next);
        StepOutcome {
            next,
            reward: if done { 0.0 } else { -1.0 },
            done,
            clipped,
            contact,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_maze_is_valid() {
        MazeSpec::l_maze().validate().unwrap();
    }

    #[test]
    fn at_goal_with_zero_action_terminates() {
        let m = MazeSpec::l_maze();
        let out = m.step(m.goal, [0.0, 0.0]);
        assert_eq!(out.reward, 0.0);
        assert!(out.done);
    }

    #[test]
    fn free_space_translation() {
        let m = MazeSpec::l_maze();
        let out = m.step([0.5, 0.5], [1.0, 0.0]);
        assert_eq!(out.next, [1.5, 0.5]);
        assert_eq!(out.reward, -1.0);
        assert!(!out.done && !out.contact);
    }

    #[test]
    fn stops_on_wall_face() {
        let m = MazeSpec::l_maze();
        // wall bottom face is y = 2 for x < 6
        let out = m.step([3.0, 1.6], [0.3, 1.0]);
        assert!(out.contact);
        assert_eq!(out.next[1], 2.0);
        // segment-face intersection: t = 0.4 -> x = 3.12
        assert!((out.next[0] - 3.12).abs() < 1e-6);
        assert_eq!(out.reward, -1.0);
        assert!(!m.in_wall(out.next));
    }

    #[test]
    fn pushing_into_wall_from_face_does_not_move() {
        let m = MazeSpec::l_maze();
        let out = m.step([3.0, 2.0], [0.0, 0.7]);
        assert_eq!(out.next, [3.0, 2.0]);
        assert!(out.contact);
    }

    #[test]
    fn gliding_along_face_is_free() {
        let m = MazeSpec::l_maze();
        let out = m.step([3.0, 2.0], [1.0, 0.0]);
        assert_eq!(out.next, [4.0, 2.0]);
        assert!(!out.contact);
    }

    #[test]
    fn side_face_and_workspace_edges() {
        let m = MazeSpec::l_maze();
        // wall right face x = 6 for y > 2; moving west from x = 6.5 at y = 4
        let out = m.step([6.5, 4.0], [-1.0, 0.0]);
        assert_eq!(out.next, [6.0, 4.0]);
        let out = m.step([7.8, 0.5], [1.0, -1.0]);
        assert!(out.contact);
        assert_eq!(out.next[0], 8.0);
        assert!((out.next[1] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn corner_clip_stops_at_first_contact() {
        let m = MazeSpec::l_maze();
        // diagonal that reaches y = 2 just left of the inner corner (6, 2)
        let out = m.step([5.2, 1.5], [1.0, 1.0]);
        assert!(out.contact);
        assert!((out.next[0] - 5.7).abs() < 1e-6 && out.next[1] == 2.0);
        assert!(!m.in_wall(out.next));
        // grazing the corner point itself is not a contact
        let out = m.step([5.5, 1.5], [1.0, 1.0]);
        assert!(!out.contact);
        assert_eq!(out.next, [6.5, 2.5]);
    }

    #[test]
    fn action_is_clipped() {
        let m = MazeSpec::l_maze();
        let out = m.step([0.5, 0.5], [3.0, 0.0]);
        assert!(out.clipped);
        assert_eq!(out.next, [1.5, 0.5]);
    }

    #[test]
    fn turn_region_is_chebyshev_ball() {
        let m = MazeSpec::l_maze();
        assert!(m.in_turn_region([7.0, 1.0]));
        assert!(m.in_turn_region([5.6, 2.4]));
        assert!(!m.in_turn_region([5.4, 1.0]));
        assert!(!m.in_turn_region([7.0, 2.6]));
    }
}
