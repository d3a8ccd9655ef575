//! Reactive waypoint expert.
//!
//! The policy re-derives its phase from the scene at every step, so it can
//! take over from any state reached by the model (interventions) as well as
//! produce demonstrations from scratch.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add, norm, scale, sub, Pose, Quat, Vec3};
use crate::model::ActionVector;
use crate::sim::{check_success, in_workspace, ObjectKind, Scene, TaskId, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertParams {
    /// Cruise speed (m/s), below the controller limit.
    pub speed: f64,
    /// Turn rate (rad/s).
    pub turn_rate: f64,
    /// Waypoint arrival tolerance (m).
    pub tol: f64,
    /// Height of approach and carry waypoints above their targets (m).
    pub hover: f64,
    /// Waypoint jitter standard deviation (m).
    pub jitter_sigma: f64,
    /// Jitter is clipped to this many standard deviations per axis.
    pub jitter_clip: f64,
    /// Drawer pre-grasp standoff along the pull axis (m).
    pub standoff: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            speed: 0.25,
            turn_rate: 1.0,
            tol: 0.002,
            hover: 0.10,
            jitter_sigma: 0.005,
            jitter_clip: 2.0,
            standoff: 0.08,
        }
    }
}

/// Per-episode waypoint offsets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Jitter {
    grasp: [f64; 2],
    hover: Vec3,
    place: [f64; 2],
    carry: f64,
}

#[derive(Debug, Clone)]
pub struct Expert {
    task: TaskSpec,
    params: ExpertParams,
    jitter: Jitter,
    dt: f64,
}

/// Where the expert wants the end effector this step.
#[derive(Debug, Clone, Copy)]
struct Goal {
    p: Vec3,
    q: Quat,
    close: bool,
}

impl Expert {
    pub fn new(task: &TaskSpec, params: ExpertParams, dt: f64, rng: &mut impl Rng) -> Expert {
        let jitter = if params.jitter_sigma > 0.0 {
            let n = Normal::new(0.0, params.jitter_sigma).expect("positive sigma");
            let lim = params.jitter_clip * params.jitter_sigma;
            let mut d = || n.sample(rng).clamp(-lim, lim);
            Jitter {
                grasp: [d(), d()],
                hover: [d(), d(), d()],
                place: [d(), d()],
                carry: d(),
            }
        } else {
            Jitter::default()
        };
        Expert {
            task: task.clone(),
            params,
            jitter,
            dt,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    /// Next action for `scene`.
    pub fn act(&self, scene: &Scene) -> Result<ActionVector> {
        let g = self.goal(scene)?;
        if !in_workspace(g.p) {
            return Err(Error::Generation(format!(
                "{}: waypoint {:?} outside the workspace",
                self.task.id, g.p
            )));
        }
        let ee = scene.ee;
        let mut d = sub(g.p, ee.p);
        let step = self.params.speed * self.dt;
        let len = norm(d);
        if len > step {
            d = scale(d, step / len);
        }
        let turn = self.params.turn_rate * self.dt;
        let angle = ee.q.angle_to(&g.q);
        let q = if angle <= turn {
            g.q
        } else {
            ee.q.slerp(&g.q, turn / angle)
        };
        let next = Pose { p: add(ee.p, d), q };
        Ok(ActionVector {
            target: ee.inverse().compose(&next).canonical(),
            gripper: if g.close { 1.0 } else { 0.0 },
        })
    }

    /// Target end-effector position of the current phase (what the expert is
    /// heading to right now).
    pub fn waypoint(&self, scene: &Scene) -> Result<Pose> {
        let g = self.goal(scene)?;
        Ok(Pose { p: g.p, q: g.q })
    }

    fn goal(&self, scene: &Scene) -> Result<Goal> {
        let ee = scene.ee;
        if check_success(scene, &self.task) {
            return Ok(Goal {
                p: add(ee.p, [0.0, 0.0, self.params.hover]),
                q: ee.q,
                close: false,
            });
        }
        let missing =
            |what: &str| Error::Generation(format!("{}: scene has no {what}", self.task.id));
        match self.task.id {
            TaskId::AStack => {
                let i = index(scene, "picked").ok_or_else(|| missing("picked block"))?;
                let base = scene.object("base").ok_or_else(|| missing("base block"))?;
                let h = scene.objects[i].extents.half()[2];
                let place = add(base.pose.p, [0.0, 0.0, base.extents.half()[2] + h + 0.005]);
                Ok(self.pick_place(scene, i, place))
            }
            TaskId::BPeg => {
                let i = index(scene, "nut").ok_or_else(|| missing("nut"))?;
                let peg = scene.object("peg").ok_or_else(|| missing("peg"))?;
                let h = scene.objects[i].extents.half()[2];
                let place = add(peg.pose.p, [0.0, 0.0, peg.extents.half()[2] + h + 0.01]);
                Ok(self.pick_place(scene, i, place))
            }
            TaskId::DDrawer => self
                .open_drawer(scene, false)
                .ok_or_else(|| missing("drawer")),
            TaskId::EBowlInDrawer => {
                let d = scene.drawer.as_ref().ok_or_else(|| missing("drawer"))?;
                if d.max_reached < 0.95 * d.max_travel || d.is_grasped() {
                    return self
                        .open_drawer(scene, true)
                        .ok_or_else(|| missing("drawer"));
                }
                let i = index(scene, "bowl").ok_or_else(|| missing("bowl"))?;
                let h = scene.objects[i].extents.half()[2];
                let place = [
                    d.interior_pose().p[0],
                    d.interior_pose().p[1],
                    d.floor_z() + h + 0.005,
                ];
                Ok(self.pick_place(scene, i, place))
            }
        }
    }

    fn pick_place(&self, scene: &Scene, i: usize, place: Vec3) -> Goal {
        let ee = scene.ee;
        let tol = self.params.tol;
        let j = &self.jitter;
        let o = &scene.objects[i];
        let grasp = add(o.pose.p, [j.grasp[0], j.grasp[1], 0.0]);
        let carry_z = place[2] + self.params.hover + j.carry;

        if o.attached.is_some() {
            // Put the object center on `place`, keeping the current grip.
            let offset = sub(o.pose.p, ee.p);
            let target = sub(add(place, [j.place[0], j.place[1], 0.0]), offset);
            let above = [target[0], target[1], carry_z];
            let over = horizontal(ee.p, target) <= tol;
            let hold = |p: Vec3| Goal {
                p,
                q: ee.q,
                close: true,
            };
            return if over && ee.p[2] <= target[2] + tol {
                Goal {
                    p: ee.p,
                    q: ee.q,
                    close: false,
                }
            } else if over {
                hold(target)
            } else if ee.p[2] < carry_z - tol {
                hold([ee.p[0], ee.p[1], carry_z])
            } else {
                hold(above)
            };
        }

        let q = match o.kind {
            ObjectKind::Block => Quat::from_yaw(nearest_yaw(ee.q.yaw(), o.pose.q.yaw(), FRAC_PI_2)),
            _ => ee.q,
        };
        let aligned = ee.q.angle_to(&q) <= 1e-3;
        let hover = add(grasp, add([0.0, 0.0, self.params.hover], j.hover));
        let reach = horizontal(hover, grasp) + tol;
        if norm(sub(ee.p, grasp)) <= tol && aligned {
            Goal {
                p: ee.p,
                q,
                close: scene.gripper >= 0.5,
            }
        } else if aligned && horizontal(ee.p, grasp) <= reach && ee.p[2] <= hover[2] + tol {
            Goal {
                p: grasp,
                q,
                close: false,
            }
        } else {
            Goal {
                p: hover,
                q,
                close: false,
            }
        }
    }

    /// Drawer opening; with `release` the handle is let go once fully open.
    fn open_drawer(&self, scene: &Scene, release: bool) -> Option<Goal> {
        let ee = scene.ee;
        let d = scene.drawer.as_ref()?;
        let q = d.cabinet.q;
        if let Some(offset) = d.grasp_offset {
            if release && d.max_reached >= 0.95 * d.max_travel {
                return Some(Goal {
                    p: ee.p,
                    q: ee.q,
                    close: false,
                });
            }
            return Some(Goal {
                p: add(d.handle_at(d.max_travel), offset),
                q: ee.q,
                close: true,
            });
        }
        let tol = self.params.tol;
        let j = &self.jitter;
        let side = d.cabinet.q.rotate_unchecked([0.0, 1.0, 0.0]);
        let grasp = add(
            d.handle_pose().p,
            add(scale(side, j.grasp[0]), [0.0, 0.0, j.grasp[1]]),
        );
        let pre = add(add(grasp, scale(d.axis(), self.params.standoff)), j.hover);
        let aligned = ee.q.angle_to(&q) <= 1e-3;
        Some(if norm(sub(ee.p, grasp)) <= tol && aligned {
            Goal {
                p: ee.p,
                q,
                close: scene.gripper >= 0.5,
            }
        } else if aligned && segment_distance(ee.p, pre, grasp) <= tol {
            Goal {
                p: grasp,
                q,
                close: false,
            }
        } else {
            Goal {
                p: pre,
                q,
                close: false,
            }
        })
    }
}

fn index(scene: &Scene, id: &str) -> Option<usize> {
    scene.objects.iter().position(|o| o.id == id)
}

fn horizontal(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// The yaw congruent to `target` modulo `period` that is closest to `current`.
fn nearest_yaw(current: f64, target: f64, period: f64) -> f64 {
    target + ((current - target) / period).round() * period
}

fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let l2 = crate::geometry::dot(ab, ab);
    let t = if l2 > 0.0 {
        (crate::geometry::dot(sub(p, a), ab) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    norm(sub(p, add(a, scale(ab, t))))
}
