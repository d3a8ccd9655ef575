use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::{ObjectKind, SlotSource, TaskId, TaskSpec, TemplateFrame};
use crate::error::{Error, Result};
use crate::geometry::{add, dot, norm, scale, sub, BoxExtents, Pose, Quat, Vec3};
use crate::model::{ActionVector, StateVector};

/// Controller and gripper limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub dt: f64,
    /// Max end-effector speed (m/s).
    pub v_max: f64,
    /// Max end-effector angular speed (rad/s).
    pub w_max: f64,
    /// Change of the opening fraction per step.
    pub gripper_rate: f64,
    /// Distance from a grasp point within which closing attaches (m).
    pub grasp_tol: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 1.0 / 15.0,
            v_max: 0.5,
            w_max: 2.0,
            gripper_rate: 0.25,
            grasp_tol: 0.03,
        }
    }
}

impl SimParams {
    pub fn max_step(&self) -> f64 {
        self.v_max * self.dt
    }

    pub fn max_turn(&self) -> f64 {
        self.w_max * self.dt
    }
}

pub const EE_START: Pose = Pose {
    p: [0.0, 0.0, 0.30],
    q: Quat::IDENTITY,
};

/// Reachable box for the end effector; expert waypoints outside it are rejected.
pub const WORKSPACE_MIN: Vec3 = [-0.6, -0.8, 0.0];
pub const WORKSPACE_MAX: Vec3 = [0.9, 0.8, 0.8];

pub fn in_workspace(p: Vec3) -> bool {
    (0..3).all(|i| p[i] >= WORKSPACE_MIN[i] && p[i] <= WORKSPACE_MAX[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: String,
    pub kind: ObjectKind,
    pub pose: Pose,
    pub extents: BoxExtents,
    pub graspable: bool,
    /// Object pose in the end-effector frame while held.
    pub attached: Option<Pose>,
    /// Resting inside the drawer (moves with it).
    pub in_drawer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawer {
    pub cabinet: Pose,
    pub travel: f64,
    pub max_travel: f64,
    pub handle_local: Vec3,
    pub interior_center: Vec3,
    pub interior_half: Vec3,
    /// End-effector offset from the handle while grasped.
    pub grasp_offset: Option<Vec3>,
    /// Largest travel seen so far in the episode.
    pub max_reached: f64,
}

impl Drawer {
    /// Unit pull direction in world coordinates (cabinet -x).
    pub fn axis(&self) -> Vec3 {
        self.cabinet.q.rotate_unchecked([-1.0, 0.0, 0.0])
    }

    fn local_at(&self, v: Vec3, travel: f64) -> Vec3 {
        self.cabinet.transform_point([v[0] - travel, v[1], v[2]])
    }

    pub fn handle_pose(&self) -> Pose {
        Pose {
            p: self.local_at(self.handle_local, self.travel),
            q: self.cabinet.q,
        }
    }

    pub fn handle_at(&self, travel: f64) -> Vec3 {
        self.local_at(self.handle_local, travel)
    }

    /// Interior volume as a pose (center, cabinet orientation) and half extents.
    pub fn interior_pose(&self) -> Pose {
        Pose {
            p: self.local_at(self.interior_center, self.travel),
            q: self.cabinet.q,
        }
    }

    /// Whether `p` lies inside the interior volume.
    pub fn contains(&self, p: Vec3) -> bool {
        let local = self.interior_pose().inverse().transform_point(p);
        (0..3).all(|i| local[i].abs() <= self.interior_half[i] + 1e-9)
    }

    pub fn floor_z(&self) -> f64 {
        self.interior_pose().p[2] - self.interior_half[2]
    }

    pub fn is_grasped(&self) -> bool {
        self.grasp_offset.is_some()
    }
}

/// Which scene entity a state slot observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRef {
    Object(usize),
    DrawerHandle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: TaskId,
    pub ee: Pose,
    /// Opening fraction, 1 = open.
    pub gripper: f64,
    pub objects: Vec<SceneObject>,
    pub drawer: Option<Drawer>,
    pub slots: Vec<SlotRef>,
    pub time: usize,
    pub dt: f64,
}

fn uniform(rng: &mut impl Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Draws an initial scene from the task's randomization ranges.
pub fn sample_scene(task: &TaskSpec, rng: &mut impl Rng, params: &SimParams) -> Result<Scene> {
    let drawer = task.drawer.as_ref().map(|d| {
        let yaw = d.yaw + uniform(rng, d.yaw_noise);
        Drawer {
            cabinet: Pose::from_xyz_yaw(d.xy[0], d.xy[1], 0.0, yaw),
            travel: 0.0,
            max_travel: d.max_travel,
            handle_local: d.handle,
            interior_center: d.interior_center,
            interior_half: d.interior_half,
            grasp_offset: None,
            max_reached: 0.0,
        }
    });
    let mut objects = Vec::with_capacity(task.objects.len());
    for t in &task.objects {
        let dx = uniform(rng, t.xy_noise[0]);
        let dy = uniform(rng, t.xy_noise[1]);
        let dyaw = uniform(rng, t.yaw_noise);
        let local = Pose::from_xyz_yaw(t.xy[0] + dx, t.xy[1] + dy, t.half_extents[2], t.yaw + dyaw);
        let pose = match t.frame {
            TemplateFrame::World => local,
            TemplateFrame::Cabinet => {
                let d = drawer.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "object {} is cabinet-relative but task has no drawer",
                        t.name
                    ))
                })?;
                d.cabinet.compose(&local)
            }
        };
        objects.push(SceneObject {
            id: t.name.clone(),
            kind: t.kind,
            pose: pose.canonical(),
            extents: BoxExtents::new(t.half_extents)?,
            graspable: t.graspable,
            attached: None,
            in_drawer: false,
        });
    }
    let slots = task
        .slots
        .iter()
        .map(|s| match s {
            SlotSource::Object(n) => task
                .object_index(n)
                .map(SlotRef::Object)
                .ok_or_else(|| Error::Config(format!("unknown slot object {n}"))),
            SlotSource::DrawerHandle => Ok(SlotRef::DrawerHandle),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        task: task.id,
        ee: EE_START,
        gripper: 1.0,
        objects,
        drawer,
        slots,
        time: 0,
        dt: params.dt,
    })
}

impl Scene {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn attached_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.attached.is_some())
    }

    pub fn holding_anything(&self) -> bool {
        self.attached_index().is_some() || self.drawer.as_ref().is_some_and(Drawer::is_grasped)
    }

    pub fn slot_pose(&self, slot: SlotRef) -> Option<Pose> {
        match slot {
            SlotRef::Object(i) => self.objects.get(i).map(|o| o.pose),
            SlotRef::DrawerHandle => self.drawer.as_ref().map(Drawer::handle_pose),
        }
    }

    /// State vector with `j_max` slots; slots beyond the task's are absent.
    pub fn observe(&self, j_max: usize) -> StateVector {
        let inv = self.ee.inverse();
        let objects = (0..j_max)
            .map(|j| {
                self.slots
                    .get(j)
                    .and_then(|s| self.slot_pose(*s))
                    .map(|p| inv.compose(&p).canonical())
            })
            .collect();
        StateVector {
            ee: self.ee.canonical(),
            gripper: self.gripper,
            objects,
        }
    }

    /// Advances one control period under `action`.
    pub fn step(&self, action: &ActionVector, params: &SimParams) -> Result<Scene> {
        let raw = action.to_vec();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::EpisodeFault(format!(
                "non-finite action {raw:?} at t={}",
                self.time
            )));
        }
        let target = self.ee.compose(&Pose::from_slice(&raw[..7]));
        let mut next = self.clone();
        next.time += 1;

        // Translation, first-order and speed limited.
        let mut d = sub(target.p, self.ee.p);
        let len = norm(d);
        if len > params.max_step() {
            d = scale(d, params.max_step() / len);
        }
        let drawer_held = next.drawer.as_ref().and_then(|dr| dr.grasp_offset);
        if let (Some(offset), Some(dr)) = (drawer_held, next.drawer.as_mut()) {
            let s = dot(d, dr.axis());
            let before = dr.travel;
            dr.travel = (dr.travel + s).clamp(0.0, dr.max_travel);
            dr.max_reached = dr.max_reached.max(dr.travel);
            next.ee.p = add(dr.handle_at(dr.travel), offset);
            let shift = scale(dr.axis(), dr.travel - before);
            for o in next.objects.iter_mut().filter(|o| o.in_drawer) {
                o.pose.p = add(o.pose.p, shift);
            }
        } else {
            next.ee.p = add(self.ee.p, d);
            let angle = self.ee.q.angle_to(&target.q);
            next.ee.q = if angle <= params.max_turn() {
                target.q
            } else {
                self.ee.q.slerp(&target.q, params.max_turn() / angle)
            };
        }

        if let Some(i) = next.attached_index() {
            let rel = next.objects[i].attached.expect("attached");
            next.objects[i].pose = next.ee.compose(&rel);
        }

        // Gripper.
        let close = action.closes();
        let was_open = self.gripper >= 0.5;
        next.gripper = if close {
            (self.gripper - params.gripper_rate).max(0.0)
        } else {
            (self.gripper + params.gripper_rate).min(1.0)
        };
        if close && was_open && !self.holding_anything() {
            next.try_attach(params.grasp_tol);
        } else if !close {
            next.release();
        }

        Ok(next)
    }

    fn try_attach(&mut self, tol: f64) {
        let ee = self.ee;
        let best = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.graspable)
            .map(|(i, o)| (Some(i), norm(sub(o.pose.p, ee.p))))
            .chain(
                self.drawer
                    .iter()
                    .map(|d| (None, norm(sub(d.handle_pose().p, ee.p)))),
            )
            .filter(|(_, dist)| *dist <= tol)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((Some(i), _)) => {
                let o = &mut self.objects[i];
                o.attached = Some(ee.inverse().compose(&o.pose));
                o.in_drawer = false;
            }
            Some((None, _)) => {
                let d = self.drawer.as_mut().expect("drawer");
                d.grasp_offset = Some(sub(ee.p, d.handle_pose().p));
            }
            None => {}
        }
    }

    fn release(&mut self) {
        if let Some(d) = self.drawer.as_mut() {
            d.grasp_offset = None;
        }
        let Some(i) = self.attached_index() else {
            return;
        };
        self.objects[i].attached = None;
        let (z, in_drawer) = self.support_below(i);
        let o = &mut self.objects[i];
        o.pose.p[2] = z + o.extents.half()[2];
        o.in_drawer = in_drawer;
        o.pose = o.pose.canonical();
    }

    /// Height of the highest surface under object `i`, and whether it is the drawer floor.
    fn support_below(&self, i: usize) -> (f64, bool) {
        let o = &self.objects[i];
        let h = o.extents.half();
        let bottom = o.pose.p[2] - h[2];
        let reach = 0.01;
        let mut best = (0.0, false);
        for (k, other) in self.objects.iter().enumerate() {
            if k == i || other.attached.is_some() {
                continue;
            }
            let oh = other.extents.half();
            let top = other.pose.p[2] + oh[2];
            if top > bottom + reach {
                continue;
            }
            let dist = horizontal(o.pose.p, other.pose.p);
            let supports = match (o.kind, other.kind) {
                // A nut centered on the peg slides down it.
                (ObjectKind::Nut, ObjectKind::Peg) => dist > PEG_THREAD_TOL && dist < h[0] + oh[0],
                _ => dist <= oh[0].max(oh[1]),
            };
            if supports && top > best.0 {
                best = (top, false);
            }
        }
        if let Some(d) = &self.drawer {
            let floor = d.floor_z();
            let inside = d.contains([o.pose.p[0], o.pose.p[1], floor + 1e-6]);
            if inside && floor <= bottom + reach && floor > best.0 {
                best = (floor, true);
            }
        }
        best
    }

    pub fn check_success(&self, task: &TaskSpec) -> bool {
        check_success(self, task)
    }
}

/// Horizontal distance from the peg axis that lets a released nut drop onto the table.
pub const PEG_THREAD_TOL: f64 = 0.02;

fn horizontal(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn check_success(scene: &Scene, task: &TaskSpec) -> bool {
    let sp = &task.success;
    let free = |id: &str| scene.object(id).filter(|o| o.attached.is_none());
    match task.id {
        TaskId::AStack => {
            let (Some(top), Some(base)) = (free("picked"), scene.object("base")) else {
                return false;
            };
            let rise = top.pose.p[2] - base.pose.p[2];
            let height = 2.0 * base.extents.half()[2];
            horizontal(top.pose.p, base.pose.p) <= sp.xy_tol && (rise - height).abs() <= sp.z_tol
        }
        TaskId::BPeg => {
            let (Some(nut), Some(peg)) = (free("nut"), scene.object("peg")) else {
                return false;
            };
            let peg_top = peg.pose.p[2] + peg.extents.half()[2];
            horizontal(nut.pose.p, peg.pose.p) <= sp.xy_tol && nut.pose.p[2] < peg_top
        }
        TaskId::DDrawer => scene
            .drawer
            .as_ref()
            .is_some_and(|d| d.travel >= sp.open_fraction * d.max_travel),
        TaskId::EBowlInDrawer => {
            let (Some(bowl), Some(d)) = (free("bowl"), scene.drawer.as_ref()) else {
                return false;
            };
            d.max_reached >= sp.open_fraction * d.max_travel && d.contains(bowl.pose.p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::corner_distance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(id: TaskId, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_scene(&TaskSpec::builtin(id), &mut rng, &SimParams::default()).unwrap()
    }

    fn toward(s: &Scene, goal: Vec3, close: bool) -> ActionVector {
        let local = s.ee.inverse().transform_point(goal);
        ActionVector {
            target: Pose::from_translation(local),
            gripper: if close { 1.0 } else { 0.0 },
        }
    }

    fn drive(mut s: Scene, goal: Vec3, close: bool, p: &SimParams) -> Scene {
        for _ in 0..200 {
            if norm(sub(s.ee.p, goal)) < 1e-12 && !(close && s.gripper > 0.0) {
                break;
            }
            s = s.step(&toward(&s, goal, close), p).unwrap();
        }
        s
    }

    #[test]
    fn scenes_are_reproducible() {
        for id in TaskId::ALL {
            assert_eq!(scene(id, 3), scene(id, 3));
            assert_ne!(scene(id, 3), scene(id, 4));
        }
    }

    #[test]
    fn local_target_moves_at_most_one_step() {
        let p = SimParams {
            v_max: 0.75,
            ..SimParams::default()
        };
        assert!((p.max_step() - 0.05).abs() < 1e-15);
        let mut s = scene(TaskId::AStack, 0);
        s.ee = Pose::IDENTITY;
        let a = ActionVector {
            target: Pose::from_translation([1.0, 0.0, 0.0]),
            gripper: 0.0,
        };
        let n = s.step(&a, &p).unwrap();
        assert!(norm(sub(n.ee.p, [0.05, 0.0, 0.0])) < 1e-15);

        let a = ActionVector {
            target: Pose::from_xyz_yaw(0.01, -0.02, 0.005, 0.03),
            gripper: 0.0,
        };
        let n = s.step(&a, &p).unwrap();
        assert_eq!(n.ee, s.ee.compose(&a.target));
    }

    #[test]
    fn nan_action_is_an_episode_fault() {
        let s = scene(TaskId::AStack, 0);
        let a = ActionVector {
            target: Pose::from_translation([f64::NAN, 0.0, 0.0]),
            gripper: 0.0,
        };
        assert!(matches!(
            s.step(&a, &SimParams::default()),
            Err(Error::EpisodeFault(_))
        ));
    }

    #[test]
    fn grasp_above_block_then_carry() {
        let p = SimParams::default();
        let s = scene(TaskId::AStack, 1);
        let block = s.object("picked").unwrap().pose;
        let above = add(block.p, [0.0, 0.0, 0.02]);
        let mut s = drive(s, above, false, &p);
        s = s.step(&toward(&s, above, true), &p).unwrap();
        assert_eq!(s.attached_index(), Some(0));
        let rel = s.ee.inverse().compose(&s.objects[0].pose);

        let before_ee = s.ee;
        let before_obj = s.objects[0].pose;
        let s2 = drive(s, [0.1, 0.1, 0.25], true, &p);
        let moved = sub(s2.ee.p, before_ee.p);
        assert!(norm(sub(sub(s2.objects[0].pose.p, before_obj.p), moved)) < 1e-12);
        let rel2 = s2.ee.inverse().compose(&s2.objects[0].pose);
        assert!(corner_distance(&rel, &rel2, &BoxExtents::default()) < 1e-12);

        // Opening drops the block onto the table.
        let s3 = s2.step(&toward(&s2, s2.ee.p, false), &p).unwrap();
        assert!(s3.attached_index().is_none());
        assert!((s3.objects[0].pose.p[2] - 0.025).abs() < 1e-12);
    }

    #[test]
    fn closing_far_from_objects_attaches_nothing() {
        let p = SimParams::default();
        let s = scene(TaskId::AStack, 2);
        let s = s.step(&toward(&s, s.ee.p, true), &p).unwrap();
        assert!(!s.holding_anything());
        assert!((s.gripper - 0.75).abs() < 1e-15);
    }

    #[test]
    fn hand_built_stack_succeeds() {
        let task = TaskSpec::builtin(TaskId::AStack);
        let mut s = scene(TaskId::AStack, 5);
        assert!(!check_success(&s, &task));
        let base = s.object("base").unwrap().pose.p;
        s.objects[0].pose.p = [base[0] + 0.01, base[1], base[2] + 0.05];
        assert!(check_success(&s, &task));
        s.objects[0].attached = Some(Pose::IDENTITY);
        assert!(!check_success(&s, &task));
    }

    #[test]
    fn release_over_base_rests_on_top() {
        let p = SimParams::default();
        let mut s = scene(TaskId::AStack, 6);
        let base = s.object("base").unwrap().pose.p;
        s.objects[0].attached = Some(Pose::IDENTITY);
        s.ee = Pose::from_translation([base[0], base[1] + 0.005, 0.085]);
        s.gripper = 0.0;
        let n = s.step(&toward(&s, s.ee.p, false), &p).unwrap();
        assert!((n.objects[0].pose.p[2] - 0.075).abs() < 1e-12);
        assert!(check_success(&n, &TaskSpec::builtin(TaskId::AStack)));
    }

    #[test]
    fn nut_over_peg_drops_to_table() {
        let p = SimParams::default();
        let task = TaskSpec::builtin(TaskId::BPeg);
        let mut s = scene(TaskId::BPeg, 0);
        let peg = s.object("peg").unwrap().pose.p;
        s.objects[0].attached = Some(Pose::IDENTITY);
        s.ee = Pose::from_translation([peg[0] + 0.01, peg[1], 0.12]);
        let n = s.step(&toward(&s, s.ee.p, false), &p).unwrap();
        assert!((n.objects[0].pose.p[2] - 0.01).abs() < 1e-12);
        assert!(check_success(&n, &task));

        // Off-axis but overlapping: it sits on the peg top.
        s.ee = Pose::from_translation([peg[0] + 0.035, peg[1], 0.12]);
        let n = s.step(&toward(&s, s.ee.p, false), &p).unwrap();
        assert!((n.objects[0].pose.p[2] - 0.11).abs() < 1e-12);
        assert!(!check_success(&n, &task));
    }

    #[test]
    fn drawer_follows_grasped_handle_along_axis() {
        let p = SimParams::default();
        let task = TaskSpec::builtin(TaskId::DDrawer);
        let s = scene(TaskId::DDrawer, 9);
        let handle = s.drawer.as_ref().unwrap().handle_pose().p;
        let mut s = drive(s, handle, false, &p);
        s = s.step(&toward(&s, handle, true), &p).unwrap();
        assert!(s.holding_anything());
        // Push sideways: only the axial component counts.
        let d = s.drawer.clone().unwrap();
        let side = d.cabinet.q.rotate_unchecked([0.0, 1.0, 0.0]);
        let pull = d.axis();
        let goal = add(s.ee.p, add(scale(pull, 0.01), scale(side, 0.02)));
        let n = s.step(&toward(&s, goal, true), &p).unwrap();
        let dn = n.drawer.as_ref().unwrap();
        assert!((dn.travel - 0.01).abs() < 1e-12);
        assert!(norm(sub(n.ee.p, dn.handle_pose().p)) < 1e-12);
        assert!(!check_success(&n, &task));

        let far = add(handle, scale(pull, 0.5));
        let n = drive(n, far, true, &p);
        let dn = n.drawer.as_ref().unwrap();
        assert_eq!(dn.travel, dn.max_travel);
        assert!(check_success(&n, &task));
    }

    #[test]
    fn bowl_in_open_drawer() {
        let p = SimParams::default();
        let task = TaskSpec::builtin(TaskId::EBowlInDrawer);
        let mut s = scene(TaskId::EBowlInDrawer, 2);
        let d = s.drawer.as_mut().unwrap();
        d.travel = d.max_travel;
        d.max_reached = d.max_travel;
        let inside = d.interior_pose().p;
        s.objects[0].attached = Some(Pose::IDENTITY);
        s.ee = Pose::from_translation([inside[0], inside[1], inside[2] + 0.02]);
        let n = s.step(&toward(&s, s.ee.p, false), &p).unwrap();
        assert!(n.objects[0].in_drawer);
        assert!(check_success(&n, &task));
        let floor = n.drawer.as_ref().unwrap().floor_z();
        assert!((n.objects[0].pose.p[2] - floor - 0.025).abs() < 1e-12);
    }

    #[test]
    fn observe_oracles() {
        let mut s = scene(TaskId::AStack, 11);
        s.ee = s.objects[0].pose;
        let obs = s.observe(2);
        let o0 = obs.objects[0].unwrap();
        assert!(norm(o0.p) < 1e-12 && o0.q.angle_to(&Quat::IDENTITY) < 1e-7);

        s.ee = Pose::IDENTITY;
        let obs = s.observe(3);
        assert_eq!(obs.objects[1].unwrap().p, s.objects[1].pose.p);
        assert!(obs.objects[2].is_none());

        let d = scene(TaskId::DDrawer, 0).observe(2);
        assert!(d.objects[0].is_some() && d.objects[1].is_none());
    }

    #[test]
    fn task_a_ranges() {
        let task = TaskSpec::builtin(TaskId::AStack);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let s = sample_scene(&task, &mut rng, &SimParams::default()).unwrap();
            let b = &s.objects[0].pose;
            assert!(b.q.yaw().abs() <= std::f64::consts::FRAC_PI_4 + 1e-12);
            assert!((b.p[0] - 0.20).abs() <= 0.05 && (b.p[1] + 0.15).abs() <= 0.05);
            let base = &s.objects[1].pose;
            assert!((base.p[0] - 0.20).abs() <= 0.05 && (base.p[1] - 0.15).abs() <= 0.05);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn step_respects_speed_limits(seed in 0u64..1000, ax in -1.0f64..1.0, ay in -1.0f64..1.0,
                                      az in -1.0f64..1.0, yaw in -3.0f64..3.0, g in 0.0f64..1.0) {
            let p = SimParams::default();
            let s = scene(TaskId::AStack, seed);
            let a = ActionVector { target: Pose::from_xyz_yaw(ax, ay, az, yaw), gripper: g };
            let n = s.step(&a, &p).unwrap();
            prop_assert!(norm(sub(n.ee.p, s.ee.p)) <= p.max_step() + 1e-12);
            prop_assert!(n.ee.q.angle_to(&s.ee.q) <= p.max_turn() + 1e-7);
            prop_assert_eq!(&n, &s.step(&a, &p).unwrap());
        }

        #[test]
        fn observation_recomposes_to_globals(seed in 0u64..1000, x in -0.3f64..0.3, yaw in -3.0f64..3.0) {
            let mut s = scene(TaskId::EBowlInDrawer, seed);
            s.ee = Pose::from_xyz_yaw(x, 0.1, 0.2, yaw);
            let obs = s.observe(2);
            let handle = s.drawer.as_ref().unwrap().handle_pose();
            let back = s.ee.compose(&obs.objects[0].unwrap());
            prop_assert!(corner_distance(&back, &handle, &BoxExtents::default()) < 1e-12);
            let back = s.ee.compose(&obs.objects[1].unwrap());
            prop_assert!(corner_distance(&back, &s.objects[0].pose, &BoxExtents::default()) < 1e-12);
        }
    }
}
