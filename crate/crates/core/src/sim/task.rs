//! Task definitions and the task registry file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "A_stack")]
    AStack,
    #[serde(rename = "B_peg")]
    BPeg,
    #[serde(rename = "D_drawer")]
    DDrawer,
    #[serde(rename = "E_bowl_in_drawer")]
    EBowlInDrawer,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::AStack,
        TaskId::BPeg,
        TaskId::DDrawer,
        TaskId::EBowlInDrawer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskId::AStack => "A_stack",
            TaskId::BPeg => "B_peg",
            TaskId::DDrawer => "D_drawer",
            TaskId::EBowlInDrawer => "E_bowl_in_drawer",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskId> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unknown task `{s}` (expected one of A_stack, B_peg, D_drawer, E_bowl_in_drawer)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Block,
    Nut,
    Peg,
    Bowl,
}

/// Frame an object template's nominal pose is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFrame {
    #[default]
    World,
    /// The (randomized) cabinet frame.
    Cabinet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectTemplate {
    pub name: String,
    pub kind: ObjectKind,
    /// Planar nominal position; z is derived from the half-extents (resting on the table).
    pub xy: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    pub half_extents: Vec3,
    /// Uniform half-widths of planar noise along x and y of `frame`.
    #[serde(default)]
    pub xy_noise: [f64; 2],
    /// Uniform half-width of yaw noise (radians).
    #[serde(default)]
    pub yaw_noise: f64,
    #[serde(default)]
    pub frame: TemplateFrame,
    pub graspable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawerTemplate {
    /// Cabinet origin on the table.
    pub xy: [f64; 2],
    pub yaw: f64,
    pub yaw_noise: f64,
    pub max_travel: f64,
    /// Handle position in the cabinet frame with the drawer closed.
    pub handle: Vec3,
    /// Interior center in the cabinet frame with the drawer closed.
    pub interior_center: Vec3,
    pub interior_half: Vec3,
}

/// What object slot `j` of the state vector observes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotSource {
    Object(String),
    DrawerHandle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessParams {
    /// Horizontal tolerance for stacking / peg alignment (m).
    pub xy_tol: f64,
    /// Vertical tolerance for stacking (m).
    pub z_tol: f64,
    /// Fraction of max travel that counts as "open".
    pub open_fraction: f64,
}

impl Default for SuccessParams {
    fn default() -> Self {
        SuccessParams {
            xy_tol: 0.02,
            z_tol: 0.01,
            open_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub horizon: usize,
    pub objects: Vec<ObjectTemplate>,
    #[serde(default)]
    pub drawer: Option<DrawerTemplate>,
    pub slots: Vec<SlotSource>,
    #[serde(default)]
    pub success: SuccessParams,
}

impl TaskSpec {
    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn validate(&self, j_max: usize) -> Result<()> {
        if self.slots.len() > j_max {
            return Err(Error::Config(format!(
                "task {} observes {} objects but J_max is {j_max}",
                self.id,
                self.slots.len()
            )));
        }
        for s in &self.slots {
            match s {
                SlotSource::Object(n) if self.object_index(n).is_none() => {
                    return Err(Error::Config(format!(
                        "task {}: unknown slot object {n}",
                        self.id
                    )))
                }
                SlotSource::DrawerHandle if self.drawer.is_none() => {
                    return Err(Error::Config(format!(
                        "task {}: drawer slot without drawer",
                        self.id
                    )))
                }
                _ => {}
            }
        }
        let required: &[&str] = match self.id {
            TaskId::AStack => &["picked", "base"],
            TaskId::BPeg => &["nut", "peg"],
            TaskId::DDrawer => &[],
            TaskId::EBowlInDrawer => &["bowl"],
        };
        for n in required {
            if self.object_index(n).is_none() {
                return Err(Error::Config(format!(
                    "task {} needs an object named {n}",
                    self.id
                )));
            }
        }
        if matches!(self.id, TaskId::DDrawer | TaskId::EBowlInDrawer) && self.drawer.is_none() {
            return Err(Error::Config(format!("task {} needs a drawer", self.id)));
        }
        for o in &self.objects {
            if o.half_extents.iter().any(|h| *h <= 0.0) {
                return Err(Error::Config(format!(
                    "object {}: non-positive extents",
                    o.name
                )));
            }
        }
        Ok(())
    }

    pub fn builtin(id: TaskId) -> TaskSpec {
        use std::f64::consts::{FRAC_PI_4, PI};
        let block = [0.025, 0.025, 0.025];
        match id {
            TaskId::AStack => TaskSpec {
                id,
                horizon: 300,
                objects: vec![
                    ObjectTemplate {
                        name: "picked".into(),
                        kind: ObjectKind::Block,
                        xy: [0.20, -0.15],
                        yaw: 0.0,
                        half_extents: block,
                        xy_noise: [0.05, 0.05],
                        yaw_noise: FRAC_PI_4,
                        frame: TemplateFrame::World,
                        graspable: true,
                    },
                    ObjectTemplate {
                        name: "base".into(),
                        kind: ObjectKind::Block,
                        xy: [0.20, 0.15],
                        yaw: 0.0,
                        half_extents: block,
                        xy_noise: [0.05, 0.05],
                        yaw_noise: 0.0,
                        frame: TemplateFrame::World,
                        graspable: false,
                    },
                ],
                drawer: None,
                slots: vec![
                    SlotSource::Object("picked".into()),
                    SlotSource::Object("base".into()),
                ],
                success: SuccessParams::default(),
            },
            TaskId::BPeg => TaskSpec {
                id,
                horizon: 300,
                objects: vec![
                    ObjectTemplate {
                        name: "nut".into(),
                        kind: ObjectKind::Nut,
                        xy: [0.22, -0.15],
                        yaw: 0.0,
                        half_extents: [0.04, 0.04, 0.01],
                        xy_noise: [0.075, 0.075],
                        yaw_noise: PI,
                        frame: TemplateFrame::World,
                        graspable: true,
                    },
                    ObjectTemplate {
                        name: "peg".into(),
                        kind: ObjectKind::Peg,
                        xy: [0.25, 0.18],
                        yaw: 0.0,
                        half_extents: [0.015, 0.015, 0.05],
                        xy_noise: [0.0, 0.0],
                        yaw_noise: 0.0,
                        frame: TemplateFrame::World,
                        graspable: false,
                    },
                ],
                drawer: None,
                slots: vec![
                    SlotSource::Object("nut".into()),
                    SlotSource::Object("peg".into()),
                ],
                success: SuccessParams::default(),
            },
            TaskId::DDrawer => TaskSpec {
                id,
                horizon: 250,
                objects: vec![],
                drawer: Some(DrawerTemplate::standard()),
                slots: vec![SlotSource::DrawerHandle],
                success: SuccessParams::default(),
            },
            TaskId::EBowlInDrawer => TaskSpec {
                id,
                horizon: 500,
                objects: vec![ObjectTemplate {
                    name: "bowl".into(),
                    kind: ObjectKind::Bowl,
                    xy: [-0.30, -0.25],
                    yaw: 0.0,
                    half_extents: [0.04, 0.04, 0.025],
                    xy_noise: [0.0, 0.10],
                    yaw_noise: 0.0,
                    frame: TemplateFrame::Cabinet,
                    graspable: true,
                }],
                drawer: Some(DrawerTemplate::standard()),
                slots: vec![SlotSource::DrawerHandle, SlotSource::Object("bowl".into())],
                success: SuccessParams::default(),
            },
        }
    }
}

impl DrawerTemplate {
    fn standard() -> DrawerTemplate {
        DrawerTemplate {
            xy: [0.45, 0.0],
            yaw: 0.0,
            yaw_noise: std::f64::consts::FRAC_PI_4,
            max_travel: 0.20,
            handle: [-0.17, 0.0, 0.15],
            interior_center: [0.0, 0.0, 0.10],
            interior_half: [0.12, 0.12, 0.04],
        }
    }
}

/// Tasks by id, loaded from JSON or built in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn builtin() -> TaskRegistry {
        TaskRegistry {
            tasks: TaskId::ALL.into_iter().map(TaskSpec::builtin).collect(),
        }
    }

    pub fn get(&self, id: TaskId) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("task {id} not in registry")))
    }

    /// Reads either a single task object or `{"tasks": [...]}`.
    pub fn load(path: &Path) -> Result<TaskRegistry> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let reg = if let Ok(reg) = serde_json::from_str::<TaskRegistry>(&text) {
            reg
        } else {
            let one: TaskSpec = serde_json::from_str(&text).map_err(|e| Error::file(path, e))?;
            TaskRegistry { tasks: vec![one] }
        };
        Ok(reg)
    }
}
