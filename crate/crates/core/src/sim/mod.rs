//! Kinematic tabletop world: tasks, scene sampling, stepping and success checks.

mod scene;
mod task;

pub use scene::{
    check_success, in_workspace, sample_scene, Drawer, Scene, SceneObject, SimParams, SlotRef,
    EE_START, PEG_THREAD_TOL, WORKSPACE_MAX, WORKSPACE_MIN,
};
pub use task::{
    DrawerTemplate, ObjectKind, ObjectTemplate, SlotSource, SuccessParams, TaskId, TaskRegistry,
    TaskSpec, TemplateFrame,
};
