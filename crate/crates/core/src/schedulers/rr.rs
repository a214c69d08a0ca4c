//! Round-robin with a global quantum. Ready VMs sit in a ring; the
//! running VM is not in it. Each dispatch arms a quantum timer.

use std::collections::VecDeque;

use crate::framework::{SchedCtx, SchedulerTable, TimerAction, TimerEventHandle};
use crate::model::{RunState, SchedState, SchedulerSpec, VmId};
use crate::time::Time;

use super::SchedulerPlugin;

pub const DEFAULT_QUANTUM: Time = Time::from_ms(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RrState {
    pub quantum: Time,
}

#[derive(Debug)]
pub struct Rr {
    quantum: Time,
    ring: VecDeque<VmId>,
    timer: Option<TimerEventHandle>,
}

impl Rr {
    pub fn new(quantum: Time) -> Result<Self, String> {
        if quantum.is_zero() {
            return Err("rr: quantum must be positive".into());
        }
        Ok(Rr { quantum, ring: VecDeque::new(), timer: None })
    }

    pub fn ring(&self) -> impl Iterator<Item = VmId> + '_ {
        self.ring.iter().copied()
    }
}

impl SchedulerTable for Rr {
    fn name(&self) -> &str {
        "rr"
    }

    fn init(&mut self, _ctx: &mut SchedCtx<'_>) {
        self.ring.clear();
        self.timer = None;
    }

    fn schedule(&mut self, ctx: &mut SchedCtx<'_>) -> Option<VmId> {
        let running = ctx.current().filter(|vm| ctx.run_state(*vm) == RunState::Running);
        let chosen = self.ring.pop_front().or(running);
        if let Some(h) = self.timer.take() {
            ctx.cancel_timer(h);
        }
        if chosen.is_some() {
            let at = ctx.now() + self.quantum;
            self.timer = ctx.register_timer(at, TimerAction::SetRescheduleFlag).ok();
        }
        chosen
    }

    fn yield_current(&mut self, ctx: &mut SchedCtx<'_>) {
        ctx.set_reschedule_flag();
    }

    fn block(&mut self, _ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        self.ring.push_back(vcpu);
    }

    fn unblock(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        self.ring.push_back(vcpu);
        let cpu_busy = ctx.current().is_some_and(|vm| ctx.run_state(vm) == RunState::Running);
        if !cpu_busy {
            ctx.set_reschedule_flag();
        }
    }

    fn allocate(&mut self, _ctx: &mut SchedCtx<'_>, _vcpu: VmId) -> Result<SchedState, String> {
        Ok(Box::new(RrState { quantum: self.quantum }))
    }

    fn enque(&mut self, _ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        self.ring.push_back(vcpu);
    }
}

pub(super) struct RrPlugin;

impl SchedulerPlugin for RrPlugin {
    fn validate(&self, spec: &SchedulerSpec, _vms: &[VmId]) -> Result<(), String> {
        if !spec.sched_param.is_empty() {
            return Err("rr: takes no per-VM sched_param".into());
        }
        Rr::new(spec.quantum_ns.unwrap_or(DEFAULT_QUANTUM)).map(|_| ())
    }

    fn build(&self, spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String> {
        Ok(Box::new(Rr::new(spec.quantum_ns.unwrap_or(DEFAULT_QUANTUM))?))
    }
}
