//! Pluggable VM scheduling framework.
//!
//! A scheduler is a [`SchedulerTable`]: seven callbacks the hypervisor
//! invokes on scheduling events. The framework owns every vCPU record and
//! decides *when* callbacks fire; the table decides *what* runs.
//!
//! Rescheduling happens only at two checkpoints, the end of a Hyp call
//! and the end of physical interrupt handling, and only when the
//! reschedule flag is set. Tables set the flag through
//! [`SchedCtx::set_reschedule_flag`], directly or from a timer.
//!
//! Callbacks observe the vCPU state *before* the transition they announce:
//! `yield_current` and `block` see a Running vCPU, `unblock` sees a
//! Sleeping or Blocked one.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{RunState, SchedParam, SchedState, VcpuRecord, VmId};
use crate::time::Time;

/// The scheduling function table.
pub trait SchedulerTable: Send {
    fn name(&self) -> &str;

    /// Called once at boot, before any other callback.
    fn init(&mut self, ctx: &mut SchedCtx<'_>);

    /// Picks the vCPU to run next, or `None` to idle. Must not change
    /// any vCPU's run state; `ctx` offers no way to.
    fn schedule(&mut self, ctx: &mut SchedCtx<'_>) -> Option<VmId>;

    /// The current vCPU stops being executable (wfi, or its guest halted).
    fn yield_current(&mut self, ctx: &mut SchedCtx<'_>);

    /// The running vCPU is being preempted by another.
    fn block(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId);

    /// A sleeping vCPU became executable.
    fn unblock(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId);

    /// Builds the vCPU's dynamic scheduling state from its parameter.
    fn allocate(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) -> Result<SchedState, String>;

    /// Pushes a vCPU to the scheduler's wait structure.
    fn enque(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId);
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameworkError {
    #[error("framework already initialized")]
    AlreadyInitialized,
    #[error("framework used before initialization")]
    NotInitialized,
    #[error("allocate failed for {vm}: {reason}")]
    Allocate { vm: VmId, reason: String },
    #[error("schedule returned {vm} which is {}", state.name())]
    ScheduledUnrunnable { vm: VmId, state: RunState },
    #[error("schedule returned unknown {0}")]
    UnknownVm(VmId),
    #[error("schedule changed vCPU run states")]
    ScheduleMutatedState,
    #[error("{op} on {vm} which is not the running vCPU")]
    NotRunning { vm: VmId, op: &'static str },
    #[error("wakeup of {vm} which is {}", state.name())]
    WakeupOfRunnable { vm: VmId, state: RunState },
    #[error("timer requested at {at} but now is {now}")]
    TimerInPast { at: Time, now: Time },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointKind {
    EndOfHypCall,
    EndOfPhysicalInterrupt,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::EndOfHypCall => "end_of_hyp_call",
            CheckpointKind::EndOfPhysicalInterrupt => "end_of_physical_interrupt",
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RescheduleFlag {
    requested: bool,
}

impl RescheduleFlag {
    pub fn set(&mut self) {
        self.requested = true;
    }

    pub fn is_set(&self) -> bool {
        self.requested
    }

    fn take(&mut self) -> bool {
        std::mem::take(&mut self.requested)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(pub u64);

/// What a timer does when it fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerAction {
    SetRescheduleFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimerEventHandle {
    pub id: TimerId,
    pub fire_at: Time,
}

#[derive(Debug, Default)]
struct TimerBook {
    next_id: u64,
    live: BTreeMap<TimerId, (Time, TimerAction)>,
    armed: Vec<TimerEventHandle>,
}

impl TimerBook {
    fn register(&mut self, at: Time, action: TimerAction) -> TimerEventHandle {
        let id = TimerId(self.next_id);
        self.next_id += 1;
        self.live.insert(id, (at, action));
        let handle = TimerEventHandle { id, fire_at: at };
        self.armed.push(handle);
        handle
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FwEventKind {
    Init,
    Allocate(VmId),
    Enque(VmId),
    Schedule { returned: Option<VmId> },
    Yield(VmId),
    Block(VmId),
    Unblock(VmId),
    FlagSet,
    TimerSet { id: TimerId, fire_at: Time },
    TimerCancel { id: TimerId },
    TimerFire { id: TimerId },
    DeadlineMiss(VmId),
    Checkpoint { kind: CheckpointKind, flag: bool },
    Dispatch { from: Option<VmId>, to: Option<VmId> },
    State { vm: VmId, state: RunState },
}

/// One framework-level occurrence, for tracing and contract checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FwEvent {
    pub at: Time,
    pub kind: FwEventKind,
}

/// The result of a dispatch checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    /// Flag was not set; nothing happened.
    NoAction,
    /// Flag was set and the current choice stands.
    Kept(Option<VmId>),
    /// The running vCPU changed.
    Switched { from: Option<VmId>, to: Option<VmId> },
}

impl Dispatch {
    /// A world switch is paid whenever a vCPU is switched in.
    pub fn switched_in(&self) -> Option<VmId> {
        match *self {
            Dispatch::Switched { to, .. } => to,
            _ => None,
        }
    }
}

/// The view of hypervisor state a scheduler callback receives.
pub struct SchedCtx<'a> {
    now: Time,
    current: Option<VmId>,
    vcpus: &'a mut [VcpuRecord],
    flag: &'a mut RescheduleFlag,
    timers: &'a mut TimerBook,
    events: &'a mut Vec<FwEvent>,
}

impl SchedCtx<'_> {
    pub fn now(&self) -> Time {
        self.now
    }

    /// The vCPU most recently dispatched, whatever its state now.
    pub fn current(&self) -> Option<VmId> {
        self.current
    }

    pub fn vm_count(&self) -> usize {
        self.vcpus.len()
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = VmId> + '_ {
        self.vcpus.iter().map(|v| v.id)
    }

    pub fn run_state(&self, vm: VmId) -> RunState {
        self.vcpus[vm.index()].run_state
    }

    /// Guest time consumed since `vm` last became Running.
    pub fn consumed(&self, vm: VmId) -> Time {
        self.vcpus[vm.index()].consumed
    }

    pub fn param(&self, vm: VmId) -> &SchedParam {
        &self.vcpus[vm.index()].sched_param
    }

    pub fn state<T: 'static>(&self, vm: VmId) -> Option<&T> {
        self.vcpus[vm.index()].sched_state.as_ref()?.downcast_ref()
    }

    pub fn state_mut<T: 'static>(&mut self, vm: VmId) -> Option<&mut T> {
        self.vcpus[vm.index()].sched_state.as_mut()?.downcast_mut()
    }

    pub fn set_reschedule_flag(&mut self) {
        self.flag.set();
        self.events.push(FwEvent { at: self.now, kind: FwEventKind::FlagSet });
    }

    pub fn register_timer(
        &mut self,
        at: Time,
        action: TimerAction,
    ) -> Result<TimerEventHandle, FrameworkError> {
        if at < self.now {
            return Err(FrameworkError::TimerInPast { at, now: self.now });
        }
        let h = self.timers.register(at, action);
        self.events.push(FwEvent { at: self.now, kind: FwEventKind::TimerSet { id: h.id, fire_at: at } });
        Ok(h)
    }

    /// Returns false if the timer already fired or was cancelled.
    pub fn cancel_timer(&mut self, handle: TimerEventHandle) -> bool {
        let removed = self.timers.live.remove(&handle.id).is_some();
        if removed {
            self.events.push(FwEvent { at: self.now, kind: FwEventKind::TimerCancel { id: handle.id } });
        }
        removed
    }

    pub fn record_deadline_miss(&mut self, vm: VmId) {
        self.events.push(FwEvent { at: self.now, kind: FwEventKind::DeadlineMiss(vm) });
    }
}

/// Owns the vCPU records and drives a [`SchedulerTable`].
pub struct Framework {
    table: Box<dyn SchedulerTable>,
    vcpus: Vec<VcpuRecord>,
    flag: RescheduleFlag,
    timers: TimerBook,
    current: Option<VmId>,
    initialized: bool,
    events: Vec<FwEvent>,
}

impl Framework {
    pub fn new(table: Box<dyn SchedulerTable>) -> Self {
        Framework {
            table,
            vcpus: Vec::new(),
            flag: RescheduleFlag::default(),
            timers: TimerBook::default(),
            current: None,
            initialized: false,
            events: Vec::new(),
        }
    }

    pub fn scheduler_name(&self) -> &str {
        self.table.name()
    }

    fn ctx(&mut self, now: Time) -> (&mut dyn SchedulerTable, SchedCtx<'_>) {
        let ctx = SchedCtx {
            now,
            current: self.current,
            vcpus: &mut self.vcpus,
            flag: &mut self.flag,
            timers: &mut self.timers,
            events: &mut self.events,
        };
        (self.table.as_mut(), ctx)
    }

    fn log(&mut self, at: Time, kind: FwEventKind) {
        self.events.push(FwEvent { at, kind });
    }

    fn set_state(&mut self, vm: VmId, state: RunState, at: Time) {
        let rec = &mut self.vcpus[vm.index()];
        if rec.run_state != state {
            rec.run_state = state;
            if state == RunState::Running {
                rec.consumed = Time::ZERO;
            }
            self.log(at, FwEventKind::State { vm, state });
        }
    }

    fn ensure_init(&self) -> Result<(), FrameworkError> {
        if self.initialized {
            Ok(())
        } else {
            Err(FrameworkError::NotInitialized)
        }
    }

    /// Boot-time initialization: `init` once, then `allocate` and `enque`
    /// for every vCPU in id order.
    pub fn init(&mut self, vcpus: Vec<VcpuRecord>, now: Time) -> Result<(), FrameworkError> {
        if self.initialized {
            return Err(FrameworkError::AlreadyInitialized);
        }
        self.initialized = true;
        self.vcpus = vcpus;
        for (i, v) in self.vcpus.iter_mut().enumerate() {
            debug_assert_eq!(v.id.index(), i, "vCPU records must be dense and ordered");
            v.run_state = RunState::Ready;
        }
        self.log(now, FwEventKind::Init);
        {
            let (table, mut ctx) = self.ctx(now);
            table.init(&mut ctx);
        }
        for i in 0..self.vcpus.len() {
            let vm = self.vcpus[i].id;
            self.log(now, FwEventKind::Allocate(vm));
            let state = {
                let (table, mut ctx) = self.ctx(now);
                table.allocate(&mut ctx, vm)
            }
            .map_err(|reason| FrameworkError::Allocate { vm, reason })?;
            self.vcpus[i].sched_state = Some(state);
            self.log(now, FwEventKind::State { vm, state: RunState::Ready });
        }
        for i in 0..self.vcpus.len() {
            let vm = self.vcpus[i].id;
            self.log(now, FwEventKind::Enque(vm));
            let (table, mut ctx) = self.ctx(now);
            table.enque(&mut ctx, vm);
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn current(&self) -> Option<VmId> {
        self.current
    }

    /// The vCPU currently executing guest code, if any.
    pub fn running(&self) -> Option<VmId> {
        self.current.filter(|vm| self.vcpus[vm.index()].run_state == RunState::Running)
    }

    pub fn run_state(&self, vm: VmId) -> RunState {
        self.vcpus[vm.index()].run_state
    }

    pub fn vcpus(&self) -> &[VcpuRecord] {
        &self.vcpus
    }

    pub fn flag(&self) -> RescheduleFlag {
        self.flag
    }

    /// Credits guest execution time to the running vCPU.
    pub fn add_consumed(&mut self, vm: VmId, dur: Time) {
        self.vcpus[vm.index()].consumed += dur;
    }

    pub fn set_reschedule_flag(&mut self, now: Time) -> Result<(), FrameworkError> {
        self.ensure_init()?;
        self.flag.set();
        self.log(now, FwEventKind::FlagSet);
        Ok(())
    }

    /// Runs one dispatch checkpoint.
    pub fn checkpoint(&mut self, kind: CheckpointKind, now: Time) -> Result<Dispatch, FrameworkError> {
        self.ensure_init()?;
        let flag = self.flag.take();
        self.log(now, FwEventKind::Checkpoint { kind, flag });
        if !flag {
            return Ok(Dispatch::NoAction);
        }

        let before: Vec<RunState> = self.vcpus.iter().map(|v| v.run_state).collect();
        let chosen = {
            let (table, mut ctx) = self.ctx(now);
            table.schedule(&mut ctx)
        };
        if self.vcpus.iter().map(|v| v.run_state).ne(before.iter().copied()) {
            return Err(FrameworkError::ScheduleMutatedState);
        }
        self.log(now, FwEventKind::Schedule { returned: chosen });

        if let Some(vm) = chosen {
            let state = self.vcpus.get(vm.index()).ok_or(FrameworkError::UnknownVm(vm))?.run_state;
            if matches!(state, RunState::Sleeping | RunState::Blocked) {
                return Err(FrameworkError::ScheduledUnrunnable { vm, state });
            }
        }

        let from = self.current;
        if chosen == from {
            if let Some(vm) = chosen {
                // a vCPU woken while still current resumes without a switch
                self.set_state(vm, RunState::Running, now);
            }
            return Ok(Dispatch::Kept(chosen));
        }

        if let Some(old) = from {
            if self.vcpus[old.index()].run_state == RunState::Running {
                self.log(now, FwEventKind::Block(old));
                {
                    let (table, mut ctx) = self.ctx(now);
                    table.block(&mut ctx, old);
                }
                self.set_state(old, RunState::Ready, now);
            }
        }
        if let Some(new) = chosen {
            self.set_state(new, RunState::Running, now);
        }
        self.current = chosen;
        self.log(now, FwEventKind::Dispatch { from, to: chosen });
        Ok(Dispatch::Switched { from, to: chosen })
    }

    fn leave_running(&mut self, vm: VmId, now: Time, next: RunState, op: &'static str) -> Result<(), FrameworkError> {
        self.ensure_init()?;
        if self.current != Some(vm) || self.vcpus[vm.index()].run_state != RunState::Running {
            return Err(FrameworkError::NotRunning { vm, op });
        }
        self.log(now, FwEventKind::Yield(vm));
        {
            let (table, mut ctx) = self.ctx(now);
            table.yield_current(&mut ctx);
        }
        self.set_state(vm, next, now);
        Ok(())
    }

    /// The running vCPU executed wfi.
    pub fn on_vm_sleep(&mut self, vm: VmId, now: Time) -> Result<(), FrameworkError> {
        self.leave_running(vm, now, RunState::Sleeping, "sleep")
    }

    /// The running vCPU's guest has nothing left to execute. It leaves
    /// through the same `yield` callback but never wakes.
    pub fn on_vm_halt(&mut self, vm: VmId, now: Time) -> Result<(), FrameworkError> {
        self.leave_running(vm, now, RunState::Blocked, "halt")
    }

    pub fn on_vm_wakeup(&mut self, vm: VmId, now: Time) -> Result<(), FrameworkError> {
        self.ensure_init()?;
        let state = self.vcpus.get(vm.index()).ok_or(FrameworkError::UnknownVm(vm))?.run_state;
        if !matches!(state, RunState::Sleeping | RunState::Blocked) {
            return Err(FrameworkError::WakeupOfRunnable { vm, state });
        }
        self.log(now, FwEventKind::Unblock(vm));
        {
            let (table, mut ctx) = self.ctx(now);
            table.unblock(&mut ctx, vm);
        }
        self.set_state(vm, RunState::Ready, now);
        Ok(())
    }

    pub fn register_timer(
        &mut self,
        at: Time,
        action: TimerAction,
        now: Time,
    ) -> Result<TimerEventHandle, FrameworkError> {
        self.ensure_init()?;
        let (_, mut ctx) = self.ctx(now);
        ctx.register_timer(at, action)
    }

    pub fn cancel_timer(&mut self, handle: TimerEventHandle, now: Time) -> bool {
        let (_, mut ctx) = self.ctx(now);
        ctx.cancel_timer(handle)
    }

    pub fn timer_is_live(&self, id: TimerId) -> bool {
        self.timers.live.contains_key(&id)
    }

    /// Live timers due at or before `t`, in firing order.
    pub fn due_timers(&self, t: Time) -> Vec<TimerId> {
        let mut due: Vec<(Time, TimerId)> =
            self.timers.live.iter().filter(|(_, (at, _))| *at <= t).map(|(id, (at, _))| (*at, *id)).collect();
        due.sort();
        due.into_iter().map(|(_, id)| id).collect()
    }

    /// Fires a live timer, running its action. Returns false for a timer
    /// that was cancelled or already fired.
    pub fn fire_timer(&mut self, id: TimerId, now: Time) -> bool {
        let Some((_, action)) = self.timers.live.remove(&id) else {
            return false;
        };
        self.log(now, FwEventKind::TimerFire { id });
        match action {
            TimerAction::SetRescheduleFlag => {
                self.flag.set();
                self.log(now, FwEventKind::FlagSet);
            }
        }
        true
    }

    /// Timers registered since the last call, for the event loop to queue.
    pub fn take_armed_timers(&mut self) -> Vec<TimerEventHandle> {
        std::mem::take(&mut self.timers.armed)
    }

    pub fn drain_events(&mut self) -> Vec<FwEvent> {
        std::mem::take(&mut self.events)
    }
}
