//! Earliest-deadline-first over per-VM (period, budget) reservations.
//!
//! Two priority queues: the executable queue ordered by deadline, and the
//! waiting queue of VMs that used up their budget, ordered by the start
//! of their next period. A VM's deadline is the start of its next period.
//! Deadline ties go to the lower VM id.
//!
//! `schedule` replenishes every VM whose period has started, keeps the
//! running VM unless a queued VM has an earlier deadline, and arms two
//! timers: budget expiry of the chosen VM and the earliest upcoming period
//! start (without the latter, a replenishment would go unnoticed until
//! some unrelated reschedule).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::framework::{SchedCtx, SchedulerTable, TimerAction, TimerEventHandle};
use crate::model::{RunState, SchedState, SchedulerSpec, VmId};
use crate::time::Time;

use super::SchedulerPlugin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdfParam {
    pub period_ns: Time,
    pub budget_ns: Time,
}

impl EdfParam {
    pub fn new(period: Time, budget: Time) -> Self {
        EdfParam { period_ns: period, budget_ns: budget }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.budget_ns.is_zero() {
            return Err("budget_ns must be positive".into());
        }
        if self.budget_ns > self.period_ns {
            return Err(format!("budget_ns {} exceeds period_ns {}", self.budget_ns, self.period_ns));
        }
        Ok(())
    }

    pub fn utilization(&self) -> f64 {
        self.budget_ns.as_ns() as f64 / self.period_ns.as_ns() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdfState {
    pub param: EdfParam,
    pub deadline: Time,
    pub remaining: Time,
    /// Part of the current activation's consumption already deducted.
    charged: Time,
}

impl EdfState {
    fn key(&self, vm: VmId) -> (Time, VmId) {
        (self.deadline, vm)
    }
}

#[derive(Debug, Default)]
pub struct Edf {
    executable: BTreeSet<(Time, VmId)>,
    waiting: BTreeSet<(Time, VmId)>,
    budget_timer: Option<TimerEventHandle>,
    release_timer: Option<TimerEventHandle>,
}

impl Edf {
    pub fn new() -> Self {
        Edf::default()
    }

    fn st<'c>(ctx: &'c SchedCtx<'_>, vm: VmId) -> &'c EdfState {
        ctx.state::<EdfState>(vm).expect("EDF state allocated")
    }

    fn st_mut<'c>(ctx: &'c mut SchedCtx<'_>, vm: VmId) -> &'c mut EdfState {
        ctx.state_mut::<EdfState>(vm).expect("EDF state allocated")
    }

    /// Deducts guest time consumed since the last deduction.
    fn charge(ctx: &mut SchedCtx<'_>, vm: VmId) {
        let consumed = ctx.consumed(vm);
        let st = Self::st_mut(ctx, vm);
        let delta = consumed.saturating_sub(st.charged);
        st.charged = consumed;
        st.remaining = st.remaining.saturating_sub(delta);
    }

    /// Advances `vm` past every period boundary at or before now. An
    /// unspent budget at a boundary is a miss if the VM wanted the CPU.
    fn release(ctx: &mut SchedCtx<'_>, vm: VmId, count_misses: bool) {
        let now = ctx.now();
        let demanding = count_misses && matches!(ctx.run_state(vm), RunState::Running | RunState::Ready);
        let mut misses = 0;
        {
            let st = Self::st_mut(ctx, vm);
            while st.deadline <= now {
                if demanding && !st.remaining.is_zero() {
                    misses += 1;
                }
                st.deadline += st.param.period_ns;
                st.remaining = st.param.budget_ns;
            }
        }
        for _ in 0..misses {
            ctx.record_deadline_miss(vm);
        }
    }

    fn route(&mut self, ctx: &SchedCtx<'_>, vm: VmId) {
        let st = Self::st(ctx, vm);
        if st.remaining.is_zero() {
            self.waiting.insert(st.key(vm));
        } else {
            self.executable.insert(st.key(vm));
        }
    }

    fn rearm(&mut self, ctx: &mut SchedCtx<'_>, chosen: Option<VmId>, running: Option<VmId>) {
        for h in [self.budget_timer.take(), self.release_timer.take()].into_iter().flatten() {
            ctx.cancel_timer(h);
        }
        let now = ctx.now();
        if let Some(vm) = chosen {
            let at = now + Self::st(ctx, vm).remaining;
            self.budget_timer = ctx.register_timer(at, TimerAction::SetRescheduleFlag).ok();
        }
        let next_release = self
            .executable
            .iter()
            .chain(self.waiting.iter())
            .map(|(d, _)| *d)
            .chain(chosen.iter().chain(running.iter()).map(|vm| Self::st(ctx, *vm).deadline))
            .min();
        if let Some(at) = next_release {
            self.release_timer = ctx.register_timer(at, TimerAction::SetRescheduleFlag).ok();
        }
    }
}

impl SchedulerTable for Edf {
    fn name(&self) -> &str {
        "edf"
    }

    fn init(&mut self, _ctx: &mut SchedCtx<'_>) {
        self.executable.clear();
        self.waiting.clear();
        self.budget_timer = None;
        self.release_timer = None;
    }

    fn schedule(&mut self, ctx: &mut SchedCtx<'_>) -> Option<VmId> {
        let now = ctx.now();
        let running = ctx.current().filter(|vm| ctx.run_state(*vm) == RunState::Running);
        if let Some(vm) = running {
            Self::charge(ctx, vm);
            Self::release(ctx, vm, true);
        }

        let due: Vec<(Time, VmId)> = self
            .executable
            .iter()
            .chain(self.waiting.iter())
            .filter(|(d, _)| *d <= now)
            .copied()
            .collect();
        for key in due {
            self.executable.remove(&key);
            self.waiting.remove(&key);
            Self::release(ctx, key.1, true);
            self.executable.insert(Self::st(ctx, key.1).key(key.1));
        }

        let keep = running.filter(|vm| !Self::st(ctx, *vm).remaining.is_zero()).map(|vm| Self::st(ctx, vm).key(vm));
        let top = self.executable.first().copied();
        let chosen = match (keep, top) {
            (Some(k), Some(t)) if k <= t => Some(k.1),
            (Some(k), None) => Some(k.1),
            (_, Some(t)) => {
                self.executable.remove(&t);
                Some(t.1)
            }
            (None, None) => None,
        };
        if let Some(vm) = chosen {
            if ctx.run_state(vm) != RunState::Running {
                Self::st_mut(ctx, vm).charged = Time::ZERO;
            }
        }
        self.rearm(ctx, chosen, running);
        chosen
    }

    fn yield_current(&mut self, ctx: &mut SchedCtx<'_>) {
        if let Some(vm) = ctx.current() {
            Self::charge(ctx, vm);
        }
        ctx.set_reschedule_flag();
    }

    fn block(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        Self::charge(ctx, vcpu);
        self.route(ctx, vcpu);
        ctx.set_reschedule_flag();
    }

    fn unblock(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        // periods that passed while asleep are not misses
        Self::release(ctx, vcpu, false);
        self.route(ctx, vcpu);
        ctx.set_reschedule_flag();
    }

    fn allocate(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) -> Result<SchedState, String> {
        let param: EdfParam = ctx.param(vcpu).decode()?;
        param.validate()?;
        Ok(Box::new(EdfState {
            param,
            deadline: ctx.now() + param.period_ns,
            remaining: param.budget_ns,
            charged: Time::ZERO,
        }))
    }

    fn enque(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        self.executable.insert(Self::st(ctx, vcpu).key(vcpu));
    }
}

pub(super) struct EdfPlugin;

impl SchedulerPlugin for EdfPlugin {
    fn validate(&self, spec: &SchedulerSpec, vms: &[VmId]) -> Result<(), String> {
        if spec.quantum_ns.is_some() {
            return Err("edf: quantum_ns is not an edf parameter".into());
        }
        super::each_param(spec, vms, |vm, p: EdfParam| p.validate().map_err(|e| format!("edf: {vm}: {e}")))
    }

    fn build(&self, _spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String> {
        Ok(Box::new(Edf::new()))
    }
}
