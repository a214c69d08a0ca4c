//! Scheduler-contract checks: a replay checker over framework events and
//! a probe plugin that inspects every callback from inside.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use hypsim::framework::{FwEvent, FwEventKind, SchedCtx, SchedulerTable};
use hypsim::model::{RunState, SchedState, SchedulerSpec, VmId};
use hypsim::schedulers::{SchedulerPlugin, SchedulerRegistry};
use hypsim::trace::Trace;

#[derive(Debug, Default, Clone, Copy)]
pub struct ContractReport {
    pub callbacks: u64,
    pub schedules: u64,
    pub dispatches: u64,
    pub flag_sets: u64,
}

#[derive(PartialEq)]
enum Phase {
    Allocated,
    Enqueued,
}

/// Replays framework events and checks callback legality, schedule
/// purity, sleeping exclusion and flag conservation.
pub fn check_fw_events(events: &[FwEvent]) -> Result<ContractReport, String> {
    let mut rep = ContractReport::default();
    let mut phase: BTreeMap<VmId, Phase> = BTreeMap::new();
    let mut state: BTreeMap<VmId, RunState> = BTreeMap::new();
    let mut asleep: BTreeSet<VmId> = BTreeSet::new();
    // Some(false): inside a checkpoint whose schedule call has not returned.
    let mut in_checkpoint: Option<bool> = None;
    let st = |state: &BTreeMap<VmId, RunState>, v: VmId| state.get(&v).copied();

    for (i, ev) in events.iter().enumerate() {
        let fail = |msg: String| Err(format!("event {i} at {}: {msg}", ev.at));
        let runtime_callback = |phase: &BTreeMap<VmId, Phase>, v: VmId| phase.get(&v) == Some(&Phase::Enqueued);
        match &ev.kind {
            FwEventKind::Init => rep.callbacks += 1,
            FwEventKind::Allocate(v) => {
                rep.callbacks += 1;
                if phase.insert(*v, Phase::Allocated).is_some() {
                    return fail(format!("second allocate of {v}"));
                }
            }
            FwEventKind::Enque(v) => {
                rep.callbacks += 1;
                if phase.get(v) != Some(&Phase::Allocated) {
                    return fail(format!("enque of {v} not directly after allocate"));
                }
                phase.insert(*v, Phase::Enqueued);
            }
            FwEventKind::Yield(v) => {
                rep.callbacks += 1;
                if !runtime_callback(&phase, *v) || st(&state, *v) != Some(RunState::Running) {
                    return fail(format!("yield of {v} in {:?}", st(&state, *v)));
                }
                asleep.insert(*v);
            }
            FwEventKind::Block(v) => {
                rep.callbacks += 1;
                if !runtime_callback(&phase, *v) || st(&state, *v) != Some(RunState::Running) {
                    return fail(format!("block of {v} in {:?}", st(&state, *v)));
                }
                if in_checkpoint != Some(true) {
                    return fail(format!("block of {v} outside a dispatch"));
                }
            }
            FwEventKind::Unblock(v) => {
                rep.callbacks += 1;
                if !runtime_callback(&phase, *v)
                    || !matches!(st(&state, *v), Some(RunState::Sleeping | RunState::Blocked))
                {
                    return fail(format!("unblock of {v} in {:?}", st(&state, *v)));
                }
                asleep.remove(v);
            }
            FwEventKind::Checkpoint { flag, .. } => {
                in_checkpoint = flag.then_some(false);
            }
            FwEventKind::Schedule { returned } => {
                rep.callbacks += 1;
                rep.schedules += 1;
                if in_checkpoint != Some(false) {
                    return fail("schedule outside a checkpoint with the flag set".into());
                }
                in_checkpoint = Some(true);
                if let Some(v) = returned {
                    if asleep.contains(v) {
                        return fail(format!("schedule returned {v} between its yield and unblock"));
                    }
                    if matches!(st(&state, *v), Some(RunState::Sleeping | RunState::Blocked) | None) {
                        return fail(format!("schedule returned {v} in {:?}", st(&state, *v)));
                    }
                }
            }
            FwEventKind::Dispatch { .. } => {
                rep.dispatches += 1;
                if in_checkpoint != Some(true) {
                    return fail("dispatch without a schedule call".into());
                }
                in_checkpoint = None;
            }
            FwEventKind::State { vm, state: s } => {
                if in_checkpoint == Some(false) {
                    return fail(format!("{vm} changed state during schedule"));
                }
                state.insert(*vm, *s);
            }
            FwEventKind::FlagSet => rep.flag_sets += 1,
            FwEventKind::TimerSet { .. }
            | FwEventKind::TimerCancel { .. }
            | FwEventKind::TimerFire { .. }
            | FwEventKind::DeadlineMiss(_) => {}
        }
    }
    if rep.dispatches > rep.flag_sets {
        return Err(format!("{} dispatches but only {} flag sets", rep.dispatches, rep.flag_sets));
    }
    Ok(rep)
}

/// Every world-switch charge follows a dispatch that came out of a
/// checkpoint with the flag set, with no guest or trap record between.
pub fn check_switches_at_checkpoints(trace: &Trace) -> Result<usize, String> {
    let mut last_checkpoint_flag: Option<bool> = None;
    let mut dispatched = false;
    let mut n = 0;
    for (i, r) in trace.records.iter().enumerate() {
        match r.kind.as_str() {
            "checkpoint" => {
                last_checkpoint_flag = Some(r.get("flag") == Some("1"));
                dispatched = false;
            }
            "dispatch" => dispatched = true,
            "charge" if r.cost_field == "world_switch" => {
                n += 1;
                if last_checkpoint_flag != Some(true) || !dispatched {
                    return Err(format!("record {i}: world switch outside a flagged checkpoint: {r:?}"));
                }
                last_checkpoint_flag = None;
                dispatched = false;
            }
            "trap" | "guest_run" | "idle" | "guest_ack" | "guest_eoi" => {
                last_checkpoint_flag = None;
                dispatched = false;
            }
            _ => {}
        }
    }
    Ok(n)
}

#[derive(Debug, Default)]
pub struct ProbeStats {
    pub calls: u64,
    pub violations: Vec<String>,
}

/// Wraps a plugin and checks each callback against the run states the
/// scheduler can observe.
pub struct Probe {
    pub inner: Arc<dyn SchedulerPlugin>,
    pub stats: Arc<Mutex<ProbeStats>>,
}

struct ProbeTable {
    inner: Box<dyn SchedulerTable>,
    stats: Arc<Mutex<ProbeStats>>,
}

impl SchedulerPlugin for Probe {
    fn validate(&self, spec: &SchedulerSpec, vms: &[VmId]) -> Result<(), String> {
        self.inner.validate(spec, vms)
    }

    fn build(&self, spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String> {
        Ok(Box::new(ProbeTable { inner: self.inner.build(spec)?, stats: self.stats.clone() }))
    }
}

fn snapshot(ctx: &SchedCtx<'_>) -> Vec<RunState> {
    ctx.vm_ids().map(|v| ctx.run_state(v)).collect()
}

impl ProbeTable {
    fn note(&self, ok: bool, msg: impl FnOnce() -> String) {
        let mut s = self.stats.lock().unwrap();
        s.calls += 1;
        if !ok {
            s.violations.push(msg());
        }
    }
}

impl SchedulerTable for ProbeTable {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn init(&mut self, ctx: &mut SchedCtx<'_>) {
        self.note(true, String::new);
        self.inner.init(ctx)
    }

    fn schedule(&mut self, ctx: &mut SchedCtx<'_>) -> Option<VmId> {
        let before = snapshot(ctx);
        let got = self.inner.schedule(ctx);
        let after = snapshot(ctx);
        let ok_pure = before == after;
        let ok_target = got.map_or(true, |v| !matches!(ctx.run_state(v), RunState::Sleeping | RunState::Blocked));
        self.note(ok_pure && ok_target, || format!("schedule at {}: {before:?} -> {after:?}, returned {got:?}", ctx.now()));
        got
    }

    fn yield_current(&mut self, ctx: &mut SchedCtx<'_>) {
        let ok = ctx.current().is_some_and(|v| ctx.run_state(v) == RunState::Running);
        self.note(ok, || format!("yield at {} with current {:?}", ctx.now(), ctx.current()));
        self.inner.yield_current(ctx)
    }

    fn block(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        let ok = ctx.run_state(vcpu) == RunState::Running;
        self.note(ok, || format!("block of {vcpu} in {:?}", ctx.run_state(vcpu)));
        self.inner.block(ctx, vcpu)
    }

    fn unblock(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        let ok = matches!(ctx.run_state(vcpu), RunState::Sleeping | RunState::Blocked);
        self.note(ok, || format!("unblock of {vcpu} in {:?}", ctx.run_state(vcpu)));
        self.inner.unblock(ctx, vcpu)
    }

    fn allocate(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) -> Result<SchedState, String> {
        self.note(true, String::new);
        self.inner.allocate(ctx, vcpu)
    }

    fn enque(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        self.note(true, String::new);
        self.inner.enque(ctx, vcpu)
    }
}

/// The default registry with `name` wrapped in a probe.
pub fn probed_registry(name: &str) -> (SchedulerRegistry, Arc<Mutex<ProbeStats>>) {
    let mut reg = SchedulerRegistry::default();
    let stats = Arc::new(Mutex::new(ProbeStats::default()));
    let inner = reg.get(name).expect("known scheduler").clone();
    reg.register(name, Arc::new(Probe { inner, stats: stats.clone() }));
    (reg, stats)
}
