//! Deterministic discrete-event core.
//!
//! Virtual time only moves in two ways: the event loop advancing to the
//! next event (crediting the gap to the running guest or to idle), and a
//! hypervisor charge (the cost of a trap, a switch, an injection). Every
//! nanosecond of the horizon is accounted to exactly one of guest, hypervisor
//! or idle, and the trace records each span.
//!
//! Events at the same instant are ordered interrupts first (physical
//! interrupts and timers), then guest progress, then insertion order.
//! A guest event becomes stale when the hypervisor is entered before it is
//! processed; the guest is re-armed from its script when it next runs.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::config::{self, ConfigError};
use crate::framework::{CheckpointKind, FrameworkError, FwEvent, FwEventKind, Framework, TimerAction, TimerId};
use crate::ivc::{IvcError, IvcHub};
use crate::memmap::{RegionMap, Stage2Fault, Translation};
use crate::metrics::MetricsReport;
use crate::model::{
    Access, ChannelId, ChannelVariant, CostField, CostModel, FaultPolicy, HypCallPayload, IrqId, RunState, Segment,
    SystemSpec, VcpuRecord, VmId,
};
use crate::schedulers::SchedulerRegistry;
use crate::time::Time;
use crate::trace::{actor, Trace, TraceRecord};
use crate::vgic::{Arrival, DropReason, Injection, MmioResult, Vgic, SPURIOUS_IRQ};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvcOp {
    Notify(ChannelId),
    Acquire(ChannelId),
    Release(ChannelId),
    Write { channel: ChannelId, bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    ComputeEnd { vm: VmId, gen: u64 },
    /// Occurrence `index` of interrupt source `source`.
    PhysIrq { irq: IrqId, source: usize, index: u64 },
    TimerFire(TimerId),
    HypCall { vm: VmId, gen: u64, payload: HypCallPayload },
    MmioTouch { vm: VmId, gen: u64, ipa: u64, access: Access, value: u64 },
    Wfi { vm: VmId, gen: u64 },
    /// The guest's script is exhausted.
    Halt { vm: VmId, gen: u64 },
    IvcOp { vm: VmId, gen: u64, op: IvcOp },
}

impl EventKind {
    pub fn is_interrupt(&self) -> bool {
        matches!(self, EventKind::PhysIrq { .. } | EventKind::TimerFire(_))
    }

    fn guest_gen(&self) -> Option<u64> {
        match self {
            EventKind::ComputeEnd { gen, .. }
            | EventKind::HypCall { gen, .. }
            | EventKind::MmioTouch { gen, .. }
            | EventKind::Wfi { gen, .. }
            | EventKind::Halt { gen, .. }
            | EventKind::IvcOp { gen, .. } => Some(*gen),
            EventKind::PhysIrq { .. } | EventKind::TimerFire(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub at: Time,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    fn key(&self) -> (Time, u8, u64) {
        (self.at, if self.kind.is_interrupt() { 0 } else { 1 }, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        EventQueue::default()
    }

    pub fn push(&mut self, at: Time, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event { at, seq, kind }));
        seq
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek().map(|Reverse(e)| e)
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    /// Pops the next event if it is due at or before `limit`.
    pub fn pop_due(&mut self, limit: Time) -> Option<Event> {
        if self.peek()?.at <= limit {
            self.pop()
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("scheduler: {0}")]
    Scheduler(String),
    #[error("contract violation: {0}")]
    Contract(#[from] FrameworkError),
    #[error("{vm} halted on stage-2 {reason} fault at ipa {ipa:#x}")]
    Halted { vm: VmId, ipa: u64, reason: &'static str },
    #[error("no progress: {events} events at {at}")]
    Livelock { at: Time, events: u64 },
}

impl SimError {
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::ZeroHorizon | SimError::Scheduler(_))
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: MetricsReport,
    /// Every framework event, in order, including callback invocations.
    pub fw_events: Vec<FwEvent>,
}

/// A run that stopped early; `trace` holds everything up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SimError,
    pub trace: Trace,
    pub fw_events: Vec<FwEvent>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

/// Events at one instant before the run is declared stuck.
const STALL_LIMIT: u64 = 1_000_000;

pub fn run(spec: &SystemSpec, horizon: Time) -> Result<RunOutput, RunFailure> {
    run_with(spec, horizon, &SchedulerRegistry::default())
}

pub fn run_with(spec: &SystemSpec, horizon: Time, registry: &SchedulerRegistry) -> Result<RunOutput, RunFailure> {
    let fail = |error: SimError| RunFailure { error, trace: Trace::default(), fw_events: Vec::new() };
    if horizon.is_zero() {
        return Err(fail(SimError::ZeroHorizon));
    }
    config::validate(spec, registry).map_err(|e| fail(e.into()))?;
    let table = registry.build(&spec.scheduler).map_err(|e| fail(SimError::Scheduler(e)))?;
    let mut sim = Sim::new(spec, horizon, Framework::new(table));
    match sim.run() {
        Ok(()) => {
            let trace = Trace { records: sim.records };
            let metrics = MetricsReport::from_trace(&trace).expect("engine trace is well formed");
            Ok(RunOutput { trace, metrics, fw_events: sim.fw_log })
        }
        Err(error) => {
            sim.sync_fw();
            sim.flush_slice();
            sim.emit(None, "abort", format!("error={error}"));
            Err(RunFailure { error, trace: Trace { records: sim.records }, fw_events: sim.fw_log })
        }
    }
}

struct Guest {
    segments: Vec<Segment>,
    repeat: bool,
    cursor: usize,
    /// Unexecuted part of the compute segment at `cursor`.
    left: Option<Time>,
    done: bool,
}

impl Guest {
    fn current(&mut self) -> Option<Segment> {
        if self.cursor >= self.segments.len() {
            if self.repeat && !self.segments.is_empty() {
                self.cursor = 0;
            } else {
                return None;
            }
        }
        Some(self.segments[self.cursor].clone())
    }
}

struct Slice {
    vm: Option<VmId>,
    start: Time,
    dur: Time,
}

struct Sim<'a> {
    spec: &'a SystemSpec,
    cost: CostModel,
    horizon: Time,
    now: Time,
    queue: EventQueue,
    fw: Framework,
    vgic: Vgic,
    mem: RegionMap,
    ivc: IvcHub,
    guests: Vec<Guest>,
    gen: u64,
    armed: bool,
    records: Vec<TraceRecord>,
    fw_log: Vec<FwEvent>,
    slice: Option<Slice>,
    stall: (Time, u64),
}

fn rw(access: Access) -> &'static str {
    match access {
        Access::Read => "r",
        Access::Write => "w",
    }
}

fn vm_or_none(vm: Option<VmId>) -> String {
    vm.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl<'a> Sim<'a> {
    fn new(spec: &'a SystemSpec, horizon: Time, fw: Framework) -> Self {
        Sim {
            spec,
            cost: spec.cost_model,
            horizon,
            now: Time::ZERO,
            queue: EventQueue::new(),
            fw,
            vgic: Vgic::from_spec(spec),
            mem: RegionMap::from_spec(spec, &IvcHub::gated_pages(spec)),
            ivc: IvcHub::from_spec(spec),
            guests: spec
                .vms
                .iter()
                .map(|v| Guest {
                    segments: v.workload.segments.clone(),
                    repeat: v.workload.repeat,
                    cursor: 0,
                    left: None,
                    done: false,
                })
                .collect(),
            gen: 0,
            armed: false,
            records: Vec::new(),
            fw_log: Vec::new(),
            slice: None,
            stall: (Time::ZERO, 0),
        }
    }

    // ---- trace plumbing ----

    fn flush_slice(&mut self) {
        if let Some(s) = self.slice.take() {
            let (kind, who) = match s.vm {
                Some(vm) => ("guest_run", Some(vm)),
                None => ("idle", None),
            };
            let detail = format!("start_ns={};dur_ns={}", s.start.as_ns(), s.dur.as_ns());
            self.records.push(TraceRecord::new((s.start + s.dur).as_ns(), actor(who), kind, detail));
        }
    }

    fn emit(&mut self, vm: Option<VmId>, kind: &str, detail: String) {
        self.flush_slice();
        self.records.push(TraceRecord::new(self.now.as_ns(), actor(vm), kind, detail));
    }

    /// Charges hypervisor time, truncated at the horizon.
    fn charge(&mut self, vm: Option<VmId>, kind: &str, field: CostField, ns: Time, mut detail: String) {
        self.flush_slice();
        let c = ns.min(self.horizon - self.now);
        if c < ns {
            detail.push_str(&format!(";clipped_from={}", ns.as_ns()));
        }
        let mut r = TraceRecord::new(self.now.as_ns(), actor(vm), kind, detail);
        r.cost_field = field.name().to_string();
        r.cost_ns = c.as_ns();
        self.records.push(r);
        self.now += c;
    }

    fn charge_field(&mut self, vm: Option<VmId>, kind: &str, field: CostField, detail: String) {
        self.charge(vm, kind, field, self.cost.get(field), detail);
    }

    fn sync_fw(&mut self) {
        for ev in self.fw.drain_events() {
            self.flush_slice();
            let (who, kind, detail) = match &ev.kind {
                FwEventKind::Init => (None, "sched_init", String::new()),
                FwEventKind::Allocate(vm) => (Some(*vm), "sched_allocate", String::new()),
                FwEventKind::Enque(vm) => (Some(*vm), "sched_enque", String::new()),
                FwEventKind::Schedule { returned } => (None, "sched_schedule", format!("ret={}", vm_or_none(*returned))),
                FwEventKind::Yield(vm) => (Some(*vm), "sched_yield", String::new()),
                FwEventKind::Block(vm) => (Some(*vm), "sched_block", String::new()),
                FwEventKind::Unblock(vm) => (Some(*vm), "sched_unblock", String::new()),
                FwEventKind::FlagSet => (None, "flag_set", String::new()),
                FwEventKind::TimerSet { id, fire_at } => {
                    (None, "timer_set", format!("id={};at={}", id.0, fire_at.as_ns()))
                }
                FwEventKind::TimerCancel { id } => (None, "timer_cancel", format!("id={}", id.0)),
                FwEventKind::TimerFire { id } => (None, "timer_fire", format!("id={}", id.0)),
                FwEventKind::DeadlineMiss(vm) => (Some(*vm), "deadline_miss", String::new()),
                FwEventKind::Checkpoint { kind, flag } => {
                    (None, "checkpoint", format!("kind={};flag={}", kind.name(), *flag as u8))
                }
                FwEventKind::Dispatch { from, to } => {
                    (*to, "dispatch", format!("from={};to={}", vm_or_none(*from), vm_or_none(*to)))
                }
                FwEventKind::State { vm, state } => (Some(*vm), "vm_state", format!("state={}", state.name())),
            };
            self.records.push(TraceRecord::new(ev.at.as_ns(), actor(who), kind, detail));
            self.fw_log.push(ev);
        }
        for h in self.fw.take_armed_timers() {
            self.queue.push(h.fire_at, EventKind::TimerFire(h.id));
        }
    }

    // ---- time ----

    fn advance_to(&mut self, t: Time) {
        if t <= self.now {
            return;
        }
        let dur = t - self.now;
        let owner = match self.fw.running() {
            Some(vm) => {
                let left = self.guests[vm.index()].left.as_mut().expect("running guest is computing");
                *left = left.checked_sub(dur).expect("guest computes past its segment");
                self.fw.add_consumed(vm, dur);
                Some(vm)
            }
            None => None,
        };
        match &mut self.slice {
            Some(s) if s.vm == owner => s.dur += dur,
            _ => {
                self.flush_slice();
                self.slice = Some(Slice { vm: owner, start: self.now, dur });
            }
        }
        self.now = t;
    }

    fn enter_hyp(&mut self) {
        self.gen += 1;
        self.armed = false;
    }

    // ---- main loop ----

    fn run(&mut self) -> Result<(), SimError> {
        self.boot()?;
        while let Some(ev) = self.queue.pop_due(self.horizon) {
            let stale = match &ev.kind {
                EventKind::TimerFire(id) => !self.fw.timer_is_live(*id),
                k => k.guest_gen().is_some_and(|g| g != self.gen),
            };
            if stale {
                continue;
            }
            let t = ev.at.max(self.now);
            if t == self.stall.0 {
                self.stall.1 += 1;
                if self.stall.1 > STALL_LIMIT {
                    return Err(SimError::Livelock { at: t, events: self.stall.1 });
                }
            } else {
                self.stall = (t, 1);
            }
            self.advance_to(t);
            self.handle(ev.kind)?;
            self.sync_fw();
            self.resume_guest();
        }
        self.advance_to(self.horizon);
        self.flush_slice();
        Ok(())
    }

    fn boot(&mut self) -> Result<(), SimError> {
        let detail = format!(
            "vms={};horizon_ns={};scheduler={}",
            self.spec.vm_count(),
            self.horizon.as_ns(),
            self.fw.scheduler_name()
        );
        self.emit(None, "run_start", detail);
        let vcpus = self.spec.vms.iter().map(|v| VcpuRecord::new(v.id, self.spec.scheduler.param(v.id))).collect();
        self.fw.init(vcpus, self.now)?;
        // the first dispatch happens at the boot tick
        self.fw.register_timer(self.now, TimerAction::SetRescheduleFlag, self.now)?;
        self.sync_fw();
        for (source, s) in self.spec.interrupts.iter().enumerate() {
            self.queue.push(s.at_ns, EventKind::PhysIrq { irq: s.irq, source, index: 0 });
        }
        Ok(())
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        if kind.guest_gen().is_some() {
            self.armed = false;
        }
        match kind {
            EventKind::ComputeEnd { vm, .. } => {
                let g = &mut self.guests[vm.index()];
                debug_assert_eq!(g.left, Some(Time::ZERO));
                g.left = None;
                g.cursor += 1;
                Ok(())
            }
            EventKind::TimerFire(_) => self.on_timer(),
            EventKind::PhysIrq { irq, source, index } => self.on_phys_irq(irq, source, index),
            EventKind::HypCall { vm, payload, .. } => {
                self.consume(vm);
                self.enter_hyp();
                let detail = match payload {
                    HypCallPayload::Null => "cause=hyp_call".to_string(),
                    HypCallPayload::Reschedule => "cause=hyp_call;payload=reschedule".to_string(),
                };
                self.charge_field(Some(vm), "trap", CostField::HypCall, detail);
                if payload == HypCallPayload::Reschedule {
                    self.fw.set_reschedule_flag(self.now)?;
                }
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            EventKind::MmioTouch { vm, ipa, access, value, .. } => {
                self.consume(vm);
                self.on_mmio(vm, ipa, access, value)
            }
            EventKind::Wfi { vm, .. } => {
                self.consume(vm);
                self.enter_hyp();
                self.charge_field(Some(vm), "trap", CostField::HypCall, "cause=wfi".into());
                self.fw.on_vm_sleep(vm, self.now)?;
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            EventKind::Halt { vm, .. } => {
                self.enter_hyp();
                self.guests[vm.index()].done = true;
                self.charge_field(Some(vm), "trap", CostField::HypCall, "cause=halt".into());
                self.fw.on_vm_halt(vm, self.now)?;
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            EventKind::IvcOp { vm, op, .. } => {
                self.consume(vm);
                self.on_ivc(vm, op)
            }
        }
    }

    /// The guest has issued the segment at its cursor.
    fn consume(&mut self, vm: VmId) {
        self.guests[vm.index()].cursor += 1;
    }

    fn checkpoint(&mut self, kind: CheckpointKind) -> Result<(), SimError> {
        let d = self.fw.checkpoint(kind, self.now)?;
        self.sync_fw();
        if let Some(to) = d.switched_in() {
            self.charge_field(None, "charge", CostField::WorldSwitch, format!("to={to}"));
        }
        Ok(())
    }

    fn wake(&mut self, vm: VmId) -> Result<(), SimError> {
        if self.fw.run_state(vm) == RunState::Sleeping && !self.guests[vm.index()].done {
            self.fw.on_vm_wakeup(vm, self.now)?;
            self.sync_fw();
        }
        Ok(())
    }

    fn on_timer(&mut self) -> Result<(), SimError> {
        let entry = self.now;
        self.enter_hyp();
        self.charge_field(None, "trap", CostField::InterruptEntryExit, "cause=timer".into());
        for id in self.fw.due_timers(entry) {
            self.fw.fire_timer(id, self.now);
        }
        self.sync_fw();
        self.checkpoint(CheckpointKind::EndOfPhysicalInterrupt)
    }

    fn on_phys_irq(&mut self, irq: IrqId, source: usize, index: u64) -> Result<(), SimError> {
        let src = &self.spec.interrupts[source];
        if index + 1 < src.count {
            let next = src
                .period_ns
                .and_then(|p| p.as_ns().checked_mul(index + 1))
                .and_then(|off| src.at_ns.checked_add(Time::from_ns(off)));
            if let Some(at) = next {
                self.queue.push(at, EventKind::PhysIrq { irq, source, index: index + 1 });
            }
        }
        self.enter_hyp();
        self.charge_field(None, "trap", CostField::InterruptEntryExit, format!("cause=irq;irq={irq}"));
        match self.vgic.physical_irq_arrival(irq) {
            Arrival::Injected { vm } => {
                self.emit(Some(vm), "virq_fill", format!("virq={irq};hw={irq}"));
                self.wake(vm)?;
            }
            Arrival::Pending { vm } => self.emit(Some(vm), "irq_pending", format!("irq={irq}")),
            Arrival::Dropped(reason) => {
                let why = match reason {
                    DropReason::Reserved => "reserved",
                    DropReason::Unassigned => "unassigned",
                };
                self.emit(None, "warning", format!("irq={irq};dropped={why}"));
            }
        }
        self.checkpoint(CheckpointKind::EndOfPhysicalInterrupt)
    }

    fn on_mmio(&mut self, vm: VmId, ipa: u64, access: Access, value: u64) -> Result<(), SimError> {
        match self.mem.translate(vm, ipa, access) {
            Translation::Pa(pa) => {
                self.emit(Some(vm), "mem_access", format!("ipa={ipa:#x};pa={pa:#x};rw={}", rw(access)));
                Ok(())
            }
            Translation::Mmio { offset } => {
                self.enter_hyp();
                self.charge_field(Some(vm), "trap", CostField::MmioEmulation, format!("cause=mmio;offset={offset:#x}"));
                let is_write = access == Access::Write;
                let res = self.vgic.dist_mmio_access(vm, offset, is_write, value as u32);
                let result = match res.result {
                    MmioResult::Read(v) => format!("read={v:#x}"),
                    MmioResult::Written => "written".to_string(),
                    MmioResult::Fault => "fault".to_string(),
                };
                self.emit(
                    Some(vm),
                    "mmio",
                    format!("offset={offset:#x};rw={};value={:#x};result={result}", rw(access), value as u32),
                );
                if res.result == MmioResult::Fault {
                    self.emit(Some(vm), "fault_inject", format!("cause=unmodeled_mmio;offset={offset:#x}"));
                }
                for virq in res.filled {
                    self.emit(Some(vm), "virq_fill", format!("virq={virq};hw={virq}"));
                }
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            Translation::Fault(f) => self.stage2_fault(f),
        }
    }

    fn stage2_fault(&mut self, f: Stage2Fault) -> Result<(), SimError> {
        self.enter_hyp();
        let detail = format!("cause=stage2_fault;ipa={:#x};rw={};reason={}", f.ipa, rw(f.access), f.reason.name());
        self.charge_field(Some(f.vm), "trap", CostField::HypCall, detail.clone());
        match self.spec.options.fault_policy {
            FaultPolicy::Inject => {
                self.emit(Some(f.vm), "fault_inject", detail);
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            FaultPolicy::Halt => Err(SimError::Halted { vm: f.vm, ipa: f.ipa, reason: f.reason.name() }),
        }
    }

    fn ivc_error(&mut self, vm: VmId, op: &str, channel: ChannelId, e: &IvcError) {
        self.emit(Some(vm), "ivc_error", format!("op={op};channel={channel};error={e}"));
    }

    fn on_ivc(&mut self, vm: VmId, op: IvcOp) -> Result<(), SimError> {
        match op {
            IvcOp::Notify(ch) => {
                self.enter_hyp();
                self.charge_field(Some(vm), "trap", CostField::HypCall, format!("cause=ivc_notify;channel={ch}"));
                match self.ivc.notify(ch, vm, &mut self.vgic, &self.cost) {
                    Ok(n) => {
                        let vi = n.charges[1];
                        self.charge(Some(vm), "charge", vi.field, vi.ns, format!("virq={};to={}", n.virq, n.target));
                        let result = match n.injection {
                            Injection::Filled => "filled",
                            Injection::Queued => "queued",
                            Injection::Collapsed => "collapsed",
                        };
                        self.emit(Some(vm), "ivc_notify", format!("channel={ch};to={};virq={};result={result}", n.target, n.virq));
                        if n.injection == Injection::Filled {
                            self.emit(Some(n.target), "virq_fill", format!("virq={};hw=none", n.virq));
                        }
                        self.wake(n.target)?;
                    }
                    Err(e) => self.ivc_error(vm, "notify", ch, &e),
                }
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            IvcOp::Acquire(ch) | IvcOp::Release(ch) => {
                let acquire = matches!(op, IvcOp::Acquire(_));
                let name = if acquire { "ivc_acquire" } else { "ivc_release" };
                let variant = match self.ivc.channel(ch) {
                    Ok(c) => c.spec.variant,
                    Err(e) => {
                        self.ivc_error(vm, name, ch, &e);
                        return Ok(());
                    }
                };
                if variant == ChannelVariant::FreeAccess {
                    self.emit(Some(vm), name, format!("channel={ch};result=free"));
                    return Ok(());
                }
                self.enter_hyp();
                let res = if acquire {
                    self.ivc.acquire(ch, vm, &mut self.mem, &self.cost)
                } else {
                    self.ivc.release(ch, vm, &mut self.mem, &self.cost)
                };
                let cause = format!("cause={name};channel={ch}");
                match res {
                    Ok(charges) => {
                        for (k, c) in charges.iter().enumerate() {
                            self.charge(Some(vm), if k == 0 { "trap" } else { "charge" }, c.field, c.ns, cause.clone());
                        }
                        self.emit(Some(vm), name, format!("channel={ch};result=ok"));
                    }
                    Err(e) => {
                        self.charge_field(Some(vm), "trap", CostField::HypCall, cause);
                        match e {
                            IvcError::Busy { holder, .. } => {
                                self.emit(Some(vm), "ivc_busy", format!("channel={ch};holder={holder}"))
                            }
                            e => self.ivc_error(vm, name, ch, &e),
                        }
                    }
                }
                self.checkpoint(CheckpointKind::EndOfHypCall)
            }
            IvcOp::Write { channel, bytes } => {
                let targets = match self.ivc.write_targets(channel, vm, bytes, &self.mem) {
                    Ok(t) => t,
                    Err(e) => {
                        self.ivc_error(vm, "write", channel, &e);
                        return Ok(());
                    }
                };
                self.emit(Some(vm), "ivc_write", format!("channel={channel};bytes={bytes}"));
                for ipa in targets {
                    match self.mem.translate(vm, ipa, Access::Write) {
                        Translation::Pa(pa) => {
                            self.emit(Some(vm), "mem_access", format!("ipa={ipa:#x};pa={pa:#x};rw=w"));
                        }
                        Translation::Fault(f) => return self.stage2_fault(f),
                        Translation::Mmio { .. } => unreachable!("channel pages never overlap the distributor"),
                    }
                }
                Ok(())
            }
        }
    }

    /// Zero-time guest interrupt handler: take and complete every pending
    /// virtual interrupt.
    fn guest_irqs(&mut self, vm: VmId) {
        loop {
            let id = self.vgic.guest_ack(vm);
            if id == SPURIOUS_IRQ {
                break;
            }
            self.emit(Some(vm), "guest_ack", format!("virq={id}"));
            match self.vgic.guest_eoi(vm, id) {
                Ok(filled) => {
                    self.emit(Some(vm), "guest_eoi", format!("virq={id}"));
                    for f in filled {
                        self.emit(Some(vm), "virq_fill", format!("virq={f};hw={f}"));
                    }
                }
                Err(w) => self.emit(Some(vm), "warning", w.to_string()),
            }
        }
    }

    /// Schedules the running guest's next step.
    fn resume_guest(&mut self) {
        if self.armed {
            return;
        }
        let Some(vm) = self.fw.running() else {
            return;
        };
        if self.vgic.cpu(vm).has_pending() {
            self.guest_irqs(vm);
        }
        let (now, gen) = (self.now, self.gen);
        let g = &mut self.guests[vm.index()];
        let kind = loop {
            if let Some(left) = g.left {
                if !left.is_zero() {
                    break EventKind::ComputeEnd { vm, gen };
                }
                g.left = None;
                g.cursor += 1;
                continue;
            }
            match g.current() {
                None => break EventKind::Halt { vm, gen },
                Some(Segment::Compute { ns }) => g.left = Some(ns),
                Some(Segment::HypCall { payload }) => break EventKind::HypCall { vm, gen, payload },
                Some(Segment::Mmio { ipa, access, value }) => break EventKind::MmioTouch { vm, gen, ipa, access, value },
                Some(Segment::Wfi) => break EventKind::Wfi { vm, gen },
                Some(Segment::IvcNotify { channel }) => break EventKind::IvcOp { vm, gen, op: IvcOp::Notify(channel) },
                Some(Segment::IvcAcquire { channel }) => break EventKind::IvcOp { vm, gen, op: IvcOp::Acquire(channel) },
                Some(Segment::IvcRelease { channel }) => break EventKind::IvcOp { vm, gen, op: IvcOp::Release(channel) },
                Some(Segment::IvcWrite { channel, bytes }) => {
                    break EventKind::IvcOp { vm, gen, op: IvcOp::Write { channel, bytes } }
                }
            }
        };
        let at = match &kind {
            EventKind::ComputeEnd { .. } => now.checked_add(g.left.expect("computing")),
            _ => Some(now),
        };
        if let Some(at) = at {
            self.queue.push(at, kind);
        }
        self.armed = true;
    }
}
