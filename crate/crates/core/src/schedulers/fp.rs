//! Fixed-priority scheduling. Lower `priority` values are more urgent;
//! equal priorities fall back to VM id.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::framework::{SchedCtx, SchedulerTable};
use crate::model::{SchedState, SchedulerSpec, VmId};

use super::SchedulerPlugin;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpParam {
    pub priority: i64,
}

/// The VM's key in the ready set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpState {
    pub priority: i64,
}

/// The ready set holds every runnable VM, the running one included, so
/// `schedule` is a pure lookup of its minimum.
#[derive(Debug, Default)]
pub struct Fp {
    ready: BTreeSet<(i64, VmId)>,
}

impl Fp {
    pub fn new() -> Self {
        Fp::default()
    }

    fn key(ctx: &SchedCtx<'_>, vm: VmId) -> (i64, VmId) {
        (ctx.state::<FpState>(vm).expect("FP state allocated").priority, vm)
    }

    /// Applies `f` and requests a reschedule if the most urgent VM changed.
    fn update(&mut self, ctx: &mut SchedCtx<'_>, f: impl FnOnce(&mut BTreeSet<(i64, VmId)>)) {
        let before = self.ready.first().copied();
        f(&mut self.ready);
        if self.ready.first().copied() != before {
            ctx.set_reschedule_flag();
        }
    }
}

impl SchedulerTable for Fp {
    fn name(&self) -> &str {
        "fp"
    }

    fn init(&mut self, _ctx: &mut SchedCtx<'_>) {
        self.ready.clear();
    }

    fn schedule(&mut self, _ctx: &mut SchedCtx<'_>) -> Option<VmId> {
        self.ready.first().map(|(_, vm)| *vm)
    }

    fn yield_current(&mut self, ctx: &mut SchedCtx<'_>) {
        if let Some(vm) = ctx.current() {
            let key = Self::key(ctx, vm);
            self.update(ctx, |r| {
                r.remove(&key);
            });
        }
    }

    fn block(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        let key = Self::key(ctx, vcpu);
        self.update(ctx, |r| {
            r.insert(key);
        });
    }

    fn unblock(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        let key = Self::key(ctx, vcpu);
        self.update(ctx, |r| {
            r.insert(key);
        });
    }

    fn allocate(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) -> Result<SchedState, String> {
        let p: FpParam = ctx.param(vcpu).decode()?;
        Ok(Box::new(FpState { priority: p.priority }))
    }

    fn enque(&mut self, ctx: &mut SchedCtx<'_>, vcpu: VmId) {
        let key = Self::key(ctx, vcpu);
        self.ready.insert(key);
    }
}

pub(super) struct FpPlugin;

impl SchedulerPlugin for FpPlugin {
    fn validate(&self, spec: &SchedulerSpec, vms: &[VmId]) -> Result<(), String> {
        if spec.quantum_ns.is_some() {
            return Err("fp: quantum_ns is not an fp parameter".into());
        }
        super::each_param(spec, vms, |_, _: FpParam| Ok(()))
    }

    fn build(&self, _spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String> {
        Ok(Box::new(Fp::new()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::{CheckpointKind, Dispatch, Framework};
    use crate::model::{SchedParam, VcpuRecord};
    use crate::time::Time;

    fn framework(prios: &[i64]) -> Framework {
        let vcpus = prios
            .iter()
            .enumerate()
            .map(|(i, &p)| VcpuRecord::new(VmId(i as u32), SchedParam::encode(&FpParam { priority: p })))
            .collect();
        let mut fw = Framework::new(Box::new(Fp::new()));
        fw.init(vcpus, Time::ZERO).unwrap();
        fw.set_reschedule_flag(Time::ZERO).unwrap();
        fw
    }

    const CP: CheckpointKind = CheckpointKind::EndOfHypCall;

    #[test]
    fn most_urgent_wins() {
        let mut fw = framework(&[2, 1]);
        assert_eq!(fw.checkpoint(CP, Time::ZERO).unwrap().switched_in(), Some(VmId(1)));
    }

    #[test]
    fn ties_broken_by_id() {
        let mut fw = framework(&[1, 1]);
        assert_eq!(fw.checkpoint(CP, Time::ZERO).unwrap().switched_in(), Some(VmId(0)));
    }

    // A yields -> B runs; A wakes -> flag set, A preempts at the checkpoint.
    #[test]
    fn yield_and_wakeup_timeline() {
        let mut fw = framework(&[1, 2]);
        fw.checkpoint(CP, Time::ZERO).unwrap();
        fw.on_vm_sleep(VmId(0), Time::from_ms(1)).unwrap();
        assert!(fw.flag().is_set());
        assert_eq!(fw.checkpoint(CP, Time::from_ms(1)).unwrap().switched_in(), Some(VmId(1)));
        fw.on_vm_wakeup(VmId(0), Time::from_ms(2)).unwrap();
        assert!(fw.flag().is_set());
        assert_eq!(
            fw.checkpoint(CheckpointKind::EndOfPhysicalInterrupt, Time::from_ms(2)).unwrap(),
            Dispatch::Switched { from: Some(VmId(1)), to: Some(VmId(0)) }
        );
    }

    #[test]
    fn waking_less_urgent_vm_does_not_flag() {
        let mut fw = framework(&[1, 2]);
        fw.checkpoint(CP, Time::ZERO).unwrap();
        fw.on_vm_sleep(VmId(0), Time::ZERO).unwrap();
        fw.checkpoint(CP, Time::ZERO).unwrap(); // vm1 runs
        fw.on_vm_sleep(VmId(1), Time::ZERO).unwrap();
        fw.checkpoint(CP, Time::ZERO).unwrap(); // idle
        fw.on_vm_wakeup(VmId(0), Time::ZERO).unwrap();
        fw.checkpoint(CP, Time::ZERO).unwrap(); // vm0 runs
        fw.on_vm_wakeup(VmId(1), Time::ZERO).unwrap();
        assert!(!fw.flag().is_set());
    }

    #[test]
    fn nothing_ready_schedules_none() {
        let mut fw = framework(&[1]);
        fw.checkpoint(CP, Time::ZERO).unwrap();
        fw.on_vm_sleep(VmId(0), Time::ZERO).unwrap();
        assert_eq!(
            fw.checkpoint(CP, Time::ZERO).unwrap(),
            Dispatch::Switched { from: Some(VmId(0)), to: None }
        );
    }
}
