//! Random operation sequences applied to both [`Vgic`] and the oracle,
//! comparing every observable after each step.

use rand::seq::SliceRandom;
use rand::Rng;

use hypsim::model::{UnmodeledMmio, VmId};
use hypsim::vgic::{modeled_offsets, Arrival, DropReason, Injection, LrState, MmioResult, Vgic};

use super::gic_oracle::{ArrivalOutcome, GicOracle, InLr, InjectOutcome, IRQS};

#[derive(Debug, Clone)]
pub enum Op {
    Mmio { vm: usize, offset: u32, write: bool, value: u32 },
    Arrival(u32),
    Ack(usize),
    Eoi(usize, u32),
    Inject(usize, u32),
}

pub struct Setup {
    pub vms: usize,
    pub lrs: usize,
    pub owners: Vec<(u32, usize)>,
    pub declared: Vec<(usize, u32)>,
}

pub fn random_setup<R: Rng>(rng: &mut R) -> Setup {
    let vms = rng.gen_range(1..=3);
    let lrs = rng.gen_range(1..=4);
    // a narrow id range so that words, priorities and LRs collide often
    let mut ids: Vec<u32> = (16..IRQS).collect();
    ids.shuffle(rng);
    let owners = ids.iter().take(rng.gen_range(0..12)).map(|&i| (i, rng.gen_range(0..vms))).collect();
    let declared = (0..vms).flat_map(|vm| (200..204).filter(|_| rng.gen_bool(0.6)).map(move |v| (vm, v)).collect::<Vec<_>>()).collect();
    Setup { vms, lrs, owners, declared }
}

pub fn random_op<R: Rng>(rng: &mut R, s: &Setup, offsets: &[u32]) -> Op {
    let vm = rng.gen_range(0..s.vms);
    let owned: Vec<u32> = s.owners.iter().filter(|o| o.1 == vm).map(|o| o.0).collect();
    let some_irq = |rng: &mut R| -> u32 {
        if !owned.is_empty() && rng.gen_bool(0.7) {
            *owned.choose(rng).expect("non-empty")
        } else {
            rng.gen_range(0..IRQS + 4)
        }
    };
    match rng.gen_range(0..100) {
        0..=39 => {
            let offset = if rng.gen_bool(0.9) { *offsets.choose(rng).expect("non-empty") } else { rng.gen_range(0..0x1000) };
            let value = match rng.gen_range(0..3) {
                0 => rng.gen(),
                1 => 1u32 << (some_irq(rng) % 32),
                _ => u32::MAX,
            };
            Op::Mmio { vm, offset, write: rng.gen_bool(0.6), value }
        }
        40..=59 => Op::Arrival(if rng.gen_bool(0.85) { some_irq(rng) } else { rng.gen_range(0..16) }),
        60..=74 => Op::Ack(vm),
        75..=89 => Op::Eoi(vm, if rng.gen_bool(0.3) { rng.gen_range(200..204) } else { some_irq(rng) }),
        _ => Op::Inject(vm, rng.gen_range(199..205)),
    }
}

fn lr_view(v: &Vgic, vm: usize) -> Vec<(u32, InLr, bool)> {
    let mut out: Vec<(u32, InLr, bool)> = v
        .cpu(VmId(vm as u32))
        .list_registers
        .iter()
        .filter_map(|lr| match lr.state {
            LrState::Invalid => None,
            LrState::Pending => Some((lr.virq, InLr::Pending, lr.hw_link.is_some())),
            LrState::Active => Some((lr.virq, InLr::Active, lr.hw_link.is_some())),
        })
        .collect();
    out.sort();
    out
}

fn compare_state(v: &Vgic, o: &GicOracle, s: &Setup) -> Result<(), String> {
    let d = v.distributor();
    for irq in 0..IRQS as usize {
        let oi = &o.irqs[irq];
        let got = (d.pending[irq], d.active[irq], d.enabled[irq], d.priority[irq]);
        let want = (oi.pending, oi.lr.is_some(), oi.enabled, oi.priority);
        if got != want {
            return Err(format!("irq {irq}: (pending, active, enabled, prio) {got:?} != {want:?}"));
        }
    }
    for vm in 0..s.vms {
        let view = v.register_view(VmId(vm as u32));
        for (off, val) in view {
            let want = o.read(vm, super::gic_oracle::bank(off).expect("modeled"));
            if val != want {
                return Err(format!("vm{vm} readback at {off:#x}: {val:#x} != {want:#x}"));
            }
        }
        let lrs = lr_view(v, vm);
        if lrs != o.lr_contents(vm) {
            return Err(format!("vm{vm} list registers {lrs:?} != {:?}", o.lr_contents(vm)));
        }
        let cpu = v.cpu(VmId(vm as u32));
        let queued: Vec<u32> = {
            let mut q: Vec<u32> = cpu.queued_virtual().collect();
            q.sort();
            q
        };
        if queued != o.queued(vm) {
            return Err(format!("vm{vm} queued {queued:?} != {:?}", o.queued(vm)));
        }
        if (cpu.ack_count, cpu.eoi_count) != (o.vms[vm].acks, o.vms[vm].eois) {
            return Err(format!("vm{vm} ack/eoi counts differ"));
        }
        if cpu.ack_count - cpu.eoi_count != cpu.active_count() as u64 {
            return Err(format!("vm{vm} ack - eoi != active list registers"));
        }
    }
    Ok(())
}

/// Runs `ops` on both models; the first mismatch is returned.
pub fn run_sequence(s: &Setup, ops: &[Op]) -> Result<(), String> {
    let mut v = Vgic::new(s.vms, s.lrs, UnmodeledMmio::Fault);
    for &(irq, vm) in &s.owners {
        v.assign(irq, VmId(vm as u32));
    }
    for &(vm, virq) in &s.declared {
        v.declare_virq(VmId(vm as u32), virq);
    }
    let mut o = GicOracle::new(s.vms, s.lrs, &s.owners, &s.declared);
    compare_state(&v, &o, s)?;
    for (step, op) in ops.iter().enumerate() {
        let here = |m: String| format!("step {step} {op:?}: {m}");
        match *op {
            Op::Mmio { vm, offset, write, value } => {
                let got = v.dist_mmio_access(VmId(vm as u32), offset, write, value);
                match (got.result, o.mmio(vm, offset, write, value)) {
                    (MmioResult::Fault, Err(())) => {}
                    (MmioResult::Read(x), Ok((Some(y), _))) if x == y => {}
                    (MmioResult::Written, Ok((None, filled))) if filled == got.filled => {}
                    (g, w) => return Err(here(format!("{g:?} / filled {:?} vs {w:?}", got.filled))),
                }
            }
            Op::Arrival(irq) => {
                let got = v.physical_irq_arrival(irq);
                let want = o.arrival(irq);
                let same = matches!(
                    (&got, want),
                    (Arrival::Dropped(DropReason::Reserved), ArrivalOutcome::Reserved)
                        | (Arrival::Dropped(DropReason::Unassigned), ArrivalOutcome::Unassigned)
                ) || matches!((&got, want), (Arrival::Injected { vm }, ArrivalOutcome::Injected(w)) if vm.0 as usize == w)
                    || matches!((&got, want), (Arrival::Pending { vm }, ArrivalOutcome::Pending(w)) if vm.0 as usize == w);
                if !same {
                    return Err(here(format!("{got:?} vs {want:?}")));
                }
            }
            Op::Ack(vm) => {
                let (g, w) = (v.guest_ack(VmId(vm as u32)), o.ack(vm));
                if g != w {
                    return Err(here(format!("ack {g} vs {w}")));
                }
            }
            Op::Eoi(vm, irq) => {
                let g = v.guest_eoi(VmId(vm as u32), irq).ok();
                let w = o.eoi(vm, irq);
                if g != w {
                    return Err(here(format!("eoi {g:?} vs {w:?}")));
                }
            }
            Op::Inject(vm, virq) => {
                let g = v.inject_virtual_irq(VmId(vm as u32), virq);
                let w = o.inject(vm, virq);
                let same = match (&g, w) {
                    (Err(_), Err(())) => true,
                    (Ok(Injection::Filled), Ok(InjectOutcome::Filled))
                    | (Ok(Injection::Queued), Ok(InjectOutcome::Queued))
                    | (Ok(Injection::Collapsed), Ok(InjectOutcome::Collapsed)) => true,
                    _ => false,
                };
                if !same {
                    return Err(here(format!("{g:?} vs {w:?}")));
                }
            }
        }
        compare_state(&v, &o, s).map_err(here)?;
    }
    Ok(())
}

pub fn offsets() -> Vec<u32> {
    modeled_offsets().collect()
}
