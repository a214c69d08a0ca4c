//! Randomized memory layouts and the PA ranges each VM may reach.

use std::collections::BTreeMap;

use hypsim::gen::random_system;
use hypsim::ivc::IvcHub;
use hypsim::memmap::{isolation_violations, FaultReason, RegionMap, Translation};
use hypsim::model::{Access, MemRegion, Perms, Segment, SharedMapping, SharedPageSpec, SystemSpec};
use hypsim::trace::Trace;
use hypsim::vgic::Vgic;
use hypsim::{Time, VmId};

use super::gic_diff::{offsets, random_setup};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PAGE: u64 = 0x1000;

/// A random layout: each VM gets 1-3 private regions carved from a
/// shuffled pool of PA blocks, at random IPAs, plus random shared pages.
pub fn random_layout(seed: u64) -> SystemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = random_system(&mut rng, "rr", Time::from_ms(1));
    spec.channels.clear();
    spec.shared_pages.clear();
    let mut blocks: Vec<u64> = (0..64).map(|i| 0x8000_0000 + i * 0x10_0000).collect();
    blocks.shuffle(&mut rng);
    for vm in &mut spec.vms {
        vm.shared.clear();
        vm.virqs.clear();
        vm.workload.segments.retain(|s| !matches!(s, Segment::IvcNotify { .. }
            | Segment::IvcAcquire { .. } | Segment::IvcRelease { .. }
            | Segment::IvcWrite { .. }));
        vm.workload.segments.push(Segment::Wfi);
        let n = rng.gen_range(1..=3);
        vm.regions = (0..n)
            .map(|k| MemRegion {
                ipa: 0x4000_0000 + k as u64 * 0x20_0000 + rng.gen_range(0..16) * PAGE,
                pa: blocks.pop().unwrap(),
                len: rng.gen_range(1..=256) * PAGE,
                perms: *[Perms::RW, Perms::RO, Perms::WO].choose(&mut rng).unwrap(),
            })
            .collect();
    }
    for id in 0..rng.gen_range(0..4u32) {
        spec.shared_pages.push(SharedPageSpec { id, pa: 0x9000_0000 + id as u64 * PAGE });
        for vm in &mut spec.vms {
            if rng.gen_bool(0.5) {
                let perms = *[Perms::RW, Perms::RO].choose(&mut rng).unwrap();
                vm.shared.push(SharedMapping { page: id, ipa: 0x6000_0000 + id as u64 * 0x10_0000, perms });
            }
        }
    }
    spec
}

/// PA ranges `vm` may reach, from the configuration alone: `(start, end, perms)`.
pub fn allowed(spec: &SystemSpec, vm: VmId) -> Vec<(u64, u64, Perms)> {
    let v = &spec.vms[vm.index()];
    let pages: BTreeMap<u32, u64> = spec.shared_pages.iter().map(|p| (p.id, p.pa)).collect();
    v.regions
        .iter()
        .map(|r| (r.pa, r.pa + r.len, r.perms))
        .chain(v.shared.iter().map(|m| (pages[&m.page], pages[&m.page] + PAGE, m.perms)))
        .collect()
}

pub fn probe_ipas(spec: &SystemSpec, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut ipas: Vec<u64> = Vec::new();
    for v in &spec.vms {
        for r in &v.regions {
            ipas.extend([r.ipa, r.ipa + r.len - 1, r.ipa + r.len, r.ipa.wrapping_sub(1)]);
        }
        for m in &v.shared {
            ipas.extend([m.ipa, m.ipa + PAGE - 1, m.ipa + PAGE]);
        }
    }
    ipas.extend((0..200).map(|_| rng.gen_range(0x3f00_0000..0x6100_0000u64)));
    ipas.extend((0..50).map(|_| rng.gen::<u64>() >> 28));
    ipas
}

/// Translates probe addresses for every VM; every PA reached must lie in
/// the VM's own regions or shared pages with a permitting mapping.
pub fn check_translations(spec: &SystemSpec, seed: u64) -> Result<usize, String> {
    let map = RegionMap::from_spec(spec, &[]);
    if let Some(v) = isolation_violations(&map).first() {
        return Err(format!("interval overlap {v:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ipas = probe_ipas(spec, &mut rng);
    let mut n = 0;
    for vm in spec.vm_ids() {
        let ok = allowed(spec, vm);
        for &ipa in &ipas {
            for access in [Access::Read, Access::Write] {
                n += 1;
                match map.translate(vm, ipa, access) {
                    Translation::Pa(pa) => {
                        let hit = ok.iter().find(|(s, e, _)| (*s..*e).contains(&pa));
                        if !hit.is_some_and(|(_, _, p)| p.allows(access)) {
                            return Err(format!("{vm} reached {pa:#x} via {ipa:#x}"));
                        }
                    }
                    Translation::Mmio { offset } => {
                        if ipa - spec.options.gicd_base != offset as u64 {
                            return Err(format!("{ipa:#x} routed to offset {offset:#x}"));
                        }
                    }
                    Translation::Fault(f) => {
                        if f.vm != vm {
                            return Err(format!("fault attributed to {}", f.vm));
                        }
                        if f.reason == FaultReason::Permission && ok.iter().all(|(_, _, p)| p.allows(access)) {
                            return Err(format!("permission fault at {ipa:#x} with no restricted mapping"));
                        }
                    }
                }
            }
        }
    }
    Ok(n)
}

/// Every guest memory access in a run lands in memory the VM owns or
/// shares, and gated pages are only touched by the current holder.
pub fn check_run_memory(spec: &SystemSpec, trace: &Trace) -> Result<usize, String> {
    let gated = IvcHub::gated_pages(spec);
    let shared_pa: BTreeMap<u64, u32> = spec.shared_pages.iter().map(|p| (p.pa, p.id)).collect();
    let mut holder: Option<VmId> = None;
    let mut n = 0;
    for r in &trace.records {
        match (r.kind.as_str(), r.get("result")) {
            ("ivc_acquire", Some("ok")) if !gated.is_empty() => {
                if holder.is_some() {
                    return Err(format!("overlapping holds at {}", r.time_ns));
                }
                holder = r.vm();
            }
            ("ivc_release", Some("ok")) if !gated.is_empty() => holder = None,
            ("mem_access", _) => {
                n += 1;
                let vm = r.vm().ok_or("mem_access without vm")?;
                let pa = u64::from_str_radix(r.get("pa").ok_or("no pa")?.trim_start_matches("0x"), 16)
                    .map_err(|e| e.to_string())?;
                if !allowed(spec, vm).iter().any(|(s, e, _)| (*s..*e).contains(&pa)) {
                    return Err(format!("{r:?} outside owned memory"));
                }
                if let Some(page) = shared_pa.get(&(pa & !(PAGE - 1))) {
                    if gated.contains(page) && holder != Some(vm) {
                        return Err(format!("{r:?}: gated page touched without holding it"));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(n)
}

/// Random distributor writes by one VM never change another VM's
/// register view or virtual CPU interface.
pub fn check_distributor_writes(seed: u64, writes: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_setup(&mut rng);
    let mut v = Vgic::new(s.vms, s.lrs, Default::default());
    for &(irq, vm) in &s.owners {
        v.assign(irq, VmId(vm as u32));
    }
    let offs = offsets();
    for _ in 0..writes {
        let writer = VmId(rng.gen_range(0..s.vms) as u32);
        let others: Vec<_> = (0..s.vms as u32)
            .map(VmId)
            .filter(|w| *w != writer)
            .map(|w| (w, v.register_view(w), v.cpu(w).clone()))
            .collect();
        let off = *offs.choose(&mut rng).expect("non-empty");
        let value = if rng.gen() { u32::MAX } else { rng.gen() };
        v.dist_mmio_access(writer, off, true, value);
        for (w, view, cpu) in others {
            if v.register_view(w) != view || v.cpu(w) != &cpu {
                return Err(format!("{writer} write at {off:#x} changed {w}"));
            }
        }
    }
    Ok(writes)
}
