//! Stage-2 address space of each VM.
//!
//! A VM's IPA space holds its static regions, the trapped distributor
//! window, and any shared pages currently mapped. Everything else faults.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    Access, Charge, CostField, CostModel, MemRegion, PageId, Perms, SharedMapping, SystemSpec, VmId, GICD_WINDOW,
    PAGE_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultReason {
    Unmapped,
    Permission,
}

impl FaultReason {
    pub fn name(self) -> &'static str {
        match self {
            FaultReason::Unmapped => "unmapped",
            FaultReason::Permission => "permission",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage2Fault {
    pub vm: VmId,
    pub ipa: u64,
    pub access: Access,
    pub reason: FaultReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    /// Pass-through access.
    Pa(u64),
    /// Access to the distributor window, at this register offset.
    Mmio { offset: u32 },
    Fault(Stage2Fault),
}

/// How a stage-2 edit is performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapMode {
    /// Boot-time or hypervisor-internal edit, free of charge.
    Static,
    /// Requested by the guest through a hyp call; the edit needs a TLB
    /// flush.
    HypCall,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("{vm} has no declared mapping for shared page {page}")]
    Undeclared { vm: VmId, page: PageId },
    #[error("shared page {page} ipa {ipa:#x} not 4KB aligned")]
    Misaligned { page: PageId, ipa: u64 },
    #[error("shared page {page} at ipa {ipa:#x} overlaps an existing mapping of {vm}")]
    Overlap { vm: VmId, page: PageId, ipa: u64 },
    #[error("shared page {page} is not mapped in {vm}")]
    NotMapped { vm: VmId, page: PageId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedEntry {
    pub page: PageId,
    pub pa: u64,
    pub perms: Perms,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct VmMap {
    /// Sorted by IPA.
    regions: Vec<MemRegion>,
    /// Keyed by IPA page base.
    shared: BTreeMap<u64, SharedEntry>,
    declared: BTreeMap<PageId, SharedMapping>,
}

impl VmMap {
    fn region_at(&self, ipa: u64) -> Option<&MemRegion> {
        let i = self.regions.partition_point(|r| r.ipa <= ipa);
        i.checked_sub(1).map(|i| &self.regions[i]).filter(|r| ipa < r.ipa_end())
    }
}

/// A PA interval reachable by some VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaInterval {
    pub start: u64,
    pub end: u64,
    pub shared_page: Option<PageId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    vms: Vec<VmMap>,
    pages: BTreeMap<PageId, u64>,
    gicd_base: u64,
}

impl RegionMap {
    /// Static regions of every VM. Declared shared pages are mapped
    /// unless `unmapped` contains them (pages behind a gated channel start
    /// unmapped).
    pub fn from_spec(spec: &SystemSpec, unmapped: &[PageId]) -> Self {
        let mut m = RegionMap {
            vms: vec![VmMap::default(); spec.vm_count()],
            pages: spec.shared_pages.iter().map(|p| (p.id, p.pa)).collect(),
            gicd_base: spec.options.gicd_base,
        };
        for vm in &spec.vms {
            let map = &mut m.vms[vm.id.index()];
            map.regions = vm.regions.clone();
            map.regions.sort_by_key(|r| r.ipa);
            map.declared = vm.shared.iter().map(|s| (s.page, *s)).collect();
        }
        for vm in &spec.vms {
            for s in &vm.shared {
                if !unmapped.contains(&s.page) {
                    m.map_shared_page(vm.id, s.ipa, s.page, s.perms, MapMode::Static, &CostModel::zero())
                        .expect("validated configuration maps cleanly");
                }
            }
        }
        m
    }

    pub fn gicd_base(&self) -> u64 {
        self.gicd_base
    }

    pub fn translate(&self, vm: VmId, ipa: u64, access: Access) -> Translation {
        let map = &self.vms[vm.index()];
        let fault = |reason| Translation::Fault(Stage2Fault { vm, ipa, access, reason });
        if ipa >= self.gicd_base && ipa < self.gicd_base + GICD_WINDOW {
            return Translation::Mmio { offset: (ipa - self.gicd_base) as u32 };
        }
        if let Some(r) = map.region_at(ipa) {
            return if r.perms.allows(access) { Translation::Pa(r.pa + (ipa - r.ipa)) } else { fault(FaultReason::Permission) };
        }
        let base = ipa & !(PAGE_SIZE - 1);
        match map.shared.get(&base) {
            Some(e) if e.perms.allows(access) => Translation::Pa(e.pa + (ipa - base)),
            Some(_) => fault(FaultReason::Permission),
            None => fault(FaultReason::Unmapped),
        }
    }

    /// Declared IPA of `page` in `vm`.
    pub fn declared_ipa(&self, vm: VmId, page: PageId) -> Option<u64> {
        self.vms[vm.index()].declared.get(&page).map(|s| s.ipa)
    }

    /// Current IPA of `page` in `vm`, if mapped.
    pub fn shared_ipa(&self, vm: VmId, page: PageId) -> Option<u64> {
        self.vms[vm.index()].shared.iter().find(|(_, e)| e.page == page).map(|(ipa, _)| *ipa)
    }

    fn overlaps(&self, vm: VmId, ipa: u64, page: PageId) -> bool {
        let map = &self.vms[vm.index()];
        let end = ipa + PAGE_SIZE;
        let window = ipa < self.gicd_base + GICD_WINDOW && self.gicd_base < end;
        let region = map.regions.iter().any(|r| ipa < r.ipa_end() && r.ipa < end);
        let other = map.shared.get(&ipa).is_some_and(|e| e.page != page);
        window || region || other
    }

    fn edit_charges(mode: MapMode, cost: &CostModel) -> Vec<Charge> {
        match mode {
            MapMode::Static => Vec::new(),
            MapMode::HypCall => vec![cost.charge(CostField::HypCall), cost.charge(CostField::TlbFlush)],
        }
    }

    /// Maps `page` at `ipa` in `vm`, replacing any previous mapping of the
    /// same page.
    pub fn map_shared_page(
        &mut self,
        vm: VmId,
        ipa: u64,
        page: PageId,
        perms: Perms,
        mode: MapMode,
        cost: &CostModel,
    ) -> Result<Vec<Charge>, MapError> {
        self.map_shared_pages(vm, &[(ipa, page, perms)], mode, cost)
    }

    /// Maps several pages as one stage-2 edit: one hyp call and one TLB
    /// flush in [`MapMode::HypCall`].
    pub fn map_shared_pages(
        &mut self,
        vm: VmId,
        pages: &[(u64, PageId, Perms)],
        mode: MapMode,
        cost: &CostModel,
    ) -> Result<Vec<Charge>, MapError> {
        for &(ipa, page, _) in pages {
            if !self.vms[vm.index()].declared.contains_key(&page) || !self.pages.contains_key(&page) {
                return Err(MapError::Undeclared { vm, page });
            }
            if ipa % PAGE_SIZE != 0 {
                return Err(MapError::Misaligned { page, ipa });
            }
            if self.overlaps(vm, ipa, page) {
                return Err(MapError::Overlap { vm, page, ipa });
            }
        }
        for &(ipa, page, perms) in pages {
            let pa = self.pages[&page];
            let map = &mut self.vms[vm.index()];
            map.shared.retain(|_, e| e.page != page);
            map.shared.insert(ipa, SharedEntry { page, pa, perms });
        }
        Ok(Self::edit_charges(mode, cost))
    }

    pub fn unmap_shared_pages(
        &mut self,
        vm: VmId,
        pages: &[PageId],
        mode: MapMode,
        cost: &CostModel,
    ) -> Result<Vec<Charge>, MapError> {
        let map = &mut self.vms[vm.index()];
        if let Some(&page) = pages.iter().find(|p| !map.shared.values().any(|e| e.page == **p)) {
            return Err(MapError::NotMapped { vm, page });
        }
        map.shared.retain(|_, e| !pages.contains(&e.page));
        Ok(Self::edit_charges(mode, cost))
    }

    /// Every PA interval `vm` can currently reach.
    pub fn pa_intervals(&self, vm: VmId) -> Vec<PaInterval> {
        let map = &self.vms[vm.index()];
        map.regions
            .iter()
            .map(|r| PaInterval { start: r.pa, end: r.pa_end(), shared_page: None })
            .chain(map.shared.values().map(|e| PaInterval { start: e.pa, end: e.pa + PAGE_SIZE, shared_page: Some(e.page) }))
            .collect()
    }
}

/// Pairs of intervals from distinct VMs that intersect without being the
/// same shared page. Empty for a correctly partitioned system.
pub fn isolation_violations(map: &RegionMap) -> Vec<(VmId, VmId, PaInterval, PaInterval)> {
    let mut all: Vec<(u64, u64, VmId, PaInterval)> = Vec::new();
    for i in 0..map.vms.len() {
        let vm = VmId(i as u32);
        for iv in map.pa_intervals(vm) {
            all.push((iv.start, iv.end, vm, iv));
        }
    }
    all.sort_by_key(|(s, e, vm, _)| (*s, *e, *vm));
    let mut bad = Vec::new();
    // sweep: compare each interval with the later ones that start before it ends
    for (i, a) in all.iter().enumerate() {
        for b in all[i + 1..].iter().take_while(|b| b.0 < a.1) {
            let same_page = a.3.shared_page.is_some() && a.3.shared_page == b.3.shared_page;
            if a.2 != b.2 && !same_page {
                bad.push((a.2, b.2, a.3, b.3));
            }
        }
    }
    bad
}
