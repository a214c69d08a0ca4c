//! Reference model of the emulated distributor built from one small state
//! machine per interrupt. Physical interrupts go inactive -> pending ->
//! (list register) pending -> active -> inactive; virtual interrupts go
//! queued -> (list register) pending -> active -> gone. A VM's list
//! registers are a capacity, not slots.

use std::collections::BTreeMap;

pub const IRQS: u32 = 128;
pub const SPURIOUS: u32 = 1023;
pub const DEFAULT_PRIO: u8 = 0xa0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InLr {
    Pending,
    Active,
}

#[derive(Debug, Clone)]
pub struct PhysIrq {
    pub owner: Option<usize>,
    pub enabled: bool,
    pub pending: bool,
    pub priority: u8,
    /// Set while the interrupt occupies a list register; the priority is
    /// the one it had when it was placed there.
    pub lr: Option<(InLr, u8)>,
}

#[derive(Debug, Clone, Default)]
pub struct VirtIrq {
    pub queued: bool,
    pub lr: Option<InLr>,
}

#[derive(Debug, Clone)]
pub struct VmIface {
    pub ctlr: bool,
    pub capacity: usize,
    pub declared: Vec<u32>,
    pub virt: BTreeMap<u32, VirtIrq>,
    pub acks: u64,
    pub eois: u64,
}

#[derive(Debug, Clone)]
pub struct GicOracle {
    pub irqs: Vec<PhysIrq>,
    pub vms: Vec<VmIface>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bank {
    Ctlr,
    SetEnable(u32),
    ClearEnable(u32),
    SetPending(u32),
    ClearPending(u32),
    Priority(u32),
    Targets(u32),
}

/// Register at `offset`, if modeled.
pub fn bank(offset: u32) -> Option<Bank> {
    if offset % 4 != 0 {
        return None;
    }
    let word = |base: u32, words: u32| (base..base + 4 * words).contains(&offset).then(|| (offset - base) / 4);
    if offset == 0 {
        Some(Bank::Ctlr)
    } else if let Some(n) = word(0x100, 4) {
        Some(Bank::SetEnable(n))
    } else if let Some(n) = word(0x180, 4) {
        Some(Bank::ClearEnable(n))
    } else if let Some(n) = word(0x200, 4) {
        Some(Bank::SetPending(n))
    } else if let Some(n) = word(0x280, 4) {
        Some(Bank::ClearPending(n))
    } else if let Some(n) = word(0x400, 32) {
        Some(Bank::Priority(n))
    } else {
        word(0x800, 32).map(Bank::Targets)
    }
}

/// What an entry in the LR-candidate ordering refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Src {
    Phys,
    Virt,
}

impl GicOracle {
    pub fn new(vm_count: usize, lr_count: usize, owners: &[(u32, usize)], declared: &[(usize, u32)]) -> Self {
        let mut irqs: Vec<PhysIrq> = (0..IRQS)
            .map(|_| PhysIrq { owner: None, enabled: false, pending: false, priority: DEFAULT_PRIO, lr: None })
            .collect();
        for &(irq, vm) in owners {
            irqs[irq as usize].owner = Some(vm);
            irqs[irq as usize].enabled = true;
        }
        let mut vms: Vec<VmIface> = (0..vm_count)
            .map(|_| VmIface { ctlr: true, capacity: lr_count, declared: Vec::new(), virt: BTreeMap::new(), acks: 0, eois: 0 })
            .collect();
        for &(vm, v) in declared {
            vms[vm].declared.push(v);
        }
        GicOracle { irqs, vms }
    }

    fn owns(&self, vm: usize, irq: u32) -> bool {
        irq < IRQS && self.irqs[irq as usize].owner == Some(vm)
    }

    fn occupied(&self, vm: usize) -> usize {
        let phys = self.irqs.iter().filter(|i| i.owner == Some(vm) && i.lr.is_some()).count();
        let virt = self.vms[vm].virt.values().filter(|v| v.lr.is_some()).count();
        phys + virt
    }

    /// Fills free list registers of `vm`, most urgent first.
    pub fn fill(&mut self, vm: usize) -> Vec<u32> {
        let mut placed = Vec::new();
        while self.occupied(vm) < self.vms[vm].capacity {
            let mut cands: Vec<(u8, u32, Src)> = Vec::new();
            if self.vms[vm].ctlr {
                for (id, i) in self.irqs.iter().enumerate() {
                    if id >= 16 && i.owner == Some(vm) && i.pending && i.enabled && i.lr.is_none() {
                        cands.push((i.priority, id as u32, Src::Phys));
                    }
                }
            }
            for (&id, v) in &self.vms[vm].virt {
                if v.queued && v.lr.is_none() {
                    cands.push((DEFAULT_PRIO, id, Src::Virt));
                }
            }
            let Some(&(prio, id, src)) = cands.iter().min() else { break };
            match src {
                Src::Phys => {
                    let i = &mut self.irqs[id as usize];
                    i.pending = false;
                    i.lr = Some((InLr::Pending, prio));
                }
                Src::Virt => {
                    let v = self.vms[vm].virt.get_mut(&id).expect("candidate");
                    v.queued = false;
                    v.lr = Some(InLr::Pending);
                }
            }
            placed.push(id);
        }
        placed
    }

    /// `Some(value)` for reads, `None` for writes; `Err(())` for an
    /// unmodeled offset.
    pub fn mmio(&mut self, vm: usize, offset: u32, write: bool, value: u32) -> Result<(Option<u32>, Vec<u32>), ()> {
        let b = bank(offset).ok_or(())?;
        if !write {
            return Ok((Some(self.read(vm, b)), Vec::new()));
        }
        let bit_irqs = |n: u32| (0..32).filter(move |k| value >> k & 1 == 1).map(move |k| n * 32 + k);
        match b {
            Bank::Ctlr => self.vms[vm].ctlr = value & 1 == 1,
            Bank::SetEnable(n) | Bank::ClearEnable(n) | Bank::SetPending(n) | Bank::ClearPending(n) => {
                for irq in bit_irqs(n) {
                    if self.owns(vm, irq) {
                        let i = &mut self.irqs[irq as usize];
                        match b {
                            Bank::SetEnable(_) => i.enabled = true,
                            Bank::ClearEnable(_) => i.enabled = false,
                            Bank::SetPending(_) => i.pending = true,
                            _ => i.pending = false,
                        }
                    }
                }
            }
            Bank::Priority(n) => {
                for k in 0..4 {
                    if self.owns(vm, 4 * n + k) {
                        self.irqs[(4 * n + k) as usize].priority = (value >> (8 * k)) as u8;
                    }
                }
            }
            Bank::Targets(_) => {}
        }
        Ok((None, self.fill(vm)))
    }

    pub fn read(&self, vm: usize, b: Bank) -> u32 {
        let bits = |n: u32, f: &dyn Fn(&PhysIrq) -> bool| {
            (0..32).filter(|k| self.owns(vm, n * 32 + k) && f(&self.irqs[(n * 32 + k) as usize])).map(|k| 1u32 << k).sum()
        };
        let bytes = |n: u32, f: &dyn Fn(&PhysIrq) -> u8| {
            (0..4).filter(|k| self.owns(vm, 4 * n + k)).map(|k| (f(&self.irqs[(4 * n + k) as usize]) as u32) << (8 * k)).sum()
        };
        match b {
            Bank::Ctlr => self.vms[vm].ctlr as u32,
            Bank::SetEnable(n) | Bank::ClearEnable(n) => bits(n, &|i| i.enabled),
            Bank::SetPending(n) | Bank::ClearPending(n) => bits(n, &|i| i.pending),
            Bank::Priority(n) => bytes(n, &|i| i.priority),
            Bank::Targets(n) => bytes(n, &|_| 1),
        }
    }

    pub fn arrival(&mut self, irq: u32) -> ArrivalOutcome {
        if irq < 16 {
            return ArrivalOutcome::Reserved;
        }
        let Some(vm) = self.irqs.get(irq as usize).and_then(|i| i.owner) else {
            return ArrivalOutcome::Unassigned;
        };
        self.irqs[irq as usize].pending = true;
        if self.fill(vm).contains(&irq) {
            ArrivalOutcome::Injected(vm)
        } else {
            ArrivalOutcome::Pending(vm)
        }
    }

    pub fn ack(&mut self, vm: usize) -> u32 {
        let phys = self
            .irqs
            .iter()
            .enumerate()
            .filter(|(_, i)| i.owner == Some(vm))
            .filter_map(|(id, i)| match i.lr {
                Some((InLr::Pending, p)) => Some((p, id as u32, Src::Phys)),
                _ => None,
            });
        let virt = self.vms[vm].virt.iter().filter(|(_, v)| v.lr == Some(InLr::Pending)).map(|(&id, _)| (DEFAULT_PRIO, id, Src::Virt));
        let Some((_, id, src)) = phys.chain(virt).min() else { return SPURIOUS };
        match src {
            Src::Phys => self.irqs[id as usize].lr.as_mut().expect("in lr").0 = InLr::Active,
            Src::Virt => self.vms[vm].virt.get_mut(&id).expect("in lr").lr = Some(InLr::Active),
        }
        self.vms[vm].acks += 1;
        id
    }

    /// `None` if `irq` is not active in a list register of `vm`.
    pub fn eoi(&mut self, vm: usize, irq: u32) -> Option<Vec<u32>> {
        if self.owns(vm, irq) && matches!(self.irqs[irq as usize].lr, Some((InLr::Active, _))) {
            self.irqs[irq as usize].lr = None;
        } else if self.vms[vm].virt.get(&irq).is_some_and(|v| v.lr == Some(InLr::Active)) {
            self.vms[vm].virt.get_mut(&irq).expect("present").lr = None;
        } else {
            return None;
        }
        self.vms[vm].eois += 1;
        Some(self.fill(vm))
    }

    /// `Err(())` for an undeclared interrupt.
    pub fn inject(&mut self, vm: usize, virq: u32) -> Result<InjectOutcome, ()> {
        if !self.vms[vm].declared.contains(&virq) {
            return Err(());
        }
        let v = self.vms[vm].virt.entry(virq).or_default();
        if v.queued || v.lr == Some(InLr::Pending) {
            return Ok(InjectOutcome::Collapsed);
        }
        v.queued = true;
        Ok(if self.fill(vm).contains(&virq) { InjectOutcome::Filled } else { InjectOutcome::Queued })
    }

    /// `(id, in_lr_state, hardware_linked)` for every list-register entry.
    pub fn lr_contents(&self, vm: usize) -> Vec<(u32, InLr, bool)> {
        let mut out: Vec<(u32, InLr, bool)> = self
            .irqs
            .iter()
            .enumerate()
            .filter(|(_, i)| i.owner == Some(vm))
            .filter_map(|(id, i)| i.lr.map(|(s, _)| (id as u32, s, true)))
            .chain(self.vms[vm].virt.iter().filter_map(|(&id, v)| v.lr.map(|s| (id, s, false))))
            .collect();
        out.sort();
        out
    }

    pub fn queued(&self, vm: usize) -> Vec<u32> {
        self.vms[vm].virt.iter().filter(|(_, v)| v.queued).map(|(&id, _)| id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalOutcome {
    Reserved,
    Unassigned,
    Injected(usize),
    Pending(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectOutcome {
    Filled,
    Queued,
    Collapsed,
}
