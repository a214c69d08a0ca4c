//! GICv2-subset interrupt virtualization.
//!
//! The Distributor has no virtualization support, so guest accesses to it
//! trap and are emulated here against [`DistributorState`]. Delivery to a
//! guest goes through its [`VirtualCpuInterface`]: the hypervisor fills a
//! list register, and the guest acknowledges and EOIs it without trapping.
//! A list register linked to a physical interrupt forwards the guest's EOI
//! to the physical interrupt's active state.
//!
//! Modeled distributor registers (32-bit accesses only):
//!
//! | offset        | register    | behaviour                               |
//! |---------------|-------------|-----------------------------------------|
//! | 0x000         | CTLR        | per-VM enable bit                       |
//! | 0x100..0x10c  | ISENABLER*n*| write-1-to-set enable                   |
//! | 0x180..0x18c  | ICENABLER*n*| write-1-to-clear enable                 |
//! | 0x200..0x20c  | ISPENDR*n*  | write-1-to-set pending                  |
//! | 0x280..0x28c  | ICPENDR*n*  | write-1-to-clear pending                |
//! | 0x400..0x47c  | IPRIORITYR*n* | one priority byte per interrupt       |
//! | 0x800..0x87c  | ITARGETSR*n*| read-only, reflects static assignment   |
//!
//! A VM sees and changes only the interrupts assigned to it; everything
//! else reads as zero and ignores writes.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{IrqId, SystemSpec, UnmodeledMmio, VmId};

pub const NUM_IRQS: usize = 128;
/// IDs below this are SGIs: reserved, never pending.
pub const SGI_LIMIT: IrqId = 16;
pub const SPURIOUS_IRQ: IrqId = 1023;
pub const DEFAULT_PRIORITY: u8 = 0xa0;
/// Running priority when no interrupt is active.
pub const IDLE_PRIORITY: u8 = 0xff;

pub mod regs {
    pub const CTLR: u32 = 0x000;
    pub const ISENABLER: u32 = 0x100;
    pub const ICENABLER: u32 = 0x180;
    pub const ISPENDR: u32 = 0x200;
    pub const ICPENDR: u32 = 0x280;
    pub const IPRIORITYR: u32 = 0x400;
    pub const ITARGETSR: u32 = 0x800;
}

const BIT_WORDS: u32 = (super::vgic::NUM_IRQS / 32) as u32;
const BYTE_WORDS: u32 = (super::vgic::NUM_IRQS / 4) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reg {
    Ctlr,
    SetEnable(u32),
    ClearEnable(u32),
    SetPending(u32),
    ClearPending(u32),
    Priority(u32),
    Targets(u32),
}

fn decode(offset: u32) -> Option<Reg> {
    if offset % 4 != 0 {
        return None;
    }
    let in_bank = |base: u32, words: u32| {
        (offset >= base && offset < base + 4 * words).then(|| (offset - base) / 4)
    };
    if offset == regs::CTLR {
        return Some(Reg::Ctlr);
    }
    in_bank(regs::ISENABLER, BIT_WORDS)
        .map(Reg::SetEnable)
        .or_else(|| in_bank(regs::ICENABLER, BIT_WORDS).map(Reg::ClearEnable))
        .or_else(|| in_bank(regs::ISPENDR, BIT_WORDS).map(Reg::SetPending))
        .or_else(|| in_bank(regs::ICPENDR, BIT_WORDS).map(Reg::ClearPending))
        .or_else(|| in_bank(regs::IPRIORITYR, BYTE_WORDS).map(Reg::Priority))
        .or_else(|| in_bank(regs::ITARGETSR, BYTE_WORDS).map(Reg::Targets))
}

/// True if `offset` names a modeled distributor register.
pub fn is_modeled_offset(offset: u32) -> bool {
    decode(offset).is_some()
}

/// Global distributor state. The enable bit of CTLR is banked per VM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistributorState {
    pub ctlr_enable: Vec<bool>,
    pub enabled: [bool; NUM_IRQS],
    pub pending: [bool; NUM_IRQS],
    pub active: [bool; NUM_IRQS],
    pub priority: [u8; NUM_IRQS],
    pub target: [Option<VmId>; NUM_IRQS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrState {
    Invalid,
    Pending,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListRegister {
    pub virq: IrqId,
    pub priority: u8,
    pub state: LrState,
    pub hw_link: Option<IrqId>,
}

impl ListRegister {
    const EMPTY: ListRegister = ListRegister { virq: 0, priority: 0, state: LrState::Invalid, hw_link: None };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualCpuInterface {
    pub list_registers: Vec<ListRegister>,
    pub ack_count: u64,
    pub eoi_count: u64,
    /// Virtual-only interrupts waiting for a free list register, by
    /// (priority, id).
    overflow: BTreeSet<(u8, IrqId)>,
}

impl VirtualCpuInterface {
    fn new(lr_count: usize) -> Self {
        VirtualCpuInterface {
            list_registers: vec![ListRegister::EMPTY; lr_count],
            ack_count: 0,
            eoi_count: 0,
            overflow: BTreeSet::new(),
        }
    }

    pub fn running_priority(&self) -> u8 {
        self.list_registers
            .iter()
            .filter(|lr| lr.state == LrState::Active)
            .map(|lr| lr.priority)
            .min()
            .unwrap_or(IDLE_PRIORITY)
    }

    pub fn active_count(&self) -> usize {
        self.list_registers.iter().filter(|lr| lr.state == LrState::Active).count()
    }

    pub fn has_pending(&self) -> bool {
        self.list_registers.iter().any(|lr| lr.state == LrState::Pending)
    }

    fn holds(&self, virq: IrqId) -> Option<&ListRegister> {
        self.list_registers.iter().find(|lr| lr.state != LrState::Invalid && lr.virq == virq)
    }

    fn free_slot(&mut self) -> Option<&mut ListRegister> {
        self.list_registers.iter_mut().find(|lr| lr.state == LrState::Invalid)
    }

    pub fn queued_virtual(&self) -> impl Iterator<Item = IrqId> + '_ {
        self.overflow.iter().map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmioResult {
    Read(u32),
    Written,
    /// Unmodeled register; the VM receives a fault.
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmioAccess {
    pub result: MmioResult,
    /// Interrupts that reached a list register of the accessing VM as a
    /// consequence of the write.
    pub filled: Vec<IrqId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Reserved,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arrival {
    /// Placed in a list register of `vm`.
    Injected { vm: VmId },
    /// Held pending in the distributor (disabled, still active, or no
    /// free list register).
    Pending { vm: VmId },
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Filled,
    /// Waiting for a free list register.
    Queued,
    /// Already pending; merged with the existing instance.
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VgicError {
    #[error("virtual interrupt {virq} not declared for {vm}")]
    UndeclaredVirq { vm: VmId, virq: IrqId },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VgicWarning {
    #[error("EOI of interrupt {irq} by {vm}, which has no active list register for it")]
    EoiNotActive { vm: VmId, irq: IrqId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vgic {
    dist: DistributorState,
    cpus: Vec<VirtualCpuInterface>,
    declared_virqs: Vec<BTreeSet<IrqId>>,
    unmodeled: UnmodeledMmio,
}

impl Vgic {
    /// Boot state: every assigned interrupt enabled at default priority,
    /// every VM's distributor enabled.
    pub fn new(vm_count: usize, lr_count: usize, unmodeled: UnmodeledMmio) -> Self {
        assert!(lr_count > 0, "at least one list register");
        Vgic {
            dist: DistributorState {
                ctlr_enable: vec![true; vm_count],
                enabled: [false; NUM_IRQS],
                pending: [false; NUM_IRQS],
                active: [false; NUM_IRQS],
                priority: [DEFAULT_PRIORITY; NUM_IRQS],
                target: [None; NUM_IRQS],
            },
            cpus: (0..vm_count).map(|_| VirtualCpuInterface::new(lr_count)).collect(),
            declared_virqs: vec![BTreeSet::new(); vm_count],
            unmodeled,
        }
    }

    pub fn from_spec(spec: &SystemSpec) -> Self {
        let mut v = Vgic::new(spec.vm_count(), spec.options.lr_count, spec.options.unmodeled_mmio);
        for vm in &spec.vms {
            for &irq in &vm.irqs {
                v.assign(irq, vm.id);
            }
            for &virq in &vm.virqs {
                v.declare_virq(vm.id, virq);
            }
        }
        v
    }

    /// Routes physical interrupt `irq` to `vm` and enables it.
    pub fn assign(&mut self, irq: IrqId, vm: VmId) {
        assert!(irq >= SGI_LIMIT && (irq as usize) < NUM_IRQS, "assignable interrupt id");
        self.dist.target[irq as usize] = Some(vm);
        self.dist.enabled[irq as usize] = true;
    }

    pub fn declare_virq(&mut self, vm: VmId, virq: IrqId) {
        self.declared_virqs[vm.index()].insert(virq);
    }

    pub fn distributor(&self) -> &DistributorState {
        &self.dist
    }

    pub fn cpu(&self, vm: VmId) -> &VirtualCpuInterface {
        &self.cpus[vm.index()]
    }

    fn owns(&self, vm: VmId, irq: u32) -> bool {
        (irq as usize) < NUM_IRQS && self.dist.target[irq as usize] == Some(vm)
    }

    /// Emulates one trapped 32-bit distributor access by `vm`.
    pub fn dist_mmio_access(&mut self, vm: VmId, offset: u32, is_write: bool, value: u32) -> MmioAccess {
        let Some(reg) = decode(offset) else {
            let result = match (self.unmodeled, is_write) {
                (UnmodeledMmio::Fault, _) => MmioResult::Fault,
                (UnmodeledMmio::Ignore, false) => MmioResult::Read(0),
                (UnmodeledMmio::Ignore, true) => MmioResult::Written,
            };
            return MmioAccess { result, filled: Vec::new() };
        };
        if !is_write {
            return MmioAccess { result: MmioResult::Read(self.read(vm, reg)), filled: Vec::new() };
        }
        self.write(vm, reg, value);
        let filled = self.deliver(vm);
        MmioAccess { result: MmioResult::Written, filled }
    }

    fn bits(&self, vm: VmId, word: u32, f: impl Fn(usize) -> bool) -> u32 {
        (0..32)
            .filter(|b| {
                let irq = word * 32 + b;
                self.owns(vm, irq) && f(irq as usize)
            })
            .fold(0, |acc, b| acc | 1 << b)
    }

    fn read(&self, vm: VmId, reg: Reg) -> u32 {
        let d = &self.dist;
        match reg {
            Reg::Ctlr => d.ctlr_enable[vm.index()] as u32,
            Reg::SetEnable(n) | Reg::ClearEnable(n) => self.bits(vm, n, |i| d.enabled[i]),
            Reg::SetPending(n) | Reg::ClearPending(n) => self.bits(vm, n, |i| d.pending[i]),
            Reg::Priority(n) => (0..4).fold(0, |acc, k| {
                let irq = n * 4 + k;
                let byte = if self.owns(vm, irq) { d.priority[irq as usize] } else { 0 };
                acc | (byte as u32) << (8 * k)
            }),
            Reg::Targets(n) => (0..4).fold(0, |acc, k| acc | (self.owns(vm, n * 4 + k) as u32) << (8 * k)),
        }
    }

    fn write(&mut self, vm: VmId, reg: Reg, value: u32) {
        let mut each_bit = |n: u32, f: &mut dyn FnMut(&mut DistributorState, usize)| {
            for b in 0..32 {
                let irq = n * 32 + b;
                if value & (1 << b) != 0 && self.dist.target.get(irq as usize) == Some(&Some(vm)) {
                    f(&mut self.dist, irq as usize);
                }
            }
        };
        match reg {
            Reg::Ctlr => self.dist.ctlr_enable[vm.index()] = value & 1 != 0,
            Reg::SetEnable(n) => each_bit(n, &mut |d, i| d.enabled[i] = true),
            Reg::ClearEnable(n) => each_bit(n, &mut |d, i| d.enabled[i] = false),
            Reg::SetPending(n) => each_bit(n, &mut |d, i| d.pending[i] = true),
            Reg::ClearPending(n) => each_bit(n, &mut |d, i| d.pending[i] = false),
            Reg::Priority(n) => {
                for k in 0..4 {
                    let irq = n * 4 + k;
                    if self.owns(vm, irq) {
                        self.dist.priority[irq as usize] = (value >> (8 * k)) as u8;
                    }
                }
            }
            Reg::Targets(_) => {}
        }
    }

    /// Moves deliverable interrupts of `vm` into free list registers in
    /// (priority, id) order. Returns the IDs placed.
    fn deliver(&mut self, vm: VmId) -> Vec<IrqId> {
        let mut filled = Vec::new();
        loop {
            if self.cpus[vm.index()].free_slot().is_none() {
                break;
            }
            let d = &self.dist;
            let hw = if d.ctlr_enable[vm.index()] {
                (SGI_LIMIT as usize..NUM_IRQS)
                    .filter(|&i| d.target[i] == Some(vm) && d.pending[i] && d.enabled[i] && !d.active[i])
                    .map(|i| (d.priority[i], i as IrqId))
                    .min()
            } else {
                None
            };
            let cpu = &self.cpus[vm.index()];
            let virt = cpu.overflow.iter().find(|(_, v)| cpu.holds(*v).is_none()).copied();
            let (priority, irq, hw_link) = match (hw, virt) {
                (Some(h), Some(v)) if v < h => (v.0, v.1, None),
                (Some(h), _) => (h.0, h.1, Some(h.1)),
                (None, Some(v)) => (v.0, v.1, None),
                (None, None) => break,
            };
            match hw_link {
                Some(i) => {
                    self.dist.pending[i as usize] = false;
                    self.dist.active[i as usize] = true;
                }
                None => {
                    self.cpus[vm.index()].overflow.remove(&(priority, irq));
                }
            }
            let slot = self.cpus[vm.index()].free_slot().expect("checked above");
            *slot = ListRegister { virq: irq, priority, state: LrState::Pending, hw_link };
            filled.push(irq);
        }
        filled
    }

    /// A physical interrupt reached the hypervisor.
    pub fn physical_irq_arrival(&mut self, irq: IrqId) -> Arrival {
        if irq < SGI_LIMIT {
            return Arrival::Dropped(DropReason::Reserved);
        }
        let Some(vm) = self.dist.target.get(irq as usize).copied().flatten() else {
            return Arrival::Dropped(DropReason::Unassigned);
        };
        self.dist.pending[irq as usize] = true;
        if self.deliver(vm).contains(&irq) {
            Arrival::Injected { vm }
        } else {
            Arrival::Pending { vm }
        }
    }

    /// Guest reads the acknowledge register: the most urgent pending list
    /// register becomes active.
    pub fn guest_ack(&mut self, vm: VmId) -> IrqId {
        let cpu = &mut self.cpus[vm.index()];
        let best = cpu
            .list_registers
            .iter_mut()
            .filter(|lr| lr.state == LrState::Pending)
            .min_by_key(|lr| (lr.priority, lr.virq));
        match best {
            Some(lr) => {
                lr.state = LrState::Active;
                cpu.ack_count += 1;
                lr.virq
            }
            None => SPURIOUS_IRQ,
        }
    }

    /// Guest end-of-interrupt. Frees the list register, forwards to the
    /// physical interrupt if linked, and refills from pending interrupts.
    pub fn guest_eoi(&mut self, vm: VmId, irq: IrqId) -> Result<Vec<IrqId>, VgicWarning> {
        let cpu = &mut self.cpus[vm.index()];
        let lr = cpu
            .list_registers
            .iter_mut()
            .find(|lr| lr.state == LrState::Active && lr.virq == irq)
            .ok_or(VgicWarning::EoiNotActive { vm, irq })?;
        let hw = lr.hw_link;
        *lr = ListRegister::EMPTY;
        cpu.eoi_count += 1;
        if let Some(p) = hw {
            self.dist.active[p as usize] = false;
        }
        Ok(self.deliver(vm))
    }

    /// Hypervisor-originated virtual interrupt (no physical source).
    pub fn inject_virtual_irq(&mut self, vm: VmId, virq: IrqId) -> Result<Injection, VgicError> {
        if !self.declared_virqs[vm.index()].contains(&virq) {
            return Err(VgicError::UndeclaredVirq { vm, virq });
        }
        let cpu = &mut self.cpus[vm.index()];
        let lr_pending = cpu.holds(virq).is_some_and(|lr| lr.state == LrState::Pending);
        if lr_pending || cpu.overflow.iter().any(|(_, v)| *v == virq) {
            return Ok(Injection::Collapsed);
        }
        cpu.overflow.insert((DEFAULT_PRIORITY, virq));
        if self.deliver(vm).contains(&virq) {
            Ok(Injection::Filled)
        } else {
            Ok(Injection::Queued)
        }
    }

    /// Register readback of every modeled offset as `vm` sees it.
    pub fn register_view(&self, vm: VmId) -> Vec<(u32, u32)> {
        modeled_offsets().map(|off| (off, self.read(vm, decode(off).expect("modeled")))).collect()
    }
}

/// Every modeled register offset.
pub fn modeled_offsets() -> impl Iterator<Item = u32> {
    std::iter::once(regs::CTLR)
        .chain([regs::ISENABLER, regs::ICENABLER, regs::ISPENDR, regs::ICPENDR].into_iter().flat_map(|b| (0..BIT_WORDS).map(move |n| b + 4 * n)))
        .chain([regs::IPRIORITYR, regs::ITARGETSR].into_iter().flat_map(|b| (0..BYTE_WORDS).map(move |n| b + 4 * n)))
}
