//! Inter-VM channels: shared 4 KB pages plus an agreed virtual interrupt
//! for notification.
//!
//! Two variants. `FreeAccess` maps the pages into both endpoints at boot
//! and never involves the hypervisor for data access. `HypcallGated`
//! keeps the pages unmapped; a VM acquires the channel with a hyp call
//! that edits its stage-2 table (and flushes the TLB), and releases it
//! the same way.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::memmap::{MapError, MapMode, RegionMap};
use crate::model::{
    Charge, ChannelId, ChannelSpec, ChannelVariant, CostField, CostModel, IrqId, PageId, SystemSpec, VmId, PAGE_SIZE,
};
use crate::time::Time;
use crate::vgic::{Injection, Vgic, VgicError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateState {
    Available,
    HeldBy(VmId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Channel {
    pub spec: ChannelSpec,
    pub gate: GateState,
}

impl Channel {
    fn peer(&self, vm: VmId) -> Option<(VmId, IrqId)> {
        match self.spec.endpoints {
            [a, b] if a == vm => Some((b, self.spec.virqs[1])),
            [a, b] if b == vm => Some((a, self.spec.virqs[0])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IvcError {
    #[error("unknown channel {0}")]
    UnknownChannel(ChannelId),
    #[error("{vm} is not an endpoint of channel {channel}")]
    NotEndpoint { channel: ChannelId, vm: VmId },
    #[error("channel {channel} busy, held by {holder}")]
    Busy { channel: ChannelId, holder: VmId },
    #[error("{vm} does not hold channel {channel}")]
    NotHolder { channel: ChannelId, vm: VmId },
    #[error(transparent)]
    Vgic(#[from] VgicError),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notified {
    pub target: VmId,
    pub virq: IrqId,
    pub injection: Injection,
    /// Hyp call for the notification, then the virtual interrupt.
    pub charges: [Charge; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IvcHub {
    channels: BTreeMap<ChannelId, Channel>,
}

impl IvcHub {
    pub fn from_spec(spec: &SystemSpec) -> Self {
        IvcHub {
            channels: spec.channels.iter().map(|c| (c.id, Channel { spec: c.clone(), gate: GateState::Available })).collect(),
        }
    }

    /// Pages that must start unmapped because a gated channel guards them.
    pub fn gated_pages(spec: &SystemSpec) -> Vec<PageId> {
        spec.channels
            .iter()
            .filter(|c| c.variant == ChannelVariant::HypcallGated)
            .flat_map(|c| c.pages.iter().copied())
            .collect()
    }

    pub fn channel(&self, id: ChannelId) -> Result<&Channel, IvcError> {
        self.channels.get(&id).ok_or(IvcError::UnknownChannel(id))
    }

    fn endpoint(&self, id: ChannelId, vm: VmId) -> Result<&Channel, IvcError> {
        let ch = self.channel(id)?;
        if ch.spec.endpoints.contains(&vm) {
            Ok(ch)
        } else {
            Err(IvcError::NotEndpoint { channel: id, vm })
        }
    }

    /// `from` signals the other endpoint.
    pub fn notify(&self, id: ChannelId, from: VmId, vgic: &mut Vgic, cost: &CostModel) -> Result<Notified, IvcError> {
        let (target, virq) = self.endpoint(id, from)?.peer(from).expect("endpoint has a peer");
        let injection = vgic.inject_virtual_irq(target, virq)?;
        Ok(Notified {
            target,
            virq,
            injection,
            charges: [cost.charge(CostField::HypCall), cost.charge(CostField::VirtualInterrupt)],
        })
    }

    /// Takes the gate and maps the channel's pages into `vm`. A no-op
    /// returning no charges on a free-access channel.
    pub fn acquire(&mut self, id: ChannelId, vm: VmId, mem: &mut RegionMap, cost: &CostModel) -> Result<Vec<Charge>, IvcError> {
        let ch = self.endpoint(id, vm)?;
        if ch.spec.variant == ChannelVariant::FreeAccess {
            return Ok(Vec::new());
        }
        if let GateState::HeldBy(holder) = ch.gate {
            return Err(IvcError::Busy { channel: id, holder });
        }
        let pages = ch
            .spec
            .pages
            .iter()
            .map(|&p| {
                let ipa = mem.declared_ipa(vm, p).ok_or(MapError::Undeclared { vm, page: p })?;
                Ok((ipa, p, crate::model::Perms::RW))
            })
            .collect::<Result<Vec<_>, IvcError>>()?;
        let charges = mem.map_shared_pages(vm, &pages, MapMode::HypCall, cost)?;
        self.channels.get_mut(&id).expect("checked").gate = GateState::HeldBy(vm);
        Ok(charges)
    }

    pub fn release(&mut self, id: ChannelId, vm: VmId, mem: &mut RegionMap, cost: &CostModel) -> Result<Vec<Charge>, IvcError> {
        let ch = self.endpoint(id, vm)?;
        if ch.spec.variant == ChannelVariant::FreeAccess {
            return Ok(Vec::new());
        }
        if ch.gate != GateState::HeldBy(vm) {
            return Err(IvcError::NotHolder { channel: id, vm });
        }
        let charges = mem.unmap_shared_pages(vm, &ch.spec.pages.clone(), MapMode::HypCall, cost)?;
        self.channels.get_mut(&id).expect("checked").gate = GateState::Available;
        Ok(charges)
    }

    /// IPAs `vm` touches to write `bytes` into the channel: the first
    /// address of each page the payload spans, at the page's declared IPA.
    pub fn write_targets(&self, id: ChannelId, vm: VmId, bytes: u64, mem: &RegionMap) -> Result<Vec<u64>, IvcError> {
        let ch = self.endpoint(id, vm)?;
        let n = bytes.div_ceil(PAGE_SIZE).min(ch.spec.pages.len() as u64) as usize;
        Ok(ch.spec.pages[..n]
            .iter()
            .map(|&p| mem.shared_ipa(vm, p).or_else(|| mem.declared_ipa(vm, p)).expect("validated channel page"))
            .collect())
    }
}

/// Hypervisor cost of one reference transfer (acquire, write, release,
/// notify) with `guest_ns` of guest work, under each variant.
pub fn transfer_cost(cost: &CostModel, variant: ChannelVariant, guest_ns: Time) -> Time {
    let free = cost.hyp_call + cost.virtual_interrupt + guest_ns;
    match variant {
        ChannelVariant::FreeAccess => free,
        ChannelVariant::HypcallGated => free + cost.hyp_call + cost.tlb_flush + cost.hyp_call + cost.tlb_flush,
    }
}

/// Solves for the TLB flush cost that makes a gated reference transfer
/// `ratio` times as expensive as a free-access one:
/// `(f + 2(h + t)) / f = ratio` with `f = h + v + g`.
pub fn calibrate_tlb_flush(cost: &CostModel, guest_ns: Time, ratio: f64) -> Result<Time, String> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(format!("ratio must be at least 1, got {ratio}"));
    }
    let f = (cost.hyp_call + cost.virtual_interrupt + guest_ns).as_ns() as f64;
    let t = ((ratio - 1.0) * f - 2.0 * cost.hyp_call.as_ns() as f64) / 2.0;
    if t < 0.0 {
        return Err(format!("ratio {ratio} is below what two hyp calls alone produce"));
    }
    Ok(Time::from_ns(t.round() as u64))
}
