//! Shared domain vocabulary: VM identity, static resource specifications,
//! per-vCPU runtime records and the hypervisor cost model.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::time::Time;

/// Stage-2 mapping granule.
pub const PAGE_SIZE: u64 = 4096;

/// Dense VM index, assigned from 0 in configuration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub u32);

impl VmId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{}", self.0)
    }
}

/// Interrupt identifier (physical or virtual).
pub type IrqId = u32;

/// Identifier of a hypervisor-owned shared page.
pub type PageId = u32;

/// Identifier of an inter-VM channel.
pub type ChannelId = u32;

/// Serde helpers for addresses: accepted as decimal or `0x` hex strings
/// (plain JSON integers are tolerated), always written as hex strings.
pub(crate) mod hexnum {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn parse(s: &str) -> Result<u64, String> {
        let s = s.trim();
        let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            u64::from_str_radix(&hex.replace('_', ""), 16)
        } else {
            s.replace('_', "").parse::<u64>()
        };
        parsed.map_err(|e| format!("invalid number {s:?}: {e}"))
    }

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(v),
            Raw::Str(s) => parse(&s).map_err(de::Error::custom),
        }
    }
}

/// Names one field of [`CostModel`]; every hypervisor charge in a trace
/// carries one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostField {
    HypCall,
    WorldSwitch,
    InterruptEntryExit,
    VirtualInterrupt,
    TlbFlush,
    MmioEmulation,
}

impl CostField {
    pub const ALL: [CostField; 6] = [
        CostField::HypCall,
        CostField::WorldSwitch,
        CostField::InterruptEntryExit,
        CostField::VirtualInterrupt,
        CostField::TlbFlush,
        CostField::MmioEmulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostField::HypCall => "hyp_call",
            CostField::WorldSwitch => "world_switch",
            CostField::InterruptEntryExit => "interrupt_entry_exit",
            CostField::VirtualInterrupt => "virtual_interrupt",
            CostField::TlbFlush => "tlb_flush",
            CostField::MmioEmulation => "mmio_emulation",
        }
    }

    pub fn from_name(name: &str) -> Option<CostField> {
        CostField::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for CostField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One hypervisor-time charge requested by a subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Charge {
    pub field: CostField,
    pub ns: Time,
}

/// Latencies of the hypervisor's micro-architectural operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub hyp_call: Time,
    pub world_switch: Time,
    pub interrupt_entry_exit: Time,
    pub virtual_interrupt: Time,
    pub tlb_flush: Time,
    pub mmio_emulation: Time,
}

impl CostModel {
    /// Measured latencies of the reference board: 6.58, 25.84, 7.48 and
    /// 29.71 µs. A distributor trap is a Hyp-trap round trip, so MMIO
    /// emulation defaults to the Hyp call cost. The TLB flush cost is not
    /// measured; see [`crate::ivc::calibrate_tlb_flush`].
    pub const fn measured() -> Self {
        CostModel {
            hyp_call: Time::from_ns(6_580),
            world_switch: Time::from_ns(25_840),
            interrupt_entry_exit: Time::from_ns(7_480),
            virtual_interrupt: Time::from_ns(29_710),
            tlb_flush: Time::ZERO,
            mmio_emulation: Time::from_ns(6_580),
        }
    }

    pub const fn zero() -> Self {
        CostModel {
            hyp_call: Time::ZERO,
            world_switch: Time::ZERO,
            interrupt_entry_exit: Time::ZERO,
            virtual_interrupt: Time::ZERO,
            tlb_flush: Time::ZERO,
            mmio_emulation: Time::ZERO,
        }
    }

    pub fn get(&self, field: CostField) -> Time {
        match field {
            CostField::HypCall => self.hyp_call,
            CostField::WorldSwitch => self.world_switch,
            CostField::InterruptEntryExit => self.interrupt_entry_exit,
            CostField::VirtualInterrupt => self.virtual_interrupt,
            CostField::TlbFlush => self.tlb_flush,
            CostField::MmioEmulation => self.mmio_emulation,
        }
    }

    pub fn charge(&self, field: CostField) -> Charge {
        Charge { field, ns: self.get(field) }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::measured()
    }
}

/// Cycle counts reported alongside the measured latencies.
pub const MEASURED_CYCLES: [(CostField, u64); 4] = [
    (CostField::HypCall, 6_000),
    (CostField::WorldSwitch, 23_564),
    (CostField::InterruptEntryExit, 6_824),
    (CostField::VirtualInterrupt, 27_094),
];

/// Clock frequency implied by the measured (time, cycle) pairs, in MHz.
pub const IMPLIED_CLOCK_MHZ: f64 = 912.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub field: &'static str,
    pub time_ns: u64,
    pub cycles: f64,
    pub reference_cycles: Option<u64>,
    /// Relative deviation from the reference cycle count, if any.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub clock_mhz: f64,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.deviation).fold(0.0, f64::max)
    }

    pub fn consistent_within(&self, tolerance: f64) -> bool {
        self.max_deviation() <= tolerance
    }
}

/// Converts each latency to cycles at `clock_mhz` and compares against the
/// reference cycle column where one exists.
pub fn validate_cost_model(cm: &CostModel, clock_mhz: f64) -> Result<CostReport, String> {
    if !(clock_mhz > 0.0 && clock_mhz.is_finite()) {
        return Err(format!("clock must be positive, got {clock_mhz}"));
    }
    let rows = CostField::ALL
        .into_iter()
        .map(|field| {
            let time_ns = cm.get(field).as_ns();
            let cycles = time_ns as f64 * clock_mhz / 1_000.0;
            let reference_cycles =
                MEASURED_CYCLES.iter().find(|(f, _)| *f == field).map(|(_, c)| *c);
            let deviation = reference_cycles
                .filter(|&c| c > 0)
                .map(|c| (cycles - c as f64).abs() / c as f64);
            CostRow { field: field.name(), time_ns, cycles, reference_cycles, deviation }
        })
        .collect();
    Ok(CostReport { clock_mhz, rows })
}

/// Read/write permission set of a mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
}

impl Perms {
    pub const RW: Perms = Perms { read: true, write: true };
    pub const RO: Perms = Perms { read: true, write: false };
    pub const WO: Perms = Perms { read: false, write: true };

    pub fn allows(self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
        }
    }

    fn as_str(self) -> &'static str {
        match (self.read, self.write) {
            (true, true) => "rw",
            (true, false) => "r",
            (false, true) => "w",
            (false, false) => "",
        }
    }
}

impl Serialize for Perms {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Perms {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut p = Perms { read: false, write: false };
        for c in s.chars() {
            match c {
                'r' if !p.read => p.read = true,
                'w' if !p.write => p.write = true,
                _ => return Err(serde::de::Error::custom(format!("invalid perms {s:?}"))),
            }
        }
        if !p.read && !p.write {
            return Err(serde::de::Error::custom("empty perms"));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Read,
    Write,
}

/// A stage-2 region: `len` bytes of IPA space starting at `ipa`, backed by
/// PA starting at `pa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemRegion {
    #[serde(with = "hexnum")]
    pub ipa: u64,
    #[serde(with = "hexnum")]
    pub pa: u64,
    #[serde(with = "hexnum")]
    pub len: u64,
    pub perms: Perms,
}

impl MemRegion {
    pub fn ipa_end(&self) -> u64 {
        self.ipa + self.len
    }

    pub fn pa_end(&self) -> u64 {
        self.pa + self.len
    }
}

/// A hypervisor-owned shared page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedPageSpec {
    pub id: PageId,
    #[serde(with = "hexnum")]
    pub pa: u64,
}

/// A VM's permission to map a shared page, and where.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedMapping {
    pub page: PageId,
    #[serde(with = "hexnum")]
    pub ipa: u64,
    pub perms: Perms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypCallPayload {
    /// Empty round trip.
    #[default]
    Null,
    /// Requests a reschedule (the switch micro-benchmark's hyp call).
    Reschedule,
}

impl HypCallPayload {
    fn is_null(&self) -> bool {
        *self == HypCallPayload::Null
    }
}

/// One step of a deterministic guest script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    Compute {
        ns: Time,
    },
    HypCall {
        #[serde(default, skip_serializing_if = "HypCallPayload::is_null")]
        payload: HypCallPayload,
    },
    Mmio {
        #[serde(with = "hexnum")]
        ipa: u64,
        access: Access,
        #[serde(default, with = "hexnum")]
        value: u64,
    },
    Wfi,
    IvcNotify {
        channel: ChannelId,
    },
    IvcAcquire {
        channel: ChannelId,
    },
    IvcRelease {
        channel: ChannelId,
    },
    IvcWrite {
        channel: ChannelId,
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(default)]
    pub repeat: bool,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl Workload {
    /// A guest that computes forever.
    pub fn busy() -> Self {
        Workload { repeat: true, segments: vec![Segment::Compute { ns: Time::from_ms(1_000) }] }
    }
}

/// Static per-VM configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmSpec {
    pub id: VmId,
    #[serde(default)]
    pub regions: Vec<MemRegion>,
    /// Physical interrupts routed to this VM.
    #[serde(default)]
    pub irqs: BTreeSet<IrqId>,
    /// Software-defined virtual interrupt IDs this VM agrees to receive.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub virqs: BTreeSet<IrqId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared: Vec<SharedMapping>,
    #[serde(default)]
    pub workload: Workload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelVariant {
    /// Shared pages are mapped in both endpoints from boot.
    FreeAccess,
    /// Access is granted per transfer by a hyp call that edits stage-2.
    HypcallGated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub id: ChannelId,
    pub endpoints: [VmId; 2],
    pub pages: Vec<PageId>,
    /// `virqs[i]` is the interrupt delivered to `endpoints[i]`.
    pub virqs: [IrqId; 2],
    pub variant: ChannelVariant,
}

/// External interrupt arrivals: `count` occurrences starting at `at_ns`,
/// `period_ns` apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrqSource {
    pub irq: IrqId,
    pub at_ns: Time,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ns: Option<Time>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub count: u64,
}

fn one() -> u64 {
    1
}

fn is_one(v: &u64) -> bool {
    *v == 1
}

/// Scheduler-owned per-VM parameter blob; only the selected scheduler
/// interprets it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchedParam(pub serde_json::Value);

impl SchedParam {
    pub fn none() -> Self {
        SchedParam(serde_json::Value::Null)
    }

    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_value(self.0.clone()).map_err(|e| e.to_string())
    }

    pub fn encode<T: Serialize>(value: &T) -> Self {
        SchedParam(serde_json::to_value(value).expect("scheduler parameter serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum_ns: Option<Time>,
    /// Keyed by decimal VM id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sched_param: BTreeMap<String, SchedParam>,
}

impl SchedulerSpec {
    pub fn named(name: &str) -> Self {
        SchedulerSpec { name: name.to_string(), quantum_ns: None, sched_param: BTreeMap::new() }
    }

    pub fn param(&self, vm: VmId) -> SchedParam {
        self.sched_param.get(&vm.0.to_string()).cloned().unwrap_or_else(SchedParam::none)
    }

    pub fn set_param(&mut self, vm: VmId, param: SchedParam) {
        self.sched_param.insert(vm.0.to_string(), param);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPolicy {
    /// Deliver a data-abort-like fault to the VM and continue.
    #[default]
    Inject,
    /// Stop the simulation.
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmodeledMmio {
    #[default]
    Fault,
    Ignore,
}

pub const DEFAULT_GICD_BASE: u64 = 0x0800_0000;
pub const GICD_WINDOW: u64 = 0x1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub lr_count: usize,
    pub fault_policy: FaultPolicy,
    pub unmodeled_mmio: UnmodeledMmio,
    /// IPA of the trapped distributor window in every VM.
    #[serde(with = "hexnum")]
    pub gicd_base: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            lr_count: 4,
            fault_policy: FaultPolicy::Inject,
            unmodeled_mmio: UnmodeledMmio::Fault,
            gicd_base: DEFAULT_GICD_BASE,
        }
    }
}

/// A fully validated system description. Construct through
/// [`crate::config::load_config`] or [`SystemSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default)]
    pub cost_model: CostModel,
    pub scheduler: SchedulerSpec,
    pub vms: Vec<VmSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared_pages: Vec<SharedPageSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interrupts: Vec<IrqSource>,
    #[serde(default)]
    pub options: SimOptions,
}

impl SystemSpec {
    pub fn vm_count(&self) -> usize {
        self.vms.len()
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = VmId> + '_ {
        self.vms.iter().map(|v| v.id)
    }

    pub fn channel(&self, id: ChannelId) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn shared_page(&self, id: PageId) -> Option<&SharedPageSpec> {
        self.shared_pages.iter().find(|p| p.id == id)
    }

    /// VM that owns physical interrupt `irq`, if any.
    pub fn irq_owner(&self, irq: IrqId) -> Option<VmId> {
        self.vms.iter().find(|v| v.irqs.contains(&irq)).map(|v| v.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunState {
    Running,
    Ready,
    Blocked,
    Sleeping,
}

impl RunState {
    pub fn name(self) -> &'static str {
        match self {
            RunState::Running => "running",
            RunState::Ready => "ready",
            RunState::Blocked => "blocked",
            RunState::Sleeping => "sleeping",
        }
    }

    pub fn from_name(s: &str) -> Option<RunState> {
        [RunState::Running, RunState::Ready, RunState::Blocked, RunState::Sleeping]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

/// Opaque, scheduler-owned dynamic state attached to a vCPU.
pub type SchedState = Box<dyn Any + Send>;

/// Runtime control block of one VM's virtual CPU.
pub struct VcpuRecord {
    pub id: VmId,
    pub run_state: RunState,
    pub sched_param: SchedParam,
    pub sched_state: Option<SchedState>,
    /// Guest CPU time consumed since the vCPU last became Running.
    pub consumed: Time,
}

impl VcpuRecord {
    pub fn new(id: VmId, sched_param: SchedParam) -> Self {
        VcpuRecord { id, run_state: RunState::Ready, sched_param, sched_state: None, consumed: Time::ZERO }
    }
}

impl fmt::Debug for VcpuRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VcpuRecord")
            .field("id", &self.id)
            .field("run_state", &self.run_state)
            .field("sched_param", &self.sched_param)
            .field("has_state", &self.sched_state.is_some())
            .field("consumed", &self.consumed)
            .finish()
    }
}
