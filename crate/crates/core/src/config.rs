//! JSON system manifest: parsing, strict validation, serialization.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{
    ChannelId, IrqSource, PageId, Segment, SystemSpec, VmId, GICD_WINDOW, PAGE_SIZE,
};
use crate::schedulers::SchedulerRegistry;
use crate::vgic::{NUM_IRQS, SGI_LIMIT, SPURIOUS_IRQ};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{field}: not 4KB aligned")]
    Misaligned { field: String },
    #[error("PA overlap between {a} and {b}: {detail}")]
    PaOverlap { a: VmId, b: VmId, detail: String },
    #[error("IRQ {irq} assigned to both {a} and {b}")]
    IrqOverlap { irq: u32, a: VmId, b: VmId },
    #[error("scheduler: {0}")]
    Scheduler(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

/// Parses and validates a manifest against the built-in schedulers.
pub fn load_config(text: &str) -> Result<SystemSpec, ConfigError> {
    load_config_with(text, &SchedulerRegistry::default())
}

pub fn load_config_with(text: &str, registry: &SchedulerRegistry) -> Result<SystemSpec, ConfigError> {
    let spec: SystemSpec = serde_json::from_str(text)
        .map_err(|e| ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    validate(&spec, registry)?;
    Ok(spec)
}

pub fn to_json(spec: &SystemSpec) -> String {
    serde_json::to_string_pretty(spec).expect("system spec serializes")
}

fn aligned(v: u64) -> bool {
    v % PAGE_SIZE == 0
}

fn overlap(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

pub fn validate(spec: &SystemSpec, registry: &SchedulerRegistry) -> Result<(), ConfigError> {
    validate_options(spec)?;
    let pages = validate_shared_pages(spec)?;
    for (i, vm) in spec.vms.iter().enumerate() {
        if vm.id != VmId(i as u32) {
            return Err(invalid(format!("vms[{i}].id"), format!("expected {i}; ids must be dense and in order")));
        }
        validate_vm_space(spec, i, &pages)?;
    }
    validate_pa_partition(spec, &pages)?;
    validate_irqs(spec)?;
    validate_channels(spec, &pages)?;
    validate_interrupt_sources(&spec.interrupts)?;
    for (i, vm) in spec.vms.iter().enumerate() {
        validate_workload(spec, i, vm.id)?;
    }
    let ids: Vec<VmId> = spec.vm_ids().collect();
    registry.validate(&spec.scheduler, &ids).map_err(ConfigError::Scheduler)
}

fn validate_options(spec: &SystemSpec) -> Result<(), ConfigError> {
    let o = &spec.options;
    if !(1..=16).contains(&o.lr_count) {
        return Err(invalid("options.lr_count", "must be between 1 and 16"));
    }
    if !aligned(o.gicd_base) {
        return Err(ConfigError::Misaligned { field: "options.gicd_base".into() });
    }
    Ok(())
}

fn validate_shared_pages(spec: &SystemSpec) -> Result<BTreeMap<PageId, u64>, ConfigError> {
    let mut pages = BTreeMap::new();
    for (i, p) in spec.shared_pages.iter().enumerate() {
        if !aligned(p.pa) {
            return Err(ConfigError::Misaligned { field: format!("shared_pages[{i}].pa") });
        }
        if pages.insert(p.id, p.pa).is_some() {
            return Err(invalid(format!("shared_pages[{i}].id"), format!("duplicate page id {}", p.id)));
        }
    }
    let mut by_pa: Vec<(u64, PageId)> = pages.iter().map(|(id, pa)| (*pa, *id)).collect();
    by_pa.sort();
    for w in by_pa.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(invalid("shared_pages", format!("pages {} and {} share PA {:#x}", w[0].1, w[1].1, w[0].0)));
        }
    }
    Ok(pages)
}

/// IPA layout of one VM: aligned, non-empty, non-overlapping regions and
/// shared mappings, none inside the distributor window.
fn validate_vm_space(spec: &SystemSpec, i: usize, pages: &BTreeMap<PageId, u64>) -> Result<(), ConfigError> {
    let vm = &spec.vms[i];
    let mut ipa: Vec<((u64, u64), String)> = vec![(
        (spec.options.gicd_base, spec.options.gicd_base + GICD_WINDOW),
        "the distributor window".to_string(),
    )];
    for (j, r) in vm.regions.iter().enumerate() {
        let field = format!("vms[{i}].regions[{j}]");
        if r.len == 0 {
            return Err(invalid(field, "length must be positive"));
        }
        if !aligned(r.ipa) || !aligned(r.pa) || !aligned(r.len) {
            return Err(ConfigError::Misaligned { field });
        }
        if r.ipa.checked_add(r.len).is_none() || r.pa.checked_add(r.len).is_none() {
            return Err(invalid(field, "address range overflows"));
        }
        ipa.push(((r.ipa, r.ipa_end()), field));
    }
    let mut seen = BTreeSet::new();
    for (j, s) in vm.shared.iter().enumerate() {
        let field = format!("vms[{i}].shared[{j}]");
        if !pages.contains_key(&s.page) {
            return Err(invalid(field, format!("undeclared shared page {}", s.page)));
        }
        if !seen.insert(s.page) {
            return Err(invalid(field, format!("page {} mapped twice", s.page)));
        }
        if !aligned(s.ipa) {
            return Err(ConfigError::Misaligned { field });
        }
        ipa.push(((s.ipa, s.ipa + PAGE_SIZE), field));
    }
    for a in 0..ipa.len() {
        for b in a + 1..ipa.len() {
            if overlap(ipa[a].0, ipa[b].0) {
                return Err(invalid(
                    format!("vms[{i}]"),
                    format!("IPA overlap between {} and {}", ipa[b].1, ipa[a].1),
                ));
            }
        }
    }
    for virq in &vm.virqs {
        if *virq < SGI_LIMIT || *virq >= SPURIOUS_IRQ - 3 {
            return Err(invalid(format!("vms[{i}].virqs"), format!("virtual interrupt {virq} outside 16..1020")));
        }
        if vm.irqs.contains(virq) {
            return Err(invalid(format!("vms[{i}].virqs"), format!("{virq} is also a physical interrupt of the VM")));
        }
    }
    Ok(())
}

/// Private PA ranges of distinct VMs are disjoint, and no private range
/// covers a shared page.
fn validate_pa_partition(spec: &SystemSpec, pages: &BTreeMap<PageId, u64>) -> Result<(), ConfigError> {
    let mut iv: Vec<(u64, u64, VmId)> = spec
        .vms
        .iter()
        .flat_map(|vm| vm.regions.iter().map(move |r| (r.pa, r.pa_end(), vm.id)))
        .collect();
    iv.sort();
    for (k, a) in iv.iter().enumerate() {
        for b in iv[k + 1..].iter().take_while(|b| b.0 < a.1) {
            if a.2 != b.2 {
                let (x, y) = if a.2 < b.2 { (a, b) } else { (b, a) };
                return Err(ConfigError::PaOverlap {
                    a: x.2,
                    b: y.2,
                    detail: format!("[{:#x}, {:#x}) and [{:#x}, {:#x})", x.0, x.1, y.0, y.1),
                });
            }
        }
        if let Some((id, pa)) = pages.iter().find(|(_, pa)| overlap((a.0, a.1), (**pa, **pa + PAGE_SIZE))) {
            return Err(invalid(
                format!("{}", a.2),
                format!("private region [{:#x}, {:#x}) covers shared page {id} at {pa:#x}", a.0, a.1),
            ));
        }
    }
    Ok(())
}

fn validate_irqs(spec: &SystemSpec) -> Result<(), ConfigError> {
    let mut owner: BTreeMap<u32, VmId> = BTreeMap::new();
    for (i, vm) in spec.vms.iter().enumerate() {
        for &irq in &vm.irqs {
            if irq < SGI_LIMIT || irq as usize >= NUM_IRQS {
                return Err(invalid(format!("vms[{i}].irqs"), format!("interrupt {irq} outside {SGI_LIMIT}..{NUM_IRQS}")));
            }
            if let Some(prev) = owner.insert(irq, vm.id) {
                return Err(ConfigError::IrqOverlap { irq, a: prev, b: vm.id });
            }
        }
    }
    Ok(())
}

fn validate_channels(spec: &SystemSpec, pages: &BTreeMap<PageId, u64>) -> Result<(), ConfigError> {
    let mut ids = BTreeSet::new();
    let mut page_owner: BTreeMap<PageId, ChannelId> = BTreeMap::new();
    for (i, c) in spec.channels.iter().enumerate() {
        let field = format!("channels[{i}]");
        if !ids.insert(c.id) {
            return Err(invalid(field, format!("duplicate channel id {}", c.id)));
        }
        let [a, b] = c.endpoints;
        if a == b {
            return Err(invalid(field, "endpoints must be distinct"));
        }
        for (k, vm) in c.endpoints.iter().enumerate() {
            let Some(v) = spec.vms.get(vm.index()) else {
                return Err(invalid(field, format!("unknown endpoint {vm}")));
            };
            if !v.virqs.contains(&c.virqs[k]) {
                return Err(invalid(field, format!("virq {} not declared by {vm}", c.virqs[k])));
            }
            for p in &c.pages {
                if !v.shared.iter().any(|s| s.page == *p) {
                    return Err(invalid(field, format!("page {p} not mapped by endpoint {vm}")));
                }
            }
        }
        if c.pages.is_empty() {
            return Err(invalid(field, "a channel needs at least one page"));
        }
        for p in &c.pages {
            if !pages.contains_key(p) {
                return Err(invalid(field, format!("undeclared shared page {p}")));
            }
            if let Some(other) = page_owner.insert(*p, c.id) {
                return Err(invalid(field, format!("page {p} already belongs to channel {other}")));
            }
        }
    }
    // a page outside every channel may only be shared between VMs that
    // opt in; a channel page must not leak to a third VM
    for (i, vm) in spec.vms.iter().enumerate() {
        for s in &vm.shared {
            if let Some(ch) = page_owner.get(&s.page).and_then(|c| spec.channel(*c)) {
                if !ch.endpoints.contains(&vm.id) {
                    return Err(invalid(
                        format!("vms[{i}].shared"),
                        format!("page {} belongs to channel {} which {} is not an endpoint of", s.page, ch.id, vm.id),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn validate_interrupt_sources(sources: &[IrqSource]) -> Result<(), ConfigError> {
    for (i, s) in sources.iter().enumerate() {
        let field = format!("interrupts[{i}]");
        if s.count == 0 {
            return Err(invalid(field, "count must be positive"));
        }
        if s.count > 1 && s.period_ns.is_none_or(|p| p.is_zero()) {
            return Err(invalid(field, "repeated source needs a positive period_ns"));
        }
        if s.irq >= SPURIOUS_IRQ {
            return Err(invalid(field, format!("interrupt id {} out of range", s.irq)));
        }
    }
    Ok(())
}

fn validate_workload(spec: &SystemSpec, i: usize, vm: VmId) -> Result<(), ConfigError> {
    let w = &spec.vms[i].workload;
    for (j, seg) in w.segments.iter().enumerate() {
        let field = || format!("vms[{i}].workload.segments[{j}]");
        let channel = match seg {
            Segment::IvcNotify { channel }
            | Segment::IvcAcquire { channel }
            | Segment::IvcRelease { channel }
            | Segment::IvcWrite { channel, .. } => Some(*channel),
            _ => None,
        };
        if let Some(ch) = channel {
            let Some(c) = spec.channel(ch) else {
                return Err(invalid(field(), format!("unknown channel {ch}")));
            };
            if !c.endpoints.contains(&vm) {
                return Err(invalid(field(), format!("{vm} is not an endpoint of channel {ch}")));
            }
        }
    }
    if w.repeat {
        let progresses = w.segments.iter().any(|s| match s {
            Segment::Compute { ns } => !ns.is_zero(),
            Segment::Wfi => true,
            _ => false,
        });
        if !progresses {
            return Err(invalid(
                format!("vms[{i}].workload"),
                "a repeating workload needs a positive compute segment or a wfi",
            ));
        }
    }
    Ok(())
}
