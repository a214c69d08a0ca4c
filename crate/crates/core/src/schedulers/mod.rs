//! Scheduler plugins and the name-keyed registry the configuration's
//! `scheduler.name` field selects from.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::framework::SchedulerTable;
use crate::model::{SchedulerSpec, VmId};

pub mod edf;
pub mod fp;
pub mod rr;

pub use edf::{Edf, EdfParam, EdfState};
pub use fp::{Fp, FpParam, FpState};
pub use rr::{Rr, RrState, DEFAULT_QUANTUM};

/// Builds a [`SchedulerTable`] from configuration and validates the
/// per-VM parameters it will receive.
pub trait SchedulerPlugin: Send + Sync {
    /// Checks the scheduler section against the configured VMs.
    fn validate(&self, spec: &SchedulerSpec, vms: &[VmId]) -> Result<(), String>;

    fn build(&self, spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String>;
}

#[derive(Clone)]
pub struct SchedulerRegistry {
    plugins: BTreeMap<String, Arc<dyn SchedulerPlugin>>,
}

impl SchedulerRegistry {
    pub fn empty() -> Self {
        SchedulerRegistry { plugins: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, plugin: Arc<dyn SchedulerPlugin>) {
        self.plugins.insert(name.to_string(), plugin);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn SchedulerPlugin>> {
        self.plugins.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().map(String::as_str)
    }

    pub fn validate(&self, spec: &SchedulerSpec, vms: &[VmId]) -> Result<(), String> {
        let plugin = self.get(&spec.name).ok_or_else(|| {
            format!(
                "unknown scheduler {:?} (known: {})",
                spec.name,
                self.names().collect::<Vec<_>>().join(", ")
            )
        })?;
        for key in spec.sched_param.keys() {
            let id: u32 = key.parse().map_err(|_| format!("sched_param key {key:?} is not a VM id"))?;
            if !vms.contains(&VmId(id)) {
                return Err(format!("sched_param for unknown vm{id}"));
            }
        }
        plugin.validate(spec, vms)
    }

    pub fn build(&self, spec: &SchedulerSpec) -> Result<Box<dyn SchedulerTable>, String> {
        self.get(&spec.name)
            .ok_or_else(|| format!("unknown scheduler {:?}", spec.name))?
            .build(spec)
    }
}

impl Default for SchedulerRegistry {
    /// `edf`, `fp` and `rr`.
    fn default() -> Self {
        let mut r = SchedulerRegistry::empty();
        r.register("edf", Arc::new(edf::EdfPlugin));
        r.register("fp", Arc::new(fp::FpPlugin));
        r.register("rr", Arc::new(rr::RrPlugin));
        r
    }
}

fn each_param<T: serde::de::DeserializeOwned>(
    spec: &SchedulerSpec,
    vms: &[VmId],
    check: impl Fn(VmId, T) -> Result<(), String>,
) -> Result<(), String> {
    for &vm in vms {
        let p = spec.param(vm);
        if p.0.is_null() {
            return Err(format!("{}: missing sched_param for {vm}", spec.name));
        }
        let v: T = p.decode().map_err(|e| format!("{}: sched_param for {vm}: {e}", spec.name))?;
        check(vm, v)?;
    }
    Ok(())
}
