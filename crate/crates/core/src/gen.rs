//! Seeded generators: periodic reservation sets and randomized systems.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::{
    Access, ChannelSpec, ChannelVariant, CostModel, HypCallPayload, IrqSource, MemRegion, Perms, SchedParam,
    SchedulerSpec, Segment, SharedMapping, SharedPageSpec, SimOptions, SystemSpec, VmId, VmSpec, Workload,
    DEFAULT_GICD_BASE,
};
use crate::schedulers::{EdfParam, FpParam};
use crate::time::Time;
use crate::vgic::modeled_offsets;

/// Divisors of 600 ms between 1 and 100 ms; any subset has a hyperperiod
/// of at most 600 ms.
pub const PERIODS_MS: [u64; 19] = [1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 24, 25, 30, 40, 50, 60, 75, 100];

/// Base periods of harmonic chains; each chain doubles.
const HARMONIC_BASES_MS: [u64; 4] = [1, 3, 5, 25];

const REGION_IPA: u64 = 0x4000_0000;
const REGION_PA: u64 = 0x4000_0000;
const REGION_LEN: u64 = 0x10_0000;
const SHARED_IPA: u64 = 0x5000_0000;
const SHARED_PA: u64 = 0x9000_0000;
const UNMAPPED_IPA: u64 = 0x7000_0000;
pub const IVC_VIRQ: u32 = 200;

/// Random utilizations summing to `total` (UUniFast).
pub fn uunifast<R: Rng>(rng: &mut R, n: usize, total: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut sum = total;
    for i in 1..n {
        let next = sum * rng.gen::<f64>().powf(1.0 / (n - i) as f64);
        out.push(sum - next);
        sum = next;
    }
    if n > 0 {
        out.push(sum);
    }
    out
}

fn random_periods<R: Rng>(rng: &mut R, n: usize, harmonic: bool) -> Vec<u64> {
    if harmonic {
        let base = *HARMONIC_BASES_MS.choose(rng).expect("non-empty");
        let chain: Vec<u64> = (0..).map(|k| base << k).take_while(|p| PERIODS_MS.contains(p)).collect();
        (0..n).map(|_| *chain.choose(rng).expect("non-empty")).collect()
    } else {
        (0..n).map(|_| *PERIODS_MS.choose(rng).expect("non-empty")).collect()
    }
}

/// `n` reservations with total utilization close to `total`. Budgets are
/// whole microseconds (rounded down, at least 1 µs, at most the period).
pub fn edf_task_set<R: Rng>(rng: &mut R, n: usize, total: f64, harmonic: bool) -> Vec<EdfParam> {
    let periods = random_periods(rng, n, harmonic);
    uunifast(rng, n, total)
        .into_iter()
        .zip(periods)
        .map(|(u, p_ms)| {
            let p_us = p_ms * 1_000;
            let b_us = ((u * p_us as f64).floor() as u64).clamp(1, p_us);
            EdfParam::new(Time::from_ms(p_ms), Time::from_us(b_us))
        })
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn hyperperiod(params: &[EdfParam]) -> Time {
    Time::from_ns(params.iter().fold(1, |h, p| {
        let q = p.period_ns.as_ns();
        h / gcd(h, q) * q
    }))
}

/// Total budget demanded over one hyperperiod, and the hyperperiod.
pub fn demand(params: &[EdfParam]) -> (u128, u128) {
    let h = hyperperiod(params).as_ns() as u128;
    let d = params.iter().map(|p| p.budget_ns.as_ns() as u128 * (h / p.period_ns.as_ns() as u128)).sum();
    (d, h)
}

/// Exact test of Σ budget/period ≤ 1.
pub fn schedulable(params: &[EdfParam]) -> bool {
    let (d, h) = demand(params);
    d <= h
}

fn vm_spec(i: usize, workload: Workload) -> VmSpec {
    VmSpec {
        id: VmId(i as u32),
        regions: vec![MemRegion { ipa: REGION_IPA, pa: REGION_PA + i as u64 * REGION_LEN, len: REGION_LEN, perms: Perms::RW }],
        irqs: Default::default(),
        virqs: Default::default(),
        shared: Vec::new(),
        workload,
    }
}

/// One always-busy VM per reservation under EDF.
pub fn edf_system(params: &[EdfParam], cost: CostModel) -> SystemSpec {
    let mut scheduler = SchedulerSpec::named("edf");
    for (i, p) in params.iter().enumerate() {
        scheduler.set_param(VmId(i as u32), SchedParam::encode(p));
    }
    SystemSpec {
        cost_model: cost,
        scheduler,
        vms: (0..params.len()).map(|i| vm_spec(i, Workload::busy())).collect(),
        shared_pages: Vec::new(),
        channels: Vec::new(),
        interrupts: Vec::new(),
        options: SimOptions::default(),
    }
}

/// `n` always-busy VMs under the named scheduler with default parameters
/// (FP priority = VM id, RR with `quantum`).
pub fn busy_system(n: usize, scheduler: &str, quantum: Option<Time>, cost: CostModel) -> SystemSpec {
    let mut s = SchedulerSpec::named(scheduler);
    s.quantum_ns = quantum;
    if scheduler == "fp" {
        for i in 0..n {
            s.set_param(VmId(i as u32), SchedParam::encode(&FpParam { priority: i as i64 }));
        }
    }
    SystemSpec {
        cost_model: cost,
        scheduler: s,
        vms: (0..n).map(|i| vm_spec(i, Workload::busy())).collect(),
        shared_pages: Vec::new(),
        channels: Vec::new(),
        interrupts: Vec::new(),
        options: SimOptions::default(),
    }
}

/// IVC sender/receiver pair under FP. vm0 (more urgent) loops over
/// acquire, write one page, `guest_ns` of compute, release, notify; vm1
/// only waits for interrupts. `guest_ns` must be positive.
pub fn ivc_pair_system(variant: ChannelVariant, guest_ns: Time, cost: CostModel) -> SystemSpec {
    let sender = vec![
        Segment::IvcAcquire { channel: 0 },
        Segment::IvcWrite { channel: 0, bytes: 4096 },
        Segment::Compute { ns: guest_ns },
        Segment::IvcRelease { channel: 0 },
        Segment::IvcNotify { channel: 0 },
    ];
    let mut vms = vec![
        vm_spec(0, Workload { repeat: true, segments: sender }),
        vm_spec(1, Workload { repeat: true, segments: vec![Segment::Wfi] }),
    ];
    for vm in &mut vms {
        vm.virqs.insert(IVC_VIRQ);
        vm.shared.push(SharedMapping { page: 0, ipa: SHARED_IPA, perms: Perms::RW });
    }
    let mut sched = SchedulerSpec::named("fp");
    for i in 0..2 {
        sched.set_param(VmId(i), SchedParam::encode(&FpParam { priority: i as i64 }));
    }
    SystemSpec {
        cost_model: cost,
        scheduler: sched,
        vms,
        shared_pages: vec![SharedPageSpec { id: 0, pa: SHARED_PA }],
        channels: vec![ChannelSpec { id: 0, endpoints: [VmId(0), VmId(1)], pages: vec![0], virqs: [IVC_VIRQ, IVC_VIRQ], variant }],
        interrupts: Vec::new(),
        options: SimOptions::default(),
    }
}

fn irqs_of(i: usize) -> [u32; 2] {
    [32 + 2 * i as u32, 33 + 2 * i as u32]
}

fn random_segment<R: Rng>(rng: &mut R, i: usize, channel: Option<u32>) -> Segment {
    let gicd = |off: u32| DEFAULT_GICD_BASE + off as u64;
    match rng.gen_range(0..100) {
        0..=34 => Segment::Compute { ns: Time::from_us(rng.gen_range(10..2_000)) },
        35..=44 => Segment::HypCall {
            payload: if rng.gen_bool(0.3) { HypCallPayload::Reschedule } else { HypCallPayload::Null },
        },
        45..=54 => Segment::Wfi,
        55..=62 => Segment::Mmio {
            ipa: REGION_IPA + rng.gen_range(0..REGION_LEN / 8) * 8,
            access: if rng.gen() { Access::Read } else { Access::Write },
            value: 0,
        },
        63..=74 => {
            // distributor: mostly modeled registers, sometimes not
            let offsets: Vec<u32> = modeled_offsets().collect();
            let off = if rng.gen_bool(0.9) { *offsets.choose(rng).expect("non-empty") } else { 0xf00 };
            let own = 1u32 << (irqs_of(i)[rng.gen_range(0..2)] % 32);
            let value = if rng.gen() { own } else { rng.gen() };
            Segment::Mmio { ipa: gicd(off), access: if rng.gen() { Access::Read } else { Access::Write }, value: value as u64 }
        }
        75..=79 => Segment::Mmio { ipa: UNMAPPED_IPA, access: Access::Read, value: 0 },
        _ => match channel {
            Some(ch) => match rng.gen_range(0..4) {
                0 => Segment::IvcNotify { channel: ch },
                1 => Segment::IvcAcquire { channel: ch },
                2 => Segment::IvcWrite { channel: ch, bytes: rng.gen_range(1..4096) },
                _ => Segment::IvcRelease { channel: ch },
            },
            None => Segment::Compute { ns: Time::from_us(rng.gen_range(10..500)) },
        },
    }
}

/// A randomized system exercising every trap path under `scheduler`.
pub fn random_system<R: Rng>(rng: &mut R, scheduler: &str, horizon: Time) -> SystemSpec {
    let n = rng.gen_range(1..=5usize);
    let variant = if rng.gen() { ChannelVariant::FreeAccess } else { ChannelVariant::HypcallGated };
    let has_channel = n >= 2;
    let mut vms: Vec<VmSpec> = (0..n)
        .map(|i| {
            let channel = (has_channel && i < 2).then_some(0u32);
            let len = rng.gen_range(2..10);
            let mut segments: Vec<Segment> = (0..len).map(|_| random_segment(rng, i, channel)).collect();
            segments.push(Segment::Compute { ns: Time::from_us(rng.gen_range(50..1_000)) });
            let mut vm = vm_spec(i, Workload { repeat: rng.gen_bool(0.9), segments });
            vm.irqs = irqs_of(i).into_iter().collect();
            vm
        })
        .collect();
    let mut shared_pages = Vec::new();
    let mut channels = Vec::new();
    if has_channel {
        shared_pages.push(SharedPageSpec { id: 0, pa: SHARED_PA });
        for vm in vms.iter_mut().take(2) {
            vm.virqs.insert(IVC_VIRQ);
            vm.shared.push(SharedMapping { page: 0, ipa: SHARED_IPA, perms: Perms::RW });
        }
        channels.push(ChannelSpec { id: 0, endpoints: [VmId(0), VmId(1)], pages: vec![0], virqs: [IVC_VIRQ, IVC_VIRQ], variant });
    }
    let mut interrupts = Vec::new();
    for i in 0..n {
        for irq in irqs_of(i) {
            if rng.gen_bool(0.7) {
                let period = Time::from_us(rng.gen_range(300..5_000));
                interrupts.push(IrqSource {
                    irq,
                    at_ns: Time::from_us(rng.gen_range(0..2_000)),
                    period_ns: Some(period),
                    count: horizon.as_ns() / period.as_ns() + 1,
                });
            }
        }
    }
    if rng.gen_bool(0.2) {
        // stray sources: unassigned and reserved ids
        interrupts.push(IrqSource { irq: 120, at_ns: Time::from_us(rng.gen_range(0..1_000)), period_ns: None, count: 1 });
        interrupts.push(IrqSource { irq: 5, at_ns: Time::from_us(rng.gen_range(0..1_000)), period_ns: None, count: 1 });
    }

    let mut sched = SchedulerSpec::named(scheduler);
    match scheduler {
        "edf" => {
            let (u, harmonic) = (rng.gen_range(0.3..1.2), rng.gen());
            let set = edf_task_set(rng, n, u, harmonic);
            for (i, p) in set.iter().enumerate() {
                sched.set_param(VmId(i as u32), SchedParam::encode(p));
            }
        }
        "fp" => {
            for i in 0..n {
                sched.set_param(VmId(i as u32), SchedParam::encode(&FpParam { priority: rng.gen_range(-3..4) }));
            }
        }
        "rr" => sched.quantum_ns = Some(Time::from_us(rng.gen_range(200..3_000))),
        _ => {}
    }
    SystemSpec {
        cost_model: if rng.gen_bool(0.7) { CostModel::measured() } else { CostModel::zero() },
        scheduler: sched,
        vms,
        shared_pages,
        channels,
        interrupts,
        options: SimOptions { lr_count: rng.gen_range(1..=4), ..SimOptions::default() },
    }
}
