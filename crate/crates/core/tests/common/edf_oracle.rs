//! Brute-force EDF at 1 µs steps. Each reservation is released at every
//! multiple of its period with its full budget and an absolute deadline
//! one period later; budget left at the deadline is a miss and is
//! discarded. Each step runs the released reservation with the earliest
//! deadline (lowest index on ties).

pub struct OracleRun {
    /// Which reservation runs in each microsecond.
    pub timeline: Vec<Option<usize>>,
    pub misses: u64,
}

/// `set` holds `(period_us, budget_us)` pairs.
pub fn edf_oracle(set: &[(u64, u64)], horizon_us: u64) -> OracleRun {
    let mut remaining = vec![0u64; set.len()];
    let mut deadline = vec![0u64; set.len()];
    let mut timeline = Vec::with_capacity(horizon_us as usize);
    let mut misses = 0;
    for t in 0..=horizon_us {
        for (i, &(p, b)) in set.iter().enumerate() {
            if t % p == 0 {
                if t > 0 && remaining[i] > 0 {
                    misses += 1;
                }
                remaining[i] = b;
                deadline[i] = t + p;
            }
        }
        if t == horizon_us {
            break;
        }
        let pick = (0..set.len()).filter(|&i| remaining[i] > 0).min_by_key(|&i| (deadline[i], i));
        if let Some(i) = pick {
            remaining[i] -= 1;
        }
        timeline.push(pick);
    }
    OracleRun { timeline, misses }
}

/// Per-microsecond owner from `(vm, start_ns, end_ns)` slices; `Err` if a
/// slice boundary is not on a microsecond.
pub fn slices_to_timeline(slices: &[(u32, u64, u64)], horizon_us: u64) -> Result<Vec<Option<usize>>, String> {
    let mut tl = vec![None; horizon_us as usize];
    for &(vm, s, e) in slices {
        if s % 1000 != 0 || e % 1000 != 0 {
            return Err(format!("slice of vm{vm} [{s}, {e}) is not on a microsecond boundary"));
        }
        for slot in &mut tl[(s / 1000) as usize..(e / 1000).min(horizon_us) as usize] {
            *slot = Some(vm as usize);
        }
    }
    Ok(tl)
}

/// First differing microsecond, if any.
pub fn first_difference(a: &[Option<usize>], b: &[Option<usize>]) -> Option<(usize, Option<usize>, Option<usize>)> {
    (0..a.len().max(b.len())).find_map(|i| {
        let (x, y) = (a.get(i).copied().flatten(), b.get(i).copied().flatten());
        (a.get(i) != b.get(i)).then_some((i, x, y))
    })
}

/// Exact `Σ budget·(H/period) > H` over the hyperperiod `H`, in µs.
pub fn overloaded(set: &[(u64, u64)]) -> bool {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    let h = set.iter().fold(1u64, |h, &(p, _)| h / gcd(h, p) * p);
    let demand: u64 = set.iter().map(|&(p, b)| b * (h / p)).sum();
    demand > h
}
