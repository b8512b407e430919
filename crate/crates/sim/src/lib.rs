//! Discrete-event simulator of the prelimit `G_t/GI/n+GI` queue.
//!
//! Exact event-driven simulation with FCFS non-idling service and
//! abandonment from the queue: customers arrive by an inhomogeneous Poisson
//! process with rate `n·λ(t)` (thinning against the supremum), draw i.i.d.
//! service and patience times, and leave the queue when their waiting time
//! reaches their patience. Scaled sample paths (`/n`) validate the fluid
//! solvers at desk scale.
//!
//! Abandonment is implemented twice over, whichever fires first: an
//! abandonment event at `arrival + patience`, plus a lazy check at
//! service-entry time (a head-of-line customer whose patience has run out
//! is discarded, mirroring the virtual-queue discipline).
//!
//! One simulation is sequential; replications run in parallel with
//! independently seeded streams and are merged in replication order, so
//! ensemble outputs are reproducible regardless of scheduling.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use fluidq_core::elapsed::{InitialCondition, QueueModel};
use fluidq_core::error::{FluidError, Result};
use fluidq_core::measures::GridMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

// =========================================================================
// Customers and paths
// =========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CustomerStatus {
    Queued,
    InService,
    Abandoned,
    Departed,
}

/// Full per-customer record (kept for the empirical measures).
#[derive(Debug, Clone)]
pub struct Customer {
    pub arrival: f64,
    /// Total patience measured from arrival.
    pub patience: f64,
    pub service: f64,
    pub status: CustomerStatus,
    pub entered_service: Option<f64>,
    pub departed: Option<f64>,
    pub abandoned: Option<f64>,
}

/// Counter snapshot after an event.
#[derive(Debug, Clone, Copy)]
pub struct PathPoint {
    pub t: f64,
    /// In system (queue + service).
    pub x: u64,
    /// In service.
    pub b: u64,
    /// Waiting in queue.
    pub q: u64,
    /// Cumulative service entries.
    pub k: u64,
    /// Cumulative abandonments.
    pub r: u64,
    /// Cumulative departures.
    pub d: u64,
}

/// One replication: the event-time counter series plus the customer
/// registry, with accessors for the fluid-scaled path.
#[derive(Debug, Clone)]
pub struct SimPath {
    pub n: usize,
    pub seed: u64,
    pub points: Vec<PathPoint>,
    pub customers: Vec<Customer>,
    /// Total external arrivals on (0, T].
    pub arrivals: u64,
    /// Initial population (queue + service).
    pub initial: u64,
}

impl SimPath {
    /// Step-function value of the scaled in-system count at time `t`.
    pub fn x_scaled_at(&self, t: f64) -> f64 {
        self.point_at(t).x as f64 / self.n as f64
    }

    pub fn point_at(&self, t: f64) -> PathPoint {
        // Last event time ≤ t (points are sorted by construction).
        let mut lo = 0usize;
        let mut hi = self.points.len();
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.points[mid].t <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.points[lo]
    }

    /// Per-replication CSV: the scaled counter series.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,X,B,Q,K,R,D\n");
        let n = self.n as f64;
        for p in &self.points {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                p.t,
                p.x as f64 / n,
                p.b as f64 / n,
                p.q as f64 / n,
                p.k as f64 / n,
                p.r as f64 / n,
                p.d as f64 / n
            ));
        }
        out
    }
}

// =========================================================================
// Event machinery
// =========================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Arrival,
    Abandon(usize),
    Departure(usize),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    t: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap via reversal; ties broken by insertion order for
        // determinism.
        other
            .t
            .total_cmp(&self.t)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

// =========================================================================
// Simulation
// =========================================================================

/// Runs one replication at scale `n` with the fluid-scale model
/// (arrival rate λ(·) is multiplied by `n` internally).
///
/// The initial population is constructed by i.i.d. sampling: ages from the
/// normalized initial measures, remaining lifetimes from the age-conditioned
/// laws; initial queue customers are served oldest-first.
pub fn simulate(
    model: &QueueModel,
    ic: &InitialCondition,
    n: usize,
    t_end: f64,
    seed: u64,
) -> Result<SimPath> {
    if n == 0 {
        return Err(FluidError::Config("need at least one server".into()));
    }
    let sup = model.rate.sup_on(t_end);
    if !sup.is_finite() {
        return Err(FluidError::Config("arrival rate must be bounded on [0, T]".into()));
    }

    let mut rng_arrival = ChaCha12Rng::seed_from_u64(seed);
    rng_arrival.set_stream(1);
    let mut rng_service = ChaCha12Rng::seed_from_u64(seed);
    rng_service.set_stream(2);
    let mut rng_patience = ChaCha12Rng::seed_from_u64(seed);
    rng_patience.set_stream(3);
    let mut rng_init = ChaCha12Rng::seed_from_u64(seed);
    rng_init.set_stream(4);

    let mut customers: Vec<Customer> = Vec::new();
    let mut heap: BinaryHeap<Event> = BinaryHeap::new();
    let mut seq = 0u64;
    let push = |heap: &mut BinaryHeap<Event>, seq: &mut u64, t: f64, kind: EventKind| {
        heap.push(Event { t, seq: *seq, kind });
        *seq += 1;
    };

    // --- initial population ---
    let gs = &model.service;
    let gr = &model.patience;
    let m_b = (n as f64 * ic.nu0.total_mass()).round() as usize;
    let q0 = ic.queue_mass();
    let m_q = (n as f64 * q0).round() as usize;
    if m_q > 0 && m_b < n {
        return Err(FluidError::Config(
            "initial condition puts customers in queue while servers idle".into(),
        ));
    }
    let mut busy = 0usize;
    for _ in 0..m_b {
        let u: f64 = rng_init.random();
        let age = ic.nu0.quantile_age(u * ic.nu0.total_mass())?;
        let residual = gs.sample_conditional_excess(age, &mut rng_init)?;
        let id = customers.len();
        customers.push(Customer {
            arrival: -age,
            patience: f64::INFINITY, // already in service; patience is moot
            service: age + residual,
            status: CustomerStatus::InService,
            entered_service: Some(-age),
            departed: None,
            abandoned: None,
        });
        push(&mut heap, &mut seq, residual, EventKind::Departure(id));
        busy += 1;
    }
    // Initial queue: i.i.d. ages, oldest first (FCFS).
    let eta_mass = ic.eta0.total_mass();
    let mut init_queue: Vec<(f64, f64)> = Vec::with_capacity(m_q); // (age, residual patience)
    for _ in 0..m_q {
        let u: f64 = rng_init.random();
        let age = ic.eta0.quantile_age(u * eta_mass)?;
        let residual = gr.sample_conditional_excess(age, &mut rng_init)?;
        init_queue.push((age, residual));
    }
    init_queue.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (age, residual) in init_queue {
        let id = customers.len();
        customers.push(Customer {
            arrival: -age,
            patience: age + residual,
            service: gs.sample(&mut rng_init),
            status: CustomerStatus::Queued,
            entered_service: None,
            departed: None,
            abandoned: None,
        });
        queue.push_back(id);
        push(&mut heap, &mut seq, residual, EventKind::Abandon(id));
    }

    // First arrival by thinning.
    let n_sup = n as f64 * sup;
    let mut next_arrival = if sup > 0.0 {
        let mut t = 0.0f64;
        loop {
            let u: f64 = rng_arrival.random();
            t += -(1.0f64 - u).ln() / n_sup;
            let accept: f64 = rng_arrival.random();
            if t > t_end || accept * sup < model.rate.rate(t) {
                break;
            }
        }
        t
    } else {
        f64::INFINITY
    };
    if next_arrival <= t_end {
        push(&mut heap, &mut seq, next_arrival, EventKind::Arrival);
    }

    // --- counters ---
    let initial = (m_b + m_q) as u64;
    let mut q_live = m_q as u64;
    let mut k_cum = 0u64;
    let mut r_cum = 0u64;
    let mut d_cum = 0u64;
    let mut arrivals = 0u64;
    let mut points = vec![PathPoint {
        t: 0.0,
        x: initial,
        b: busy as u64,
        q: q_live,
        k: 0,
        r: 0,
        d: 0,
    }];

    // --- event loop ---
    while let Some(ev) = heap.pop() {
        if ev.t > t_end {
            break;
        }
        let t = ev.t;
        match ev.kind {
            EventKind::Arrival => {
                arrivals += 1;
                let id = customers.len();
                let service = gs.sample(&mut rng_service);
                let patience = gr.sample(&mut rng_patience);
                let mut c = Customer {
                    arrival: t,
                    patience,
                    service,
                    status: CustomerStatus::Queued,
                    entered_service: None,
                    departed: None,
                    abandoned: None,
                };
                if busy < n && q_live == 0 {
                    c.status = CustomerStatus::InService;
                    c.entered_service = Some(t);
                    busy += 1;
                    k_cum += 1;
                    push(&mut heap, &mut seq, t + service, EventKind::Departure(id));
                } else {
                    queue.push_back(id);
                    q_live += 1;
                    push(&mut heap, &mut seq, t + patience, EventKind::Abandon(id));
                }
                customers.push(c);
                // Schedule the next thinned arrival.
                if sup > 0.0 {
                    let mut ta = t;
                    loop {
                        let u: f64 = rng_arrival.random();
                        ta += -(1.0f64 - u).ln() / n_sup;
                        let accept: f64 = rng_arrival.random();
                        if ta > t_end || accept * sup < model.rate.rate(ta) {
                            break;
                        }
                    }
                    next_arrival = ta;
                    if next_arrival <= t_end {
                        push(&mut heap, &mut seq, next_arrival, EventKind::Arrival);
                    }
                }
            }
            EventKind::Abandon(id) => {
                if customers[id].status == CustomerStatus::Queued {
                    customers[id].status = CustomerStatus::Abandoned;
                    customers[id].abandoned = Some(t);
                    r_cum += 1;
                    q_live -= 1;
                }
            }
            EventKind::Departure(id) => {
                customers[id].status = CustomerStatus::Departed;
                customers[id].departed = Some(t);
                d_cum += 1;
                busy -= 1;
                // Pull the oldest live customer; the lazy patience check
                // discards heads whose patience ran out at exactly this
                // instant (their abandon event may still be pending).
                while let Some(head) = queue.pop_front() {
                    let c = &mut customers[head];
                    match c.status {
                        CustomerStatus::Queued => {
                            if t >= c.arrival + c.patience {
                                c.status = CustomerStatus::Abandoned;
                                c.abandoned = Some(c.arrival + c.patience);
                                r_cum += 1;
                                q_live -= 1;
                                continue;
                            }
                            c.status = CustomerStatus::InService;
                            c.entered_service = Some(t);
                            busy += 1;
                            k_cum += 1;
                            q_live -= 1;
                            let t_dep = t + c.service;
                            push(&mut heap, &mut seq, t_dep, EventKind::Departure(head));
                            break;
                        }
                        _ => continue, // already abandoned; skip
                    }
                }
            }
        }
        let x = initial + arrivals - r_cum - d_cum;
        debug_assert_eq!(x, busy as u64 + q_live, "in-system identity");
        debug_assert!(q_live == 0 || busy == n, "non-idling");
        points.push(PathPoint { t, x, b: busy as u64, q: q_live, k: k_cum, r: r_cum, d: d_cum });
    }

    Ok(SimPath { n, seed, points, customers, arrivals, initial })
}

/// Empirical `(η̂_t, ν̂_t)/n` as grid measures: the in-service age histogram
/// and the potential-queue age histogram (everyone whose patience has not
/// expired, including content already in service or departed).
pub fn empirical_measures(path: &SimPath, t: f64, da: f64) -> Result<(GridMeasure, GridMeasure)> {
    let n = path.n as f64;
    let mut eta_counts: Vec<f64> = Vec::new();
    let mut nu_counts: Vec<f64> = Vec::new();
    let bump = |v: &mut Vec<f64>, age: f64| {
        let cell = (age / da) as usize;
        if v.len() <= cell {
            v.resize(cell + 1, 0.0);
        }
        v[cell] += 1.0;
    };
    for c in &path.customers {
        if c.arrival > t {
            continue;
        }
        // Potential queue: patience not yet expired.
        if c.arrival + c.patience > t && c.patience.is_finite() {
            bump(&mut eta_counts, t - c.arrival);
        }
        // In service.
        if let Some(entered) = c.entered_service {
            if entered <= t && c.departed.map(|d| d > t).unwrap_or(true) {
                bump(&mut nu_counts, t - entered);
            }
        }
    }
    let eta = GridMeasure::new(da, eta_counts.iter().map(|c| c / (n * da)).collect(), Vec::new())?;
    let nu = GridMeasure::new(da, nu_counts.iter().map(|c| c / (n * da)).collect(), Vec::new())?;
    Ok((eta, nu))
}

// =========================================================================
// Ensembles
// =========================================================================

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n: usize,
    pub replications: usize,
    pub t_end: f64,
    pub base_seed: u64,
    /// Output grid step for the aggregated series.
    pub grid_dt: f64,
}

/// Aggregated scaled paths on a uniform grid.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub config: EnsembleConfig,
    pub grid: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub stderr_x: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub paths: Vec<SimPath>,
}

impl Ensemble {
    /// Aggregate CSV; the seed is recorded in the header line.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# n={} replications={} seed={}\nt,mean_X,stderr_X,mean_B,mean_Q\n",
            self.config.n, self.config.replications, self.config.base_seed
        );
        for (i, t) in self.grid.iter().enumerate() {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e},{:.11e},{:.11e}\n",
                t, self.mean_x[i], self.stderr_x[i], self.mean_b[i], self.mean_q[i]
            ));
        }
        out
    }

    /// Sup-norm distance of the mean scaled X-path to a reference sampled on
    /// the same grid.
    pub fn sup_distance_x(&self, reference: impl Fn(f64) -> f64) -> f64 {
        self.grid
            .iter()
            .zip(&self.mean_x)
            .map(|(t, m)| (m - reference(*t)).abs())
            .fold(0.0f64, f64::max)
    }
}

/// Runs independent replications in parallel (deterministic reduction by
/// replication index) and aggregates the scaled paths.
pub fn run_ensemble(
    model: &QueueModel,
    ic: &InitialCondition,
    cfg: &EnsembleConfig,
) -> Result<Ensemble> {
    let reps = cfg.replications.max(1);
    let results: Vec<Result<SimPath>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = cfg.base_seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            simulate(model, ic, cfg.n, cfg.t_end, seed)
        })
        .collect();
    let mut paths = Vec::with_capacity(reps);
    for r in results {
        paths.push(r?);
    }
    let grid: Vec<f64> = {
        let steps = (cfg.t_end / cfg.grid_dt).round() as usize;
        (0..=steps).map(|i| i as f64 * cfg.grid_dt).collect()
    };
    let n = cfg.n as f64;
    let mut mean_x = vec![0.0f64; grid.len()];
    let mut m2_x = vec![0.0f64; grid.len()];
    let mut mean_b = vec![0.0f64; grid.len()];
    let mut mean_q = vec![0.0f64; grid.len()];
    for path in &paths {
        for (i, t) in grid.iter().enumerate() {
            let p = path.point_at(*t);
            mean_x[i] += p.x as f64 / n;
            m2_x[i] += (p.x as f64 / n) * (p.x as f64 / n);
            mean_b[i] += p.b as f64 / n;
            mean_q[i] += p.q as f64 / n;
        }
    }
    let rf = reps as f64;
    for i in 0..grid.len() {
        mean_x[i] /= rf;
        mean_b[i] /= rf;
        mean_q[i] /= rf;
        let var = (m2_x[i] / rf - mean_x[i] * mean_x[i]).max(0.0);
        m2_x[i] = (var / rf).sqrt(); // standard error of the mean
    }
    Ok(Ensemble {
        config: cfg.clone(),
        grid,
        mean_x,
        stderr_x: m2_x,
        mean_b,
        mean_q,
        paths,
    })
}
