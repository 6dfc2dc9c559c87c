//! Circuit pool maintenance.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::client::{CircuitError, CircuitHandle, CircuitManager};

pub const BACKOFF_BASE: Duration = Duration::from_millis(500);
pub const BACKOFF_CAP: Duration = Duration::from_secs(30);

/// Exponential retry delay: 0.5 s, 1 s, 2 s, ... capped at 30 s.
#[derive(Debug, Clone, Default)]
pub struct Backoff {
    failures: u32,
    next_attempt: Option<Instant>,
}

impl Backoff {
    pub fn delay_for(failures: u32) -> Duration {
        if failures == 0 {
            return Duration::ZERO;
        }
        let factor = 2u32.saturating_pow(failures - 1);
        BACKOFF_BASE.saturating_mul(factor).min(BACKOFF_CAP)
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    pub fn ready(&self, now: Instant) -> bool {
        self.next_attempt.map_or(true, |t| now >= t)
    }

    /// Record a failure; returns the delay before the next attempt.
    pub fn on_failure(&mut self, now: Instant) -> Duration {
        self.failures = self.failures.saturating_add(1);
        let d = Self::delay_for(self.failures);
        self.next_attempt = Some(now + d);
        d
    }

    pub fn on_success(&mut self) {
        self.failures = 0;
        self.next_attempt = None;
    }
}

/// What one maintenance tick should do.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickPlan {
    /// Indices of closed circuits to drop.
    pub drop_closed: Vec<usize>,
    /// Indices of open circuits past their lifetime, oldest first. They are
    /// retired only as replacements come up.
    pub expired: Vec<usize>,
    /// Circuits to build.
    pub build: usize,
}

/// Plan a tick from each circuit's age and liveness.
pub fn plan_tick(circuits: &[(Duration, bool)], lifetime: Duration, target: usize) -> TickPlan {
    let mut plan = TickPlan::default();
    let mut fresh = 0;
    let mut expired: Vec<(Duration, usize)> = Vec::new();
    for (i, &(age, closed)) in circuits.iter().enumerate() {
        if closed {
            plan.drop_closed.push(i);
        } else if age >= lifetime {
            expired.push((age, i));
        } else {
            fresh += 1;
        }
    }
    expired.sort_by(|a, b| b.0.cmp(&a.0));
    plan.expired = expired.into_iter().map(|(_, i)| i).collect();
    plan.build = target.max(1).saturating_sub(fresh);
    plan
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub built: usize,
    pub retired: usize,
    pub dropped: usize,
    pub failed: bool,
}

/// Circuits shared by all proxied connections.
pub struct CircuitPool {
    manager: CircuitManager,
    circuits: Mutex<Vec<CircuitHandle>>,
    lifetime: Duration,
    size: usize,
    next: AtomicUsize,
    backoff: Mutex<Backoff>,
    degraded: AtomicBool,
    /// Serialises maintenance against on-demand rebuilds.
    maintenance: tokio::sync::Mutex<()>,
}

impl CircuitPool {
    pub fn new(manager: CircuitManager, lifetime: Duration, size: usize) -> Self {
        CircuitPool {
            manager,
            circuits: Mutex::new(Vec::new()),
            lifetime,
            size: size.max(1),
            next: AtomicUsize::new(0),
            backoff: Mutex::new(Backoff::default()),
            degraded: AtomicBool::new(false),
            maintenance: tokio::sync::Mutex::new(()),
        }
    }

    pub fn manager(&self) -> &CircuitManager {
        &self.manager
    }

    /// Build circuits until the pool is full; fails if none could be built.
    pub async fn fill(&self) -> Result<(), CircuitError> {
        let _guard = self.maintenance.lock().await;
        let mut last_err = None;
        while self.live().len() < self.size {
            match self.manager.build_fresh().await {
                Ok(c) => self.lock().push(c),
                Err(e) => {
                    last_err = Some(e);
                    break;
                }
            }
        }
        match (self.live().is_empty(), last_err) {
            (true, Some(e)) => Err(e),
            _ => Ok(()),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Vec<CircuitHandle>> {
        self.circuits.lock().expect("pool poisoned")
    }

    /// Open circuits in the pool.
    pub fn live(&self) -> Vec<CircuitHandle> {
        self.lock().iter().filter(|c| !c.is_closed()).cloned().collect()
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::Relaxed)
    }

    /// Next open circuit, round robin.
    pub fn get(&self) -> Option<CircuitHandle> {
        let live = self.live();
        if live.is_empty() {
            return None;
        }
        let i = self.next.fetch_add(1, Ordering::Relaxed) % live.len();
        Some(live[i].clone())
    }

    /// Replace closed circuits right away, ignoring the backoff. Used when a
    /// connection finds its circuit dead.
    pub async fn rebuild_now(&self, dead: Option<&CircuitHandle>) -> Result<CircuitHandle, CircuitError> {
        let _guard = self.maintenance.lock().await;
        if let Some(dead) = dead {
            dead.destroy();
            self.lock().retain(|c| c.circuit_id() != dead.circuit_id());
        }
        if let Some(c) = self.get().filter(|c| dead.map_or(true, |d| d.circuit_id() != c.circuit_id())) {
            return Ok(c);
        }
        let c = self.manager.build_fresh().await?;
        self.lock().push(c.clone());
        Ok(c)
    }

    /// One maintenance pass.
    pub async fn tick(&self, now: Instant) -> TickOutcome {
        let _guard = self.maintenance.lock().await;
        let mut outcome = TickOutcome::default();
        let plan = {
            let circuits = self.lock();
            let status: Vec<_> = circuits
                .iter()
                .map(|c| (now.saturating_duration_since(c.created_at()), c.is_closed()))
                .collect();
            plan_tick(&status, self.lifetime, self.size)
        };
        let expired: Vec<CircuitHandle> = {
            let mut circuits = self.lock();
            let all = std::mem::take(&mut *circuits);
            outcome.dropped = plan.drop_closed.len();
            let expired: Vec<_> = plan.expired.iter().map(|&i| all[i].clone()).collect();
            let kept: Vec<_> = all
                .into_iter()
                .enumerate()
                .filter(|(i, _)| !plan.drop_closed.contains(i) && !plan.expired.contains(i))
                .map(|(_, c)| c)
                .collect();
            *circuits = kept;
            circuits.extend(expired.iter().cloned());
            expired
        };
        if plan.build > 0 {
            let ready = self.backoff.lock().expect("backoff poisoned").ready(now);
            if ready {
                for _ in 0..plan.build {
                    match self.manager.build_fresh().await {
                        Ok(c) => {
                            outcome.built += 1;
                            self.lock().push(c);
                        }
                        Err(e) => {
                            let delay = self
                                .backoff
                                .lock()
                                .expect("backoff poisoned")
                                .on_failure(Instant::now());
                            tracing::warn!("circuit build failed, retrying in {delay:?}: {e}");
                            outcome.failed = true;
                            break;
                        }
                    }
                }
                if !outcome.failed {
                    self.backoff.lock().expect("backoff poisoned").on_success();
                }
            }
        }
        // Retire expired circuits, oldest first, while the pool stays at its
        // target size; without replacements they keep serving.
        let mut open = self.live().len();
        for old in &expired {
            let closed = old.is_closed();
            if closed || open > self.size {
                old.retire();
                self.lock().retain(|c| c.circuit_id() != old.circuit_id());
                outcome.retired += 1;
                if !closed {
                    open -= 1;
                }
            }
        }
        let degraded = self.live().is_empty() || outcome.failed;
        self.degraded.store(degraded, Ordering::Relaxed);
        if degraded {
            tracing::warn!("circuit pool degraded: {} live circuits", self.live().len());
        }
        outcome
    }

    /// Destroy every circuit.
    pub fn shutdown(&self) {
        for c in self.lock().drain(..) {
            c.destroy();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule() {
        let delays: Vec<f64> = (1..=9).map(|n| Backoff::delay_for(n).as_secs_f64()).collect();
        assert_eq!(delays, [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 30.0, 30.0, 30.0]);
        assert_eq!(Backoff::delay_for(0), Duration::ZERO);
        assert_eq!(Backoff::delay_for(u32::MAX), BACKOFF_CAP);
        let now = Instant::now();
        let mut b = Backoff::default();
        assert!(b.ready(now));
        assert_eq!(b.on_failure(now), Duration::from_millis(500));
        assert!(!b.ready(now));
        assert!(b.ready(now + Duration::from_millis(500)));
        b.on_success();
        assert!(b.ready(now));
    }

    #[test]
    fn expired_circuit_is_replaced() {
        // lifetime 1 s, tick at 2 s
        let plan = plan_tick(&[(Duration::from_secs(2), false)], Duration::from_secs(1), 1);
        assert_eq!(plan.expired, vec![0]);
        assert_eq!(plan.build, 1);
    }

    #[test]
    fn fresh_pool_needs_nothing() {
        let plan = plan_tick(
            &[(Duration::from_secs(5), false), (Duration::from_secs(1), false)],
            Duration::from_secs(600),
            2,
        );
        assert_eq!(plan, TickPlan::default());
    }

    #[test]
    fn closed_circuits_are_dropped_and_rebuilt() {
        let plan = plan_tick(
            &[(Duration::from_secs(1), true), (Duration::from_secs(700), false), (Duration::from_secs(900), false)],
            Duration::from_secs(600),
            1,
        );
        assert_eq!(plan.drop_closed, vec![0]);
        // Oldest first.
        assert_eq!(plan.expired, vec![2, 1]);
        assert_eq!(plan.build, 1);
    }

    #[test]
    fn empty_pool_builds_at_least_one() {
        assert_eq!(plan_tick(&[], Duration::from_secs(1), 0).build, 1);
        assert_eq!(plan_tick(&[], Duration::from_secs(1), 3).build, 3);
    }
}
