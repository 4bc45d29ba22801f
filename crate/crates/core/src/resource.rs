//! Computing sites, batch-queue wait models and capability snapshots.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueueKind {
    Constant { wait_s: f64 },
    Uniform { min_s: f64, max_s: f64 },
    /// `mu` and `sigma` of the underlying normal distribution.
    Lognormal { mu: f64, sigma: f64 },
    /// Waits replayed in order, cycling when exhausted.
    TraceReplay { waits_s: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueModel {
    #[serde(flatten)]
    pub kind: QueueKind,
    /// Additive wait per requested core.
    #[serde(default)]
    pub size_penalty_s_per_core: f64,
    /// Relative increase of the wait per pilot the same user already holds
    /// (queued or active) on the site.
    #[serde(default)]
    pub load_factor_per_pilot: f64,
    #[serde(default)]
    pub seed_offset: u64,
}

impl QueueModel {
    pub fn constant(wait_s: f64) -> Self {
        QueueModel {
            kind: QueueKind::Constant { wait_s },
            size_penalty_s_per_core: 0.0,
            load_factor_per_pilot: 0.0,
            seed_offset: 0,
        }
    }

    pub fn lognormal(mu: f64, sigma: f64) -> Self {
        QueueModel {
            kind: QueueKind::Lognormal { mu, sigma },
            size_penalty_s_per_core: 0.0,
            load_factor_per_pilot: 0.0,
            seed_offset: 0,
        }
    }

    pub fn with_size_penalty(mut self, s_per_core: f64) -> Self {
        self.size_penalty_s_per_core = s_per_core;
        self
    }

    pub fn with_load_factor(mut self, per_pilot: f64) -> Self {
        self.load_factor_per_pilot = per_pilot;
        self
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        self.seed_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("queue model: {what}")));
        match &self.kind {
            QueueKind::Constant { wait_s } if !(*wait_s >= 0.0 && wait_s.is_finite()) => bad("constant wait must be >= 0"),
            QueueKind::Uniform { min_s, max_s } if !(*min_s >= 0.0 && min_s <= max_s && max_s.is_finite()) => {
                bad("uniform bounds must satisfy 0 <= min <= max")
            }
            QueueKind::Lognormal { mu, sigma } if !(mu.is_finite() && *sigma >= 0.0 && sigma.is_finite()) => {
                bad("lognormal needs finite mu and sigma >= 0")
            }
            QueueKind::TraceReplay { waits_s } if waits_s.is_empty() || waits_s.iter().any(|w| !(*w >= 0.0 && w.is_finite())) => {
                bad("trace replay needs a nonempty list of finite waits >= 0")
            }
            _ if !(self.size_penalty_s_per_core >= 0.0 && self.size_penalty_s_per_core.is_finite()) => {
                bad("size penalty must be >= 0")
            }
            _ if !(self.load_factor_per_pilot >= 0.0 && self.load_factor_per_pilot.is_finite()) => {
                bad("load factor must be >= 0")
            }
            _ => Ok(()),
        }
    }

    /// Expected wait for a pilot of `cores` cores.
    pub fn mean_wait(&self, cores: u32) -> f64 {
        let base = match &self.kind {
            QueueKind::Constant { wait_s } => *wait_s,
            QueueKind::Uniform { min_s, max_s } => 0.5 * (min_s + max_s),
            QueueKind::Lognormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
            QueueKind::TraceReplay { waits_s } => waits_s.iter().sum::<f64>() / waits_s.len() as f64,
        };
        base + self.size_penalty_s_per_core * cores as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub total_cores: u32,
    pub max_concurrent_pilots: u32,
    pub queue: QueueModel,
    pub bandwidth_bytes_per_s: f64,
    #[serde(default)]
    pub staging_latency_s: f64,
}

impl Site {
    /// Site with an instantaneous queue and fast, zero-latency staging.
    pub fn idle(name: impl Into<String>, total_cores: u32) -> Self {
        Site {
            name: name.into(),
            total_cores,
            max_concurrent_pilots: 64,
            queue: QueueModel::constant(0.0),
            bandwidth_bytes_per_s: 1.0e9,
            staging_latency_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("site name must not be empty"));
        }
        if self.total_cores < 1 {
            return Err(Error::invalid(format!("site {}: total_cores must be >= 1", self.name)));
        }
        if self.max_concurrent_pilots < 1 {
            return Err(Error::invalid(format!("site {}: max_concurrent_pilots must be >= 1", self.name)));
        }
        if !(self.bandwidth_bytes_per_s > 0.0 && self.bandwidth_bytes_per_s.is_finite()) {
            return Err(Error::invalid(format!("site {}: bandwidth must be positive", self.name)));
        }
        if !(self.staging_latency_s >= 0.0 && self.staging_latency_s.is_finite()) {
            return Err(Error::invalid(format!("site {}: staging latency must be >= 0", self.name)));
        }
        self.queue.validate()
    }

    /// Seconds to move one file of `size_bytes` between the workstation and this site.
    pub fn transfer_time(&self, size_bytes: u64) -> f64 {
        self.staging_latency_s + size_bytes as f64 / self.bandwidth_bytes_per_s
    }
}

/// Seeded stream of queue-wait draws for one site.
///
/// Draw `k` depends only on `(seed, site seed offset, k)`, so replays are
/// bit-identical regardless of what else the simulation samples.
#[derive(Debug, Clone)]
pub struct QueueStream {
    seed: u64,
    offset: u64,
    draws: u64,
}

impl QueueStream {
    pub fn new(seed: u64, site: &Site) -> Self {
        QueueStream {
            seed,
            offset: site.queue.seed_offset,
            draws: 0,
        }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn next_rng(&mut self) -> (u64, ChaCha8Rng) {
        let k = self.draws;
        self.draws += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.offset);
        rng.set_word_pos(u128::from(k) << 20);
        (k, rng)
    }
}

pub fn sample_queue_wait(site: &Site, pilot_cores: u32, stream: &mut QueueStream) -> Result<f64> {
    sample_queue_wait_loaded(site, pilot_cores, 0, stream)
}

/// As [`sample_queue_wait`], for a user already holding `held` pilots on the site.
pub fn sample_queue_wait_loaded(site: &Site, pilot_cores: u32, held: u32, stream: &mut QueueStream) -> Result<f64> {
    if pilot_cores > site.total_cores {
        return Err(Error::CapacityExceeded {
            site: site.name.clone(),
            requested: pilot_cores,
            available: site.total_cores,
        });
    }
    let (k, mut rng) = stream.next_rng();
    let base = match &site.queue.kind {
        QueueKind::Constant { wait_s } => *wait_s,
        QueueKind::Uniform { min_s, max_s } => {
            if min_s == max_s {
                *min_s
            } else {
                rng.random_range(*min_s..*max_s)
            }
        }
        QueueKind::Lognormal { mu, sigma } => LogNormal::new(*mu, *sigma)
            .map_err(|e| Error::invalid(format!("lognormal: {e}")))?
            .sample(&mut rng),
        QueueKind::TraceReplay { waits_s } => waits_s[(k % waits_s.len() as u64) as usize],
    };
    let load = 1.0 + site.queue.load_factor_per_pilot * held as f64;
    let wait = (base + site.queue.size_penalty_s_per_core * pilot_cores as f64) * load;
    Ok(if wait.is_finite() { wait.max(0.0) } else { f64::MAX })
}

/// Live bookkeeping of pilots per site, owned by the simulator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteUsage {
    pub queued_pilots: u32,
    pub active_pilots: u32,
    pub active_cores: u32,
    wait_sum_s: f64,
    wait_count: u32,
}

impl SiteUsage {
    pub fn pilots(&self) -> u32 {
        self.queued_pilots + self.active_pilots
    }
}

#[derive(Debug, Clone, Default)]
pub struct ResourceLedger {
    usage: BTreeMap<String, SiteUsage>,
}

impl ResourceLedger {
    pub fn new(sites: &[Site]) -> Self {
        ResourceLedger {
            usage: sites.iter().map(|s| (s.name.clone(), SiteUsage::default())).collect(),
        }
    }

    pub fn usage(&self, site: &str) -> Option<&SiteUsage> {
        self.usage.get(site)
    }

    fn entry(&mut self, site: &str) -> Result<&mut SiteUsage> {
        self.usage.get_mut(site).ok_or_else(|| Error::UnknownSite(site.to_string()))
    }

    /// Registers a new queued pilot, enforcing the site's concurrency limit.
    pub fn admit(&mut self, site: &Site) -> Result<()> {
        let u = self.entry(&site.name)?;
        if u.pilots() >= site.max_concurrent_pilots {
            return Err(Error::RejectedSubmission {
                site: site.name.clone(),
                active: u.pilots(),
                max: site.max_concurrent_pilots,
            });
        }
        u.queued_pilots += 1;
        Ok(())
    }

    /// Moves a queued pilot to active if its cores fit; returns false otherwise.
    pub fn try_activate(&mut self, site: &Site, cores: u32, waited_s: f64) -> Result<bool> {
        let u = self.entry(&site.name)?;
        if u.active_cores + cores > site.total_cores {
            return Ok(false);
        }
        u.queued_pilots -= 1;
        u.active_pilots += 1;
        u.active_cores += cores;
        u.wait_sum_s += waited_s;
        u.wait_count += 1;
        Ok(true)
    }

    pub fn release(&mut self, site: &str, cores: u32, was_active: bool) -> Result<()> {
        let u = self.entry(site)?;
        if was_active {
            u.active_pilots -= 1;
            u.active_cores -= cores;
        } else {
            u.queued_pilots -= 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilitySnapshot {
    pub site: String,
    pub taken_at_s: f64,
    pub free_cores: u32,
    pub queue_length: u32,
    pub historical_mean_wait_s: f64,
}

/// One snapshot per site. The historical mean is the mean observed wait when
/// pilots have activated on the site, else the model's expectation.
pub fn bundle_query(sites: &[Site], ledger: &ResourceLedger, now: f64) -> Vec<CapabilitySnapshot> {
    sites
        .iter()
        .map(|s| {
            let u = ledger.usage(&s.name).cloned().unwrap_or_default();
            let mean = if u.wait_count > 0 {
                u.wait_sum_s / u.wait_count as f64
            } else {
                s.queue.mean_wait(0)
            };
            CapabilitySnapshot {
                site: s.name.clone(),
                taken_at_s: now,
                free_cores: s.total_cores - u.active_cores.min(s.total_cores),
                queue_length: u.queued_pilots,
                historical_mean_wait_s: mean,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(model: QueueModel) -> Site {
        Site {
            queue: model,
            ..Site::idle("s", 1024)
        }
    }

    #[test]
    fn constant_waits() {
        let s = site(QueueModel::constant(0.0));
        let mut st = QueueStream::new(1, &s);
        assert_eq!(sample_queue_wait(&s, 16, &mut st).unwrap(), 0.0);

        let s = site(QueueModel::constant(600.0));
        let mut st = QueueStream::new(1, &s);
        for _ in 0..5 {
            assert_eq!(sample_queue_wait(&s, 1024, &mut st).unwrap(), 600.0);
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let s = site(QueueModel::constant(0.0));
        let mut st = QueueStream::new(1, &s);
        assert!(matches!(
            sample_queue_wait(&s, 1025, &mut st),
            Err(Error::CapacityExceeded { requested: 1025, .. })
        ));
    }

    #[test]
    fn lognormal_is_replayable() {
        let s = site(QueueModel::lognormal(6.0, 1.0));
        let draw = |seed| {
            let mut st = QueueStream::new(seed, &s);
            (0..4).map(|_| sample_queue_wait(&s, 8, &mut st).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        assert_ne!(a, draw(8));
        assert!(a.iter().all(|w| *w >= 0.0 && w.is_finite()));
        // draws within one stream are distinct
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn seed_offset_decorrelates_sites() {
        let a = site(QueueModel::lognormal(6.0, 1.0));
        let b = site(QueueModel::lognormal(6.0, 1.0).with_seed_offset(3));
        let wa = sample_queue_wait(&a, 1, &mut QueueStream::new(1, &a)).unwrap();
        let wb = sample_queue_wait(&b, 1, &mut QueueStream::new(1, &b)).unwrap();
        assert_ne!(wa, wb);
    }

    #[test]
    fn size_penalty_is_additive() {
        let s = site(QueueModel::lognormal(5.0, 0.5).with_size_penalty(0.5));
        let small = sample_queue_wait(&s, 16, &mut QueueStream::new(3, &s)).unwrap();
        let large = sample_queue_wait(&s, 1024, &mut QueueStream::new(3, &s)).unwrap();
        assert!((large - small - 0.5 * (1024.0 - 16.0)).abs() < 1e-9);
    }

    #[test]
    fn load_factor_scales_wait() {
        let s = site(QueueModel::constant(100.0).with_size_penalty(1.0).with_load_factor(0.5));
        let mut st = QueueStream::new(0, &s);
        assert_eq!(sample_queue_wait(&s, 10, &mut st).unwrap(), 110.0);
        assert_eq!(sample_queue_wait_loaded(&s, 10, 4, &mut st).unwrap(), 330.0);
    }

    #[test]
    fn trace_replay_cycles() {
        let s = site(QueueModel {
            kind: QueueKind::TraceReplay { waits_s: vec![1.0, 2.0, 3.0] },
            size_penalty_s_per_core: 0.0,
            load_factor_per_pilot: 0.0,
            seed_offset: 0,
        });
        let mut st = QueueStream::new(0, &s);
        let got: Vec<f64> = (0..5).map(|_| sample_queue_wait(&s, 1, &mut st).unwrap()).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 1.0, 2.0]);
    }

    #[test]
    fn uniform_stays_in_bounds() {
        let s = site(QueueModel {
            kind: QueueKind::Uniform { min_s: 10.0, max_s: 20.0 },
            size_penalty_s_per_core: 0.0,
            load_factor_per_pilot: 0.0,
            seed_offset: 0,
        });
        let mut st = QueueStream::new(5, &s);
        for _ in 0..100 {
            let w = sample_queue_wait(&s, 1, &mut st).unwrap();
            assert!((10.0..20.0).contains(&w));
        }
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(QueueModel::constant(-1.0).validate().is_err());
        assert!(QueueModel::lognormal(1.0, -1.0).validate().is_err());
        assert!(QueueModel::constant(1.0).with_size_penalty(-1.0).validate().is_err());
    }

    #[test]
    fn bundle_snapshots() {
        let sites = vec![Site::idle("a", 64), Site::idle("b", 32)];
        let mut ledger = ResourceLedger::new(&sites);
        let snaps = bundle_query(&sites, &ledger, 0.0);
        assert_eq!(snaps.len(), 2);
        assert_eq!(snaps[0].free_cores, 64);
        assert_eq!(snaps[1].free_cores, 32);

        ledger.admit(&sites[0]).unwrap();
        assert!(ledger.try_activate(&sites[0], 16, 5.0).unwrap());
        let snaps = bundle_query(&sites, &ledger, 10.0);
        assert_eq!(snaps[0].free_cores, 48);
        assert_eq!(snaps[0].historical_mean_wait_s, 5.0);
        assert_eq!(snaps[0].taken_at_s, 10.0);

        assert!(bundle_query(&[], &ledger, 0.0).is_empty());
    }

    #[test]
    fn ledger_limits() {
        let mut s = Site::idle("a", 32);
        s.max_concurrent_pilots = 2;
        let mut ledger = ResourceLedger::new(std::slice::from_ref(&s));
        ledger.admit(&s).unwrap();
        ledger.admit(&s).unwrap();
        assert!(matches!(ledger.admit(&s), Err(Error::RejectedSubmission { max: 2, .. })));
        assert!(ledger.try_activate(&s, 20, 0.0).unwrap());
        // second pilot does not fit until the first releases its cores
        assert!(!ledger.try_activate(&s, 20, 0.0).unwrap());
        ledger.release("a", 20, true).unwrap();
        assert!(ledger.try_activate(&s, 20, 0.0).unwrap());
    }

    #[test]
    fn site_config_round_trips_through_toml() {
        let s = Site {
            queue: QueueModel::lognormal(5.0, 1.0).with_size_penalty(0.25),
            ..Site::idle("stampede", 1024)
        };
        let text = toml::to_string(&s).unwrap();
        let back: Site = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
