//! Execution planning: pilot sizing, site selection, and packing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pilot::{BindingMode, PilotDescription};
use crate::resource::Site;
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThrottleLimits {
    /// Units that may sit bound to a site without having started.
    pub max_queued: u32,
    /// Units that may be bound to a site within one rate window.
    pub max_submit_rate: u32,
    pub rate_window_s: f64,
}

impl Default for ThrottleLimits {
    fn default() -> Self {
        ThrottleLimits {
            max_queued: 4096,
            max_submit_rate: 4096,
            rate_window_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionWeights {
    pub queued: f64,
    pub completion: f64,
    pub failure: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        SelectionWeights {
            queued: 1.0,
            completion: 1.0,
            failure: 10.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    #[serde(default)]
    pub throttle: ThrottleLimits,
    #[serde(default)]
    pub weights: SelectionWeights,
}

/// Per-site view used by early binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScoreState {
    pub site: String,
    pub queued_count: u32,
    /// Completed units per second over the run so far.
    pub completion_rate: f64,
    /// Fraction of units on the site that failed.
    pub failure_rate: f64,
    /// Units bound to the site within the current rate window.
    pub recent_submissions: u32,
}

impl SiteScoreState {
    pub fn new(site: impl Into<String>) -> Self {
        SiteScoreState {
            site: site.into(),
            queued_count: 0,
            completion_rate: 0.0,
            failure_rate: 0.0,
            recent_submissions: 0,
        }
    }

    pub fn score(&self, w: &SelectionWeights) -> f64 {
        w.completion * self.completion_rate - w.queued * self.queued_count as f64 - w.failure * self.failure_rate
    }
}

/// Highest-scoring site; ties go to the lexicographically smallest name.
pub fn site_select(states: &[SiteScoreState], weights: &SelectionWeights) -> Option<String> {
    states
        .iter()
        .max_by(|a, b| {
            a.score(weights)
                .total_cmp(&b.score(weights))
                .then_with(|| b.site.cmp(&a.site))
        })
        .map(|s| s.site.clone())
}

pub fn throttle_gate(state: &SiteScoreState, limits: &ThrottleLimits) -> bool {
    state.queued_count < limits.max_queued && state.recent_submissions < limits.max_submit_rate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackParams {
    pub max_nodes: u32,
    pub cores_per_node: u32,
    /// Pilot walltime as a multiple of the longest unit packed into it.
    pub slack: f64,
}

impl PackParams {
    pub fn width(&self) -> u32 {
        self.max_nodes * self.cores_per_node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Provisioning {
    /// Submit the plan's pilot descriptions once, at the start.
    Static,
    /// Size pilots on the fly from each site's backlog; the plan's pilot
    /// descriptions bound how many may exist per site.
    Packed(PackParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub binding: BindingMode,
    pub pilot_descriptions: Vec<PilotDescription>,
    #[serde(default)]
    pub scheduler: SchedulerParams,
    pub provisioning: Provisioning,
    pub concurrency_pct: f64,
    pub resource_pct: f64,
}

impl ExecutionPlan {
    /// Distinct sites, in first-appearance order.
    pub fn sites(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for d in &self.pilot_descriptions {
            if !out.contains(&d.site.as_str()) {
                out.push(&d.site);
            }
        }
        out
    }

    pub fn pilots_on(&self, site: &str) -> u32 {
        self.pilot_descriptions.iter().filter(|d| d.site == site).count() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOverheads {
    pub bootstrap_s: f64,
    pub shutdown_s: f64,
    /// Per-unit time on top of its duration: dispatch plus worst-case staging.
    pub unit_margin_s: f64,
}

impl PlanOverheads {
    pub const ZERO: PlanOverheads = PlanOverheads {
        bootstrap_s: 0.0,
        shutdown_s: 0.0,
        unit_margin_s: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AimesPlanner {
    pub pilots_per_site: u32,
    pub concurrency_pct: f64,
    pub resource_pct: f64,
    pub overheads: PlanOverheads,
}

impl AimesPlanner {
    pub fn new(pilots_per_site: u32, overheads: PlanOverheads) -> Self {
        AimesPlanner {
            pilots_per_site,
            concurrency_pct: 100.0,
            resource_pct: 100.0,
            overheads,
        }
    }

    /// Sizes identical pilots so that together they hold the whole workload
    /// at once, each with enough walltime to run it alone.
    pub fn plan(&self, w: &Workload, sites: &[Site], task_duration_s: f64) -> Result<ExecutionPlan> {
        if w.is_empty() {
            return Err(Error::invalid("workload is empty"));
        }
        if sites.is_empty() {
            return Err(Error::invalid("no sites given"));
        }
        if self.pilots_per_site < 1 {
            return Err(Error::invalid("pilots_per_site must be >= 1"));
        }
        if !(task_duration_s > 0.0 && task_duration_s.is_finite()) {
            return Err(Error::invalid("task duration must be > 0"));
        }
        check_pct("concurrency_pct", self.concurrency_pct)?;
        check_pct("resource_pct", self.resource_pct)?;

        let used = ((sites.len() as f64 * self.resource_pct / 100.0).ceil() as usize).clamp(1, sites.len());
        let sites = &sites[..used];
        let n_pilots = u64::from(self.pilots_per_site) * used as u64;

        let core_sum: u64 = w.tasks().iter().map(|t| u64::from(t.cores)).sum();
        let concurrent = ((core_sum as f64 * self.concurrency_pct / 100.0).ceil() as u64).max(1);
        let widest = w.max_cores();
        let cores = (concurrent.div_ceil(n_pilots) as u32).max(widest);

        for s in sites {
            if cores > s.total_cores {
                return Err(Error::CapacityExceeded {
                    site: s.name.clone(),
                    requested: cores,
                    available: s.total_cores,
                });
            }
        }

        let per_generation = u64::from(cores / widest);
        let generations = (w.len() as u64).div_ceil(per_generation);
        let o = &self.overheads;
        let walltime_s =
            generations as f64 * (task_duration_s + o.unit_margin_s) + o.bootstrap_s + o.shutdown_s;

        let pilot_descriptions = sites
            .iter()
            .flat_map(|s| {
                (0..self.pilots_per_site).map(move |_| PilotDescription {
                    site: s.name.clone(),
                    cores,
                    walltime_s,
                    bootstrap_s: o.bootstrap_s,
                    shutdown_s: o.shutdown_s,
                })
            })
            .collect();

        Ok(ExecutionPlan {
            binding: BindingMode::LateToPilot,
            pilot_descriptions,
            scheduler: SchedulerParams::default(),
            provisioning: Provisioning::Static,
            concurrency_pct: self.concurrency_pct,
            resource_pct: self.resource_pct,
        })
    }
}

fn check_pct(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 100.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be in (0, 100], got {v}")))
    }
}

/// Late-binding plan with default sizing options and no overheads.
pub fn plan_aimes(w: &Workload, sites: &[Site], task_duration_s: f64, pilots_per_site: u32) -> Result<ExecutionPlan> {
    AimesPlanner::new(pilots_per_site, PlanOverheads::ZERO).plan(w, sites, task_duration_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedShape {
    pub pilots_per_site: u32,
    pub cores_per_pilot: u32,
    pub walltime_s: f64,
}

/// Replicates one pilot shape on every site.
pub fn plan_fixed(
    w: &Workload,
    sites: &[Site],
    shape: FixedShape,
    binding: BindingMode,
    overheads: PlanOverheads,
) -> Result<ExecutionPlan> {
    if sites.is_empty() {
        return Err(Error::invalid("no sites given"));
    }
    if shape.pilots_per_site < 1 || shape.cores_per_pilot < 1 {
        return Err(Error::invalid("pilots_per_site and cores_per_pilot must be >= 1"));
    }
    let longest = w.tasks().iter().map(|t| t.duration_s).fold(0.0, f64::max);
    let needed = longest + overheads.unit_margin_s + overheads.bootstrap_s + overheads.shutdown_s;
    if shape.walltime_s < needed {
        return Err(Error::InfeasiblePlan(format!(
            "walltime {} s is shorter than one task plus overheads ({needed} s)",
            shape.walltime_s
        )));
    }
    for s in sites {
        if shape.cores_per_pilot > s.total_cores {
            return Err(Error::CapacityExceeded {
                site: s.name.clone(),
                requested: shape.cores_per_pilot,
                available: s.total_cores,
            });
        }
    }
    let pilot_descriptions = sites
        .iter()
        .flat_map(|s| {
            (0..shape.pilots_per_site).map(move |_| PilotDescription {
                site: s.name.clone(),
                cores: shape.cores_per_pilot,
                walltime_s: shape.walltime_s,
                bootstrap_s: overheads.bootstrap_s,
                shutdown_s: overheads.shutdown_s,
            })
        })
        .collect();
    Ok(ExecutionPlan {
        binding,
        pilot_descriptions,
        scheduler: SchedulerParams::default(),
        provisioning: Provisioning::Static,
        concurrency_pct: 100.0,
        resource_pct: 100.0,
    })
}

/// Early-binding plan that packs each site's backlog into pilots of at most
/// `pack.width()` cores, keeping at most `max_pilots_per_site` per site.
pub fn plan_packed(
    w: &Workload,
    sites: &[Site],
    max_pilots_per_site: u32,
    pack: PackParams,
    scheduler: SchedulerParams,
    overheads: PlanOverheads,
) -> Result<ExecutionPlan> {
    if pack.max_nodes < 1 || pack.cores_per_node < 1 || !(pack.slack >= 1.0) {
        return Err(Error::invalid("packing needs max_nodes, cores_per_node >= 1 and slack >= 1"));
    }
    let longest = w.tasks().iter().map(|t| t.duration_s).fold(0.0, f64::max);
    let shape = FixedShape {
        pilots_per_site: max_pilots_per_site,
        cores_per_pilot: pack.width(),
        walltime_s: pack.slack * longest,
    };
    let mut plan = plan_fixed(w, sites, shape, BindingMode::EarlyToResource, overheads)?;
    plan.provisioning = Provisioning::Packed(pack);
    plan.scheduler = scheduler;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitShape {
    pub cores: u32,
    pub duration_s: f64,
}

/// First-fit-decreasing by cores into boxes of `pack.width()` cores. Each box
/// becomes a pilot as wide as what it holds, with walltime `slack` times its
/// longest unit.
pub fn pack_pilots(
    site: &str,
    pending: &[UnitShape],
    pack: &PackParams,
    bootstrap_s: f64,
    shutdown_s: f64,
) -> Result<Vec<PilotDescription>> {
    let width = pack.width();
    if width == 0 {
        return Err(Error::invalid("pilot width must be >= 1 core"));
    }
    if let Some(u) = pending.iter().find(|u| u.cores > width) {
        return Err(Error::Unschedulable(format!(
            "unit of {} cores exceeds pilot width {width} on {site}",
            u.cores
        )));
    }
    let mut order: Vec<&UnitShape> = pending.iter().collect();
    order.sort_by_key(|u| std::cmp::Reverse(u.cores));

    // (used cores, longest duration)
    let mut boxes: Vec<(u32, f64)> = Vec::new();
    for u in order {
        match boxes.iter_mut().find(|b| b.0 + u.cores <= width) {
            Some(b) => {
                b.0 += u.cores;
                b.1 = b.1.max(u.duration_s);
            }
            None => boxes.push((u.cores, u.duration_s)),
        }
    }
    boxes
        .into_iter()
        .map(|(cores, longest)| {
            let d = PilotDescription {
                site: site.to_string(),
                cores,
                walltime_s: pack.slack * longest,
                bootstrap_s,
                shutdown_s,
            };
            d.validate()?;
            Ok(d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::make_bot;

    fn sites(n: usize, cores: u32) -> Vec<Site> {
        (0..n).map(|i| Site::idle(format!("site{i}"), cores)).collect()
    }

    #[test]
    fn aimes_sizes() {
        let w = make_bot(2048, 1200.0, 1).unwrap();
        let p = plan_aimes(&w, &sites(2, 100_000), 1200.0, 1).unwrap();
        assert_eq!(p.pilot_descriptions.len(), 2);
        assert!(p.pilot_descriptions.iter().all(|d| d.cores == 1024 && d.walltime_s == 2400.0));
        assert_eq!(p.binding, BindingMode::LateToPilot);

        let w = make_bot(8, 1200.0, 1).unwrap();
        let p = plan_aimes(&w, &sites(4, 100_000), 1200.0, 1).unwrap();
        assert_eq!(p.pilot_descriptions.len(), 4);
        assert!(p.pilot_descriptions.iter().all(|d| d.cores == 2 && d.walltime_s == 4800.0));

        let w = make_bot(1, 1200.0, 1).unwrap();
        let p = plan_aimes(&w, &sites(1, 100_000), 1200.0, 1).unwrap();
        assert_eq!(p.pilot_descriptions[0].cores, 1);
        assert_eq!(p.pilot_descriptions[0].walltime_s, 1200.0);
    }

    #[test]
    fn aimes_capacity() {
        let w = make_bot(2048, 1200.0, 1).unwrap();
        assert!(matches!(
            plan_aimes(&w, &sites(1, 512), 1200.0, 1),
            Err(Error::CapacityExceeded { requested: 2048, .. })
        ));
    }

    #[test]
    fn aimes_site_order_invariant() {
        let w = make_bot(100, 60.0, 1).unwrap();
        let mut s = sites(3, 1000);
        let a = plan_aimes(&w, &s, 60.0, 2).unwrap();
        s.reverse();
        let b = plan_aimes(&w, &s, 60.0, 2).unwrap();
        let shape = |p: &ExecutionPlan| {
            let mut v: Vec<_> = p.pilot_descriptions.iter().map(|d| (d.cores, d.walltime_s.to_bits())).collect();
            v.sort();
            v
        };
        assert_eq!(shape(&a), shape(&b));
    }

    #[test]
    fn aimes_overheads_and_pct() {
        let w = make_bot(64, 100.0, 1).unwrap();
        let planner = AimesPlanner {
            pilots_per_site: 1,
            concurrency_pct: 50.0,
            resource_pct: 50.0,
            overheads: PlanOverheads {
                bootstrap_s: 10.0,
                shutdown_s: 5.0,
                unit_margin_s: 1.0,
            },
        };
        let p = planner.plan(&w, &sites(4, 1000), 100.0).unwrap();
        assert_eq!(p.pilot_descriptions.len(), 2);
        assert_eq!(p.pilot_descriptions[0].cores, 16);
        assert_eq!(p.pilot_descriptions[0].walltime_s, 4.0 * 101.0 + 15.0);
    }

    #[test]
    fn fixed_plans() {
        let w = make_bot(32, 1200.0, 1).unwrap();
        let shape = FixedShape {
            pilots_per_site: 20,
            cores_per_pilot: 16,
            walltime_s: 1500.0,
        };
        let p = plan_fixed(&w, &sites(2, 10_000), shape, BindingMode::EarlyToResource, PlanOverheads::ZERO).unwrap();
        assert_eq!(p.pilot_descriptions.len(), 40);
        assert_eq!(p.pilots_on("site1"), 20);

        let short = FixedShape {
            walltime_s: 1000.0,
            ..shape
        };
        assert!(matches!(
            plan_fixed(&w, &sites(2, 10_000), short, BindingMode::EarlyToResource, PlanOverheads::ZERO),
            Err(Error::InfeasiblePlan(_))
        ));
    }

    #[test]
    fn select_scores() {
        let w = SelectionWeights::default();
        let mut a = SiteScoreState::new("a");
        let mut b = SiteScoreState::new("b");
        assert_eq!(site_select(&[b.clone(), a.clone()], &w).as_deref(), Some("a"));
        a.failure_rate = 1.0;
        assert_eq!(site_select(&[a.clone(), b.clone()], &w).as_deref(), Some("b"));
        a.failure_rate = 0.0;
        b.queued_count = 3;
        assert_eq!(site_select(&[a, b], &w).as_deref(), Some("a"));
        assert_eq!(site_select(&[], &w), None);
    }

    #[test]
    fn gate() {
        let limits = ThrottleLimits {
            max_queued: 2,
            max_submit_rate: 5,
            rate_window_s: 1.0,
        };
        let mut s = SiteScoreState::new("a");
        assert!(throttle_gate(&s, &limits));
        s.queued_count = 2;
        assert!(!throttle_gate(&s, &limits));
        s.queued_count = 0;
        s.recent_submissions = 5;
        assert!(!throttle_gate(&s, &limits));
    }

    fn ones(n: usize) -> Vec<UnitShape> {
        vec![
            UnitShape {
                cores: 1,
                duration_s: 1200.0
            };
            n
        ]
    }

    #[test]
    fn pack_examples() {
        let pack = PackParams {
            max_nodes: 1,
            cores_per_node: 16,
            slack: 1.25,
        };
        let p = pack_pilots("s", &ones(16), &pack, 0.0, 0.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cores, 16);
        assert_eq!(p[0].walltime_s, 1500.0);

        let p = pack_pilots("s", &ones(17), &pack, 0.0, 0.0).unwrap();
        assert_eq!(p.iter().map(|d| d.cores).collect::<Vec<_>>(), vec![16, 1]);

        assert!(pack_pilots("s", &[], &pack, 0.0, 0.0).unwrap().is_empty());

        let wide = [UnitShape {
            cores: 17,
            duration_s: 10.0,
        }];
        assert!(matches!(pack_pilots("s", &wide, &pack, 0.0, 0.0), Err(Error::Unschedulable(_))));
    }

    #[test]
    fn pack_decreasing() {
        let pack = PackParams {
            max_nodes: 1,
            cores_per_node: 8,
            slack: 2.0,
        };
        let units: Vec<UnitShape> = [3, 5, 2, 6, 1]
            .iter()
            .map(|&c| UnitShape {
                cores: c,
                duration_s: c as f64,
            })
            .collect();
        let p = pack_pilots("s", &units, &pack, 0.0, 0.0).unwrap();
        // 6+2, 5+3, 1
        assert_eq!(p.iter().map(|d| d.cores).collect::<Vec<_>>(), vec![8, 8, 1]);
        assert_eq!(p[0].walltime_s, 12.0);
    }
}
